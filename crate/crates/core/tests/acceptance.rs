//! One line per acceptance criterion. Runs without the libtest harness so the
//! lines are always printed; exits non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;

use common::{box_grid, exact_dominating_error, lp_status_matches, rng, uniform_vo, BoxedLp};
use wcmdp::bench;
use wcmdp::cache::{build_vss_cache, find_worst, PolicyCache, Scope, VssOptions};
use wcmdp::highlevel::{attest, prioritized_solve, transfer, PrioritizeOptions, RefineMode};
use wcmdp::hull::upper_bound_at;
use wcmdp::lp::{self, LpStatus};
use wcmdp::mdp::{bellman_error, policy_evaluation, policy_iteration, value_iteration, Mdp, Policy};
use wcmdp::problems::{exit_room_fixture, four_rooms, random_mdp, room1_benchmark, GridworldSpec};
use wcmdp::region::{optimal_region_values, OutSpaceValues, RegionPartition, ValueBounds};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn four_room_setup(room: usize) -> (Mdp, RegionPartition) {
    four_rooms(&GridworldSpec::four_rooms_reward_in(room)).unwrap()
}

fn four_room_caches(mdp: &Mdp, p: &RegionPartition, eps: f64) -> Vec<PolicyCache> {
    let b = ValueBounds::new(0.0, 20.0).unwrap();
    p.regions.par_iter().map(|g| build_vss_cache(mdp, g, eps, b, &VssOptions::default()).unwrap()).collect()
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let (coarse, _) = bench::room1(0.01, &VssOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let (fine, _) = bench::room1(0.001, &VssOptions::default()).unwrap();
    let detail = format!(
        "{} policies, certified={}, worst={:.2e}, {:.2?}, grid counts {} / {}",
        coarse.vss_cache_size, coarse.certified, coarse.worst_error, elapsed, coarse.grid_count, fine.grid_count
    );
    ensure(
        coarse.certified
            && coarse.scope == Scope::AllStates
            && (10..=60).contains(&coarse.vss_cache_size)
            && elapsed < Duration::from_secs(600)
            && coarse.grid_count == 4_000_000
            && fine.grid_count == 400_000_000,
        detail,
    )
}

fn criterion_2() -> Check {
    let (coarse, _) = bench::room1(0.01, &VssOptions::default()).unwrap();
    let (fine, _) = bench::room1(0.001, &VssOptions::default()).unwrap();
    let limit = 1.5 * coarse.vss_cache_size as f64;
    ensure(
        fine.certified && fine.vss_cache_size as f64 <= limit,
        format!("eps=0.01: {}, eps=0.001: {} (limit {limit})", coarse.vss_cache_size, fine.vss_cache_size),
    )
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let (mdp, p) = four_room_setup(1);
    let caches = four_room_caches(&mdp, &p, 0.01);
    let (_, att) = attest(&mdp, &p, &caches, 0.01).unwrap();
    let elapsed = start.elapsed();
    ensure(
        att.all_states_certified && att.max_deviation <= 0.2 + 1e-6 && elapsed < Duration::from_secs(300),
        format!("max deviation {:.3e} (bound {:.3}), {:.2?}", att.max_deviation, att.bound, elapsed),
    )
}

fn criterion_4() -> Check {
    let eps = 0.01;
    let mut fixtures: Vec<(Mdp, PolicyCache)> = Vec::new();
    let (mdp, g, b) = exit_room_fixture();
    fixtures.push((mdp.clone(), build_vss_cache(&mdp, &g, eps, b, &VssOptions::default()).unwrap()));
    let (mdp, g, b) = room1_benchmark();
    fixtures.push((mdp.clone(), build_vss_cache(&mdp, &g, eps, b, &VssOptions::default()).unwrap()));
    let (mdp, p) = four_room_setup(1);
    for c in four_room_caches(&mdp, &p, eps) {
        fixtures.push((mdp.clone(), c));
    }
    let mut worst = f64::NEG_INFINITY;
    for (i, (mdp, cache)) in fixtures.iter().enumerate() {
        if !cache.certificate.as_ref().is_some_and(|c| c.certified) {
            return Err(format!("fixture {i} did not certify"));
        }
        let mut r = rng(100 + i as u64);
        let samples: Vec<OutSpaceValues> = (0..1000).map(|_| uniform_vo(&mut r, cache)).collect();
        let w = samples.par_iter().map(|vo| exact_dominating_error(mdp, cache, vo)).reduce(|| f64::NEG_INFINITY, f64::max);
        worst = worst.max(w);
    }
    ensure(worst <= eps + 1e-6, format!("{} caches x 1000 samples, worst exact error {worst:.3e}", fixtures.len()))
}

/// A random point of the anchors' convex hull.
fn in_hull(r: &mut rand_chacha::ChaCha8Rng, anchors: &[&OutSpaceValues]) -> OutSpaceValues {
    let w: Vec<f64> = anchors.iter().map(|_| -r.gen_range(1e-12f64..1.0).ln()).collect();
    let total: f64 = w.iter().sum();
    let d = anchors[0].dim();
    OutSpaceValues((0..d).map(|c| anchors.iter().zip(&w).map(|(a, wi)| a.0[c] * wi / total).sum()).collect())
}

fn criterion_5() -> Check {
    let mut fixtures = Vec::new();
    let (mdp, g, b) = exit_room_fixture();
    fixtures.push((mdp.clone(), build_vss_cache(&mdp, &g, 0.01, b, &VssOptions::default()).unwrap()));
    let (mdp, g, b) = room1_benchmark();
    fixtures.push((mdp.clone(), build_vss_cache(&mdp, &g, 0.01, b, &VssOptions::default()).unwrap()));
    let mut checked = 0;
    for (i, (mdp, cache)) in fixtures.iter().enumerate() {
        let anchors: Vec<&OutSpaceValues> = cache.entries.iter().flat_map(|e| &e.anchors).collect();
        let mut r = rng(200 + i as u64);
        let points: Vec<OutSpaceValues> = (0..100).map(|_| in_hull(&mut r, &anchors)).collect();
        let bad = points
            .par_iter()
            .map(|vo| {
                let (_, exact) = optimal_region_values(mdp, &cache.region, vo).unwrap();
                let mut bad = Vec::new();
                for (local, &s) in cache.region.internal_states.iter().enumerate() {
                    let loose = upper_bound_at(cache, s, vo, false).unwrap();
                    let tight = upper_bound_at(cache, s, vo, true).unwrap();
                    let v = exact[local];
                    if !(tight.lower - 1e-6 <= v && v <= tight.upper + 1e-6 && tight.upper <= loose.upper + 1e-9) {
                        bad.push(format!("state {s} at {:?}: {} <= {v} <= {} (loose {})", vo.0, tight.lower, tight.upper, loose.upper));
                    }
                }
                bad
            })
            .flatten()
            .collect::<Vec<_>>();
        if let Some(b) = bad.first() {
            return Err(format!("fixture {i}: {b}"));
        }
        checked += points.len() * cache.region.n_internal();
    }
    Ok(format!("{checked} (point, state) pairs inside [lower, upper], tightened <= untightened"))
}

fn criterion_6() -> Check {
    let eps = 0.01;
    let mut fixtures: Vec<(String, Mdp, PolicyCache)> = Vec::new();
    let (mdp, g, b) = exit_room_fixture();
    let full = build_vss_cache(&mdp, &g, eps, b, &VssOptions::default()).unwrap();
    fixtures.push(("exit room, seed".into(), mdp.clone(), PolicyCache::seeded(&mdp, &g, b).unwrap()));
    fixtures.push(("exit room, full".into(), mdp.clone(), full));
    let (mdp, g, b) = room1_benchmark();
    let full = build_vss_cache(&mdp, &g, eps, b, &VssOptions::default()).unwrap();
    for k in [1, 4, 8] {
        let mut c = full.clone();
        c.entries.truncate(k);
        fixtures.push((format!("room1, {k} policies"), mdp.clone(), c));
    }
    fixtures.push(("room1, full".into(), mdp.clone(), full));
    let (mdp, p) = four_room_setup(1);
    for c in four_room_caches(&mdp, &p, eps) {
        fixtures.push((format!("four rooms, room {}", c.region.id), mdp.clone(), c));
    }
    let mut lines = Vec::new();
    for (name, mdp, cache) in &fixtures {
        let lp = find_worst(mdp, cache, Scope::AllStates).unwrap().bellman_error;
        let scan = box_grid(cache, 200)
            .par_iter()
            .map(|vo| exact_dominating_error(mdp, cache, vo))
            .reduce(|| f64::NEG_INFINITY, f64::max);
        if lp < scan - eps / 10.0 {
            return Err(format!("{name}: LP {lp:.6e} < scan {scan:.6e} - eps/10"));
        }
        lines.push(format!("{name}: {lp:.3e}>={scan:.3e}"));
    }
    Ok(format!("{} fixtures ({})", fixtures.len(), lines.join("; ")))
}

fn criterion_7() -> Check {
    let (mut optimal, mut infeasible) = (0, 0);
    for seed in 0..500 {
        let lp = BoxedLp::random(&mut rng(seed));
        let out = lp::solve(&lp.to_problem()).map_err(|e| format!("seed {seed}: {e}"))?;
        if !lp_status_matches(&lp, out.status) {
            return Err(format!("seed {seed}: status {:?} disagrees with enumeration", out.status));
        }
        if out.status == LpStatus::Optimal {
            let best = lp.vertex_optimum().unwrap();
            if (out.objective_value - best).abs() > 1e-8 {
                return Err(format!("seed {seed}: objective {} vs {best}", out.objective_value));
            }
            optimal += 1;
        } else {
            infeasible += 1;
        }
    }
    Ok(format!("500 LPs: {optimal} optimal, {infeasible} infeasible, all match"))
}

fn criterion_8() -> Check {
    let mut r = rng(8);
    let mut tightest = f64::INFINITY;
    for k in 0..50 {
        let n = r.gen_range(2..10);
        let a = r.gen_range(1..4);
        let beta = r.gen_range(0.5..0.99);
        let mdp = random_mdp(n, a, beta, 800 + k).unwrap();
        let pi = Policy((0..n).map(|_| r.gen_range(0..a)).collect());
        let vpi = policy_evaluation(&mdp, &pi).unwrap();
        let be = bellman_error(&mdp, &vpi).unwrap();
        let (_, vstar) = policy_iteration(&mdp).unwrap();
        for s in 0..n {
            let slack = vpi.0[s] + be.max_error / (1.0 - beta) - vstar.0[s];
            if slack < -1e-9 {
                return Err(format!("pair {k}, state {s}: bound violated by {}", -slack));
            }
            tightest = tightest.min(slack);
        }
    }
    Ok(format!("50 pairs, smallest slack {tightest:.3e}"))
}

fn criterion_9() -> Check {
    let eps = 0.01;
    let (old, p) = four_room_setup(1);
    let (new, _) = four_room_setup(3);
    let caches = four_room_caches(&old, &p, eps);
    let (report, updated) = transfer(&old, &new, &p, &caches, &PrioritizeOptions::new(eps)).unwrap();
    let reused = [0, 2].iter().all(|&r| report.regions[r].reused && report.regions[r].new_policies == 0 && updated[r] == caches[r]);
    let final_gaps = &report.outcome.log.last().unwrap().gaps;
    let settled = report.outcome.converged && final_gaps.iter().all(|g| g.settled(eps));
    let counts: Vec<String> =
        report.regions.iter().map(|r| format!("room {}: kept {} new {}", r.region + 1, r.kept_policies, r.new_policies)).collect();
    ensure(reused && settled, format!("{}; converged={}", counts.join(", "), report.outcome.converged))
}

fn criterion_10() -> Check {
    let (mdp, p) = four_room_setup(1);
    let b = ValueBounds::new(0.0, 20.0).unwrap();
    let mut caches: Vec<PolicyCache> = p.regions.iter().map(|g| PolicyCache::seeded(&mdp, g, b).unwrap()).collect();
    let opts = PrioritizeOptions { mode: RefineMode::Replace, ..PrioritizeOptions::new(1e-6) };
    let out = prioritized_solve(&mdp, &p, &mut caches, &opts).unwrap();
    let vstar = value_iteration(&mdp, 1e-9);
    let err = out
        .solution
        .boundary_states
        .iter()
        .zip(&out.solution.boundary_values)
        .map(|(&s, v)| (v - vstar.0[s]).abs())
        .fold(0.0, f64::max);
    ensure(
        out.converged && caches.iter().all(|c| c.len() == 1) && err <= 1e-3,
        format!("{} updates, max boundary error {err:.3e}", out.updates.iter().sum::<usize>()),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("room-1 cache size, certification and grid counts", criterion_1),
        ("cache stability from eps=0.01 to eps=0.001", criterion_2),
        ("hierarchical policy within eps/(1-beta) of flat optimum", criterion_3),
        ("certificate soundness on 1000 samples", criterion_4),
        ("upper/lower bounds sandwich the optimum", criterion_5),
        ("worst-error LPs dominate a dense scan", criterion_6),
        ("LP solver matches vertex enumeration", criterion_7),
        ("Bellman-error suboptimality bound", criterion_8),
        ("cache transfer after moving the reward", criterion_9),
        ("one-policy-per-room refinement", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} PASS [{secs:.1}s] {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL [{secs:.1}s] {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
