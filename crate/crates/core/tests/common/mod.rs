#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wcmdp::cache::PolicyCache;
use wcmdp::highlevel::FlattenedPolicy;
use wcmdp::lp::{LpProblem, LpStatus};
use wcmdp::mdp::{policy_evaluation, Mdp};
use wcmdp::region::{extend_policy, extract_region_mdp, OutSpaceValues, RegionPartition};

/// A random LP with every variable boxed.
#[derive(Clone, Debug)]
pub struct BoxedLp {
    pub c: Vec<f64>,
    pub rows: Vec<(Vec<f64>, f64)>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxedLp {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.gen_range(1..=4);
        let m = rng.gen_range(0..=8);
        // Small integers make degenerate and infeasible instances common.
        let mut draw = |k: i32| rng.gen_range(-k..=k) as f64;
        let c = (0..n).map(|_| draw(5)).collect();
        let rows = (0..m).map(|_| ((0..n).map(|_| draw(4)).collect(), draw(6) + 3.0)).collect();
        let lo: Vec<f64> = (0..n).map(|_| draw(3)).collect();
        let hi = lo.iter().map(|l| l + rng.gen_range(0..=4) as f64).collect();
        Self { c, rows, lo, hi }
    }

    pub fn to_problem(&self) -> LpProblem {
        let mut p = LpProblem::new(self.c.clone());
        for (a, b) in &self.rows {
            p.leq(a.clone(), *b);
        }
        for (i, (l, h)) in self.lo.iter().zip(&self.hi).enumerate() {
            p.bound(i, Some(*l), Some(*h));
        }
        p
    }

    fn all_rows(&self) -> Vec<(Vec<f64>, f64)> {
        let n = self.c.len();
        let mut rows = self.rows.clone();
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            rows.push((e.clone(), self.hi[i]));
            e[i] = -1.0;
            rows.push((e, -self.lo[i]));
        }
        rows
    }

    pub fn feasible(&self, x: &[f64], tol: f64) -> bool {
        self.all_rows().iter().all(|(a, b)| a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() <= b + tol)
    }

    /// Best objective over all basic feasible points, or `None` when no
    /// vertex is feasible. The box makes the feasible set bounded, so this is
    /// the optimum whenever one exists.
    pub fn vertex_optimum(&self) -> Option<f64> {
        let n = self.c.len();
        let rows = self.all_rows();
        let mut best: Option<f64> = None;
        for subset in combinations(rows.len(), n) {
            let a = DMatrix::from_fn(n, n, |i, j| rows[subset[i]].0[j]);
            let b = DVector::from_fn(n, |i, _| rows[subset[i]].1);
            let Some(x) = a.lu().solve(&b) else { continue };
            if !x.iter().all(|v| v.is_finite()) {
                continue;
            }
            let x: Vec<f64> = x.iter().copied().collect();
            if self.feasible(&x, 1e-9) {
                let z: f64 = self.c.iter().zip(&x).map(|(p, q)| p * q).sum();
                best = Some(best.map_or(z, |b: f64| b.max(z)));
            }
        }
        best
    }
}

pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

pub fn lp_status_matches(lp: &BoxedLp, status: LpStatus) -> bool {
    match lp.vertex_optimum() {
        Some(_) => status == LpStatus::Optimal,
        None => status == LpStatus::Infeasible,
    }
}

/// Exact Bellman error, over internal states, of the policy dominating at
/// each entry state, maximised over entry states. Computed by evaluating the
/// extracted region MDP directly.
pub fn exact_dominating_error(mdp: &Mdp, cache: &PolicyCache, vo: &OutSpaceValues) -> f64 {
    let g = &cache.region;
    let sub = extract_region_mdp(mdp, g, vo).unwrap();
    let mut worst = f64::NEG_INFINITY;
    let mut seen = Vec::new();
    for t in g.entry_states() {
        let i = cache.dominating_local(g.local_index(t).unwrap(), vo.as_slice()).unwrap();
        if seen.contains(&i) {
            continue;
        }
        seen.push(i);
        let v = policy_evaluation(&sub, &extend_policy(g, &cache.entries[i].policy)).unwrap();
        for s in 0..g.n_internal() {
            for a in 0..sub.n_actions() {
                worst = worst.max(sub.q_value(s, a, &v.0) - v.0[s]);
            }
        }
    }
    worst
}

/// Evenly spaced points over the box, `per_axis` per coordinate.
pub fn box_grid(cache: &PolicyCache, per_axis: usize) -> Vec<OutSpaceValues> {
    let d = cache.fan_out();
    let (lo, w) = (cache.bounds.v_min, cache.bounds.width());
    let total = per_axis.pow(d as u32);
    (0..total)
        .map(|mut k| {
            let mut v = vec![0.0; d];
            for c in v.iter_mut() {
                *c = lo + w * (k % per_axis) as f64 / (per_axis - 1) as f64;
                k /= per_axis;
            }
            OutSpaceValues(v)
        })
        .collect()
}

pub fn scan_worst(mdp: &Mdp, cache: &PolicyCache, per_axis: usize) -> f64 {
    box_grid(cache, per_axis)
        .iter()
        .map(|vo| exact_dominating_error(mdp, cache, vo))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn uniform_vo(rng: &mut ChaCha8Rng, cache: &PolicyCache) -> OutSpaceValues {
    let b = cache.bounds;
    OutSpaceValues((0..cache.fan_out()).map(|_| rng.gen_range(b.v_min..=b.v_max)).collect())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sample(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap()
}

/// Monte-Carlo estimate (mean, standard error) of the discounted return of
/// the entry-indexed execution started at `state` with region entry `entry`.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    mdp: &Mdp,
    partition: &RegionPartition,
    flat: &FlattenedPolicy,
    state: usize,
    entry: usize,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = rng(seed);
    let beta = mdp.discount();
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..episodes {
        let (mut s, mut e, mut disc, mut ret) = (state, entry, 1.0, 0.0);
        let mut region = partition.assignment[s];
        for _ in 0..horizon {
            let local = partition.regions[region].local_index(s).unwrap();
            let a = flat.action(region, e, local);
            ret += disc * mdp.reward(s, a);
            disc *= beta;
            let next = sample(mdp.row(s, a), &mut rng);
            let r2 = partition.assignment[next];
            if r2 != region {
                region = r2;
                e = flat.regions[r2].entry_states.iter().position(|&t| t == next).unwrap();
            }
            s = next;
        }
        sum += ret;
        sq += ret * ret;
    }
    let n = episodes as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}
