//! Worst-case Bellman error search over out-space value space and the
//! value-space search cache builder built on it.
//!
//! For an entry state `t`, a cached policy `pi`, an internal state `s` and an
//! action `a`, the one-step lookahead error of `pi` at `(s, a)` is affine in
//! `vo`. Maximising it over the polytope where `pi` dominates at `t`
//! (intersected with the value box) is a small LP in `d` variables. The
//! maximum over all such quadruples is the worst Bellman error of the
//! dominating policy anywhere in the box.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BuildMethod, Certificate, Guarantee, PolicyCache};
use crate::error::{Error, Result};
use crate::lp::{self, LpError, LpProblem, LpStatus};
use crate::mdp::{Mdp, Policy};
use crate::region::{OutSpaceValues, Region, ValueBounds};

const CHUNK: usize = 512;
const STALL_TOL: f64 = 1e-9;
const ESCAPE_TRIES: usize = 4096;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    InSpaceOnly,
    #[default]
    AllStates,
}

impl Scope {
    pub fn guarantee(self) -> Guarantee {
        match self {
            Scope::InSpaceOnly => Guarantee::InSpaceOnly,
            Scope::AllStates => Guarantee::AllStates,
        }
    }
}

/// The quadruple attaining a worst point, in global state indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Witness {
    pub entry: usize,
    pub state: usize,
    pub action: usize,
    pub policy: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstPoint {
    pub vo: OutSpaceValues,
    pub bellman_error: f64,
    pub witness: Option<Witness>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct Quad {
    policy: usize,
    entry: usize,
    state: usize,
    action: usize,
}

/// LP optima from earlier calls. Adding policies only adds dominance
/// constraints, so a remembered optimum bounds the current one from above
/// for as long as the cache grows by appending.
#[derive(Clone, Debug, Default)]
pub struct FindWorstMemo {
    optima: HashMap<Quad, f64>,
    policies: Vec<Policy>,
}

impl FindWorstMemo {
    fn sync(&mut self, cache: &PolicyCache) {
        let prefix = self.policies.len() <= cache.len()
            && self.policies.iter().zip(&cache.entries).all(|(p, e)| *p == e.policy);
        if !prefix {
            self.optima.clear();
        }
        self.policies = cache.entries.iter().map(|e| e.policy.clone()).collect();
    }

    pub fn len(&self) -> usize {
        self.optima.len()
    }

    pub fn is_empty(&self) -> bool {
        self.optima.is_empty()
    }
}

/// Successors of each `(local state, action)` split into internal and
/// out-space parts.
struct Successors {
    n_actions: usize,
    internal: Vec<Vec<(usize, f64)>>,
    out: Vec<Vec<(usize, f64)>>,
}

impl Successors {
    fn new(mdp: &Mdp, g: &Region) -> Result<Self> {
        let n_actions = mdp.n_actions();
        let mut internal = Vec::with_capacity(g.n_internal() * n_actions);
        let mut out = Vec::with_capacity(g.n_internal() * n_actions);
        for &s in &g.internal_states {
            for a in 0..n_actions {
                let mut inn = Vec::new();
                let mut ext = Vec::new();
                for (next, &p) in mdp.row(s, a).iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    if let Some(j) = g.local_index(next) {
                        inn.push((j, p));
                    } else if let Some(i) = g.out_index(next) {
                        ext.push((i, p));
                    } else {
                        return Err(Error::InvalidPartition(format!(
                            "state {s} reaches {next}, outside region {} and its boundary",
                            g.id
                        )));
                    }
                }
                internal.push(inn);
                out.push(ext);
            }
        }
        Ok(Self { n_actions, internal, out })
    }
}

/// Constant and coefficients of the lookahead error of entry `pi` at
/// `(s, a)` as an affine function of `vo`.
fn error_affine(mdp: &Mdp, cache: &PolicyCache, succ: &Successors, pi: usize, s: usize, a: usize) -> (f64, Vec<f64>) {
    let beta = mdp.discount();
    let f = &cache.entries[pi].f;
    let d = f.fan_out;
    let idx = s * succ.n_actions + a;
    let mut k = mdp.reward(cache.region.internal_states[s], a) - f.constant[s];
    let mut o: Vec<f64> = f.coeffs(s).iter().map(|c| -c).collect();
    for &(j, p) in &succ.internal[idx] {
        k += beta * p * f.constant[j];
        for (oi, c) in o.iter_mut().zip(f.coeffs(j)) {
            *oi += beta * p * c;
        }
    }
    for &(i, p) in &succ.out[idx] {
        o[i] += beta * p;
    }
    debug_assert_eq!(o.len(), d);
    (k, o)
}

/// Maximises the lookahead error of `q` over the dominance polytope.
/// Returns `-inf` when the polytope is empty.
fn solve_quad(mdp: &Mdp, cache: &PolicyCache, succ: &Successors, q: Quad) -> Result<(f64, Vec<f64>), LpError> {
    let (k, o) = error_affine(mdp, cache, succ, q.policy, q.state, q.action);
    let f = &cache.entries[q.policy].f;
    let d = f.fan_out;
    let ValueBounds { v_min, v_max } = cache.bounds;
    let mut prob = LpProblem::new(o.clone());
    for i in 0..d {
        prob.bound(i, Some(v_min), Some(v_max));
    }
    for (j, other) in cache.entries.iter().enumerate() {
        if j == q.policy {
            continue;
        }
        let coeffs: Vec<f64> = other.f.coeffs(q.entry).iter().zip(f.coeffs(q.entry)).map(|(x, y)| x - y).collect();
        prob.leq(coeffs, f.constant[q.entry] - other.f.constant[q.entry]);
    }
    if d == 0 {
        let feasible = prob.constraints.iter().all(|c| c.rhs >= -lp::FEAS_TOL * (1.0 + c.rhs.abs()));
        return Ok(if feasible { (k, Vec::new()) } else { (f64::NEG_INFINITY, Vec::new()) });
    }
    let out = lp::solve(&prob)?;
    match out.status {
        LpStatus::Optimal => {
            let x = out.solution;
            let v = k + o.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            Ok((v, x))
        }
        LpStatus::Infeasible => Ok((f64::NEG_INFINITY, Vec::new())),
        LpStatus::Unbounded => Err(LpError::Numerical("box-constrained LP reported unbounded".into())),
    }
}

pub fn find_worst(mdp: &Mdp, cache: &PolicyCache, scope: Scope) -> Result<WorstPoint> {
    find_worst_memo(mdp, cache, scope, &mut FindWorstMemo::default())
}

/// [`find_worst`] reusing and updating `memo`. Quadruples whose remembered
/// optimum is already below the running maximum are not re-solved.
pub fn find_worst_memo(mdp: &Mdp, cache: &PolicyCache, scope: Scope, memo: &mut FindWorstMemo) -> Result<WorstPoint> {
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    memo.sync(cache);
    let g = &cache.region;
    let succ = Successors::new(mdp, g)?;
    let entries: Vec<usize> = g.entry_states().iter().map(|&t| g.local_index(t).unwrap()).collect();
    let states: Vec<usize> = match scope {
        Scope::AllStates => (0..g.n_internal()).collect(),
        Scope::InSpaceOnly => entries.clone(),
    };

    let mut quads = Vec::new();
    for (pi, e) in cache.entries.iter().enumerate() {
        for &t in &entries {
            for &s in &states {
                for a in (0..mdp.n_actions()).filter(|&a| a != e.policy[s]) {
                    quads.push(Quad { policy: pi, entry: t, state: s, action: a });
                }
            }
        }
    }
    let mut ranked: Vec<(f64, Quad)> = quads
        .into_iter()
        .map(|q| (memo.optima.get(&q).copied().unwrap_or(f64::INFINITY), q))
        .collect();
    ranked.sort_by(|(bx, x), (by, y)| by.total_cmp(bx).then(x.cmp(y)));

    let mut best: Option<(f64, Quad, Vec<f64>)> = None;
    for chunk in ranked.chunks(CHUNK) {
        let live: Vec<Quad> = match &best {
            Some((b, _, _)) => chunk.iter().filter(|(bound, _)| bound >= b).map(|(_, q)| *q).collect(),
            None => chunk.iter().map(|(_, q)| *q).collect(),
        };
        if live.is_empty() {
            break;
        }
        let solved: Vec<(Quad, (f64, Vec<f64>))> = live
            .par_iter()
            .map(|&q| {
                solve_quad(mdp, cache, &succ, q).map(|r| (q, r)).map_err(|source| Error::QuadrupleLp {
                    entry: g.internal_states[q.entry],
                    state: g.internal_states[q.state],
                    action: q.action,
                    policy: q.policy,
                    source,
                })
            })
            .collect::<Result<_>>()?;
        for (q, (v, x)) in solved {
            memo.optima.insert(q, v);
            let better = match &best {
                None => v > f64::NEG_INFINITY,
                Some((b, bq, _)) => v > *b || (v == *b && q < *bq),
            };
            if better {
                best = Some((v, q, x));
            }
        }
    }

    Ok(match best {
        Some((v, q, x)) => WorstPoint {
            vo: OutSpaceValues(x),
            bellman_error: v.max(0.0),
            witness: Some(Witness {
                entry: g.internal_states[q.entry],
                state: g.internal_states[q.state],
                action: q.action,
                policy: q.policy,
            }),
        },
        None => WorstPoint { vo: cache.bounds.floor(g.fan_out()), bellman_error: 0.0, witness: None },
    })
}

/// Whether the cache's worst dominating-policy Bellman error is within
/// `eps`, along with the worst point itself.
pub fn certify(mdp: &Mdp, cache: &PolicyCache, eps: f64, scope: Scope) -> Result<(bool, WorstPoint)> {
    if !(eps > 0.0) {
        return Err(Error::InvalidEpsilon(eps));
    }
    let worst = find_worst(mdp, cache, scope)?;
    Ok((worst.bellman_error <= eps, worst))
}

#[derive(Clone, Debug)]
pub struct VssOptions {
    pub max_policies: usize,
    pub scope: Scope,
    /// Seed for the random escapes used when the search stalls.
    pub seed: u64,
    /// Consecutive escapes tolerated before giving up uncertified.
    pub max_escapes: usize,
}

impl Default for VssOptions {
    fn default() -> Self {
        Self { max_policies: 200, scope: Scope::AllStates, seed: 0, max_escapes: 5 }
    }
}

fn anchor_centroid(cache: &PolicyCache, pi: usize) -> Vec<f64> {
    let anchors = &cache.entries[pi].anchors;
    let mut c = vec![0.0; cache.fan_out()];
    for a in anchors {
        for (ci, x) in c.iter_mut().zip(a.as_slice()) {
            *ci += x / anchors.len() as f64;
        }
    }
    c
}

/// Moves the worst point a distance `eta` toward the midpoint between it and
/// the witness policy's anchors, which lies inside that policy's facet.
fn perturb(cache: &PolicyCache, worst: &WorstPoint, eta: f64) -> OutSpaceValues {
    let Some(w) = worst.witness else {
        return worst.vo.clone();
    };
    let x = worst.vo.as_slice();
    let c = anchor_centroid(cache, w.policy);
    let dir: Vec<f64> = c.iter().zip(x).map(|(ci, xi)| 0.5 * (ci - xi)).collect();
    let dist = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if dist == 0.0 {
        return worst.vo.clone();
    }
    let step = eta.min(dist) / dist;
    let p = OutSpaceValues(x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect());
    if cache.bounds.contains(&p, 0.0) {
        p
    } else {
        worst.vo.clone()
    }
}

/// A uniformly random point of the box at which the witness policy
/// dominates at the witness entry state, by rejection sampling.
fn escape_point(cache: &PolicyCache, worst: &WorstPoint, rng: &mut ChaCha8Rng) -> OutSpaceValues {
    let ValueBounds { v_min, v_max } = cache.bounds;
    let d = cache.fan_out();
    let mut sample = || OutSpaceValues((0..d).map(|_| rng.gen_range(v_min..=v_max)).collect());
    let Some(w) = worst.witness else {
        return sample();
    };
    let t = cache.region.local_index(w.entry).unwrap();
    for _ in 0..ESCAPE_TRIES {
        let p = sample();
        let mine = cache.entries[w.policy].f.value(t, p.as_slice());
        let best = cache.value_at(t, p.as_slice()).unwrap();
        if mine >= best - 1e-12 * best.abs().max(1.0) {
            return p;
        }
    }
    sample()
}

fn stalled(prev: &WorstPoint, cur: &WorstPoint) -> bool {
    (prev.bellman_error - cur.bellman_error).abs() <= STALL_TOL
        && prev.vo.as_slice().iter().zip(cur.vo.as_slice()).all(|(a, b)| (a - b).abs() <= STALL_TOL)
}

/// Grows a cache from the policy optimal at the lower corner of the box by
/// repeatedly adding the policy optimal near the current worst point, until
/// the worst Bellman error is within `eps` or the policy budget runs out.
pub fn build_vss_cache(mdp: &Mdp, g: &Region, eps: f64, bounds: ValueBounds, opts: &VssOptions) -> Result<PolicyCache> {
    if !(eps > 0.0) {
        return Err(Error::InvalidEpsilon(eps));
    }
    let mut cache = PolicyCache::seeded(mdp, g, bounds)?;
    let mut memo = FindWorstMemo::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eta = 1e-3 * bounds.width();
    let max_iterations = 10 * opts.max_policies.max(1) + 100;
    let mut history = Vec::new();
    let mut prev: Option<WorstPoint> = None;
    let mut escapes = 0;
    let (certified, worst) = loop {
        let worst = find_worst_memo(mdp, &cache, opts.scope, &mut memo)?;
        history.push(worst.bellman_error);
        if worst.bellman_error <= eps {
            break (true, worst);
        }
        if cache.len() >= opts.max_policies || history.len() >= max_iterations {
            break (false, worst);
        }
        if prev.as_ref().is_some_and(|p| stalled(p, &worst)) {
            escapes += 1;
            if escapes > opts.max_escapes {
                break (false, worst);
            }
            let target = escape_point(&cache, &worst, &mut rng);
            cache.insert_optimal_at(mdp, &target)?;
        } else {
            escapes = 0;
            // The interior point can reproduce a cached policy when the
            // worst point sits on a facet boundary; the corner itself then
            // usually yields a new one.
            let (_, fresh) = cache.insert_optimal_at(mdp, &perturb(&cache, &worst, eta))?;
            if !fresh {
                cache.insert_optimal_at(mdp, &worst.vo)?;
            }
        }
        prev = Some(worst);
    };
    cache.certificate = Some(Certificate {
        method: BuildMethod::Vss,
        eps,
        guarantee: opts.scope.guarantee(),
        worst_error: worst.bellman_error,
        worst_point: worst.vo,
        certified,
        history,
    });
    Ok(cache)
}
