//! The reduced problem over boundary states, its solution by sweeping the
//! cached affine value functions, exact evaluation of the resulting
//! entry-indexed policy, prioritized cache refinement, and reuse of caches
//! across reward changes.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{Fingerprint, Guarantee, PolicyCache};
use crate::error::{Error, Result};
use crate::hull::cache_adequate;
use crate::linalg::lu_solve;
use crate::mdp::{value_iteration, Mdp, Policy, ValueFunction, DEFAULT_VI_TOL};
use crate::region::{compute_boundaries, OutSpaceValues, RegionPartition, ValueBounds};

pub const DEFAULT_HL_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryState {
    pub state: usize,
    /// Region holding the state as an internal state.
    pub region: usize,
    /// Position among that region's internal states.
    pub local: usize,
    /// Position in that region's in-space, if it is an entry point.
    pub entry: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HighLevelProblem {
    /// Union of all out-spaces, ascending.
    pub boundary: Vec<BoundaryState>,
    /// Per region, the boundary index of each out-space component.
    pub out_map: Vec<Vec<usize>>,
}

impl HighLevelProblem {
    pub fn len(&self) -> usize {
        self.boundary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boundary.is_empty()
    }

    /// Out-space values of `region` read from boundary `values`.
    pub fn region_vo(&self, region: usize, values: &[f64]) -> OutSpaceValues {
        OutSpaceValues(self.out_map[region].iter().map(|&u| values[u]).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighLevelSolution {
    pub boundary_states: Vec<usize>,
    pub boundary_values: Vec<f64>,
    /// Per region, the entry states considered (see `Region::entry_states`).
    pub entry_states: Vec<Vec<usize>>,
    /// Per region and entry state, the cache index of the dominating policy.
    pub chosen_policy: Vec<Vec<usize>>,
    pub iterations: usize,
    pub residual: f64,
    /// Sup-norm change of the boundary values at each sweep.
    pub sweep_deltas: Vec<f64>,
}

fn check_caches(partition: &RegionPartition, caches: &[PolicyCache]) -> Result<()> {
    if caches.len() != partition.len() {
        return Err(Error::DimensionMismatch { what: "caches per region", expected: partition.len(), actual: caches.len() });
    }
    for (g, c) in partition.regions.iter().zip(caches) {
        if c.is_empty() {
            return Err(Error::EmptyCache);
        }
        if c.region.internal_states != g.internal_states || c.region.out_space != g.out_space {
            return Err(Error::InvalidPartition(format!("cache for region {} was built for a different region", g.id)));
        }
    }
    Ok(())
}

pub fn assemble(mdp: &Mdp, partition: &RegionPartition, caches: &[PolicyCache]) -> Result<HighLevelProblem> {
    check_caches(partition, caches)?;
    for c in caches {
        c.verify(mdp)?;
    }
    let mut states: Vec<usize> = partition.regions.iter().flat_map(|g| g.out_space.iter().copied()).collect();
    states.sort_unstable();
    states.dedup();
    let boundary = states
        .iter()
        .map(|&s| {
            let g = partition.region_of(s);
            BoundaryState {
                state: s,
                region: g.id,
                local: g.local_index(s).expect("state lies in its own region"),
                entry: caches[g.id].region.in_space.binary_search(&s).ok(),
            }
        })
        .collect();
    let out_map = partition
        .regions
        .iter()
        .map(|g| g.out_space.iter().map(|s| states.binary_search(s).unwrap()).collect())
        .collect();
    Ok(HighLevelProblem { boundary, out_map })
}

/// Iterates `V(u) <- max over cached policies of f(u, vo)` from `v_min`
/// until successive sweeps differ by at most `tol`.
pub fn solve_high_level(hp: &HighLevelProblem, caches: &[PolicyCache], tol: f64) -> Result<HighLevelSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidEpsilon(tol));
    }
    let mut values: Vec<f64> = hp.boundary.iter().map(|b| caches[b.region].bounds.v_min).collect();
    let mut deltas = Vec::new();
    loop {
        let next: Vec<f64> = hp
            .boundary
            .iter()
            .map(|b| {
                let vo = hp.region_vo(b.region, &values);
                caches[b.region].value_at(b.local, vo.as_slice()).ok_or(Error::EmptyCache)
            })
            .collect::<Result<_>>()?;
        let delta = next.iter().zip(&values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        values = next;
        deltas.push(delta);
        if delta <= tol {
            break;
        }
        if deltas.len() >= MAX_SWEEPS || !delta.is_finite() {
            return Err(Error::Divergence(deltas.len()));
        }
    }
    let entry_states: Vec<Vec<usize>> = caches.iter().map(|c| c.region.entry_states()).collect();
    let chosen_policy = caches
        .iter()
        .zip(&entry_states)
        .enumerate()
        .map(|(r, (c, entries))| {
            let vo = hp.region_vo(r, &values);
            entries
                .iter()
                .map(|&t| c.dominating_local(c.region.local_index(t).unwrap(), vo.as_slice()).unwrap())
                .collect()
        })
        .collect();
    Ok(HighLevelSolution {
        boundary_states: hp.boundary.iter().map(|b| b.state).collect(),
        boundary_values: values,
        entry_states,
        chosen_policy,
        iterations: deltas.len(),
        residual: *deltas.last().unwrap(),
        sweep_deltas: deltas,
    })
}

/// The policy a region follows after being entered at each entry state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionPlan {
    pub entry_states: Vec<usize>,
    pub cache_index: Vec<usize>,
    pub policies: Vec<Policy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlattenedPolicy {
    pub regions: Vec<RegionPlan>,
}

impl FlattenedPolicy {
    /// Action at `state` (local position `local` in region `region`) when
    /// the region was entered through its `entry`-th entry state.
    pub fn action(&self, region: usize, entry: usize, local: usize) -> usize {
        self.regions[region].policies[entry][local]
    }
}

pub fn flatten(solution: &HighLevelSolution, caches: &[PolicyCache]) -> FlattenedPolicy {
    let regions = caches
        .iter()
        .enumerate()
        .map(|(r, c)| RegionPlan {
            entry_states: solution.entry_states[r].clone(),
            cache_index: solution.chosen_policy[r].clone(),
            policies: solution.chosen_policy[r].iter().map(|&i| c.entries[i].policy.clone()).collect(),
        })
        .collect();
    FlattenedPolicy { regions }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalValues {
    /// One value per state: the entry-state value for entry states, the
    /// smallest value over entries otherwise.
    pub values: ValueFunction,
    /// `[region][entry][local]` values of the entry-indexed execution.
    pub per_entry: Vec<Vec<Vec<f64>>>,
}

/// Exact value of executing `flat`: on entering a region at one of its
/// entry states, follow that entry's policy until the region is left.
/// Solved as a policy evaluation over `(state, entry)` pairs.
pub fn evaluate_flattened(mdp: &Mdp, partition: &RegionPartition, flat: &FlattenedPolicy) -> Result<HierarchicalValues> {
    if flat.regions.len() != partition.len() {
        return Err(Error::DimensionMismatch { what: "region plans", expected: partition.len(), actual: flat.regions.len() });
    }
    let mut offsets = Vec::with_capacity(partition.len());
    let mut n = 0;
    for (g, plan) in partition.regions.iter().zip(&flat.regions) {
        offsets.push(n);
        n += g.n_internal() * plan.entry_states.len();
    }
    let beta = mdp.discount();
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut rhs = DMatrix::<f64>::zeros(n, 1);
    for (r, (g, plan)) in partition.regions.iter().zip(&flat.regions).enumerate() {
        for e in 0..plan.entry_states.len() {
            for (local, &s) in g.internal_states.iter().enumerate() {
                let row = offsets[r] + e * g.n_internal() + local;
                let act = plan.policies[e][local];
                rhs[(row, 0)] = mdp.reward(s, act);
                for (next, &p) in mdp.row(s, act).iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let col = if let Some(j) = g.local_index(next) {
                        offsets[r] + e * g.n_internal() + j
                    } else {
                        let r2 = partition.assignment[next];
                        let g2 = &partition.regions[r2];
                        let e2 = flat.regions[r2].entry_states.iter().position(|&t| t == next).ok_or_else(|| {
                            Error::InvalidPartition(format!("state {next} is entered from outside but is not an entry state"))
                        })?;
                        offsets[r2] + e2 * g2.n_internal() + g2.local_index(next).unwrap()
                    };
                    a[(row, col)] -= beta * p;
                }
            }
        }
    }
    let x = lu_solve(&a, &rhs)?;
    let mut values = vec![f64::INFINITY; mdp.n_states()];
    let mut per_entry = Vec::with_capacity(partition.len());
    for (r, (g, plan)) in partition.regions.iter().zip(&flat.regions).enumerate() {
        let mut by_entry = Vec::with_capacity(plan.entry_states.len());
        for e in 0..plan.entry_states.len() {
            let vals: Vec<f64> = (0..g.n_internal()).map(|l| x[(offsets[r] + e * g.n_internal() + l, 0)]).collect();
            for (l, &s) in g.internal_states.iter().enumerate() {
                values[s] = values[s].min(vals[l]);
            }
            by_entry.push(vals);
        }
        for (e, &t) in plan.entry_states.iter().enumerate() {
            if g.in_space.binary_search(&t).is_ok() {
                values[t] = by_entry[e][g.local_index(t).unwrap()];
            }
        }
        per_entry.push(by_entry);
    }
    Ok(HierarchicalValues { values: ValueFunction(values), per_entry })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    /// Add the new policy to the region's cache.
    #[default]
    Append,
    /// Keep only the new policy (one policy per region).
    Replace,
}

#[derive(Clone, Debug)]
pub struct PrioritizeOptions {
    pub eps: f64,
    /// Maximum number of cache updates.
    pub budget: usize,
    pub mode: RefineMode,
    pub tol: f64,
}

impl PrioritizeOptions {
    pub fn new(eps: f64) -> Self {
        Self { eps, budget: 1000, mode: RefineMode::Append, tol: DEFAULT_HL_TOL }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionGap {
    pub region: usize,
    pub gap: f64,
    /// The region's cache carries a certificate at `eps` or better and the
    /// current out-space values lie within its bounds.
    pub certified: bool,
}

impl RegionGap {
    pub fn settled(&self, eps: f64) -> bool {
        self.certified || self.gap <= eps
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepLog {
    pub iteration: usize,
    pub gaps: Vec<RegionGap>,
    /// Region refined this iteration, if any.
    pub chosen: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrioritizedOutcome {
    pub solution: HighLevelSolution,
    pub log: Vec<SweepLog>,
    /// Every region settled before the budget ran out.
    pub converged: bool,
    /// Cache updates made per region.
    pub updates: Vec<usize>,
}

fn region_gaps(hp: &HighLevelProblem, sol: &HighLevelSolution, caches: &[PolicyCache], eps: f64) -> Result<Vec<RegionGap>> {
    caches
        .par_iter()
        .enumerate()
        .map(|(r, c)| {
            let vo = hp.region_vo(r, &sol.boundary_values);
            let adequacy = cache_adequate(c, &vo, eps)?;
            let certified = c.certified_for(eps, Guarantee::HighLevelGap) && c.bounds.contains(&vo, 1e-9);
            Ok(RegionGap { region: r, gap: adequacy.max_gap, certified })
        })
        .collect()
}

/// Repeatedly solves the high-level problem and refines the cache of the
/// region whose bound gap at the current out-space values is largest, until
/// every region is within `eps` (or certified) or the budget is spent.
pub fn prioritized_solve(
    mdp: &Mdp,
    partition: &RegionPartition,
    caches: &mut [PolicyCache],
    opts: &PrioritizeOptions,
) -> Result<PrioritizedOutcome> {
    if !(opts.eps > 0.0) {
        return Err(Error::InvalidEpsilon(opts.eps));
    }
    let hp = assemble(mdp, partition, caches)?;
    let mut log = Vec::new();
    let mut updates = vec![0; caches.len()];
    let mut spent = 0;
    loop {
        let sol = solve_high_level(&hp, caches, opts.tol)?;
        let gaps = region_gaps(&hp, &sol, caches, opts.eps)?;
        let pick = gaps
            .iter()
            .filter(|g| !g.settled(opts.eps))
            .fold(None::<&RegionGap>, |best, g| match best {
                Some(b) if b.gap >= g.gap => Some(b),
                _ => Some(g),
            })
            .map(|g| g.region);
        let converged = pick.is_none();
        let exhausted = spent >= opts.budget;
        log.push(SweepLog { iteration: log.len(), gaps, chosen: if exhausted { None } else { pick } });
        if converged || exhausted {
            return Ok(PrioritizedOutcome { solution: sol, log, converged, updates });
        }
        let r = pick.unwrap();
        let vo = hp.region_vo(r, &sol.boundary_values);
        match opts.mode {
            RefineMode::Append => {
                caches[r].insert_optimal_at(mdp, &vo)?;
            }
            RefineMode::Replace => caches[r].replace_with_optimal_at(mdp, &vo)?,
        }
        updates[r] += 1;
        spent += 1;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionTransfer {
    pub region: usize,
    pub reused: bool,
    /// Why the cache was not reused.
    pub notice: Option<String>,
    pub kept_policies: usize,
    pub new_policies: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub regions: Vec<RegionTransfer>,
    /// The new rewards can push values outside the caches' bounds, so every
    /// cache was rebuilt with widened bounds.
    pub bounds_violation: bool,
    pub bounds: ValueBounds,
    pub outcome: PrioritizedOutcome,
}

/// Value range implied by the rewards: `[min(0, r_min), max(0, r_max)] / (1 - beta)`.
pub fn reward_value_range(mdp: &Mdp) -> (f64, f64) {
    let (lo, hi) = mdp.reward_range();
    let k = 1.0 / (1.0 - mdp.discount());
    (lo.min(0.0) * k, hi.max(0.0) * k)
}

/// Moves caches built for `old` to `new`, which must share its state space
/// and partition. Regions whose dynamics and rewards are unchanged keep their
/// caches; the others restart from a seeded cache. The new task is then
/// solved with [`prioritized_solve`].
pub fn transfer(
    old: &Mdp,
    new: &Mdp,
    partition: &RegionPartition,
    caches: &[PolicyCache],
    opts: &PrioritizeOptions,
) -> Result<(TransferReport, Vec<PolicyCache>)> {
    check_caches(partition, caches)?;
    for c in caches {
        c.verify(old)?;
    }
    let fresh = compute_boundaries(new, &partition.assignment)?;
    if fresh.regions.iter().zip(&partition.regions).any(|(a, b)| a.out_space != b.out_space || a.in_space != b.in_space) {
        return Err(Error::InvalidPartition("region boundaries differ between the two tasks".into()));
    }
    let (lo, hi) = reward_value_range(new);
    let violation = caches.iter().any(|c| lo < c.bounds.v_min || hi > c.bounds.v_max);
    let bounds = caches.iter().fold(ValueBounds { v_min: lo, v_max: hi }, |b, c| ValueBounds {
        v_min: b.v_min.min(c.bounds.v_min),
        v_max: b.v_max.max(c.bounds.v_max),
    });

    let mut out = Vec::with_capacity(caches.len());
    let mut regions = Vec::with_capacity(caches.len());
    for c in caches {
        let fp = Fingerprint::of(new, &c.region);
        let notice = if violation {
            Some(format!("values may leave [{}, {}]; rebuilt on [{}, {}]", c.bounds.v_min, c.bounds.v_max, bounds.v_min, bounds.v_max))
        } else if fp.dynamics != c.fingerprint.dynamics {
            Some("dynamics changed".to_string())
        } else if fp.rewards != c.fingerprint.rewards {
            Some("rewards changed".to_string())
        } else {
            None
        };
        let reused = notice.is_none();
        let cache = if reused {
            c.clone()
        } else {
            let b = if violation { bounds } else { c.bounds };
            PolicyCache::seeded(new, &c.region, b)?
        };
        regions.push(RegionTransfer {
            region: c.region.id,
            reused,
            notice,
            kept_policies: if reused { c.len() } else { 0 },
            new_policies: if reused { 0 } else { cache.len() },
        });
        out.push(cache);
    }
    let outcome = prioritized_solve(new, partition, &mut out, opts)?;
    for rt in regions.iter_mut() {
        rt.new_policies = out[rt.region].len() - rt.kept_policies;
    }
    Ok((TransferReport { regions, bounds_violation: violation, bounds, outcome }, out))
}

/// Comparison of the hierarchical policy against the flat optimum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attestation {
    pub eps: f64,
    /// `eps / (1 - beta)`.
    pub bound: f64,
    pub max_deviation: f64,
    pub holds: bool,
    /// Every cache carries an all-states certificate at `eps` or better, so
    /// the bound is guaranteed rather than merely checked.
    pub all_states_certified: bool,
    pub flat_values: ValueFunction,
    pub hierarchical_values: ValueFunction,
}

/// Solves the high-level problem, evaluates the flattened policy exactly and
/// compares it with flat value iteration.
pub fn attest(mdp: &Mdp, partition: &RegionPartition, caches: &[PolicyCache], eps: f64) -> Result<(HighLevelSolution, Attestation)> {
    let hp = assemble(mdp, partition, caches)?;
    let sol = solve_high_level(&hp, caches, DEFAULT_HL_TOL)?;
    let hier = evaluate_flattened(mdp, partition, &flatten(&sol, caches))?;
    let flat = value_iteration(mdp, DEFAULT_VI_TOL);
    let max_deviation = flat.0.iter().zip(&hier.values.0).fold(f64::NEG_INFINITY, |m, (a, b)| m.max(a - b));
    let bound = eps / (1.0 - mdp.discount());
    Ok((
        sol,
        Attestation {
            eps,
            bound,
            max_deviation,
            holds: max_deviation <= bound + 1e-6,
            all_states_certified: caches.iter().all(|c| c.certified_for(eps, Guarantee::AllStates)),
            flat_values: flat,
            hierarchical_values: hier.values,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::policy_evaluation;
    use crate::problems::{four_rooms, GridworldSpec};

    /// 0..n chain, left/right deterministic, reward on the last state.
    fn chain(n: usize, beta: f64) -> Mdp {
        let mut t = vec![vec![vec![0.0; n]; 2]; n];
        let mut r = vec![vec![0.0; 2]; n];
        for s in 0..n {
            t[s][0][s.saturating_sub(1)] = 1.0;
            t[s][1][(s + 1).min(n - 1)] = 1.0;
        }
        r[n - 1] = vec![1.0; 2];
        Mdp::from_nested(t, r, beta).unwrap()
    }

    #[test]
    fn single_region_is_trivial() {
        let mdp = chain(4, 0.9);
        let p = compute_boundaries(&mdp, &[0; 4]).unwrap();
        let bounds = ValueBounds::new(0.0, 10.0).unwrap();
        let caches = vec![PolicyCache::seeded(&mdp, &p.regions[0], bounds).unwrap()];
        let hp = assemble(&mdp, &p, &caches).unwrap();
        assert!(hp.is_empty());
        let sol = solve_high_level(&hp, &caches, 1e-12).unwrap();
        let flat = flatten(&sol, &caches);
        let hv = evaluate_flattened(&mdp, &p, &flat).unwrap();
        let v = policy_evaluation(&mdp, &caches[0].entries[0].policy).unwrap();
        assert!(hv.values.max_abs_diff(&v) < 1e-9);
    }

    #[test]
    fn chain_corridor_discount() {
        let beta = 0.9;
        let mdp = chain(6, beta);
        let p = compute_boundaries(&mdp, &[0, 0, 0, 1, 1, 1]).unwrap();
        let bounds = ValueBounds::new(0.0, 10.0).unwrap();
        let caches: Vec<_> = p
            .regions
            .iter()
            .map(|g| crate::cache::build_vss_cache(&mdp, g, 1e-6, bounds, &Default::default()).unwrap())
            .collect();
        let hp = assemble(&mdp, &p, &caches).unwrap();
        assert_eq!(hp.len(), 2);
        let sol = solve_high_level(&hp, &caches, 1e-12).unwrap();
        // State 3 reaches the rewarding state 5 in two steps and stays.
        let v3 = beta * beta * 10.0;
        assert!((sol.boundary_values[1] - v3).abs() < 1e-8);
        assert!((sol.boundary_values[0] - beta * v3).abs() < 1e-8);
        for w in sol.sweep_deltas.windows(3) {
            assert!(w[2] <= beta * w[1] + 1e-12);
        }
    }

    #[test]
    fn zero_rewards_give_zero_boundary_values() {
        let spec = GridworldSpec { rewards: vec![], ..GridworldSpec::default() };
        let (mdp, p) = four_rooms(&spec).unwrap();
        let bounds = ValueBounds::new(0.0, 20.0).unwrap();
        let caches: Vec<_> = p.regions.iter().map(|g| PolicyCache::seeded(&mdp, g, bounds).unwrap()).collect();
        let hp = assemble(&mdp, &p, &caches).unwrap();
        assert_eq!(hp.len(), 8);
        let sol = solve_high_level(&hp, &caches, 1e-12).unwrap();
        assert!(sol.boundary_values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn certified_caches_need_no_updates() {
        let (mdp, p) = four_rooms(&GridworldSpec::default()).unwrap();
        let bounds = ValueBounds::new(0.0, 20.0).unwrap();
        let mut caches: Vec<_> = p
            .regions
            .iter()
            .map(|g| crate::cache::build_vss_cache(&mdp, g, 0.01, bounds, &Default::default()).unwrap())
            .collect();
        let out = prioritized_solve(&mdp, &p, &mut caches, &PrioritizeOptions::new(0.01)).unwrap();
        assert!(out.converged);
        assert_eq!(out.updates, vec![0; 4]);
    }

    #[test]
    fn empty_cache_rejected() {
        let (mdp, p) = four_rooms(&GridworldSpec::default()).unwrap();
        let bounds = ValueBounds::new(0.0, 20.0).unwrap();
        let mut caches: Vec<_> = p.regions.iter().map(|g| PolicyCache::seeded(&mdp, g, bounds).unwrap()).collect();
        caches[2].entries.clear();
        assert!(matches!(assemble(&mdp, &p, &caches), Err(Error::EmptyCache)));
    }
}
