//! Regions of the state space, their boundaries, and policy values as affine
//! functions of the values assumed by a region's out-space.
//!
//! A region `G` sees the rest of the MDP only through its *out-space*: the
//! states outside `G` reachable in one step from inside. Freezing those
//! states at a vector of values `vo` turns `G` into a small standalone MDP,
//! and any fixed policy's value on `G` is then affine in `vo`:
//! `f(s, vo) = c_s + a_s . vo`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cache::PolicyCache;
use crate::error::{Error, Result};
use crate::linalg::lu_solve;
use crate::mdp::{policy_evaluation, policy_iteration, Mdp, Policy, ValueFunction};

/// A set of internal states together with its boundary.
///
/// `out_space` is sorted by global state index; that order fixes the meaning
/// of every out-space value vector for this region.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub id: usize,
    pub internal_states: Vec<usize>,
    pub out_space: Vec<usize>,
    pub in_space: Vec<usize>,
}

/// Disjoint regions covering the state space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionPartition {
    pub assignment: Vec<usize>,
    pub regions: Vec<Region>,
}

/// File form of a partition: region index per state. Boundaries are always
/// recomputed from the MDP on load.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PartitionDocument {
    pub assignment: Vec<usize>,
}

/// Values of a region's out-space states, ordered as `Region::out_space`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OutSpaceValues(pub Vec<f64>);

impl OutSpaceValues {
    pub fn uniform(d: usize, v: f64) -> Self {
        Self(vec![v; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Range every out-space value is assumed to lie in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueBounds {
    pub v_min: f64,
    pub v_max: f64,
}

impl ValueBounds {
    pub fn new(v_min: f64, v_max: f64) -> Result<Self> {
        if !(v_min.is_finite() && v_max.is_finite() && v_min <= v_max) {
            return Err(Error::InvalidBounds { v_min, v_max });
        }
        Ok(Self { v_min, v_max })
    }

    pub fn width(&self) -> f64 {
        self.v_max - self.v_min
    }

    pub fn contains(&self, vo: &OutSpaceValues, tol: f64) -> bool {
        vo.0.iter().all(|v| *v >= self.v_min - tol && *v <= self.v_max + tol)
    }

    /// Every out-space component at `v_min`.
    pub fn floor(&self, d: usize) -> OutSpaceValues {
        OutSpaceValues::uniform(d, self.v_min)
    }
}

/// A policy's value on a region as an affine function of the out-space
/// values: `f(s, vo) = constant[s] + coefficients[s] . vo`, indexed by the
/// local position of `s` in `Region::internal_states`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearValueFunction {
    pub fan_out: usize,
    pub constant: Vec<f64>,
    /// Row-major `internal_states x fan_out`.
    pub coefficients: Vec<f64>,
}

impl LinearValueFunction {
    pub fn n_states(&self) -> usize {
        self.constant.len()
    }

    pub fn coeffs(&self, local: usize) -> &[f64] {
        &self.coefficients[local * self.fan_out..(local + 1) * self.fan_out]
    }

    pub fn value(&self, local: usize, vo: &[f64]) -> f64 {
        self.constant[local] + self.coeffs(local).iter().zip(vo).map(|(a, v)| a * v).sum::<f64>()
    }

    pub fn values(&self, vo: &[f64]) -> Vec<f64> {
        (0..self.n_states()).map(|s| self.value(s, vo)).collect()
    }
}

impl Region {
    /// Builds a region from its internal states, deriving the out-space and
    /// in-space from the support of `mdp`'s transitions.
    pub fn from_states(mdp: &Mdp, id: usize, internal_states: &[usize]) -> Result<Self> {
        if internal_states.is_empty() {
            return Err(Error::EmptyRegion(id));
        }
        let n = mdp.n_states();
        let mut inside = vec![false; n];
        for &s in internal_states {
            if s >= n {
                return Err(Error::InvalidPartition(format!("state {s} out of range")));
            }
            if inside[s] {
                return Err(Error::InvalidPartition(format!("state {s} listed twice")));
            }
            inside[s] = true;
        }
        let mut out = vec![false; n];
        let mut entered = vec![false; n];
        for s in 0..n {
            for a in 0..mdp.n_actions() {
                for (next, p) in mdp.row(s, a).iter().enumerate() {
                    if *p <= 0.0 {
                        continue;
                    }
                    if inside[s] && !inside[next] {
                        out[next] = true;
                    } else if !inside[s] && inside[next] {
                        entered[next] = true;
                    }
                }
            }
        }
        let mut internal = internal_states.to_vec();
        internal.sort_unstable();
        Ok(Self {
            id,
            internal_states: internal,
            out_space: (0..n).filter(|&s| out[s]).collect(),
            in_space: (0..n).filter(|&s| entered[s]).collect(),
        })
    }

    pub fn fan_out(&self) -> usize {
        self.out_space.len()
    }

    pub fn n_internal(&self) -> usize {
        self.internal_states.len()
    }

    pub fn local_index(&self, s: usize) -> Option<usize> {
        self.internal_states.binary_search(&s).ok()
    }

    pub fn out_index(&self, s: usize) -> Option<usize> {
        self.out_space.binary_search(&s).ok()
    }

    pub fn contains(&self, s: usize) -> bool {
        self.local_index(s).is_some()
    }

    /// States at which the region can be entered. A region that is never
    /// entered from outside uses its first internal state.
    pub fn entry_states(&self) -> Vec<usize> {
        if self.in_space.is_empty() {
            vec![self.internal_states[0]]
        } else {
            self.in_space.clone()
        }
    }

    /// Treats additional internal states (typically start states) as entry
    /// points, so caches built afterwards also cover trajectories that begin
    /// there. Off by default.
    pub fn with_extra_entries(&self, states: &[usize]) -> Result<Self> {
        let mut region = self.clone();
        for &s in states {
            if !self.contains(s) {
                return Err(Error::InvalidPartition(format!(
                    "entry state {s} is not inside region {}",
                    self.id
                )));
            }
            if let Err(pos) = region.in_space.binary_search(&s) {
                region.in_space.insert(pos, s);
            }
        }
        Ok(region)
    }

    pub(crate) fn check_vo(&self, vo: &OutSpaceValues) -> Result<()> {
        if vo.dim() != self.fan_out() {
            return Err(Error::DimensionMismatch {
                what: "out-space values",
                expected: self.fan_out(),
                actual: vo.dim(),
            });
        }
        Ok(())
    }

    fn check_policy(&self, pi: &Policy, n_actions: usize) -> Result<()> {
        if pi.len() != self.n_internal() {
            return Err(Error::DimensionMismatch {
                what: "region policy length",
                expected: self.n_internal(),
                actual: pi.len(),
            });
        }
        if let Some(a) = pi.0.iter().find(|&&a| a >= n_actions) {
            return Err(Error::InvalidMdp(format!("policy action {a} out of range")));
        }
        Ok(())
    }

    /// Local index of a successor: internal states first, then out-space.
    fn extracted_index(&self, next: usize) -> Option<usize> {
        self.local_index(next)
            .or_else(|| self.out_index(next).map(|i| self.n_internal() + i))
    }
}

/// Assigns states to regions and computes every region's boundary.
pub fn compute_boundaries(mdp: &Mdp, assignment: &[usize]) -> Result<RegionPartition> {
    if assignment.len() != mdp.n_states() {
        return Err(Error::DimensionMismatch {
            what: "partition assignment",
            expected: mdp.n_states(),
            actual: assignment.len(),
        });
    }
    let n_regions = assignment.iter().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); n_regions];
    for (s, &r) in assignment.iter().enumerate() {
        members[r].push(s);
    }
    let regions = members
        .iter()
        .enumerate()
        .map(|(id, states)| Region::from_states(mdp, id, states))
        .collect::<Result<Vec<_>>>()?;
    Ok(RegionPartition { assignment: assignment.to_vec(), regions })
}

impl RegionPartition {
    pub fn from_document(mdp: &Mdp, doc: &PartitionDocument) -> Result<Self> {
        compute_boundaries(mdp, &doc.assignment)
    }

    pub fn to_document(&self) -> PartitionDocument {
        PartitionDocument { assignment: self.assignment.clone() }
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn region_of(&self, s: usize) -> &Region {
        &self.regions[self.assignment[s]]
    }
}

/// The MDP over `internal_states ++ out_space` in which every out-space state
/// is absorbing with per-step reward `(1 - beta) * vo[i]`, so its value under
/// any policy is exactly `vo[i]`.
pub fn extract_region_mdp(mdp: &Mdp, g: &Region, vo: &OutSpaceValues) -> Result<Mdp> {
    g.check_vo(vo)?;
    let n_int = g.n_internal();
    let n = n_int + g.fan_out();
    let n_actions = mdp.n_actions();
    let beta = mdp.discount();
    let mut transition = vec![0.0; n * n_actions * n];
    let mut reward = vec![0.0; n * n_actions];
    for (local, &s) in g.internal_states.iter().enumerate() {
        for a in 0..n_actions {
            let base = (local * n_actions + a) * n;
            for (next, &p) in mdp.row(s, a).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let j = g.extracted_index(next).ok_or_else(|| {
                    Error::InvalidPartition(format!(
                        "state {s} in region {} reaches {next}, which is outside its boundary",
                        g.id
                    ))
                })?;
                transition[base + j] += p;
            }
            reward[local * n_actions + a] = mdp.reward(s, a);
        }
    }
    for i in 0..g.fan_out() {
        let local = n_int + i;
        for a in 0..n_actions {
            transition[(local * n_actions + a) * n + local] = 1.0;
            reward[local * n_actions + a] = (1.0 - beta) * vo.0[i];
        }
    }
    Mdp::new(n, n_actions, transition, reward, beta)
}

/// Optimal region policy when the out-space is frozen at `vo`, restricted to
/// the internal states.
pub fn optimal_policy_wrt(mdp: &Mdp, g: &Region, vo: &OutSpaceValues) -> Result<Policy> {
    let sub = extract_region_mdp(mdp, g, vo)?;
    let (pi, _) = policy_iteration(&sub)?;
    Ok(Policy(pi.0[..g.n_internal()].to_vec()))
}

/// Optimal internal values at `vo` together with the policy attaining them.
pub fn optimal_region_values(mdp: &Mdp, g: &Region, vo: &OutSpaceValues) -> Result<(Policy, Vec<f64>)> {
    let sub = extract_region_mdp(mdp, g, vo)?;
    let (pi, v) = policy_iteration(&sub)?;
    let n = g.n_internal();
    Ok((Policy(pi.0[..n].to_vec()), v.0[..n].to_vec()))
}

/// Extends a region policy to the extracted MDP (out-space states have a
/// single effective action).
pub fn extend_policy(g: &Region, pi: &Policy) -> Policy {
    let mut actions = pi.0.clone();
    actions.resize(g.n_internal() + g.fan_out(), 0);
    Policy(actions)
}

/// Exact value of a region policy at `vo`, by evaluating the extracted MDP.
pub fn evaluate_region_policy(mdp: &Mdp, g: &Region, pi: &Policy, vo: &OutSpaceValues) -> Result<ValueFunction> {
    g.check_policy(pi, mdp.n_actions())?;
    let sub = extract_region_mdp(mdp, g, vo)?;
    policy_evaluation(&sub, &extend_policy(g, pi))
}

/// Affine value function of `pi` on `g`. One factorization of
/// `I - beta P_GG` is shared by `d + 1` right-hand sides: the policy's
/// rewards (constants) and `beta` times the transition mass into each
/// out-space component (coefficients).
pub fn linear_value_function(mdp: &Mdp, g: &Region, pi: &Policy) -> Result<LinearValueFunction> {
    g.check_policy(pi, mdp.n_actions())?;
    let n = g.n_internal();
    let d = g.fan_out();
    let beta = mdp.discount();
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut rhs = DMatrix::<f64>::zeros(n, d + 1);
    for (local, &s) in g.internal_states.iter().enumerate() {
        let act = pi[local];
        rhs[(local, 0)] = mdp.reward(s, act);
        for (next, &p) in mdp.row(s, act).iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            if let Some(j) = g.local_index(next) {
                a[(local, j)] -= beta * p;
            } else if let Some(i) = g.out_index(next) {
                rhs[(local, 1 + i)] += beta * p;
            } else {
                return Err(Error::InvalidPartition(format!(
                    "state {s} in region {} reaches {next}, which is outside its boundary",
                    g.id
                )));
            }
        }
    }
    let x = lu_solve(&a, &rhs)?;
    let constant = (0..n).map(|s| x[(s, 0)]).collect();
    let mut coefficients = Vec::with_capacity(n * d);
    for s in 0..n {
        coefficients.extend((0..d).map(|i| x[(s, 1 + i)]));
    }
    Ok(LinearValueFunction { fan_out: d, constant, coefficients })
}

/// Index of the cached policy with the highest value at entry state `t`
/// (a global state index inside the cache's region); ties go to the lowest
/// index.
pub fn dominating_policy(cache: &PolicyCache, t: usize, vo: &OutSpaceValues) -> Result<usize> {
    let local = cache
        .region
        .local_index(t)
        .ok_or_else(|| Error::InvalidPartition(format!("state {t} is not in region {}", cache.region.id)))?;
    cache.region.check_vo(vo)?;
    cache.dominating_local(local, vo.as_slice()).ok_or(Error::EmptyCache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{value_iteration, greedy_policy};

    /// 0 <-> 1 <-> 2 <-> 3 chain, actions left/right, deterministic.
    fn chain(n: usize, reward_at_end: f64) -> Mdp {
        let mut t = vec![vec![vec![0.0; n]; 2]; n];
        let mut r = vec![vec![0.0; 2]; n];
        for s in 0..n {
            t[s][0][s.saturating_sub(1)] = 1.0;
            t[s][1][(s + 1).min(n - 1)] = 1.0;
        }
        r[n - 1] = vec![reward_at_end; 2];
        Mdp::from_nested(t, r, 0.9).unwrap()
    }

    #[test]
    fn whole_space_has_no_boundary() {
        let mdp = chain(4, 1.0);
        let p = compute_boundaries(&mdp, &[0, 0, 0, 0]).unwrap();
        assert_eq!(p.regions.len(), 1);
        assert_eq!(p.regions[0].fan_out(), 0);
        assert!(p.regions[0].in_space.is_empty());
    }

    #[test]
    fn chain_split_boundaries() {
        let mdp = chain(6, 1.0);
        let p = compute_boundaries(&mdp, &[0, 0, 0, 1, 1, 1]).unwrap();
        assert_eq!(p.regions[0].out_space, vec![3]);
        assert_eq!(p.regions[0].in_space, vec![2]);
        assert_eq!(p.regions[1].out_space, vec![2]);
        assert_eq!(p.regions[1].in_space, vec![3]);
    }

    #[test]
    fn empty_region_is_rejected() {
        let mdp = chain(3, 1.0);
        assert!(matches!(compute_boundaries(&mdp, &[0, 0, 2]), Err(Error::EmptyRegion(1))));
    }

    #[test]
    fn locked_out_space_values() {
        let mdp = chain(6, 1.0);
        let p = compute_boundaries(&mdp, &[0, 0, 0, 1, 1, 1]).unwrap();
        let g = &p.regions[0];
        let vo = OutSpaceValues(vec![7.5]);
        let sub = extract_region_mdp(&mdp, g, &vo).unwrap();
        let v = policy_evaluation(&sub, &Policy(vec![0, 0, 0, 0])).unwrap();
        assert!((v[3] - 7.5).abs() < 1e-9);
        // Right-moving policy from state 2 reaches the exit in one step.
        let f = linear_value_function(&mdp, g, &Policy(vec![1, 1, 1])).unwrap();
        assert!((f.value(2, &[7.5]) - 0.9 * 7.5).abs() < 1e-12);
        assert!((f.value(0, &[7.5]) - 0.9f64.powi(3) * 7.5).abs() < 1e-12);
    }

    #[test]
    fn zero_out_space_values() {
        let mdp = chain(6, 1.0);
        let p = compute_boundaries(&mdp, &[0, 0, 0, 1, 1, 1]).unwrap();
        let sub = extract_region_mdp(&mdp, &p.regions[0], &OutSpaceValues(vec![0.0])).unwrap();
        let v = value_iteration(&sub, 1e-10);
        assert!(v.0.iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn single_step_exit_coefficient() {
        // Internal state 0 moves deterministically to exit state 1.
        let mdp = Mdp::from_nested(vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]], vec![vec![0.0], vec![0.0]], 0.8)
            .unwrap();
        let p = compute_boundaries(&mdp, &[0, 1]).unwrap();
        let f = linear_value_function(&mdp, &p.regions[0], &Policy(vec![0])).unwrap();
        assert!(f.constant[0].abs() < 1e-15);
        assert!((f.coeffs(0)[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let mdp = chain(6, 1.0);
        let p = compute_boundaries(&mdp, &[0, 0, 0, 1, 1, 1]).unwrap();
        let err = extract_region_mdp(&mdp, &p.regions[0], &OutSpaceValues(vec![0.0, 1.0]));
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn optimal_policy_follows_flat_greedy() {
        let mdp = chain(6, 1.0);
        let p = compute_boundaries(&mdp, &[0, 0, 0, 1, 1, 1]).unwrap();
        let g = &p.regions[0];
        let vo = OutSpaceValues(vec![3.0]);
        let sub = extract_region_mdp(&mdp, g, &vo).unwrap();
        let flat = greedy_policy(&sub, &value_iteration(&sub, 1e-11)).unwrap();
        assert_eq!(optimal_policy_wrt(&mdp, g, &vo).unwrap().0, flat.0[..3].to_vec());
    }

    #[test]
    fn extra_entries_extend_in_space() {
        let mdp = chain(6, 1.0);
        let p = compute_boundaries(&mdp, &[0, 0, 0, 1, 1, 1]).unwrap();
        let g = p.regions[0].with_extra_entries(&[0]).unwrap();
        assert_eq!(g.in_space, vec![0, 2]);
        assert!(p.regions[0].with_extra_entries(&[4]).is_err());
    }
}
