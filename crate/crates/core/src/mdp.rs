//! Finite discounted MDPs and the flat solvers used as building blocks and
//! as exactness oracles for everything built on top of them.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::lu_solve;

/// Row-stochasticity tolerance enforced at construction.
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// Default value-iteration tolerance; tight enough to serve as an oracle.
pub const DEFAULT_VI_TOL: f64 = 1e-9;

/// Two action values closer than this (relative to the larger magnitude) are
/// treated as tied and resolved toward the lowest action index.
pub const TIE_TOL: f64 = 1e-10;

/// A finite MDP with a dense transition tensor `T(s, a, s')`, rewards
/// `R(s, a)` and discount `beta` in `[0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct Mdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    discount: f64,
}

/// On-disk layout of an [`Mdp`]: `transition[s][a][s']` and `reward[s][a]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MdpDocument {
    pub n_states: usize,
    pub n_actions: usize,
    pub discount: f64,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
}

impl Mdp {
    /// Builds an MDP from flat row-major storage: `transition` is indexed by
    /// `(s * n_actions + a) * n_states + s'`, `reward` by `s * n_actions + a`.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp("need at least one state and one action".into()));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidMdp(format!("discount {discount} outside [0, 1)")));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::DimensionMismatch {
                what: "transition entries",
                expected: n_states * n_actions * n_states,
                actual: transition.len(),
            });
        }
        if reward.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch {
                what: "reward entries",
                expected: n_states * n_actions,
                actual: reward.len(),
            });
        }
        if let Some(r) = reward.iter().find(|r| !r.is_finite()) {
            return Err(Error::InvalidMdp(format!("non-finite reward {r}")));
        }
        for (row_idx, row) in transition.chunks(n_states).enumerate() {
            let (s, a) = (row_idx / n_actions, row_idx % n_actions);
            if let Some(p) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::InvalidMdp(format!(
                    "T({s}, {a}, .) has entry {p} outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidMdp(format!("T({s}, {a}, .) sums to {sum}")));
            }
        }
        Ok(Self { n_states, n_actions, transition, reward, discount })
    }

    pub fn from_nested(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        discount: f64,
    ) -> Result<Self> {
        let n_states = transition.len();
        let n_actions = transition.first().map_or(0, Vec::len);
        let mut flat_t = Vec::with_capacity(n_states * n_actions * n_states);
        for (s, per_action) in transition.into_iter().enumerate() {
            if per_action.len() != n_actions {
                return Err(Error::InvalidMdp(format!("state {s} has {} actions", per_action.len())));
            }
            for row in per_action {
                if row.len() != n_states {
                    return Err(Error::DimensionMismatch {
                        what: "transition row",
                        expected: n_states,
                        actual: row.len(),
                    });
                }
                flat_t.extend(row);
            }
        }
        if reward.len() != n_states {
            return Err(Error::DimensionMismatch {
                what: "reward rows",
                expected: n_states,
                actual: reward.len(),
            });
        }
        let mut flat_r = Vec::with_capacity(n_states * n_actions);
        for row in reward {
            if row.len() != n_actions {
                return Err(Error::DimensionMismatch {
                    what: "reward row",
                    expected: n_actions,
                    actual: row.len(),
                });
            }
            flat_r.extend(row);
        }
        Self::new(n_states, n_actions, flat_t, flat_r, discount)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// `T(s, a, .)` as a slice over successor states.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.row(s, a)[next]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0_f64, |m, r| m.max(r.abs()))
    }

    /// Smallest and largest reward in the table.
    pub fn reward_range(&self) -> (f64, f64) {
        self.reward
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(r), hi.max(r)))
    }

    /// One-step lookahead `R(s, a) + beta * sum_s' T(s, a, s') v(s')`.
    pub fn q_value(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        let next: f64 = self.row(s, a).iter().zip(v).map(|(p, x)| p * x).sum();
        self.reward(s, a) + self.discount * next
    }

    pub fn to_document(&self) -> MdpDocument {
        MdpDocument::from(self.clone())
    }
}

impl TryFrom<MdpDocument> for Mdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        let mdp = Mdp::from_nested(doc.transition, doc.reward, doc.discount)?;
        if mdp.n_states != doc.n_states || mdp.n_actions != doc.n_actions {
            return Err(Error::InvalidMdp(format!(
                "declared {}x{} but arrays are {}x{}",
                doc.n_states, doc.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        Ok(mdp)
    }
}

impl From<Mdp> for MdpDocument {
    fn from(mdp: Mdp) -> Self {
        let transition = (0..mdp.n_states)
            .map(|s| (0..mdp.n_actions).map(|a| mdp.row(s, a).to_vec()).collect())
            .collect();
        let reward = mdp.reward.chunks(mdp.n_actions).map(<[f64]>::to_vec).collect();
        MdpDocument {
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            discount: mdp.discount,
            transition,
            reward,
        }
    }
}

/// Value per state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValueFunction(pub Vec<f64>);

impl ValueFunction {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Sup-norm distance to another value function of the same length.
    pub fn max_abs_diff(&self, other: &ValueFunction) -> f64 {
        self.0.iter().zip(&other.0).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl std::ops::Index<usize> for ValueFunction {
    type Output = f64;

    fn index(&self, s: usize) -> &f64 {
        &self.0[s]
    }
}

/// Deterministic stationary policy: one action index per state.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Policy(pub Vec<usize>);

impl Policy {
    pub fn constant(n_states: usize, action: usize) -> Self {
        Self(vec![action; n_states])
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn check(&self, mdp: &Mdp) -> Result<()> {
        if self.0.len() != mdp.n_states {
            return Err(Error::DimensionMismatch {
                what: "policy length",
                expected: mdp.n_states,
                actual: self.0.len(),
            });
        }
        if let Some(a) = self.0.iter().find(|&&a| a >= mdp.n_actions) {
            return Err(Error::InvalidMdp(format!("policy action {a} out of range")));
        }
        Ok(())
    }
}

impl std::ops::Index<usize> for Policy {
    type Output = usize;

    fn index(&self, s: usize) -> &usize {
        &self.0[s]
    }
}

/// Per-state Bellman error of a value function and the Williams–Baird
/// suboptimality bound it implies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BellmanReport {
    pub per_state_error: Vec<f64>,
    pub max_error: f64,
    pub suboptimality_bound: f64,
}

fn check_len(mdp: &Mdp, v: &[f64]) -> Result<()> {
    if v.len() != mdp.n_states {
        return Err(Error::DimensionMismatch {
            what: "value function length",
            expected: mdp.n_states,
            actual: v.len(),
        });
    }
    Ok(())
}

fn best_action(mdp: &Mdp, s: usize, v: &[f64]) -> (usize, f64) {
    let q: Vec<f64> = (0..mdp.n_actions).map(|a| mdp.q_value(s, a, v)).collect();
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = TIE_TOL * best.abs().max(1.0);
    let a = q.iter().position(|&x| x >= best - tol).unwrap_or(0);
    (a, best)
}

/// One synchronous Bellman optimality backup.
pub fn bellman_backup(mdp: &Mdp, v: &ValueFunction) -> ValueFunction {
    ValueFunction((0..mdp.n_states).map(|s| best_action(mdp, s, &v.0).1).collect())
}

/// Value iteration from zero until successive iterates differ by at most
/// `tol * (1 - beta) / beta` in sup norm, which bounds the Bellman residual
/// of the returned function by `tol`.
pub fn value_iteration(mdp: &Mdp, tol: f64) -> ValueFunction {
    assert!(tol > 0.0, "value_iteration needs a positive tolerance");
    let beta = mdp.discount;
    let mut v = ValueFunction::zeros(mdp.n_states);
    if beta == 0.0 {
        return bellman_backup(mdp, &v);
    }
    let stop = tol * (1.0 - beta) / beta;
    let r_max = mdp.max_abs_reward().max(tol);
    let bound = ((stop * (1.0 - beta) / r_max).ln() / beta.ln()).ceil().max(1.0) as usize;
    for _ in 0..bound + 1000 {
        let next = bellman_backup(mdp, &v);
        let delta = next.max_abs_diff(&v);
        v = next;
        if delta <= stop {
            break;
        }
    }
    v
}

/// Greedy policy with respect to `v`; ties go to the lowest action index.
pub fn greedy_policy(mdp: &Mdp, v: &ValueFunction) -> Result<Policy> {
    check_len(mdp, &v.0)?;
    Ok(Policy((0..mdp.n_states).map(|s| best_action(mdp, s, &v.0).0).collect()))
}

/// Exact value of a policy from the linear system `(I - beta P_pi) V = R_pi`.
pub fn policy_evaluation(mdp: &Mdp, pi: &Policy) -> Result<ValueFunction> {
    pi.check(mdp)?;
    let n = mdp.n_states;
    let beta = mdp.discount;
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut b = DMatrix::<f64>::zeros(n, 1);
    for s in 0..n {
        let act = pi[s];
        for (next, p) in mdp.row(s, act).iter().enumerate() {
            if *p != 0.0 {
                a[(s, next)] -= beta * p;
            }
        }
        b[(s, 0)] = mdp.reward(s, act);
    }
    let x = lu_solve(&a, &b)?;
    Ok(ValueFunction(x.column(0).iter().copied().collect()))
}

/// Per-state Bellman error `max_a Q(s, a) - v(s)` and the bound
/// `max_error / (1 - beta)` on the distance to the optimal value function.
pub fn bellman_error(mdp: &Mdp, v: &ValueFunction) -> Result<BellmanReport> {
    check_len(mdp, &v.0)?;
    let per_state_error: Vec<f64> =
        (0..mdp.n_states).map(|s| best_action(mdp, s, &v.0).1 - v.0[s]).collect();
    let max_error = per_state_error.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(BellmanReport {
        suboptimality_bound: max_error / (1.0 - mdp.discount),
        per_state_error,
        max_error,
    })
}

/// Howard policy iteration. Actions only switch on strict improvement, and
/// the converged policy is canonicalised to the lowest-index greedy action so
/// that equal-valued optima map to the same action table.
pub fn policy_iteration(mdp: &Mdp) -> Result<(Policy, ValueFunction)> {
    let zeros = ValueFunction::zeros(mdp.n_states);
    let mut pi = greedy_policy(mdp, &zeros)?;
    let mut v = policy_evaluation(mdp, &pi)?;
    // Policy iteration terminates in at most |A|^|S| steps; in practice a
    // handful. The cap only guards against float-level oscillation.
    for _ in 0..10_000 {
        let mut changed = false;
        for s in 0..mdp.n_states {
            let current = mdp.q_value(s, pi[s], &v.0);
            let (a, best) = best_action(mdp, s, &v.0);
            if best > current + TIE_TOL * current.abs().max(1.0) {
                pi.0[s] = a;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        v = policy_evaluation(mdp, &pi)?;
    }
    let canonical = greedy_policy(mdp, &v)?;
    if canonical != pi {
        pi = canonical;
        v = policy_evaluation(mdp, &pi)?;
    }
    Ok((pi, v))
}
