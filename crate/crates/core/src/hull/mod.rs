//! Upper and lower bounds on a region's optimal values at a given `vo`.
//!
//! The lower bound is the best cached policy. The upper bound is the
//! highest affine function that stays below the known optimal values at
//! every anchor (and below `v_max` at `vo`), found by a small LP in the
//! function's coefficients. Inside the anchors' convex hull it coincides with
//! the lower convex envelope of the lifted anchors.

mod gap;
mod geometry;

pub use gap::{build_hull_cache, hull_find_worst_gap, GapPoint, HullOptions};
pub use geometry::{enumerate_upper_hull, HullFacet, MAX_HULL_DIM};

use serde::{Deserialize, Serialize};

use crate::cache::PolicyCache;
use crate::error::{Error, Result};
use crate::lp::{self, LpProblem, LpStatus};
use crate::region::OutSpaceValues;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub state: usize,
    pub vo: OutSpaceValues,
    pub lower: f64,
    pub upper: f64,
    pub gap: f64,
}

/// Value cap that holds everywhere in the box: no policy beats the optimal
/// values at the lower corner by more than the discount times the largest rise of
/// an out-space value above `v_min`.
pub(crate) fn corner_cap(cache: &PolicyCache, local: usize, vo: &[f64]) -> f64 {
    let rise = vo.iter().fold(0.0f64, |m, v| m.max(v - cache.bounds.v_min));
    cache.bounds.v_max.min(cache.base[local] + cache.discount * rise)
}

/// Bounds the optimal value at `state` when the out-space is at `vo`.
/// `tighten` adds the lower-corner, slope and corner-cap constraints.
pub fn upper_bound_at(cache: &PolicyCache, state: usize, vo: &OutSpaceValues, tighten: bool) -> Result<BoundReport> {
    let g = &cache.region;
    let local = g
        .local_index(state)
        .ok_or_else(|| Error::InvalidPartition(format!("state {state} is not in region {}", g.id)))?;
    g.check_vo(vo)?;
    let d = g.fan_out();
    let lower = cache.value_at(local, vo.as_slice()).ok_or(Error::EmptyCache)?;

    // Variables: the d coefficients of the bounding function, then its
    // constant. Maximise its value at vo.
    let row = |v: &[f64]| -> Vec<f64> { v.iter().copied().chain(std::iter::once(1.0)).collect() };
    let mut prob = LpProblem::new(row(vo.as_slice()));
    for e in &cache.entries {
        for a in &e.anchors {
            prob.leq(row(a.as_slice()), e.f.value(local, a.as_slice()));
        }
    }
    prob.leq(row(vo.as_slice()), cache.bounds.v_max);
    if tighten {
        let floor = cache.bounds.floor(d);
        prob.leq(row(floor.as_slice()), cache.base[local]);
        prob.leq((0..=d).map(|i| if i < d { 1.0 } else { 0.0 }).collect(), 1.0);
        prob.leq(row(vo.as_slice()), corner_cap(cache, local, vo.as_slice()));
    }
    let out = lp::solve(&prob)?;
    let upper = match out.status {
        LpStatus::Optimal => out.objective_value,
        LpStatus::Infeasible | LpStatus::Unbounded => {
            return Err(Error::Lp(lp::LpError::Numerical(format!(
                "bound LP for state {state} reported {:?}",
                out.status
            ))))
        }
    };
    Ok(BoundReport { state, vo: vo.clone(), lower, upper, gap: upper - lower })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adequacy {
    pub adequate: bool,
    pub max_gap: f64,
    pub reports: Vec<BoundReport>,
}

/// Whether the cache's dominating policies are within `eps` of the upper
/// bound at every entry state, for this particular `vo`.
pub fn cache_adequate(cache: &PolicyCache, vo: &OutSpaceValues, eps: f64) -> Result<Adequacy> {
    let reports = cache
        .region
        .entry_states()
        .into_iter()
        .map(|t| upper_bound_at(cache, t, vo, true))
        .collect::<Result<Vec<_>>>()?;
    let max_gap = reports.iter().fold(0.0f64, |m, r| m.max(r.gap));
    Ok(Adequacy { adequate: max_gap <= eps, max_gap, reports })
}
