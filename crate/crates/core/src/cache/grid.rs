//! Caches built by solving the region at every point of a regular grid over
//! the out-space value box.

use rayon::prelude::*;

use super::{find_worst, BuildMethod, Certificate, Guarantee, PolicyCache, Scope};
use crate::error::{Error, Result};
use crate::mdp::{Mdp, Policy};
use crate::region::{optimal_policy_wrt, OutSpaceValues, Region, ValueBounds};

pub const DEFAULT_GRID_BUDGET: u128 = 1_000_000;

/// Number of `eps` steps spanning the bounds. A width within rounding of an
/// exact multiple of `eps` is not rounded up.
fn steps(bounds: &ValueBounds, eps: f64) -> Result<u64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidEpsilon(eps));
    }
    let q = bounds.width() / eps;
    let r = q.round();
    let n = if (q - r).abs() <= 1e-9 * q.max(1.0) { r } else { q.ceil() };
    if n > u64::MAX as f64 {
        return Err(Error::InvalidEpsilon(eps));
    }
    Ok(n as u64)
}

/// `((v_max - v_min) / eps)^d`, the number of policies a grid cache would
/// need. Saturates at `u128::MAX`.
pub fn raw_grid_count(bounds: &ValueBounds, eps: f64, d: usize) -> Result<u128> {
    let n = steps(bounds, eps)? as u128;
    let mut count: u128 = 1;
    for _ in 0..d {
        count = count.saturating_mul(n);
    }
    Ok(count)
}

/// Grid coordinates along one axis: `v_min, v_min + eps, ..., v_max`.
pub fn grid_axis(bounds: &ValueBounds, eps: f64) -> Result<Vec<f64>> {
    let n = steps(bounds, eps)?;
    Ok((0..=n)
        .map(|k| if k == n { bounds.v_max } else { (bounds.v_min + k as f64 * eps).min(bounds.v_max) })
        .collect())
}

pub fn build_grid_cache(mdp: &Mdp, g: &Region, eps: f64, bounds: ValueBounds, budget: u128) -> Result<PolicyCache> {
    let d = g.fan_out();
    let count = raw_grid_count(&bounds, eps, d)?;
    if count > budget {
        return Err(Error::GridBudgetExceeded { count, budget });
    }
    let axis = grid_axis(&bounds, eps)?;
    let n_points = axis.len().pow(d as u32);
    let point = |mut k: usize| {
        let mut v = vec![0.0; d];
        for c in v.iter_mut().rev() {
            *c = axis[k % axis.len()];
            k /= axis.len();
        }
        OutSpaceValues(v)
    };
    let solved: Vec<(OutSpaceValues, Policy)> = (0..n_points)
        .into_par_iter()
        .map(|k| {
            let vo = point(k);
            optimal_policy_wrt(mdp, g, &vo).map(|pi| (vo, pi))
        })
        .collect::<Result<_>>()?;

    let mut cache = PolicyCache::new(mdp, g, bounds)?;
    for (vo, pi) in solved {
        cache.insert(mdp, pi, vo)?;
    }
    let worst = find_worst(mdp, &cache, Scope::AllStates)?;
    cache.certificate = Some(Certificate {
        method: BuildMethod::Grid,
        eps,
        guarantee: Guarantee::AllStates,
        worst_error: worst.bellman_error,
        certified: worst.bellman_error <= eps,
        worst_point: worst.vo,
        history: vec![worst.bellman_error],
    });
    Ok(cache)
}
