//! The 25-state, fan-out-2 room benchmark: build a cache by value-space
//! search and compare its size with the number of points an ε-grid needs.

use serde::{Deserialize, Serialize};

use crate::cache::{build_vss_cache, raw_grid_count, PolicyCache, Scope, VssOptions};
use crate::error::Result;
use crate::problems::room1_benchmark;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Room1Report {
    pub eps: f64,
    pub n_states: usize,
    pub fan_out: usize,
    pub discount: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub scope: Scope,
    pub vss_cache_size: usize,
    pub certified: bool,
    pub worst_error: f64,
    pub iterations: usize,
    /// Grid points an ε-spaced grid over the value box would need.
    pub grid_count: u128,
}

pub fn room1(eps: f64, opts: &VssOptions) -> Result<(Room1Report, PolicyCache)> {
    let (mdp, region, bounds) = room1_benchmark();
    let cache = build_vss_cache(&mdp, &region, eps, bounds, opts)?;
    let cert = cache.certificate.clone().expect("builder attaches a certificate");
    let report = Room1Report {
        eps,
        n_states: region.n_internal(),
        fan_out: region.fan_out(),
        discount: mdp.discount(),
        v_min: bounds.v_min,
        v_max: bounds.v_max,
        scope: opts.scope,
        vss_cache_size: cache.len(),
        certified: cert.certified,
        worst_error: cert.worst_error,
        iterations: cert.history.len(),
        grid_count: raw_grid_count(&bounds, eps, region.fan_out())?,
    };
    Ok((report, cache))
}
