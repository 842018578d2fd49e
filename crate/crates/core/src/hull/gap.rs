//! Largest gap between the upper bounding surface and the best cached
//! policy over the whole value box, and the cache builder driven by it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corner_cap;
use super::geometry::{enumerate_upper_hull, HullFacet, MAX_HULL_DIM};
use crate::cache::{BuildMethod, Certificate, Guarantee, PolicyCache};
use crate::error::{Error, Result};
use crate::lp::{self, LpProblem, LpStatus};
use crate::mdp::Mdp;
use crate::region::{OutSpaceValues, Region, ValueBounds};

const INSIDE_TOL: f64 = 1e-12;

/// Where the gap between upper and lower bounds is largest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub vo: OutSpaceValues,
    pub gap: f64,
    /// Entry state (global index) at which the gap occurs.
    pub state: usize,
    /// Cached policy dominating there, when the point came from a facet LP.
    pub policy: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct HullOptions {
    pub max_policies: usize,
    /// Grid points per axis for the part of the box outside the anchors'
    /// hull. Defaults depend on the fan-out.
    pub scan_points: Option<usize>,
}

impl Default for HullOptions {
    fn default() -> Self {
        Self { max_policies: 200, scan_points: None }
    }
}

fn default_scan(d: usize) -> usize {
    match d {
        0 | 1 => 2001,
        2 => 201,
        _ => 41,
    }
}

/// Maximises `facet - f_i` over the part of the facet's simplex where
/// policy `i` dominates at `local`, in barycentric coordinates.
fn facet_gap(cache: &PolicyCache, local: usize, facet: &HullFacet, i: usize) -> Result<Option<(f64, Vec<f64>)>> {
    let verts: Vec<&[f64]> = facet.vertices.iter().map(|v| v.as_slice()).collect();
    let k = verts.len();
    let fi = &cache.entries[i].f;
    let objective: Vec<f64> = verts.iter().map(|p| facet.value(p) - fi.value(local, p)).collect();
    let mut prob = LpProblem::new(objective.clone());
    for j in 0..k {
        prob.bound(j, Some(0.0), Some(1.0));
    }
    prob.leq(vec![1.0; k], 1.0);
    prob.leq(vec![-1.0; k], -1.0);
    for (o, other) in cache.entries.iter().enumerate() {
        if o != i {
            prob.leq(verts.iter().map(|p| other.f.value(local, p) - fi.value(local, p)).collect(), 0.0);
        }
    }
    let out = lp::solve(&prob)?;
    Ok(match out.status {
        LpStatus::Optimal => {
            let lambda = out.solution;
            let gap = objective.iter().zip(&lambda).map(|(a, b)| a * b).sum();
            let d = cache.fan_out();
            let vo = (0..d).map(|c| verts.iter().zip(&lambda).map(|(p, l)| l * p[c]).sum()).collect();
            Some((gap, vo))
        }
        LpStatus::Infeasible => None,
        LpStatus::Unbounded => {
            return Err(Error::Lp(lp::LpError::Numerical("barycentric LP reported unbounded".into())));
        }
    })
}

fn grid_points(bounds: &ValueBounds, d: usize, per_axis: usize) -> impl Iterator<Item = Vec<f64>> + '_ {
    let n = per_axis.max(2);
    let total = n.pow(d as u32);
    (0..total).map(move |mut k| {
        let mut v = vec![0.0; d];
        for c in v.iter_mut().rev() {
            *c = bounds.v_min + bounds.width() * (k % n) as f64 / (n - 1) as f64;
            k /= n;
        }
        v
    })
}

fn better(a: &GapPoint, b: &Option<GapPoint>) -> bool {
    b.as_ref().is_none_or(|b| a.gap > b.gap)
}

/// Largest high-level gap over every entry state and the whole box. Inside
/// the anchors' hull each (facet, dominating policy) pair is an exact LP;
/// the rest of the box is scanned on a grid against the corner cap.
pub fn hull_find_worst_gap(cache: &PolicyCache, opts: &HullOptions) -> Result<GapPoint> {
    let d = cache.fan_out();
    if d > MAX_HULL_DIM {
        return Err(Error::UnsupportedDimension(d));
    }
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    let g = &cache.region;
    let mut best: Option<GapPoint> = None;
    for t in g.entry_states() {
        let local = g.local_index(t).unwrap();
        let facets = match enumerate_upper_hull(cache, t) {
            Ok(f) => f,
            Err(Error::DegenerateAnchors) => Vec::new(),
            Err(e) => return Err(e),
        };
        let pairs: Vec<(usize, usize)> =
            (0..facets.len()).flat_map(|j| (0..cache.len()).map(move |i| (j, i))).collect();
        let solved = pairs
            .par_iter()
            .map(|&(j, i)| facet_gap(cache, local, &facets[j], i).map(|r| r.map(|(gap, vo)| (i, gap, vo))))
            .collect::<Result<Vec<_>>>()?;
        for (i, gap, vo) in solved.into_iter().flatten() {
            let p = GapPoint { vo: OutSpaceValues(vo), gap, state: t, policy: Some(i) };
            if better(&p, &best) {
                best = Some(p);
            }
        }

        let inside = |v: &[f64]| facets.iter().any(|f| f.barycentric(v, INSIDE_TOL).is_some());
        let corners_covered = (0..1usize << d).all(|mask| {
            let corner: Vec<f64> = (0..d)
                .map(|c| if mask >> c & 1 == 1 { cache.bounds.v_max } else { cache.bounds.v_min })
                .collect();
            inside(&corner)
        });
        if corners_covered {
            continue;
        }
        let per_axis = opts.scan_points.unwrap_or_else(|| default_scan(d));
        for v in grid_points(&cache.bounds, d, per_axis) {
            if inside(&v) {
                continue;
            }
            let gap = corner_cap(cache, local, &v) - cache.value_at(local, &v).unwrap();
            let p = GapPoint { vo: OutSpaceValues(v), gap, state: t, policy: None };
            if better(&p, &best) {
                best = Some(p);
            }
        }
    }
    let mut best = best.unwrap_or(GapPoint {
        vo: cache.bounds.floor(d),
        gap: 0.0,
        state: g.entry_states()[0],
        policy: None,
    });
    best.gap = best.gap.max(0.0);
    Ok(best)
}

/// Grows a cache from the optimal policies at the box corners by adding the
/// policy optimal at the largest-gap point until every gap is within `eps`.
pub fn build_hull_cache(mdp: &Mdp, g: &Region, eps: f64, bounds: ValueBounds, opts: &HullOptions) -> Result<PolicyCache> {
    if !(eps > 0.0) {
        return Err(Error::InvalidEpsilon(eps));
    }
    let d = g.fan_out();
    if d > MAX_HULL_DIM {
        return Err(Error::UnsupportedDimension(d));
    }
    let mut cache = PolicyCache::new(mdp, g, bounds)?;
    for mask in 0..1usize << d {
        let corner = (0..d).map(|c| if mask >> c & 1 == 1 { bounds.v_max } else { bounds.v_min }).collect();
        cache.insert_optimal_at(mdp, &OutSpaceValues(corner))?;
    }
    let mut history = Vec::new();
    let max_iterations = 10 * opts.max_policies.max(1) + 100;
    let (certified, worst) = loop {
        let worst = hull_find_worst_gap(&cache, opts)?;
        history.push(worst.gap);
        if worst.gap <= eps {
            break (true, worst);
        }
        if cache.len() >= opts.max_policies || history.len() >= max_iterations {
            break (false, worst);
        }
        let anchors_before: usize = cache.entries.iter().map(|e| e.anchors.len()).sum();
        cache.insert_optimal_at(mdp, &worst.vo)?;
        let anchors_after: usize = cache.entries.iter().map(|e| e.anchors.len()).sum();
        if anchors_after == anchors_before {
            break (false, worst);
        }
    };
    cache.certificate = Some(Certificate {
        method: BuildMethod::Hull,
        eps,
        guarantee: Guarantee::HighLevelGap,
        worst_error: worst.gap,
        worst_point: worst.vo,
        certified,
        history,
    });
    Ok(cache)
}
