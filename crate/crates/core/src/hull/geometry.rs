//! Lower convex envelope of lifted anchor points `(V_i, y_i)` over
//! out-space value space, for fan-out up to 3.
//!
//! Optimal region values are convex in `vo`, so any chord through points
//! where the optimal value is known lies above the optimal value between
//! them. The lowest such chords form the lower envelope, which is therefore
//! an upper bound on the optimal value inside the anchors' convex hull.
//! Facets are found by checking every `(d + 1)`-subset of points (fine for
//! the few dozen anchors a cache holds); coplanar groups are triangulated so
//! each facet is a simplex.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cache::PolicyCache;
use crate::error::{Error, Result};
use crate::region::OutSpaceValues;

/// Largest fan-out handled by explicit enumeration.
pub const MAX_HULL_DIM: usize = 3;

/// One simplex of the envelope for a fixed state:
/// `g(vo) = constant + coefficients . vo` over the simplex spanned by
/// `vertices`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HullFacet {
    pub state: usize,
    pub coefficients: Vec<f64>,
    pub constant: f64,
    pub vertices: Vec<OutSpaceValues>,
}

impl HullFacet {
    pub fn value(&self, vo: &[f64]) -> f64 {
        self.constant + self.coefficients.iter().zip(vo).map(|(a, v)| a * v).sum::<f64>()
    }

    /// Barycentric coordinates of `vo` if it lies in the facet's simplex.
    pub fn barycentric(&self, vo: &[f64], tol: f64) -> Option<Vec<f64>> {
        let lambda = barycentric(&self.vertices, vo)?;
        lambda.iter().all(|l| *l >= -tol).then_some(lambda)
    }
}

fn barycentric(vertices: &[OutSpaceValues], vo: &[f64]) -> Option<Vec<f64>> {
    let k = vertices.len();
    let d = vo.len();
    let a = DMatrix::from_fn(d + 1, k, |r, c| if r < d { vertices[c].0[r] } else { 1.0 });
    let mut rhs = DVector::from_column_slice(vo);
    rhs = rhs.push(1.0);
    let lambda = a.lu().solve(&rhs)?;
    Some(lambda.iter().copied().collect())
}

/// Lifted anchor points for internal position `local`: each anchor paired
/// with the value of the policy optimal there. Repeated anchors keep the
/// larger value.
pub(crate) fn lifted_anchors(cache: &PolicyCache, local: usize) -> Vec<(Vec<f64>, f64)> {
    let mut pts: Vec<(Vec<f64>, f64)> = Vec::new();
    for e in &cache.entries {
        for a in &e.anchors {
            let y = e.f.value(local, a.as_slice());
            match pts.iter_mut().find(|(v, _)| v == &a.0) {
                Some((_, old)) => *old = old.max(y),
                None => pts.push((a.0.clone(), y)),
            }
        }
    }
    pts
}

fn subsets(n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        visit(&idx);
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cross(a: &[f64], b: &[f64]) -> Vec<f64> {
    vec![a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn scale_of(points: &[Vec<f64>]) -> f64 {
    points.iter().flatten().fold(1.0f64, |m, x| m.max(x.abs()))
}

/// Normal of the hyperplane through `k` points in `R^k` (k = 2 or 3).
fn normal(pts: &[&Vec<f64>]) -> Vec<f64> {
    match pts.len() {
        2 => {
            let e = sub(pts[1], pts[0]);
            vec![-e[1], e[0]]
        }
        3 => cross(&sub(pts[1], pts[0]), &sub(pts[2], pts[0])),
        _ => unreachable!("triangulation only handles dimensions 1 to 3"),
    }
}

/// Coordinates of `group` within its own `(k - 1)`-dimensional affine hull,
/// given the hyperplane normal `n`.
fn flatten_group(points: &[Vec<f64>], group: &[usize], n: &[f64]) -> Vec<Vec<f64>> {
    let origin = &points[group[0]];
    let far = group
        .iter()
        .max_by(|&&a, &&b| norm(&sub(&points[a], origin)).total_cmp(&norm(&sub(&points[b], origin))))
        .copied()
        .unwrap();
    let mut u = sub(&points[far], origin);
    let len = norm(&u);
    u.iter_mut().for_each(|x| *x /= len);
    let mut basis = vec![u];
    if n.len() == 3 {
        let mut v = cross(n, &basis[0]);
        let len = norm(&v);
        v.iter_mut().for_each(|x| *x /= len);
        basis.push(v);
    }
    group
        .iter()
        .map(|&p| {
            let rel = sub(&points[p], origin);
            basis.iter().map(|b| dot(b, &rel)).collect()
        })
        .collect()
}

/// Splits the convex hull of a full-dimensional point set in `R^k`
/// (`k <= 3`) into simplices with vertices among the points, by coning from
/// the lexicographically smallest point over every boundary facet not
/// containing it.
fn triangulate(points: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let k = points[0].len();
    let lex_min = (0..points.len())
        .min_by(|&a, &b| {
            points[a].iter().zip(&points[b]).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        })
        .unwrap();
    if k == 1 {
        let hi = (0..points.len()).max_by(|&a, &b| points[a][0].total_cmp(&points[b][0])).unwrap();
        return vec![vec![lex_min, hi]];
    }
    let tol = 1e-9 * scale_of(points);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut simplices = Vec::new();
    subsets(points.len(), k, |idx| {
        let chosen: Vec<&Vec<f64>> = idx.iter().map(|&i| &points[i]).collect();
        let mut n = normal(&chosen);
        let len = norm(&n);
        if len <= tol {
            return;
        }
        n.iter_mut().for_each(|x| *x /= len);
        let c = dot(&n, chosen[0]);
        let side: Vec<f64> = points.iter().map(|p| dot(&n, p) - c).collect();
        let above = side.iter().all(|s| *s >= -tol);
        let below = side.iter().all(|s| *s <= tol);
        if !(above || below) {
            return;
        }
        let group: Vec<usize> = (0..points.len()).filter(|&i| side[i].abs() <= tol).collect();
        if group.contains(&lex_min) || !seen.insert(group.clone()) {
            return;
        }
        let flat = flatten_group(points, &group, &n);
        for face in triangulate(&flat) {
            let mut simplex: Vec<usize> = face.iter().map(|&f| group[f]).collect();
            simplex.push(lex_min);
            simplices.push(simplex);
        }
    });
    simplices
}

/// A supporting plane `(w, b)` with the indices of the points on it.
pub(crate) type Facet = (Vec<f64>, f64, Vec<usize>);

/// Simplices of the lower convex envelope of `points` (`(V, y)` pairs with
/// `V` in `R^d`).
pub(crate) fn lower_envelope(points: &[(Vec<f64>, f64)], d: usize) -> Result<Vec<Facet>> {
    if d > MAX_HULL_DIM {
        return Err(Error::UnsupportedDimension(d));
    }
    if d == 0 {
        let (best, _) = points
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
            .ok_or(Error::DegenerateAnchors)?;
        return Ok(vec![(Vec::new(), points[best].1, vec![best])]);
    }
    let tol = 1e-9 * points.iter().fold(1.0f64, |m, (v, y)| m.max(y.abs()).max(v.iter().fold(0.0f64, |a, x| a.max(x.abs()))));
    let mut planes: Vec<(Vec<f64>, f64)> = Vec::new();
    subsets(points.len(), d + 1, |idx| {
        let origin = &points[idx[0]].0;
        let edges = DMatrix::from_fn(d, d, |r, c| points[idx[r + 1]].0[c] - origin[c]);
        let spread: f64 = (0..d).map(|r| norm(&sub(&points[idx[r + 1]].0, origin))).product();
        if edges.determinant().abs() <= 1e-12 * spread {
            return;
        }
        let a = DMatrix::from_fn(d + 1, d + 1, |r, c| if c < d { points[idx[r]].0[c] } else { 1.0 });
        let y = DVector::from_iterator(d + 1, idx.iter().map(|&i| points[i].1));
        let Some(x) = a.lu().solve(&y) else { return };
        let w: Vec<f64> = x.iter().take(d).copied().collect();
        let b = x[d];
        if points.iter().any(|(v, yv)| *yv < dot(&w, v) + b - tol) {
            return;
        }
        if !planes.iter().any(|(w2, b2)| (b - b2).abs() <= tol && w.iter().zip(w2).all(|(p, q)| (p - q).abs() <= tol)) {
            planes.push((w, b));
        }
    });
    if planes.is_empty() {
        return Err(Error::DegenerateAnchors);
    }
    let mut facets = Vec::new();
    for (w, b) in planes {
        let group: Vec<usize> =
            (0..points.len()).filter(|&i| (points[i].1 - dot(&w, &points[i].0) - b).abs() <= tol).collect();
        let projected: Vec<Vec<f64>> = group.iter().map(|&i| points[i].0.clone()).collect();
        for simplex in triangulate(&projected) {
            facets.push((w.clone(), b, simplex.iter().map(|&j| group[j]).collect()));
        }
    }
    Ok(facets)
}

/// Facets of the upper bounding surface at `state` (a global index inside
/// the cache's region). Fan-out above 3 is rejected; use
/// [`crate::hull::upper_bound_at`] there.
pub fn enumerate_upper_hull(cache: &PolicyCache, state: usize) -> Result<Vec<HullFacet>> {
    let d = cache.fan_out();
    if d > MAX_HULL_DIM {
        return Err(Error::UnsupportedDimension(d));
    }
    let local = cache
        .region
        .local_index(state)
        .ok_or_else(|| Error::InvalidPartition(format!("state {state} is not in region {}", cache.region.id)))?;
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    let points = lifted_anchors(cache, local);
    Ok(lower_envelope(&points, d)?
        .into_iter()
        .map(|(w, b, simplex)| HullFacet {
            state,
            coefficients: w,
            constant: b,
            vertices: simplex.iter().map(|&i| OutSpaceValues(points[i].0.clone())).collect(),
        })
        .collect())
}
