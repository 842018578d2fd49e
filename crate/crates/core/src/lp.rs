//! A small dense two-phase simplex solver.
//!
//! Every LP in this crate has at most a few dozen rows and a handful of
//! variables, so the solver favours determinism and verifiability over
//! sparsity. Problems are stated as
//!
//! ```text
//! maximize  c . x
//! subject to  A x <= b,   lower <= x <= upper   (bounds optional per variable)
//! ```
//!
//! Variables without bounds are free. Pricing is Dantzig's rule until
//! `10 * (rows + cols)` pivots have been spent, after which Bland's rule takes
//! over to break cycling. The final basis is re-solved from the original data
//! with an LU factorization, and the recovered point is checked against every
//! constraint before it is returned.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Feasibility tolerance for returned optimal points.
pub const FEAS_TOL: f64 = 1e-8;

const PRICE_TOL: f64 = 1e-10;
const PIVOT_TOL: f64 = 1e-11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

/// `maximize objective . x` subject to `<=` rows and optional bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpProblem {
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpOutcome {
    pub status: LpStatus,
    /// Optimal point; empty unless `status == Optimal`.
    pub solution: Vec<f64>,
    /// Objective at `solution`; `-inf` when infeasible, `+inf` when unbounded.
    pub objective_value: f64,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum LpError {
    #[error("malformed LP: {0}")]
    Malformed(String),
    #[error("simplex failed to converge after {0} pivots")]
    Cycling(usize),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl LpProblem {
    /// A problem over `objective.len()` free variables with no constraints.
    pub fn new(objective: Vec<f64>) -> Self {
        let n = objective.len();
        Self { objective, constraints: Vec::new(), lower: vec![None; n], upper: vec![None; n] }
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    /// Adds `coeffs . x <= rhs`.
    pub fn leq(&mut self, coeffs: Vec<f64>, rhs: f64) -> &mut Self {
        self.constraints.push(Constraint { coeffs, rhs });
        self
    }

    pub fn bound(&mut self, var: usize, lower: Option<f64>, upper: Option<f64>) -> &mut Self {
        self.lower[var] = lower;
        self.upper[var] = upper;
        self
    }

    /// Largest violation of any constraint or bound at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0_f64;
        for c in &self.constraints {
            let lhs: f64 = c.coeffs.iter().zip(x).map(|(a, v)| a * v).sum();
            worst = worst.max(lhs - c.rhs);
        }
        for (j, v) in x.iter().enumerate() {
            if let Some(l) = self.lower[j] {
                worst = worst.max(l - v);
            }
            if let Some(u) = self.upper[j] {
                worst = worst.max(v - u);
            }
        }
        worst
    }

    /// Like [`max_violation`](Self::max_violation), but each row's violation is
    /// divided by `max(1, |rhs|, sum |a_j x_j|)`.
    pub fn scaled_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0_f64;
        for c in &self.constraints {
            let (lhs, mag) = c.coeffs.iter().zip(x).fold((0.0, 0.0), |(l, m), (a, v)| (l + a * v, m + (a * v).abs()));
            worst = worst.max((lhs - c.rhs) / mag.max(c.rhs.abs()).max(1.0));
        }
        for (j, v) in x.iter().enumerate() {
            if let Some(l) = self.lower[j] {
                worst = worst.max((l - v) / l.abs().max(1.0));
            }
            if let Some(u) = self.upper[j] {
                worst = worst.max((v - u) / u.abs().max(1.0));
            }
        }
        worst
    }

    pub fn objective_at(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    fn validate(&self) -> Result<(), LpError> {
        let n = self.n_vars();
        if self.lower.len() != n || self.upper.len() != n {
            return Err(LpError::Malformed("bound vectors must match variable count".into()));
        }
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(LpError::Malformed("non-finite objective coefficient".into()));
        }
        for (i, c) in self.constraints.iter().enumerate() {
            if c.coeffs.len() != n {
                return Err(LpError::Malformed(format!(
                    "row {i} has {} coefficients, expected {n}",
                    c.coeffs.len()
                )));
            }
            if !c.rhs.is_finite() || c.coeffs.iter().any(|a| !a.is_finite()) {
                return Err(LpError::Malformed(format!("row {i} is not finite")));
            }
        }
        for j in 0..n {
            for b in [self.lower[j], self.upper[j]].into_iter().flatten() {
                if !b.is_finite() {
                    return Err(LpError::Malformed(format!("bound on variable {j} is not finite")));
                }
            }
        }
        Ok(())
    }
}

/// How an original variable is expressed through nonnegative columns.
#[derive(Clone, Debug)]
struct VarMap {
    offset: f64,
    terms: Vec<(usize, f64)>,
}

/// `A y <= b, y >= 0` in nonnegative columns.
struct StandardForm {
    n_cols: usize,
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    cost: Vec<f64>,
    maps: Vec<VarMap>,
}

fn standardize(lp: &LpProblem) -> Option<StandardForm> {
    let mut maps = Vec::with_capacity(lp.n_vars());
    let mut n_cols = 0;
    // (column, bound) rows to add for doubly bounded variables
    let mut box_rows = Vec::new();
    for j in 0..lp.n_vars() {
        let map = match (lp.lower[j], lp.upper[j]) {
            (Some(l), Some(u)) => {
                if u < l {
                    return None;
                }
                box_rows.push((n_cols, u - l));
                VarMap { offset: l, terms: vec![(n_cols, 1.0)] }
            }
            (Some(l), None) => VarMap { offset: l, terms: vec![(n_cols, 1.0)] },
            (None, Some(u)) => VarMap { offset: u, terms: vec![(n_cols, -1.0)] },
            (None, None) => {
                n_cols += 1;
                VarMap { offset: 0.0, terms: vec![(n_cols - 1, 1.0), (n_cols, -1.0)] }
            }
        };
        n_cols += 1;
        maps.push(map);
    }

    let mut rows = Vec::with_capacity(lp.constraints.len() + box_rows.len());
    let mut rhs = Vec::with_capacity(rows.capacity());
    for c in &lp.constraints {
        let mut row = vec![0.0; n_cols];
        let mut b = c.rhs;
        for (j, a) in c.coeffs.iter().enumerate() {
            if *a == 0.0 {
                continue;
            }
            b -= a * maps[j].offset;
            for &(col, sign) in &maps[j].terms {
                row[col] += a * sign;
            }
        }
        rows.push(row);
        rhs.push(b);
    }
    for (col, width) in box_rows {
        let mut row = vec![0.0; n_cols];
        row[col] = 1.0;
        rows.push(row);
        rhs.push(width);
    }

    let mut cost = vec![0.0; n_cols];
    for (j, c) in lp.objective.iter().enumerate() {
        for &(col, sign) in &maps[j].terms {
            cost[col] += c * sign;
        }
    }
    Some(StandardForm { n_cols, rows, rhs, cost, maps })
}

#[derive(Debug, PartialEq)]
enum RunResult {
    Optimal,
    Unbounded,
}

/// Dense simplex tableau over `[structural | slack | artificial]` columns.
struct Tableau {
    m: usize,
    width: usize,
    /// `m` rows of `width + 1` entries; the last entry is the right-hand side.
    cells: Vec<f64>,
    basis: Vec<usize>,
    /// Reduced costs per column plus, in the last slot, the objective value.
    reduced: Vec<f64>,
    first_art: usize,
    pivots: usize,
}

impl Tableau {
    fn build(sf: &StandardForm) -> Self {
        let m = sf.rows.len();
        let n_art = sf.rhs.iter().filter(|b| **b < 0.0).count();
        let width = sf.n_cols + m + n_art;
        let first_art = sf.n_cols + m;
        let mut cells = vec![0.0; m * (width + 1)];
        let mut basis = Vec::with_capacity(m);
        let mut art = first_art;
        for i in 0..m {
            let row = &mut cells[i * (width + 1)..(i + 1) * (width + 1)];
            let sign = if sf.rhs[i] < 0.0 { -1.0 } else { 1.0 };
            for (j, a) in sf.rows[i].iter().enumerate() {
                row[j] = sign * a;
            }
            row[sf.n_cols + i] = sign;
            row[width] = sign * sf.rhs[i];
            if sign < 0.0 {
                row[art] = 1.0;
                basis.push(art);
                art += 1;
            } else {
                basis.push(sf.n_cols + i);
            }
        }
        Self { m, width, cells, basis, reduced: vec![0.0; width + 1], first_art, pivots: 0 }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.cells[i * (self.width + 1) + j]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.at(i, self.width)
    }

    fn set_objective(&mut self, cost: &[f64]) {
        for j in 0..=self.width {
            let cj = if j < self.width { cost[j] } else { 0.0 };
            let mut z = 0.0;
            for i in 0..self.m {
                z += cost[self.basis[i]] * self.at(i, j);
            }
            // Reduced cost for columns, current objective value in the last slot.
            self.reduced[j] = if j < self.width { cj - z } else { z };
        }
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let w = self.width + 1;
        let p = self.at(r, c);
        for j in 0..w {
            self.cells[r * w + j] /= p;
        }
        let pivot_row: Vec<f64> = self.cells[r * w..(r + 1) * w].to_vec();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.cells[i * w + c];
            if f != 0.0 {
                for (cell, &pj) in self.cells[i * w..(i + 1) * w].iter_mut().zip(&pivot_row) {
                    *cell -= f * pj;
                }
                self.cells[i * w + c] = 0.0;
            }
        }
        let f = self.reduced[c];
        if f != 0.0 {
            for (rj, &pj) in self.reduced[..self.width].iter_mut().zip(&pivot_row) {
                *rj -= f * pj;
            }
            self.reduced[self.width] += f * pivot_row[self.width];
            self.reduced[c] = 0.0;
        }
        self.basis[r] = c;
        self.pivots += 1;
    }

    fn run(&mut self, allowed: &dyn Fn(usize) -> bool, bland_from_start: bool) -> Result<RunResult, LpError> {
        let size = self.m + self.width;
        let switch = if bland_from_start { 0 } else { 10 * size };
        let cap = self.pivots + 50 * size + 200;
        let start = self.pivots;
        loop {
            let bland = self.pivots - start >= switch;
            let mut entering = None;
            let mut best = PRICE_TOL;
            for j in 0..self.width {
                if !allowed(j) || self.reduced[j] <= PRICE_TOL {
                    continue;
                }
                if bland {
                    entering = Some(j);
                    break;
                }
                if self.reduced[j] > best {
                    best = self.reduced[j];
                    entering = Some(j);
                }
            }
            let Some(c) = entering else {
                return Ok(RunResult::Optimal);
            };

            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.m {
                let a = self.at(i, c);
                if a <= PIVOT_TOL {
                    continue;
                }
                let ratio = self.rhs(i).max(0.0) / a;
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((bi, br)) => {
                        let tie = (ratio - br).abs() <= 1e-12 * br.abs().max(1.0);
                        if ratio < br && !tie || tie && self.basis[i] < self.basis[bi] {
                            Some((i, ratio))
                        } else {
                            Some((bi, br))
                        }
                    }
                };
            }
            let Some((r, _)) = leave else {
                return Ok(RunResult::Unbounded);
            };
            self.pivot(r, c);
            if self.pivots > cap {
                return Err(LpError::Cycling(self.pivots));
            }
        }
    }
}

/// Solves `lp`. Infeasibility and unboundedness are reported through
/// [`LpStatus`]; an error means the solver could not produce a trustworthy
/// answer at all.
pub fn solve(lp: &LpProblem) -> Result<LpOutcome, LpError> {
    lp.validate()?;
    match solve_with(lp, false) {
        Ok(out) => Ok(out),
        Err(LpError::Numerical(_)) | Err(LpError::Cycling(_)) => solve_with(lp, true),
        Err(e) => Err(e),
    }
}

fn infeasible() -> LpOutcome {
    LpOutcome { status: LpStatus::Infeasible, solution: Vec::new(), objective_value: f64::NEG_INFINITY }
}

fn solve_with(lp: &LpProblem, bland: bool) -> Result<LpOutcome, LpError> {
    let Some(sf) = standardize(lp) else {
        return Ok(infeasible());
    };
    let mut tab = Tableau::build(&sf);
    let scale = sf.rhs.iter().fold(1.0_f64, |m, b| m.max(b.abs()));

    if tab.first_art < tab.width {
        let mut phase1 = vec![0.0; tab.width];
        for c in phase1.iter_mut().skip(tab.first_art) {
            *c = -1.0;
        }
        tab.set_objective(&phase1);
        tab.run(&|_| true, bland)?;
        if tab.reduced[tab.width] < -1e-9 * scale {
            return Ok(infeasible());
        }
        // Drive remaining artificials out of the basis where possible; rows
        // with no usable pivot are redundant and keep a zero artificial.
        for i in 0..tab.m {
            if tab.basis[i] < tab.first_art {
                continue;
            }
            let col = (0..tab.first_art)
                .filter(|&j| tab.at(i, j).abs() > 1e-9)
                .max_by(|&a, &b| tab.at(i, a).abs().total_cmp(&tab.at(i, b).abs()));
            if let Some(j) = col {
                tab.pivot(i, j);
            }
        }
    }

    let mut cost = vec![0.0; tab.width];
    cost[..sf.n_cols].copy_from_slice(&sf.cost);
    tab.set_objective(&cost);
    let first_art = tab.first_art;
    if tab.run(&|j| j < first_art, bland)? == RunResult::Unbounded {
        return Ok(LpOutcome {
            status: LpStatus::Unbounded,
            solution: Vec::new(),
            objective_value: f64::INFINITY,
        });
    }

    let y = recover_columns(&sf, &tab);
    let x: Vec<f64> = sf
        .maps
        .iter()
        .map(|m| m.offset + m.terms.iter().map(|&(col, s)| s * y[col]).sum::<f64>())
        .collect();
    let violation = lp.scaled_violation(&x);
    if !(violation <= FEAS_TOL) {
        return Err(LpError::Numerical(format!("recovered point violates constraints by {violation:e}")));
    }
    Ok(LpOutcome { status: LpStatus::Optimal, objective_value: lp.objective_at(&x), solution: x })
}

/// Values of the nonnegative columns at the final basis. The basic columns
/// are re-solved from the original standard-form data so that accumulated
/// pivoting error does not leak into the answer.
fn recover_columns(sf: &StandardForm, tab: &Tableau) -> Vec<f64> {
    let m = tab.m;
    let mut y = vec![0.0; sf.n_cols];
    let from_tableau = |y: &mut Vec<f64>| {
        for i in 0..m {
            if tab.basis[i] < sf.n_cols {
                y[tab.basis[i]] = tab.rhs(i).max(0.0);
            }
        }
    };
    if m == 0 {
        return y;
    }
    // Column `j` of the original system [A | I | art].
    let column = |j: usize, i: usize| -> f64 {
        if j < sf.n_cols {
            sf.rows[i][j]
        } else if j < sf.n_cols + m {
            if j - sf.n_cols == i { 1.0 } else { 0.0 }
        } else {
            // Artificial columns only ever sit in rows with negative rhs,
            // where the original row was negated; in unnegated form the
            // artificial enters with coefficient -1.
            let art_row = (0..m).filter(|&r| sf.rhs[r] < 0.0).nth(j - tab.first_art).unwrap_or(usize::MAX);
            if art_row == i { -1.0 } else { 0.0 }
        }
    };
    let b = DMatrix::from_fn(m, m, |i, k| column(tab.basis[k], i));
    let rhs = DMatrix::from_fn(m, 1, |i, _| sf.rhs[i]);
    match b.lu().solve(&rhs) {
        Some(sol) if sol.iter().all(|v| v.is_finite()) => {
            for k in 0..m {
                if tab.basis[k] < sf.n_cols {
                    y[tab.basis[k]] = sol[(k, 0)].max(0.0);
                }
            }
        }
        _ => from_tableau(&mut y),
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_upper_bound() {
        let mut lp = LpProblem::new(vec![1.0]);
        lp.leq(vec![1.0], 3.0);
        let out = solve(&lp).unwrap();
        assert_eq!(out.status, LpStatus::Optimal);
        assert!((out.solution[0] - 3.0).abs() < 1e-12);
        assert!((out.objective_value - 3.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_bounds() {
        let mut lp = LpProblem::new(vec![1.0]);
        lp.leq(vec![1.0], -1.0).bound(0, Some(0.0), None);
        assert_eq!(solve(&lp).unwrap().status, LpStatus::Infeasible);
    }

    #[test]
    fn crossed_box_is_infeasible() {
        let mut lp = LpProblem::new(vec![1.0]);
        lp.bound(0, Some(2.0), Some(1.0));
        assert_eq!(solve(&lp).unwrap().status, LpStatus::Infeasible);
    }

    #[test]
    fn unbounded_ray() {
        let mut lp = LpProblem::new(vec![1.0, 1.0]);
        lp.leq(vec![1.0, -1.0], 1.0).bound(0, Some(0.0), None).bound(1, Some(0.0), None);
        assert_eq!(solve(&lp).unwrap().status, LpStatus::Unbounded);
    }

    #[test]
    fn two_variable_vertex() {
        // Intersections of x+2y=4 and 3x+y=6: x=1.6, y=1.2, objective 2.8.
        let mut lp = LpProblem::new(vec![1.0, 1.0]);
        lp.leq(vec![1.0, 2.0], 4.0)
            .leq(vec![3.0, 1.0], 6.0)
            .bound(0, Some(0.0), None)
            .bound(1, Some(0.0), None);
        let out = solve(&lp).unwrap();
        assert_eq!(out.status, LpStatus::Optimal);
        assert!((out.objective_value - 2.8).abs() < 1e-12);
        assert!((out.solution[0] - 1.6).abs() < 1e-12);
    }

    #[test]
    fn free_variables_and_equalities() {
        // maximize -x subject to x = -2 (as two inequalities), x free.
        let mut lp = LpProblem::new(vec![-1.0]);
        lp.leq(vec![1.0], -2.0).leq(vec![-1.0], 2.0);
        let out = solve(&lp).unwrap();
        assert_eq!(out.status, LpStatus::Optimal);
        assert!((out.solution[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cycling_example() {
        // Beale's classic cycling example (maximization form).
        let mut lp = LpProblem::new(vec![0.75, -150.0, 0.02, -6.0]);
        lp.leq(vec![0.25, -60.0, -0.04, 9.0], 0.0)
            .leq(vec![0.5, -90.0, -0.02, 3.0], 0.0)
            .leq(vec![0.0, 0.0, 1.0, 0.0], 1.0);
        for j in 0..4 {
            lp.bound(j, Some(0.0), None);
        }
        let out = solve(&lp).unwrap();
        assert_eq!(out.status, LpStatus::Optimal);
        assert!((out.objective_value - 0.05).abs() < 1e-10);
    }

    #[test]
    fn malformed_rows_are_rejected() {
        let mut lp = LpProblem::new(vec![1.0, 1.0]);
        lp.leq(vec![1.0], 1.0);
        assert!(matches!(solve(&lp), Err(LpError::Malformed(_))));
    }
}
