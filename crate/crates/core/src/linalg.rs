//! Dense LU solves with a post-solve residual check.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Residual tolerance applied to every solve, relative to `max(1, |rhs|_inf)`.
pub const RESIDUAL_TOL: f64 = 1e-9;

/// Solves `a * x = rhs` for one or more right-hand sides sharing a single
/// factorization.
pub(crate) fn lu_solve(a: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() == 0 {
        return Ok(DMatrix::zeros(0, rhs.ncols()));
    }
    let lu = a.clone().lu();
    let x = lu
        .solve(rhs)
        .ok_or_else(|| Error::LinearSolve("singular matrix".into()))?;
    let residual = (a * &x - rhs).amax();
    let scale = rhs.amax().max(1.0);
    if !residual.is_finite() || residual > RESIDUAL_TOL * scale {
        return Err(Error::LinearSolve(format!(
            "residual {residual:e} exceeds tolerance"
        )));
    }
    Ok(x)
}
