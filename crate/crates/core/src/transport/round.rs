//! Deterministic projection of an approximately feasible plan onto the
//! transport polytope Π(r, c).

use nalgebra::{DMatrix, DVector};

use crate::error::{PrwError, Result};
use crate::transport::{plan_col_sums, plan_row_sums};

/// Rounds a nonnegative plan with mass at most one onto Π(r, c):
/// rows are scaled down to their targets, then columns, then the remaining
/// marginal deficits are restored by the rank-one correction
/// `err_r·err_cᵀ/‖err_r‖₁`. The output moves at most
/// `‖π1 − r‖₁ + ‖πᵀ1 − c‖₁` mass in ℓ₁ distance from the input.
pub fn round_plan(plan: &DMatrix<f64>, r: &DVector<f64>, c: &DVector<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = plan.shape();
    if r.len() != n || c.len() != m {
        return Err(PrwError::ShapeMismatch(format!(
            "plan {n}x{m} with marginals of length {}/{}",
            r.len(),
            c.len()
        )));
    }
    let mut p = plan.clone();
    for v in p.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-12 {
                return Err(PrwError::InvalidArgument(format!(
                    "plan entry {v} is negative"
                )));
            }
            *v = 0.0;
        }
    }
    let mass: f64 = p.iter().sum();
    if mass > 1.0 + 1e-9 {
        return Err(PrwError::InvalidArgument(format!(
            "plan mass {mass} exceeds 1"
        )));
    }

    let rows = plan_row_sums(&p);
    for i in 0..n {
        let scale = if rows[i] > r[i] { r[i] / rows[i] } else { 1.0 };
        if scale < 1.0 {
            for j in 0..m {
                p[(i, j)] *= scale;
            }
        }
    }
    let cols = plan_col_sums(&p);
    for j in 0..m {
        let scale = if cols[j] > c[j] { c[j] / cols[j] } else { 1.0 };
        if scale < 1.0 {
            p.column_mut(j).scale_mut(scale);
        }
    }

    let rows = plan_row_sums(&p);
    let cols = plan_col_sums(&p);
    let err_r: DVector<f64> = DVector::from_iterator(n, (0..n).map(|i| (r[i] - rows[i]).max(0.0)));
    let err_c: DVector<f64> = DVector::from_iterator(m, (0..m).map(|j| (c[j] - cols[j]).max(0.0)));
    let er1: f64 = err_r.iter().sum();
    let ec1: f64 = err_c.iter().sum();
    if er1 <= f64::EPSILON {
        if ec1 > 1e-9 {
            return Err(PrwError::Numerical(format!(
                "inconsistent input mass: rows feasible but columns short by {ec1}"
            )));
        }
        return Ok(p);
    }
    for j in 0..m {
        let w = err_c[j] / er1;
        if w != 0.0 {
            for i in 0..n {
                p[(i, j)] += err_r[i] * w;
            }
        }
    }
    Ok(p)
}
