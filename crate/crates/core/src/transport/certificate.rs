//! Stationarity certificates for a dual iterate and its rounded plan.
//!
//! A converged iterate x = (α, β, U) with measured residuals (e₁, e₂) and a
//! feasible rounding π̂ of its plan satisfies two a-posteriori bounds:
//!
//! ```text
//! ‖Proj_{T_U}(−2 V_π̂ U)‖_F ≤ e₁ + 2‖C‖_∞·e₂
//! ⟨π̂, Z(x)⟩ ≤ η(log(nm) + ‖log κ‖_var) + (‖α‖_var + ‖β‖_var + ‖C‖_∞)·e₂
//! ```
//!
//! where `Z(x)_ij = φ_ij − min φ` is the slack matrix of the constraint
//! values. Both sides of each bound are reported so callers can verify them.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{PrwError, Result};
use crate::geometry::StiefelPoint;
use crate::transport::{
    projected_cost, riemannian_grad, var_seminorm, DualIterate, MultiplierState, PrwInstance,
};

/// Measured stationarity quantities and their certified upper bounds.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StationarityCertificate {
    /// ‖Proj_{T_U}(−2 V_π U)‖_F at the iterate's own plan.
    pub e1: f64,
    /// Total marginal violation of the iterate's plan.
    pub e2: f64,
    /// Gradient norm measured at the rounded feasible plan.
    pub e1_rounded: f64,
    /// Certified bound on `e1_rounded`.
    pub grad_bound: f64,
    /// Complementarity value ⟨π̂, Z(x)⟩ of the rounded plan.
    pub complementarity: f64,
    /// Certified bound on the complementarity value.
    pub gap_bound: f64,
    /// ⟨π̂, C(U)⟩ — the feasible transport cost at the projection, which
    /// lower-bounds the quality of the restricted OT value.
    pub primal_value: f64,
}

impl StationarityCertificate {
    /// True when both measured quantities sit within their bounds (with a
    /// small absolute slack for round-off).
    pub fn holds(&self, slack: f64) -> bool {
        self.e1_rounded <= self.grad_bound + slack && self.complementarity <= self.gap_bound + slack
    }
}

/// Constraint slack matrix `Z(x)_ij = φ_ij(x) − min_ij φ(x)`; entries are
/// nonnegative by construction.
pub fn z_matrix(
    inst: &PrwInstance,
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
    u: &StiefelPoint,
) -> Result<DMatrix<f64>> {
    if alpha.len() != inst.n() || beta.len() != inst.m() {
        return Err(PrwError::ShapeMismatch(
            "dual lengths differ from instance".into(),
        ));
    }
    let cu = projected_cost(inst, u)?;
    let mut phi = cu;
    for j in 0..inst.m() {
        let bj = beta[j];
        for i in 0..inst.n() {
            phi[(i, j)] += alpha[i] + bj;
        }
    }
    let min = phi.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    Ok(phi.map(|v| v - min))
}

/// Builds the certificate for an iterate and a rounded plan in Π(r, c).
pub fn stationarity_certificate(
    inst: &PrwInstance,
    kappa: &MultiplierState,
    eta: f64,
    iterate: &DualIterate,
    rounded: &DMatrix<f64>,
) -> Result<StationarityCertificate> {
    if rounded.shape() != (inst.n(), inst.m()) {
        return Err(PrwError::ShapeMismatch(
            "rounded plan shape differs from instance".into(),
        ));
    }
    let u = iterate.projection();
    let (_, e1) = riemannian_grad(inst, iterate.plan(), u)?;
    let e2 = iterate.e2();
    let (_, e1_rounded) = riemannian_grad(inst, rounded, u)?;

    let z = z_matrix(inst, iterate.alpha(), iterate.beta(), u)?;
    let complementarity = rounded.dot(&z);

    let cu = projected_cost(inst, u)?;
    let primal_value = rounded.dot(&cu);

    let c_inf = inst.cost_sup();
    let nm = (inst.n() * inst.m()) as f64;
    let grad_bound = e1 + 2.0 * c_inf * e2;
    let gap_bound = eta * (nm.ln() + kappa.log_var())
        + (var_seminorm(iterate.alpha()) + var_seminorm(iterate.beta()) + c_inf) * e2;

    Ok(StationarityCertificate {
        e1,
        e2,
        e1_rounded,
        grad_bound,
        complementarity,
        gap_bound,
        primal_value,
    })
}
