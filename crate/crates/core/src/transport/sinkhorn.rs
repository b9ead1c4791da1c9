//! Sinkhorn inner solves for the dual potentials at a fixed projection.
//!
//! One iteration is a full (α, β) update pair: α is set to the exact
//! minimizer of the objective given β, then β given the new α. After the β
//! half-step the column marginal of the implied plan is exact and the kernel
//! mass ‖ζ‖₁ equals 1 up to round-off, so the stopping rule only watches the
//! row residual ‖π1 − r‖₁.
//!
//! Two equivalent formulations are provided: `Exp` runs the classical
//! diagonal scaling `u = r/(Av), v = c/(Aᵀu)` on `A = κ ⊙ exp(−C(U)/η)`,
//! which is fast but can overflow for small η; `Log` performs the same
//! updates through row/column log-sum-exp and is safe for any magnitudes.
//! Exp mode falls back to log mode automatically when it produces non-finite
//! scalings, and the outcome records the switch.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{PrwError, Result};
use crate::geometry::StiefelPoint;
use crate::transport::{projected_cost, MultiplierState, PrwInstance};

/// Which formulation of the dual block update to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SinkhornMode {
    /// Diagonal matrix scaling on the materialized Gibbs kernel.
    Exp,
    /// Log-domain updates through max-shifted log-sum-exp.
    Log,
}

impl std::fmt::Display for SinkhornMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SinkhornMode::Exp => write!(f, "exp"),
            SinkhornMode::Log => write!(f, "log"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SinkhornOptions {
    pub mode: SinkhornMode,
    /// Stop once the ℓ₁ row residual drops to this value.
    pub theta: f64,
    /// Iteration cap; the best (last) iterate is returned flagged when hit.
    pub max_iters: usize,
}

impl SinkhornOptions {
    pub fn new(mode: SinkhornMode, theta: f64) -> Self {
        Self {
            mode,
            theta,
            max_iters: 1_000_000,
        }
    }
}

/// Result of an inner solve. The plan equals the kernel ζ at the returned
/// duals (mass 1 up to round-off, column marginal exact).
#[derive(Debug, Clone)]
pub struct SinkhornOutcome {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub plan: DMatrix<f64>,
    /// ‖π1 − r‖₁ of the returned plan.
    pub row_gap: f64,
    /// ‖πᵀ1 − c‖₁ of the returned plan (round-off sized by construction).
    pub col_gap: f64,
    /// Full iterations spent in exp mode (including any discarded by a
    /// fallback).
    pub iters_exp: usize,
    /// Full iterations spent in log mode.
    pub iters_log: usize,
    /// False when the iteration cap was hit before reaching `theta`.
    pub converged: bool,
    /// True when exp mode overflowed and the solve restarted in log mode.
    pub fell_back: bool,
    /// log‖ζ‖₁ at the returned duals.
    pub log_mass: f64,
    /// Objective value rᵀα + cᵀβ + η·log‖ζ‖₁ at the returned duals.
    pub lagrangian: f64,
}

/// Per-iteration measurements used by diagnostics and invariant tests.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SinkhornStep {
    /// ‖π1 − r‖₁ after the full iteration.
    pub row_gap: f64,
    /// Kernel mass ‖ζ‖₁ after the full iteration.
    pub mass: f64,
    /// Objective value after the full iteration.
    pub lagrangian: f64,
}

/// Runs the inner solve from warm-start duals at the given projection.
pub fn sinkhorn(
    inst: &PrwInstance,
    kappa: &MultiplierState,
    eta: f64,
    alpha0: &DVector<f64>,
    beta0: &DVector<f64>,
    u: &StiefelPoint,
    opts: SinkhornOptions,
) -> Result<SinkhornOutcome> {
    solve(inst, kappa, eta, alpha0, beta0, u, opts, None)
}

/// Same as [`sinkhorn`] but records per-iteration residual, mass, and
/// objective value, plus the state of the warm start before any update.
pub fn sinkhorn_traced(
    inst: &PrwInstance,
    kappa: &MultiplierState,
    eta: f64,
    alpha0: &DVector<f64>,
    beta0: &DVector<f64>,
    u: &StiefelPoint,
    opts: SinkhornOptions,
) -> Result<(SinkhornOutcome, Vec<SinkhornStep>)> {
    let mut trace = Vec::new();
    let outcome = solve(inst, kappa, eta, alpha0, beta0, u, opts, Some(&mut trace))?;
    Ok((outcome, trace))
}

#[allow(clippy::too_many_arguments)]
fn solve(
    inst: &PrwInstance,
    kappa: &MultiplierState,
    eta: f64,
    alpha0: &DVector<f64>,
    beta0: &DVector<f64>,
    u: &StiefelPoint,
    opts: SinkhornOptions,
    mut trace: Option<&mut Vec<SinkhornStep>>,
) -> Result<SinkhornOutcome> {
    if eta <= 0.0 || !eta.is_finite() {
        return Err(PrwError::InvalidArgument(format!(
            "penalty must be positive, got {eta}"
        )));
    }
    if alpha0.len() != inst.n() || beta0.len() != inst.m() {
        return Err(PrwError::ShapeMismatch(format!(
            "warm-start duals {}/{} for instance {}x{}",
            alpha0.len(),
            beta0.len(),
            inst.n(),
            inst.m()
        )));
    }
    if kappa.shape() != (inst.n(), inst.m()) {
        return Err(PrwError::ShapeMismatch(
            "multiplier shape differs from instance".into(),
        ));
    }
    let cu = projected_cost(inst, u)?;
    match opts.mode {
        SinkhornMode::Log => run_log(inst, kappa, eta, alpha0, beta0, &cu, opts, trace.as_deref_mut(), 0, false),
        SinkhornMode::Exp => {
            match run_exp(inst, kappa, eta, alpha0, beta0, &cu, opts, trace.as_deref_mut())? {
                ExpResult::Done(outcome) => Ok(outcome),
                ExpResult::Overflowed { iters_spent } => {
                    if let Some(t) = trace.as_deref_mut() {
                        t.clear();
                    }
                    run_log(
                        inst,
                        kappa,
                        eta,
                        alpha0,
                        beta0,
                        &cu,
                        opts,
                        trace,
                        iters_spent,
                        true,
                    )
                }
            }
        }
    }
}

enum ExpResult {
    Done(SinkhornOutcome),
    Overflowed { iters_spent: usize },
}

#[allow(clippy::too_many_arguments)]
fn run_exp(
    inst: &PrwInstance,
    kappa: &MultiplierState,
    eta: f64,
    alpha0: &DVector<f64>,
    beta0: &DVector<f64>,
    cu: &DMatrix<f64>,
    opts: SinkhornOptions,
    mut trace: Option<&mut Vec<SinkhornStep>>,
) -> Result<ExpResult> {
    let n = inst.n();
    let m = inst.m();
    let r = inst.source_weights();
    let c = inst.target_weights();

    // A_ij = κ_ij·exp(−[C(U)]_ij/η); entries lie in (0, max κ] since C(U) ≥ 0.
    let mut a = DMatrix::<f64>::zeros(n, m);
    for (dst, (&k, &cv)) in a.iter_mut().zip(kappa.kappa().iter().zip(cu.iter())) {
        *dst = k * (-cv / eta).exp();
    }

    let mut us = alpha0.map(|v| (-v / eta).exp());
    let mut vs = beta0.map(|v| (-v / eta).exp());
    if !(us.iter().all(|v| v.is_finite()) && vs.iter().all(|v| v.is_finite())) {
        return Ok(ExpResult::Overflowed { iters_spent: 0 });
    }
    if let Some(t) = trace.as_deref_mut() {
        t.push(entry_step(inst, eta, &a, &us, &vs));
    }

    let mut av = DVector::<f64>::zeros(n);
    let mut atu = DVector::<f64>::zeros(m);
    av.gemv(1.0, &a, &vs, 0.0);

    let mut iters = 0;
    let mut converged = false;
    while iters < opts.max_iters {
        for i in 0..n {
            us[i] = r[i] / av[i];
        }
        if !us.iter().all(|v| v.is_finite()) {
            return Ok(ExpResult::Overflowed { iters_spent: iters });
        }
        atu.gemv_tr(1.0, &a, &us, 0.0);
        for j in 0..m {
            vs[j] = c[j] / atu[j];
        }
        if !vs.iter().all(|v| v.is_finite()) {
            return Ok(ExpResult::Overflowed { iters_spent: iters });
        }
        av.gemv(1.0, &a, &vs, 0.0);
        iters += 1;

        let mut gap = 0.0;
        let mut mass = 0.0;
        for i in 0..n {
            let row = us[i] * av[i];
            gap += (row - r[i]).abs();
            mass += row;
        }
        if let Some(t) = trace.as_deref_mut() {
            let lag = dual_value_from_scalings(inst, eta, &us, &vs) + eta * mass.ln();
            t.push(SinkhornStep {
                row_gap: gap,
                mass,
                lagrangian: lag,
            });
        }
        if gap <= opts.theta {
            converged = true;
            break;
        }
    }

    let alpha = us.map(|v| -eta * v.ln());
    let beta = vs.map(|v| -eta * v.ln());
    if !(alpha.iter().all(|v| v.is_finite()) && beta.iter().all(|v| v.is_finite())) {
        return Ok(ExpResult::Overflowed { iters_spent: iters });
    }
    let mut plan = a;
    let mut mass = 0.0;
    let mut rows = vec![0.0_f64; n];
    let mut col_gap = 0.0;
    for j in 0..m {
        let vj = vs[j];
        let mut col_sum = 0.0;
        for i in 0..n {
            let p = (plan[(i, j)] * us[i] * vj).max(f64::MIN_POSITIVE);
            plan[(i, j)] = p;
            rows[i] += p;
            col_sum += p;
            mass += p;
        }
        col_gap += (col_sum - c[j]).abs();
    }
    let row_gap = rows
        .iter()
        .zip(r.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>();
    let log_mass = mass.ln();
    let lagrangian = inst.source_weights().dot(&alpha) + inst.target_weights().dot(&beta)
        + eta * log_mass;
    Ok(ExpResult::Done(SinkhornOutcome {
        alpha,
        beta,
        plan,
        row_gap,
        col_gap,
        iters_exp: iters,
        iters_log: 0,
        converged,
        fell_back: false,
        log_mass,
        lagrangian,
    }))
}

fn dual_value_from_scalings(
    inst: &PrwInstance,
    eta: f64,
    us: &DVector<f64>,
    vs: &DVector<f64>,
) -> f64 {
    let ra: f64 = inst
        .source_weights()
        .iter()
        .zip(us.iter())
        .map(|(&w, &u)| w * (-eta * u.ln()))
        .sum();
    let cb: f64 = inst
        .target_weights()
        .iter()
        .zip(vs.iter())
        .map(|(&w, &v)| w * (-eta * v.ln()))
        .sum();
    ra + cb
}

/// Residual/mass/objective of the warm start before any update, for traces.
fn entry_step(
    inst: &PrwInstance,
    eta: f64,
    a: &DMatrix<f64>,
    us: &DVector<f64>,
    vs: &DVector<f64>,
) -> SinkhornStep {
    let n = inst.n();
    let m = inst.m();
    let mut rows = vec![0.0; n];
    let mut mass = 0.0;
    for j in 0..m {
        let vj = vs[j];
        for i in 0..n {
            let z = a[(i, j)] * us[i] * vj;
            rows[i] += z;
            mass += z;
        }
    }
    let gap: f64 = rows
        .iter()
        .zip(inst.source_weights().iter())
        .map(|(row, &w)| (row / mass - w).abs())
        .sum();
    SinkhornStep {
        row_gap: gap,
        mass,
        lagrangian: dual_value_from_scalings(inst, eta, us, vs) + eta * mass.ln(),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_log(
    inst: &PrwInstance,
    kappa: &MultiplierState,
    eta: f64,
    alpha0: &DVector<f64>,
    beta0: &DVector<f64>,
    cu: &DMatrix<f64>,
    opts: SinkhornOptions,
    mut trace: Option<&mut Vec<SinkhornStep>>,
    iters_exp_spent: usize,
    fell_back: bool,
) -> Result<SinkhornOutcome> {
    let n = inst.n();
    let m = inst.m();
    let r = inst.source_weights();
    let c = inst.target_weights();

    // B_ij = log κ_ij − [C(U)]_ij/η, the α- and β-independent kernel part.
    let mut b = DMatrix::<f64>::zeros(n, m);
    for (dst, (&lk, &cv)) in b
        .iter_mut()
        .zip(kappa.log_kappa().iter().zip(cu.iter()))
    {
        *dst = lk - cv / eta;
    }

    let log_r: Vec<f64> = r.iter().map(|&v| v.ln()).collect();
    let log_c: Vec<f64> = c.iter().map(|&v| v.ln()).collect();
    let mut alpha = alpha0.clone();
    let mut beta = beta0.clone();

    if let Some(t) = trace.as_deref_mut() {
        t.push(entry_step_log(inst, eta, &b, &alpha, &beta));
    }

    let mut row_lse = vec![0.0; n];
    row_logsumexp(&b, &beta, eta, &mut row_lse);

    let mut col_lse = vec![0.0; m];
    let mut iters = 0;
    let mut converged = false;
    while iters < opts.max_iters {
        for i in 0..n {
            alpha[i] = eta * (row_lse[i] - log_r[i]);
        }
        col_logsumexp(&b, &alpha, eta, &mut col_lse);
        for j in 0..m {
            beta[j] = eta * (col_lse[j] - log_c[j]);
        }
        row_logsumexp(&b, &beta, eta, &mut row_lse);
        iters += 1;

        let mut gap = 0.0;
        let mut mass = 0.0;
        for i in 0..n {
            let row = (row_lse[i] - alpha[i] / eta).exp();
            gap += (row - r[i]).abs();
            mass += row;
        }
        if let Some(t) = trace.as_deref_mut() {
            let lag = r.dot(&alpha) + c.dot(&beta) + eta * mass.ln();
            t.push(SinkhornStep {
                row_gap: gap,
                mass,
                lagrangian: lag,
            });
        }
        if gap <= opts.theta {
            converged = true;
            break;
        }
    }

    let mut plan = b;
    let mut mass = 0.0;
    let mut rows = vec![0.0_f64; n];
    let mut col_gap = 0.0;
    for j in 0..m {
        let bj = beta[j] / eta;
        let mut col_sum = 0.0;
        for i in 0..n {
            let p = (plan[(i, j)] - alpha[i] / eta - bj)
                .exp()
                .max(f64::MIN_POSITIVE);
            plan[(i, j)] = p;
            rows[i] += p;
            col_sum += p;
            mass += p;
        }
        col_gap += (col_sum - c[j]).abs();
    }
    let row_gap = rows
        .iter()
        .zip(r.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>();
    let log_mass = mass.ln();
    let lagrangian = r.dot(&alpha) + c.dot(&beta) + eta * log_mass;
    Ok(SinkhornOutcome {
        alpha,
        beta,
        plan,
        row_gap,
        col_gap,
        iters_exp: iters_exp_spent,
        iters_log: iters,
        converged,
        fell_back,
        log_mass,
        lagrangian,
    })
}

/// Row-wise log-sum-exp of `B_ij − β_j/η`, traversed in column order so the
/// matrix is streamed sequentially.
fn row_logsumexp(b: &DMatrix<f64>, beta: &DVector<f64>, eta: f64, out: &mut [f64]) {
    let (n, m) = b.shape();
    let mut maxs = vec![f64::NEG_INFINITY; n];
    for j in 0..m {
        let s = beta[j] / eta;
        let col = b.column(j);
        for i in 0..n {
            let v = col[i] - s;
            if v > maxs[i] {
                maxs[i] = v;
            }
        }
    }
    let mut sums = vec![0.0_f64; n];
    for j in 0..m {
        let s = beta[j] / eta;
        let col = b.column(j);
        for i in 0..n {
            sums[i] += (col[i] - s - maxs[i]).exp();
        }
    }
    for i in 0..n {
        out[i] = maxs[i] + sums[i].ln();
    }
}

/// Column-wise log-sum-exp of `B_ij − α_i/η`.
fn col_logsumexp(b: &DMatrix<f64>, alpha: &DVector<f64>, eta: f64, out: &mut [f64]) {
    let (n, m) = b.shape();
    for j in 0..m {
        let col = b.column(j);
        let mut max = f64::NEG_INFINITY;
        for i in 0..n {
            let v = col[i] - alpha[i] / eta;
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for i in 0..n {
            sum += (col[i] - alpha[i] / eta - max).exp();
        }
        out[j] = max + sum.ln();
    }
}

fn entry_step_log(
    inst: &PrwInstance,
    eta: f64,
    b: &DMatrix<f64>,
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
) -> SinkhornStep {
    let (n, m) = b.shape();
    let mut max = f64::NEG_INFINITY;
    for j in 0..m {
        for i in 0..n {
            max = max.max(b[(i, j)] - (alpha[i] + beta[j]) / eta);
        }
    }
    let mut rows = vec![0.0_f64; n];
    let mut mass = 0.0;
    for j in 0..m {
        for i in 0..n {
            let z = (b[(i, j)] - (alpha[i] + beta[j]) / eta - max).exp();
            rows[i] += z;
            mass += z;
        }
    }
    let gap: f64 = rows
        .iter()
        .zip(inst.source_weights().iter())
        .map(|(row, &w)| (row / mass - w).abs())
        .sum();
    let log_mass = max + mass.ln();
    SinkhornStep {
        row_gap: gap,
        mass: log_mass.exp(),
        lagrangian: inst.source_weights().dot(alpha)
            + inst.target_weights().dot(beta)
            + eta * log_mass,
    }
}
