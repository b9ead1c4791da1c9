//! Outer Riemannian exponential augmented Lagrangian loop.
//!
//! Each outer iteration k solves the subproblem `min L_{η_k}(x, κ_k)` to a
//! working tolerance with [`irbbs_solve`], normalizes the result, and then
//! measures the complementarity violation `W_ij = min{η·π̃_ij, φ_ij(x)}` of
//! the candidate multiplier `π̃ = ζ_{η_k}(x_k, κ_k)`. Sufficient progress in
//! `‖W‖_F` refreshes the multiplier and keeps the penalty; otherwise the
//! multiplier is kept and the penalty shrinks geometrically down to a floor
//! `η_min`. Working tolerances tighten between iterations and snap to the
//! final ones once the penalty floor is reached; from that point meeting the
//! final tolerances terminates the loop (the complementarity test
//! `‖W‖_F ≤ ε_c` can stop it earlier at any penalty level). The accepted
//! iterate is rounded to a feasible plan, certified, and scored by
//! `⟨π̂, C(U)⟩`.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{PrwError, Result};
use crate::geometry::{top_k_eigvecs, StiefelPoint};
use crate::irbbs::{irbbs_solve, IrbbsConfig, IrbbsReport, WarmStart};
use crate::transport::{
    lagrangian_value, log_kernel, marginal_residuals, plan_from_duals, projected_cost,
    riemannian_grad, round_plan, scatter_matrix, shift_normalize, softmax_from_log,
    stationarity_certificate, var_seminorm_matrix, DualIterate, MultiplierState, PrwInstance,
    SinkhornMode, StationarityCertificate,
};

/// Outer-loop tunables. The working tolerances `(eps11, eps12)` apply to the
/// first subproblem and shrink by `gamma_eps` per iteration; once the
/// penalty reaches `eta_min` the final `(eps1, eps2)` take over.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RealmConfig {
    /// Initial penalty η₁.
    pub eta_1: f64,
    /// Penalty floor η_min.
    pub eta_min: f64,
    /// Complementarity progress factor; 0 disables multiplier updates.
    pub gamma_w: f64,
    /// Penalty shrink factor.
    pub gamma_eta: f64,
    /// Working-tolerance shrink factor.
    pub gamma_eps: f64,
    /// Complementarity stopping tolerance on ‖W‖_F.
    pub eps_c: f64,
    /// Final gradient tolerance ε₁.
    pub eps1: f64,
    /// Final marginal tolerance ε₂.
    pub eps2: f64,
    /// First-subproblem gradient tolerance.
    pub eps11: f64,
    /// First-subproblem marginal tolerance.
    pub eps12: f64,
    pub max_multiplier_updates: usize,
    pub max_outer: usize,
    /// Switch to log-mode inner solves when `max{‖r‖_∞, ‖c‖_∞}/η` reaches
    /// this ratio.
    pub switch_mass_ratio: f64,
    /// Switch to log-mode inner solves when `‖C(U) − η·log κ‖_var/η`
    /// reaches this ratio.
    pub switch_var_ratio: f64,
    /// Iteration cap for every subproblem solve.
    pub subproblem_max_outer: usize,
}

impl RealmConfig {
    /// Defaults scaled to the instance:
    /// `ε₂ = 10⁻⁶·max{‖r‖_∞, ‖c‖_∞}`, `ε₁ = 2‖C‖_∞·ε₂`, first-subproblem
    /// tolerances 10⁵ times looser, `η₁ = 1`, `η_min = 0.055`,
    /// `γ_W = 0.9`, `γ_η = 0.5`, `γ_ε = 0.25`, `ε_c = 10⁻⁵`.
    pub fn for_instance(inst: &PrwInstance) -> Self {
        let scale = inst.max_weight();
        let eps2 = 1e-6 * scale;
        let eps12 = 1e-1 * scale;
        let two_c = 2.0 * inst.cost_sup();
        Self {
            eta_1: 1.0,
            eta_min: 0.055,
            gamma_w: 0.9,
            gamma_eta: 0.5,
            gamma_eps: 0.25,
            eps_c: 1e-5,
            eps1: two_c * eps2,
            eps2,
            eps11: two_c * eps12,
            eps12,
            max_multiplier_updates: 8,
            max_outer: 50,
            switch_mass_ratio: 500.0,
            switch_var_ratio: 900.0,
            subproblem_max_outer: 5000,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma_w >= 0.0 && self.gamma_w < 1.0) {
            return Err(PrwError::InvalidArgument("need 0 <= gamma_w < 1".into()));
        }
        if !(self.gamma_eta > 0.0 && self.gamma_eta < 1.0) {
            return Err(PrwError::InvalidArgument("need 0 < gamma_eta < 1".into()));
        }
        if !(self.gamma_eps > 0.0 && self.gamma_eps < 1.0) {
            return Err(PrwError::InvalidArgument("need 0 < gamma_eps < 1".into()));
        }
        if !(self.eta_min > 0.0 && self.eta_min <= self.eta_1) {
            return Err(PrwError::InvalidArgument(
                "need 0 < eta_min <= eta_1".into(),
            ));
        }
        Ok(())
    }
}

/// One outer iteration of the trace.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RealmOuterRecord {
    pub k: usize,
    pub eta: f64,
    /// ‖W_k‖_F after the subproblem solve.
    pub w_norm: f64,
    /// True when this iteration refreshed the multiplier.
    pub multiplier_updated: bool,
    /// True when the accepted iterate fell back to the previous one because
    /// the subproblem did not decrease the objective.
    pub monotonic_fallback: bool,
    pub eps_k1: f64,
    pub eps_k2: f64,
    pub e1: f64,
    pub e2: f64,
    pub l_value: f64,
    pub mode: SinkhornMode,
    pub theta_scale: f64,
    pub sub_outer_iters: usize,
    pub sub_n_grad: usize,
    pub sub_n_sk_exp: usize,
    pub sub_n_sk_log: usize,
    pub sub_converged: bool,
}

/// Final answer: the accepted iterate, its feasible rounded plan, the value
/// `⟨π̂, C(U)⟩`, the stationarity certificate, and work counters.
#[derive(Debug, Clone)]
pub struct RealmReport {
    pub iterate: DualIterate,
    pub rounded_plan: DMatrix<f64>,
    pub prw_value: f64,
    pub certificate: StationarityCertificate,
    pub e1: f64,
    pub e2: f64,
    pub w_norm: f64,
    pub final_eta: f64,
    pub converged: bool,
    pub outer_iters: usize,
    pub multiplier_updates: usize,
    pub n_grad: usize,
    pub n_sk_exp: usize,
    pub n_sk_log: usize,
    pub trace: Vec<RealmOuterRecord>,
}

/// Seeded initial data: a feasible random plan, the projection spanning the
/// leading eigenvectors of its displacement scatter matrix, and zero duals
/// shifted so `rᵀα = cᵀβ` and `‖ζ‖₁ = 1` under the all-ones multiplier.
pub fn initial_point(
    inst: &PrwInstance,
    eta: f64,
    seed: u64,
) -> Result<(DMatrix<f64>, DualIterate)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = DMatrix::<f64>::zeros(inst.n(), inst.m());
    // Column-major fill so the stream of draws is layout-independent.
    for j in 0..inst.m() {
        for i in 0..inst.n() {
            raw[(i, j)] = rng.random_range(0.0..1.0);
        }
    }
    let mass: f64 = raw.iter().sum();
    raw /= mass;
    let plan0 = round_plan(&raw, inst.source_weights(), inst.target_weights())?;
    let v = scatter_matrix(inst, &plan0)?;
    let u0 = top_k_eigvecs(&v, inst.rank())?;
    let kappa = MultiplierState::ones(inst.n(), inst.m());
    let x0 = DualIterate::from_duals(
        inst,
        &kappa,
        eta,
        DVector::zeros(inst.n()),
        DVector::zeros(inst.m()),
        u0,
    )?;
    let x0 = shift_normalize(inst, &kappa, eta, &x0)?;
    Ok((plan0, x0))
}

/// Complementarity violation `W_ij = min{η·π̃_ij, φ_ij(x)}` and its
/// Frobenius norm.
pub fn complementarity(
    inst: &PrwInstance,
    eta: f64,
    iterate: &DualIterate,
    pi_tilde: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, f64)> {
    if pi_tilde.shape() != (inst.n(), inst.m()) {
        return Err(PrwError::ShapeMismatch(
            "multiplier candidate shape differs from instance".into(),
        ));
    }
    let phi = phi_matrix(inst, iterate)?;
    let mut w = phi;
    for (dst, &p) in w.iter_mut().zip(pi_tilde.iter()) {
        let scaled = eta * p;
        if scaled < *dst {
            *dst = scaled;
        }
    }
    let norm = w.norm();
    Ok((w, norm))
}

/// Bootstrap complementarity before any multiplier exists:
/// `W⁰_ij = min{η, φ_ij(x⁰)}`.
pub fn complementarity_bootstrap(
    inst: &PrwInstance,
    eta: f64,
    iterate: &DualIterate,
) -> Result<(DMatrix<f64>, f64)> {
    let phi = phi_matrix(inst, iterate)?;
    let w = phi.map(|v| v.min(eta));
    let norm = w.norm();
    Ok((w, norm))
}

fn phi_matrix(inst: &PrwInstance, iterate: &DualIterate) -> Result<DMatrix<f64>> {
    let mut phi = projected_cost(inst, iterate.projection())?;
    let alpha = iterate.alpha();
    let beta = iterate.beta();
    for j in 0..inst.m() {
        let bj = beta[j];
        for i in 0..inst.n() {
            phi[(i, j)] += alpha[i] + bj;
        }
    }
    Ok(phi)
}

/// Candidate multiplier `π̃ = ζ_η(x, κ)`, evaluated in the log domain. For a
/// kernel-normalized iterate its mass is 1 up to round-off.
pub fn multiplier_update(
    inst: &PrwInstance,
    kappa: &MultiplierState,
    eta: f64,
    iterate: &DualIterate,
) -> Result<DMatrix<f64>> {
    let (logz, _) = log_kernel(
        inst,
        kappa,
        eta,
        iterate.alpha(),
        iterate.beta(),
        iterate.projection(),
    )?;
    Ok(softmax_from_log(&logz, 0.0))
}

/// Inner-solve mode and θ-scale chosen from the penalty and the spread of
/// the shifted cost at the warm-start projection: log mode once exp-domain
/// scaling factors would span too many orders of magnitude.
pub fn select_sinkhorn_mode(
    inst: &PrwInstance,
    kappa: &MultiplierState,
    eta: f64,
    u: &StiefelPoint,
    cfg: &RealmConfig,
) -> Result<(SinkhornMode, f64)> {
    let mass_ratio = inst.max_weight() / eta;
    let cu = projected_cost(inst, u)?;
    let shifted = cu - kappa.log_kappa() * eta;
    let var_ratio = var_seminorm_matrix(&shifted) / eta;
    if mass_ratio >= cfg.switch_mass_ratio || var_ratio >= cfg.switch_var_ratio {
        Ok((SinkhornMode::Log, 10.0))
    } else {
        Ok((SinkhornMode::Exp, 0.1))
    }
}

enum PendingUpdate {
    RefreshMultiplier(DMatrix<f64>),
    ShrinkPenalty,
}

/// Runs the full outer loop from a seeded initial point.
pub fn realm_solve(inst: &PrwInstance, cfg: &RealmConfig, seed: u64) -> Result<RealmReport> {
    cfg.validate()?;
    let (_, x0) = initial_point(inst, cfg.eta_1, seed)?;

    let mut kappa = MultiplierState::ones(inst.n(), inst.m());
    let mut eta = cfg.eta_1;
    let (mut eps_k1, mut eps_k2) = if eta <= cfg.eta_min {
        (cfg.eps1, cfg.eps2)
    } else {
        (cfg.eps11, cfg.eps12)
    };
    let (_, mut w_norm_prev) = complementarity_bootstrap(inst, cfg.eta_1, &x0)?;

    let mut x_prev = x0;
    let mut updates = 0usize;
    let mut n_grad = 0usize;
    let mut n_sk_exp = 0usize;
    let mut n_sk_log = 0usize;
    let mut trace: Vec<RealmOuterRecord> = Vec::new();
    let mut converged = false;
    let mut accepted: Option<(DualIterate, f64, f64, f64)> = None; // (x, e1, e2, ‖W‖)
    // Multiplier/penalty moves decided at iteration k take effect at k+1, so
    // (κ, η) still describe the accepted iterate when the loop exits.
    let mut pending: Option<PendingUpdate> = None;

    for k in 1..=cfg.max_outer {
        if let Some(update) = pending.take() {
            match update {
                PendingUpdate::RefreshMultiplier(pi) => {
                    kappa = MultiplierState::new(pi)?;
                    updates += 1;
                }
                PendingUpdate::ShrinkPenalty => {
                    eta = (cfg.gamma_eta * eta).max(cfg.eta_min);
                }
            }
            if eta <= cfg.eta_min {
                eps_k1 = cfg.eps1;
                eps_k2 = cfg.eps2;
            } else {
                eps_k1 = (cfg.gamma_eps * eps_k1).max(cfg.eps1);
                eps_k2 = (cfg.gamma_eps * eps_k2).max(cfg.eps2);
            }
        }

        let (mode, theta_scale) =
            select_sinkhorn_mode(inst, &kappa, eta, x_prev.projection(), cfg)?;
        let mut sub_cfg = IrbbsConfig::new(eps_k1, eps_k2).with_mode(mode);
        sub_cfg.theta_scale = theta_scale;
        sub_cfg.max_outer = cfg.subproblem_max_outer;

        let warm = WarmStart::from_iterate(&x_prev);
        let sub: IrbbsReport = irbbs_solve(inst, &kappa, eta, &warm, &sub_cfg)?;
        n_grad += sub.n_grad;
        n_sk_exp += sub.n_sk_exp;
        n_sk_log += sub.n_sk_log;

        let mut x_k = shift_normalize(inst, &kappa, eta, &sub.iterate)?;
        // Objective must not rise across the warm start under the current
        // (η, κ); fall back to the previous iterate otherwise.
        let l_new = lagrangian_value(inst, &kappa, eta, x_k.alpha(), x_k.beta(), x_k.projection())?;
        let l_prev =
            lagrangian_value(inst, &kappa, eta, x_prev.alpha(), x_prev.beta(), x_prev.projection())?;
        let mut monotonic_fallback = false;
        let mut l_value = l_new;
        if l_new > l_prev {
            let renorm = DualIterate::from_duals(
                inst,
                &kappa,
                eta,
                x_prev.alpha().clone(),
                x_prev.beta().clone(),
                x_prev.projection().clone(),
            )?;
            x_k = shift_normalize(inst, &kappa, eta, &renorm)?;
            l_value = l_prev;
            monotonic_fallback = true;
        }

        let pi_tilde = multiplier_update(inst, &kappa, eta, &x_k)?;
        let (_, w_norm) = complementarity(inst, eta, &x_k, &pi_tilde)?;

        let plan = plan_from_duals(inst, &kappa, eta, x_k.alpha(), x_k.beta(), x_k.projection())?;
        let (_, e1) = riemannian_grad(inst, &plan, x_k.projection())?;
        let (row_gap, col_gap, e2) =
            marginal_residuals(&plan, inst.source_weights(), inst.target_weights());
        let x_k = DualIterate::from_parts(
            x_k.alpha().clone(),
            x_k.beta().clone(),
            x_k.projection().clone(),
            plan,
            row_gap,
            col_gap,
        );

        // Two stop routes: the complementarity test can fire at any penalty
        // level; once the penalty floor runs at the final tolerances, meeting
        // them terminates the loop regardless of ‖W‖.
        let meets_final = e1 <= cfg.eps1 && e2 <= cfg.eps2;
        let at_floor = eta <= cfg.eta_min && eps_k1 <= cfg.eps1 && eps_k2 <= cfg.eps2;
        let stop = meets_final && (w_norm <= cfg.eps_c || at_floor);
        let update_multiplier =
            !stop && w_norm <= cfg.gamma_w * w_norm_prev && updates < cfg.max_multiplier_updates;

        trace.push(RealmOuterRecord {
            k,
            eta,
            w_norm,
            multiplier_updated: update_multiplier,
            monotonic_fallback,
            eps_k1,
            eps_k2,
            e1,
            e2,
            l_value,
            mode,
            theta_scale,
            sub_outer_iters: sub.outer_iters,
            sub_n_grad: sub.n_grad,
            sub_n_sk_exp: sub.n_sk_exp,
            sub_n_sk_log: sub.n_sk_log,
            sub_converged: sub.converged,
        });

        accepted = Some((x_k.clone(), e1, e2, w_norm));
        if stop {
            converged = true;
            break;
        }

        pending = Some(if update_multiplier {
            PendingUpdate::RefreshMultiplier(pi_tilde)
        } else {
            PendingUpdate::ShrinkPenalty
        });
        w_norm_prev = w_norm;
        x_prev = x_k;
    }

    let (iterate, e1, e2, w_norm) =
        accepted.ok_or_else(|| PrwError::Numerical("no outer iteration completed".into()))?;
    let rounded = round_plan(iterate.plan(), inst.source_weights(), inst.target_weights())?;
    let certificate = stationarity_certificate(inst, &kappa, eta, &iterate, &rounded)?;
    Ok(RealmReport {
        prw_value: certificate.primal_value,
        iterate,
        rounded_plan: rounded,
        certificate,
        e1,
        e2,
        w_norm,
        final_eta: eta,
        converged,
        outer_iters: trace.len(),
        multiplier_updates: updates,
        n_grad,
        n_sk_exp,
        n_sk_log,
        trace,
    })
}
