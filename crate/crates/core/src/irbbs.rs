//! Inexact Riemannian Barzilai-Borwein solver with Sinkhorn inner steps.
//!
//! The subproblem minimizes `L_η(x, κ)` over `x = (α, β, U)` with `U` on the
//! Stiefel manifold. One outer iteration computes the Riemannian gradient
//! ξ in `U` at the current plan, retracts along `−τ·ξ`, and re-solves the
//! dual block by warm-started Sinkhorn iterations to a scheduled tolerance θ.
//! The trial stepsize is a safeguarded Barzilai-Borwein value with a
//! ψ-adaptive hybrid between the long (BB1) and short (BB2) variants, and a
//! trial is accepted by the Zhang-Hager nonmonotone test on the potential
//! `E_ρ(x) = L(x) + ρ·e₂(x)²`:
//!
//! ```text
//! E_ρ(x⁺) ≤ Eʳ − δ₁·τ·‖ξ‖²_F − (η/2 − ρ)·e₂(x⁺)²
//! ```
//!
//! where `Eʳ` is the exponentially weighted reference value. The solver
//! stops once `‖ξ‖_F ≤ ε₁` and the row residual of the implied plan is at
//! most ε₂; the column residual is exact after every Sinkhorn exit.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{PrwError, Result};
use crate::geometry::StiefelPoint;
use crate::transport::{
    riemannian_grad, sinkhorn, DualIterate, MultiplierState, PrwInstance, SinkhornMode,
    SinkhornOptions,
};

/// Tunables of the subproblem solver. `rho_frac` fixes `ρ = rho_frac·η` in
/// the potential, so the acceptance margin on the feasibility term is
/// `(1/2 − rho_frac)·η`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct IrbbsConfig {
    pub tau_min: f64,
    pub tau_max: f64,
    /// Trial stepsize of the very first iteration.
    pub tau_0: f64,
    /// Backtracking shrink factor.
    pub sigma: f64,
    /// Sufficient-decrease coefficient on the gradient term.
    pub delta1: f64,
    /// ρ/η in the potential; must stay below 1/2.
    pub rho_frac: f64,
    /// Zhang-Hager averaging weight γ; 0 recovers a monotone Armijo test.
    pub gamma_zh: f64,
    /// Initial threshold of the BB1/BB2 hybrid switch.
    pub psi_0: f64,
    /// Multiplicative drift applied to ψ after each switch decision.
    pub psi_factor: f64,
    /// Scale of the inner-tolerance schedule
    /// `θ_{t+1} = max{theta_scale/(2‖C‖_∞)·‖ξ_t‖, ε₂}`; +∞ caps θ at 2 so
    /// every inner solve stops after one iteration.
    pub theta_scale: f64,
    /// Gradient-norm tolerance ε₁.
    pub eps1: f64,
    /// Row-residual tolerance ε₂.
    pub eps2: f64,
    pub max_outer: usize,
    /// Cap on backtracking trials per iteration; the last trial is accepted
    /// (and flagged) when reached.
    pub max_backtracks: usize,
    /// When set, every iteration proposes this stepsize instead of the BB
    /// value (baseline mode).
    pub fixed_step: Option<f64>,
    pub mode: SinkhornMode,
    pub sinkhorn_max_iters: usize,
}

impl IrbbsConfig {
    /// Defaults with explicit stopping tolerances; exp-mode inner solves
    /// with θ-scale 0.1.
    pub fn new(eps1: f64, eps2: f64) -> Self {
        Self {
            tau_min: 1e-10,
            tau_max: 1e10,
            tau_0: 1e-3,
            sigma: 0.5,
            delta1: 1e-4,
            rho_frac: 0.49,
            gamma_zh: 0.85,
            psi_0: 0.05,
            psi_factor: 1.02,
            theta_scale: 0.1,
            eps1,
            eps2,
            max_outer: 5000,
            max_backtracks: 60,
            fixed_step: None,
            mode: SinkhornMode::Exp,
            sinkhorn_max_iters: 1_000_000,
        }
    }

    /// Defaults with tolerances derived from the instance scale:
    /// `ε₂ = 10⁻⁶·max{‖r‖_∞, ‖c‖_∞}` and `ε₁ = 2‖C‖_∞·ε₂`.
    pub fn for_instance(inst: &PrwInstance) -> Self {
        let eps2 = 1e-6 * inst.max_weight();
        let eps1 = 2.0 * inst.cost_sup() * eps2;
        Self::new(eps1, eps2)
    }

    /// Switches the inner-solve formulation, resetting the θ-scale to the
    /// default of that mode (0.1 for exp, 10 for log).
    pub fn with_mode(mut self, mode: SinkhornMode) -> Self {
        self.mode = mode;
        self.theta_scale = match mode {
            SinkhornMode::Exp => 0.1,
            SinkhornMode::Log => 10.0,
        };
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.tau_min < self.tau_max && self.tau_min > 0.0) {
            return Err(PrwError::InvalidArgument(
                "need 0 < tau_min < tau_max".into(),
            ));
        }
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(PrwError::InvalidArgument("need 0 < sigma < 1".into()));
        }
        if !(self.delta1 > 0.0 && self.delta1 < 1.0) {
            return Err(PrwError::InvalidArgument("need 0 < delta1 < 1".into()));
        }
        if !(self.rho_frac >= 0.0 && self.rho_frac < 0.5) {
            return Err(PrwError::InvalidArgument("need 0 <= rho_frac < 0.5".into()));
        }
        if !(self.gamma_zh >= 0.0 && self.gamma_zh < 1.0) {
            return Err(PrwError::InvalidArgument("need 0 <= gamma_zh < 1".into()));
        }
        if self.psi_0 <= 0.0 || self.psi_factor <= 1.0 {
            return Err(PrwError::InvalidArgument(
                "need psi_0 > 0 and psi_factor > 1".into(),
            ));
        }
        if let Some(fs) = self.fixed_step {
            if !(fs > 0.0 && fs.is_finite()) {
                return Err(PrwError::InvalidArgument(
                    "fixed_step must be positive and finite".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Inner tolerance schedule: `θ₀ = 1` before any gradient exists, then
/// `θ_{t+1} = max{theta_scale/(2·c_inf)·‖ξ_t‖_F, eps2}`, capped at 2 (the
/// largest attainable row residual) so an infinite scale forces one inner
/// iteration per step.
pub fn theta_schedule(theta_scale: f64, e1_prev: Option<f64>, c_inf: f64, eps2: f64) -> f64 {
    match e1_prev {
        None => 1.0,
        Some(e1) => {
            if theta_scale.is_infinite() {
                return 2.0;
            }
            let raw = if c_inf > 0.0 {
                theta_scale / (2.0 * c_inf) * e1
            } else {
                0.0
            };
            raw.max(eps2).min(2.0)
        }
    }
}

/// Outcome of one Barzilai-Borwein proposal.
#[derive(Debug, Clone, Copy)]
pub struct BbProposal {
    /// Clamped trial stepsize.
    pub tau: f64,
    /// Updated hybrid threshold ψ.
    pub psi: f64,
    /// The BB2 value computed from the differences, if they were usable.
    pub bb2: Option<f64>,
}

/// Safeguarded BB stepsize from ambient iterate and gradient differences.
///
/// `τ_BB1 = ‖ΔU‖²/|⟨ΔU, Δξ⟩|` and `τ_BB2 = |⟨ΔU, Δξ⟩|/‖Δξ‖²`. When the
/// ratio BB2/BB1 drops below ψ the short variant `min{previous BB2, BB2}` is
/// taken and ψ shrinks by `psi_factor`, otherwise BB1 is taken and ψ grows.
/// Degenerate differences (`⟨ΔU, Δξ⟩ = 0` or `Δξ = 0`) fall back to the
/// previously accepted stepsize. The result is clamped to
/// `[tau_min, tau_max]`.
#[allow(clippy::too_many_arguments)]
pub fn bb_stepsize(
    delta_u: &DMatrix<f64>,
    delta_grad: &DMatrix<f64>,
    prev_bb2: Option<f64>,
    psi: f64,
    fallback: f64,
    tau_min: f64,
    tau_max: f64,
    psi_factor: f64,
) -> BbProposal {
    let sy = delta_u.dot(delta_grad);
    let yy = delta_grad.norm_squared();
    let ss = delta_u.norm_squared();
    if sy == 0.0 || yy == 0.0 || !sy.is_finite() || !yy.is_finite() {
        return BbProposal {
            tau: fallback.clamp(tau_min, tau_max),
            psi,
            bb2: prev_bb2,
        };
    }
    let bb1 = ss / sy.abs();
    let bb2 = sy.abs() / yy;
    let (tau, psi_next) = match prev_bb2 {
        // First proposal after the initial iteration uses the short variant.
        None => (bb2, psi),
        Some(p2) => {
            if bb2 / bb1 < psi {
                (p2.min(bb2), psi / psi_factor)
            } else {
                (bb1, psi * psi_factor)
            }
        }
    };
    BbProposal {
        tau: tau.clamp(tau_min, tau_max),
        psi: psi_next,
        bb2: Some(bb2),
    }
}

/// Barzilai-Borwein bookkeeping across outer iterations.
#[derive(Debug, Clone)]
pub struct BbState {
    prev_u: DMatrix<f64>,
    prev_grad: DMatrix<f64>,
    prev_bb2: Option<f64>,
    psi: f64,
    last_accepted: f64,
}

impl BbState {
    pub fn new(u: DMatrix<f64>, grad: DMatrix<f64>, accepted_tau: f64, psi_0: f64) -> Self {
        Self {
            prev_u: u,
            prev_grad: grad,
            prev_bb2: None,
            psi: psi_0,
            last_accepted: accepted_tau,
        }
    }

    /// Proposes the next trial stepsize from the stored previous pair and
    /// the current `(U, ξ)`.
    pub fn propose(&mut self, u: &DMatrix<f64>, grad: &DMatrix<f64>, cfg: &IrbbsConfig) -> f64 {
        let delta_u = u - &self.prev_u;
        let delta_grad = grad - &self.prev_grad;
        let prop = bb_stepsize(
            &delta_u,
            &delta_grad,
            self.prev_bb2,
            self.psi,
            self.last_accepted,
            cfg.tau_min,
            cfg.tau_max,
            cfg.psi_factor,
        );
        self.psi = prop.psi;
        self.prev_bb2 = prop.bb2;
        prop.tau
    }

    /// Records the pair the next difference will be taken against, plus the
    /// stepsize the line search actually accepted.
    pub fn commit(&mut self, u: DMatrix<f64>, grad: DMatrix<f64>, accepted_tau: f64) {
        self.prev_u = u;
        self.prev_grad = grad;
        self.last_accepted = accepted_tau;
    }
}

/// Zhang-Hager reference state: `Q_{t+1} = γQ_t + 1` and
/// `Eʳ_{t+1} = (γ·Q_t·Eʳ_t + E_ρ(x^{t+1}))/Q_{t+1}`, starting from
/// `Q_0 = 1`, `Eʳ_0 = E_ρ(x⁰)`.
#[derive(Debug, Clone, Copy)]
pub struct NonmonotoneState {
    pub e_ref: f64,
    pub q: f64,
}

impl NonmonotoneState {
    pub fn new(e_rho_0: f64) -> Self {
        Self { e_ref: e_rho_0, q: 1.0 }
    }

    pub fn update(&mut self, gamma: f64, e_rho_new: f64) {
        let q_next = gamma * self.q + 1.0;
        self.e_ref = (gamma * self.q * self.e_ref + e_rho_new) / q_next;
        self.q = q_next;
    }
}

/// Nonmonotone acceptance test for a trial with potential `e_rho_new`.
pub fn line_search_accept(
    e_rho_new: f64,
    state: &NonmonotoneState,
    tau: f64,
    grad_norm: f64,
    e2_new: f64,
    eta: f64,
    cfg: &IrbbsConfig,
) -> bool {
    let rho = cfg.rho_frac * eta;
    e_rho_new
        <= state.e_ref - cfg.delta1 * tau * grad_norm * grad_norm
            - (eta / 2.0 - rho) * e2_new * e2_new
}

/// Starting data: dual warm start `(α⁻¹, β⁻¹)` and the initial projection.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub u: StiefelPoint,
}

impl WarmStart {
    /// Zero potentials at the given projection.
    pub fn cold(inst: &PrwInstance, u: StiefelPoint) -> Self {
        Self {
            alpha: DVector::zeros(inst.n()),
            beta: DVector::zeros(inst.m()),
            u,
        }
    }

    pub fn from_iterate(iterate: &DualIterate) -> Self {
        Self {
            alpha: iterate.alpha().clone(),
            beta: iterate.beta().clone(),
            u: iterate.projection().clone(),
        }
    }
}

/// One outer iteration of the trace. Records where the iteration started,
/// what it proposed, and the accepted trial, so the acceptance inequality
/// can be re-verified from the trace alone.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct IrbbsIterRecord {
    pub iter: usize,
    /// False on the final record written when the stopping test fires.
    pub stepped: bool,
    /// Accepted stepsize (0 when `stepped` is false).
    pub tau: f64,
    /// Extra line-search trials beyond the first.
    pub backtracks: usize,
    /// ‖ξ_t‖_F at the iterate the step started from.
    pub grad_norm: f64,
    /// Row residual at that iterate.
    pub row_gap: f64,
    /// Full marginal violation e₂ at that iterate.
    pub e2: f64,
    /// Objective value L at that iterate.
    pub l_value: f64,
    /// Inner tolerance used for the accepted step.
    pub theta: f64,
    /// Inner iterations summed over the line-search trials.
    pub sinkhorn_iters: usize,
    pub mode: SinkhornMode,
    /// Zhang-Hager reference the acceptance was tested against.
    pub e_ref: f64,
    /// Potential of the accepted iterate.
    pub e_rho_next: f64,
    /// e₂ of the accepted iterate.
    pub e2_next: f64,
    /// True when the trial was taken because the backtrack cap was hit.
    pub accepted_by_cap: bool,
}

/// Subproblem result: the final iterate, stationarity measures at exit, and
/// per-iteration trace with work counters.
#[derive(Debug, Clone)]
pub struct IrbbsReport {
    pub iterate: DualIterate,
    /// ‖ξ‖_F at the returned iterate.
    pub e1: f64,
    /// Full marginal violation at the returned iterate.
    pub e2: f64,
    /// Row residual at the returned iterate.
    pub row_gap: f64,
    /// Objective value at the returned iterate.
    pub l_value: f64,
    pub converged: bool,
    /// Gradient-side work: one per outer iteration plus one per backtrack.
    pub n_grad: usize,
    pub n_sk_exp: usize,
    pub n_sk_log: usize,
    pub outer_iters: usize,
    pub backtracks_total: usize,
    /// Iterations whose line search hit the trial cap.
    pub backtrack_cap_hits: usize,
    /// Inner solves that overflowed in exp mode and redid the work in log
    /// mode.
    pub sinkhorn_fallbacks: usize,
    pub trace: Vec<IrbbsIterRecord>,
}

struct BestIterate {
    e1: f64,
    iterate: DualIterate,
    l_value: f64,
}

/// Runs the subproblem solver from a warm start.
pub fn irbbs_solve(
    inst: &PrwInstance,
    kappa: &MultiplierState,
    eta: f64,
    start: &WarmStart,
    cfg: &IrbbsConfig,
) -> Result<IrbbsReport> {
    cfg.validate()?;
    if eta <= 0.0 || !eta.is_finite() {
        return Err(PrwError::InvalidArgument(format!(
            "penalty must be positive, got {eta}"
        )));
    }
    let rho = cfg.rho_frac * eta;
    let c_inf = inst.cost_sup();

    let mut n_sk_exp = 0usize;
    let mut n_sk_log = 0usize;
    let mut fallbacks = 0usize;

    // Initial dual solve at U⁰ with θ₀.
    let theta0 = theta_schedule(cfg.theta_scale, None, c_inf, cfg.eps2);
    let mut sk_opts = SinkhornOptions::new(cfg.mode, theta0);
    sk_opts.max_iters = cfg.sinkhorn_max_iters;
    let out0 = sinkhorn(inst, kappa, eta, &start.alpha, &start.beta, &start.u, sk_opts)?;
    n_sk_exp += out0.iters_exp;
    n_sk_log += out0.iters_log;
    if out0.fell_back {
        fallbacks += 1;
    }
    if !out0.lagrangian.is_finite() {
        return Err(PrwError::Numerical(format!(
            "objective is not finite after the initial dual solve (eta={eta})"
        )));
    }
    let mut x = DualIterate::from_parts(
        out0.alpha,
        out0.beta,
        start.u.clone(),
        out0.plan,
        out0.row_gap,
        out0.col_gap,
    );
    let mut l_cur = out0.lagrangian;
    let mut nonmono = NonmonotoneState::new(l_cur + rho * x.e2() * x.e2());

    let mut bb: Option<BbState> = None;
    let mut best: Option<BestIterate> = None;
    let mut trace: Vec<IrbbsIterRecord> = Vec::new();
    let mut n_grad = 0usize;
    let mut backtracks_total = 0usize;
    let mut cap_hits = 0usize;
    let mut converged = false;
    let mut exit_e1 = f64::INFINITY;

    for t in 0..cfg.max_outer {
        let (xi, e1) = riemannian_grad(inst, x.plan(), x.projection())?;
        n_grad += 1;
        if best.as_ref().map_or(true, |b| e1 < b.e1) {
            best = Some(BestIterate {
                e1,
                iterate: x.clone(),
                l_value: l_cur,
            });
        }
        if e1 <= cfg.eps1 && x.row_gap() <= cfg.eps2 {
            trace.push(IrbbsIterRecord {
                iter: t,
                stepped: false,
                tau: 0.0,
                backtracks: 0,
                grad_norm: e1,
                row_gap: x.row_gap(),
                e2: x.e2(),
                l_value: l_cur,
                theta: 0.0,
                sinkhorn_iters: 0,
                mode: cfg.mode,
                e_ref: nonmono.e_ref,
                e_rho_next: l_cur + rho * x.e2() * x.e2(),
                e2_next: x.e2(),
                accepted_by_cap: false,
            });
            converged = true;
            exit_e1 = e1;
            break;
        }

        let theta_next = theta_schedule(cfg.theta_scale, Some(e1), c_inf, cfg.eps2);
        let tau0 = if let Some(fs) = cfg.fixed_step {
            fs
        } else if let Some(state) = bb.as_mut() {
            state.propose(x.projection().matrix(), xi.matrix(), cfg)
        } else {
            cfg.tau_0
        };

        let mut sk_iters_this = 0usize;
        let mut s = 0usize;
        let (tau, cand, l_new, e_rho_new, by_cap) = loop {
            let tau = tau0 * cfg.sigma.powi(s as i32);
            let u_new = crate::geometry::qr_retraction(x.projection(), &xi.scaled(-tau))?;
            let mut opts = SinkhornOptions::new(cfg.mode, theta_next);
            opts.max_iters = cfg.sinkhorn_max_iters;
            let out = sinkhorn(inst, kappa, eta, x.alpha(), x.beta(), &u_new, opts)?;
            n_sk_exp += out.iters_exp;
            n_sk_log += out.iters_log;
            sk_iters_this += out.iters_exp + out.iters_log;
            if out.fell_back {
                fallbacks += 1;
            }
            if !out.lagrangian.is_finite() {
                return Err(PrwError::Numerical(format!(
                    "objective is not finite at line-search trial {s} (tau={tau:.3e}, eta={eta})"
                )));
            }
            let cand = DualIterate::from_parts(
                out.alpha,
                out.beta,
                u_new,
                out.plan,
                out.row_gap,
                out.col_gap,
            );
            let e2_new = cand.e2();
            let e_rho_new = out.lagrangian + rho * e2_new * e2_new;
            let accept = line_search_accept(e_rho_new, &nonmono, tau, e1, e2_new, eta, cfg);
            if accept || s >= cfg.max_backtracks {
                if !accept {
                    cap_hits += 1;
                }
                break (tau, cand, out.lagrangian, e_rho_new, !accept);
            }
            s += 1;
        };
        n_grad += s;
        backtracks_total += s;

        trace.push(IrbbsIterRecord {
            iter: t,
            stepped: true,
            tau,
            backtracks: s,
            grad_norm: e1,
            row_gap: x.row_gap(),
            e2: x.e2(),
            l_value: l_cur,
            theta: theta_next,
            sinkhorn_iters: sk_iters_this,
            mode: cfg.mode,
            e_ref: nonmono.e_ref,
            e_rho_next: e_rho_new,
            e2_next: cand.e2(),
            accepted_by_cap: by_cap,
        });

        nonmono.update(cfg.gamma_zh, e_rho_new);
        match bb.as_mut() {
            Some(state) => {
                state.commit(x.projection().matrix().clone(), xi.matrix().clone(), tau)
            }
            None => {
                bb = Some(BbState::new(
                    x.projection().matrix().clone(),
                    xi.matrix().clone(),
                    tau,
                    cfg.psi_0,
                ));
            }
        }
        x = cand;
        l_cur = l_new;
    }

    let outer_iters = trace.len();
    let (iterate, e1, l_value) = if converged {
        (x, exit_e1, l_cur)
    } else {
        // Iteration budget exhausted: return the lowest-gradient iterate.
        let b = best.ok_or_else(|| PrwError::Numerical("no iterate produced".into()))?;
        (b.iterate, b.e1, b.l_value)
    };
    Ok(IrbbsReport {
        e2: iterate.e2(),
        row_gap: iterate.row_gap(),
        iterate,
        e1,
        l_value,
        converged,
        n_grad,
        n_sk_exp,
        n_sk_log,
        outer_iters,
        backtracks_total,
        backtrack_cap_hits: cap_hits,
        sinkhorn_fallbacks: fallbacks,
        trace,
    })
}
