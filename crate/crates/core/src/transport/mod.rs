//! Cost structures, entropic dual machinery, Sinkhorn inner solves, plan
//! rounding, and stationarity certificates.
//!
//! Throughout, an instance couples a source cloud X (d×n) with weights r and
//! a target cloud Y (d×m) with weights c. For a projection U with orthonormal
//! columns the projected cost is `[C(U)]_ij = ‖Uᵀ(x_i − y_j)‖²`, the dual
//! potentials are (α, β), and the multiplier-weighted Gibbs kernel is
//!
//! ```text
//! ζ_ij = κ_ij · exp(−φ_ij/η),   φ_ij = α_i + β_j + [C(U)]_ij.
//! ```
//!
//! The smoothed dual objective minimized by the solvers is
//! `L_η(x, κ) = rᵀα + cᵀβ + η·log‖ζ‖₁`, and the transport plan implied by a
//! dual iterate is the normalization π = ζ/‖ζ‖₁. All kernel quantities are
//! evaluated through max-shifted log-sum-exp so no input magnitude overflows.

mod certificate;
mod round;
mod sinkhorn;

pub use certificate::{stationarity_certificate, z_matrix, StationarityCertificate};
pub use round::round_plan;
pub use sinkhorn::{
    sinkhorn, sinkhorn_traced, SinkhornMode, SinkhornOptions, SinkhornOutcome, SinkhornStep,
};

use nalgebra::{DMatrix, DVector};

use crate::error::{PrwError, Result};
use crate::geometry::{tangent_project, StiefelPoint, TangentVector};

/// A discrete PRW problem: two weighted point clouds, the projection rank,
/// and the cached squared-Euclidean ground cost.
#[derive(Debug, Clone)]
pub struct PrwInstance {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    r: DVector<f64>,
    c: DVector<f64>,
    k: usize,
    cost: DMatrix<f64>,
    c_inf: f64,
}

impl PrwInstance {
    /// Builds an instance from point clouds stored one point per column.
    /// Weights must be strictly positive; they are renormalized to sum to 1.
    pub fn new(
        x: DMatrix<f64>,
        y: DMatrix<f64>,
        r: DVector<f64>,
        c: DVector<f64>,
        k: usize,
    ) -> Result<Self> {
        let (d, n) = x.shape();
        let (dy, m) = y.shape();
        if d == 0 || n == 0 || m == 0 {
            return Err(PrwError::InvalidArgument(
                "point clouds must be non-empty".into(),
            ));
        }
        if d != dy {
            return Err(PrwError::ShapeMismatch(format!(
                "source dimension {d} vs target dimension {dy}"
            )));
        }
        if k < 1 || k > d {
            return Err(PrwError::InvalidArgument(format!(
                "projection rank must satisfy 1 <= k <= d, got k={k}, d={d}"
            )));
        }
        if r.len() != n || c.len() != m {
            return Err(PrwError::ShapeMismatch(format!(
                "weights of length {}/{} for clouds of size {n}/{m}",
                r.len(),
                c.len()
            )));
        }
        let r = normalize_weights(r, "source")?;
        let c = normalize_weights(c, "target")?;
        let cost = cost_matrix(&x, &y)?;
        let c_inf = cost.iter().fold(0.0_f64, |a, &v| a.max(v));
        Ok(Self {
            x,
            y,
            r,
            c,
            k,
            cost,
            c_inf,
        })
    }

    /// Source points, one per column (d×n).
    pub fn source_points(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Target points, one per column (d×m).
    pub fn target_points(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn source_weights(&self) -> &DVector<f64> {
        &self.r
    }

    pub fn target_weights(&self) -> &DVector<f64> {
        &self.c
    }

    /// Ambient dimension d.
    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    /// Number of source points.
    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    /// Number of target points.
    pub fn m(&self) -> usize {
        self.y.ncols()
    }

    /// Projection rank k.
    pub fn rank(&self) -> usize {
        self.k
    }

    /// Ground cost matrix with `C_ij = ‖x_i − y_j‖²`.
    pub fn cost(&self) -> &DMatrix<f64> {
        &self.cost
    }

    /// `‖C‖_∞ = max_ij C_ij`.
    pub fn cost_sup(&self) -> f64 {
        self.c_inf
    }

    /// `max{‖r‖_∞, ‖c‖_∞}`, the scale used by the stopping tolerances.
    pub fn max_weight(&self) -> f64 {
        let rmax = self.r.iter().fold(0.0_f64, |a, &v| a.max(v));
        let cmax = self.c.iter().fold(0.0_f64, |a, &v| a.max(v));
        rmax.max(cmax)
    }

    /// True when both marginals are uniform and the clouds have equal size,
    /// which is the regime where the assignment oracle is exact.
    pub fn is_uniform_square(&self) -> bool {
        if self.n() != self.m() {
            return false;
        }
        let w = 1.0 / self.n() as f64;
        self.r.iter().all(|&v| (v - w).abs() <= 1e-12)
            && self.c.iter().all(|&v| (v - w).abs() <= 1e-12)
    }

    /// Returns the same instance with a different projection rank.
    pub fn with_rank(self, k: usize) -> Result<Self> {
        PrwInstance::new(self.x, self.y, self.r, self.c, k)
    }
}

fn normalize_weights(w: DVector<f64>, side: &str) -> Result<DVector<f64>> {
    if !w.iter().all(|&v| v.is_finite() && v > 0.0) {
        return Err(PrwError::InvalidArgument(format!(
            "{side} weights must be strictly positive and finite"
        )));
    }
    let total: f64 = w.iter().sum();
    Ok(w / total)
}

/// Squared Euclidean cost matrix `C_ij = ‖x_i − y_j‖²`, computed through
/// `‖x‖² + ‖y‖² − 2⟨x, y⟩` with negative round-off clamped to zero.
pub fn cost_matrix(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() != y.nrows() {
        return Err(PrwError::ShapeMismatch(format!(
            "point dimensions differ: {} vs {}",
            x.nrows(),
            y.nrows()
        )));
    }
    Ok(squared_distances(x, y))
}

fn squared_distances(p: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = p.ncols();
    let m = q.ncols();
    let pn: Vec<f64> = (0..n).map(|i| p.column(i).norm_squared()).collect();
    let qn: Vec<f64> = (0..m).map(|j| q.column(j).norm_squared()).collect();
    let mut out = p.tr_mul(q);
    for j in 0..m {
        let qnj = qn[j];
        for i in 0..n {
            out[(i, j)] = (pn[i] + qnj - 2.0 * out[(i, j)]).max(0.0);
        }
    }
    out
}

/// Projected cost `[C(U)]_ij = ‖Uᵀ(x_i − y_j)‖²`, computed from the projected
/// clouds in O(ndk + mdk + nmk). Entries are clamped to `[0, C_ij]`, the
/// range they occupy in exact arithmetic.
pub fn projected_cost(inst: &PrwInstance, u: &StiefelPoint) -> Result<DMatrix<f64>> {
    if u.ambient_dim() != inst.dim() {
        return Err(PrwError::ShapeMismatch(format!(
            "projection lives in dimension {}, instance in {}",
            u.ambient_dim(),
            inst.dim()
        )));
    }
    let px = u.matrix().tr_mul(&inst.x);
    let py = u.matrix().tr_mul(&inst.y);
    let mut cu = squared_distances(&px, &py);
    for (v, &cap) in cu.iter_mut().zip(inst.cost.iter()) {
        if *v > cap {
            *v = cap;
        }
    }
    Ok(cu)
}

/// Elementwise log of the multiplier-weighted Gibbs kernel together with
/// `log‖ζ‖₁`, both safe for arbitrary input magnitudes.
pub fn log_kernel(
    inst: &PrwInstance,
    kappa: &MultiplierState,
    eta: f64,
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
    u: &StiefelPoint,
) -> Result<(DMatrix<f64>, f64)> {
    check_dual_shapes(inst, kappa, alpha, beta)?;
    let cu = projected_cost(inst, u)?;
    Ok(log_kernel_with_cost(kappa, eta, alpha, beta, &cu))
}

pub(crate) fn log_kernel_with_cost(
    kappa: &MultiplierState,
    eta: f64,
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
    cu: &DMatrix<f64>,
) -> (DMatrix<f64>, f64) {
    let (n, m) = cu.shape();
    let mut logz = DMatrix::<f64>::zeros(n, m);
    let log_kappa = kappa.log_kappa();
    for j in 0..m {
        let bj = beta[j];
        for i in 0..n {
            logz[(i, j)] = log_kappa[(i, j)] - (alpha[i] + bj + cu[(i, j)]) / eta;
        }
    }
    let lse = logsumexp(logz.iter().copied());
    (logz, lse)
}

/// Max-shifted log-sum-exp over an iterator of values.
pub(crate) fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Transport plan implied by a dual iterate: the softmax `ζ/‖ζ‖₁`. Entries
/// are strictly positive and the total mass is 1 up to round-off.
pub fn plan_from_duals(
    inst: &PrwInstance,
    kappa: &MultiplierState,
    eta: f64,
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
    u: &StiefelPoint,
) -> Result<DMatrix<f64>> {
    let (logz, lse) = log_kernel(inst, kappa, eta, alpha, beta, u)?;
    Ok(softmax_from_log(&logz, lse))
}

pub(crate) fn softmax_from_log(logz: &DMatrix<f64>, lse: f64) -> DMatrix<f64> {
    logz.map(|v| (v - lse).exp().max(f64::MIN_POSITIVE))
}

/// `V_π U` where `V_π = Σ_ij π_ij (x_i − y_j)(x_i − y_j)ᵀ`, evaluated through
/// the factored form
/// `X·Diag(π1)·XᵀU + Y·Diag(πᵀ1)·YᵀU − X·π·YᵀU − Y·πᵀ·XᵀU`
/// so the rank-one pieces are never materialized.
pub fn scatter_times_u(
    inst: &PrwInstance,
    plan: &DMatrix<f64>,
    u: &StiefelPoint,
) -> Result<DMatrix<f64>> {
    if plan.shape() != (inst.n(), inst.m()) {
        return Err(PrwError::ShapeMismatch(format!(
            "plan {:?} for instance {}x{}",
            plan.shape(),
            inst.n(),
            inst.m()
        )));
    }
    if u.ambient_dim() != inst.dim() {
        return Err(PrwError::ShapeMismatch(
            "projection dimension differs from instance".into(),
        ));
    }
    let row_mass = plan_row_sums(plan);
    let col_mass = plan_col_sums(plan);
    let xtu = inst.x.tr_mul(u.matrix()); // n×k
    let ytu = inst.y.tr_mul(u.matrix()); // m×k

    let mut sx = xtu.clone();
    for i in 0..sx.nrows() {
        let w = row_mass[i];
        sx.row_mut(i).scale_mut(w);
    }
    let mut sy = ytu.clone();
    for j in 0..sy.nrows() {
        let w = col_mass[j];
        sy.row_mut(j).scale_mut(w);
    }

    let mut out = &inst.x * sx; // X·Diag(π1)·XᵀU
    out += &inst.y * sy; // Y·Diag(πᵀ1)·YᵀU
    out -= &inst.x * (plan * &ytu); // X·π·YᵀU
    out -= &inst.y * (plan.tr_mul(&xtu)); // Y·πᵀ·XᵀU
    Ok(out)
}

/// Full displacement scatter matrix `V_π` as a symmetric d×d matrix; used to
/// seed the projection from an initial plan.
pub fn scatter_matrix(inst: &PrwInstance, plan: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if plan.shape() != (inst.n(), inst.m()) {
        return Err(PrwError::ShapeMismatch(format!(
            "plan {:?} for instance {}x{}",
            plan.shape(),
            inst.n(),
            inst.m()
        )));
    }
    let row_mass = plan_row_sums(plan);
    let col_mass = plan_col_sums(plan);
    let mut xs = inst.x.clone();
    for j in 0..xs.ncols() {
        xs.column_mut(j).scale_mut(row_mass[j]);
    }
    let mut ys = inst.y.clone();
    for j in 0..ys.ncols() {
        ys.column_mut(j).scale_mut(col_mass[j]);
    }
    let cross = &inst.x * plan * inst.y.transpose();
    let mut v = xs * inst.x.transpose() + ys * inst.y.transpose() - &cross - cross.transpose();
    let vt = v.transpose();
    v += vt;
    v *= 0.5;
    Ok(v)
}

pub(crate) fn plan_row_sums(plan: &DMatrix<f64>) -> DVector<f64> {
    let mut sums = DVector::zeros(plan.nrows());
    for col in plan.column_iter() {
        sums += col;
    }
    sums
}

pub(crate) fn plan_col_sums(plan: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(plan.ncols(), plan.column_iter().map(|c| c.sum()))
}

/// Riemannian gradient of the smoothed dual objective in `U` for a fixed
/// plan: the tangent projection of `−2 V_π U`, together with its Frobenius
/// norm (the first stationarity measure e₁).
pub fn riemannian_grad(
    inst: &PrwInstance,
    plan: &DMatrix<f64>,
    u: &StiefelPoint,
) -> Result<(TangentVector, f64)> {
    let vu = scatter_times_u(inst, plan, u)?;
    let grad = tangent_project(u, &(vu * -2.0))?;
    let norm = grad.norm();
    Ok((grad, norm))
}

/// ℓ₁ marginal violations of a plan: `(‖π1 − r‖₁, ‖πᵀ1 − c‖₁, their sum)`.
/// The sum is the second stationarity measure e₂.
pub fn marginal_residuals(
    plan: &DMatrix<f64>,
    r: &DVector<f64>,
    c: &DVector<f64>,
) -> (f64, f64, f64) {
    let rows = plan_row_sums(plan);
    let cols = plan_col_sums(plan);
    let row_gap = rows
        .iter()
        .zip(r.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>();
    let col_gap = cols
        .iter()
        .zip(c.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>();
    (row_gap, col_gap, row_gap + col_gap)
}

/// Smoothed dual objective `rᵀα + cᵀβ + η·log‖ζ‖₁` evaluated through the
/// stable log-sum-exp.
pub fn lagrangian_value(
    inst: &PrwInstance,
    kappa: &MultiplierState,
    eta: f64,
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
    u: &StiefelPoint,
) -> Result<f64> {
    let (_, lse) = log_kernel(inst, kappa, eta, alpha, beta, u)?;
    Ok(inst.r.dot(alpha) + inst.c.dot(beta) + eta * lse)
}

/// Shifts the potentials by `(υ₁·1, υ₂·1)` so that `rᵀα = cᵀβ` and
/// `‖ζ‖₁ = 1`. The objective, its gradient, and the implied plan are all
/// invariant under this shift.
pub fn shift_normalize(
    inst: &PrwInstance,
    kappa: &MultiplierState,
    eta: f64,
    iterate: &DualIterate,
) -> Result<DualIterate> {
    let (_, lse) = log_kernel(inst, kappa, eta, &iterate.alpha, &iterate.beta, &iterate.u)?;
    let ra = inst.r.dot(&iterate.alpha);
    let cb = inst.c.dot(&iterate.beta);
    let v1 = (cb - ra + eta * lse) / 2.0;
    let v2 = (ra - cb + eta * lse) / 2.0;
    Ok(DualIterate {
        alpha: iterate.alpha.map(|v| v + v1),
        beta: iterate.beta.map(|v| v + v2),
        u: iterate.u.clone(),
        plan: iterate.plan.clone(),
        row_gap: iterate.row_gap,
        col_gap: iterate.col_gap,
    })
}

fn check_dual_shapes(
    inst: &PrwInstance,
    kappa: &MultiplierState,
    alpha: &DVector<f64>,
    beta: &DVector<f64>,
) -> Result<()> {
    if alpha.len() != inst.n() || beta.len() != inst.m() {
        return Err(PrwError::ShapeMismatch(format!(
            "duals of length {}/{} for instance {}x{}",
            alpha.len(),
            beta.len(),
            inst.n(),
            inst.m()
        )));
    }
    if kappa.shape() != (inst.n(), inst.m()) {
        return Err(PrwError::ShapeMismatch(format!(
            "multiplier {:?} for instance {}x{}",
            kappa.shape(),
            inst.n(),
            inst.m()
        )));
    }
    Ok(())
}

/// Dual iterate `x = (α, β, U)` with the implied plan and its marginal gaps
/// cached.
#[derive(Debug, Clone)]
pub struct DualIterate {
    alpha: DVector<f64>,
    beta: DVector<f64>,
    u: StiefelPoint,
    plan: DMatrix<f64>,
    row_gap: f64,
    col_gap: f64,
}

impl DualIterate {
    /// Builds the iterate, computing the implied plan and its residuals.
    pub fn from_duals(
        inst: &PrwInstance,
        kappa: &MultiplierState,
        eta: f64,
        alpha: DVector<f64>,
        beta: DVector<f64>,
        u: StiefelPoint,
    ) -> Result<Self> {
        let plan = plan_from_duals(inst, kappa, eta, &alpha, &beta, &u)?;
        let (row_gap, col_gap, _) = marginal_residuals(&plan, &inst.r, &inst.c);
        Ok(Self {
            alpha,
            beta,
            u,
            plan,
            row_gap,
            col_gap,
        })
    }

    pub(crate) fn from_parts(
        alpha: DVector<f64>,
        beta: DVector<f64>,
        u: StiefelPoint,
        plan: DMatrix<f64>,
        row_gap: f64,
        col_gap: f64,
    ) -> Self {
        Self {
            alpha,
            beta,
            u,
            plan,
            row_gap,
            col_gap,
        }
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn projection(&self) -> &StiefelPoint {
        &self.u
    }

    pub fn plan(&self) -> &DMatrix<f64> {
        &self.plan
    }

    pub fn row_gap(&self) -> f64 {
        self.row_gap
    }

    pub fn col_gap(&self) -> f64 {
        self.col_gap
    }

    /// Total marginal violation e₂ = row gap + column gap.
    pub fn e2(&self) -> f64 {
        self.row_gap + self.col_gap
    }
}

/// Strictly positive Lagrange multiplier matrix with cached log statistics.
#[derive(Debug, Clone)]
pub struct MultiplierState {
    kappa: DMatrix<f64>,
    log_kappa: DMatrix<f64>,
    log_var: f64,
    log_inf: f64,
}

impl MultiplierState {
    pub fn new(kappa: DMatrix<f64>) -> Result<Self> {
        if !kappa.iter().all(|&v| v.is_finite() && v > 0.0) {
            return Err(PrwError::InvalidArgument(
                "multiplier entries must be strictly positive and finite".into(),
            ));
        }
        let log_kappa = kappa.map(f64::ln);
        let max = log_kappa.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let min = log_kappa.iter().fold(f64::INFINITY, |a, &v| a.min(v));
        Ok(Self {
            kappa,
            log_kappa,
            log_var: max - min,
            log_inf: max.abs().max(min.abs()),
        })
    }

    /// The all-ones multiplier, whose log statistics vanish.
    pub fn ones(n: usize, m: usize) -> Self {
        Self {
            kappa: DMatrix::from_element(n, m, 1.0),
            log_kappa: DMatrix::zeros(n, m),
            log_var: 0.0,
            log_inf: 0.0,
        }
    }

    pub fn kappa(&self) -> &DMatrix<f64> {
        &self.kappa
    }

    pub fn log_kappa(&self) -> &DMatrix<f64> {
        &self.log_kappa
    }

    /// `‖log κ‖_var = max log κ − min log κ`.
    pub fn log_var(&self) -> f64 {
        self.log_var
    }

    /// `‖log κ‖_∞`.
    pub fn log_inf(&self) -> f64 {
        self.log_inf
    }

    pub fn shape(&self) -> (usize, usize) {
        self.kappa.shape()
    }

    /// Total mass `‖κ‖₁` (multipliers are positive).
    pub fn mass(&self) -> f64 {
        self.kappa.iter().sum()
    }
}

/// Variation seminorm `max − min` of a vector.
pub fn var_seminorm(v: &DVector<f64>) -> f64 {
    let max = v.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
    let min = v.iter().fold(f64::INFINITY, |a, &x| a.min(x));
    max - min
}

/// Variation seminorm of a matrix.
pub fn var_seminorm_matrix(m: &DMatrix<f64>) -> f64 {
    let max = m.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
    let min = m.iter().fold(f64::INFINITY, |a, &x| a.min(x));
    max - min
}

#[cfg(test)]
mod tests;
