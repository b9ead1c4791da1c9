//! Stiefel-manifold primitives.
//!
//! A point is a d×k matrix with orthonormal columns; a tangent vector ξ at U
//! satisfies Uᵀξ + ξᵀU = 0. The retraction is the thin-QR factor of U + ξ.
//! Both the QR factor and the eigenvector basis returned here follow fixed
//! sign conventions so that repeated runs are bit-reproducible.

use nalgebra::DMatrix;

use crate::error::{PrwError, Result};

/// Frobenius tolerance under which a matrix counts as orthonormal.
pub const ORTHONORMALITY_TOL: f64 = 1e-12;

/// A d×k matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint {
    u: DMatrix<f64>,
}

impl StiefelPoint {
    /// Wraps a matrix as a manifold point, re-orthonormalizing the columns
    /// (thin QR, positive-diagonal convention) when they drift past
    /// [`ORTHONORMALITY_TOL`].
    pub fn new(u: DMatrix<f64>) -> Result<Self> {
        let (d, k) = u.shape();
        if k < 1 || d < k {
            return Err(PrwError::InvalidArgument(format!(
                "Stiefel point needs d >= k >= 1, got d={d}, k={k}"
            )));
        }
        if !u.iter().all(|v| v.is_finite()) {
            return Err(PrwError::Numerical(
                "non-finite entries in Stiefel point".into(),
            ));
        }
        if orthonormality_defect(&u) <= ORTHONORMALITY_TOL {
            return Ok(Self { u })
        }
        let q = thin_qr_positive(&u)?;
        if orthonormality_defect(&q) > ORTHONORMALITY_TOL {
            return Err(PrwError::Numerical(
                "re-orthonormalization failed to reach tolerance".into(),
            ));
        }
        Ok(Self { u: q })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.u
    }

    /// Ambient dimension d.
    pub fn ambient_dim(&self) -> usize {
        self.u.nrows()
    }

    /// Number of orthonormal columns k.
    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    /// ‖UᵀU − I‖_F, the distance from exact orthonormality.
    pub fn orthonormality_defect(&self) -> f64 {
        orthonormality_defect(&self.u)
    }
}

fn orthonormality_defect(u: &DMatrix<f64>) -> f64 {
    let k = u.ncols();
    let mut gram = u.tr_mul(u);
    for j in 0..k {
        gram[(j, j)] -= 1.0;
    }
    gram.norm()
}

/// A tangent vector ξ at a base point, with Uᵀξ + ξᵀU = 0.
#[derive(Debug, Clone)]
pub struct TangentVector {
    xi: DMatrix<f64>,
    base: StiefelPoint,
}

impl TangentVector {
    /// Skew-symmetry tolerance for `Uᵀξ + ξᵀU`.
    pub const SKEW_TOL: f64 = 1e-10;

    pub fn new(base: StiefelPoint, xi: DMatrix<f64>) -> Result<Self> {
        if xi.shape() != base.matrix().shape() {
            return Err(PrwError::ShapeMismatch(format!(
                "tangent vector {:?} vs base {:?}",
                xi.shape(),
                base.matrix().shape()
            )));
        }
        let sym = base.matrix().tr_mul(&xi);
        let defect = (&sym + sym.transpose()).norm();
        if defect > Self::SKEW_TOL * (1.0 + xi.norm()) {
            return Err(PrwError::InvalidArgument(format!(
                "not tangent at base: symmetry defect {defect:.3e}"
            )));
        }
        Ok(Self { xi, base })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.xi
    }

    pub fn base(&self) -> &StiefelPoint {
        &self.base
    }

    pub fn norm(&self) -> f64 {
        self.xi.norm()
    }

    /// Scales the vector by `t`; the tangent constraint is preserved.
    pub fn scaled(&self, t: f64) -> TangentVector {
        TangentVector {
            xi: &self.xi * t,
            base: self.base.clone(),
        }
    }
}

/// Orthogonal projection of an ambient matrix `G` onto the tangent space at
/// `U`: returns `G − U·sym(UᵀG)` with `sym(A) = (A + Aᵀ)/2`. When `UᵀG` is
/// symmetric this coincides with `(I − UUᵀ)G`.
pub fn tangent_project(u: &StiefelPoint, g: &DMatrix<f64>) -> Result<TangentVector> {
    if g.shape() != u.matrix().shape() {
        return Err(PrwError::ShapeMismatch(format!(
            "gradient {:?} vs point {:?}",
            g.shape(),
            u.matrix().shape()
        )));
    }
    let utg = u.matrix().tr_mul(g);
    let sym = (&utg + utg.transpose()) * 0.5;
    let xi = g - u.matrix() * sym;
    Ok(TangentVector {
        xi,
        base: u.clone(),
    })
}

/// QR retraction: the thin-QR factor Q of `U + ξ`, with the sign convention
/// diag(R) > 0 so the output is deterministic. A rank-deficient `U + ξ`
/// signals a degenerate retraction (cannot happen for exact tangent vectors,
/// whose Gram matrix satisfies `(U+ξ)ᵀ(U+ξ) = I + ξᵀξ`).
pub fn qr_retraction(u: &StiefelPoint, xi: &TangentVector) -> Result<StiefelPoint> {
    if xi.matrix().shape() != u.matrix().shape() {
        return Err(PrwError::ShapeMismatch(format!(
            "tangent {:?} vs point {:?}",
            xi.matrix().shape(),
            u.matrix().shape()
        )));
    }
    if xi.norm() == 0.0 {
        return Ok(u.clone());
    }
    let q = thin_qr_positive(&(u.matrix() + xi.matrix()))?;
    Ok(StiefelPoint { u: q })
}

/// Thin QR factor with diag(R) > 0; errors when a diagonal entry of R
/// vanishes relative to the input scale.
fn thin_qr_positive(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = m.ncols();
    let scale = m.norm().max(1.0);
    let qr = m.clone().qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..k {
        let rjj = r[(j, j)];
        if rjj.abs() <= 1e-14 * scale {
            return Err(PrwError::Numerical(format!(
                "degenerate retraction: R[{j},{j}] = {rjj:.3e}"
            )));
        }
        if rjj < 0.0 {
            for v in q.column_mut(j).iter_mut() {
                *v = -*v;
            }
        }
    }
    Ok(q)
}

/// Orthonormal basis of the invariant subspace for the `k` largest
/// eigenvalues of a symmetric matrix. Eigenvalues are sorted descending
/// (ties kept in input order) and each column is signed so its first nonzero
/// entry is positive.
pub fn top_k_eigvecs(s: &DMatrix<f64>, k: usize) -> Result<StiefelPoint> {
    let d = s.nrows();
    if s.ncols() != d {
        return Err(PrwError::ShapeMismatch(format!(
            "expected square matrix, got {:?}",
            s.shape()
        )));
    }
    if k < 1 || k > d {
        return Err(PrwError::InvalidArgument(format!(
            "need 1 <= k <= d, got k={k}, d={d}"
        )));
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut u = DMatrix::<f64>::zeros(d, k);
    for (col, &idx) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(idx);
        let flip = v.iter().find(|x| **x != 0.0).map_or(1.0, |x| x.signum());
        for row in 0..d {
            u[(row, col)] = flip * v[row];
        }
    }
    StiefelPoint::new(u)
}
