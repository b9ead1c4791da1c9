//! Ground-truth references at desk scale.
//!
//! For uniform equal-size marginals the restricted OT value at a fixed
//! projection is an assignment problem (permutation matrices are the
//! extreme points of the Birkhoff polytope), solved exactly in O(n³) by a
//! shortest-augmenting-path method with dual potentials. The general case
//! is bounded instead: a small-penalty Sinkhorn solve is rounded to a
//! feasible plan whose value over-estimates the optimum by at most the
//! complementarity gap ⟨π̂, Z(x)⟩, which is reported alongside the value.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{PrwError, Result};
use crate::geometry::{qr_retraction, tangent_project, StiefelPoint};
use crate::transport::{
    plan_from_duals, projected_cost, riemannian_grad, round_plan, sinkhorn, z_matrix,
    MultiplierState, PrwInstance, SinkhornMode, SinkhornOptions,
};

/// Exact optimal transport between uniform marginals on equal-size clouds:
/// minimizes `(1/n)·Σ_i costs[i, σ(i)]` over permutations σ. Returns the
/// value and the permutation. Ties are broken deterministically by scanning
/// columns in ascending order.
pub fn exact_ot_uniform(costs: &DMatrix<f64>) -> Result<(f64, Vec<usize>)> {
    let n = costs.nrows();
    if costs.ncols() != n {
        return Err(PrwError::ShapeMismatch(format!(
            "assignment needs a square matrix, got {:?}",
            costs.shape()
        )));
    }
    if n == 0 {
        return Err(PrwError::InvalidArgument("empty cost matrix".into()));
    }
    if !costs.iter().all(|v| v.is_finite()) {
        return Err(PrwError::InvalidArgument(
            "assignment costs must be finite".into(),
        ));
    }
    let assignment = solve_assignment(costs);
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| costs[(i, j)])
        .sum();
    Ok((total / n as f64, assignment))
}

/// Shortest-augmenting-path assignment with dual potentials. `col_to_row[j]`
/// holds the row matched to column j; index `n` is the virtual root column.
fn solve_assignment(costs: &DMatrix<f64>) -> Vec<usize> {
    let n = costs.nrows();
    const FREE: usize = usize::MAX;
    let mut row_pot = vec![0.0_f64; n];
    let mut col_pot = vec![0.0_f64; n + 1];
    let mut col_to_row = vec![FREE; n + 1];
    let mut path = vec![n; n + 1];

    for row in 0..n {
        col_to_row[n] = row;
        let mut j_cur = n;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut visited = vec![false; n + 1];
        while col_to_row[j_cur] != FREE {
            visited[j_cur] = true;
            let i_cur = col_to_row[j_cur];
            let mut delta = f64::INFINITY;
            let mut j_next = n;
            for j in 0..n {
                if visited[j] {
                    continue;
                }
                let reduced = costs[(i_cur, j)] - row_pot[i_cur] - col_pot[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    path[j] = j_cur;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j_next = j;
                }
            }
            for j in 0..=n {
                if visited[j] {
                    row_pot[col_to_row[j]] += delta;
                    col_pot[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j_cur = j_next;
        }
        while j_cur != n {
            let j_prev = path[j_cur];
            col_to_row[j_cur] = col_to_row[j_prev];
            j_cur = j_prev;
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 0..n {
        row_to_col[col_to_row[j]] = j;
    }
    row_to_col
}

/// How a restricted OT value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PrimalMethod {
    /// Exact assignment solve (uniform equal-size marginals).
    ExactAssignment,
    /// Small-penalty Sinkhorn solve with a certified optimality gap.
    CertifiedSinkhorn,
}

/// Restricted OT value `min_{π ∈ Π(r,c)} ⟨π, C(U)⟩` at a fixed projection,
/// with a certified upper bound on its error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PrwPrimal {
    pub value: f64,
    pub method: PrimalMethod,
    /// Upper bound on `value − optimum`; zero for the exact branch.
    pub certified_gap: f64,
}

/// Computes the restricted OT value at `U`: exactly when the marginals are
/// uniform with equal sizes, otherwise through the certified Sinkhorn route.
pub fn prw_primal(inst: &PrwInstance, u: &StiefelPoint) -> Result<PrwPrimal> {
    if inst.is_uniform_square() {
        let cu = projected_cost(inst, u)?;
        let (value, _) = exact_ot_uniform(&cu)?;
        Ok(PrwPrimal {
            value,
            method: PrimalMethod::ExactAssignment,
            certified_gap: 0.0,
        })
    } else {
        prw_primal_certified(inst, u)
    }
}

/// Certified route usable for any marginals: log-domain Sinkhorn at
/// `η = 10⁻³·‖C(U)‖_∞`, rounded to a feasible π̂. The returned value
/// `⟨π̂, C(U)⟩` is a valid upper bound on the optimum whose error is at most
/// `⟨π̂, Z(x)⟩`, whether or not the inner solve converged.
pub fn prw_primal_certified(inst: &PrwInstance, u: &StiefelPoint) -> Result<PrwPrimal> {
    let cu = projected_cost(inst, u)?;
    let cu_sup = cu.iter().fold(0.0_f64, |a, &v| a.max(v));
    if cu_sup == 0.0 {
        // All projected points coincide: any feasible plan is optimal.
        return Ok(PrwPrimal {
            value: 0.0,
            method: PrimalMethod::CertifiedSinkhorn,
            certified_gap: 0.0,
        });
    }
    let eta = 1e-3 * cu_sup;
    let kappa = MultiplierState::ones(inst.n(), inst.m());
    let mut opts = SinkhornOptions::new(SinkhornMode::Log, 1e-9 * inst.max_weight().max(1e-3));
    opts.max_iters = 200_000;
    let out = sinkhorn(
        inst,
        &kappa,
        eta,
        &DVector::zeros(inst.n()),
        &DVector::zeros(inst.m()),
        u,
        opts,
    )?;
    let rounded = round_plan(&out.plan, inst.source_weights(), inst.target_weights())?;
    let z = z_matrix(inst, &out.alpha, &out.beta, u)?;
    Ok(PrwPrimal {
        value: rounded.dot(&cu),
        method: PrimalMethod::CertifiedSinkhorn,
        certified_gap: rounded.dot(&z),
    })
}

/// Compares the analytic gradient of `q(U) = min_{α,β} L_η` against central
/// finite differences along random unit tangent directions; `q` is
/// evaluated by Sinkhorn solves run to a tight inner tolerance. Returns the
/// largest relative error over the sampled directions.
#[allow(clippy::too_many_arguments)]
pub fn fd_gradient_check(
    inst: &PrwInstance,
    kappa: &MultiplierState,
    eta: f64,
    u: &StiefelPoint,
    h: f64,
    n_dirs: usize,
    seed: u64,
) -> Result<f64> {
    let theta = 1e-10;
    let solve_at = |point: &StiefelPoint,
                    alpha: &DVector<f64>,
                    beta: &DVector<f64>|
     -> Result<(f64, DVector<f64>, DVector<f64>)> {
        let opts = SinkhornOptions::new(SinkhornMode::Log, theta);
        let out = sinkhorn(inst, kappa, eta, alpha, beta, point, opts)?;
        Ok((out.lagrangian, out.alpha, out.beta))
    };

    let zeros_a = DVector::zeros(inst.n());
    let zeros_b = DVector::zeros(inst.m());
    let (_, alpha_c, beta_c) = solve_at(u, &zeros_a, &zeros_b)?;
    let plan = plan_from_duals(inst, kappa, eta, &alpha_c, &beta_c, u)?;
    let (grad, grad_norm) = riemannian_grad(inst, &plan, u)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..n_dirs {
        let ambient = DMatrix::from_fn(u.ambient_dim(), u.rank(), |_, _| {
            rng.random_range(-1.0..1.0)
        });
        let dir = tangent_project(u, &ambient)?;
        if dir.norm() == 0.0 {
            continue;
        }
        let dir = dir.scaled(1.0 / dir.norm());
        let up = qr_retraction(u, &dir.scaled(h))?;
        let dn = qr_retraction(u, &dir.scaled(-h))?;
        let (qp, _, _) = solve_at(&up, &alpha_c, &beta_c)?;
        let (qn, _, _) = solve_at(&dn, &alpha_c, &beta_c)?;
        let fd = (qp - qn) / (2.0 * h);
        let an = grad.matrix().dot(dir.matrix());
        let scale = an.abs().max(1e-8 * grad_norm.max(1e-8));
        worst = worst.max((fd - an).abs() / scale);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::marginal_residuals;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn uniform_instance(rng: &mut ChaCha8Rng, n: usize, d: usize, k: usize) -> PrwInstance {
        PrwInstance::new(
            random_matrix(rng, d, n),
            random_matrix(rng, d, n),
            DVector::from_element(n, 1.0 / n as f64),
            DVector::from_element(n, 1.0 / n as f64),
            k,
        )
        .unwrap()
    }

    fn brute_force_assignment(costs: &DMatrix<f64>) -> f64 {
        let n = costs.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut perm, 0, costs, &mut best);
        best / n as f64
    }

    fn permute(perm: &mut Vec<usize>, k: usize, costs: &DMatrix<f64>, best: &mut f64) {
        let n = perm.len();
        if k == n {
            let total: f64 = (0..n).map(|i| costs[(i, perm[i])]).sum();
            if total < *best {
                *best = total;
            }
            return;
        }
        for i in k..n {
            perm.swap(k, i);
            permute(perm, k + 1, costs, best);
            perm.swap(k, i);
        }
    }

    #[test]
    fn zero_costs_give_identity_assignment() {
        let costs = DMatrix::zeros(4, 4);
        let (value, perm) = exact_ot_uniform(&costs).unwrap();
        assert_eq!(value, 0.0);
        assert_eq!(perm, vec![0, 1, 2, 3]);
    }

    #[test]
    fn two_by_two_prefers_diagonal() {
        let costs = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 1.0]);
        let (value, perm) = exact_ot_uniform(&costs).unwrap();
        assert_eq!(perm, vec![0, 1]);
        assert!((value - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn assignment_matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for n in 2..=6 {
            for _ in 0..20 {
                let costs = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..10.0));
                let (value, perm) = exact_ot_uniform(&costs).unwrap();
                let brute = brute_force_assignment(&costs);
                assert!((value - brute).abs() <= 1e-12, "n={n}: {value} vs {brute}");
                let mut seen = vec![false; n];
                for &j in &perm {
                    assert!(!seen[j]);
                    seen[j] = true;
                }
            }
        }
    }

    #[test]
    fn assignment_rejects_non_square() {
        assert!(exact_ot_uniform(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn primal_single_pair_is_projected_cost() {
        let inst = PrwInstance::new(
            DMatrix::from_column_slice(2, 1, &[0.0, 0.0]),
            DMatrix::from_column_slice(2, 1, &[3.0, 4.0]),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
            1,
        )
        .unwrap();
        let u = StiefelPoint::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        let p = prw_primal(&inst, &u).unwrap();
        assert_eq!(p.method, PrimalMethod::ExactAssignment);
        assert!((p.value - 9.0).abs() <= 1e-12);
        assert_eq!(p.certified_gap, 0.0);
    }

    #[test]
    fn certified_branch_brackets_exact_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..5 {
            let inst = uniform_instance(&mut rng, 8, 4, 2);
            let u = StiefelPoint::new(random_matrix(&mut rng, 4, 2)).unwrap();
            let exact = prw_primal(&inst, &u).unwrap();
            let certified = prw_primal_certified(&inst, &u).unwrap();
            let slack = certified.value - exact.value;
            assert!(
                slack >= -1e-9,
                "feasible value cannot undercut the optimum: {slack}"
            );
            assert!(
                slack <= certified.certified_gap + 1e-9,
                "gap {slack} exceeds certificate {}",
                certified.certified_gap
            );
        }
    }

    #[test]
    fn exact_value_lower_bounds_sampled_feasible_plans() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let inst = uniform_instance(&mut rng, 6, 3, 2);
        let u = StiefelPoint::new(random_matrix(&mut rng, 3, 2)).unwrap();
        let cu = projected_cost(&inst, &u).unwrap();
        let (exact, _) = exact_ot_uniform(&cu).unwrap();
        for _ in 0..100 {
            let mut raw = DMatrix::from_fn(6, 6, |_, _| rng.random_range(0.0..1.0));
            let mass: f64 = raw.iter().sum();
            raw /= mass;
            let feasible =
                round_plan(&raw, inst.source_weights(), inst.target_weights()).unwrap();
            let (rg, cg, _) =
                marginal_residuals(&feasible, inst.source_weights(), inst.target_weights());
            assert!(rg <= 1e-12 && cg <= 1e-12);
            let value = feasible.dot(&cu);
            assert!(value + 1e-10 >= exact);
        }
    }

    #[test]
    fn fd_check_single_pair_closed_form() {
        let inst = PrwInstance::new(
            DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 0.0]),
            DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5]),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
            1,
        )
        .unwrap();
        let kappa = MultiplierState::ones(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let u = StiefelPoint::new(random_matrix(&mut rng, 3, 1)).unwrap();
        let err = fd_gradient_check(&inst, &kappa, 1.0, &u, 1e-5, 10, 7).unwrap();
        assert!(err <= 1e-6, "error {err}");
    }

    #[test]
    fn fd_error_shrinks_with_step_until_round_off() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let inst = uniform_instance(&mut rng, 6, 4, 2);
        let kappa = MultiplierState::ones(6, 6);
        let u = StiefelPoint::new(random_matrix(&mut rng, 4, 2)).unwrap();
        let coarse = fd_gradient_check(&inst, &kappa, 1.0, &u, 1e-3, 8, 9).unwrap();
        let fine = fd_gradient_check(&inst, &kappa, 1.0, &u, 1e-4, 8, 9).unwrap();
        assert!(fine <= coarse + 1e-10, "coarse {coarse} vs fine {fine}");
        let err = fd_gradient_check(&inst, &kappa, 1.0, &u, 1e-5, 8, 9).unwrap();
        assert!(err <= 1e-4, "error {err}");
    }
}
