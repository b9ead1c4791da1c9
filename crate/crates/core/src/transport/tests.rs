use super::*;
use crate::geometry::{qr_retraction, tangent_project};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| rng.random_range(0.1..1.0));
    let s: f64 = v.iter().sum();
    v / s
}

fn random_stiefel(rng: &mut ChaCha8Rng, d: usize, k: usize) -> StiefelPoint {
    StiefelPoint::new(random_matrix(rng, d, k)).unwrap()
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize, m: usize, d: usize, k: usize) -> PrwInstance {
    let x = random_matrix(rng, d, n);
    let y = random_matrix(rng, d, m);
    let r = random_simplex(rng, n);
    let c = random_simplex(rng, m);
    PrwInstance::new(x, y, r, c, k).unwrap()
}

fn random_positive_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| rng.random_range(0.2..2.0))
}

/// Instance whose points all sit at the origin, so C = C(U) = 0.
fn degenerate_instance(n: usize, m: usize, d: usize, k: usize) -> PrwInstance {
    PrwInstance::new(
        DMatrix::zeros(d, n),
        DMatrix::zeros(d, m),
        DVector::from_element(n, 1.0 / n as f64),
        DVector::from_element(m, 1.0 / m as f64),
        k,
    )
    .unwrap()
}

#[test]
fn cost_matrix_vanishes_on_equal_clouds() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = random_matrix(&mut rng, 3, 4);
    let c = cost_matrix(&x, &x).unwrap();
    for i in 0..4 {
        assert_eq!(c[(i, i)], 0.0);
    }
}

#[test]
fn cost_matrix_345_triangle() {
    let x = DMatrix::from_column_slice(2, 1, &[0.0, 0.0]);
    let y = DMatrix::from_column_slice(2, 1, &[3.0, 4.0]);
    let c = cost_matrix(&x, &y).unwrap();
    assert!((c[(0, 0)] - 25.0).abs() <= 1e-12);
}

#[test]
fn cost_matrix_matches_per_pair_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_matrix(&mut rng, 4, 5);
    let y = random_matrix(&mut rng, 4, 7);
    let c = cost_matrix(&x, &y).unwrap();
    for i in 0..5 {
        for j in 0..7 {
            let d = (x.column(i) - y.column(j)).norm_squared();
            assert!((c[(i, j)] - d).abs() <= 1e-10 * d.max(1.0));
        }
    }
}

#[test]
fn cost_matrix_rejects_dimension_mismatch() {
    assert!(cost_matrix(&DMatrix::zeros(3, 2), &DMatrix::zeros(4, 2)).is_err());
}

#[test]
fn projected_cost_full_rank_recovers_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let inst = random_instance(&mut rng, 4, 5, 3, 3);
    let u = StiefelPoint::new(DMatrix::identity(3, 3)).unwrap();
    let cu = projected_cost(&inst, &u).unwrap();
    assert!((cu - inst.cost()).norm() <= 1e-12);
}

#[test]
fn projected_cost_coordinate_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let inst = random_instance(&mut rng, 3, 3, 4, 1);
    let mut e1 = DMatrix::zeros(4, 1);
    e1[(0, 0)] = 1.0;
    let u = StiefelPoint::new(e1).unwrap();
    let cu = projected_cost(&inst, &u).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let expect =
                (inst.source_points()[(0, i)] - inst.target_points()[(0, j)]).powi(2);
            assert!((cu[(i, j)] - expect).abs() <= 1e-12);
        }
    }
}

#[test]
fn projected_cost_matches_rank_one_expansion() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let inst = random_instance(&mut rng, 4, 4, 6, 2);
    let u = random_stiefel(&mut rng, 6, 2);
    let cu = projected_cost(&inst, &u).unwrap();
    let uut = u.matrix() * u.matrix().transpose();
    for i in 0..4 {
        for j in 0..4 {
            let diff = inst.source_points().column(i) - inst.target_points().column(j);
            let mij = &diff * diff.transpose();
            let expect = mij.dot(&uut);
            assert!((cu[(i, j)] - expect).abs() <= 1e-10 * expect.max(1.0));
        }
    }
}

#[test]
fn projected_cost_dominated_by_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for _ in 0..10 {
        let inst = random_instance(&mut rng, 5, 6, 5, 2);
        let u = random_stiefel(&mut rng, 5, 2);
        let cu = projected_cost(&inst, &u).unwrap();
        for (v, &cap) in cu.iter().zip(inst.cost().iter()) {
            assert!(*v >= 0.0 && *v <= cap);
        }
    }
}

#[test]
fn log_kernel_uniform_case() {
    let inst = degenerate_instance(2, 3, 2, 1);
    let kappa = MultiplierState::ones(2, 3);
    let u = StiefelPoint::new(DMatrix::identity(2, 1)).unwrap();
    let (logz, lse) = log_kernel(
        &inst,
        &kappa,
        0.7,
        &DVector::zeros(2),
        &DVector::zeros(3),
        &u,
    )
    .unwrap();
    assert!(logz.iter().all(|&v| v.abs() <= 1e-15));
    assert!((lse - 6.0_f64.ln()).abs() <= 1e-12);
}

#[test]
fn log_kernel_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let inst = random_instance(&mut rng, 3, 3, 3, 2);
    let kappa = MultiplierState::new(random_positive_matrix(&mut rng, 3, 3)).unwrap();
    let u = random_stiefel(&mut rng, 3, 2);
    let alpha = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
    let beta = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
    let eta = 1.3;
    let (logz, lse) = log_kernel(&inst, &kappa, eta, &alpha, &beta, &u).unwrap();
    let cu = projected_cost(&inst, &u).unwrap();
    let mut direct_sum = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let phi = alpha[i] + beta[j] + cu[(i, j)];
            let direct = kappa.kappa()[(i, j)] * (-phi / eta).exp();
            assert!((logz[(i, j)].exp() - direct).abs() <= 1e-12 * direct.max(1.0));
            direct_sum += direct;
        }
    }
    assert!((lse.exp() - direct_sum).abs() <= 1e-12 * direct_sum);
}

#[test]
fn normalized_iterate_has_unit_kernel_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let inst = random_instance(&mut rng, 4, 5, 3, 2);
    let kappa = MultiplierState::new(random_positive_matrix(&mut rng, 4, 5)).unwrap();
    let eta = 0.9;
    let u = random_stiefel(&mut rng, 3, 2);
    let alpha = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
    let beta = DVector::from_fn(5, |_, _| rng.random_range(-2.0..2.0));
    let it = DualIterate::from_duals(&inst, &kappa, eta, alpha, beta, u).unwrap();
    let shifted = shift_normalize(&inst, &kappa, eta, &it).unwrap();
    let (_, lse) = log_kernel(
        &inst,
        &kappa,
        eta,
        shifted.alpha(),
        shifted.beta(),
        shifted.projection(),
    )
    .unwrap();
    assert!(lse.abs() <= 1e-12);
    let ra = inst.source_weights().dot(shifted.alpha());
    let cb = inst.target_weights().dot(shifted.beta());
    assert!((ra - cb).abs() <= 1e-10);
}

#[test]
fn plan_uniform_case() {
    let inst = degenerate_instance(2, 2, 2, 1);
    let kappa = MultiplierState::ones(2, 2);
    let u = StiefelPoint::new(DMatrix::identity(2, 1)).unwrap();
    let plan =
        plan_from_duals(&inst, &kappa, 1.0, &DVector::zeros(2), &DVector::zeros(2), &u).unwrap();
    for v in plan.iter() {
        assert!((v - 0.25).abs() <= 1e-15);
    }
}

#[test]
fn plan_invariant_under_opposite_shifts() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let inst = random_instance(&mut rng, 3, 4, 3, 2);
    let kappa = MultiplierState::new(random_positive_matrix(&mut rng, 3, 4)).unwrap();
    let u = random_stiefel(&mut rng, 3, 2);
    let alpha = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
    let beta = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
    let p0 = plan_from_duals(&inst, &kappa, 0.8, &alpha, &beta, &u).unwrap();
    let t = 3.7;
    let p1 = plan_from_duals(
        &inst,
        &kappa,
        0.8,
        &alpha.map(|v| v + t),
        &beta.map(|v| v - t),
        &u,
    )
    .unwrap();
    assert!((p0 - p1).norm() <= 1e-12);
}

#[test]
fn plan_row_residuals_match_independent_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let inst = random_instance(&mut rng, 3, 3, 3, 1);
    let kappa = MultiplierState::new(random_positive_matrix(&mut rng, 3, 3)).unwrap();
    let eta = 1.1;
    let u = random_stiefel(&mut rng, 3, 1);
    let alpha = DVector::from_fn(3, |_, _| rng.random_range(-0.5..0.5));
    let beta = DVector::from_fn(3, |_, _| rng.random_range(-0.5..0.5));
    let plan = plan_from_duals(&inst, &kappa, eta, &alpha, &beta, &u).unwrap();
    let (row_gap, col_gap, e2) = marginal_residuals(&plan, inst.source_weights(), inst.target_weights());

    // Independent route: direct (unstabilized) softmax at moderate values.
    let cu = projected_cost(&inst, &u).unwrap();
    let mut z = DMatrix::zeros(3, 3);
    for i in 0..3 {
        for j in 0..3 {
            z[(i, j)] =
                kappa.kappa()[(i, j)] * (-(alpha[i] + beta[j] + cu[(i, j)]) / eta).exp();
        }
    }
    let mass: f64 = z.iter().sum();
    let mut rg = 0.0;
    let mut cg = 0.0;
    for i in 0..3 {
        rg += (z.row(i).sum() / mass - inst.source_weights()[i]).abs();
    }
    for j in 0..3 {
        cg += (z.column(j).sum() / mass - inst.target_weights()[j]).abs();
    }
    assert!((row_gap - rg).abs() <= 1e-12);
    assert!((col_gap - cg).abs() <= 1e-12);
    assert!((e2 - rg - cg).abs() <= 1e-12);
}

#[test]
fn scatter_of_zero_plan_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let inst = random_instance(&mut rng, 3, 4, 4, 2);
    let u = random_stiefel(&mut rng, 4, 2);
    let out = scatter_times_u(&inst, &DMatrix::zeros(3, 4), &u).unwrap();
    assert_eq!(out.norm(), 0.0);
}

#[test]
fn scatter_matches_explicit_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let inst = random_instance(&mut rng, 3, 3, 4, 2);
    let u = random_stiefel(&mut rng, 4, 2);
    let plan = random_positive_matrix(&mut rng, 3, 3);
    let fast = scatter_times_u(&inst, &plan, &u).unwrap();
    let mut explicit = DMatrix::zeros(4, 2);
    for i in 0..3 {
        for j in 0..3 {
            let diff = inst.source_points().column(i) - inst.target_points().column(j);
            explicit += (&diff * diff.transpose()) * u.matrix() * plan[(i, j)];
        }
    }
    assert!((fast - &explicit).norm() <= 1e-10 * explicit.norm().max(1.0));
}

#[test]
fn scatter_point_mass_is_single_outer_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let inst = random_instance(&mut rng, 3, 3, 4, 2);
    let u = random_stiefel(&mut rng, 4, 2);
    let mut plan = DMatrix::zeros(3, 3);
    plan[(1, 2)] = 1.0;
    let fast = scatter_times_u(&inst, &plan, &u).unwrap();
    let diff = inst.source_points().column(1) - inst.target_points().column(2);
    let expect = (&diff * diff.transpose()) * u.matrix();
    assert!((fast - expect).norm() <= 1e-12);
}

#[test]
fn scatter_matrix_action_agrees_with_fast_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let inst = random_instance(&mut rng, 4, 5, 3, 2);
    let u = random_stiefel(&mut rng, 3, 2);
    let plan = random_positive_matrix(&mut rng, 4, 5);
    let v = scatter_matrix(&inst, &plan).unwrap();
    assert!((&v - v.transpose()).norm() <= 1e-12);
    let action = &v * u.matrix();
    let fast = scatter_times_u(&inst, &plan, &u).unwrap();
    assert!((action - fast).norm() <= 1e-10);
}

#[test]
fn grad_of_zero_plan_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let inst = random_instance(&mut rng, 3, 3, 4, 2);
    let u = random_stiefel(&mut rng, 4, 2);
    let (grad, e1) = riemannian_grad(&inst, &DMatrix::zeros(3, 3), &u).unwrap();
    assert_eq!(grad.norm(), 0.0);
    assert_eq!(e1, 0.0);
}

#[test]
fn grad_projection_matches_complement_form() {
    // UᵀVU is symmetric for the scatter matrix, so the general projection
    // G − U·sym(UᵀG) coincides with (I − UUᵀ)G on these gradients.
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let inst = random_instance(&mut rng, 4, 4, 5, 2);
    let u = random_stiefel(&mut rng, 5, 2);
    let plan = random_positive_matrix(&mut rng, 4, 4);
    let g = scatter_times_u(&inst, &plan, &u).unwrap() * -2.0;
    let (grad, _) = riemannian_grad(&inst, &plan, &u).unwrap();
    let complement = &g - u.matrix() * (u.matrix().tr_mul(&g));
    assert!((grad.matrix() - complement).norm() <= 1e-12 * g.norm().max(1.0));
}

#[test]
fn grad_matches_finite_differences_of_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let inst = random_instance(&mut rng, 4, 5, 4, 2);
    let kappa = MultiplierState::new(random_positive_matrix(&mut rng, 4, 5)).unwrap();
    let eta = 0.8;
    let u = random_stiefel(&mut rng, 4, 2);
    let alpha = DVector::from_fn(4, |_, _| rng.random_range(-0.5..0.5));
    let beta = DVector::from_fn(5, |_, _| rng.random_range(-0.5..0.5));
    let plan = plan_from_duals(&inst, &kappa, eta, &alpha, &beta, &u).unwrap();
    let (grad, _) = riemannian_grad(&inst, &plan, &u).unwrap();
    let h = 1e-6;
    for _ in 0..20 {
        let dir = tangent_project(&u, &random_matrix(&mut rng, 4, 2)).unwrap();
        let dir = dir.scaled(1.0 / dir.norm());
        let up = qr_retraction(&u, &dir.scaled(h)).unwrap();
        let dn = qr_retraction(&u, &dir.scaled(-h)).unwrap();
        let lp = lagrangian_value(&inst, &kappa, eta, &alpha, &beta, &up).unwrap();
        let ln_ = lagrangian_value(&inst, &kappa, eta, &alpha, &beta, &dn).unwrap();
        let fd = (lp - ln_) / (2.0 * h);
        let an = grad.matrix().dot(dir.matrix());
        assert!(
            (fd - an).abs() <= 1e-5 * an.abs().max(1e-3),
            "fd {fd} vs analytic {an}"
        );
    }
}

#[test]
fn residuals_of_feasible_plan_vanish() {
    let r = DVector::from_vec(vec![0.4, 0.6]);
    let c = DVector::from_vec(vec![0.5, 0.5]);
    let plan = &r * c.transpose();
    let (rg, cg, e2) = marginal_residuals(&plan, &r, &c);
    assert!(rg <= 1e-15 && cg <= 1e-15 && e2 <= 1e-15);
}

#[test]
fn residuals_hand_computed_case() {
    let plan = DMatrix::from_row_slice(
        3,
        3,
        &[0.2, 0.0, 0.1, 0.0, 0.3, 0.0, 0.1, 0.0, 0.3],
    );
    let r = DVector::from_vec(vec![0.3, 0.3, 0.4]);
    let c = DVector::from_vec(vec![0.3, 0.3, 0.4]);
    // Row sums (0.3, 0.3, 0.4) match exactly; column sums (0.3, 0.3, 0.4) too.
    let (rg, cg, _) = marginal_residuals(&plan, &r, &c);
    assert!(rg <= 1e-15 && cg <= 1e-15);
    // Perturb one entry: row 0 and column 2 each move by 0.05.
    let mut p2 = plan.clone();
    p2[(0, 2)] += 0.05;
    let (rg, cg, e2) = marginal_residuals(&p2, &r, &c);
    assert!((rg - 0.05).abs() <= 1e-15);
    assert!((cg - 0.05).abs() <= 1e-15);
    assert!((e2 - 0.1).abs() <= 1e-15);
}

#[test]
fn lagrangian_direct_summation_2x2() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let inst = random_instance(&mut rng, 2, 2, 3, 1);
    let kappa = MultiplierState::new(random_positive_matrix(&mut rng, 2, 2)).unwrap();
    let u = random_stiefel(&mut rng, 3, 1);
    let alpha = DVector::from_vec(vec![0.3, -0.2]);
    let beta = DVector::from_vec(vec![0.1, 0.4]);
    let eta = 1.0;
    let val = lagrangian_value(&inst, &kappa, eta, &alpha, &beta, &u).unwrap();
    let cu = projected_cost(&inst, &u).unwrap();
    let mut total = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            total += kappa.kappa()[(i, j)] * (-(alpha[i] + beta[j] + cu[(i, j)])).exp();
        }
    }
    let direct = inst.source_weights().dot(&alpha) + inst.target_weights().dot(&beta)
        + total.ln();
    assert!((val - direct).abs() <= 1e-12 * direct.abs().max(1.0));
}

#[test]
fn lagrangian_at_normalized_iterate_is_twice_alpha_part() {
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    let inst = random_instance(&mut rng, 3, 4, 3, 2);
    let kappa = MultiplierState::new(random_positive_matrix(&mut rng, 3, 4)).unwrap();
    let eta = 0.6;
    let u = random_stiefel(&mut rng, 3, 2);
    let alpha = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
    let beta = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
    let it = DualIterate::from_duals(&inst, &kappa, eta, alpha, beta, u).unwrap();
    let shifted = shift_normalize(&inst, &kappa, eta, &it).unwrap();
    let val = lagrangian_value(
        &inst,
        &kappa,
        eta,
        shifted.alpha(),
        shifted.beta(),
        shifted.projection(),
    )
    .unwrap();
    let twice = 2.0 * inst.source_weights().dot(shifted.alpha());
    assert!((val - twice).abs() <= 1e-10 * val.abs().max(1.0));
}

#[test]
fn shift_normalize_is_idempotent_and_preserves_value_and_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(39);
    let inst = random_instance(&mut rng, 4, 3, 3, 2);
    let kappa = MultiplierState::new(random_positive_matrix(&mut rng, 4, 3)).unwrap();
    let eta = 1.4;
    let u = random_stiefel(&mut rng, 3, 2);
    let alpha = DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
    let beta = DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
    let it = DualIterate::from_duals(&inst, &kappa, eta, alpha, beta, u).unwrap();

    let v0 = lagrangian_value(&inst, &kappa, eta, it.alpha(), it.beta(), it.projection()).unwrap();
    let (g0, _) = riemannian_grad(&inst, it.plan(), it.projection()).unwrap();
    let s1 = shift_normalize(&inst, &kappa, eta, &it).unwrap();
    let v1 = lagrangian_value(&inst, &kappa, eta, s1.alpha(), s1.beta(), s1.projection()).unwrap();
    let (g1, _) = riemannian_grad(&inst, s1.plan(), s1.projection()).unwrap();
    assert!((v0 - v1).abs() <= 1e-10 * v0.abs().max(1.0));
    assert!((g0.matrix() - g1.matrix()).norm() <= 1e-10 * g0.norm().max(1.0));

    let s2 = shift_normalize(&inst, &kappa, eta, &s1).unwrap();
    assert!((s2.alpha() - s1.alpha()).norm() <= 1e-12);
    assert!((s2.beta() - s1.beta()).norm() <= 1e-12);
}

#[test]
fn shift_normalize_closed_form_on_degenerate_instance() {
    let inst = degenerate_instance(2, 3, 2, 1);
    let kappa = MultiplierState::ones(2, 3);
    let eta = 0.9;
    let u = StiefelPoint::new(DMatrix::identity(2, 1)).unwrap();
    let it = DualIterate::from_duals(
        &inst,
        &kappa,
        eta,
        DVector::zeros(2),
        DVector::zeros(3),
        u,
    )
    .unwrap();
    let s = shift_normalize(&inst, &kappa, eta, &it).unwrap();
    let expect = eta * 6.0_f64.ln() / 2.0;
    assert!(s.alpha().iter().all(|&v| (v - expect).abs() <= 1e-12));
    assert!(s.beta().iter().all(|&v| (v - expect).abs() <= 1e-12));
}

#[test]
fn sinkhorn_single_pair_converges_immediately() {
    let inst = PrwInstance::new(
        DMatrix::from_column_slice(2, 1, &[0.0, 0.0]),
        DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
        DVector::from_element(1, 1.0),
        DVector::from_element(1, 1.0),
        1,
    )
    .unwrap();
    let kappa = MultiplierState::ones(1, 1);
    let u = StiefelPoint::new(DMatrix::identity(2, 1)).unwrap();
    let out = sinkhorn(
        &inst,
        &kappa,
        1.0,
        &DVector::zeros(1),
        &DVector::zeros(1),
        &u,
        SinkhornOptions::new(SinkhornMode::Exp, 1e-12),
    )
    .unwrap();
    assert!(out.converged);
    assert_eq!(out.iters_exp, 1);
    assert!((out.plan[(0, 0)] - 1.0).abs() <= 1e-15);
    assert!(out.row_gap <= 1e-15);
}

#[test]
fn sinkhorn_symmetric_case_is_uniform_after_one_iteration() {
    let inst = degenerate_instance(3, 3, 2, 1);
    let kappa = MultiplierState::ones(3, 3);
    let u = StiefelPoint::new(DMatrix::identity(2, 1)).unwrap();
    let out = sinkhorn(
        &inst,
        &kappa,
        0.5,
        &DVector::zeros(3),
        &DVector::zeros(3),
        &u,
        SinkhornOptions::new(SinkhornMode::Exp, 1e-12),
    )
    .unwrap();
    assert!(out.converged && out.iters_exp == 1);
    for v in out.plan.iter() {
        assert!((v - 1.0 / 9.0).abs() <= 1e-14);
    }
}

#[test]
fn sinkhorn_fixed_point_matches_grid_search_2x2() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let inst = random_instance(&mut rng, 2, 2, 3, 1);
    let kappa = MultiplierState::new(random_positive_matrix(&mut rng, 2, 2)).unwrap();
    let eta = 1.0;
    let u = random_stiefel(&mut rng, 3, 1);
    let out = sinkhorn(
        &inst,
        &kappa,
        eta,
        &DVector::zeros(2),
        &DVector::zeros(2),
        &u,
        SinkhornOptions::new(SinkhornMode::Exp, 1e-13),
    )
    .unwrap();
    assert!(out.converged);

    // Independent oracle: minimize h(π) = ⟨C(U) − η·log κ, π⟩ − ηH(π) over
    // the one-parameter family of the 2×2 transport polytope by grid search
    // with local refinement.
    let cu = projected_cost(&inst, &u).unwrap();
    let a = DMatrix::from_fn(2, 2, |i, j| cu[(i, j)] - eta * kappa.log_kappa()[(i, j)]);
    let r = inst.source_weights();
    let c = inst.target_weights();
    let lo0 = (r[0] + c[0] - 1.0).max(0.0);
    let hi0 = r[0].min(c[0]);
    let h = |t: f64| -> f64 {
        let p = [t, r[0] - t, c[0] - t, 1.0 - r[0] - c[0] + t];
        let aa = [a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]];
        let mut val = 0.0;
        for (pi, ai) in p.iter().zip(aa.iter()) {
            val += pi * ai;
            if *pi > 0.0 {
                val += eta * pi * pi.ln();
            }
        }
        val
    };
    let mut lo = lo0;
    let mut hi = hi0;
    let mut best_t = lo;
    for _ in 0..6 {
        let mut best = f64::INFINITY;
        for s in 0..=2000 {
            let t = lo + (hi - lo) * s as f64 / 2000.0;
            let v = h(t);
            if v < best {
                best = v;
                best_t = t;
            }
        }
        let w = (hi - lo) / 2000.0;
        lo = (best_t - 2.0 * w).max(lo0);
        hi = (best_t + 2.0 * w).min(hi0);
    }
    let oracle = DMatrix::from_row_slice(
        2,
        2,
        &[
            best_t,
            r[0] - best_t,
            c[0] - best_t,
            1.0 - r[0] - c[0] + best_t,
        ],
    );
    assert!(
        (out.plan - oracle).abs().max() <= 1e-6,
        "sinkhorn plan differs from grid-search optimum"
    );
}

#[test]
fn sinkhorn_exp_and_log_agree_on_well_conditioned_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..5 {
        let inst = random_instance(&mut rng, 4, 5, 3, 2);
        let kappa = MultiplierState::new(random_positive_matrix(&mut rng, 4, 5)).unwrap();
        let eta = rng.random_range(0.5..2.0);
        let u = random_stiefel(&mut rng, 3, 2);
        let a0 = DVector::from_fn(4, |_, _| rng.random_range(-0.3..0.3));
        let b0 = DVector::from_fn(5, |_, _| rng.random_range(-0.3..0.3));
        let exp = sinkhorn(
            &inst,
            &kappa,
            eta,
            &a0,
            &b0,
            &u,
            SinkhornOptions::new(SinkhornMode::Exp, 1e-10),
        )
        .unwrap();
        let log = sinkhorn(
            &inst,
            &kappa,
            eta,
            &a0,
            &b0,
            &u,
            SinkhornOptions::new(SinkhornMode::Log, 1e-10),
        )
        .unwrap();
        assert!(!exp.fell_back);
        let l1: f64 = (&exp.plan - &log.plan).iter().map(|v| v.abs()).sum();
        assert!(l1 <= 1e-8, "exp/log plans differ by {l1}");
    }
}

#[test]
fn sinkhorn_column_marginal_exact_and_mass_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let inst = random_instance(&mut rng, 5, 4, 3, 2);
    let kappa = MultiplierState::new(random_positive_matrix(&mut rng, 5, 4)).unwrap();
    let u = random_stiefel(&mut rng, 3, 2);
    let out = sinkhorn(
        &inst,
        &kappa,
        0.7,
        &DVector::zeros(5),
        &DVector::zeros(4),
        &u,
        SinkhornOptions::new(SinkhornMode::Exp, 1e-3),
    )
    .unwrap();
    let (_, col_gap, _) = marginal_residuals(&out.plan, inst.source_weights(), inst.target_weights());
    assert!(col_gap <= 1e-12);
    let mass: f64 = out.plan.iter().sum();
    assert!((mass - 1.0).abs() <= 1e-10);
    assert!(out.log_mass.abs() <= 1e-10);
}

#[test]
fn sinkhorn_trace_satisfies_decrease_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..10 {
        let inst = random_instance(&mut rng, 4, 4, 3, 2);
        let kappa = MultiplierState::new(random_positive_matrix(&mut rng, 4, 4)).unwrap();
        let eta = rng.random_range(0.3..2.0);
        let u = random_stiefel(&mut rng, 3, 2);
        let a0 = DVector::from_fn(4, |_, _| rng.random_range(-0.5..0.5));
        let b0 = DVector::from_fn(4, |_, _| rng.random_range(-0.5..0.5));
        let (out, trace) = sinkhorn_traced(
            &inst,
            &kappa,
            eta,
            &a0,
            &b0,
            &u,
            SinkhornOptions::new(SinkhornMode::Exp, 1e-11),
        )
        .unwrap();
        assert!(out.converged);
        // trace[0] is the warm start; trace[l] for l >= 1 is full iteration l.
        for w in trace.windows(2).skip(1) {
            assert!(w[1].row_gap <= w[0].row_gap + 1e-12, "residual increased");
        }
        for l in 1..trace.len() {
            assert!((trace[l].mass - 1.0).abs() <= 1e-10);
            let decrease = (eta / 2.0)
                * (trace[l - 1].row_gap.powi(2) + trace[l].row_gap.powi(2));
            assert!(
                trace[l].lagrangian
                    <= trace[l - 1].lagrangian - decrease
                        + 1e-9 * trace[l - 1].lagrangian.abs().max(1.0),
                "insufficient decrease at iteration {l}"
            );
        }
    }
}

#[test]
fn sinkhorn_iteration_cap_returns_flagged_iterate() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let inst = random_instance(&mut rng, 6, 6, 3, 2);
    let kappa = MultiplierState::ones(6, 6);
    let u = random_stiefel(&mut rng, 3, 2);
    let mut opts = SinkhornOptions::new(SinkhornMode::Exp, 1e-14);
    opts.max_iters = 1;
    let out = sinkhorn(&inst, &kappa, 0.2, &DVector::zeros(6), &DVector::zeros(6), &u, opts)
        .unwrap();
    assert!(!out.converged);
    assert_eq!(out.iters_exp, 1);
}

#[test]
fn sinkhorn_exp_overflow_falls_back_to_log() {
    // Warm-start potentials large enough that exp(−α/η) overflows; the log
    // formulation absorbs them through the max shift.
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let inst = random_instance(&mut rng, 3, 3, 3, 2);
    let kappa = MultiplierState::ones(3, 3);
    let u = random_stiefel(&mut rng, 3, 2);
    let a0 = DVector::from_element(3, -1.0e6);
    let out = sinkhorn(
        &inst,
        &kappa,
        1.0,
        &a0,
        &DVector::zeros(3),
        &u,
        SinkhornOptions::new(SinkhornMode::Exp, 1e-9),
    )
    .unwrap();
    assert!(out.fell_back);
    assert!(out.converged);
    assert!(out.iters_log > 0);
    let (_, col_gap, _) =
        marginal_residuals(&out.plan, inst.source_weights(), inst.target_weights());
    assert!(col_gap <= 1e-12);
}

#[test]
fn certificate_zero_on_coincident_singleton() {
    let inst = PrwInstance::new(
        DMatrix::from_column_slice(2, 1, &[0.7, -0.1]),
        DMatrix::from_column_slice(2, 1, &[0.7, -0.1]),
        DVector::from_element(1, 1.0),
        DVector::from_element(1, 1.0),
        1,
    )
    .unwrap();
    let kappa = MultiplierState::ones(1, 1);
    let u = StiefelPoint::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
    let it = DualIterate::from_duals(
        &inst,
        &kappa,
        1.0,
        DVector::zeros(1),
        DVector::zeros(1),
        u,
    )
    .unwrap();
    let rounded = round_plan(it.plan(), inst.source_weights(), inst.target_weights()).unwrap();
    let cert = stationarity_certificate(&inst, &kappa, 1.0, &it, &rounded).unwrap();
    assert_eq!(cert.e1, 0.0);
    assert_eq!(cert.e2, 0.0);
    assert_eq!(cert.e1_rounded, 0.0);
    assert_eq!(cert.complementarity, 0.0);
    assert_eq!(cert.grad_bound, 0.0);
    assert_eq!(cert.gap_bound, 0.0);
    assert_eq!(cert.primal_value, 0.0);
    assert!(cert.holds(0.0));
}

#[test]
fn z_matrix_is_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    for _ in 0..10 {
        let inst = random_instance(&mut rng, 4, 5, 3, 2);
        let u = random_stiefel(&mut rng, 3, 2);
        let alpha = DVector::from_fn(4, |_, _| rng.random_range(-5.0..5.0));
        let beta = DVector::from_fn(5, |_, _| rng.random_range(-5.0..5.0));
        let z = z_matrix(&inst, &alpha, &beta, &u).unwrap();
        assert!(z.iter().all(|&v| v >= 0.0));
        assert!(z.iter().any(|&v| v == 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_unit_mass_plan_has_e2_at_most_four(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..7);
        let m = rng.random_range(1..7);
        let mut plan = DMatrix::from_fn(n, m, |_, _| rng.random_range(0.0..1.0));
        let mass: f64 = plan.iter().sum();
        plan /= mass;
        let r = random_simplex(&mut rng, n);
        let c = random_simplex(&mut rng, m);
        let (_, _, e2) = marginal_residuals(&plan, &r, &c);
        prop_assert!(e2 <= 4.0 + 1e-12);
    }

    #[test]
    fn softmax_plan_mass_is_one(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 3, 4, 3, 1);
        let kappa = MultiplierState::new(random_positive_matrix(&mut rng, 3, 4)).unwrap();
        let u = random_stiefel(&mut rng, 3, 1);
        let alpha = DVector::from_fn(3, |_, _| rng.random_range(-30.0..30.0));
        let beta = DVector::from_fn(4, |_, _| rng.random_range(-30.0..30.0));
        let eta = rng.random_range(0.05..5.0);
        let plan = plan_from_duals(&inst, &kappa, eta, &alpha, &beta, &u).unwrap();
        let mass: f64 = plan.iter().sum();
        prop_assert!((mass - 1.0).abs() <= 1e-10);
        prop_assert!(plan.iter().all(|&v| v > 0.0));
    }
}
