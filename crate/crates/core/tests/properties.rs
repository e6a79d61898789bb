use num_complex::Complex64 as C;
use proptest::prelude::*;

use qtm_core::linalg::{DenseMatrix, DenseVector};
use qtm_core::ode::{FnRhs, Method, OdeConfig, OdeSolver};
use qtm_core::operators::{effective_generator, lindblad_rhs, OperatorSet};

fn entries(len: usize, scale: f64) -> impl Strategy<Value = Vec<C>> {
    prop::collection::vec((-scale..scale, -scale..scale).prop_map(|(re, im)| C::new(re, im)), len)
}

fn matrix(n: usize, scale: f64) -> impl Strategy<Value = DenseMatrix> {
    entries(n * n, scale).prop_map(move |d| DenseMatrix::from_row_major(n, d).unwrap())
}

fn integer_matrix(n: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec((-8i8..=8, -8i8..=8).prop_map(|(re, im)| C::new(re.into(), im.into())), n * n)
        .prop_map(move |d| DenseMatrix::from_row_major(n, d).unwrap())
}

fn pair(max_n: usize) -> impl Strategy<Value = (DenseMatrix, DenseMatrix)> {
    (1..=max_n).prop_flat_map(|n| (matrix(n, 1.0), matrix(n, 1.0)))
}

fn rel_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.max_abs_diff(b) / a.frobenius_norm().max(b.frobenius_norm()).max(1e-300)
}

fn hermitian(n: usize) -> impl Strategy<Value = DenseMatrix> {
    matrix(n, 1.0).prop_map(|m| m.add(&m.dagger()).unwrap().scale_real(0.5))
}

/// Random density-like Hermitian matrix with a system of the same dimension.
fn open_system(max_n: usize) -> impl Strategy<Value = (OperatorSet, DenseMatrix)> {
    (1..=max_n).prop_flat_map(|n| {
        (hermitian(n), prop::collection::vec(matrix(n, 1.0), 0..3), hermitian(n))
            .prop_map(|(h, c, rho)| (OperatorSet::new(h, c, vec![]).unwrap(), rho))
    })
}

proptest! {
    #[test]
    fn dagger_is_an_involution(m in (1usize..8).prop_flat_map(|n| matrix(n, 10.0))) {
        prop_assert_eq!(m.dagger().dagger(), m);
    }

    #[test]
    fn adjoint_of_product_reverses_order((a, b) in pair(8)) {
        let lhs = a.matmul(&b).unwrap().dagger();
        let rhs = b.dagger().matmul(&a.dagger()).unwrap();
        prop_assert!(rel_diff(&lhs, &rhs) <= 1e-12);
    }

    // Gaussian-integer entries keep every product exact, so the two groupings
    // must agree entry for entry.
    #[test]
    fn tensor_is_associative(
        (a, b, c) in (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(i, j, k)| (integer_matrix(i), integer_matrix(j), integer_matrix(k)))
    ) {
        prop_assert_eq!(a.tensor(&b).tensor(&c), a.tensor(&b.tensor(&c)));
    }

    #[test]
    fn spmv_agrees_with_dense_matvec(
        (m, v) in (2usize..=64).prop_flat_map(|n| (
            prop::collection::vec(prop::option::weighted(0.3, (-1.0..1.0, -1.0..1.0)), n * n)
                .prop_map(move |d| {
                    let d = d.into_iter().map(|x| x.map_or(C::new(0.0, 0.0), |(re, im)| C::new(re, im))).collect();
                    DenseMatrix::from_row_major(n, d).unwrap()
                }),
            entries(n, 1.0).prop_map(|d| DenseVector::new(d).unwrap()),
        ))
    ) {
        let dense = m.matvec(&v).unwrap();
        let sparse = m.to_csr(0.0).unwrap().spmv(&v).unwrap();
        let scale = dense.norm_sq().sqrt().max(1.0);
        for (x, y) in dense.iter().zip(sparse.iter()) {
            prop_assert!((x - y).norm() <= 1e-13 * scale);
        }
    }

    #[test]
    fn expm_of_negation_is_the_inverse(m in (1usize..7).prop_flat_map(|n| matrix(n, 1.0))) {
        let norm = m.frobenius_norm();
        let a = if norm > 2.0 { m.scale_real(2.0 / norm) } else { m };
        let prod = a.expm().unwrap().matmul(&a.scale_real(-1.0).expm().unwrap()).unwrap();
        let id = DenseMatrix::identity(a.dim()).unwrap();
        prop_assert!(prod.sub(&id).unwrap().frobenius_norm() <= 1e-10);
    }

    #[test]
    fn norm_is_phase_invariant(v in (1usize..32).prop_flat_map(|n| entries(n, 5.0)), phase in 0.0..std::f64::consts::TAU) {
        let v = DenseVector::new(v).unwrap();
        let w = v.scale(C::from_polar(1.0, phase));
        prop_assert!((v.norm_sq() - w.norm_sq()).abs() <= 1e-14 * v.norm_sq().max(1.0));
    }

    #[test]
    fn generator_anti_hermitian_part_is_the_decay_sum((ops, _) in open_system(6)) {
        let g = effective_generator(&ops).unwrap().g.to_dense();
        let sum = g.add(&g.dagger()).unwrap();
        let decay = ops.decay_sum().unwrap().scale_real(-1.0);
        prop_assert!(sum.max_abs_diff(&decay) <= 1e-13 * decay.frobenius_norm().max(1.0));
    }

    #[test]
    fn lindblad_preserves_hermiticity_and_trace((ops, rho) in open_system(6)) {
        let out = lindblad_rhs(&ops, &rho).unwrap();
        let scale = out.frobenius_norm().max(1.0);
        prop_assert!(out.max_abs_diff(&out.dagger()) <= 1e-13 * scale);
        prop_assert!(out.trace().norm() <= 1e-12 * scale);
    }
}

/// Global error of a run: the largest deviation from e^{-t} over a 20-point
/// output grid on (0, 1].
fn decay_error(method: Method, rtol: f64) -> f64 {
    let f = FnRhs(|_t: f64, y: &[C], dy: &mut [C]| dy[0] = -y[0]);
    let cfg = OdeConfig::new(method).with_tolerances(rtol, 1e-12);
    let mut s = OdeSolver::new(cfg, f, 0.0, &[C::new(1.0, 0.0)]).unwrap();
    (1..=20)
        .map(|k| {
            let t = k as f64 / 20.0;
            (s.advance_to(t).unwrap()[0] - C::new((-t).exp(), 0.0)).norm()
        })
        .fold(0.0, f64::max)
}

#[test]
fn global_error_is_proportional_to_tolerance() {
    for method in [Method::Adams, Method::Bdf] {
        let ratio = decay_error(method, 1e-5) / decay_error(method, 1e-8);
        assert!(ratio >= 100.0, "{method:?}: {ratio}");
    }
}

#[test]
#[ignore = "global error on this problem is 20-70x rtol for both methods, so the gap exceeds 10*(rtol+atol)"]
fn adams_and_bdf_agree_on_rotation() {
    let (rtol, atol) = (1e-7, 1e-12);
    let solve = |method| {
        let f = FnRhs(|_t: f64, y: &[C], dy: &mut [C]| dy[0] = y[0] * C::i());
        let cfg = OdeConfig::new(method).with_tolerances(rtol, atol);
        let mut s = OdeSolver::new(cfg, f, 0.0, &[C::new(1.0, 0.0)]).unwrap();
        s.advance_to(std::f64::consts::TAU).unwrap()[0]
    };
    let gap = (solve(Method::Adams) - solve(Method::Bdf)).norm();
    assert!(gap <= 10.0 * (rtol + atol), "{gap}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    #[ignore = "measured drift is 14-150x rtol on random generators; per-step error control does not bound it by 10x rtol"]
    fn anti_hermitian_flow_keeps_the_norm(
        (h, psi) in (2usize..6).prop_flat_map(|n| (hermitian(n), entries(n, 1.0))),
        bdf in any::<bool>(),
    ) {
        let rtol = 1e-7;
        let g = h.scale(C::new(0.0, -1.0)).to_csr(0.0).unwrap();
        let psi = DenseVector::new(psi).unwrap().normalized();
        let f = FnRhs(move |_t: f64, y: &[C], dy: &mut [C]| g.spmv_into(y, dy));
        let method = if bdf { Method::Bdf } else { Method::Adams };
        let cfg = OdeConfig::new(method).with_tolerances(rtol, 1e-12);
        let mut s = OdeSolver::new(cfg, f, 0.0, psi.as_slice()).unwrap();
        let mut last = s.stats();
        for k in 1..=20 {
            let y = s.advance_to(0.5 * k as f64).unwrap();
            prop_assert!((y.norm_sq() - 1.0).abs() < 10.0 * rtol, "t = {}: {}", 0.5 * k as f64, y.norm_sq());
            let now = s.stats();
            prop_assert!(now.steps >= last.steps && now.rhs_evals >= last.rhs_evals);
            prop_assert!(now.error_test_failures >= last.error_test_failures);
            last = now;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn statistics_never_decrease(
        (h, psi) in (2usize..6).prop_flat_map(|n| (hermitian(n), entries(n, 1.0))),
        bdf in any::<bool>(),
    ) {
        let g = h.scale(C::new(0.0, -1.0)).to_csr(0.0).unwrap();
        let f = FnRhs(move |_t: f64, y: &[C], dy: &mut [C]| g.spmv_into(y, dy));
        let method = if bdf { Method::Bdf } else { Method::Adams };
        let mut s = OdeSolver::new(OdeConfig::new(method), f, 0.0, &psi).unwrap();
        let mut last = (s.t(), s.stats());
        for _ in 0..60 {
            s.step().unwrap();
            let now = (s.t(), s.stats());
            prop_assert!(now.0 > last.0);
            prop_assert!(now.1.steps == last.1.steps + 1 && now.1.rhs_evals > last.1.rhs_evals);
            prop_assert!(now.1.error_test_failures >= last.1.error_test_failures);
            prop_assert!(now.1.convergence_failures >= last.1.convergence_failures);
            prop_assert!(now.1.jacobian_evals >= last.1.jacobian_evals);
            last = now;
        }
    }
}
