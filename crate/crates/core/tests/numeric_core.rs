use star_core::numeric::gradcheck::{check, check_all_ops, FD_STEP, REL_TOL};
use star_core::numeric::{BatchNormMode, RunningStats, Tensor, ValueGraph};

#[test]
fn every_op_matches_central_differences() {
    for (name, report) in check_all_ops(100, 11).unwrap() {
        assert!(
            report.passes(REL_TOL),
            "{name}: max rel error {:.3e} at {:?}",
            report.max_rel_error,
            report.worst
        );
        assert!(report.checked >= 100, "{name} checked {}", report.checked);
    }
}

#[test]
fn square_gradient_is_analytic() {
    let mut g = ValueGraph::new();
    let x = g.param("x", Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), Some(6.0));
}

#[test]
fn sigmoid_sum_gradient_at_zero() {
    let mut g = ValueGraph::new();
    let x = g.param("x", Tensor::zeros(&[2, 3]));
    let s = g.sigmoid(x).unwrap();
    assert!(g.value(s).data().iter().all(|&v| v == 0.5));
    let l = g.sum(s).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.25));
}

#[test]
fn l2_normalize_three_four_five() {
    let mut g = ValueGraph::new();
    let x = g.input(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
    let y = g.l2_normalize(x).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
}

#[test]
fn identity_matmul_in_graph() {
    let mut g = ValueGraph::new();
    let i3 = g.input(Tensor::identity(3));
    let x = Tensor::matrix(3, 2, vec![1.0, -2.0, 3.5, 0.0, 7.0, 1.0]).unwrap();
    let xn = g.input(x.clone());
    let y = g.matmul(i3, xn).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut g = ValueGraph::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[4, 2]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 2]"));
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = ValueGraph::new();
    let a = g.param("a", Tensor::zeros(&[2, 2]));
    assert!(g.backward(a).is_err());
}

#[test]
fn log_of_zero_is_an_error_state() {
    let mut g = ValueGraph::new();
    let a = g.input(Tensor::zeros(&[1, 1]));
    assert!(g.log(a).is_err());
}

#[test]
fn repeated_backward_accumulates_exactly() {
    let mut rng = star_core::io_util::rng_from_seed(5);
    let mut g = ValueGraph::new();
    let x = g.input(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let w = g.param("w", Tensor::randn(&[3, 2], 1.0, &mut rng));
    let h = g.matmul(x, w).unwrap();
    let h = g.sigmoid(h).unwrap();
    let l = g.mean(h, None).unwrap();
    g.backward(l).unwrap();
    let once = g.grad(w).unwrap().clone();
    for k in 2..=4 {
        g.backward(l).unwrap();
        let acc = g.grad(w).unwrap();
        for (a, b) in acc.data().iter().zip(once.data()) {
            assert!((a - k as f64 * b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }
    g.zero_grad();
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).unwrap(), &once);
}

#[test]
fn forward_is_bit_deterministic() {
    let build = || {
        let mut rng = star_core::io_util::rng_from_seed(9);
        let mut g = ValueGraph::new();
        let x = g.input(Tensor::randn(&[5, 4], 1.0, &mut rng));
        let w = g.param("w", Tensor::randn(&[4, 4], 1.0, &mut rng));
        let h = g.matmul(x, w).unwrap();
        let h = g.softmax_rows(h).unwrap();
        let h = g.l2_normalize(h).unwrap();
        (g, h)
    };
    let (mut g1, h1) = build();
    let (g2, h2) = build();
    assert_eq!(g1.value(h1), g2.value(h2));
    let before = g1.value(h1).clone();
    g1.forward().unwrap();
    assert_eq!(g1.value(h1), &before);
}

#[test]
fn eval_batch_norm_uses_frozen_stats() {
    let running = RunningStats {
        mean: vec![1.0, -1.0],
        var: vec![4.0, 0.25],
    };
    let x = Tensor::matrix(2, 2, vec![3.0, 0.0, 1.0, -1.0]).unwrap();
    let run = || {
        let mut g = ValueGraph::new();
        let xn = g.input(x.clone());
        let gamma = g.input(Tensor::filled(&[1, 2], 1.0));
        let beta = g.input(Tensor::zeros(&[1, 2]));
        let y = g
            .batch_norm(xn, gamma, beta, BatchNormMode::Eval, running.clone())
            .unwrap();
        g.value(y).clone()
    };
    let a = run();
    assert_eq!(a, run());
    let expected = (3.0 - 1.0) / (4.0f64 + 1e-5).sqrt();
    assert_eq!(a.get(0, 0), expected);
    assert_eq!(a.get(1, 0), 0.0);
}

#[test]
fn running_stats_momentum() {
    let mut r = RunningStats::new(1);
    r.update(&RunningStats {
        mean: vec![10.0],
        var: vec![3.0],
    });
    assert!((r.mean[0] - 1.0).abs() < 1e-12);
    assert!((r.var[0] - (0.9 + 0.3)).abs() < 1e-12);
}

#[test]
fn constants_receive_gradients_but_are_not_params() {
    let mut g = ValueGraph::new();
    let x = g.param("x", Tensor::scalar(2.0));
    let c = g.input(Tensor::scalar(5.0));
    let y = g.mul(x, c).unwrap();
    let report = check(&mut g, y, &[x, c], FD_STEP).unwrap();
    assert!(report.passes(REL_TOL));
    let grads = g.param_grads();
    assert_eq!(grads.len(), 1);
    assert_eq!(grads["x"].item(), Some(5.0));
}

#[test]
fn probes_near_a_kink_shrink_instead_of_straddling() {
    let mut g = ValueGraph::new();
    let x = g.param("x", Tensor::scalar(3e-5));
    let y = g.leaky_relu(x).unwrap();
    let report = check(&mut g, y, &[x], FD_STEP).unwrap();
    assert!(report.step_shrinks >= 1);
    assert_eq!(report.skipped, 0);
    assert!(report.passes(1e-12), "{report:?}");
    assert_eq!(g.branch_signature(), vec![1]);
}

#[test]
fn input_exactly_on_a_kink_is_skipped() {
    let mut g = ValueGraph::new();
    let x = g.param("x", Tensor::scalar(0.0));
    let y = g.leaky_relu(x).unwrap();
    let report = check(&mut g, y, &[x], FD_STEP).unwrap();
    assert_eq!((report.checked, report.skipped), (0, 1));
}

#[test]
fn sharp_curvature_is_resolved_by_step_refinement() {
    // Normalizing a vector of norm ~1e-3 is curved on the scale of the
    // default step, so the first estimate pair disagrees.
    let mut g = ValueGraph::new();
    let v = g.param("v", Tensor::new(vec![1, 3], vec![1e-3, -5e-4, 2e-4]).unwrap());
    let n = g.l2_normalize(v).unwrap();
    let w = g.input(Tensor::new(vec![1, 3], vec![0.3, -1.2, 0.7]).unwrap());
    let p = g.mul(n, w).unwrap();
    let loss = g.sum(p).unwrap();
    let report = check(&mut g, loss, &[v], FD_STEP).unwrap();
    assert!(report.step_shrinks >= 1);
    assert!(report.passes(REL_TOL), "{report:?}");
}

#[test]
fn wrong_gradients_are_still_caught() {
    // Step refinement must not make the check lenient: a 1e-4 relative
    // perturbation of the analytic value has to be visible.
    use star_core::numeric::gradcheck::rel_error;
    let mut g = ValueGraph::new();
    let x = g.param("x", Tensor::scalar(0.7));
    let y = g.exp(x).unwrap();
    let report = check(&mut g, y, &[x], FD_STEP).unwrap();
    let (_, _, analytic, numeric) = report.worst.unwrap();
    assert!(rel_error(analytic, numeric) < 1e-9);
    assert!(rel_error(analytic * (1.0 + 1e-4), numeric) > REL_TOL);
}
