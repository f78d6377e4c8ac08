//! Derivative and trace checks against independent finite-difference and
//! enumeration oracles.

use hessreg::autodiff::{ExprGraph, Objective};
use hessreg::dynamics::{simulate_flow, FlowOptions, Integrator};
use hessreg::estimators::*;
use hessreg::model::{output_hessian_trace, Activation, Batch, MlpLoss, ModelSpec};
use hessreg::params::FlatVector;
use hessreg::problems::Quadratic;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    spec: ModelSpec,
    batch: Batch,
    params: Vec<f64>,
}

impl Fixture {
    fn new(input: usize, hidden: Vec<usize>, classes: usize, activation: Activation, rows: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ModelSpec::new(input, hidden, classes, activation);
        let x = Array2::from_shape_fn((rows, input), |_| rng.random_range(-1.5..1.5));
        let labels = (0..rows).map(|_| rng.random_range(1..=classes)).collect();
        let batch = Batch::new(x, labels, classes).unwrap();
        let params = (0..spec.num_params()).map(|_| rng.random_range(-0.6..0.6)).collect();
        Self { spec, batch, params }
    }

    fn loss(&self) -> MlpLoss<'_> {
        MlpLoss::new(&self.spec, &self.batch).unwrap()
    }
}

fn zoo() -> Vec<Fixture> {
    vec![
        Fixture::new(3, vec![], 2, Activation::Identity, 7, 1),
        Fixture::new(4, vec![5], 3, Activation::Tanh, 9, 2),
        Fixture::new(3, vec![6, 4], 4, Activation::Tanh, 11, 3),
        Fixture::new(5, vec![7, 6], 3, Activation::Relu, 13, 4),
        Fixture::new(2, vec![3, 3, 3], 2, Activation::Tanh, 5, 5),
    ]
}

fn shifted(p: &[f64], d: &[f64], h: f64) -> Vec<f64> {
    p.iter().zip(d).map(|(a, b)| a + h * b).collect()
}

fn fd_gradient<O: Objective>(obj: &O, p: &[f64], h: f64) -> Vec<f64> {
    (0..p.len())
        .map(|i| {
            let mut e = vec![0.0; p.len()];
            e[i] = 1.0;
            (obj.evaluate(&shifted(p, &e, h)).unwrap() - obj.evaluate(&shifted(p, &e, -h)).unwrap()) / (2.0 * h)
        })
        .collect()
}

fn fd_hvp<O: Objective>(obj: &O, p: &[f64], v: &[f64], h: f64) -> Vec<f64> {
    let gp = obj.gradient(&shifted(p, v, h)).unwrap();
    let gm = obj.gradient(&shifted(p, v, -h)).unwrap();
    gp.iter().zip(gm.iter()).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

fn random_direction(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn gradients_match_central_differences() {
    for (k, f) in zoo().iter().enumerate() {
        let obj = f.loss();
        let g = obj.gradient(&f.params).unwrap();
        let fd = fd_gradient(&obj, &f.params, 1e-6);
        assert!(rel_err(&g, &fd) < 1e-6, "fixture {k}: {}", rel_err(&g, &fd));
    }
}

#[test]
fn hvps_match_differences_of_the_gradient() {
    for (k, f) in zoo().iter().enumerate() {
        let obj = f.loss();
        for s in 0..3 {
            let v = random_direction(f.params.len(), 100 + s);
            let hv = obj.hvp(&f.params, &v).unwrap();
            let fd = fd_hvp(&obj, &f.params, &v, 1e-5);
            assert!(rel_err(&hv, &fd) < 1e-5, "fixture {k} dir {s}: {}", rel_err(&hv, &fd));
        }
    }
}

#[test]
fn exact_trace_matches_finite_difference_hessian() {
    let f = Fixture::new(3, vec![4, 3], 3, Activation::Tanh, 10, 7);
    let obj = f.loss();
    let n = f.params.len();
    let h = 1e-5;
    let fd_trace: f64 = (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            fd_hvp(&obj, &f.params, &e, h)[i]
        })
        .sum();
    let exact = exact_trace(&obj, &f.params, OracleGuard::default()).unwrap();
    assert!((exact - fd_trace).abs() <= 1e-4 * fd_trace.abs(), "{exact} vs {fd_trace}");

    let hess = assemble_hessian(&obj, &f.params, OracleGuard::default()).unwrap();
    let diag: f64 = (0..n).map(|i| hess[[i, i]]).sum();
    assert!((diag - exact).abs() < 1e-12 * exact.abs().max(1.0));
    for r in 0..n {
        for c in 0..n {
            assert!((hess[[r, c]] - hess[[c, r]]).abs() < 1e-10);
        }
    }
}

#[test]
fn output_hessian_trace_via_logit_space_hvps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for m in [2usize, 3, 7] {
        for _ in 0..5 {
            let z: Vec<f64> = (0..m).map(|_| rng.random_range(-4.0..4.0)).collect();
            let y = rng.random_range(0..m);
            let mut trace = 0.0;
            for i in 0..m {
                let mut g = ExprGraph::new();
                let zn = g.param(Array2::from_shape_vec((1, m), z.clone()).unwrap());
                let mut onehot = Array2::zeros((1, m));
                onehot[[0, y]] = 1.0;
                let loss = hessreg::model::cross_entropy_node(&mut g, zn, &onehot);
                let gz = g.gradient(loss, &[zn]).unwrap()[0];
                let mut e = Array2::zeros((1, m));
                e[[0, i]] = 1.0;
                let e = g.constant(e);
                let v = g.inner(gz, e);
                let h = g.gradient(v, &[zn]).unwrap()[0];
                trace += g.value(h)[[0, i]];
            }
            assert!((trace - output_hessian_trace(&z)).abs() < 1e-12);
        }
    }
}

#[test]
fn regularized_gradient_is_linear_in_its_terms() {
    let f = Fixture::new(3, vec![5, 4], 3, Activation::Tanh, 8, 9);
    let obj = f.loss();
    let lambda = 0.3;
    let config = EstimatorConfig::seht_h(lambda, 2);
    let mut rec = obj.record(&f.params).unwrap();
    let term = trace_term(&mut rec, obj.registry(), &config, &mut EstimatorRng::for_step(5, 0)).unwrap();
    let t = term.node.unwrap();
    let emp = rec.loss;
    let total = regularized_loss(&mut rec.graph, emp, t, lambda).unwrap();
    let leaves = rec.leaves.clone();
    let nodes = rec.leaf_nodes();
    let n = f.params.len();
    let mut grad_of = |out| {
        let g = rec.graph.gradient(out, &nodes).unwrap();
        rec.flatten(n, &leaves, &g)
    };
    let (ge, gt, gl) = (grad_of(emp), grad_of(t), grad_of(total));
    for i in 0..n {
        assert!((gl[i] - (ge[i] + lambda * gt[i])).abs() <= 1e-8 * (1.0 + gl[i].abs()));
    }

    // Third-order check: the trace term's gradient against differences of
    // the trace term recomputed with the same probes.
    let trace_at = |p: &[f64]| {
        let mut r = obj.record(p).unwrap();
        let tt = trace_term(&mut r, obj.registry(), &config, &mut EstimatorRng::for_step(5, 0)).unwrap();
        r.graph.scalar(tt.node.unwrap())
    };
    let v = random_direction(n, 3);
    let h = 1e-5;
    let fd = (trace_at(&shifted(&f.params, &v, h)) - trace_at(&shifted(&f.params, &v, -h))) / (2.0 * h);
    let analytic = gt.dot(&v);
    assert!((fd - analytic).abs() <= 1e-5 * analytic.abs().max(1.0), "{fd} vs {analytic}");
}

#[test]
fn detached_trace_carries_no_gradient() {
    let f = Fixture::new(3, vec![4], 2, Activation::Tanh, 6, 12);
    let obj = f.loss();
    let config = EstimatorConfig { detach_trace: true, ..EstimatorConfig::seht_h(1.0, 1) };
    let mut rec = obj.record(&f.params).unwrap();
    let term = trace_term(&mut rec, obj.registry(), &config, &mut EstimatorRng::for_step(0, 0)).unwrap();
    let nodes = rec.leaf_nodes();
    let g = rec.graph.gradient(term.node.unwrap(), &nodes).unwrap();
    assert!(g.iter().all(|&id| rec.graph.value(id).iter().all(|&x| x == 0.0)));
}

/// Enumerate all `3ⁿ` Q(p) patterns with their exact probabilities.
fn q_expectation(h: &Array2<f64>, p: f64) -> f64 {
    let n = h.nrows();
    let mut total = 0.0;
    for code in 0..3usize.pow(n as u32) {
        let mut c = code;
        let mut sigma = vec![0.0; n];
        let mut prob = 1.0;
        for s in sigma.iter_mut() {
            *s = [0.0, 1.0, -1.0][c % 3];
            prob *= if *s == 0.0 { 1.0 - 2.0 * p } else { p };
            c /= 3;
        }
        let q: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| sigma[i] * h[[i, j]] * sigma[j]).sum();
        total += prob * q;
    }
    total
}

#[test]
fn unconditional_q_expectation_scales_by_2p() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for n in 1..=6 {
        let b = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        let h = &b + &b.t();
        let tr: f64 = (0..n).map(|i| h[[i, i]]).sum();
        for p in [0.05, 0.2, 0.5] {
            let e = q_expectation(&h, p);
            assert!((e - 2.0 * p * tr).abs() < 1e-10, "n={n} p={p}");
            assert!((e / (2.0 * p) - tr).abs() < 1e-9);
        }
    }
}

#[test]
fn seht_h_converges_on_small_mlp() {
    let f = hessreg::problems::ReferenceMlp::new(0);
    let obj = f.loss();
    let exact = exact_trace(&obj, &f.params, OracleGuard::default()).unwrap();
    let est = seht_h(&obj, &f.params, &EstimatorConfig::seht_h(0.0, 10_000), &mut EstimatorRng::for_step(1, 0)).unwrap();
    assert_eq!(est.sample_count, 10_000);
    assert!((est.mean - exact).abs() <= 0.02 * exact.abs(), "{} vs {exact}", est.mean);
}

#[test]
fn rescaled_seht_d_targets_full_trace() {
    let q = Quadratic::diagonal(&[1.0, 2.0, 3.0, 4.0]);
    let config = EstimatorConfig { rescale_unbiased: true, ..EstimatorConfig::seht_d(0.0, 20_000, 0.25) };
    let config = EstimatorConfig { p1: 1.0, ..config };
    let est = seht_d(&q, &[0.0; 4], &config, &mut EstimatorRng::for_step(2, 0)).unwrap();
    assert!((est.mean - 10.0).abs() < 5.0 * est.standard_error(), "{} ± {}", est.mean, est.standard_error());
    let raw = EstimatorConfig { rescale_unbiased: false, ..config };
    let est = seht_d(&q, &[0.0; 4], &raw, &mut EstimatorRng::for_step(2, 0)).unwrap();
    assert!((est.mean - 5.0).abs() < 5.0 * est.standard_error());
}

#[test]
fn sparse_estimator_is_cheaper() {
    let f = Fixture::new(8, vec![32, 32], 4, Activation::Tanh, 64, 17);
    let obj = f.loss();
    let time = |config: &EstimatorConfig| {
        let mut t: Vec<f64> = (0..20)
            .map(|s| estimate(&obj, &f.params, config, &mut EstimatorRng::for_step(3, s)).unwrap().wall_time)
            .collect();
        t.sort_by(f64::total_cmp);
        t[10]
    };
    let d = time(&EstimatorConfig::seht_d(0.0, 4, 0.01));
    let h = time(&EstimatorConfig::seht_h(0.0, 4));
    assert!(d < h, "seht_d {d} vs seht_h {h}");
}

#[test]
fn rk4_error_is_fourth_order() {
    let q = Quadratic::diagonal(&[1.0]);
    let err = |dt: f64| {
        let mut opts = FlowOptions::new(1.0, dt, Integrator::Rk4);
        opts.equilibrium_tol = 0.0;
        let traj = simulate_flow(&q, FlatVector(vec![1.0]), &opts).unwrap();
        (traj.last().params[0] - (-1f64).exp()).abs()
    };
    let (e1, e2) = (err(0.2), err(0.1));
    assert!(e1 / e2 >= 8.0, "ratio {}", e1 / e2);
    let euler = |dt: f64| {
        let mut opts = FlowOptions::new(1.0, dt, Integrator::Euler);
        opts.equilibrium_tol = 0.0;
        (simulate_flow(&q, FlatVector(vec![1.0]), &opts).unwrap().last().params[0] - (-1f64).exp()).abs()
    };
    let ratio = euler(0.02) / euler(0.01);
    assert!((1.8..2.2).contains(&ratio), "euler ratio {ratio}");
}

#[test]
fn eigenvalues_sum_to_flatness() {
    let f = Fixture::new(2, vec![3], 2, Activation::Tanh, 6, 19);
    let obj = f.loss();
    let r = hessreg::dynamics::stability_report(&obj, &f.params, OracleGuard::default()).unwrap();
    let sum: f64 = r.eigenvalues_real.iter().sum();
    assert!((sum + r.flatness).abs() < 1e-9);
    let exact = exact_trace(&obj, &f.params, OracleGuard::default()).unwrap();
    assert!((exact - r.flatness).abs() < 1e-12);
}

fn prop_fixture() -> Fixture {
    Fixture::new(3, vec![4, 3], 3, Activation::Tanh, 6, 31)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hvp_is_symmetric(su in 0u64..1000, sv in 0u64..1000) {
        let f = prop_fixture();
        let obj = f.loss();
        let n = f.params.len();
        let (u, v) = (random_direction(n, su), random_direction(n, sv + 5000));
        let hu = obj.hvp(&f.params, &u).unwrap();
        let hv = obj.hvp(&f.params, &v).unwrap();
        let (a, b) = (hu.dot(&v), hv.dot(&u));
        prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
    }

    #[test]
    fn hvp_is_linear(su in 0u64..1000, sv in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let f = prop_fixture();
        let obj = f.loss();
        let n = f.params.len();
        let (u, v) = (random_direction(n, su), random_direction(n, sv + 5000));
        let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let lhs = obj.hvp(&f.params, &mix).unwrap();
        let hu = obj.hvp(&f.params, &u).unwrap();
        let hv = obj.hvp(&f.params, &v).unwrap();
        for i in 0..n {
            let rhs = a * hu[i] + b * hv[i];
            prop_assert!((lhs[i] - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn exhaustive_average_is_trace(seed in 0u64..10_000, n in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Array2::from_shape_fn((n, n), |_| rng.random_range(-2.0..2.0));
        let h = &b + &b.t();
        let tr: f64 = (0..n).map(|i| h[[i, i]]).sum();
        let q = Quadratic::new(h.clone()).unwrap();
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        let partial: f64 = (0..n).filter(|&i| mask[i]).map(|i| h[[i, i]]).sum();
        let full = exhaustive_hutchinson(&q, &vec![0.0; n], &vec![true; n]).unwrap();
        prop_assert!((full.mean - tr).abs() < 1e-10);
        let masked = exhaustive_hutchinson(&q, &vec![0.0; n], &mask).unwrap();
        prop_assert!((masked.mean - partial).abs() < 1e-10);
    }

    #[test]
    fn samples_are_sign_invariant(seed in 0u64..1000) {
        let f = prop_fixture();
        let obj = f.loss();
        let n = f.params.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_rademacher(n, &mut rng).unwrap().to_f64();
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let mut session = hessreg::HvpSession::new(&obj, &f.params, None).unwrap();
        prop_assert_eq!(session.quadratic_form(&s).unwrap(), session.quadratic_form(&neg).unwrap());
    }
}
