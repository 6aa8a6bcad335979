use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attribution::log_prob;
use crate::autodiff::{graph_fn, hvp, Graph};
use crate::models::{as_row, attention::attention_values, Activation, AttentionKind, AttentionStack, Classifier, ModelSpec};

fn dm(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn eigenvalues(t: &Tensor) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(dm(t)).eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn power_iteration_on_quadratic_surrogates() {
    let x = Tensor::vector(vec![0.3, -0.7]);
    let iso = graph_fn(|_, v| Ok(v.norm_sq().scale(0.5)));
    let r = power_iteration(|v| hvp(iso, &x, v), &[2], POWER_MAX_ITERS, POWER_TOL).unwrap();
    assert!((r.value - 1.0).abs() < 1e-12);
    let d = Tensor::vector(vec![1.0, 4.0]);
    let aniso = graph_fn(|g, v| Ok(v.square().mul(g.leaf(d.clone()))?.sum().scale(0.5)));
    let r = power_iteration(|v| hvp(aniso, &x, v), &[2], POWER_MAX_ITERS, POWER_TOL).unwrap();
    assert!(r.converged);
    assert!((r.value - 4.0).abs() < 1e-6);
    assert!(r.vector.data()[1].abs() > 1.0 - 1e-6);
}

#[test]
fn lambda_max_matches_finite_difference_hessian() {
    let m = Model::init(ModelSpec::mlp(6, &[8, 8], 3, Activation::Softplus(1.0)), 3).unwrap();
    for seed in 0..3 {
        let x = randn(&[6], 10 + seed);
        let class = target_class(&m, &x).unwrap();
        let f = |t: &Tensor| -m.logit_bundle(t).unwrap().l.data()[class];
        let h = 1e-4;
        let mut hess = vec![0.0; 36];
        for i in 0..6 {
            for j in 0..6 {
                let shift = |si: f64, sj: f64| {
                    let mut p = x.clone();
                    p.data_mut()[i] += si * h;
                    p.data_mut()[j] += sj * h;
                    f(&p)
                };
                hess[i * 6 + j] = (shift(1.0, 1.0) - shift(1.0, -1.0) - shift(-1.0, 1.0) + shift(-1.0, -1.0)) / (4.0 * h * h);
            }
        }
        let ev = eigenvalues(&Tensor::matrix(6, 6, hess).unwrap());
        let oracle = ev.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let r = input_hessian_lambda_max(&m, &x, class).unwrap();
        assert!((r.value - oracle).abs() / oracle < 1e-4, "{} vs {oracle} {ev:?} {} {}", r.value, r.iterations, r.converged);
    }
}

#[test]
fn linear_model_has_no_residual_curvature() {
    let m = Model::init(ModelSpec::mlp(4, &[], 3, Activation::Relu), 2).unwrap();
    let x = randn(&[4], 1);
    let d = gn_decomposition_input(&m, &x, 0).unwrap();
    assert_eq!(d.f.max_abs(), 0.0);
    assert!(d.h.sub(&d.g).unwrap().max_abs() < 1e-15);
}

#[test]
fn tanh_net_decomposes_in_both_spaces() {
    let m = Model::init(ModelSpec::mlp(3, &[3], 2, Activation::Tanh), 7).unwrap();
    assert_eq!(m.num_params(), 20);
    for seed in 0..5 {
        let x = randn(&[3], seed);
        for d in [gn_decomposition_params(&m, &x, 1).unwrap(), gn_decomposition_input(&m, &x, 0).unwrap()] {
            assert!(d.max_err < 1e-8, "{}", d.max_err);
            assert!(eigenvalues(&d.g)[0] >= -1e-10);
        }
    }
    let big = Model::init(ModelSpec::mlp(3, &[20], 2, Activation::Tanh), 7).unwrap();
    assert!(matches!(gn_decomposition_params(&big, &randn(&[3], 0), 0), Err(Error::TooLarge { .. })));
}

#[test]
fn gn_trace_of_zero_network_is_zero() {
    let mut m = Model::init(ModelSpec::mlp(3, &[4], 2, Activation::Relu), 0).unwrap();
    for p in m.params.iter_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    let batch = randn(&[4, 3], 2);
    let t = param_gn_trace(&m, &batch, OutputCurvature::CrossEntropy, TraceMethod::Exact).unwrap();
    // only the output bias moves the logits at zero weights
    let dense: f64 = (0..4)
        .map(|b| {
            let x = Tensor::vector(batch.row_slice(b).to_vec());
            let d = gn_decomposition_params(&m, &x, 0).unwrap();
            (0..d.g.rows()).map(|i| d.g.at(i, i)).sum::<f64>()
        })
        .sum::<f64>()
        / 4.0;
    assert!((t - dense).abs() < 1e-14);
    assert!((t - 0.5).abs() < 1e-15);
}

#[test]
fn hutchinson_agrees_with_dense_trace() {
    let m = Model::init(ModelSpec::mlp(3, &[4], 5, Activation::Gelu), 5).unwrap();
    assert_eq!(m.num_params(), 41);
    let batch = randn(&[8, 3], 4);
    let exact = param_gn_trace(&m, &batch, OutputCurvature::CrossEntropy, TraceMethod::Exact).unwrap();
    // Rademacher variance of vᵀGv is 2(‖G‖_F² - Σ G_ii²)
    let (mut dense, mut var) = (0.0f64, 0.0f64);
    for b in 0..8 {
        let d = gn_decomposition_params(&m, &Tensor::vector(batch.row_slice(b).to_vec()), 0).unwrap();
        let diag: Vec<f64> = (0..d.g.rows()).map(|i| d.g.at(i, i)).collect();
        dense += diag.iter().sum::<f64>() / 8.0;
        var += 2.0 * (d.g.norm().powi(2) - diag.iter().map(|v| v * v).sum::<f64>()) / 64.0;
    }
    assert!((exact - dense).abs() < 1e-12 * dense.max(1.0));
    for seed in 0..5 {
        let est = param_gn_trace(
            &m,
            &batch,
            OutputCurvature::CrossEntropy,
            TraceMethod::Hutchinson { probes: 256, seed },
        )
        .unwrap();
        assert!((est - dense).abs() <= 3.0 * (var / 256.0).sqrt(), "{est} vs {dense}");
        assert!((est - dense).abs() / dense < 0.05, "{est} vs {dense}");
    }
}

#[test]
fn snr_of_a_linear_layer() {
    let m = Model::init(ModelSpec::mlp(3, &[], 2, Activation::Relu), 9).unwrap();
    let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
    let w = &m.params.get("fc1.weight").unwrap().value;
    let sv = SymmetricEigen::new(dm(w) * dm(w).transpose()).eigenvalues.max();
    let c = snr_c(&m, &x).unwrap();
    assert!((c - x.norm().powi(2) / sv).abs() < 1e-9 * c);
    let c2 = snr_c(&m, &x.scale(2.0)).unwrap();
    assert!((c2 - 4.0 * c).abs() < 1e-9 * c2);
}

#[test]
fn snr_jacobian_norms_match_finite_differences() {
    let m = Model::init(ModelSpec::mlp(4, &[5], 3, Activation::Softplus(1.0)), 1).unwrap();
    let x = randn(&[4], 3);
    let w1 = &m.params.get("fc1.weight").unwrap().value;
    let w2 = &m.params.get("fc2.weight").unwrap().value;
    // FD Jacobian of h_1 = softplus(x W_1 + b_1)
    let hidden = |t: &Tensor| m.evaluate(t).unwrap().1[1].clone();
    let h = 1e-6;
    let mut jac = DMatrix::zeros(5, 4);
    for i in 0..4 {
        let (mut p, mut q) = (x.clone(), x.clone());
        p.data_mut()[i] += h;
        q.data_mut()[i] -= h;
        let d = hidden(&p).sub(&hidden(&q)).unwrap().scale(0.5 / h);
        for r in 0..5 {
            jac[(r, i)] = d.data()[r];
        }
    }
    let jn = jac.singular_values().max();
    let auto = jacobian_norm(
        graph_fn(|g, xv| {
            let params = m.bind(g);
            Ok(m.forward_with(&params, xv, false)?.hidden[1])
        }),
        &as_row(&x).unwrap(),
    )
    .unwrap();
    assert!((auto - jn).abs() / jn < 1e-3);
    let s1 = dm(w1).singular_values().max();
    let s2 = dm(w2).singular_values().max();
    let trace = m.evaluate(&x).unwrap().1;
    let oracle = trace[0].norm().powi(2) / (s1 * s1) + trace[1].norm().powi(2) / (s2 * s2 * jn * jn);
    let c = snr_c(&m, &x).unwrap();
    assert!((c - oracle).abs() / oracle < 1e-3);
}

#[test]
fn uniform_rows_reach_maximum_entropy() {
    for (t, expect, tol) in [(5usize, 5f64.ln(), 1e-12), (196, 5.278, 1e-3), (144, 4.969, 1e-3)] {
        let stack = AttentionStack { layers: vec![vec![Tensor::full(&[t, t], 1.0 / t as f64)]], normalized: true };
        let s = attention_entropy(&stack).unwrap();
        assert!((s.entropy[0] - expect).abs() < tol);
        assert!(s.distance_to_uniform[0].abs() < 1e-10);
    }
    assert!((5.27 - 196f64.ln()).abs() < 0.01);
    assert!((4.97 - 144f64.ln()).abs() < 0.01);
    let bad = AttentionStack { layers: vec![vec![Tensor::eye(3).scale(-1.0)]], normalized: true };
    assert!(matches!(attention_entropy(&bad), Err(Error::Contract(_))));
    assert_eq!(row_entropy(&[1.0, 0.0, 0.0]), 0.0);
}

#[test]
fn sharpening_queries_and_keys_lowers_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..1000 {
        let q = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let k = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let c = 1.0 + rand::Rng::random::<f64>(&mut rng) * 3.0;
        let (_, a) = attention_values(AttentionKind::Softmax, &q, &k, &k).unwrap();
        let (_, ac) = attention_values(AttentionKind::Softmax, &q.scale(c), &k.scale(c), &k).unwrap();
        for r in 0..4 {
            assert!(row_entropy(ac.row_slice(r)) <= row_entropy(a.row_slice(r)) + 1e-12);
        }
    }
}

#[test]
fn vit_entropy_stats_are_bounded() {
    use crate::models::VitSpec;
    let m = Model::init(ModelSpec::vit(1, 8, VitSpec::tiny(AttentionKind::Softmax), 3, Activation::Gelu), 1).unwrap();
    let s = entropy_stats(&m, &randn(&[1, 8, 8], 2)).unwrap();
    assert_eq!(s.tokens, 5);
    assert_eq!(s.sigma.len(), 2);
    for (e, d) in s.entropy.iter().zip(&s.distance_to_uniform) {
        assert!(*e >= 0.0 && *e <= 5f64.ln() + 1e-10);
        assert!(*d >= -1e-10);
    }
    assert!(s.sigma.iter().all(|&v| v > 0.0));
}

#[test]
fn entropy_oracle_limits() {
    let r = entropy_bound_oracle(2, &[0.0, 2f64.ln()], 0.02).unwrap();
    assert!((r.max_deviation[0] - 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(r.max_deviation[1], 0.0);
    let r = entropy_bound_oracle(3, &entropy_grid(3, 20), 0.02).unwrap();
    assert!(r.max_deviation.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(*r.max_deviation.last().unwrap(), 0.0);
    assert!(entropy_bound_oracle(3, &[1.2], 0.02).is_err());
    assert!(entropy_bound_oracle(5, &[0.0], 0.02).is_err());
    assert!(entropy_bound_oracle(3, &[0.0], 0.05).is_err());
}

#[test]
fn entropy_oracle_regression_fixture() {
    // frozen output of the lattice enumeration at T = 3, step 0.02, e = ln 2
    let r = entropy_bound_oracle(3, &[2f64.ln()], 0.02).unwrap();
    assert!((r.max_deviation[0] - T3_LN2_FIXTURE).abs() < 1e-12, "{:.17}", r.max_deviation[0]);
}

const T3_LN2_FIXTURE: f64 = 0.966_643_677_887_565_8;

#[test]
fn principal_curvature_examples() {
    assert_eq!(principal_curvatures(&[2.0, -1.0], 0.0).unwrap(), vec![2.0, -1.0]);
    assert!((principal_curvatures(&[3.0], 3f64.sqrt()).unwrap()[0] - 1.5).abs() < 1e-15);
    assert!(principal_curvatures(&[1.0], -1.0).is_err());
}

proptest! {
    #[test]
    fn curvatures_never_exceed_spectral_radius(l in prop::collection::vec(-50.0f64..50.0, 1..8), g in 0.0f64..10.0) {
        let rho = l.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let k = principal_curvatures(&l, g).unwrap();
        prop_assert!(k.iter().all(|v| v.abs() <= rho));
    }
}

#[test]
fn lambda_max_on_a_generic_classifier() {
    let m = crate::models::QuadraticModel::random(3, 2, 1.0, 4);
    let x = randn(&[3], 0);
    let r = input_hessian_lambda_max(&m, &x, 0).unwrap();
    let dense = crate::autodiff::dense_hessian(
        graph_fn(|g: &Graph, v| Ok(log_prob(&m, g, v.reshape(&[1, 3])?, 0, false)?.neg())),
        &x,
    )
    .unwrap();
    let oracle = eigenvalues(&dense).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!((r.value - oracle).abs() / oracle < 1e-6);
    assert_eq!(m.num_classes(), 2);
}
