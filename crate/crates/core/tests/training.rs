mod common;

use cbnn::corrgauss::{reparam_rho, reparam_tau, DELTA_FLOOR};
use cbnn::data::synthetic_blobs;
use cbnn::layers::{softmax, LayerKind};
use cbnn::net::{
    lvi_minibatch_loss, train, Architecture, Checkpoint, LayerNoise, LayerParams, LayerSpec,
    LossParams, Mode, Network, NoiseSpec, Schedule, TrainConfig,
};
use cbnn::predict::{evaluate, posterior_predictive, predictive_samples};
use cbnn::rng::{keyed, standard_normals, Purpose};
use cbnn::tensor::{Batch, Shape};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn blob_config(iterations: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        iterations,
        base_lr: 0.05,
        schedule: Schedule::Fixed,
        test_every: 0,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_blobs_are_learned() {
    let data = synthetic_blobs(2, 300, 4, 6.0, 1).unwrap();
    let test = synthetic_blobs(2, 300, 4, 6.0, 2).unwrap();
    for mode in [Mode::Bayes, Mode::Freq] {
        let net = Network::init(Architecture::mlp(Shape::flat(4), &[8], 2), mode, 5).unwrap();
        let mut ck = Checkpoint::new(net, 5);
        let rows = train(&mut ck, &data, None, &blob_config(2000), |_| {}).unwrap();
        let tail: f64 = rows[rows.len() - 100..].iter().map(|r| r.loss).sum::<f64>() / 100.0;
        let first: f64 = rows[..100].iter().map(|r| r.loss).sum::<f64>() / 100.0;
        assert!(
            tail < std::f64::consts::LN_2 && tail < first,
            "{mode:?}: {first} -> {tail}"
        );
        let eval = evaluate(&ck.net, &test, 20, 0.95, 9).unwrap();
        assert!(eval.error_rate < 0.05, "{mode:?}: {}", eval.error_rate);
    }
}

/// Signed bidiagonal factor scripted directly from its recursion.
fn scripted_factor(m: &[f64], tau: f64, rho: f64) -> DMatrix<f64> {
    let n = m.len();
    let t2 = tau * tau;
    let mut l = DMatrix::zeros(n, n);
    let mut c = 0.0;
    for i in 0..n {
        let rest = t2 * m[i] * m[i] - c * c;
        if i + 1 < n {
            let next = rho * t2 * m[i] * m[i + 1] / rest.sqrt();
            l[(i + 1, i)] = next;
            l[(i, i)] = rho * t2 * m[i].abs() * m[i + 1].abs() / next;
            c = next;
        } else {
            l[(i, i)] = rest.sqrt();
        }
    }
    l
}

/// KL(N(m, Σ) ‖ N(μ, ζ²I)) by dense linear algebra.
fn dense_kl(m: &[f64], sigma: &DMatrix<f64>, mu: &[f64], zeta: f64) -> f64 {
    let k = m.len() as f64;
    let d = DVector::from_column_slice(m) - DVector::from_column_slice(mu);
    let z2 = zeta * zeta;
    0.5 * (sigma.trace() / z2 + d.norm_squared() / z2 - k + k * z2.ln() - sigma.determinant().ln())
}

#[test]
fn single_layer_loss_matches_scripted_formula() {
    let arch = Architecture {
        input: Shape::flat(3),
        classes: 2,
        layers: vec![LayerSpec::new(LayerKind::Dense { outputs: 2 }).with_prior_std(0.8)],
    };
    let mut net = Network::init(arch, Mode::Bayes, 17).unwrap();
    let mut rng = keyed(4, Purpose::Verify, 0, 0, 0);
    if let LayerParams::Bayes(s) = &mut net.layers[0] {
        s.weights.delta = -1.3;
        s.weights.gamma = 1.7;
        s.biases.delta = -0.4;
        s.biases.gamma = -2.2;
        s.biases.mean = vec![0.3, -0.6];
    }
    let noise = vec![LayerNoise {
        weights: standard_normals(&mut rng, 6),
        biases: standard_normals(&mut rng, 2),
    }];
    let x = Batch::from_vec(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels = [0, 1, 1];
    let nu = 0.37;
    let got = lvi_minibatch_loss(
        &mut net,
        &x,
        &labels,
        LossParams { nu, kappa: 50.0 },
        NoiseSpec::Frozen(&noise),
    )
    .unwrap();

    let LayerParams::Bayes(s) = &net.layers[0] else {
        unreachable!()
    };
    let mut kl = 0.0;
    let mut drawn = Vec::new();
    for (v, prior, eps) in [
        (&s.weights, &s.weight_prior, &noise[0].weights),
        (&s.biases, &s.bias_prior, &noise[0].biases),
    ] {
        let (tau, rho) = (reparam_tau(v.delta), reparam_rho(v.gamma));
        let l = scripted_factor(&v.mean, tau, rho);
        let w = DVector::from_column_slice(&v.mean) + &l * DVector::from_column_slice(eps);
        drawn.push(w);
        kl += dense_kl(&v.mean, &(&l * l.transpose()), &prior.mean, prior.std);
    }
    let (w, b) = (&drawn[0], &drawn[1]);
    let mut ce = 0.0;
    for (n, &label) in labels.iter().enumerate() {
        let logits: Vec<f64> = (0..2)
            .map(|o| b[o] + (0..3).map(|i| w[o * 3 + i] * x.row(n)[i]).sum::<f64>())
            .collect();
        let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
        ce += lse - logits[label];
    }
    ce /= 3.0;
    assert!(
        (got.data_term - ce).abs() < 1e-12,
        "{} vs {ce}",
        got.data_term
    );
    assert!(
        (got.kl_term - kl).abs() < 1e-9 * kl.max(1.0),
        "{} vs {kl}",
        got.kl_term
    );
    assert!((got.loss - (ce + nu * kl)).abs() < 1e-9);
}

#[test]
fn network_gradients_match_finite_differences() {
    for (mode, seed, nu) in [
        (Mode::Bayes, 21, 0.0),
        (Mode::Bayes, 22, 0.5),
        (Mode::Freq, 23, 0.0),
    ] {
        let (params, err) = common::net_gradient_error(mode, seed, nu);
        assert!(params <= 200);
        assert!(err < 1e-4, "{mode:?} seed {seed}: {err:e}");
    }
}

#[test]
fn kappa_scales_only_gamma_gradients() {
    let mut net = Network::init(common::tiny_conv_arch(), Mode::Bayes, 8).unwrap();
    let noise: Vec<LayerNoise> = net
        .bayes_layers()
        .map(|(_, s)| LayerNoise {
            weights: vec![0.3; s.weights.len()],
            biases: vec![-0.2; s.biases.len()],
        })
        .collect();
    let x = Batch::from_vec(2, 25, (0..50).map(|k| (k as f64 * 0.37).sin()).collect()).unwrap();
    let mut run = |kappa| {
        lvi_minibatch_loss(
            &mut net,
            &x,
            &[0, 2],
            LossParams { nu: 0.1, kappa },
            NoiseSpec::Frozen(&noise),
        )
        .unwrap()
        .grads
    };
    let (g1, g50) = (run(1.0), run(50.0));
    // γ entries sit directly after each block's δ; locate them via the layout.
    let mut gamma_slots = Vec::new();
    let mut pos = 0;
    for (_, s) in net.bayes_layers() {
        for len in [s.weights.len(), s.biases.len()] {
            pos += len + 2;
            gamma_slots.push(pos - 1);
        }
    }
    for k in 0..g1.len() {
        if gamma_slots.contains(&k) {
            assert!((g50[k] - 50.0 * g1[k]).abs() <= 1e-12 * g50[k].abs().max(1.0));
        } else {
            assert_eq!(g50[k], g1[k]);
        }
    }
}

fn blob_net() -> (Network, Batch) {
    let data = synthetic_blobs(3, 100, 4, 3.0, 4).unwrap();
    let net = Network::init(Architecture::mlp(Shape::flat(4), &[6], 3), Mode::Bayes, 2).unwrap();
    let mut ck = Checkpoint::new(net, 2);
    train(&mut ck, &data, None, &blob_config(300), |_| {}).unwrap();
    let (x, _) = data.batch(&[0, 101, 202, 150]);
    (ck.net, x)
}

#[test]
fn predictive_mean_is_consistent_across_sample_sizes() {
    let (net, x) = blob_net();
    let small = predictive_samples(&net, &x, 200, 31).unwrap();
    let large = predictive_samples(&net, &x, 2000, 32).unwrap();
    for n in 0..x.rows {
        for c in 0..3 {
            let stats = |d: &[Batch]| {
                let v: Vec<f64> = d.iter().map(|b| b.row(n)[c]).collect();
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
                (mean, var)
            };
            // Both standard errors use the 2000-draw variance: for skewed outputs
            // near 0 or 1 the 200-draw variance is itself too noisy.
            let ((m1, _), (m2, var)) = (stats(&small), stats(&large));
            let se = (var / 200.0 + var / 2000.0).sqrt().max(1e-12);
            assert!(
                (m1 - m2).abs() <= 3.0 * se,
                "example {n} class {c}: {m1} vs {m2}, se {se}"
            );
        }
    }
}

#[test]
fn predictive_error_shrinks_like_inverse_root_n() {
    let (net, x) = blob_net();
    let x = Batch::from_vec(1, 4, x.row(3).to_vec()).unwrap();
    let spread = |n: usize| {
        let est: Vec<f64> = (0..60)
            .map(|s| posterior_predictive(&net, x.row(0), n, 1000 + s).unwrap()[0])
            .collect();
        let mean = est.iter().sum::<f64>() / est.len() as f64;
        (est.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (est.len() - 1) as f64).sqrt()
    };
    let ratio = spread(20) / spread(80);
    assert!((1.5..2.7).contains(&ratio), "spread ratio {ratio}");
}

#[test]
fn single_draw_and_report_invariants() {
    let (net, x) = blob_net();
    let one = posterior_predictive(&net, x.row(0), 1, 5).unwrap();
    let draw = predictive_samples(&net, &x, 1, 5).unwrap();
    assert_eq!(one, draw[0].row(0));

    let test = synthetic_blobs(3, 30, 4, 3.0, 77).unwrap();
    let eval = evaluate(&net, &test, 40, 0.95, 6).unwrap();
    for r in &eval.reports {
        assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for &(lo, hi) in &r.intervals {
            assert!(0.0 <= lo && lo <= hi && hi <= 1.0);
        }
        let p = r.predicted;
        let overlaps = r
            .intervals
            .iter()
            .enumerate()
            .any(|(c, iv)| c != p && iv.1 >= r.intervals[p].0);
        assert!(!(r.certain && overlaps));
    }
}

#[test]
fn near_zero_variance_matches_mean_network() {
    let (mut net, x) = blob_net();
    for p in &mut net.layers {
        if let LayerParams::Bayes(s) = p {
            s.weights.delta = DELTA_FLOOR;
            s.biases.delta = DELTA_FLOOR;
        }
    }
    let logits = net.logits(&net.mean_params(), &x).unwrap();
    for n in 0..x.rows {
        let det = softmax(logits.row(n));
        let mc = posterior_predictive(&net, x.row(n), 400, 3).unwrap();
        for c in 0..3 {
            assert!((det[c] - mc[c]).abs() < 0.02, "{det:?} vs {mc:?}");
        }
    }
}

#[test]
fn saturated_net_on_single_class_is_error_free_and_certain() {
    let arch = Architecture {
        input: Shape::flat(2),
        classes: 3,
        layers: vec![LayerSpec::new(LayerKind::Dense { outputs: 3 })],
    };
    let mut net = Network::init(arch, Mode::Bayes, 1).unwrap();
    if let LayerParams::Bayes(s) = &mut net.layers[0] {
        s.weights.delta = DELTA_FLOOR;
        s.biases.delta = DELTA_FLOOR;
        s.weights.mean = vec![0.01; 6];
        s.biases.mean = vec![25.0, -25.0, -25.0];
    }
    let test = cbnn::data::Dataset::new(vec![0.5; 40], Shape::flat(2), vec![0; 20], 3).unwrap();
    let eval = evaluate(&net, &test, 50, 0.95, 1).unwrap();
    assert_eq!(eval.error_rate, 0.0);
    assert_eq!(eval.table.correct_certain, 20);
}

#[test]
fn frequentist_single_sample_is_plain_test_error() {
    let data = synthetic_blobs(3, 40, 5, 2.0, 10).unwrap();
    let net = Network::init(Architecture::mlp(Shape::flat(5), &[7], 3), Mode::Freq, 3).unwrap();
    let mut ck = Checkpoint::new(net, 3);
    train(&mut ck, &data, None, &blob_config(50), |_| {}).unwrap();
    let test = synthetic_blobs(3, 40, 5, 2.0, 11).unwrap();
    let idx: Vec<usize> = (0..test.len()).collect();
    let (x, labels) = test.batch(&idx);
    let logits = ck.net.logits(&ck.net.mean_params(), &x).unwrap();
    let wrong = (0..x.rows)
        .filter(|&n| {
            let row = logits.row(n);
            let best = (0..3).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best != labels[n]
        })
        .count();
    let eval = evaluate(&ck.net, &test, 1, 0.95, 0).unwrap();
    assert_eq!(eval.error_rate, wrong as f64 / x.rows as f64);
}

#[test]
fn training_is_independent_of_thread_count() {
    let mut blobs = synthetic_blobs(3, 30, 25, 3.0, 2).unwrap();
    blobs.shape = Shape::new(1, 5, 5);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let net = Network::init(common::tiny_conv_arch(), Mode::Bayes, 3).unwrap();
                let mut ck = Checkpoint::new(net, 3);
                let cfg = TrainConfig {
                    test_every: 5,
                    ..blob_config(20)
                };
                train(&mut ck, &blobs, Some(&blobs), &cfg, |_| {}).unwrap();
                ck.to_bytes()
            })
    };
    assert_eq!(run(1), run(3));
}
