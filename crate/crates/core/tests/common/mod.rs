#![allow(dead_code)]

use std::path::{Path, PathBuf};

use cbnn::layers::LayerKind;
use cbnn::net::{
    lvi_minibatch_loss, Architecture, LayerNoise, LayerParams, LayerSpec, LossParams, Mode,
    Network, NoiseSpec,
};
use cbnn::rng::{keyed, standard_normals, Purpose};
use cbnn::tensor::{Batch, Shape};
use cbnn::verify::{finite_diff, grad_rel_err};
use rand::Rng;

pub fn data_dir() -> PathBuf {
    std::env::var_os("CBNN_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

pub fn report(criterion: &str, passed: bool, detail: &str) {
    println!(
        "{} {criterion}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
}

pub fn skip(criterion: &str, reason: &str) {
    println!("SKIP {criterion}: {reason}");
}

/// Hand-built IDX pair: `count` images of `rows × cols` with pixel
/// `(7·n + 3·k) mod 256` and label `n mod 10`.
pub fn idx_fixture(count: usize, rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::new();
    for w in [0x0803u32, count as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&w.to_be_bytes());
    }
    for n in 0..count {
        img.extend((0..rows * cols).map(|k| ((7 * n + 3 * k) % 256) as u8));
    }
    let mut lab = Vec::new();
    for w in [0x0801u32, count as u32] {
        lab.extend_from_slice(&w.to_be_bytes());
    }
    lab.extend((0..count).map(|n| (n % 10) as u8));
    (img, lab)
}

/// `count` CIFAR-10 binary records with distinct, position-dependent pixel bytes.
pub fn cifar_fixture(count: usize) -> Vec<u8> {
    let mut out = Vec::new();
    for n in 0..count {
        out.push(((3 * n + 1) % 10) as u8);
        out.extend((0..3 * 32 * 32).map(|k| ((k * 5 + n * 11) % 251) as u8));
    }
    out
}

/// Bytes recovered from loaded pixel values in `[0, 1]`.
pub fn to_bytes(pixels: &[f64]) -> Vec<u8> {
    pixels.iter().map(|&p| (p * 255.0).round() as u8).collect()
}

/// Small conv + pool + dense network whose flat parameter vector stays
/// below 200 entries.
pub fn tiny_conv_arch() -> Architecture {
    Architecture {
        input: Shape::new(1, 5, 5),
        classes: 3,
        layers: vec![
            LayerSpec::new(LayerKind::Conv {
                out_channels: 2,
                kernel: 3,
                pad: 0,
            })
            .with_prior_std(0.7),
            LayerSpec::new(LayerKind::Relu),
            LayerSpec::new(LayerKind::MaxPool { size: 2, stride: 1 }),
            LayerSpec::new(LayerKind::Dense { outputs: 4 }),
            LayerSpec::new(LayerKind::Relu),
            LayerSpec::new(LayerKind::Dense { outputs: 3 }),
        ],
    }
}

/// Worst relative error between the analytic objective gradient and central
/// differences for the tiny network with frozen noise. Scale and correlation
/// parameters are moved away from the stabilizer thresholds first.
pub fn net_gradient_error(mode: Mode, seed: u64, nu: f64) -> (usize, f64) {
    let mut net = Network::init(tiny_conv_arch(), mode, seed).unwrap();
    let mut rng = keyed(seed, Purpose::Verify, 99, 0, 0);
    if mode == Mode::Bayes {
        for p in &mut net.layers {
            if let LayerParams::Bayes(s) = p {
                for v in [&mut s.weights, &mut s.biases] {
                    v.delta = rng.random_range(-2.5..-0.5);
                    let g: f64 = rng.random_range(0.5..3.0);
                    v.gamma = if rng.random_bool(0.5) { g } else { -g };
                    for m in &mut v.mean {
                        let mag = rng.random_range(0.2..1.0);
                        *m = if rng.random_bool(0.5) { mag } else { -mag };
                    }
                }
            }
        }
    }
    let noise: Vec<LayerNoise> = net
        .bayes_layers()
        .map(|(_, s)| LayerNoise {
            weights: standard_normals(&mut rng, s.weights.len()),
            biases: standard_normals(&mut rng, s.biases.len()),
        })
        .collect();
    let rows = 4;
    let x = Batch::from_vec(
        rows,
        25,
        (0..rows * 25)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let labels: Vec<usize> = (0..rows).map(|n| n % 3).collect();
    let hp = LossParams { nu, kappa: 1.0 };
    let point = net.params_flat();
    let analytic = lvi_minibatch_loss(&mut net, &x, &labels, hp, NoiseSpec::Frozen(&noise))
        .unwrap()
        .grads;
    let numeric = finite_diff(
        |p| {
            let mut n = net.clone();
            n.set_params_flat(p).unwrap();
            lvi_minibatch_loss(&mut n, &x, &labels, hp, NoiseSpec::Frozen(&noise))
                .unwrap()
                .loss
        },
        &point,
        1e-6,
    );
    (point.len(), grad_rel_err(&analytic, &numeric))
}
