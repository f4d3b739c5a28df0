use crate::data::{minibatches, Dataset};
use crate::error::{Error, Result};
use crate::layers::{
    backward_with, bayes_backward, bayes_forward, forward_with, ops::dropout_mask,
    softmax_cross_entropy, Cache, LayerKind, Noise,
};
use crate::rng::{keyed, Purpose};
use crate::tensor::Batch;

use super::{stabilizer_rngs, Checkpoint, LayerParams, Mode, Network};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// `base_lr · (1 + gamma·i)^(−power)`.
    Inv {
        gamma: f64,
        power: f64,
    },
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: u64,
    pub base_lr: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    /// Absolute KL scale; when `None`, `ν = 1/(β·kl_divisor)` with `β` the training-set size.
    pub nu: Option<f64>,
    pub kl_divisor: f64,
    /// Multiplier on the `γ` gradients.
    pub kappa: f64,
    pub seed: u64,
    /// Cadence of rows in the training log.
    pub log_every: u64,
    /// Cadence of the one-sample test-error estimate (0 disables it).
    pub test_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            iterations: 100_000,
            base_lr: 0.01,
            schedule: Schedule::Inv {
                gamma: 1e-4,
                power: 0.75,
            },
            momentum: 0.9,
            nu: None,
            kl_divisor: 1.0,
            kappa: 1.0,
            seed: 1,
            log_every: 1,
            test_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn nu_for(&self, beta: usize) -> f64 {
        self.nu
            .unwrap_or_else(|| 1.0 / (beta as f64 * self.kl_divisor))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.kappa > 0.0) {
            return bad("kappa must be positive");
        }
        if matches!(self.nu, Some(v) if !(v >= 0.0)) {
            return bad("nu must be nonnegative");
        }
        if !(self.kl_divisor > 0.0) {
            return bad("kl_divisor must be positive");
        }
        if !(self.base_lr > 0.0) {
            return bad("base_lr must be positive");
        }
        Ok(())
    }
}

pub fn lr_at(iteration: u64, cfg: &TrainConfig) -> f64 {
    match cfg.schedule {
        Schedule::Inv { gamma, power } => {
            cfg.base_lr * (1.0 + gamma * iteration as f64).powf(-power)
        }
        Schedule::Fixed => cfg.base_lr,
    }
}

/// `v ← momentum·v − lr·g`, `p ← p + v`.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::ShapeMismatch(format!(
            "optimizer: {} params, {} grads, {} velocity",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub nu: f64,
    pub kappa: f64,
}

/// Standard-normal noise for one parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNoise {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

pub enum NoiseSpec<'a> {
    /// Training draws keyed by `(seed, iteration, layer)`; enables dropout.
    Keyed { seed: u64, iteration: u64 },
    /// Fixed noise, one entry per parametric layer in order; dropout off.
    Frozen(&'a [LayerNoise]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// `data_term + ν·kl_term`.
    pub loss: f64,
    /// Mean cross-entropy over the batch.
    pub data_term: f64,
    /// Sum of the layer KL divergences (0 for frequentist nets).
    pub kl_term: f64,
    /// Gradient in the [`Network::params_flat`] layout.
    pub grads: Vec<f64>,
}

/// One-sample mini-batch objective `(1/m) Σ CE + ν Σ_j KL_j` and its gradient
/// (KL gradients scaled by `ν`, `γ` gradients additionally by `κ`).
pub fn lvi_minibatch_loss(
    net: &mut Network,
    x: &Batch,
    labels: &[usize],
    hp: LossParams,
    noise: NoiseSpec<'_>,
) -> Result<LossReport> {
    let m = x.rows;
    if m == 0 || labels.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "{m} examples with {} labels",
            labels.len()
        )));
    }
    let mut caches: Vec<Cache> = Vec::with_capacity(net.shapes.len());
    let mut h = x.clone();
    let mut param_index = 0usize;
    for (j, (shape, p)) in net.shapes.iter().zip(net.layers.iter_mut()).enumerate() {
        let (y, cache) = match p {
            LayerParams::None => {
                let mask = match (&noise, shape.kind) {
                    (NoiseSpec::Keyed { seed, iteration }, LayerKind::Dropout { rate })
                        if net.mode == Mode::Freq =>
                    {
                        let mut rng = keyed(*seed, Purpose::Dropout, *iteration, j as u64, 0);
                        Some(dropout_mask(&mut rng, h.data.len(), rate))
                    }
                    _ => None,
                };
                forward_with(shape, None, &h, mask)?
            }
            LayerParams::Freq(f) => forward_with(shape, Some((&f.weights, &f.biases)), &h, None)?,
            LayerParams::Bayes(s) => match &noise {
                NoiseSpec::Keyed { seed, iteration } => {
                    let (mut a, mut b) = stabilizer_rngs(*seed, *iteration, j);
                    let mut rng = keyed(*seed, Purpose::Noise, *iteration, j as u64, 0);
                    bayes_forward(s, shape, &h, (&mut a, &mut b), Noise::Draw(&mut rng))?
                }
                NoiseSpec::Frozen(list) => {
                    let n = list.get(param_index).ok_or_else(|| {
                        Error::ShapeMismatch(format!(
                            "no frozen noise for parametric layer {param_index}"
                        ))
                    })?;
                    let (mut a, mut b) = stabilizer_rngs(0, 0, j);
                    bayes_forward(
                        s,
                        shape,
                        &h,
                        (&mut a, &mut b),
                        Noise::Injected {
                            weights: &n.weights,
                            biases: &n.biases,
                        },
                    )?
                }
            },
        };
        if shape.kind.is_parametric() {
            param_index += 1;
        }
        caches.push(cache);
        h = y;
    }

    let mut data_term = 0.0;
    let mut g = Batch::zeros(m, h.cols);
    for (n, &label) in labels.iter().enumerate() {
        let (l, dl) = softmax_cross_entropy(h.row(n), label)?;
        data_term += l;
        for (dst, v) in g.row_mut(n).iter_mut().zip(dl) {
            *dst = v / m as f64;
        }
    }
    data_term /= m as f64;
    let kl_term = net.total_kl()?;

    let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); net.layers.len()];
    for j in (0..net.layers.len()).rev() {
        let shape = &net.shapes[j];
        let need_dx = j > 0;
        let dx = match &net.layers[j] {
            LayerParams::None => backward_with(shape, None, &caches[j], &g, true)?.0,
            LayerParams::Freq(f) => {
                let (dx, pg) = backward_with(shape, Some(&f.weights), &caches[j], &g, need_dx)?;
                let (dw, db) = pg.expect("parametric layer");
                per_layer[j] = [dw, db].concat();
                dx
            }
            LayerParams::Bayes(s) => {
                let (dx, vg) = bayes_backward(s, shape, &caches[j], &g, hp.nu, hp.kappa, need_dx)?;
                let mut flat = vg.weights.mean;
                flat.extend([vg.weights.delta, vg.weights.gamma]);
                flat.extend(vg.biases.mean);
                flat.extend([vg.biases.delta, vg.biases.gamma]);
                per_layer[j] = flat;
                dx
            }
        };
        if let Some(dx) = dx {
            g = dx;
        }
    }
    Ok(LossReport {
        loss: data_term + hp.nu * kl_term,
        data_term,
        kl_term,
        grads: per_layer.concat(),
    })
}

/// Adds `λ·θ` to the gradient of every frequentist weight and bias.
fn add_weight_decay(net: &Network, grads: &mut [f64]) {
    let mut pos = 0;
    for (spec, p) in net.arch.layers.iter().zip(&net.layers) {
        if let LayerParams::Freq(f) = p {
            for v in f.weights.iter().chain(&f.biases) {
                grads[pos] += spec.weight_decay * v;
                pos += 1;
            }
        } else {
            pos += p.len();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub approx_test_error: Option<f64>,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "iteration,lr,loss,approx_test_error";

    pub fn csv_row(&self) -> String {
        let err = self
            .approx_test_error
            .map(|e| format!("{e}"))
            .unwrap_or_default();
        format!("{},{},{},{}", self.iteration, self.lr, self.loss, err)
    }
}

/// Test error from a single draw shared by all test examples (frequentist:
/// the deterministic forward pass).
pub fn approx_test_error(net: &Network, test: &Dataset, seed: u64, stream: u64) -> Result<f64> {
    let work = net.stabilized_copy(seed);
    let factors = work.factors()?;
    let params = work.sample_params(&factors, seed, Purpose::Monitor, stream)?;
    let mut wrong = 0usize;
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, labels) = test.batch(chunk);
        let logits = work.logits(&params, &x)?;
        for (n, &label) in labels.iter().enumerate() {
            if argmax(logits.row(n)) != label {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64 / test.len() as f64)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs iterations `ckpt.iteration .. cfg.iterations`. Each iteration:
/// stabilize → sample → forward → backward → momentum step. Returns the log
/// rows (also passed to `on_row` as they are produced).
pub fn train(
    ckpt: &mut Checkpoint,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.shape != ckpt.net.arch.input || data.class_count != ckpt.net.arch.classes {
        return Err(Error::ShapeMismatch(format!(
            "dataset {} with {} classes does not fit network input {} with {} classes",
            data.shape, data.class_count, ckpt.net.arch.input, ckpt.net.arch.classes
        )));
    }
    let seed = ckpt.seed;
    let hp = LossParams {
        nu: if ckpt.net.mode == Mode::Bayes {
            cfg.nu_for(data.len())
        } else {
            0.0
        },
        kappa: cfg.kappa,
    };
    let per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
    let mut epoch_cache: Option<(u64, Vec<Vec<usize>>)> = None;
    let mut rows = Vec::new();

    while ckpt.iteration < cfg.iterations {
        let i = ckpt.iteration;
        let epoch = i / per_epoch;
        if epoch_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
            epoch_cache = Some((epoch, minibatches(data.len(), cfg.batch_size, seed, epoch)?));
        }
        let batch = &epoch_cache.as_ref().expect("filled").1[(i % per_epoch) as usize];
        let (x, labels) = data.batch(batch);

        let mut report = lvi_minibatch_loss(
            &mut ckpt.net,
            &x,
            &labels,
            hp,
            NoiseSpec::Keyed { seed, iteration: i },
        )?;
        if !report.loss.is_finite() || report.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                iteration: i,
                loss: report.loss,
                detail: format!(
                    "data term {}, KL term {}, {} non-finite gradient entries",
                    report.data_term,
                    report.kl_term,
                    report.grads.iter().filter(|g| !g.is_finite()).count()
                ),
            });
        }
        if ckpt.net.mode == Mode::Freq {
            add_weight_decay(&ckpt.net, &mut report.grads);
        }
        let lr = lr_at(i, cfg);
        let mut params = ckpt.net.params_flat();
        sgd_momentum_step(
            &mut params,
            &report.grads,
            &mut ckpt.velocity,
            lr,
            cfg.momentum,
        )?;
        ckpt.net.set_params_flat(&params)?;
        ckpt.iteration = i + 1;

        let last = ckpt.iteration == cfg.iterations;
        let test_now =
            cfg.test_every > 0 && (ckpt.iteration.is_multiple_of(cfg.test_every) || last);
        let log_now = cfg.log_every > 0 && (ckpt.iteration.is_multiple_of(cfg.log_every) || last);
        if log_now || test_now {
            let approx = match (test_now, test) {
                (true, Some(t)) if !t.is_empty() => Some(approx_test_error(&ckpt.net, t, seed, i)?),
                _ => None,
            };
            let row = LogRow {
                iteration: ckpt.iteration,
                lr,
                loss: report.loss,
                approx_test_error: approx,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}
