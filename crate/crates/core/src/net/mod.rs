//! Network container, the mini-batch objective, optimizer and training loop.

pub mod checkpoint;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use train::{
    lr_at, lvi_minibatch_loss, sgd_momentum_step, train, LayerNoise, LogRow, LossParams,
    LossReport, NoiseSpec, Schedule, TrainConfig,
};

use rand_chacha::ChaCha8Rng;

use crate::corrgauss::FactorL;
use crate::error::{Error, Result};
use crate::layers::{forward_with, BayesLayerState, FreqParams, LayerKind, LayerShape};
use crate::rng::{keyed, standard_normals, Purpose, GROUP_BIASES, GROUP_WEIGHTS};
use crate::tensor::{Batch, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Bayes,
    Freq,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Bayes => "bayes",
            Mode::Freq => "freq",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bayes" => Ok(Mode::Bayes),
            "freq" => Ok(Mode::Freq),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mode {s:?} (bayes|freq)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Prior `N(prior_mean, prior_std²)` for every parameter of the layer (Bayesian mode).
    pub prior_mean: f64,
    pub prior_std: f64,
    /// L2 penalty strength (frequentist mode).
    pub weight_decay: f64,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        Self {
            kind,
            prior_mean: 0.0,
            prior_std: 1.0,
            weight_decay: 0.0,
        }
    }

    pub fn with_prior_std(mut self, std: f64) -> Self {
        self.prior_std = std;
        self
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input: Shape,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Resolves every layer against its input and checks the output width.
    pub fn resolve(&self) -> Result<Vec<LayerShape>> {
        let mut shape = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for spec in &self.layers {
            let l = LayerShape::resolve(spec.kind, shape)?;
            shape = l.output;
            out.push(l);
        }
        if shape.len() != self.classes {
            return Err(Error::ShapeMismatch(format!(
                "network produces {} outputs for {} classes",
                shape.len(),
                self.classes
            )));
        }
        Ok(out)
    }

    /// Fully connected net with ReLU between hidden layers.
    pub fn mlp(input: Shape, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(LayerSpec::new(LayerKind::Dense { outputs: h }));
            layers.push(LayerSpec::new(LayerKind::Relu));
        }
        layers.push(LayerSpec::new(LayerKind::Dense { outputs: classes }));
        Self {
            input,
            classes,
            layers,
        }
    }

    /// LeNet variant: conv(20, 5×5) → pool 2/2 → conv(50, 5×5) → pool 2/2 →
    /// fc(`hidden`) → ReLU → fc(10); identity activation elsewhere.
    pub fn lenet(hidden: usize) -> Self {
        let l = |k| LayerSpec::new(k);
        Self {
            input: Shape::new(1, 28, 28),
            classes: 10,
            layers: vec![
                l(LayerKind::Conv {
                    out_channels: 20,
                    kernel: 5,
                    pad: 0,
                }),
                l(LayerKind::MaxPool { size: 2, stride: 2 }),
                l(LayerKind::Conv {
                    out_channels: 50,
                    kernel: 5,
                    pad: 0,
                }),
                l(LayerKind::MaxPool { size: 2, stride: 2 }),
                l(LayerKind::Dense { outputs: hidden }),
                l(LayerKind::Relu),
                l(LayerKind::Dense { outputs: 10 }),
            ],
        }
    }

    /// Three conv(5×5, pad 2)–ReLU–maxpool(3/2) stages (32, 32, 64 channels)
    /// and one fully connected layer.
    pub fn cifar10_full() -> Self {
        let l = |k| LayerSpec::new(k);
        let conv = |c| {
            l(LayerKind::Conv {
                out_channels: c,
                kernel: 5,
                pad: 2,
            })
        };
        let pool = || l(LayerKind::MaxPool { size: 3, stride: 2 });
        Self {
            input: Shape::new(3, 32, 32),
            classes: 10,
            layers: vec![
                conv(32),
                pool(),
                l(LayerKind::Relu),
                conv(32),
                l(LayerKind::Relu),
                pool(),
                conv(64),
                l(LayerKind::Relu),
                pool(),
                l(LayerKind::Dense { outputs: 10 }),
            ],
        }
    }
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    None,
    Bayes(BayesLayerState),
    Freq(FreqParams),
}

impl LayerParams {
    /// Number of trainable scalars in the flat layout.
    pub fn len(&self) -> usize {
        match self {
            LayerParams::None => 0,
            LayerParams::Bayes(s) => s.weights.len() + s.biases.len() + 4,
            LayerParams::Freq(p) => p.weights.len() + p.biases.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Concrete weights and biases for every layer (`None` for parameter-free layers).
pub type ParamSet = Vec<Option<(Vec<f64>, Vec<f64>)>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub mode: Mode,
    pub arch: Architecture,
    pub shapes: Vec<LayerShape>,
    pub layers: Vec<LayerParams>,
}

/// Stream index used when evaluation stabilizes its working copy.
const EVAL_STREAM: u64 = u64::MAX;

impl Network {
    pub fn init(arch: Architecture, mode: Mode, seed: u64) -> Result<Self> {
        let shapes = arch.resolve()?;
        let layers = shapes
            .iter()
            .zip(&arch.layers)
            .enumerate()
            .map(|(j, (shape, spec))| {
                if !shape.kind.is_parametric() {
                    return Ok(LayerParams::None);
                }
                let mut rng = keyed(seed, Purpose::Init, j as u64, 0, 0);
                Ok(match mode {
                    Mode::Bayes => LayerParams::Bayes(BayesLayerState::init(
                        shape,
                        spec.prior_mean,
                        spec.prior_std,
                        &mut rng,
                    )?),
                    Mode::Freq => LayerParams::Freq(FreqParams::init(shape, &mut rng)),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            mode,
            arch,
            shapes,
            layers,
        })
    }

    pub fn from_parts(mode: Mode, arch: Architecture, layers: Vec<LayerParams>) -> Result<Self> {
        let shapes = arch.resolve()?;
        if layers.len() != shapes.len() {
            return Err(Error::ShapeMismatch(
                "one parameter entry per layer expected".into(),
            ));
        }
        for (j, (shape, p)) in shapes.iter().zip(&layers).enumerate() {
            let ok = match p {
                LayerParams::None => !shape.kind.is_parametric(),
                LayerParams::Bayes(s) => {
                    mode == Mode::Bayes
                        && s.weights.len() == shape.weight_count()
                        && s.biases.len() == shape.bias_count()
                }
                LayerParams::Freq(f) => {
                    mode == Mode::Freq
                        && f.weights.len() == shape.weight_count()
                        && f.biases.len() == shape.bias_count()
                }
            };
            if !ok {
                return Err(Error::ShapeMismatch(format!(
                    "parameters of layer {j} do not fit its shape"
                )));
            }
        }
        Ok(Self {
            mode,
            arch,
            shapes,
            layers,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerParams::len).sum()
    }

    /// Flat layout, per parametric layer: Bayesian `m_w, δ_w, γ_w, m_b, δ_b, γ_b`;
    /// frequentist `w, b`.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.layers {
            match p {
                LayerParams::None => {}
                LayerParams::Bayes(s) => {
                    for v in [&s.weights, &s.biases] {
                        out.extend_from_slice(&v.mean);
                        out.push(v.delta);
                        out.push(v.gamma);
                    }
                }
                LayerParams::Freq(f) => {
                    out.extend_from_slice(&f.weights);
                    out.extend_from_slice(&f.biases);
                }
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut pos = 0;
        let mut take = |n: usize| {
            let s = &flat[pos..pos + n];
            pos += n;
            s
        };
        for p in &mut self.layers {
            match p {
                LayerParams::None => {}
                LayerParams::Bayes(s) => {
                    for v in [&mut s.weights, &mut s.biases] {
                        let n = v.mean.len();
                        v.mean.copy_from_slice(take(n));
                        v.delta = take(1)[0];
                        v.gamma = take(1)[0];
                    }
                    s.clear_draw();
                }
                LayerParams::Freq(f) => {
                    let (nw, nb) = (f.weights.len(), f.biases.len());
                    f.weights.copy_from_slice(take(nw));
                    f.biases.copy_from_slice(take(nb));
                }
            }
        }
        Ok(())
    }

    pub fn bayes_layers(&self) -> impl Iterator<Item = (usize, &BayesLayerState)> {
        self.layers.iter().enumerate().filter_map(|(j, p)| match p {
            LayerParams::Bayes(s) => Some((j, s)),
            _ => None,
        })
    }

    /// Sum of the layer-wise KL divergences at the current parameters.
    pub fn total_kl(&self) -> Result<f64> {
        let mut acc = 0.0;
        for (_, s) in self.bayes_layers() {
            let (w, b) = s.kl()?;
            acc += w + b;
        }
        Ok(acc)
    }

    /// Copy with every Bayesian block stabilized once, as done before evaluation.
    pub fn stabilized_copy(&self, seed: u64) -> Self {
        let mut net = self.clone();
        for (j, p) in net.layers.iter_mut().enumerate() {
            if let LayerParams::Bayes(s) = p {
                let (mut a, mut b) = stabilizer_rngs(seed, EVAL_STREAM, j);
                s.stabilize(&mut a, &mut b);
            }
        }
        net
    }

    /// Means (Bayesian) or the weights themselves (frequentist).
    pub fn mean_params(&self) -> ParamSet {
        self.layers
            .iter()
            .map(|p| match p {
                LayerParams::None => None,
                LayerParams::Bayes(s) => Some((s.weights.mean.clone(), s.biases.mean.clone())),
                LayerParams::Freq(f) => Some((f.weights.clone(), f.biases.clone())),
            })
            .collect()
    }

    /// Factors of every Bayesian block, computed once for repeated sampling.
    pub fn factors(&self) -> Result<Vec<Option<(FactorL, FactorL)>>> {
        self.layers
            .iter()
            .map(|p| match p {
                LayerParams::Bayes(s) => Ok(Some((s.weights.factor()?, s.biases.factor()?))),
                _ => Ok(None),
            })
            .collect()
    }

    /// One parameter draw keyed by `(seed, purpose, stream, layer)`. Frequentist
    /// layers contribute their fixed parameters.
    pub fn sample_params(
        &self,
        factors: &[Option<(FactorL, FactorL)>],
        seed: u64,
        purpose: Purpose,
        stream: u64,
    ) -> Result<ParamSet> {
        self.layers
            .iter()
            .zip(factors)
            .enumerate()
            .map(|(j, (p, f))| match (p, f) {
                (LayerParams::None, _) => Ok(None),
                (LayerParams::Freq(fp), _) => Ok(Some((fp.weights.clone(), fp.biases.clone()))),
                (LayerParams::Bayes(s), Some((fw, fb))) => {
                    let mut rng = keyed(seed, purpose, stream, j as u64, 0);
                    let nw = standard_normals(&mut rng, s.weights.len());
                    let nb = standard_normals(&mut rng, s.biases.len());
                    Ok(Some((
                        crate::corrgauss::sample(&s.weights.mean, fw, &nw)?,
                        crate::corrgauss::sample(&s.biases.mean, fb, &nb)?,
                    )))
                }
                (LayerParams::Bayes(_), None) => {
                    Err(Error::InvalidArgument(format!("no factor for layer {j}")))
                }
            })
            .collect()
    }

    /// Inference-mode forward pass (dropout disabled) with explicit parameters.
    pub fn logits(&self, params: &[Option<(Vec<f64>, Vec<f64>)>], x: &Batch) -> Result<Batch> {
        if params.len() != self.shapes.len() {
            return Err(Error::ShapeMismatch(
                "one parameter entry per layer expected".into(),
            ));
        }
        let mut h = x.clone();
        for (shape, p) in self.shapes.iter().zip(params) {
            let pr = p.as_ref().map(|(w, b)| (w.as_slice(), b.as_slice()));
            h = forward_with(shape, pr, &h, None)?.0;
        }
        Ok(h)
    }
}

pub(crate) fn stabilizer_rngs(seed: u64, stream: u64, layer: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    (
        keyed(
            seed,
            Purpose::Stabilize,
            stream,
            layer as u64,
            GROUP_WEIGHTS,
        ),
        keyed(seed, Purpose::Stabilize, stream, layer as u64, GROUP_BIASES),
    )
}
