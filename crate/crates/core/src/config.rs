//! Run configuration files.
//!
//! Line-oriented `key = value` text. `#` starts a comment. Global keys come
//! first; each `[layer]` header opens a new layer section. Unknown or repeated
//! keys are errors reported with their line number.
//!
//! Global keys:
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `name` | run id, used for output file names | `run` |
//! | `mode` | `bayes` or `freq` | `bayes` |
//! | `dataset` | `mnist`, `cifar10` or `blobs` | `mnist` |
//! | `input` | `CxHxW` | from dataset |
//! | `classes` | class count | 10 |
//! | `train_per_class`, `test_per_class` | keep the first K examples of each class | all |
//! | `blob_per_class`, `blob_separation` | synthetic data (dataset `blobs`) | 200, 10 |
//! | `batch_size` | | 64 |
//! | `iterations` | | 100000 |
//! | `base_lr` | | 0.01 |
//! | `lr_policy` | `inv` or `fixed` | `inv` |
//! | `lr_gamma`, `lr_power` | inv schedule | 0.0001, 0.75 |
//! | `momentum` | | 0.9 |
//! | `nu` | absolute KL scale | `1/(β·kl_divisor)` |
//! | `kl_divisor` | C in `ν = 1/(β·C)` | 1 |
//! | `kappa` | γ gradient multiplier | 1 |
//! | `seed` | | 1 |
//! | `log_every`, `test_every` | log cadences | 1, 0 |
//! | `samples` | predictive draws at evaluation | 200 |
//! | `coverage` | comma-separated interval levels | `0.95` |
//! | `weight_decay` | default for layers without their own | 0 |
//!
//! Layer keys: `type` (`dense`, `conv`, `relu`, `maxpool`, `dropout`),
//! `outputs`, `out_channels`, `kernel`, `pad`, `size`, `stride`, `rate`,
//! `prior_mean`, `prior_std`, `weight_decay`.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::layers::LayerKind;
use crate::net::{Architecture, LayerSpec, Mode, Schedule, TrainConfig};
use crate::tensor::Shape;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Blobs { per_class: usize, separation: f64 },
}

impl DatasetKind {
    pub fn default_input(&self) -> Option<Shape> {
        match self {
            DatasetKind::Mnist => Some(Shape::new(1, 28, 28)),
            DatasetKind::Cifar10 => Some(Shape::new(3, 32, 32)),
            DatasetKind::Blobs { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub mode: Mode,
    pub dataset: DatasetKind,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub arch: Architecture,
    pub train: TrainConfig,
    pub samples: usize,
    pub coverage: Vec<f64>,
    pub weight_decay: f64,
}

pub const BUNDLED: &[(&str, &str)] = &[
    (
        "mnist_lenet_bayes",
        include_str!("../configs/mnist_lenet_bayes.cfg"),
    ),
    (
        "mnist_lenet_freq",
        include_str!("../configs/mnist_lenet_freq.cfg"),
    ),
    (
        "cifar10_bayes",
        include_str!("../configs/cifar10_bayes.cfg"),
    ),
    ("cifar10_freq", include_str!("../configs/cifar10_freq.cfg")),
    (
        "mnist_mlp_bayes",
        include_str!("../configs/mnist_mlp_bayes.cfg"),
    ),
    (
        "mnist_mlp_freq",
        include_str!("../configs/mnist_mlp_freq.cfg"),
    ),
    ("blobs_smoke", include_str!("../configs/blobs_smoke.cfg")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config {
        line,
        msg: msg.into(),
    }
}

fn num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| err(line, format!("{key}: cannot parse {v:?}")))
}

fn parse_shape(line: usize, v: &str) -> Result<Shape> {
    let parts: Vec<&str> = v.split('x').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(err(line, format!("input must look like CxHxW, got {v:?}")));
    }
    Ok(Shape::new(
        num(line, "input", parts[0])?,
        num(line, "input", parts[1])?,
        num(line, "input", parts[2])?,
    ))
}

#[derive(Default)]
struct LayerDraft {
    line: usize,
    keys: HashSet<String>,
    kind: Option<String>,
    outputs: Option<usize>,
    out_channels: Option<usize>,
    kernel: Option<usize>,
    pad: Option<usize>,
    size: Option<usize>,
    stride: Option<usize>,
    rate: Option<f64>,
    prior_mean: Option<f64>,
    prior_std: Option<f64>,
    weight_decay: Option<f64>,
}

impl LayerDraft {
    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        match key {
            "type" => self.kind = Some(v.to_string()),
            "outputs" => self.outputs = Some(num(line, key, v)?),
            "out_channels" => self.out_channels = Some(num(line, key, v)?),
            "kernel" => self.kernel = Some(num(line, key, v)?),
            "pad" => self.pad = Some(num(line, key, v)?),
            "size" => self.size = Some(num(line, key, v)?),
            "stride" => self.stride = Some(num(line, key, v)?),
            "rate" => self.rate = Some(num(line, key, v)?),
            "prior_mean" => self.prior_mean = Some(num(line, key, v)?),
            "prior_std" => self.prior_std = Some(num(line, key, v)?),
            "weight_decay" => self.weight_decay = Some(num(line, key, v)?),
            _ => return Err(err(line, format!("unknown layer key {key:?}"))),
        }
        Ok(())
    }

    fn finish(self, default_decay: f64) -> Result<LayerSpec> {
        let line = self.line;
        let need = |v: Option<usize>, k: &str| {
            v.ok_or_else(|| err(line, format!("layer is missing {k:?}")))
        };
        let kind_name = self
            .kind
            .clone()
            .ok_or_else(|| err(line, "layer is missing \"type\""))?;
        let allowed: &[&str] = match kind_name.as_str() {
            "dense" => &["outputs"],
            "conv" => &["out_channels", "kernel", "pad"],
            "relu" => &[],
            "maxpool" => &["size", "stride"],
            "dropout" => &["rate"],
            other => return Err(err(line, format!("unknown layer type {other:?}"))),
        };
        let common = ["type", "prior_mean", "prior_std", "weight_decay"];
        if let Some(k) = self
            .keys
            .iter()
            .find(|k| !allowed.contains(&k.as_str()) && !common.contains(&k.as_str()))
        {
            return Err(err(
                line,
                format!("key {k:?} does not apply to a {kind_name} layer"),
            ));
        }
        let kind = match kind_name.as_str() {
            "dense" => LayerKind::Dense {
                outputs: need(self.outputs, "outputs")?,
            },
            "conv" => LayerKind::Conv {
                out_channels: need(self.out_channels, "out_channels")?,
                kernel: need(self.kernel, "kernel")?,
                pad: self.pad.unwrap_or(0),
            },
            "relu" => LayerKind::Relu,
            "maxpool" => {
                let size = need(self.size, "size")?;
                LayerKind::MaxPool {
                    size,
                    stride: self.stride.unwrap_or(size),
                }
            }
            _ => LayerKind::Dropout {
                rate: self
                    .rate
                    .ok_or_else(|| err(line, "layer is missing \"rate\""))?,
            },
        };
        Ok(LayerSpec {
            kind,
            prior_mean: self.prior_mean.unwrap_or(0.0),
            prior_std: self.prior_std.unwrap_or(1.0),
            weight_decay: self.weight_decay.unwrap_or(default_decay),
        })
    }
}

pub fn parse(text: &str) -> Result<RunConfig> {
    let mut seen = HashSet::new();
    let mut layers: Vec<LayerDraft> = Vec::new();
    let mut name = "run".to_string();
    let mut mode = Mode::Bayes;
    let mut dataset_name = "mnist".to_string();
    let mut input: Option<Shape> = None;
    let mut classes = 10usize;
    let mut train_per_class = None;
    let mut test_per_class = None;
    let mut blob_per_class = 200usize;
    let mut blob_separation = 10.0f64;
    let mut t = TrainConfig::default();
    let mut lr_policy = "inv".to_string();
    let (mut lr_gamma, mut lr_power) = (1e-4, 0.75);
    let mut samples = crate::predict::DEFAULT_SAMPLES;
    let mut coverage = vec![0.95];
    let mut weight_decay = 0.0;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            if content != "[layer]" {
                return Err(err(line, format!("unknown section {content:?}")));
            }
            layers.push(LayerDraft {
                line,
                ..LayerDraft::default()
            });
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| err(line, format!("expected `key = value`, got {content:?}")))?;
        if value.is_empty() {
            return Err(err(line, format!("{key}: empty value")));
        }
        if let Some(l) = layers.last_mut() {
            if !l.keys.insert(key.to_string()) {
                return Err(err(line, format!("duplicate layer key {key:?}")));
            }
            l.set(line, key, value)?;
            continue;
        }
        if !seen.insert(key.to_string()) {
            return Err(err(line, format!("duplicate key {key:?}")));
        }
        match key {
            "name" => name = value.to_string(),
            "mode" => mode = value.parse().map_err(|e: Error| err(line, e.to_string()))?,
            "dataset" => {
                if !["mnist", "cifar10", "blobs"].contains(&value) {
                    return Err(err(line, format!("unknown dataset {value:?}")));
                }
                dataset_name = value.to_string();
            }
            "input" => input = Some(parse_shape(line, value)?),
            "classes" => classes = num(line, key, value)?,
            "train_per_class" => train_per_class = Some(num(line, key, value)?),
            "test_per_class" => test_per_class = Some(num(line, key, value)?),
            "blob_per_class" => blob_per_class = num(line, key, value)?,
            "blob_separation" => blob_separation = num(line, key, value)?,
            "batch_size" => t.batch_size = num(line, key, value)?,
            "iterations" => t.iterations = num(line, key, value)?,
            "base_lr" => t.base_lr = num(line, key, value)?,
            "lr_policy" => {
                if value != "inv" && value != "fixed" {
                    return Err(err(
                        line,
                        format!("lr_policy must be inv or fixed, got {value:?}"),
                    ));
                }
                lr_policy = value.to_string();
            }
            "lr_gamma" => lr_gamma = num(line, key, value)?,
            "lr_power" => lr_power = num(line, key, value)?,
            "momentum" => t.momentum = num(line, key, value)?,
            "nu" => t.nu = Some(num(line, key, value)?),
            "kl_divisor" => t.kl_divisor = num(line, key, value)?,
            "kappa" => t.kappa = num(line, key, value)?,
            "seed" => t.seed = num(line, key, value)?,
            "log_every" => t.log_every = num(line, key, value)?,
            "test_every" => t.test_every = num(line, key, value)?,
            "samples" => samples = num(line, key, value)?,
            "coverage" => {
                coverage = value
                    .split(',')
                    .map(|v| num(line, key, v.trim()))
                    .collect::<Result<_>>()?;
            }
            "weight_decay" => weight_decay = num(line, key, value)?,
            _ => return Err(err(line, format!("unknown key {key:?}"))),
        }
    }

    t.schedule = if lr_policy == "fixed" {
        if seen.contains("lr_gamma") || seen.contains("lr_power") {
            return Err(err(0, "lr_gamma/lr_power only apply to the inv policy"));
        }
        Schedule::Fixed
    } else {
        Schedule::Inv {
            gamma: lr_gamma,
            power: lr_power,
        }
    };
    let dataset = match dataset_name.as_str() {
        "mnist" => DatasetKind::Mnist,
        "cifar10" => DatasetKind::Cifar10,
        _ => DatasetKind::Blobs {
            per_class: blob_per_class,
            separation: blob_separation,
        },
    };
    if !matches!(dataset, DatasetKind::Blobs { .. })
        && (seen.contains("blob_per_class") || seen.contains("blob_separation"))
    {
        return Err(err(0, "blob_* keys need dataset = blobs"));
    }
    let input = input
        .or(dataset.default_input())
        .ok_or_else(|| err(0, "input shape required for this dataset"))?;
    if coverage.iter().any(|c| !(*c > 0.0 && *c < 1.0)) {
        return Err(err(0, "coverage levels must lie in (0, 1)"));
    }
    if layers.is_empty() {
        return Err(err(0, "no [layer] sections"));
    }
    let layers = layers
        .into_iter()
        .map(|l| l.finish(weight_decay))
        .collect::<Result<Vec<_>>>()?;
    let arch = Architecture {
        input,
        classes,
        layers,
    };
    arch.resolve()
        .map_err(|e| err(0, format!("architecture: {e}")))?;
    t.validate().map_err(|e| err(0, e.to_string()))?;
    if samples == 0 {
        return Err(err(0, "samples must be positive"));
    }
    Ok(RunConfig {
        name,
        mode,
        dataset,
        train_per_class,
        test_per_class,
        arch,
        train: t,
        samples,
        coverage,
        weight_decay,
    })
}

/// Text that [`parse`]s back to `cfg`.
pub fn serialize(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("name", cfg.name.clone());
    kv("mode", cfg.mode.as_str().into());
    match cfg.dataset {
        DatasetKind::Mnist => kv("dataset", "mnist".into()),
        DatasetKind::Cifar10 => kv("dataset", "cifar10".into()),
        DatasetKind::Blobs {
            per_class,
            separation,
        } => {
            kv("dataset", "blobs".into());
            kv("blob_per_class", per_class.to_string());
            kv("blob_separation", separation.to_string());
        }
    }
    let i = cfg.arch.input;
    kv("input", format!("{}x{}x{}", i.channels, i.height, i.width));
    kv("classes", cfg.arch.classes.to_string());
    if let Some(k) = cfg.train_per_class {
        kv("train_per_class", k.to_string());
    }
    if let Some(k) = cfg.test_per_class {
        kv("test_per_class", k.to_string());
    }
    let t = &cfg.train;
    kv("batch_size", t.batch_size.to_string());
    kv("iterations", t.iterations.to_string());
    kv("base_lr", t.base_lr.to_string());
    match t.schedule {
        Schedule::Inv { gamma, power } => {
            kv("lr_policy", "inv".into());
            kv("lr_gamma", gamma.to_string());
            kv("lr_power", power.to_string());
        }
        Schedule::Fixed => kv("lr_policy", "fixed".into()),
    }
    kv("momentum", t.momentum.to_string());
    if let Some(nu) = t.nu {
        kv("nu", nu.to_string());
    }
    kv("kl_divisor", t.kl_divisor.to_string());
    kv("kappa", t.kappa.to_string());
    kv("seed", t.seed.to_string());
    kv("log_every", t.log_every.to_string());
    kv("test_every", t.test_every.to_string());
    kv("samples", cfg.samples.to_string());
    kv(
        "coverage",
        cfg.coverage
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(", "),
    );
    kv("weight_decay", cfg.weight_decay.to_string());
    for l in &cfg.arch.layers {
        s.push_str("\n[layer]\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("type", l.kind.name().into());
        match l.kind {
            LayerKind::Dense { outputs } => kv("outputs", outputs.to_string()),
            LayerKind::Conv {
                out_channels,
                kernel,
                pad,
            } => {
                kv("out_channels", out_channels.to_string());
                kv("kernel", kernel.to_string());
                kv("pad", pad.to_string());
            }
            LayerKind::Relu => {}
            LayerKind::MaxPool { size, stride } => {
                kv("size", size.to_string());
                kv("stride", stride.to_string());
            }
            LayerKind::Dropout { rate } => kv("rate", rate.to_string()),
        }
        kv("prior_mean", l.prior_mean.to_string());
        kv("prior_std", l.prior_std.to_string());
        kv("weight_decay", l.weight_decay.to_string());
    }
    s
}
