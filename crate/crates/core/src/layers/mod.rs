//! Network layers.
//!
//! [`LayerShape`] fixes a layer's geometry. Parametric layers (dense and conv)
//! run through [`forward_with`] / [`backward_with`] given concrete weights and
//! biases; the Bayesian wrappers in [`bayes`] draw those from the variational
//! distribution first.
//!
//! Weight storage order defines the correlation chain: dense weights are
//! `(output, input)` row-major, conv kernels `(out_ch, in_ch, row, col)`.

pub mod bayes;
pub mod ops;

pub use bayes::{bayes_backward, bayes_forward, BayesGrads, BayesLayerState, Noise};
pub use ops::{
    conv_backward, conv_forward, dense_backward, dense_forward, maxpool_backward, maxpool_forward,
    relu_backward, relu_forward, softmax, softmax_cross_entropy, ConvGeom,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Batch, Shape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    Dense {
        outputs: usize,
    },
    Conv {
        out_channels: usize,
        kernel: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    /// Active only in frequentist training.
    Dropout {
        rate: f64,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv { .. } => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Dropout { .. } => "dropout",
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv { .. })
    }
}

/// A layer kind resolved against its input shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerShape {
    pub kind: LayerKind,
    pub input: Shape,
    pub output: Shape,
}

impl LayerShape {
    pub fn resolve(kind: LayerKind, input: Shape) -> Result<Self> {
        let output = match kind {
            LayerKind::Dense { outputs } => {
                if outputs == 0 {
                    return Err(Error::InvalidArgument(
                        "dense layer needs outputs > 0".into(),
                    ));
                }
                Shape::flat(outputs)
            }
            LayerKind::Conv {
                out_channels,
                kernel,
                pad,
            } => {
                if out_channels == 0 {
                    return Err(Error::InvalidArgument(
                        "conv layer needs out_channels > 0".into(),
                    ));
                }
                ConvGeom {
                    input,
                    out_channels,
                    kernel,
                    pad,
                }
                .output()?
            }
            LayerKind::Relu => input,
            LayerKind::MaxPool { size, stride } => ops::pool_output(input, size, stride)?,
            LayerKind::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::InvalidArgument(format!(
                        "dropout rate {rate} not in [0, 1)"
                    )));
                }
                input
            }
        };
        Ok(Self {
            kind,
            input,
            output,
        })
    }

    pub fn conv_geom(&self) -> Option<ConvGeom> {
        match self.kind {
            LayerKind::Conv {
                out_channels,
                kernel,
                pad,
            } => Some(ConvGeom {
                input: self.input,
                out_channels,
                kernel,
                pad,
            }),
            _ => None,
        }
    }

    /// `(out, in, height, width)` of the weight tensor; dense layers use `(fan_out, fan_in, 1, 1)`.
    pub fn kernel_dims(&self) -> Option<[usize; 4]> {
        match self.kind {
            LayerKind::Dense { outputs } => Some([outputs, self.input.len(), 1, 1]),
            LayerKind::Conv {
                out_channels,
                kernel,
                ..
            } => Some([out_channels, self.input.channels, kernel, kernel]),
            _ => None,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.kernel_dims().map_or(0, |d| d.iter().product())
    }

    pub fn bias_count(&self) -> usize {
        match self.kind {
            LayerKind::Dense { outputs } => outputs,
            LayerKind::Conv { out_channels, .. } => out_channels,
            _ => 0,
        }
    }

    /// Glorot fan-in and fan-out (receptive field included for conv).
    pub fn fans(&self) -> (usize, usize) {
        match self.kernel_dims() {
            Some([o, i, h, w]) => (i * h * w, o * h * w),
            None => (0, 0),
        }
    }
}

/// Flat position of a weight tensor index in row-major order.
pub fn flatten_order(dims: [usize; 4], index: [usize; 4]) -> Result<usize> {
    if index.iter().zip(&dims).any(|(i, d)| i >= d) {
        return Err(Error::IndexOutOfBounds {
            index: index.to_vec(),
            shape: dims.to_vec(),
        });
    }
    Ok(((index[0] * dims[1] + index[1]) * dims[2] + index[2]) * dims[3] + index[3])
}

pub fn unflatten(dims: [usize; 4], flat: usize) -> Result<[usize; 4]> {
    let total: usize = dims.iter().product();
    if flat >= total {
        return Err(Error::IndexOutOfBounds {
            index: vec![flat],
            shape: vec![total],
        });
    }
    let mut rest = flat;
    let mut out = [0; 4];
    for k in (0..4).rev() {
        out[k] = rest % dims[k];
        rest /= dims[k];
    }
    Ok(out)
}

/// Values saved by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    Dense { input: Batch },
    Conv { cols: Vec<Vec<f64>> },
    Relu { input: Batch },
    Pool { argmax: Vec<usize> },
    Dropout { mask: Option<Vec<f64>> },
}

/// Forward pass with explicit parameters. `params` is required for dense and
/// conv layers; `dropout_mask` (one factor per activation) enables dropout.
pub fn forward_with(
    shape: &LayerShape,
    params: Option<(&[f64], &[f64])>,
    x: &Batch,
    dropout_mask: Option<Vec<f64>>,
) -> Result<(Batch, Cache)> {
    if x.cols != shape.input.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} layer expects input {} ({} values), got {}",
            shape.kind.name(),
            shape.input,
            shape.input.len(),
            x.cols
        )));
    }
    let need_params = || {
        params.ok_or_else(|| {
            Error::InvalidArgument(format!("{} layer needs parameters", shape.kind.name()))
        })
    };
    match shape.kind {
        LayerKind::Dense { .. } => {
            let (w, b) = need_params()?;
            let y = dense_forward(x, w, b)?;
            Ok((y, Cache::Dense { input: x.clone() }))
        }
        LayerKind::Conv { .. } => {
            let (w, b) = need_params()?;
            let geom = shape.conv_geom().expect("conv layer");
            let (y, cols) = conv_forward(&geom, x, w, b)?;
            Ok((y, Cache::Conv { cols }))
        }
        LayerKind::Relu => Ok((relu_forward(x), Cache::Relu { input: x.clone() })),
        LayerKind::MaxPool { size, stride } => {
            let (y, argmax) = maxpool_forward(x, shape.input, size, stride)?;
            Ok((y, Cache::Pool { argmax }))
        }
        LayerKind::Dropout { .. } => match dropout_mask {
            Some(mask) => {
                if mask.len() != x.data.len() {
                    return Err(Error::ShapeMismatch("dropout mask length".into()));
                }
                Ok((
                    ops::apply_mask(x, &mask),
                    Cache::Dropout { mask: Some(mask) },
                ))
            }
            None => Ok((x.clone(), Cache::Dropout { mask: None })),
        },
    }
}

/// Parameter gradients `(dW, db)` of a parametric layer.
pub type ParamGrads = (Vec<f64>, Vec<f64>);

pub fn backward_with(
    shape: &LayerShape,
    weights: Option<&[f64]>,
    cache: &Cache,
    dout: &Batch,
    need_dx: bool,
) -> Result<(Option<Batch>, Option<ParamGrads>)> {
    if dout.cols != shape.output.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} layer upstream gradient has {} values, expected {}",
            shape.kind.name(),
            dout.cols,
            shape.output.len()
        )));
    }
    let mismatch = || {
        Error::InvalidArgument(format!(
            "cache does not belong to a {} layer",
            shape.kind.name()
        ))
    };
    let weights_or = || weights.ok_or_else(|| Error::InvalidArgument("missing weights".into()));
    match (shape.kind, cache) {
        (LayerKind::Dense { .. }, Cache::Dense { input }) => {
            let (dx, dw, db) = dense_backward(input, weights_or()?, dout, need_dx)?;
            Ok((dx, Some((dw, db))))
        }
        (LayerKind::Conv { .. }, Cache::Conv { cols }) => {
            let geom = shape.conv_geom().expect("conv layer");
            let (dx, dw, db) = conv_backward(&geom, cols, weights_or()?, dout, need_dx)?;
            Ok((dx, Some((dw, db))))
        }
        (LayerKind::Relu, Cache::Relu { input }) => Ok((Some(relu_backward(input, dout)), None)),
        (LayerKind::MaxPool { .. }, Cache::Pool { argmax }) => Ok((
            Some(maxpool_backward(argmax, shape.input.len(), dout)),
            None,
        )),
        (LayerKind::Dropout { .. }, Cache::Dropout { mask }) => Ok((
            Some(match mask {
                Some(m) => ops::apply_mask(dout, m),
                None => dout.clone(),
            }),
            None,
        )),
        _ => Err(mismatch()),
    }
}

/// Deterministic weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqParams {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl FreqParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(shape: &LayerShape, rng: &mut R) -> Self {
        Self {
            weights: glorot_uniform(shape, rng),
            biases: vec![0.0; shape.bias_count()],
        }
    }
}

/// `U(−s, s)` with `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(shape: &LayerShape, rng: &mut R) -> Vec<f64> {
    let (fi, fo) = shape.fans();
    let s = (6.0 / (fi + fo) as f64).sqrt();
    (0..shape.weight_count())
        .map(|_| rng.random_range(-s..s))
        .collect()
}
