//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "CBNN" | u32 version | u8 mode | u32 c, h, w | u32 classes | u32 layer count
//! per layer: u8 kind, kind fields, f64 prior mean, f64 prior std, f64 weight decay,
//!            u8 params (0 none, 1 variational, 2 deterministic), payload
//! u64 len + f64 velocity | u64 iteration | u64 seed
//! ```
//!
//! A variational block is `u64 n, n×f64 mean, f64 δ, f64 γ, n×f64 prior mean,
//! f64 prior std`; a deterministic layer is `u64 n, n×f64 weights, u64 k, k×f64 biases`.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::corrgauss::{PriorSpec, VariationalParams};
use crate::error::{Error, Result};
use crate::layers::{BayesLayerState, FreqParams, LayerKind};
use crate::tensor::Shape;

use super::{Architecture, LayerParams, LayerSpec, Mode, Network};

pub const MAGIC: &[u8; 4] = b"CBNN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: Network,
    /// Momentum buffer in the [`Network::params_flat`] layout.
    pub velocity: Vec<f64>,
    /// Completed training iterations.
    pub iteration: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(net: Network, seed: u64) -> Self {
        let velocity = vec![0.0; net.param_count()];
        Self {
            net,
            velocity,
            iteration: 0,
            seed,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_checkpoint(&mut out, self).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format(format!(
                "missing magic bytes {:?}",
                String::from_utf8_lossy(MAGIC)
            )));
        }
        let mut r = Cursor::new(bytes);
        r.set_position(4);
        let ck = read_body(&mut r).map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
                Error::CorruptCheckpoint("file ends early".into())
            }
            other => other,
        })?;
        if (r.position() as usize) != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.position() as usize
            )));
        }
        Ok(ck)
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, ck)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}

fn write_f64s<W: Write>(w: &mut W, v: &[f64]) -> std::io::Result<()> {
    w.write_u64::<LE>(v.len() as u64)?;
    for &x in v {
        w.write_f64::<LE>(x)?;
    }
    Ok(())
}

fn write_block<W: Write>(
    w: &mut W,
    p: &VariationalParams,
    prior: &PriorSpec,
) -> std::io::Result<()> {
    write_f64s(w, &p.mean)?;
    w.write_f64::<LE>(p.delta)?;
    w.write_f64::<LE>(p.gamma)?;
    for &x in &prior.mean {
        w.write_f64::<LE>(x)?;
    }
    w.write_f64::<LE>(prior.std)
}

fn write_checkpoint<W: Write>(w: &mut W, ck: &Checkpoint) -> std::io::Result<()> {
    let net = &ck.net;
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u8(match net.mode {
        Mode::Bayes => 0,
        Mode::Freq => 1,
    })?;
    let s = net.arch.input;
    for d in [
        s.channels,
        s.height,
        s.width,
        net.arch.classes,
        net.arch.layers.len(),
    ] {
        w.write_u32::<LE>(d as u32)?;
    }
    for (spec, p) in net.arch.layers.iter().zip(&net.layers) {
        match spec.kind {
            LayerKind::Dense { outputs } => {
                w.write_u8(0)?;
                w.write_u32::<LE>(outputs as u32)?;
            }
            LayerKind::Conv {
                out_channels,
                kernel,
                pad,
            } => {
                w.write_u8(1)?;
                for d in [out_channels, kernel, pad] {
                    w.write_u32::<LE>(d as u32)?;
                }
            }
            LayerKind::Relu => w.write_u8(2)?,
            LayerKind::MaxPool { size, stride } => {
                w.write_u8(3)?;
                w.write_u32::<LE>(size as u32)?;
                w.write_u32::<LE>(stride as u32)?;
            }
            LayerKind::Dropout { rate } => {
                w.write_u8(4)?;
                w.write_f64::<LE>(rate)?;
            }
        }
        w.write_f64::<LE>(spec.prior_mean)?;
        w.write_f64::<LE>(spec.prior_std)?;
        w.write_f64::<LE>(spec.weight_decay)?;
        match p {
            LayerParams::None => w.write_u8(0)?,
            LayerParams::Bayes(st) => {
                w.write_u8(1)?;
                write_block(w, &st.weights, &st.weight_prior)?;
                write_block(w, &st.biases, &st.bias_prior)?;
            }
            LayerParams::Freq(f) => {
                w.write_u8(2)?;
                write_f64s(w, &f.weights)?;
                write_f64s(w, &f.biases)?;
            }
        }
    }
    write_f64s(w, &ck.velocity)?;
    w.write_u64::<LE>(ck.iteration)?;
    w.write_u64::<LE>(ck.seed)
}

fn read_len(r: &mut Cursor<&[u8]>) -> Result<usize> {
    let n = r.read_u64::<LE>()?;
    let remaining = r.get_ref().len() as u64 - r.position();
    if n > remaining / 8 {
        return Err(Error::CorruptCheckpoint(format!(
            "vector of {n} values exceeds the {remaining} remaining bytes"
        )));
    }
    Ok(n as usize)
}

fn read_n(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| Ok(r.read_f64::<LE>()?)).collect()
}

fn read_f64s(r: &mut Cursor<&[u8]>) -> Result<Vec<f64>> {
    let n = read_len(r)?;
    read_n(r, n)
}

fn read_block(r: &mut Cursor<&[u8]>) -> Result<(VariationalParams, PriorSpec)> {
    let mean = read_f64s(r)?;
    let delta = r.read_f64::<LE>()?;
    let gamma = r.read_f64::<LE>()?;
    let prior_mean = read_n(r, mean.len())?;
    let std = r.read_f64::<LE>()?;
    Ok((
        VariationalParams::new(mean, delta, gamma),
        PriorSpec {
            mean: prior_mean,
            std,
        },
    ))
}

fn read_body(r: &mut Cursor<&[u8]>) -> Result<Checkpoint> {
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let mode = match r.read_u8()? {
        0 => Mode::Bayes,
        1 => Mode::Freq,
        t => return Err(Error::CorruptCheckpoint(format!("unknown mode tag {t}"))),
    };
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.read_u32::<LE>()? as usize;
    }
    let input = Shape::new(dims[0], dims[1], dims[2]);
    let (classes, count) = (dims[3], dims[4]);
    let mut specs = Vec::new();
    let mut params = Vec::new();
    for j in 0..count {
        let u = |r: &mut Cursor<&[u8]>| -> Result<usize> { Ok(r.read_u32::<LE>()? as usize) };
        let kind = match r.read_u8()? {
            0 => LayerKind::Dense { outputs: u(r)? },
            1 => LayerKind::Conv {
                out_channels: u(r)?,
                kernel: u(r)?,
                pad: u(r)?,
            },
            2 => LayerKind::Relu,
            3 => LayerKind::MaxPool {
                size: u(r)?,
                stride: u(r)?,
            },
            4 => LayerKind::Dropout {
                rate: r.read_f64::<LE>()?,
            },
            t => {
                return Err(Error::CorruptCheckpoint(format!(
                    "layer {j}: unknown kind tag {t}"
                )))
            }
        };
        specs.push(LayerSpec {
            kind,
            prior_mean: r.read_f64::<LE>()?,
            prior_std: r.read_f64::<LE>()?,
            weight_decay: r.read_f64::<LE>()?,
        });
        params.push(match r.read_u8()? {
            0 => LayerParams::None,
            1 => {
                let (w, wp) = read_block(r)?;
                let (b, bp) = read_block(r)?;
                LayerParams::Bayes(BayesLayerState::new(w, b, wp, bp)?)
            }
            2 => LayerParams::Freq(FreqParams {
                weights: read_f64s(r)?,
                biases: read_f64s(r)?,
            }),
            t => {
                return Err(Error::CorruptCheckpoint(format!(
                    "layer {j}: unknown parameter tag {t}"
                )))
            }
        });
    }
    let velocity = read_f64s(r)?;
    let iteration = r.read_u64::<LE>()?;
    let seed = r.read_u64::<LE>()?;
    let arch = Architecture {
        input,
        classes,
        layers: specs,
    };
    let net = Network::from_parts(mode, arch, params)
        .map_err(|e| Error::CorruptCheckpoint(format!("inconsistent network: {e}")))?;
    if velocity.len() != net.param_count() {
        return Err(Error::CorruptCheckpoint(format!(
            "velocity has {} entries for {} parameters",
            velocity.len(),
            net.param_count()
        )));
    }
    Ok(Checkpoint {
        net,
        velocity,
        iteration,
        seed,
    })
}
