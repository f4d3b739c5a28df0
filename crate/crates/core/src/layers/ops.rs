//! Classical forward and backward kernels.
//!
//! Work is split across examples or across output units, never across a
//! summation, so every reduction runs in the same order regardless of the
//! number of threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Batch, Shape};

fn check_cols(x: &Batch, expect: usize, what: &str) -> Result<()> {
    if x.cols != expect {
        return Err(Error::ShapeMismatch(format!(
            "{what}: expected {expect} values per example, got {}",
            x.cols
        )));
    }
    Ok(())
}

fn check_len(v: &[f64], expect: usize, what: &str) -> Result<()> {
    if v.len() != expect {
        return Err(Error::ShapeMismatch(format!(
            "{what}: expected {expect} values, got {}",
            v.len()
        )));
    }
    Ok(())
}

/// `y_n = W x_n + b` with `W` stored as `fan_out` rows of `fan_in`.
pub fn dense_forward(x: &Batch, w: &[f64], b: &[f64]) -> Result<Batch> {
    let fan_out = b.len();
    let fan_in = x.cols;
    check_len(w, fan_in * fan_out, "dense weights")?;
    let mut out = Batch::zeros(x.rows, fan_out);
    out.data
        .par_chunks_mut(fan_out.max(1))
        .zip(x.data.par_chunks(fan_in.max(1)))
        .for_each(|(y, xn)| {
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                *yo = b[o] + dot(row, xn);
            }
        });
    Ok(out)
}

/// Returns `(dx, dW, db)`; `dx` is skipped when `need_dx` is false.
pub fn dense_backward(
    x: &Batch,
    w: &[f64],
    dout: &Batch,
    need_dx: bool,
) -> Result<(Option<Batch>, Vec<f64>, Vec<f64>)> {
    let fan_in = x.cols;
    let fan_out = dout.cols;
    check_len(w, fan_in * fan_out, "dense weights")?;
    if dout.rows != x.rows {
        return Err(Error::ShapeMismatch(
            "dense backward: batch sizes differ".into(),
        ));
    }
    let mut dw = vec![0.0; fan_in * fan_out];
    dw.par_chunks_mut(fan_in.max(1))
        .enumerate()
        .for_each(|(o, row)| {
            for n in 0..x.rows {
                let g = dout.data[n * fan_out + o];
                if g != 0.0 {
                    axpy(g, x.row(n), row);
                }
            }
        });
    let db: Vec<f64> = (0..fan_out)
        .map(|o| (0..dout.rows).map(|n| dout.data[n * fan_out + o]).sum())
        .collect();
    let dx = need_dx.then(|| {
        let mut dx = Batch::zeros(x.rows, fan_in);
        dx.data
            .par_chunks_mut(fan_in.max(1))
            .zip(dout.data.par_chunks(fan_out.max(1)))
            .for_each(|(dxn, g)| {
                for (o, &go) in g.iter().enumerate() {
                    if go != 0.0 {
                        axpy(go, &w[o * fan_in..(o + 1) * fan_in], dxn);
                    }
                }
            });
        dx
    });
    Ok((dx, dw, db))
}

/// Stride-1 convolution with symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: Shape,
    pub out_channels: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn output(&self) -> Result<Shape> {
        let h = self.input.height + 2 * self.pad;
        let w = self.input.width + 2 * self.pad;
        if self.kernel == 0 || self.kernel > h || self.kernel > w {
            return Err(Error::ShapeMismatch(format!(
                "kernel {} does not fit input {} with padding {}",
                self.kernel, self.input, self.pad
            )));
        }
        Ok(Shape::new(
            self.out_channels,
            h - self.kernel + 1,
            w - self.kernel + 1,
        ))
    }

    /// Rows of the lowered input: one per (in_channel, ky, kx).
    pub fn patch_len(&self) -> usize {
        self.input.channels * self.kernel * self.kernel
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.patch_len()
    }
}

/// Lowers one example to a `patch_len × (out_h·out_w)` matrix.
pub fn im2col(geom: &ConvGeom, x: &[f64]) -> Result<Vec<f64>> {
    let out = geom.output()?;
    let (ih, iw) = (geom.input.height as isize, geom.input.width as isize);
    let k = geom.kernel;
    let p = out.height * out.width;
    let mut cols = vec![0.0; geom.patch_len() * p];
    for c in 0..geom.input.channels {
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let dst = &mut cols[r * p..(r + 1) * p];
                for oy in 0..out.height {
                    let y = (oy + ky) as isize - geom.pad as isize;
                    if y < 0 || y >= ih {
                        continue;
                    }
                    let src = (c as isize * ih + y) * iw;
                    for ox in 0..out.width {
                        let xx = (ox + kx) as isize - geom.pad as isize;
                        if xx >= 0 && xx < iw {
                            dst[oy * out.width + ox] = x[(src + xx) as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(cols)
}

/// Adjoint of [`im2col`]: scatters a lowered gradient back onto the input.
pub fn col2im(geom: &ConvGeom, cols: &[f64]) -> Result<Vec<f64>> {
    let out = geom.output()?;
    let (ih, iw) = (geom.input.height as isize, geom.input.width as isize);
    let k = geom.kernel;
    let p = out.height * out.width;
    let mut x = vec![0.0; geom.input.len()];
    for c in 0..geom.input.channels {
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let src = &cols[r * p..(r + 1) * p];
                for oy in 0..out.height {
                    let y = (oy + ky) as isize - geom.pad as isize;
                    if y < 0 || y >= ih {
                        continue;
                    }
                    let dst = (c as isize * ih + y) * iw;
                    for ox in 0..out.width {
                        let xx = (ox + kx) as isize - geom.pad as isize;
                        if xx >= 0 && xx < iw {
                            x[(dst + xx) as usize] += src[oy * out.width + ox];
                        }
                    }
                }
            }
        }
    }
    Ok(x)
}

/// Returns the output and the lowered inputs needed by [`conv_backward`].
pub fn conv_forward(
    geom: &ConvGeom,
    x: &Batch,
    w: &[f64],
    b: &[f64],
) -> Result<(Batch, Vec<Vec<f64>>)> {
    check_cols(x, geom.input.len(), "conv input")?;
    check_len(w, geom.weight_count(), "conv weights")?;
    check_len(b, geom.out_channels, "conv biases")?;
    let out_shape = geom.output()?;
    let p = out_shape.height * out_shape.width;
    let rlen = geom.patch_len();
    let cols: Vec<Vec<f64>> = x
        .data
        .par_chunks(x.cols.max(1))
        .map(|xn| im2col(geom, xn))
        .collect::<Result<_>>()?;
    let mut out = Batch::zeros(x.rows, out_shape.len());
    out.data
        .par_chunks_mut(out_shape.len().max(1))
        .zip(cols.par_iter())
        .for_each(|(y, cn)| {
            for oc in 0..geom.out_channels {
                let yo = &mut y[oc * p..(oc + 1) * p];
                yo.fill(b[oc]);
                let wrow = &w[oc * rlen..(oc + 1) * rlen];
                for (r, &wr) in wrow.iter().enumerate() {
                    axpy(wr, &cn[r * p..(r + 1) * p], yo);
                }
            }
        });
    Ok((out, cols))
}

pub fn conv_backward(
    geom: &ConvGeom,
    cols: &[Vec<f64>],
    w: &[f64],
    dout: &Batch,
    need_dx: bool,
) -> Result<(Option<Batch>, Vec<f64>, Vec<f64>)> {
    let out_shape = geom.output()?;
    check_cols(dout, out_shape.len(), "conv upstream")?;
    if cols.len() != dout.rows {
        return Err(Error::ShapeMismatch(
            "conv backward: batch sizes differ".into(),
        ));
    }
    let p = out_shape.height * out_shape.width;
    let rlen = geom.patch_len();
    let mut dw = vec![0.0; geom.weight_count()];
    dw.par_chunks_mut(rlen.max(1))
        .enumerate()
        .for_each(|(oc, row)| {
            for (n, cn) in cols.iter().enumerate() {
                let g = &dout.row(n)[oc * p..(oc + 1) * p];
                for (r, dr) in row.iter_mut().enumerate() {
                    *dr += dot(g, &cn[r * p..(r + 1) * p]);
                }
            }
        });
    let db: Vec<f64> = (0..geom.out_channels)
        .map(|oc| {
            (0..dout.rows)
                .map(|n| dout.row(n)[oc * p..(oc + 1) * p].iter().sum::<f64>())
                .sum()
        })
        .collect();
    let dx = if need_dx {
        let rows: Vec<Vec<f64>> = dout
            .data
            .par_chunks(dout.cols.max(1))
            .map(|g| {
                let mut dcols = vec![0.0; rlen * p];
                for oc in 0..geom.out_channels {
                    let go = &g[oc * p..(oc + 1) * p];
                    for r in 0..rlen {
                        let wr = w[oc * rlen + r];
                        if wr != 0.0 {
                            axpy(wr, go, &mut dcols[r * p..(r + 1) * p]);
                        }
                    }
                }
                col2im(geom, &dcols)
            })
            .collect::<Result<_>>()?;
        Some(Batch::from_vec(dout.rows, geom.input.len(), rows.concat())?)
    } else {
        None
    };
    Ok((dx, dw, db))
}

pub fn relu_forward(x: &Batch) -> Batch {
    Batch {
        rows: x.rows,
        cols: x.cols,
        data: x
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect(),
    }
}

/// Gradient passes where the input was strictly positive.
pub fn relu_backward(x: &Batch, dout: &Batch) -> Batch {
    Batch {
        rows: x.rows,
        cols: x.cols,
        data: x
            .data
            .iter()
            .zip(&dout.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

pub fn pool_output(input: Shape, size: usize, stride: usize) -> Result<Shape> {
    if size == 0 || stride == 0 || size > input.height || size > input.width {
        return Err(Error::ShapeMismatch(format!(
            "pool window {size} stride {stride} does not fit {input}"
        )));
    }
    Ok(Shape::new(
        input.channels,
        (input.height - size) / stride + 1,
        (input.width - size) / stride + 1,
    ))
}

/// Max pooling; each output records the flat input index it came from.
/// Ties go to the first maximum in row-major window order.
pub fn maxpool_forward(
    x: &Batch,
    input: Shape,
    size: usize,
    stride: usize,
) -> Result<(Batch, Vec<usize>)> {
    check_cols(x, input.len(), "pool input")?;
    let out = pool_output(input, size, stride)?;
    let mut y = Batch::zeros(x.rows, out.len());
    let mut arg = vec![0usize; x.rows * out.len()];
    y.data
        .par_chunks_mut(out.len().max(1))
        .zip(arg.par_chunks_mut(out.len().max(1)))
        .zip(x.data.par_chunks(input.len().max(1)))
        .for_each(|((yn, an), xn)| {
            for c in 0..out.channels {
                for oy in 0..out.height {
                    for ox in 0..out.width {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = usize::MAX;
                        for dy in 0..size {
                            let row = (c * input.height + oy * stride + dy) * input.width;
                            for dx in 0..size {
                                let i = row + ox * stride + dx;
                                if best_i == usize::MAX || xn[i] > best {
                                    best = xn[i];
                                    best_i = i;
                                }
                            }
                        }
                        let o = (c * out.height + oy) * out.width + ox;
                        yn[o] = best;
                        an[o] = best_i;
                    }
                }
            }
        });
    Ok((y, arg))
}

pub fn maxpool_backward(argmax: &[usize], input_len: usize, dout: &Batch) -> Batch {
    let mut dx = Batch::zeros(dout.rows, input_len);
    dx.data
        .par_chunks_mut(input_len.max(1))
        .zip(dout.data.par_chunks(dout.cols.max(1)))
        .zip(argmax.par_chunks(dout.cols.max(1)))
        .for_each(|((dxn, g), an)| {
            for (o, &i) in an.iter().enumerate() {
                dxn[i] += g[o];
            }
        });
    dx
}

/// Inverted dropout: kept units are scaled by `1/(1 − rate)`.
pub fn dropout_mask<R: rand::Rng + ?Sized>(rng: &mut R, len: usize, rate: f64) -> Vec<f64> {
    let scale = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                scale
            }
        })
        .collect()
}

pub fn apply_mask(x: &Batch, mask: &[f64]) -> Batch {
    Batch {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().zip(mask).map(|(a, b)| a * b).collect(),
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// `(−ln softmax(z)_label, softmax(z) − e_label)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::IndexOutOfBounds {
            index: vec![label],
            shape: vec![logits.len()],
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + s.ln();
    let loss = lse - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
