//! Explicit derivative tables of the factor recursion.
//!
//! Row `i` of `dsub_dmean` holds `∂c_i/∂m_k` for `k = 0..=i+1`; row `i` of
//! `ddiag_dmean` holds `∂a_i/∂m_k` for `k = 0..=min(i+1, n-1)`. Entries with
//! `k > i+1` are structurally zero and not stored. Storage is `O(n²)`.

use super::{reparam_rho, reparam_tau, rho_slope, tau_slope, FactorL, PriorSpec};
use crate::error::{Error, Result};

/// Gradient of a scalar with respect to one variational block.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalGrads {
    pub mean: Vec<f64>,
    pub delta: f64,
    pub gamma: f64,
}

impl VariationalGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            delta: 0.0,
            gamma: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FactorGrads {
    pub dsub_dmean: Vec<Vec<f64>>,
    pub ddiag_dmean: Vec<Vec<f64>>,
    /// `∂c_i/∂τ`, before the `dτ/dδ` factor.
    pub dsub_dtau: Vec<f64>,
    /// `∂c_i/∂ρ`, before the `dρ/dγ` factor.
    pub dsub_drho: Vec<f64>,
    pub ddiag_dtau: Vec<f64>,
    pub ddiag_drho: Vec<f64>,
    pub dsub_ddelta: Vec<f64>,
    pub ddiag_ddelta: Vec<f64>,
    pub dsub_dgamma: Vec<f64>,
    pub ddiag_dgamma: Vec<f64>,
    /// `u_i = τ² m_i² − c_{i−1}²` for `i < n`.
    pub u: Vec<f64>,
    /// `y = τ² m_n² − c_{n−1}²`.
    pub y: f64,
    /// `exp(δ)/(1 + exp(δ))`.
    pub w_delta: f64,
    /// `exp(−γ)/(1 + exp(−γ))²`.
    pub w_gamma: f64,
}

impl FactorGrads {
    pub fn len(&self) -> usize {
        self.ddiag_dmean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ddiag_dmean.is_empty()
    }

    /// `∂c_i/∂m_k` with `i` indexing the subdiagonal from 0.
    pub fn dsub(&self, i: usize, k: usize) -> f64 {
        self.dsub_dmean[i].get(k).copied().unwrap_or(0.0)
    }

    pub fn ddiag(&self, i: usize, k: usize) -> f64 {
        self.ddiag_dmean[i].get(k).copied().unwrap_or(0.0)
    }
}

fn sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Derivatives of every `c_i` and `a_i` with respect to `m`, `δ` and `γ`.
///
/// `factor` must have been built from `(mean, reparam_tau(delta), reparam_rho(gamma))`.
pub fn factor_grads(mean: &[f64], delta: f64, gamma: f64, factor: &FactorL) -> Result<FactorGrads> {
    let n = mean.len();
    if factor.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "factor_grads: mean {n}, factor {}",
            factor.len()
        )));
    }
    let tau = reparam_tau(delta);
    let rho = reparam_rho(gamma);
    let t2 = tau * tau;
    let w_delta = tau_slope(delta);
    let w_gamma = rho_slope(gamma);
    let c = &factor.sub;

    let mut dsub_dmean: Vec<Vec<f64>> = Vec::with_capacity(n.saturating_sub(1));
    let mut ddiag_dmean: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut dsub_dtau = Vec::with_capacity(n.saturating_sub(1));
    let mut dsub_drho = Vec::with_capacity(n.saturating_sub(1));
    let mut ddiag_dtau = Vec::with_capacity(n);
    let mut ddiag_drho = Vec::with_capacity(n);
    let mut u_all = Vec::with_capacity(n.saturating_sub(1));

    for i in 0..n.saturating_sub(1) {
        let (mi, mj) = (mean[i], mean[i + 1]);
        let (c_prev, dcp_dtau, dcp_drho) = if i == 0 {
            (0.0, 0.0, 0.0)
        } else {
            (c[i - 1], dsub_dtau[i - 1], dsub_drho[i - 1])
        };
        let dcp = |k: usize| -> f64 {
            if i == 0 {
                0.0
            } else {
                dsub_dmean[i - 1].get(k).copied().unwrap_or(0.0)
            }
        };
        let u = t2 * mi * mi - c_prev * c_prev;
        if !(u > 0.0) {
            return Err(Error::DegenerateFactor { index: i, value: u });
        }
        let su = u.sqrt();
        let v = rho * t2 * mj;
        let num = rho * t2 * mi * mj;

        let mut row_c = vec![0.0; i + 2];
        for (k, slot) in row_c.iter_mut().enumerate().take(i) {
            *slot = num * u.powf(-1.5) * c_prev * dcp(k);
        }
        row_c[i] = v * (su - mi / su * (t2 * mi - c_prev * dcp(i))) / u;
        row_c[i + 1] = rho * t2 * mi / su;

        let dc_dtau =
            v * mi * (2.0 * su - tau / su * (tau * mi * mi - c_prev * dcp_dtau)) / (tau * u);
        let dc_drho = t2 * mi * mj * (su - rho / su * (-c_prev * dcp_drho)) / u;

        let ci = c[i];
        let ci2 = ci * ci;
        let p = rho * t2 * mi.abs() * mj.abs();
        let mut row_a = vec![0.0; i + 2];
        for k in 0..i {
            row_a[k] = -p / ci2 * row_c[k];
        }
        row_a[i] = rho * t2 * mj.abs() * (sign(mi) * ci - mi.abs() * row_c[i]) / ci2;
        row_a[i + 1] = rho * t2 * mi.abs() * (sign(mj) * ci - mj.abs() * row_c[i + 1]) / ci2;
        let da_dtau = rho * tau * mi.abs() * mj.abs() * (2.0 * ci - tau * dc_dtau) / ci2;
        let da_drho = t2 * mi.abs() * mj.abs() * (ci - rho * dc_drho) / ci2;

        dsub_dmean.push(row_c);
        ddiag_dmean.push(row_a);
        dsub_dtau.push(dc_dtau);
        dsub_drho.push(dc_drho);
        ddiag_dtau.push(da_dtau);
        ddiag_drho.push(da_drho);
        u_all.push(u);
    }

    let mut y = 0.0;
    if n > 0 {
        let last = n - 1;
        let ml = mean[last];
        let (c_last, dcl_dtau, dcl_drho) = if last == 0 {
            (0.0, 0.0, 0.0)
        } else {
            (c[last - 1], dsub_dtau[last - 1], dsub_drho[last - 1])
        };
        let dcl = |k: usize| -> f64 {
            if last == 0 {
                0.0
            } else {
                dsub_dmean[last - 1][k]
            }
        };
        y = t2 * ml * ml - c_last * c_last;
        if !(y > 0.0) {
            return Err(Error::DegenerateFactor {
                index: last,
                value: y,
            });
        }
        let sy = y.sqrt();
        let mut row_a = vec![0.0; n];
        for (k, slot) in row_a.iter_mut().enumerate().take(last) {
            *slot = -c_last * dcl(k) / sy;
        }
        row_a[last] = (t2 * ml - c_last * dcl(last)) / sy;
        ddiag_dmean.push(row_a);
        ddiag_dtau.push((tau * ml * ml - c_last * dcl_dtau) / sy);
        ddiag_drho.push(-c_last * dcl_drho / sy);
    }

    let scale = |v: &[f64], s: f64| v.iter().map(|x| x * s).collect::<Vec<_>>();
    Ok(FactorGrads {
        dsub_ddelta: scale(&dsub_dtau, w_delta),
        ddiag_ddelta: scale(&ddiag_dtau, w_delta),
        dsub_dgamma: scale(&dsub_drho, w_gamma),
        ddiag_dgamma: scale(&ddiag_drho, w_gamma),
        dsub_dmean,
        ddiag_dmean,
        dsub_dtau,
        dsub_drho,
        ddiag_dtau,
        ddiag_drho,
        u: u_all,
        y,
        w_delta,
        w_gamma,
    })
}

/// Jacobian of the sampled block `w = m + L x` with respect to the variational
/// parameters, at a fixed noise draw `x`.
#[derive(Debug, Clone)]
pub struct WeightGrads {
    /// Row `i` holds `∂w_i/∂m_k` for `k = 0..=min(i+1, n-1)`.
    pub dw_dmean: Vec<Vec<f64>>,
    pub dw_ddelta: Vec<f64>,
    pub dw_dgamma: Vec<f64>,
}

pub fn weight_grads(noise: &[f64], grads: &FactorGrads) -> Result<WeightGrads> {
    let n = grads.len();
    if noise.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "weight_grads: noise {}, block {n}",
            noise.len()
        )));
    }
    let mut dw_dmean = Vec::with_capacity(n);
    let mut dw_ddelta = Vec::with_capacity(n);
    let mut dw_dgamma = Vec::with_capacity(n);
    for i in 0..n {
        let width = (i + 2).min(n);
        let mut row = vec![0.0; width];
        for (k, slot) in row.iter_mut().enumerate() {
            let mut d = grads.ddiag(i, k) * noise[i];
            if i > 0 {
                d += grads.dsub(i - 1, k) * noise[i - 1];
            }
            if k == i {
                d += 1.0;
            }
            *slot = d;
        }
        dw_dmean.push(row);
        let mut dd = grads.ddiag_ddelta[i] * noise[i];
        let mut dg = grads.ddiag_dgamma[i] * noise[i];
        if i > 0 {
            dd += grads.dsub_ddelta[i - 1] * noise[i - 1];
            dg += grads.dsub_dgamma[i - 1] * noise[i - 1];
        }
        dw_ddelta.push(dd);
        dw_dgamma.push(dg);
    }
    Ok(WeightGrads {
        dw_dmean,
        dw_ddelta,
        dw_dgamma,
    })
}

/// `∂L/∂φ = Σ_l (∂L/∂w_l)(∂w_l/∂φ)` for `φ ∈ {m_k, δ, γ}`.
///
/// Each row of the Jacobian is visited once, so the cost is the number of
/// stored entries (`O(n²)` for the dense tables).
pub fn chain_rule_backward(dl_dw: &[f64], wgrads: &WeightGrads) -> Result<VariationalGrads> {
    let n = wgrads.dw_dmean.len();
    if dl_dw.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "chain_rule_backward: upstream {}, block {n}",
            dl_dw.len()
        )));
    }
    let mut out = VariationalGrads::zeros(n);
    for (l, row) in wgrads.dw_dmean.iter().enumerate() {
        let g = dl_dw[l];
        if g == 0.0 {
            continue;
        }
        for (k, d) in row.iter().enumerate() {
            out.mean[k] += g * d;
        }
        out.delta += g * wgrads.dw_ddelta[l];
        out.gamma += g * wgrads.dw_dgamma[l];
    }
    Ok(out)
}

/// Gradient of [`super::kl_to_prior`] from the derivative tables.
pub fn kl_grads(
    mean: &[f64],
    delta: f64,
    _gamma: f64,
    factor: &FactorL,
    grads: &FactorGrads,
    prior: &PriorSpec,
) -> Result<VariationalGrads> {
    let n = mean.len();
    if prior.mean.len() != n || grads.len() != n || factor.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "kl_grads: mean {n}, prior {}, grads {}, factor {}",
            prior.mean.len(),
            grads.len(),
            factor.len()
        )));
    }
    if let Some(i) = factor.diag.iter().position(|&a| a == 0.0) {
        return Err(Error::DegenerateFactor {
            index: i,
            value: 0.0,
        });
    }
    let tau = factor.tau;
    let z2 = prior.std * prior.std;
    let mut out = VariationalGrads::zeros(n);
    for (i, row) in grads.ddiag_dmean.iter().enumerate() {
        let inv_a = 1.0 / factor.diag[i];
        for (k, d) in row.iter().enumerate() {
            out.mean[k] -= inv_a * d;
        }
        out.delta -= inv_a * grads.ddiag_ddelta[i];
        out.gamma -= inv_a * grads.ddiag_dgamma[i];
    }
    let mut norm2 = 0.0;
    for k in 0..n {
        out.mean[k] += tau * tau / z2 * mean[k] + (mean[k] - prior.mean[k]) / z2;
        norm2 += mean[k] * mean[k];
    }
    out.delta += tau_slope(delta) * tau / z2 * norm2;
    Ok(out)
}
