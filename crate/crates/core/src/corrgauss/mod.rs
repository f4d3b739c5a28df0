//! Multivariate normal variational family with tridiagonal covariance.
//!
//! A layer's parameters `w` (length `n`) are modelled as `N(m, Σ)` where
//!
//! * `Σ_ii = τ² m_i²` (standard deviation proportional to the mean),
//! * `Σ_{i,i+1} = ρ τ² |m_i| |m_{i+1}|` (one shared correlation),
//! * every other entry is zero.
//!
//! `Σ = L Lᵀ` with `L` lower bidiagonal (diagonal `a`, subdiagonal `c`), built by
//! a forward recursion that keeps the signs of the means in `c` rather than
//! normalising to a true Cholesky factor. `τ = softplus(δ)` and
//! `ρ = sigmoid(γ) − ½` are the learnable reparameterisations.
//!
//! Two gradient routes are provided:
//!
//! * [`grads`]: explicit derivative tables `∂c_i/∂m_k`, `∂a_i/∂m_k`, ... and the
//!   dense chain rule. Memory and time are `O(n²)`; used for verification and
//!   small layers.
//! * [`adjoint`]: a reverse sweep over the same recursion computing the
//!   gradient of `Σ_l g_l w_l + ν·KL` in `O(n)`; used for training.

pub mod adjoint;
pub mod grads;

use rand::Rng;

use crate::error::{Error, Result};

pub use adjoint::{variational_backward, KlTerm};
pub use grads::{
    chain_rule_backward, factor_grads, kl_grads, weight_grads, FactorGrads, VariationalGrads,
    WeightGrads,
};

/// `γ` values in `(−GAMMA_MIN_ABS, GAMMA_MIN_ABS)` are pushed out to this magnitude
/// (giving `|ρ| ≈ 0.01`).
pub const GAMMA_MIN_ABS: f64 = 0.040_005_33;
pub const GAMMA_MAX_ABS: f64 = 10.0;
/// Floor for `δ`; `softplus(DELTA_FLOOR) ≈ 0.01`.
pub const DELTA_FLOOR: f64 = -4.600_166;
pub const MEAN_MIN_ABS: f64 = 1e-6;
/// Square-root arguments in the recursion must exceed this fraction of `τ² m_i²`.
pub const SQRT_ARG_REL_FLOOR: f64 = 1e-12;

/// Learnable parameters of one variational block (the weights or the biases of a layer).
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    pub mean: Vec<f64>,
    /// Pre-softplus scale.
    pub delta: f64,
    /// Pre-sigmoid correlation.
    pub gamma: f64,
}

impl VariationalParams {
    pub fn new(mean: Vec<f64>, delta: f64, gamma: f64) -> Self {
        Self { mean, delta, gamma }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn tau(&self) -> f64 {
        reparam_tau(self.delta)
    }

    pub fn rho(&self) -> f64 {
        reparam_rho(self.gamma)
    }

    pub fn factor(&self) -> Result<FactorL> {
        build_factor(&self.mean, self.tau(), self.rho())
    }
}

/// Lower bidiagonal factor of the covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorL {
    /// `a_1..a_n`.
    pub diag: Vec<f64>,
    /// `c_1..c_{n-1}`.
    pub sub: Vec<f64>,
    pub tau: f64,
    pub rho: f64,
}

impl FactorL {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// `(diagonal, first off-diagonal)` of `L Lᵀ`.
    pub fn covariance_bands(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len();
        let diag = (0..n)
            .map(|i| {
                let c = if i == 0 { 0.0 } else { self.sub[i - 1] };
                c * c + self.diag[i] * self.diag[i]
            })
            .collect();
        let off = (0..n.saturating_sub(1))
            .map(|i| self.sub[i] * self.diag[i])
            .collect();
        (diag, off)
    }
}

/// Diagonal Gaussian prior `N(μ, ζ² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl PriorSpec {
    pub fn new(mean: Vec<f64>, std: f64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::InvalidScale(format!(
                "prior std must be > 0, got {std}"
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn zero_mean(len: usize, std: f64) -> Result<Self> {
        Self::new(vec![0.0; len], std)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `τ = ln(1 + exp(δ))`.
pub fn reparam_tau(delta: f64) -> f64 {
    if delta > 0.0 {
        delta + (-delta).exp().ln_1p()
    } else {
        delta.exp().ln_1p()
    }
}

/// `ρ = 1/(1 + exp(−γ)) − ½`, evaluated as `½·tanh(γ/2)` so that it is exactly odd.
pub fn reparam_rho(gamma: f64) -> f64 {
    0.5 * (0.5 * gamma).tanh()
}

/// Inverse of [`reparam_tau`].
pub fn delta_for_tau(tau: f64) -> f64 {
    tau.exp_m1().ln()
}

/// `dτ/dδ`.
pub fn tau_slope(delta: f64) -> f64 {
    sigmoid(delta)
}

/// `dρ/dγ = exp(−γ)/(1 + exp(−γ))²`.
pub fn rho_slope(gamma: f64) -> f64 {
    let s = sigmoid(gamma);
    s * (1.0 - s)
}

/// Largest admissible `|ρ|` for a chain of length `n`: `1/(2 cos(π/(n+1)))`.
pub fn rho_bound(n: usize) -> f64 {
    if n <= 1 {
        f64::INFINITY
    } else {
        0.5 / (std::f64::consts::PI / (n as f64 + 1.0)).cos()
    }
}

/// Runs the factor recursion
///
/// ```text
/// c_0 = 0
/// c_i = ρ τ² m_i m_{i+1} / sqrt(τ² m_i² − c_{i−1}²)      i < n
/// a_i = ρ τ² |m_i| |m_{i+1}| / c_i                        i < n
/// a_n = sqrt(τ² m_n² − c_{n−1}²)
/// ```
pub fn build_factor(mean: &[f64], tau: f64, rho: f64) -> Result<FactorL> {
    let n = mean.len();
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidScale(format!("tau must be > 0, got {tau}")));
    }
    if let Some(i) = mean.iter().position(|&m| m == 0.0) {
        return Err(Error::ZeroMean(i));
    }
    let bound = rho_bound(n);
    if n > 1 && (rho == 0.0 || !(rho.abs() < bound)) {
        return Err(Error::InvalidRho { rho, bound, len: n });
    }

    let t2 = tau * tau;
    let mut diag = Vec::with_capacity(n);
    let mut sub = Vec::with_capacity(n.saturating_sub(1));
    let mut c_prev = 0.0;
    for i in 0..n.saturating_sub(1) {
        let var = t2 * mean[i] * mean[i];
        let u = var - c_prev * c_prev;
        if !(u > SQRT_ARG_REL_FLOOR * var) {
            return Err(Error::DegenerateFactor { index: i, value: u });
        }
        let c = rho * t2 * mean[i] * mean[i + 1] / u.sqrt();
        let a = rho * t2 * mean[i].abs() * mean[i + 1].abs() / c;
        sub.push(c);
        diag.push(a);
        c_prev = c;
    }
    if n > 0 {
        let var = t2 * mean[n - 1] * mean[n - 1];
        let y = var - c_prev * c_prev;
        if !(y > SQRT_ARG_REL_FLOOR * var) {
            return Err(Error::DegenerateFactor {
                index: n - 1,
                value: y,
            });
        }
        diag.push(y.sqrt());
    }
    Ok(FactorL {
        diag,
        sub,
        tau,
        rho,
    })
}

/// `w = m + L x`.
pub fn sample(mean: &[f64], factor: &FactorL, noise: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; mean.len()];
    sample_into(mean, factor, noise, &mut out)?;
    Ok(out)
}

pub fn sample_into(mean: &[f64], factor: &FactorL, noise: &[f64], out: &mut [f64]) -> Result<()> {
    let n = mean.len();
    if noise.len() != n || factor.len() != n || out.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "sample: mean {n}, factor {}, noise {}, out {}",
            factor.len(),
            noise.len(),
            out.len()
        )));
    }
    for i in 0..n {
        let mut w = mean[i] + factor.diag[i] * noise[i];
        if i > 0 {
            w += factor.sub[i - 1] * noise[i - 1];
        }
        out[i] = w;
    }
    Ok(())
}

/// `ln |Σ| = Σ_i ln a_i²`.
pub fn log_det_sigma(factor: &FactorL) -> Result<f64> {
    let mut acc = 0.0;
    for (i, &a) in factor.diag.iter().enumerate() {
        if a == 0.0 || !a.is_finite() {
            return Err(Error::DegenerateFactor { index: i, value: a });
        }
        acc += (a * a).ln();
    }
    Ok(acc)
}

/// Full KL divergence `KL(N(m, Σ) || N(μ, ζ² I))`, including the constant terms:
///
/// `½ [ K ln ζ² − Σ ln a_i² + (τ²/ζ²)‖m‖² + ‖m − μ‖²/ζ² − K ]`.
pub fn kl_to_prior(mean: &[f64], tau: f64, factor: &FactorL, prior: &PriorSpec) -> Result<f64> {
    let k = mean.len();
    if prior.mean.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "prior has {} means, variational block {k}",
            prior.mean.len()
        )));
    }
    let z2 = prior.std * prior.std;
    let log_det = log_det_sigma(factor)?;
    let norm2: f64 = mean.iter().map(|m| m * m).sum();
    let dist2: f64 = mean
        .iter()
        .zip(&prior.mean)
        .map(|(m, mu)| (m - mu) * (m - mu))
        .sum();
    let kf = k as f64;
    Ok(0.5 * (kf * z2.ln() - log_det + tau * tau / z2 * norm2 + dist2 / z2 - kf))
}

/// Moves parameters out of numerically critical regions:
///
/// * `|γ| < GAMMA_MIN_ABS` → `±GAMMA_MIN_ABS` (fair coin), then `γ` clamped to `[−10, 10]`;
/// * `δ < DELTA_FLOOR` → `DELTA_FLOOR`;
/// * `|m_k| < MEAN_MIN_ABS` → `±MEAN_MIN_ABS` (fair coin per entry).
pub fn stabilize_params<R: Rng + ?Sized>(
    params: &VariationalParams,
    rng: &mut R,
) -> VariationalParams {
    let mut out = params.clone();
    stabilize_in_place(&mut out, rng);
    out
}

pub fn stabilize_in_place<R: Rng + ?Sized>(params: &mut VariationalParams, rng: &mut R) {
    if params.gamma > -GAMMA_MIN_ABS && params.gamma < GAMMA_MIN_ABS {
        params.gamma = if rng.random_bool(0.5) {
            GAMMA_MIN_ABS
        } else {
            -GAMMA_MIN_ABS
        };
    }
    params.gamma = params.gamma.clamp(-GAMMA_MAX_ABS, GAMMA_MAX_ABS);
    if params.delta < DELTA_FLOOR {
        params.delta = DELTA_FLOOR;
    }
    for m in params.mean.iter_mut() {
        if *m > -MEAN_MIN_ABS && *m < MEAN_MIN_ABS {
            *m = if rng.random_bool(0.5) {
                MEAN_MIN_ABS
            } else {
                -MEAN_MIN_ABS
            };
        }
    }
}
