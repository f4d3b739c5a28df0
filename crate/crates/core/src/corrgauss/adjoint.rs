//! Linear-time reverse sweep through the factor recursion.
//!
//! Computes `∂/∂φ [ Σ_l g_l w_l(φ) + ν·KL(φ) ]` for `φ = (m, δ, γ)` with the
//! noise held fixed. The explicit tables in [`super::grads`] need `O(n²)` work
//! because `c_i` depends on every `m_k` with `k ≤ i+1`; propagating adjoints
//! backwards through the chain `c_{i−1} → (c_i, a_i)` visits each link once.

use super::grads::VariationalGrads;
use super::{rho_slope, tau_slope, FactorL, PriorSpec};
use crate::error::{Error, Result};

/// KL contribution folded into [`variational_backward`].
#[derive(Debug, Clone, Copy)]
pub struct KlTerm<'a> {
    pub prior: &'a PriorSpec,
    /// Multiplier on the KL divergence.
    pub scale: f64,
}

fn sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Gradient of `Σ_l dl_dw[l]·w_l + kl.scale·KL` with respect to `(m, δ, γ)`,
/// where `w = m + L x` with `x = noise`.
pub fn variational_backward(
    mean: &[f64],
    delta: f64,
    gamma: f64,
    factor: &FactorL,
    noise: &[f64],
    dl_dw: &[f64],
    kl: Option<KlTerm<'_>>,
) -> Result<VariationalGrads> {
    let n = mean.len();
    if factor.len() != n || noise.len() != n || dl_dw.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "variational_backward: mean {n}, factor {}, noise {}, upstream {}",
            factor.len(),
            noise.len(),
            dl_dw.len()
        )));
    }
    if let Some(k) = &kl {
        if k.prior.mean.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "prior has {} means, variational block {n}",
                k.prior.mean.len()
            )));
        }
    }
    if n == 0 {
        return Ok(VariationalGrads::zeros(0));
    }
    let tau = factor.tau;
    let rho = factor.rho;
    let t2 = tau * tau;
    let a = &factor.diag;
    let c = &factor.sub;
    let nu = kl.map_or(0.0, |k| k.scale);

    let mut bar_m = dl_dw.to_vec();
    let mut bar_c: Vec<f64> = (0..n - 1).map(|i| dl_dw[i + 1] * noise[i]).collect();
    let bar_a = |i: usize| -> f64 {
        let mut v = dl_dw[i] * noise[i];
        if nu != 0.0 {
            v -= nu / a[i];
        }
        v
    };
    let mut bar_tau = 0.0;
    let mut bar_rho = 0.0;

    // a_n = sqrt(y), y = τ² m_n² − c_{n−1}²
    let last = n - 1;
    let bar_y = bar_a(last) / (2.0 * a[last]);
    bar_m[last] += bar_y * 2.0 * t2 * mean[last];
    bar_tau += bar_y * 2.0 * tau * mean[last] * mean[last];
    if last > 0 {
        bar_c[last - 1] -= bar_y * 2.0 * c[last - 1];
    }

    for i in (0..n - 1).rev() {
        let (mi, mj) = (mean[i], mean[i + 1]);
        let ci = c[i];
        let c_prev = if i == 0 { 0.0 } else { c[i - 1] };
        let r = (t2 * mi * mi - c_prev * c_prev).sqrt();

        // a_i = ρ τ² |m_i| |m_{i+1}| / c_i
        let ba = bar_a(i);
        let abs_prod = mi.abs() * mj.abs();
        bar_c[i] -= ba * rho * t2 * abs_prod / (ci * ci);
        bar_m[i] += ba * rho * t2 * sign(mi) * mj.abs() / ci;
        bar_m[i + 1] += ba * rho * t2 * mi.abs() * sign(mj) / ci;
        bar_tau += ba * 2.0 * rho * tau * abs_prod / ci;
        bar_rho += ba * t2 * abs_prod / ci;

        // c_i = s / r with s = ρ τ² m_i m_{i+1}, r = sqrt(τ² m_i² − c_{i−1}²)
        let bc = bar_c[i];
        let bar_s = bc / r;
        let bar_r = -bc * ci / r;
        bar_m[i] += bar_s * rho * t2 * mj;
        bar_m[i + 1] += bar_s * rho * t2 * mi;
        bar_tau += bar_s * 2.0 * rho * tau * mi * mj;
        bar_rho += bar_s * t2 * mi * mj;

        let bar_u = bar_r / (2.0 * r);
        bar_m[i] += bar_u * 2.0 * t2 * mi;
        bar_tau += bar_u * 2.0 * tau * mi * mi;
        if i > 0 {
            bar_c[i - 1] -= bar_u * 2.0 * c_prev;
        }
    }

    if let Some(k) = kl {
        let z2 = k.prior.std * k.prior.std;
        let mut norm2 = 0.0;
        for (j, bm) in bar_m.iter_mut().enumerate() {
            let m = mean[j];
            *bm += nu * (t2 / z2 * m + (m - k.prior.mean[j]) / z2);
            norm2 += m * m;
        }
        bar_tau += nu * tau / z2 * norm2;
    }

    Ok(VariationalGrads {
        mean: bar_m,
        delta: bar_tau * tau_slope(delta),
        gamma: bar_rho * rho_slope(gamma),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrgauss::{
        build_factor, chain_rule_backward, factor_grads, kl_grads, reparam_rho, reparam_tau,
        weight_grads,
    };

    #[test]
    fn agrees_with_dense_tables() {
        let mean = [0.9, -0.6, 1.4, 0.2, -2.1, 0.75, 1.2];
        let noise = [0.3, -1.2, 0.8, 1.9, -0.4, 0.05, -0.7];
        let up = [1.0, -0.5, 0.25, 2.0, -1.5, 0.6, 0.1];
        let (delta, gamma) = (-1.2, -0.9);
        let f = build_factor(&mean, reparam_tau(delta), reparam_rho(gamma)).unwrap();
        let g = factor_grads(&mean, delta, gamma, &f).unwrap();
        let wg = weight_grads(&noise, &g).unwrap();
        let dense = chain_rule_backward(&up, &wg).unwrap();
        let prior = PriorSpec::new(vec![0.1; 7], 0.8).unwrap();
        let kg = kl_grads(&mean, delta, gamma, &f, &g, &prior).unwrap();
        let nu = 0.37;

        let fast = variational_backward(
            &mean,
            delta,
            gamma,
            &f,
            &noise,
            &up,
            Some(KlTerm {
                prior: &prior,
                scale: nu,
            }),
        )
        .unwrap();
        for k in 0..7 {
            let e = dense.mean[k] + nu * kg.mean[k];
            assert!((fast.mean[k] - e).abs() < 1e-10 * (1.0 + e.abs()), "m{k}");
        }
        let e = dense.delta + nu * kg.delta;
        assert!((fast.delta - e).abs() < 1e-10 * (1.0 + e.abs()));
        let e = dense.gamma + nu * kg.gamma;
        assert!((fast.gamma - e).abs() < 1e-10 * (1.0 + e.abs()));
    }

    #[test]
    fn zero_noise_without_kl_is_identity() {
        let mean = [0.9, -0.6, 1.4];
        let f = build_factor(&mean, 0.3, 0.2).unwrap();
        let up = [0.5, 1.5, -2.5];
        let g = variational_backward(&mean, -1.0, 0.5, &f, &[0.0; 3], &up, None).unwrap();
        assert_eq!(g.mean, up.to_vec());
        assert_eq!(g.delta, 0.0);
        assert_eq!(g.gamma, 0.0);
    }

    #[test]
    fn rejects_mismatched_lengths() {
        let f = build_factor(&[1.0, 2.0], 0.3, 0.2).unwrap();
        assert!(
            variational_backward(&[1.0, 2.0], 0.0, 0.5, &f, &[0.0], &[0.0, 0.0], None).is_err()
        );
    }
}
