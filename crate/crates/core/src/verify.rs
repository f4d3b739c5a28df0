//! Independent numerical oracles for the variational kernel.
//!
//! Nothing here calls the factor recursion to produce a reference value: the
//! covariance is assembled entry by entry from the variance and covariance
//! formulas, factorised with a plain dense Cholesky, and densities are
//! evaluated through that factor. The check suites at the bottom compare the
//! kernel against these oracles and are shared by `cbnn verify` and the
//! acceptance tests.

use rand::Rng;

use crate::corrgauss::{
    self, build_factor, chain_rule_backward, factor_grads, kl_grads, kl_to_prior, reparam_rho,
    reparam_tau, variational_backward, weight_grads, KlTerm, PriorSpec,
};
use crate::error::{Error, Result};
use crate::rng::{keyed, standard_normals, Purpose};

pub type DenseMatrix = Vec<Vec<f64>>;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Central differences `(f(p + h e_k) − f(p − h e_k)) / 2h`.
pub fn finite_diff<F>(f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut p = point.to_vec();
    (0..point.len())
        .map(|k| {
            let orig = p[k];
            p[k] = orig + step;
            let up = f(&p);
            p[k] = orig - step;
            let down = f(&p);
            p[k] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest componentwise relative error between two gradient vectors.
///
/// Each component is measured against `max(|a|, |b|, 1e-3·‖b‖_∞)`, so entries
/// that are tiny compared with the rest of the vector are judged on the scale
/// of the vector rather than their own (where central differences are limited
/// by round-off).
pub fn grad_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric
        .iter()
        .chain(analytic)
        .fold(0.0f64, |acc, x| acc.max(x.abs()));
    let floor = (1e-3 * scale).max(1e-10);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `Σ` with `τ² m_i²` on the diagonal and `ρ τ² |m_i| |m_{i+1}|` beside it.
pub fn dense_sigma(mean: &[f64], tau: f64, rho: f64) -> DenseMatrix {
    let n = mean.len();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        s[i][i] = tau * tau * mean[i] * mean[i];
        if i + 1 < n {
            let c = rho * tau * tau * mean[i].abs() * mean[i + 1].abs();
            s[i][i + 1] = c;
            s[i + 1][i] = c;
        }
    }
    s
}

/// Dense Cholesky–Banachiewicz factorisation with positive diagonal.
pub fn reference_cholesky(matrix: &[Vec<f64>]) -> Result<DenseMatrix> {
    let n = matrix.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = matrix[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(sum > 0.0) {
                    return Err(Error::NotPositiveDefinite {
                        pivot: i,
                        value: sum,
                    });
                }
                l[i][i] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Ok(l)
}

fn forward_solve(l: &[Vec<f64>], b: &[f64], out: &mut [f64]) {
    for i in 0..b.len() {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * out[k];
        }
        out[i] = s / l[i][i];
    }
}

/// Monte-Carlo estimate of `E_q[ln q(w) − ln p(w)]` and its standard error.
///
/// Draws `w = m + L_ref x` with `L_ref` the dense Cholesky factor of
/// [`dense_sigma`], and evaluates `ln q` by a triangular solve against the same
/// factor.
pub fn mc_kl(
    mean: &[f64],
    tau: f64,
    rho: f64,
    prior: &PriorSpec,
    sample_count: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let n = mean.len();
    if prior.mean.len() != n {
        return Err(Error::ShapeMismatch("mc_kl: prior length".into()));
    }
    if sample_count < 2 {
        return Err(Error::InvalidArgument(
            "mc_kl needs at least two samples".into(),
        ));
    }
    let l = reference_cholesky(&dense_sigma(mean, tau, rho))?;
    let half_log_det: f64 = (0..n).map(|i| l[i][i].ln()).sum();
    let z2 = prior.std * prior.std;
    let log_norm_p = -(n as f64) * prior.std.ln();

    let mut rng = keyed(seed, Purpose::Verify, 1, n as u64, 0);
    let mut w = vec![0.0; n];
    let mut diff = vec![0.0; n];
    let mut z = vec![0.0; n];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..sample_count {
        let x = standard_normals(&mut rng, n);
        for i in 0..n {
            let mut acc = mean[i];
            for k in 0..=i {
                acc += l[i][k] * x[k];
            }
            w[i] = acc;
            diff[i] = acc - mean[i];
        }
        forward_solve(&l, &diff, &mut z);
        // The −½ n ln 2π terms cancel.
        let ln_q = -half_log_det - 0.5 * z.iter().map(|v| v * v).sum::<f64>();
        let ln_p = log_norm_p
            - 0.5
                * w.iter()
                    .zip(&prior.mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                / z2;
        let d = ln_q - ln_p;
        sum += d;
        sum_sq += d * d;
    }
    let cnt = sample_count as f64;
    let est = sum / cnt;
    let var = (sum_sq / cnt - est * est).max(0.0) * cnt / (cnt - 1.0);
    Ok((est, (var / cnt).sqrt()))
}

/// Outcome of a single oracle comparison.
#[derive(Debug, Clone)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    /// Measured discrepancy (relative error, z-score, ...).
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn new(suite: &'static str, name: String, value: f64, tolerance: f64) -> Self {
        Self {
            suite,
            name,
            value,
            tolerance,
            passed: value.is_finite() && value <= tolerance,
        }
    }

    pub fn csv_header() -> &'static str {
        "suite,check,value,tolerance,passed"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{}",
            self.suite, self.name, self.value, self.tolerance, self.passed
        )
    }
}

/// A random valid configuration for the kernel.
#[derive(Debug, Clone)]
pub struct Instance {
    pub mean: Vec<f64>,
    pub delta: f64,
    pub gamma: f64,
    pub prior: PriorSpec,
}

impl Instance {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Self {
        let mean = (0..n)
            .map(|_| {
                let mag = rng.random_range(0.1..2.0);
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let delta = rng.random_range(-3.0..1.0);
        let mag = rng.random_range(0.1..4.0);
        let gamma = if rng.random_bool(0.5) { mag } else { -mag };
        let prior_mean = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let std = rng.random_range(0.5..2.0);
        Self {
            mean,
            delta,
            gamma,
            prior: PriorSpec {
                mean: prior_mean,
                std,
            },
        }
    }

    pub fn tau(&self) -> f64 {
        reparam_tau(self.delta)
    }

    pub fn rho(&self) -> f64 {
        reparam_rho(self.gamma)
    }
}

pub const SUITE_SIZES: [usize; 5] = [1, 2, 3, 8, 32];

/// Covariance reconstruction, Cholesky agreement and positive definiteness.
pub fn cholesky_suite(seed: u64, per_size: usize) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for &n in &SUITE_SIZES {
        let mut rng = keyed(seed, Purpose::Verify, 2, n as u64, 0);
        let (mut cov_err, mut chol_err) = (0.0f64, 0.0f64);
        let mut min_pivot = f64::INFINITY;
        for _ in 0..per_size {
            let inst = Instance::random(&mut rng, n);
            let (tau, rho) = (inst.tau(), inst.rho());
            let f = build_factor(&inst.mean, tau, rho)?;
            let (d, o) = f.covariance_bands();
            for i in 0..n {
                let e = tau * tau * inst.mean[i] * inst.mean[i];
                cov_err = cov_err.max((d[i] - e).abs() / e);
            }
            for i in 0..n.saturating_sub(1) {
                let e = rho * tau * tau * inst.mean[i].abs() * inst.mean[i + 1].abs();
                cov_err = cov_err.max((o[i] - e).abs() / e.abs());
            }
            let l = reference_cholesky(&dense_sigma(&inst.mean, tau, rho))?;
            for i in 0..n {
                min_pivot = min_pivot.min(l[i][i]);
                chol_err = chol_err.max((f.diag[i].abs() - l[i][i]).abs());
                if i + 1 < n {
                    chol_err = chol_err.max((f.sub[i].abs() - l[i + 1][i].abs()).abs());
                }
            }
        }
        out.push(Check::new(
            "cholesky",
            format!("n={n} covariance rel err"),
            cov_err,
            1e-10,
        ));
        out.push(Check::new(
            "cholesky",
            format!("n={n} |factor| vs cholesky"),
            chol_err,
            1e-9,
        ));
        // A successful Cholesky with positive pivots certifies positive definiteness.
        out.push(Check::new(
            "cholesky",
            format!("n={n} positive definite"),
            if min_pivot > 0.0 { 0.0 } else { 1.0 },
            0.0,
        ));
    }
    Ok(out)
}

fn factor_at(mean: &[f64], delta: f64, gamma: f64) -> corrgauss::FactorL {
    build_factor(mean, reparam_tau(delta), reparam_rho(gamma)).expect("valid configuration")
}

/// All analytic derivatives of one instance against central differences.
/// Returns `(label, worst relative error)` pairs.
pub fn instance_gradient_errors(
    inst: &Instance,
    noise: &[f64],
    upstream: &[f64],
    step: f64,
) -> Result<Vec<(&'static str, f64)>> {
    let n = inst.mean.len();
    let (delta, gamma) = (inst.delta, inst.gamma);
    let f = factor_at(&inst.mean, delta, gamma);
    let g = factor_grads(&inst.mean, delta, gamma, &f)?;
    let wg = weight_grads(noise, &g)?;

    // Parameter vector layout: m_0..m_{n-1}, δ, γ.
    let mut point = inst.mean.clone();
    point.push(delta);
    point.push(gamma);
    let split = |p: &[f64]| (p[..n].to_vec(), p[n], p[n + 1]);

    let mut sub_err = 0.0f64;
    for i in 0..n.saturating_sub(1) {
        let numeric = finite_diff(
            |p| {
                let (m, d, gm) = split(p);
                factor_at(&m, d, gm).sub[i]
            },
            &point,
            step,
        );
        let mut analytic: Vec<f64> = (0..n).map(|k| g.dsub(i, k)).collect();
        analytic.push(g.dsub_ddelta[i]);
        analytic.push(g.dsub_dgamma[i]);
        sub_err = sub_err.max(grad_rel_err(&analytic, &numeric));
    }
    let mut diag_err = 0.0f64;
    for i in 0..n {
        let numeric = finite_diff(
            |p| {
                let (m, d, gm) = split(p);
                factor_at(&m, d, gm).diag[i]
            },
            &point,
            step,
        );
        let mut analytic: Vec<f64> = (0..n).map(|k| g.ddiag(i, k)).collect();
        analytic.push(g.ddiag_ddelta[i]);
        analytic.push(g.ddiag_dgamma[i]);
        diag_err = diag_err.max(grad_rel_err(&analytic, &numeric));
    }
    let mut weight_err = 0.0f64;
    for i in 0..n {
        let numeric = finite_diff(
            |p| {
                let (m, d, gm) = split(p);
                let ff = factor_at(&m, d, gm);
                let mut w = m[i] + ff.diag[i] * noise[i];
                if i > 0 {
                    w += ff.sub[i - 1] * noise[i - 1];
                }
                w
            },
            &point,
            step,
        );
        let mut analytic: Vec<f64> = (0..n)
            .map(|k| wg.dw_dmean[i].get(k).copied().unwrap_or(0.0))
            .collect();
        analytic.push(wg.dw_ddelta[i]);
        analytic.push(wg.dw_dgamma[i]);
        weight_err = weight_err.max(grad_rel_err(&analytic, &numeric));
    }

    let kl_numeric = finite_diff(
        |p| {
            let (m, d, gm) = split(p);
            let ff = factor_at(&m, d, gm);
            kl_to_prior(&m, reparam_tau(d), &ff, &inst.prior).expect("valid")
        },
        &point,
        step,
    );
    let kg = kl_grads(&inst.mean, delta, gamma, &f, &g, &inst.prior)?;
    let mut kl_analytic = kg.mean.clone();
    kl_analytic.push(kg.delta);
    kl_analytic.push(kg.gamma);
    let kl_err = grad_rel_err(&kl_analytic, &kl_numeric);

    let linear = |p: &[f64]| {
        let (m, d, gm) = split(p);
        let ff = factor_at(&m, d, gm);
        let w = corrgauss::sample(&m, &ff, noise).expect("valid");
        w.iter().zip(upstream).map(|(a, b)| a * b).sum::<f64>()
    };
    let chain_numeric = finite_diff(linear, &point, step);
    let cb = chain_rule_backward(upstream, &wg)?;
    let mut chain_analytic = cb.mean.clone();
    chain_analytic.push(cb.delta);
    chain_analytic.push(cb.gamma);
    let chain_err = grad_rel_err(&chain_analytic, &chain_numeric);

    let nu = 0.5;
    let combined_numeric = finite_diff(
        |p| {
            let (m, d, gm) = split(p);
            let ff = factor_at(&m, d, gm);
            linear(p) + nu * kl_to_prior(&m, reparam_tau(d), &ff, &inst.prior).expect("valid")
        },
        &point,
        step,
    );
    let fast = variational_backward(
        &inst.mean,
        delta,
        gamma,
        &f,
        noise,
        upstream,
        Some(KlTerm {
            prior: &inst.prior,
            scale: nu,
        }),
    )?;
    let mut fast_analytic = fast.mean.clone();
    fast_analytic.push(fast.delta);
    fast_analytic.push(fast.gamma);
    let adjoint_err = grad_rel_err(&fast_analytic, &combined_numeric);

    Ok(vec![
        ("subdiagonal", sub_err),
        ("diagonal", diag_err),
        ("weights", weight_err),
        ("kl", kl_err),
        ("chain rule", chain_err),
        ("adjoint", adjoint_err),
    ])
}

/// `per_size` random instances for each size in [`SUITE_SIZES`].
pub fn gradient_suite(seed: u64, per_size: usize, step: f64, tolerance: f64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for &n in &SUITE_SIZES {
        let mut rng = keyed(seed, Purpose::Verify, 3, n as u64, 0);
        let mut worst: Vec<(&'static str, f64)> = Vec::new();
        for _ in 0..per_size {
            let inst = Instance::random(&mut rng, n);
            let noise = standard_normals(&mut rng, n);
            let upstream = standard_normals(&mut rng, n);
            let errs = instance_gradient_errors(&inst, &noise, &upstream, step)?;
            if worst.is_empty() {
                worst = errs;
            } else {
                for (w, e) in worst.iter_mut().zip(errs) {
                    w.1 = w.1.max(e.1);
                }
            }
        }
        for (label, err) in worst {
            out.push(Check::new(
                "gradients",
                format!("n={n} {label} ({per_size} instances)"),
                err,
                tolerance,
            ));
        }
    }
    Ok(out)
}

/// Analytic KL against [`mc_kl`]; `value` is the absolute z-score.
pub fn kl_suite(seed: u64, sizes: &[usize], configs: usize, samples: usize) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for &n in sizes {
        let mut rng = keyed(seed, Purpose::Verify, 4, n as u64, 0);
        for c in 0..configs {
            let inst = Instance::random(&mut rng, n);
            let (tau, rho) = (inst.tau(), inst.rho());
            let f = build_factor(&inst.mean, tau, rho)?;
            let kl = kl_to_prior(&inst.mean, tau, &f, &inst.prior)?;
            let mc_seed = seed
                .wrapping_mul(1_000_003)
                .wrapping_add((n * 1000 + c) as u64);
            let (est, se) = mc_kl(&inst.mean, tau, rho, &inst.prior, samples, mc_seed)?;
            out.push(Check::new(
                "kl",
                format!("n={n} config {c}: analytic {kl:.6} mc {est:.6} se {se:.2e}"),
                (kl - est).abs() / se,
                3.0,
            ));
            out.push(Check::new(
                "kl",
                format!("n={n} config {c}: nonnegative"),
                if kl >= 0.0 { 0.0 } else { -kl },
                0.0,
            ));
        }
    }
    Ok(out)
}

/// Empirical mean and lag-1 covariance of `samples` draws against
/// `(m, ρ τ² |m_i| |m_{i+1}|)`; `value` is the worst absolute z-score.
pub fn sampling_law(
    mean: &[f64],
    tau: f64,
    rho: f64,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let n = mean.len();
    let f = build_factor(mean, tau, rho)?;
    let mut rng = keyed(seed, Purpose::Verify, 5, n as u64, 0);
    let mut s1 = vec![0.0; n];
    let mut s2 = vec![0.0; n];
    let mut lag = vec![0.0; n.saturating_sub(1)];
    let mut lag2 = vec![0.0; n.saturating_sub(1)];
    let mut w = vec![0.0; n];
    for _ in 0..samples {
        let x = standard_normals(&mut rng, n);
        corrgauss::sample_into(mean, &f, &x, &mut w)?;
        for i in 0..n {
            let d = w[i] - mean[i];
            s1[i] += d;
            s2[i] += d * d;
            if i + 1 < n {
                let p = d * (w[i + 1] - mean[i + 1]);
                lag[i] += p;
                lag2[i] += p * p;
            }
        }
    }
    let cnt = samples as f64;
    let (mut z_mean, mut z_cov) = (0.0f64, 0.0f64);
    for i in 0..n {
        // Centred on the true mean, so the sample variance uses cnt.
        let var = s2[i] / cnt;
        let se = (var / cnt).sqrt();
        z_mean = z_mean.max((s1[i] / cnt).abs() / se);
    }
    for i in 0..n.saturating_sub(1) {
        let cov = lag[i] / cnt;
        let var = (lag2[i] / cnt - cov * cov).max(0.0);
        let se = (var / cnt).sqrt();
        let expect = rho * tau * tau * mean[i].abs() * mean[i + 1].abs();
        z_cov = z_cov.max((cov - expect).abs() / se);
    }
    Ok((z_mean, z_cov))
}
