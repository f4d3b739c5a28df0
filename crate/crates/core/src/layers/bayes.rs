//! Bayesian dense and conv layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{backward_with, forward_with, glorot_uniform, Cache, LayerShape};
use crate::corrgauss::{
    build_factor, delta_for_tau, kl_to_prior, sample_into, stabilize_in_place,
    variational_backward, FactorL, KlTerm, PriorSpec, VariationalGrads, VariationalParams,
    GAMMA_MIN_ABS,
};
use crate::error::{Error, Result};
use crate::rng::standard_normals;
use crate::tensor::Batch;

/// Initial scale `τ` of both blocks.
pub const INIT_TAU: f64 = 0.05;
pub const INIT_BIAS_MEAN: f64 = 0.1;

/// One parameter draw and the noise that produced it.
#[derive(Debug, Clone)]
pub struct Draw {
    pub noise_w: Vec<f64>,
    pub noise_b: Vec<f64>,
    pub factor_w: FactorL,
    pub factor_b: FactorL,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BayesLayerState {
    pub weights: VariationalParams,
    pub biases: VariationalParams,
    pub weight_prior: PriorSpec,
    pub bias_prior: PriorSpec,
    draw: Option<Draw>,
}

impl PartialEq for BayesLayerState {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights
            && self.biases == other.biases
            && self.weight_prior == other.weight_prior
            && self.bias_prior == other.bias_prior
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BayesGrads {
    pub weights: VariationalGrads,
    pub biases: VariationalGrads,
}

/// Where the standard-normal noise of a forward pass comes from.
pub enum Noise<'a> {
    Injected {
        weights: &'a [f64],
        biases: &'a [f64],
    },
    Draw(&'a mut ChaCha8Rng),
}

impl BayesLayerState {
    pub fn new(
        weights: VariationalParams,
        biases: VariationalParams,
        weight_prior: PriorSpec,
        bias_prior: PriorSpec,
    ) -> Result<Self> {
        if weight_prior.mean.len() != weights.len() || bias_prior.mean.len() != biases.len() {
            return Err(Error::ShapeMismatch(
                "prior length differs from parameter block".into(),
            ));
        }
        Ok(Self {
            weights,
            biases,
            weight_prior,
            bias_prior,
            draw: None,
        })
    }

    /// Glorot-uniform weight means, bias means 0.1, `τ = 0.05` and
    /// `γ = ±GAMMA_MIN_ABS` with random sign, then stabilized.
    pub fn init<R: Rng + ?Sized>(
        shape: &LayerShape,
        prior_mean: f64,
        prior_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let delta = delta_for_tau(INIT_TAU);
        let mut sign = || {
            if rng.random_bool(0.5) {
                GAMMA_MIN_ABS
            } else {
                -GAMMA_MIN_ABS
            }
        };
        let (gw, gb) = (sign(), sign());
        let mut weights = VariationalParams::new(glorot_uniform(shape, rng), delta, gw);
        let mut biases =
            VariationalParams::new(vec![INIT_BIAS_MEAN; shape.bias_count()], delta, gb);
        stabilize_in_place(&mut weights, rng);
        stabilize_in_place(&mut biases, rng);
        Self::new(
            weights,
            biases,
            PriorSpec::new(vec![prior_mean; shape.weight_count()], prior_std)?,
            PriorSpec::new(vec![prior_mean; shape.bias_count()], prior_std)?,
        )
    }

    pub fn stabilize(&mut self, rng_weights: &mut ChaCha8Rng, rng_biases: &mut ChaCha8Rng) {
        stabilize_in_place(&mut self.weights, rng_weights);
        stabilize_in_place(&mut self.biases, rng_biases);
        self.draw = None;
    }

    /// Builds both factors and samples `w = m + L x` for the given noise.
    pub fn set_noise(&mut self, noise_w: Vec<f64>, noise_b: Vec<f64>) -> Result<()> {
        let factor_w = self.weights.factor()?;
        let factor_b = self.biases.factor()?;
        self.set_noise_with_factors(factor_w, factor_b, noise_w, noise_b)
    }

    /// As [`set_noise`](Self::set_noise) with factors computed by the caller.
    pub fn set_noise_with_factors(
        &mut self,
        factor_w: FactorL,
        factor_b: FactorL,
        noise_w: Vec<f64>,
        noise_b: Vec<f64>,
    ) -> Result<()> {
        let mut weights = vec![0.0; self.weights.len()];
        let mut biases = vec![0.0; self.biases.len()];
        sample_into(&self.weights.mean, &factor_w, &noise_w, &mut weights)?;
        sample_into(&self.biases.mean, &factor_b, &noise_b, &mut biases)?;
        self.draw = Some(Draw {
            noise_w,
            noise_b,
            factor_w,
            factor_b,
            weights,
            biases,
        });
        Ok(())
    }

    pub fn draw_noise(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let nw = standard_normals(rng, self.weights.len());
        let nb = standard_normals(rng, self.biases.len());
        self.set_noise(nw, nb)
    }

    pub fn last_draw(&self) -> Option<&Draw> {
        self.draw.as_ref()
    }

    pub fn clear_draw(&mut self) {
        self.draw = None;
    }

    /// `(KL of weights, KL of biases)` at the current parameters.
    pub fn kl(&self) -> Result<(f64, f64)> {
        let (fw, fb) = match &self.draw {
            Some(d) => (d.factor_w.clone(), d.factor_b.clone()),
            None => (self.weights.factor()?, self.biases.factor()?),
        };
        Ok((
            kl_to_prior(
                &self.weights.mean,
                self.weights.tau(),
                &fw,
                &self.weight_prior,
            )?,
            kl_to_prior(&self.biases.mean, self.biases.tau(), &fb, &self.bias_prior)?,
        ))
    }

    /// Maps classical gradients at the stored draw to variational gradients,
    /// adding `nu`·∂KL and multiplying the `γ` gradients by `kappa`.
    pub fn variational_grads(
        &self,
        dw: &[f64],
        db: &[f64],
        nu: f64,
        kappa: f64,
    ) -> Result<BayesGrads> {
        let d = self.draw.as_ref().ok_or(Error::MissingForward)?;
        let kl = |prior| (nu != 0.0).then_some(KlTerm { prior, scale: nu });
        let mut weights = variational_backward(
            &self.weights.mean,
            self.weights.delta,
            self.weights.gamma,
            &d.factor_w,
            &d.noise_w,
            dw,
            kl(&self.weight_prior),
        )?;
        let mut biases = variational_backward(
            &self.biases.mean,
            self.biases.delta,
            self.biases.gamma,
            &d.factor_b,
            &d.noise_b,
            db,
            kl(&self.bias_prior),
        )?;
        weights.gamma *= kappa;
        biases.gamma *= kappa;
        Ok(BayesGrads { weights, biases })
    }
}

/// Stabilizes, draws (or takes injected) noise, samples parameters and runs
/// the classical forward pass with them.
pub fn bayes_forward(
    state: &mut BayesLayerState,
    shape: &LayerShape,
    x: &Batch,
    stabilizer: (&mut ChaCha8Rng, &mut ChaCha8Rng),
    noise: Noise<'_>,
) -> Result<(Batch, Cache)> {
    if state.weights.len() != shape.weight_count() || state.biases.len() != shape.bias_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} layer needs {} weights and {} biases",
            shape.kind.name(),
            shape.weight_count(),
            shape.bias_count()
        )));
    }
    state.stabilize(stabilizer.0, stabilizer.1);
    match noise {
        Noise::Injected { weights, biases } => {
            state.set_noise(weights.to_vec(), biases.to_vec())?
        }
        Noise::Draw(rng) => state.draw_noise(rng)?,
    }
    let d = state.draw.as_ref().expect("draw just stored");
    forward_with(shape, Some((&d.weights, &d.biases)), x, None)
}

/// Classical backward at the sampled parameters followed by the variational
/// chain rule. Returns the input gradient (if requested) and the gradients of
/// `(m, δ, γ)` for weights and biases.
pub fn bayes_backward(
    state: &BayesLayerState,
    shape: &LayerShape,
    cache: &Cache,
    dout: &Batch,
    nu: f64,
    kappa: f64,
    need_dx: bool,
) -> Result<(Option<Batch>, BayesGrads)> {
    let d = state.draw.as_ref().ok_or(Error::MissingForward)?;
    let (dx, pg) = backward_with(shape, Some(&d.weights), cache, dout, need_dx)?;
    let (dw, db) = pg.ok_or_else(|| Error::InvalidArgument("layer has no parameters".into()))?;
    Ok((dx, state.variational_grads(&dw, &db, nu, kappa)?))
}

/// Layer-level check used by tests: builds factors directly from the current
/// parameters without stabilization.
pub fn factors_of(state: &BayesLayerState) -> Result<(FactorL, FactorL)> {
    Ok((
        build_factor(
            &state.weights.mean,
            state.weights.tau(),
            state.weights.rho(),
        )?,
        build_factor(&state.biases.mean, state.biases.tau(), state.biases.rho())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{ops::softmax_cross_entropy, LayerKind};
    use crate::rng::{keyed, Purpose};
    use crate::tensor::Shape;
    use crate::verify::{finite_diff, grad_rel_err};

    fn stab() -> (ChaCha8Rng, ChaCha8Rng) {
        (
            keyed(0, Purpose::Stabilize, 0, 0, 0),
            keyed(0, Purpose::Stabilize, 0, 0, 1),
        )
    }

    fn dense(fan_in: usize, fan_out: usize) -> LayerShape {
        LayerShape::resolve(LayerKind::Dense { outputs: fan_out }, Shape::flat(fan_in)).unwrap()
    }

    fn state(wm: Vec<f64>, bm: Vec<f64>, delta: f64, gamma: f64) -> BayesLayerState {
        let (nw, nb) = (wm.len(), bm.len());
        BayesLayerState::new(
            VariationalParams::new(wm, delta, gamma),
            VariationalParams::new(bm, delta, -gamma),
            PriorSpec::zero_mean(nw, 1.0).unwrap(),
            PriorSpec::zero_mean(nb, 0.7).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn mean_pass_through_with_zero_noise() {
        let shape = dense(2, 1);
        let mut s = state(vec![1.0, 1.0], vec![0.5], -2.0, 0.3);
        let x = Batch::from_vec(1, 2, vec![0.25, 2.0]).unwrap();
        let (mut a, mut b) = stab();
        let (y, _) = bayes_forward(
            &mut s,
            &shape,
            &x,
            (&mut a, &mut b),
            Noise::Injected {
                weights: &[0.0, 0.0],
                biases: &[0.0],
            },
        )
        .unwrap();
        assert_eq!(y.data, vec![0.25 + 2.0 + 0.5]);
    }

    #[test]
    fn conv_1x1_mean_pass_through() {
        let shape = LayerShape::resolve(
            LayerKind::Conv {
                out_channels: 1,
                kernel: 1,
                pad: 0,
            },
            Shape::new(1, 2, 2),
        )
        .unwrap();
        let mut s = state(vec![2.0], vec![0.25], -2.0, 0.3);
        let x = Batch::from_vec(1, 4, vec![1.0, -1.0, 3.0, 0.5]).unwrap();
        let (mut a, mut b) = stab();
        let (y, _) = bayes_forward(
            &mut s,
            &shape,
            &x,
            (&mut a, &mut b),
            Noise::Injected {
                weights: &[0.0],
                biases: &[0.0],
            },
        )
        .unwrap();
        assert_eq!(y.data, vec![2.25, -1.75, 6.25, 1.25]);
    }

    #[test]
    fn identical_noise_identical_output() {
        let shape = dense(3, 2);
        let x = Batch::from_vec(2, 3, vec![0.1, 0.2, 0.3, -1.0, 0.5, 2.0]).unwrap();
        let nw = [0.3, -0.2, 1.1, 0.4, -0.9, 0.05];
        let nb = [0.7, -0.1];
        let run = || {
            let mut s = state(
                vec![0.5, -0.4, 0.3, 0.8, -1.2, 0.6],
                vec![0.1, 0.2],
                -1.5,
                0.8,
            );
            let (mut a, mut b) = stab();
            bayes_forward(
                &mut s,
                &shape,
                &x,
                (&mut a, &mut b),
                Noise::Injected {
                    weights: &nw,
                    biases: &nb,
                },
            )
            .unwrap()
            .0
        };
        let (y1, y2) = (run(), run());
        assert_eq!(
            y1.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y2.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn backward_requires_forward() {
        let shape = dense(2, 1);
        let s = state(vec![1.0, 1.0], vec![0.5], -2.0, 0.3);
        let x = Batch::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let cache = Cache::Dense { input: x };
        let g = Batch::from_vec(1, 1, vec![1.0]).unwrap();
        assert!(matches!(
            bayes_backward(&s, &shape, &cache, &g, 0.0, 1.0, true),
            Err(Error::MissingForward)
        ));
    }

    #[test]
    fn zero_upstream_zero_nu_gives_zero_grads() {
        let shape = dense(2, 2);
        let mut s = state(vec![0.5, -0.4, 0.3, 0.8], vec![0.1, 0.2], -1.5, 0.8);
        let x = Batch::from_vec(1, 2, vec![0.3, 0.7]).unwrap();
        let (mut a, mut b) = stab();
        let mut r = keyed(1, Purpose::Noise, 0, 0, 0);
        let (_, cache) =
            bayes_forward(&mut s, &shape, &x, (&mut a, &mut b), Noise::Draw(&mut r)).unwrap();
        let (_, g) =
            bayes_backward(&s, &shape, &cache, &Batch::zeros(1, 2), 0.0, 50.0, true).unwrap();
        assert!(g
            .weights
            .mean
            .iter()
            .chain(&g.biases.mean)
            .all(|&v| v == 0.0));
        assert_eq!(
            (
                g.weights.delta,
                g.weights.gamma,
                g.biases.delta,
                g.biases.gamma
            ),
            (0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn zero_noise_mean_gradient_is_classical() {
        let shape = dense(3, 2);
        let mut s = state(
            vec![0.5, -0.4, 0.3, 0.8, -1.2, 0.6],
            vec![0.1, 0.2],
            -1.5,
            0.8,
        );
        let x = Batch::from_vec(2, 3, vec![0.1, 0.2, 0.3, -1.0, 0.5, 2.0]).unwrap();
        let (mut a, mut b) = stab();
        let (y, cache) = bayes_forward(
            &mut s,
            &shape,
            &x,
            (&mut a, &mut b),
            Noise::Injected {
                weights: &[0.0; 6],
                biases: &[0.0; 2],
            },
        )
        .unwrap();
        let g = Batch::from_vec(2, 2, vec![0.3, -0.6, 1.0, 0.25]).unwrap();
        let (dx, vg) = bayes_backward(&s, &shape, &cache, &g, 0.0, 1.0, true).unwrap();
        let (fy, fcache) =
            forward_with(&shape, Some((&s.weights.mean, &s.biases.mean)), &x, None).unwrap();
        let (fdx, fpg) = backward_with(&shape, Some(&s.weights.mean), &fcache, &g, true).unwrap();
        let (fdw, fdb) = fpg.unwrap();
        assert_eq!(y, fy);
        assert_eq!(dx, fdx);
        assert_eq!(vg.weights.mean, fdw);
        assert_eq!(vg.biases.mean, fdb);
    }

    /// Full objective `mean CE + ν (KL_w + KL_b)` of a dense 3→2 layer with
    /// frozen noise, as a function of all variational parameters.
    #[test]
    fn dense_layer_end_to_end_finite_differences() {
        let shape = dense(3, 2);
        let x = Batch::from_vec(2, 3, vec![0.4, -0.2, 1.3, -0.7, 0.9, 0.15]).unwrap();
        let labels = [1usize, 0];
        let nw = [0.3, -0.2, 1.1, 0.4, -0.9, 0.05];
        let nb = [0.7, -0.1];
        let (nu, kappa) = (0.3, 1.0);
        let wm = vec![0.5, -0.4, 0.3, 0.8, -1.2, 0.6];
        let bm = vec![0.1, -0.2];

        let objective = |p: &[f64]| -> f64 {
            let mut s = state(p[..6].to_vec(), p[8..10].to_vec(), 0.0, 0.0);
            s.weights.delta = p[6];
            s.weights.gamma = p[7];
            s.biases.delta = p[10];
            s.biases.gamma = p[11];
            s.set_noise(nw.to_vec(), nb.to_vec()).unwrap();
            let d = s.last_draw().unwrap();
            let (y, _) = forward_with(&shape, Some((&d.weights, &d.biases)), &x, None).unwrap();
            let ce: f64 = (0..2)
                .map(|n| softmax_cross_entropy(y.row(n), labels[n]).unwrap().0)
                .sum::<f64>()
                / 2.0;
            let (kw, kb) = s.kl().unwrap();
            ce + nu * (kw + kb)
        };
        let mut point = wm.clone();
        point.extend([-1.1, 0.9]);
        point.extend(&bm);
        point.extend([-2.0, -0.6]);

        let mut s = state(wm, bm, -1.1, 0.9);
        s.biases.delta = -2.0;
        s.biases.gamma = -0.6;
        s.set_noise(nw.to_vec(), nb.to_vec()).unwrap();
        let d = s.last_draw().unwrap().clone();
        let (y, cache) = forward_with(&shape, Some((&d.weights, &d.biases)), &x, None).unwrap();
        let mut g = Batch::zeros(2, 2);
        for n in 0..2 {
            let (_, dl) = softmax_cross_entropy(y.row(n), labels[n]).unwrap();
            for (o, v) in dl.iter().enumerate() {
                g.row_mut(n)[o] = v / 2.0;
            }
        }
        let (_, vg) = bayes_backward(&s, &shape, &cache, &g, nu, kappa, false).unwrap();
        let mut analytic = vg.weights.mean.clone();
        analytic.extend([vg.weights.delta, vg.weights.gamma]);
        analytic.extend(&vg.biases.mean);
        analytic.extend([vg.biases.delta, vg.biases.gamma]);
        let numeric = finite_diff(objective, &point, 1e-6);
        let err = grad_rel_err(&analytic, &numeric);
        assert!(
            err < 1e-4,
            "relative error {err}\n{analytic:?}\n{numeric:?}"
        );
    }

    #[test]
    fn kappa_scales_only_gamma() {
        let shape = dense(2, 2);
        let mut s = state(vec![0.5, -0.4, 0.3, 0.8], vec![0.1, 0.2], -1.5, 0.8);
        let x = Batch::from_vec(1, 2, vec![0.3, 0.7]).unwrap();
        let (mut a, mut b) = stab();
        let mut r = keyed(1, Purpose::Noise, 0, 0, 0);
        let (_, cache) =
            bayes_forward(&mut s, &shape, &x, (&mut a, &mut b), Noise::Draw(&mut r)).unwrap();
        let g = Batch::from_vec(1, 2, vec![0.4, -1.0]).unwrap();
        let (_, g1) = bayes_backward(&s, &shape, &cache, &g, 0.01, 1.0, false).unwrap();
        let (_, g50) = bayes_backward(&s, &shape, &cache, &g, 0.01, 50.0, false).unwrap();
        assert_eq!(g1.weights.mean, g50.weights.mean);
        assert_eq!(g1.weights.delta, g50.weights.delta);
        assert!(
            (g50.weights.gamma - 50.0 * g1.weights.gamma).abs()
                < 1e-15 * g50.weights.gamma.abs().max(1.0)
        );
    }

    #[test]
    fn marginal_variance_independent_of_chain_order() {
        // Reversing the chain changes only which pairs correlate.
        let m = [0.4, -1.3, 0.9, 2.0, -0.1];
        let rev: Vec<f64> = m.iter().rev().copied().collect();
        let f = build_factor(&m, 0.3, 0.2).unwrap();
        let r = build_factor(&rev, 0.3, 0.2).unwrap();
        let (d1, _) = f.covariance_bands();
        let (d2, _) = r.covariance_bands();
        for i in 0..5 {
            let expect = 0.09 * m[i] * m[i];
            assert!((d1[i] - expect).abs() < 1e-12 * expect);
            assert!((d2[4 - i] - expect).abs() < 1e-12 * expect);
        }
    }
}
