//! Comparison attribution methods.
//!
//! Input-space methods (`sm`, `fastig`, `ig`) differentiate the cosine score
//! with respect to image pixels or text token embeddings and sum over
//! channels. Layer-space methods (`gradcam`, `m2ib`) work on the hidden state
//! at the bottleneck layer, exactly like NIB, and report per-token scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionMap, MethodId, PassCount, PathDiagnostics};
use crate::autodiff::Graph;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::info::kl_to_isotropic_prior;
use crate::model::{cosine, DualEncoderModel, Modality, TokenRole};
use crate::nib::{nib_attribute, LayerProbe, PathSpec};
use crate::tensor::Tensor;

/// Full-encoder score `S(x) = cos(f(x), e_other)` as a function of the
/// input-space features of one modality.
struct InputProbe<'m> {
    model: &'m DualEncoderModel,
    modality: Modality,
    features: Tensor,
    roles: Vec<TokenRole>,
    other: Tensor,
}

impl<'m> InputProbe<'m> {
    fn new(
        model: &'m DualEncoderModel,
        sample: &Sample,
        modality: Modality,
        passes: &mut PassCount,
    ) -> Result<Self> {
        let other = model.embed(&sample.input(modality.other()))?;
        passes.forward += 1;
        let input = sample.input(modality);
        Ok(Self {
            model,
            modality,
            features: model.input_features(&input)?,
            roles: model.roles(&input),
            other,
        })
    }

    fn score(&self, features: &Tensor) -> Result<f64> {
        cosine(
            &self.model.embed_features(self.modality, features)?,
            &self.other,
        )
    }

    fn score_and_grad(&self, features: Tensor, passes: &mut PassCount) -> Result<(f64, Tensor)> {
        let layers = self.model.config().layers;
        let mut g = Graph::new();
        let x = g.variable(features);
        let z = self.model.prefix_graph(&mut g, self.modality, x, layers)?;
        let e = self.model.suffix_graph(&mut g, self.modality, z, layers)?;
        let o = g.constant(self.other.clone());
        let s = g.cosine_similarity(e, o)?;
        passes.forward += 1;
        let mut grads = g.backward(s)?;
        passes.backward += 1;
        let score = g.value(s).data()[0];
        Ok((score, grads.take(x).expect("input is a variable")))
    }

    /// Channel-sums a features-shaped tensor into a reported map: per pixel
    /// for images, per content token for text.
    fn into_map(self, method: MethodId, per_feature: &Tensor) -> Result<AttributionMap> {
        match self.modality {
            Modality::Image => {
                let cfg = self.model.config();
                let image = self.model.unpatchify(per_feature)?;
                let plane = cfg.image_size * cfg.image_size;
                let mut scores = vec![0.0; plane];
                for ch in image.data().chunks(plane) {
                    scores.iter_mut().zip(ch).for_each(|(s, v)| *s += v);
                }
                Ok(AttributionMap {
                    method,
                    modality: Modality::Image,
                    scores,
                    grid: (cfg.image_size, cfg.image_size),
                    layer: None,
                    token_scores: vec![],
                    roles: vec![],
                    path: None,
                    seed: None,
                    passes: PassCount::default(),
                })
            }
            Modality::Text => {
                let d = self.model.config().d_model;
                let token_scores = per_feature
                    .data()
                    .chunks(d)
                    .map(|r| r.iter().sum())
                    .collect();
                let mut map = AttributionMap::from_tokens(
                    method,
                    Modality::Text,
                    token_scores,
                    self.roles,
                    0,
                );
                map.token_scores.clear();
                map.roles.clear();
                Ok(map)
            }
        }
    }
}

/// Output of a Riemann path integral in input space.
pub struct PathIntegral {
    /// `(x - x0) ⊙ mean gradient`, features-shaped.
    pub attributions: Tensor,
    pub score_open: f64,
}

/// Integrated gradients of an arbitrary differentiable score along the
/// straight line from `baseline` to `x`, right-endpoint rule with `steps`
/// points. `score_and_grad` returns `(S(p), ∇S(p))`.
pub fn integrated_gradients_with<F>(
    mut score_and_grad: F,
    x: &Tensor,
    baseline: &Tensor,
    steps: usize,
) -> Result<PathIntegral>
where
    F: FnMut(Tensor) -> Result<(f64, Tensor)>,
{
    if steps == 0 {
        return Err(Error::Parameter("integration steps must be >= 1".into()));
    }
    if x.shape() != baseline.shape() {
        return Err(Error::Shape {
            op: "integrated_gradients",
            detail: format!("{:?} vs baseline {:?}", x.shape(), baseline.shape()),
        });
    }
    let delta: Vec<f64> = x
        .data()
        .iter()
        .zip(baseline.data())
        .map(|(a, b)| a - b)
        .collect();
    let mut grad_sum = vec![0.0; x.len()];
    let mut score_open = 0.0;
    for k in 1..=steps {
        let point = if k == steps {
            x.clone()
        } else {
            let alpha = k as f64 / steps as f64;
            Tensor::new(
                x.shape().to_vec(),
                baseline
                    .data()
                    .iter()
                    .zip(&delta)
                    .map(|(b, d)| b + alpha * d)
                    .collect(),
            )?
        };
        let (s, grad) = score_and_grad(point)?;
        if k == steps {
            score_open = s;
        }
        grad_sum
            .iter_mut()
            .zip(grad.data())
            .for_each(|(a, g)| *a += g);
    }
    let m = steps as f64;
    let attributions = delta
        .iter()
        .zip(&grad_sum)
        .map(|(d, g)| d * (g / m))
        .collect();
    Ok(PathIntegral {
        attributions: Tensor::new(x.shape().to_vec(), attributions)?,
        score_open,
    })
}

/// `|∂S/∂x|` summed over channels.
pub fn saliency_map(
    model: &DualEncoderModel,
    sample: &Sample,
    modality: Modality,
) -> Result<AttributionMap> {
    let mut passes = PassCount::default();
    let probe = InputProbe::new(model, sample, modality, &mut passes)?;
    let (_, grad) = probe.score_and_grad(probe.features.clone(), &mut passes)?;
    let mut map = probe.into_map(MethodId::Sm, &grad.map(f64::abs)?)?;
    map.passes = passes;
    Ok(map)
}

/// Single-step `x ⊙ ∂S/∂x` against the zero baseline.
pub fn fast_ig(
    model: &DualEncoderModel,
    sample: &Sample,
    modality: Modality,
) -> Result<AttributionMap> {
    let mut map = integrated_gradients(model, sample, modality, 1, None)?;
    map.method = MethodId::Fastig;
    Ok(map)
}

/// Integrated gradients in input space with `steps` Riemann points.
/// `baseline` defaults to all zeros.
pub fn integrated_gradients(
    model: &DualEncoderModel,
    sample: &Sample,
    modality: Modality,
    steps: usize,
    baseline: Option<&Tensor>,
) -> Result<AttributionMap> {
    let mut passes = PassCount::default();
    let probe = InputProbe::new(model, sample, modality, &mut passes)?;
    let zeros = Tensor::zeros(probe.features.shape());
    let baseline = baseline.unwrap_or(&zeros);
    let ig = integrated_gradients_with(
        |p| probe.score_and_grad(p, &mut passes),
        &probe.features,
        baseline,
        steps,
    )?;
    let closed = probe.score(baseline)?;
    passes.diagnostic_forward += 1;
    let total = ig.attributions.sum();
    let diagnostics = PathDiagnostics {
        num_steps: steps,
        score_open: ig.score_open,
        score_closed: closed,
        total_contribution: total,
        completeness_gap: (total - (ig.score_open - closed)).abs(),
        degenerate_closed: false,
    };
    let mut map = probe.into_map(MethodId::Ig, &ig.attributions)?;
    map.path = Some(diagnostics);
    map.passes = passes;
    Ok(map)
}

/// Grad-CAM analogue on transformer tokens: `ReLU(Σ_c w_c z_ic)` with
/// `w_c` the token-mean of `∂S/∂z_ic`.
pub fn gradcam_layer(
    model: &DualEncoderModel,
    sample: &Sample,
    modality: Modality,
    layer: usize,
) -> Result<AttributionMap> {
    let mut passes = PassCount::default();
    let probe = LayerProbe::new(model, sample, modality, layer, &mut passes)?;
    let z = &probe.z.tokens;
    let (tokens, d) = z.dims2()?;
    let (_, grad) = probe.score_and_grad(z.clone(), &mut passes)?;
    let mut weights = vec![0.0; d];
    for row in grad.data().chunks(d) {
        weights.iter_mut().zip(row).for_each(|(w, g)| *w += g);
    }
    weights.iter_mut().for_each(|w| *w /= tokens as f64);
    let token_scores = z
        .data()
        .chunks(d)
        .map(|row| {
            row.iter()
                .zip(&weights)
                .map(|(v, w)| v * w)
                .sum::<f64>()
                .max(0.0)
        })
        .collect();
    let mut map = AttributionMap::from_tokens(
        MethodId::Gradcam,
        modality,
        token_scores,
        probe.z.roles.clone(),
        probe.grid_side(),
    );
    map.layer = Some(layer);
    map.passes = passes;
    Ok(map)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct M2ibConfig {
    pub beta: f64,
    pub lr: f64,
    pub iters: usize,
    /// Noise variance `σ²`; the noise mean is 0.
    pub variance: f64,
    pub noise_samples: usize,
    pub seed: u64,
    /// Initial logit of every `λ_ic` (5.0 leaves the bottleneck nearly open).
    pub init_logit: f64,
}

impl Default for M2ibConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lr: 1.0,
            iters: 10,
            variance: 1.0,
            noise_samples: 10,
            seed: 0,
            init_logit: 5.0,
        }
    }
}

impl M2ibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Parameter(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.iters == 0 {
            return Err(Error::Parameter("iters must be >= 1".into()));
        }
        if self.noise_samples == 0 {
            return Err(Error::Parameter("noise_samples must be >= 1".into()));
        }
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::NonPositiveVariance(self.variance));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adam ascent state.
struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] += self.lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Stochastic per-dimension bottleneck at layer `l`.
///
/// Each `λ_ic = sigmoid(θ_ic)` is optimized by Adam ascent on
/// `Î(z̃, Y) − β Î(z̃, x)`, where `z̃ = λ z + (1 − λ) ε`, `ε ~ N(0, σ²)`.
/// `Î(z̃, Y)` is the cosine score averaged over the noise draws of the step
/// and `Î(z̃, x)` is the mean per-element Gaussian KL to `N(0, σ²)`. Draws
/// come in antithetic pairs `(ε, −ε)`; the positive and negated halves run as
/// two batched passes per iteration. The saliency of token `i` is
/// `Σ_c KL(P(z̃_ic | x) ‖ N(0, σ²))` at the final `λ`.
pub fn m2ib_attribute(
    model: &DualEncoderModel,
    sample: &Sample,
    modality: Modality,
    layer: usize,
    cfg: &M2ibConfig,
) -> Result<AttributionMap> {
    cfg.validate()?;
    let mut passes = PassCount::default();
    let probe = LayerProbe::new(model, sample, modality, layer, &mut passes)?;
    let z = probe.z.tokens.clone();
    let n = z.len();
    let var = cfg.variance;
    let noise = Normal::new(0.0, var.sqrt()).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut logits = vec![cfg.init_logit; n];
    let mut adam = Adam::new(cfg.lr, n);
    let positive = cfg.noise_samples.div_ceil(2);
    let negative = cfg.noise_samples / 2;

    for iteration in 0..cfg.iters {
        let lam: Vec<f64> = logits.iter().map(|&t| sigmoid(t)).collect();
        let keep: Vec<f64> = logits.iter().map(|&t| sigmoid(-t)).collect();
        let draws: Vec<Vec<f64>> = (0..positive)
            .map(|_| (0..n).map(|_| noise.sample(&mut rng)).collect())
            .collect();

        let mut score_grad = vec![0.0; n];
        let halves = [(1.0, positive), (-1.0, negative)];
        for (sign, count) in halves {
            if count == 0 {
                continue;
            }
            let noisy: Vec<Vec<f64>> = draws[..count]
                .iter()
                .map(|e| e.iter().map(|v| sign * v).collect())
                .collect();
            let batch = noisy
                .iter()
                .map(|eps| {
                    let data = (0..n)
                        .map(|i| lam[i] * z.data()[i] + keep[i] * eps[i])
                        .collect();
                    Tensor::new(z.shape().to_vec(), data)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|_| Error::Optimization { iteration })?;
            let (_, grads) = probe.batch_score_and_grads(batch, &mut passes)?;
            // each returned gradient is of the batch mean; rescale to the mean over all draws
            let weight = count as f64 / cfg.noise_samples as f64;
            for (eps, g) in noisy.iter().zip(&grads) {
                for i in 0..n {
                    score_grad[i] += weight * g.data()[i] * (z.data()[i] - eps[i]);
                }
            }
        }

        let grad: Vec<f64> = (0..n)
            .map(|i| {
                let (l, k) = (lam[i], keep[i]);
                let zi = z.data()[i];
                // d/dθ of the per-element KL with λ = sigmoid(θ)
                let dkl = l * l * k * zi * zi / var - l * k * k + l;
                score_grad[i] * l * k - cfg.beta * dkl / n as f64
            })
            .collect();
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Optimization { iteration });
        }
        adam.ascend(&mut logits, &grad);
        if logits.iter().any(|t| !t.is_finite()) {
            return Err(Error::Optimization { iteration });
        }
    }

    let d = model.config().d_model;
    let kl: Vec<f64> = (0..n)
        .map(|i| {
            let (l, k) = (sigmoid(logits[i]), sigmoid(-logits[i]));
            kl_to_isotropic_prior(l * z.data()[i], k * k * var, var)
        })
        .collect();
    if kl.iter().any(|v| !v.is_finite()) {
        return Err(Error::Optimization {
            iteration: cfg.iters,
        });
    }
    let token_scores = kl.chunks(d).map(|row| row.iter().sum()).collect();
    let mut map = AttributionMap::from_tokens(
        MethodId::M2ib,
        modality,
        token_scores,
        probe.z.roles.clone(),
        probe.grid_side(),
    );
    map.layer = Some(layer);
    map.seed = Some(cfg.seed);
    map.passes = passes;
    Ok(map)
}

/// Seeded uniform `[0, 1)` scores.
pub fn random_scores(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random::<f64>()).collect()
}

/// Random control map with the same layout as the layer-space methods.
pub fn random_attribution(
    model: &DualEncoderModel,
    sample: &Sample,
    modality: Modality,
    seed: u64,
) -> Result<AttributionMap> {
    let roles = model.roles(&sample.input(modality));
    let reported = roles.iter().filter(|r| r.is_reported()).count();
    let mut scores = random_scores(reported, seed).into_iter();
    let token_scores = roles
        .iter()
        .map(|r| {
            if r.is_reported() {
                scores.next().unwrap_or(0.0)
            } else {
                0.0
            }
        })
        .collect();
    let mut map = AttributionMap::from_tokens(
        MethodId::Random,
        modality,
        token_scores,
        roles,
        model.config().grid_side(),
    );
    map.seed = Some(seed);
    Ok(map)
}

/// Settings for [`attribute`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodParams {
    pub layer: usize,
    pub num_steps: usize,
    pub ig_steps: usize,
    pub m2ib: M2ibConfig,
    pub seed: u64,
}

impl MethodParams {
    pub fn for_model(model: &DualEncoderModel) -> Self {
        Self {
            layer: model.config().default_bottleneck_layer(),
            num_steps: PathSpec::DEFAULT_STEPS,
            ig_steps: PathSpec::DEFAULT_STEPS,
            m2ib: M2ibConfig::default(),
            seed: 0,
        }
    }

    /// Same settings with every stochastic method reseeded.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut p = self.clone();
        p.seed = seed;
        p.m2ib.seed = seed;
        p
    }
}

/// Runs any method by id.
pub fn attribute(
    model: &DualEncoderModel,
    sample: &Sample,
    modality: Modality,
    method: MethodId,
    params: &MethodParams,
) -> Result<AttributionMap> {
    match method {
        MethodId::Nib => nib_attribute(
            model,
            sample,
            &PathSpec::new(params.num_steps, params.layer, modality),
        ),
        MethodId::M2ib => m2ib_attribute(model, sample, modality, params.layer, &params.m2ib),
        MethodId::Sm => saliency_map(model, sample, modality),
        MethodId::Fastig => fast_ig(model, sample, modality),
        MethodId::Ig => integrated_gradients(model, sample, modality, params.ig_steps, None),
        MethodId::Gradcam => gradcam_layer(model, sample, modality, params.layer),
        MethodId::Random => random_attribution(model, sample, modality, params.seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(5.0) + sigmoid(-5.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn adam_moves_along_gradient_sign() {
        let mut adam = Adam::new(1.0, 2);
        let mut p = vec![0.0, 0.0];
        adam.ascend(&mut p, &[1e-6, -3.0]);
        assert!((p[0] - 1.0).abs() < 1e-2);
        assert!((p[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn random_scores_reproducible() {
        assert_eq!(random_scores(8, 3), random_scores(8, 3));
        assert_ne!(random_scores(8, 3), random_scores(8, 4));
        let big = random_scores(10_000, 11);
        let mean = big.iter().sum::<f64>() / big.len() as f64;
        assert!((mean - 0.5).abs() < 0.02);
    }

    #[test]
    fn m2ib_config_validation() {
        let ok = M2ibConfig::default();
        ok.validate().unwrap();
        for bad in [
            M2ibConfig {
                beta: 0.0,
                ..ok.clone()
            },
            M2ibConfig {
                iters: 0,
                ..ok.clone()
            },
            M2ibConfig {
                noise_samples: 0,
                ..ok.clone()
            },
            M2ibConfig {
                variance: -1.0,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn ig_linear_score_is_complete() {
        // S(x) = w·x has constant gradient w, so one step is exact.
        let w = Tensor::vector(vec![0.5, -2.0, 3.0]).unwrap();
        let x = Tensor::vector(vec![1.0, 2.0, -1.0]).unwrap();
        let x0 = Tensor::zeros(&[3]);
        let score = |p: &Tensor| {
            p.data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let ig = integrated_gradients_with(|p| Ok((score(&p), w.clone())), &x, &x0, 1).unwrap();
        assert_eq!(ig.attributions.sum(), score(&x) - score(&x0));
        assert_eq!(ig.attributions.data(), &[0.5, -4.0, -3.0]);
    }

    #[test]
    fn ig_at_baseline_is_zero() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let ig =
            integrated_gradients_with(|p| Ok((0.0, p.scaled(3.0)?)), &x, &x.clone(), 4).unwrap();
        assert!(ig.attributions.data().iter().all(|v| *v == 0.0));
    }
}
