//! Confidence Drop / Confidence Increase, β sweeps, seed variance and
//! throughput.
//!
//! For each sample the original score `Y = cos(f_I(x_I), f_T(x_T))` is
//! compared with `O`, the score after the attributed modality is weighted by
//! its min-max normalized saliency. Drop is the mean of
//! `max(0, Y − O) / Y · 100` and Increase the percentage of samples with
//! `O > Y`. Samples with `Y ≤ 1e-6` are excluded from both and counted.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{upsample_bilinear, AttributionMap, MethodId, SaliencyImage};
use crate::baselines::{attribute, M2ibConfig, MethodParams};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::model::{cosine, DualEncoderModel, Modality, TokenRole};
use crate::tensor::Tensor;

/// Original scores at or below this value are excluded from the metrics.
pub const EXCLUSION_THRESHOLD: f64 = 1e-6;

/// `x ⊙ M` with `M` the normalized saliency broadcast over channels.
pub fn apply_image_mask(image: &Tensor, saliency: &SaliencyImage) -> Result<Tensor> {
    let shape = image.shape();
    let [_, h, w] = shape else {
        return Err(Error::Shape {
            op: "apply_image_mask",
            detail: format!("expected [C, H, W], got {shape:?}"),
        });
    };
    if (*h, *w) != (saliency.height, saliency.width) {
        return Err(Error::Shape {
            op: "apply_image_mask",
            detail: format!(
                "image {h}x{w} vs saliency {}x{}",
                saliency.height, saliency.width
            ),
        });
    }
    apply_mask(image, &saliency.normalized())
}

/// `x ⊙ M` for an explicit `[H, W]` mask broadcast over channels.
pub fn apply_mask(image: &Tensor, mask: &[f64]) -> Result<Tensor> {
    let shape = image.shape();
    let plane = match shape {
        [_, h, w] if h * w == mask.len() => h * w,
        _ => {
            return Err(Error::Shape {
                op: "apply_mask",
                detail: format!("image {shape:?} vs mask of {}", mask.len()),
            })
        }
    };
    let data = image
        .data()
        .chunks(plane)
        .flat_map(|p| p.iter().zip(mask).map(|(x, m)| x * m))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Token embeddings with content tokens scaled by the normalized per-token
/// saliency; special tokens keep weight 1.
pub fn apply_text_mask(
    model: &DualEncoderModel,
    tokens: &[usize],
    map: &AttributionMap,
) -> Result<Tensor> {
    if map.modality != Modality::Text {
        return Err(Error::Modality { expected: "text" });
    }
    let input = crate::model::Input::Text(tokens);
    let roles = model.roles(&input);
    let content = roles.iter().filter(|r| **r == TokenRole::Text).count();
    if content == 0 {
        return Err(Error::Empty("content tokens"));
    }
    if map.scores.len() != content {
        return Err(Error::Shape {
            op: "apply_text_mask",
            detail: format!("{} scores for {content} content tokens", map.scores.len()),
        });
    }
    let weights = map.normalized();
    let emb = model.input_features(&input)?;
    let d = model.config().d_model;
    let mut next = weights.iter();
    let data = emb
        .data()
        .chunks(d)
        .zip(&roles)
        .flat_map(|(row, role)| {
            let w = if *role == TokenRole::Text {
                *next.next().expect("counted above")
            } else {
                1.0
            };
            row.iter().map(move |v| v * w)
        })
        .collect();
    Tensor::new(emb.shape().to_vec(), data)
}

/// Saliency at input resolution for an image-modality map.
pub fn image_saliency(model: &DualEncoderModel, map: &AttributionMap) -> Result<SaliencyImage> {
    let s = model.config().image_size;
    upsample_bilinear(map, s, s)
}

/// Original and masked scores for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskedScores {
    pub original: f64,
    pub masked: f64,
}

pub fn masked_scores(
    model: &DualEncoderModel,
    sample: &Sample,
    map: &AttributionMap,
) -> Result<MaskedScores> {
    let original = model.similarity(&sample.image, &sample.tokens)?;
    let masked = match map.modality {
        Modality::Image => {
            let sal = image_saliency(model, map)?;
            let image = apply_image_mask(&sample.image, &sal)?;
            cosine(
                &model.embed_image(&image)?,
                &model.embed_text(&sample.tokens)?,
            )?
        }
        Modality::Text => {
            let emb = apply_text_mask(model, &sample.tokens, map)?;
            cosine(
                &model.embed_features(Modality::Text, &emb)?,
                &model.embed_image(&sample.image)?,
            )?
        }
    };
    Ok(MaskedScores { original, masked })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceMetrics {
    pub drop: f64,
    pub increase: f64,
    pub scored: usize,
    pub excluded: usize,
}

/// Aggregates per-sample scores, excluding samples whose original score is
/// at or below [`EXCLUSION_THRESHOLD`].
pub fn aggregate(scores: &[MaskedScores]) -> Result<ConfidenceMetrics> {
    if scores.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut drop = 0.0;
    let mut increased = 0usize;
    let mut scored = 0usize;
    for s in scores {
        if s.original <= EXCLUSION_THRESHOLD {
            continue;
        }
        scored += 1;
        drop += (s.original - s.masked).max(0.0) / s.original * 100.0;
        if s.masked > s.original {
            increased += 1;
        }
    }
    if scored == 0 {
        return Err(Error::AllExcluded(scores.len()));
    }
    Ok(ConfidenceMetrics {
        drop: drop / scored as f64,
        increase: increased as f64 / scored as f64 * 100.0,
        scored,
        excluded: scores.len() - scored,
    })
}

/// Confidence metrics of maps produced by `explain` for one modality.
/// Samples are processed in parallel; results keep dataset order.
pub fn confidence_with<F>(
    model: &DualEncoderModel,
    dataset: &[Sample],
    explain: F,
) -> Result<ConfidenceMetrics>
where
    F: Fn(&Sample) -> Result<AttributionMap> + Sync,
{
    let scores = dataset
        .par_iter()
        .map(|s| masked_scores(model, s, &explain(s)?))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&scores)
}

pub fn confidence_metrics(
    model: &DualEncoderModel,
    dataset: &[Sample],
    method: MethodId,
    modality: Modality,
    params: &MethodParams,
) -> Result<ConfidenceMetrics> {
    confidence_with(model, dataset, |s| {
        attribute(model, s, modality, method, params)
    })
}

pub fn confidence_drop(
    model: &DualEncoderModel,
    dataset: &[Sample],
    method: MethodId,
    modality: Modality,
    params: &MethodParams,
) -> Result<f64> {
    Ok(confidence_metrics(model, dataset, method, modality, params)?.drop)
}

pub fn confidence_increase(
    model: &DualEncoderModel,
    dataset: &[Sample],
    method: MethodId,
    modality: Modality,
    params: &MethodParams,
) -> Result<f64> {
    Ok(confidence_metrics(model, dataset, method, modality, params)?.increase)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: MethodId,
    pub img_conf_drop: f64,
    pub img_conf_incr: f64,
    pub text_conf_drop: f64,
    pub text_conf_incr: f64,
    /// Image attributions per second, single-threaded.
    pub fps: f64,
    pub samples: usize,
    pub excluded: usize,
}

impl MetricReport {
    /// Pretty JSON with fields in declaration order.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Both modalities' metrics plus image throughput.
pub fn evaluate(
    model: &DualEncoderModel,
    dataset: &[Sample],
    method: MethodId,
    params: &MethodParams,
    measure_fps: bool,
) -> Result<MetricReport> {
    let image = confidence_metrics(model, dataset, method, Modality::Image, params)?;
    let text = confidence_metrics(model, dataset, method, Modality::Text, params)?;
    let fps = if measure_fps {
        throughput(model, dataset, method, Modality::Image, params)?
    } else {
        0.0
    };
    Ok(MetricReport {
        method,
        img_conf_drop: image.drop,
        img_conf_incr: image.increase,
        text_conf_drop: text.drop,
        text_conf_incr: text.increase,
        fps,
        samples: dataset.len(),
        excluded: image.excluded,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaRow {
    pub beta: f64,
    pub report: MetricReport,
}

/// M2IB-lite metrics for each `β`.
pub fn beta_sweep(
    model: &DualEncoderModel,
    dataset: &[Sample],
    betas: &[f64],
    params: &MethodParams,
) -> Result<Vec<BetaRow>> {
    if betas.is_empty() {
        return Err(Error::Empty("beta grid"));
    }
    betas
        .iter()
        .map(|&beta| {
            let mut p = params.clone();
            p.m2ib = M2ibConfig { beta, ..p.m2ib };
            p.m2ib.validate()?;
            Ok(BetaRow {
                beta,
                report: evaluate(model, dataset, MethodId::M2ib, &p, false)?,
            })
        })
        .collect()
}

/// `(max − min) / max` of a column of non-negative values; 0 when all vanish.
pub fn relative_spread(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedVariance {
    pub max_std: f64,
    pub mean_std: f64,
}

/// Elementwise population standard deviation of maps across seeds, pooled
/// over every sample and map element.
pub fn seed_variance(
    model: &DualEncoderModel,
    dataset: &[Sample],
    method: MethodId,
    modality: Modality,
    params: &MethodParams,
    seeds: &[u64],
) -> Result<SeedVariance> {
    if seeds.len() < 2 {
        return Err(Error::Parameter(
            "seed_variance needs at least two seeds".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut stds = Vec::new();
    for sample in dataset {
        let maps = seeds
            .iter()
            .map(|&seed| attribute(model, sample, modality, method, &params.with_seed(seed)))
            .collect::<Result<Vec<_>>>()?;
        stds.extend(elementwise_std(&maps));
    }
    Ok(SeedVariance {
        max_std: stds.iter().copied().fold(0.0, f64::max),
        mean_std: stds.iter().sum::<f64>() / stds.len() as f64,
    })
}

fn elementwise_std(maps: &[AttributionMap]) -> Vec<f64> {
    let n = maps.len() as f64;
    let len = maps[0].scores.len();
    (0..len)
        .map(|i| {
            let first = maps[0].scores[i];
            if maps
                .iter()
                .all(|m| m.scores[i].to_bits() == first.to_bits())
            {
                return 0.0;
            }
            let mean = maps.iter().map(|m| m.scores[i]).sum::<f64>() / n;
            let var = maps
                .iter()
                .map(|m| (m.scores[i] - mean).powi(2))
                .sum::<f64>()
                / n;
            var.sqrt()
        })
        .collect()
}

/// Attributions per second on the current thread. The first sample is run
/// once untimed as warm-up.
pub fn throughput(
    model: &DualEncoderModel,
    dataset: &[Sample],
    method: MethodId,
    modality: Modality,
    params: &MethodParams,
) -> Result<f64> {
    let first = dataset.first().ok_or(Error::Empty("dataset"))?;
    attribute(model, first, modality, method, params)?;
    let start = Instant::now();
    for sample in dataset {
        attribute(model, sample, modality, method, params)?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok(dataset.len() as f64 / elapsed.max(f64::MIN_POSITIVE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_excludes_non_positive() {
        let scores = [
            MaskedScores {
                original: 0.5,
                masked: 0.25,
            },
            MaskedScores {
                original: -0.2,
                masked: 0.9,
            },
            MaskedScores {
                original: 0.4,
                masked: 0.5,
            },
        ];
        let m = aggregate(&scores).unwrap();
        assert_eq!(m.scored, 2);
        assert_eq!(m.excluded, 1);
        assert_eq!(m.drop, 25.0);
        assert_eq!(m.increase, 50.0);
    }

    #[test]
    fn aggregate_errors() {
        assert_eq!(aggregate(&[]).unwrap_err().code(), "empty_input");
        let all_bad = [MaskedScores {
            original: 0.0,
            masked: 1.0,
        }];
        assert_eq!(
            aggregate(&all_bad).unwrap_err().code(),
            "all_samples_excluded"
        );
    }

    #[test]
    fn spread() {
        assert_eq!(relative_spread(&[1.0, 2.0, 4.0]), 0.75);
        assert_eq!(relative_spread(&[0.0, 0.0]), 0.0);
        assert_eq!(relative_spread(&[3.0]), 0.0);
    }

    #[test]
    fn image_mask_extremes() {
        let x = Tensor::new(vec![2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let ones = SaliencyImage {
            height: 2,
            width: 2,
            raw: vec![0.3; 4],
        };
        assert_eq!(apply_image_mask(&x, &ones).unwrap(), x);
        let half = SaliencyImage {
            height: 2,
            width: 2,
            raw: vec![0.0, 1.0, 0.0, 1.0],
        };
        let m = apply_image_mask(&x, &half).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0, 0.0, 3.0, 0.0, 5.0, 0.0, 7.0]);
        let zero = apply_mask(&x, &[0.0; 4]).unwrap();
        assert!(zero.data().iter().all(|v| *v == 0.0));
        let wrong = SaliencyImage {
            height: 3,
            width: 2,
            raw: vec![0.0; 6],
        };
        assert!(apply_image_mask(&x, &wrong).is_err());
    }
}
