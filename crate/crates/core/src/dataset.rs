//! Image–text samples and the seeded toy dataset.
//!
//! Toy images are built from a small bank of "concept" textures, one per
//! patch cell, over low-amplitude background noise. Each image is paired with
//! the caption that scores highest among a handful of random candidates, so
//! pairs are matched in the model's own embedding space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attribution::{AttributionMap, MethodId, PassCount};
use crate::error::{Error, Result};
use crate::model::{DualEncoderModel, Input, Modality, ModelConfig, BOS, EOS};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub tokens: Vec<usize>,
}

impl Sample {
    pub fn input(&self, modality: Modality) -> Input<'_> {
        match modality {
            Modality::Image => Input::Image(&self.image),
            Modality::Text => Input::Text(&self.tokens),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.image.shape() != config.image_shape() {
            return Err(Error::Shape {
                op: "sample image",
                detail: format!(
                    "{}: expected {:?}, got {:?}",
                    self.id,
                    config.image_shape(),
                    self.image.shape()
                ),
            });
        }
        if self.tokens.is_empty() {
            return Err(Error::Empty("sample tokens"));
        }
        if self.tokens.len() > config.max_len {
            return Err(Error::OutOfRange {
                context: "sample tokens",
                index: self.tokens.len(),
                limit: config.max_len,
            });
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t >= config.vocab) {
            return Err(Error::OutOfRange {
                context: "token id",
                index: t,
                limit: config.vocab,
            });
        }
        Ok(())
    }
}

pub const TOY_DATASET_SIZE: usize = 64;
const CONCEPTS: usize = 4;
const CAPTION_CANDIDATES: usize = 8;
const BACKGROUND_NOISE: f64 = 0.1;

struct ImageSynth {
    rng: ChaCha8Rng,
    concepts: Vec<Vec<f64>>,
    config: ModelConfig,
}

impl ImageSynth {
    fn new(seed: u64, config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let texture = config.channels * config.patch * config.patch;
        let concepts = (0..CONCEPTS)
            .map(|_| {
                (0..texture)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect();
        Self {
            rng,
            concepts,
            config: config.clone(),
        }
    }

    fn noise(&mut self) -> f64 {
        let v: f64 = StandardNormal.sample(&mut self.rng);
        v * BACKGROUND_NOISE
    }

    /// Paints `concept` into the patch cell `(gy, gx)`.
    fn paint(&self, image: &mut [f64], cell: (usize, usize), concept: usize) {
        let c = &self.config;
        let (s, p) = (c.image_size, c.patch);
        let texture = &self.concepts[concept];
        let mut i = 0;
        for ch in 0..c.channels {
            for dy in 0..p {
                for dx in 0..p {
                    let y = cell.0 * p + dy;
                    let x = cell.1 * p + dx;
                    image[ch * s * s + y * s + x] += texture[i];
                    i += 1;
                }
            }
        }
    }

    fn background(&mut self) -> Vec<f64> {
        let n = self.config.image_shape().iter().product();
        (0..n).map(|_| self.noise()).collect()
    }

    fn random_image(&mut self) -> Result<Tensor> {
        let mut image = self.background();
        let g = self.config.grid_side();
        let main = self.rng.random_range(0..CONCEPTS);
        let secondary = self.rng.random_range(0..CONCEPTS);
        for gy in 0..g {
            for gx in 0..g {
                let roll: f64 = self.rng.random();
                if roll < 0.35 {
                    self.paint(&mut image, (gy, gx), main);
                } else if roll < 0.5 {
                    self.paint(&mut image, (gy, gx), secondary);
                }
            }
        }
        Tensor::new(self.config.image_shape().to_vec(), image)
    }

    fn random_caption(&mut self) -> Vec<usize> {
        let max_content = self.config.max_len - 2;
        let len = self.rng.random_range(max_content.clamp(1, 3)..=max_content);
        let mut tokens = vec![BOS];
        tokens.extend((0..len).map(|_| self.rng.random_range(EOS + 1..self.config.vocab)));
        tokens.push(EOS);
        tokens
    }

    fn best_caption(&mut self, model: &DualEncoderModel, image: &Tensor) -> Result<Vec<usize>> {
        let e = model.embed_image(image)?;
        let mut best: Option<(f64, Vec<usize>)> = None;
        for _ in 0..CAPTION_CANDIDATES {
            let caption = self.random_caption();
            let s = crate::model::cosine(&e, &model.embed_text(&caption)?)?;
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, caption));
            }
        }
        Ok(best.expect("at least one candidate").1)
    }
}

/// Seeded toy dataset of `n` matched image–caption pairs.
pub fn toy_dataset(model: &DualEncoderModel, seed: u64, n: usize) -> Result<Vec<Sample>> {
    let mut synth = ImageSynth::new(seed, model.config());
    (0..n)
        .map(|i| {
            let image = synth.random_image()?;
            let tokens = synth.best_caption(model, &image)?;
            Ok(Sample {
                id: format!("toy-{seed}-{i:03}"),
                image,
                tokens,
            })
        })
        .collect()
}

/// Seed of the shipped two-concept fixture.
pub const TWO_CONCEPT_SEED: u64 = 1;

/// Image split between two competing concepts, captioned for the left
/// concept alone. The right half holds whichever other concept lowers the
/// caption's score the most.
pub fn two_concept_fixture(model: &DualEncoderModel, seed: u64) -> Result<Sample> {
    let mut synth = ImageSynth::new(seed, model.config());
    let g = model.config().grid_side();
    let shape = model.config().image_shape().to_vec();
    let left_half = |gx: usize| gx < g.div_ceil(2);
    let mut left_only = synth.background();
    for gy in 0..g {
        for gx in (0..g).filter(|&gx| left_half(gx)) {
            synth.paint(&mut left_only, (gy, gx), 0);
        }
    }
    let tokens = synth.best_caption(model, &Tensor::new(shape.clone(), left_only.clone())?)?;
    let text = model.embed_text(&tokens)?;
    let mut best: Option<(f64, Tensor)> = None;
    for rival in 1..CONCEPTS {
        let mut both = left_only.clone();
        for gy in 0..g {
            for gx in (0..g).filter(|&gx| !left_half(gx)) {
                synth.paint(&mut both, (gy, gx), rival);
            }
        }
        let image = Tensor::new(shape.clone(), both)?;
        let s = crate::model::cosine(&model.embed_image(&image)?, &text)?;
        if best.as_ref().is_none_or(|(b, _)| s < *b) {
            best = Some((s, image));
        }
    }
    Ok(Sample {
        id: format!("two-concept-{seed}"),
        image: best.expect("at least one rival concept").1,
        tokens,
    })
}

/// A sample together with a patch map that suppresses one distractor patch.
/// Masking with the map raises the similarity above the original score.
#[derive(Clone, Debug)]
pub struct DistractorFixture {
    pub sample: Sample,
    pub patch: (usize, usize),
    pub map: AttributionMap,
}

/// Patch-grid map that is 1 everywhere except 0 at `patch`.
pub fn patch_suppression_map(config: &ModelConfig, patch: (usize, usize)) -> AttributionMap {
    let g = config.grid_side();
    let mut scores = vec![1.0; g * g];
    scores[patch.0 * g + patch.1] = 0.0;
    AttributionMap {
        method: MethodId::Random,
        modality: Modality::Image,
        scores,
        grid: (g, g),
        layer: None,
        token_scores: vec![],
        roles: vec![],
        path: None,
        seed: None,
        passes: PassCount::default(),
    }
}

/// Searches the two-concept images for a patch whose suppression increases
/// the image–text similarity.
pub fn distractor_fixture(model: &DualEncoderModel) -> Result<DistractorFixture> {
    let cfg = model.config();
    let g = cfg.grid_side();
    for seed in 0..32 {
        let sample = two_concept_fixture(model, seed)?;
        let original = model.similarity(&sample.image, &sample.tokens)?;
        if original <= crate::eval::EXCLUSION_THRESHOLD {
            continue;
        }
        let text = model.embed_text(&sample.tokens)?;
        let mut best: Option<((usize, usize), f64)> = None;
        for gy in 0..g {
            for gx in 0..g {
                let map = patch_suppression_map(cfg, (gy, gx));
                let sal =
                    crate::attribution::upsample_bilinear(&map, cfg.image_size, cfg.image_size)?;
                let masked = crate::eval::apply_image_mask(&sample.image, &sal)?;
                let s = crate::model::cosine(&model.embed_image(&masked)?, &text)?;
                if s > original && best.is_none_or(|(_, b)| s > b) {
                    best = Some(((gy, gx), s));
                }
            }
        }
        if let Some((patch, _)) = best {
            return Ok(DistractorFixture {
                map: patch_suppression_map(cfg, patch),
                sample,
                patch,
            });
        }
    }
    Err(Error::Degenerate(
        "no patch suppression raised the similarity on any fixture seed".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> DualEncoderModel {
        DualEncoderModel::init_toy(42, ModelConfig::default()).unwrap()
    }

    #[test]
    fn toy_dataset_is_seeded_and_valid() {
        let m = model();
        let a = toy_dataset(&m, 1, 6).unwrap();
        let b = toy_dataset(&m, 1, 6).unwrap();
        assert_eq!(a, b);
        let c = toy_dataset(&m, 2, 6).unwrap();
        assert_ne!(a[0].image, c[0].image);
        for s in &a {
            s.validate(m.config()).unwrap();
            assert_eq!(s.tokens[0], BOS);
            assert_eq!(*s.tokens.last().unwrap(), EOS);
            assert!(s.tokens.len() >= 3);
        }
    }

    #[test]
    fn sample_validation_errors() {
        let m = model();
        let mut s = toy_dataset(&m, 0, 1).unwrap().remove(0);
        s.tokens.push(99);
        assert_eq!(s.validate(m.config()).unwrap_err().code(), "out_of_range");
        s.tokens.clear();
        assert_eq!(s.validate(m.config()).unwrap_err().code(), "empty_input");
    }

    #[test]
    fn suppression_map_shape() {
        let cfg = ModelConfig::default();
        let map = patch_suppression_map(&cfg, (1, 2));
        assert_eq!(map.grid, (4, 4));
        assert_eq!(map.scores.iter().filter(|v| **v == 0.0).count(), 1);
        assert_eq!(map.scores[6], 0.0);
    }
}
