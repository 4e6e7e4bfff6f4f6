//! Attribution maps shared by every method, plus spatial upsampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Modality, TokenRole};

/// Attribution methods, with their stable CLI names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodId {
    Nib,
    M2ib,
    Sm,
    Fastig,
    Ig,
    Gradcam,
    Random,
}

impl MethodId {
    pub const ALL: [MethodId; 7] = [
        MethodId::Nib,
        MethodId::M2ib,
        MethodId::Sm,
        MethodId::Fastig,
        MethodId::Ig,
        MethodId::Gradcam,
        MethodId::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodId::Nib => "nib",
            MethodId::M2ib => "m2ib",
            MethodId::Sm => "sm",
            MethodId::Fastig => "fastig",
            MethodId::Ig => "ig",
            MethodId::Gradcam => "gradcam",
            MethodId::Random => "random",
        }
    }

    /// Methods whose output depends on a seed.
    pub fn is_stochastic(self) -> bool {
        matches!(self, MethodId::M2ib | MethodId::Random)
    }
}

impl std::fmt::Display for MethodId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

/// Model passes spent on one attribution. A forward is one (possibly
/// batched) encoder evaluation, a backward one reverse sweep.
/// `diagnostic_forward` counts evaluations made only to report the
/// completeness residual.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCount {
    pub forward: usize,
    pub backward: usize,
    pub diagnostic_forward: usize,
}

/// Path-integral bookkeeping for methods that integrate along a path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathDiagnostics {
    pub num_steps: usize,
    /// Score with the path fully open (`S(1)` or `S(x)`).
    pub score_open: f64,
    /// Score with the path fully closed (`S(0)` or `S(x0)`).
    pub score_closed: f64,
    /// Sum of every per-element contribution, reported or not.
    pub total_contribution: f64,
    /// `|total_contribution - (score_open - score_closed)|`.
    pub completeness_gap: f64,
    /// The closed-path embedding had (near-)zero norm; `score_closed` was set to 0.
    pub degenerate_closed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub method: MethodId,
    pub modality: Modality,
    /// Reported scores, row-major over `grid`.
    pub scores: Vec<f64>,
    /// `(rows, cols)`: patch grid or pixel grid for images, `(1, n)` for text.
    pub grid: (usize, usize),
    pub layer: Option<usize>,
    /// Scores for every token of the hidden state, including CLS and
    /// special tokens. Empty for input-space methods.
    pub token_scores: Vec<f64>,
    pub roles: Vec<TokenRole>,
    pub path: Option<PathDiagnostics>,
    pub seed: Option<u64>,
    pub passes: PassCount,
}

impl AttributionMap {
    /// Builds a map from per-token scores, reporting only patch/content tokens.
    pub(crate) fn from_tokens(
        method: MethodId,
        modality: Modality,
        token_scores: Vec<f64>,
        roles: Vec<TokenRole>,
        grid_side: usize,
    ) -> Self {
        let scores: Vec<f64> = token_scores
            .iter()
            .zip(&roles)
            .filter(|(_, r)| r.is_reported())
            .map(|(s, _)| *s)
            .collect();
        let grid = match modality {
            Modality::Image => (grid_side, grid_side),
            Modality::Text => (1, scores.len()),
        };
        Self {
            method,
            modality,
            scores,
            grid,
            layer: None,
            token_scores,
            roles,
            path: None,
            seed: None,
            passes: PassCount::default(),
        }
    }

    pub fn completeness_gap(&self) -> Option<f64> {
        self.path.as_ref().map(|p| p.completeness_gap)
    }

    /// Min-max normalized scores (see [`min_max_normalize`]).
    pub fn normalized(&self) -> Vec<f64> {
        min_max_normalize(&self.scores)
    }

    pub fn bitwise_eq(&self, other: &AttributionMap) -> bool {
        self.grid == other.grid
            && self.scores.len() == other.scores.len()
            && self
                .scores
                .iter()
                .zip(&other.scores)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Maps values onto `[0, 1]` with `(v - min) / (max - min)`. A constant input
/// carries no ranking, so it maps to all ones (nothing is masked out).
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range.is_nan() || range <= 0.0 {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| (v - min) / range).collect()
}

/// Saliency at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyImage {
    pub height: usize,
    pub width: usize,
    /// Signed values, row-major.
    pub raw: Vec<f64>,
}

impl SaliencyImage {
    pub fn normalized(&self) -> Vec<f64> {
        min_max_normalize(&self.raw)
    }
}

/// Bilinear resize of an image-modality map to `height x width`, using the
/// half-pixel (align-corners = false) convention with edge clamping.
pub fn upsample_bilinear(
    map: &AttributionMap,
    height: usize,
    width: usize,
) -> Result<SaliencyImage> {
    if map.modality != Modality::Image {
        return Err(Error::Modality { expected: "image" });
    }
    if height == 0 || width == 0 {
        return Err(Error::Parameter("upsample target must be non-empty".into()));
    }
    let (rows, cols) = map.grid;
    if rows * cols != map.scores.len() || rows == 0 || cols == 0 {
        return Err(Error::Shape {
            op: "upsample_bilinear",
            detail: format!("grid {rows}x{cols} vs {} scores", map.scores.len()),
        });
    }
    let axis = |out: usize, size_in: usize, size_out: usize| -> (usize, usize, f64) {
        let scale = size_in as f64 / size_out as f64;
        let src = ((out as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(size_in - 1);
        let hi = (lo + 1).min(size_in - 1);
        let frac = if hi == lo { 0.0 } else { src - lo as f64 };
        (lo, hi, frac)
    };
    let s = &map.scores;
    let mut raw = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = axis(y, rows, height);
        for x in 0..width {
            let (x0, x1, fx) = axis(x, cols, width);
            let top = s[y0 * cols + x0] * (1.0 - fx) + s[y0 * cols + x1] * fx;
            let bottom = s[y1 * cols + x0] * (1.0 - fx) + s[y1 * cols + x1] * fx;
            raw.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(SaliencyImage { height, width, raw })
}
