//! Heatmap files: an 8-bit binary PGM of the normalized map, a CSV of the raw
//! signed values in the same row-major order, and a JSON sidecar.
//!
//! Image maps are upsampled to input resolution first. Text maps are written
//! as a single row with one pixel per content token.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::attribution::{min_max_normalize, AttributionMap, MethodId, PassCount};
use crate::error::{Error, Result};
use crate::eval::image_saliency;
use crate::model::{DualEncoderModel, Modality};

/// A map ready to be written: `height * width` raw values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub raw: Vec<f64>,
}

impl Heatmap {
    pub fn from_map(model: &DualEncoderModel, map: &AttributionMap) -> Result<Self> {
        match map.modality {
            Modality::Image => {
                let s = image_saliency(model, map)?;
                Ok(Self {
                    width: s.width,
                    height: s.height,
                    raw: s.raw,
                })
            }
            Modality::Text => Ok(Self {
                width: map.scores.len(),
                height: 1,
                raw: map.scores.clone(),
            }),
        }
    }

    pub fn to_pgm(&self) -> Result<Vec<u8>> {
        if self.width * self.height != self.raw.len() || self.raw.is_empty() {
            return Err(Error::Shape {
                op: "to_pgm",
                detail: format!(
                    "{}x{} vs {} values",
                    self.width,
                    self.height,
                    self.raw.len()
                ),
            });
        }
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            min_max_normalize(&self.raw)
                .into_iter()
                .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
        Ok(out)
    }

    /// One CSV line per row; values use the shortest exact decimal form.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.raw.chunks(self.width.max(1)) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Parses an 8-bit binary PGM into `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |why: &str| Error::Parameter(format!("not an 8-bit binary PGM: {why}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("header ended early"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("magic or maxval"));
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| bad("dimensions"));
    let (w, h) = (dim(fields[1])?, dim(fields[2])?);
    let pixels = bytes
        .get(pos + 1..)
        .ok_or_else(|| bad("missing pixel data"))?;
    if pixels.len() != w * h {
        return Err(bad("pixel count"));
    }
    Ok((w, h, pixels.to_vec()))
}

#[derive(Clone, Debug, Serialize)]
pub struct HeatmapMeta<'a> {
    pub sample_id: &'a str,
    pub method: MethodId,
    pub modality: Modality,
    pub layer: Option<usize>,
    pub num_steps: Option<usize>,
    pub completeness_gap: Option<f64>,
    pub seed: Option<u64>,
    pub width: usize,
    pub height: usize,
    pub passes: PassCount,
}

/// Paths of the three files written for one map.
#[derive(Clone, Debug)]
pub struct HeatmapFiles {
    pub pgm: PathBuf,
    pub csv: PathBuf,
    pub json: PathBuf,
}

/// Writes `<stem>.pgm`, `<stem>.csv` and `<stem>.json` into `dir`.
pub fn write_heatmap(
    model: &DualEncoderModel,
    map: &AttributionMap,
    sample_id: &str,
    dir: &Path,
    stem: &str,
) -> Result<HeatmapFiles> {
    let heat = Heatmap::from_map(model, map)?;
    let meta = HeatmapMeta {
        sample_id,
        method: map.method,
        modality: map.modality,
        layer: map.layer,
        num_steps: map.path.as_ref().map(|p| p.num_steps),
        completeness_gap: map.completeness_gap(),
        seed: map.seed,
        width: heat.width,
        height: heat.height,
        passes: map.passes,
    };
    let files = HeatmapFiles {
        pgm: dir.join(format!("{stem}.pgm")),
        csv: dir.join(format!("{stem}.csv")),
        json: dir.join(format!("{stem}.json")),
    };
    std::fs::write(&files.pgm, heat.to_pgm()?)?;
    std::fs::write(&files.csv, heat.to_csv())?;
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    std::fs::write(&files.json, json)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip() {
        let h = Heatmap {
            width: 3,
            height: 2,
            raw: vec![-1.0, 0.0, 1.0, 0.5, -0.5, 0.25],
        };
        let bytes = h.to_pgm().unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let (w, hh, px) = parse_pgm(&bytes).unwrap();
        assert_eq!((w, hh), (3, 2));
        assert_eq!(px, vec![0, 128, 255, 191, 64, 159]);
    }

    #[test]
    fn constant_map_is_white() {
        let h = Heatmap {
            width: 2,
            height: 1,
            raw: vec![0.3, 0.3],
        };
        let (_, _, px) = parse_pgm(&h.to_pgm().unwrap()).unwrap();
        assert_eq!(px, vec![255, 255]);
    }

    #[test]
    fn csv_rows_match_layout() {
        let h = Heatmap {
            width: 2,
            height: 2,
            raw: vec![0.1, -2.0, 3.0, 1e-20],
        };
        assert_eq!(h.to_csv(), "0.1,-2\n3,0.00000000000000000001\n");
    }

    #[test]
    fn pgm_errors() {
        assert!(parse_pgm(b"P2\n1 1\n255\n\0").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\0").is_err());
        let empty = Heatmap {
            width: 0,
            height: 0,
            raw: vec![],
        };
        assert!(empty.to_pgm().is_err());
    }
}
