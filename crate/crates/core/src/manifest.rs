//! JSON manifests for models and datasets, each pointing at a tensor bundle
//! stored next to it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bundle::{bundle_tensors, read_bundle_file, write_bundle_file, BundleEntry};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::model::{DualEncoderModel, ModelConfig};

pub const MODEL_FAMILY: &str = "dual-encoder-v1";
/// Version of the weight-name schema produced by
/// [`DualEncoderModel::weight_schema`].
pub const SCHEMA_VERSION: u32 = 1;

pub const MODEL_MANIFEST: &str = "model.json";
pub const MODEL_BUNDLE: &str = "model.nibt";
pub const DATASET_MANIFEST: &str = "dataset.json";
pub const DATASET_BUNDLE: &str = "dataset.nibt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub family: String,
    pub schema_version: u32,
    #[serde(flatten)]
    pub config: ModelConfig,
    /// Bundle path, relative to the manifest's directory.
    pub bundle: String,
    /// Default attribution layer.
    pub bottleneck_layer: usize,
}

impl ModelManifest {
    pub fn for_config(config: &ModelConfig, bundle: impl Into<String>) -> Self {
        Self {
            family: MODEL_FAMILY.into(),
            schema_version: SCHEMA_VERSION,
            config: config.clone(),
            bundle: bundle.into(),
            bottleneck_layer: config.default_bottleneck_layer(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.family != MODEL_FAMILY {
            return Err(Error::Manifest(format!(
                "unknown model family {:?}",
                self.family
            )));
        }
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Manifest(format!(
                "weight schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.config.validate()?;
        if !(1..=self.config.layers).contains(&self.bottleneck_layer) {
            return Err(Error::LayerOutOfRange {
                layer: self.bottleneck_layer,
                max: self.config.layers,
            });
        }
        Ok(())
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn sibling(manifest: &Path, relative: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(relative)
}

/// Writes `model.nibt` and `model.json` into `dir`; returns the manifest path.
pub fn save_model(model: &DualEncoderModel, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let entries: Vec<BundleEntry> = model
        .named_weights()
        .into_iter()
        .map(|(name, t)| BundleEntry::from_tensor(name, t))
        .collect();
    write_bundle_file(&dir.join(MODEL_BUNDLE), &entries)?;
    let path = dir.join(MODEL_MANIFEST);
    write_json(
        &path,
        &ModelManifest::for_config(model.config(), MODEL_BUNDLE),
    )?;
    Ok(path)
}

pub fn read_model_manifest(path: &Path) -> Result<ModelManifest> {
    let manifest: ModelManifest = read_json(path)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Loads the manifest and its bundle. Weights are widened from f32 and
/// checked by name and shape against the config.
pub fn load_model_with_manifest(path: &Path) -> Result<(DualEncoderModel, ModelManifest)> {
    let manifest = read_model_manifest(path)?;
    let entries = read_bundle_file(&sibling(path, &manifest.bundle))?;
    let model = DualEncoderModel::from_named(manifest.config.clone(), bundle_tensors(&entries)?)?;
    Ok((model, manifest))
}

pub fn load_model(path: &Path) -> Result<DualEncoderModel> {
    Ok(load_model_with_manifest(path)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// Name of the image entry inside the dataset bundle.
    pub image: String,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub bundle: String,
    pub samples: Vec<SampleRecord>,
}

/// Writes `dataset.nibt` and `dataset.json` into `dir`; returns the manifest
/// path. Images are stored as f32.
pub fn save_dataset(samples: &[Sample], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let name = format!("{}.image", s.id);
        entries.push(BundleEntry::from_tensor(name.clone(), &s.image));
        records.push(SampleRecord {
            id: s.id.clone(),
            image: name,
            tokens: s.tokens.clone(),
        });
    }
    write_bundle_file(&dir.join(DATASET_BUNDLE), &entries)?;
    let path = dir.join(DATASET_MANIFEST);
    write_json(
        &path,
        &DatasetManifest {
            bundle: DATASET_BUNDLE.into(),
            samples: records,
        },
    )?;
    Ok(path)
}

/// Loads every sample and validates it against `config`.
pub fn load_dataset(path: &Path, config: &ModelConfig) -> Result<Vec<Sample>> {
    let manifest: DatasetManifest = read_json(path)?;
    if manifest.samples.is_empty() {
        return Err(Error::Empty("dataset manifest"));
    }
    let entries = read_bundle_file(&sibling(path, &manifest.bundle))?;
    let mut images: BTreeMap<String, BundleEntry> =
        entries.into_iter().map(|e| (e.name.clone(), e)).collect();
    manifest
        .samples
        .into_iter()
        .map(|r| {
            let entry = images.remove(&r.image).ok_or_else(|| {
                Error::Manifest(format!("sample {:?}: no image entry {:?}", r.id, r.image))
            })?;
            let sample = Sample {
                id: r.id,
                image: entry.to_tensor()?,
                tokens: r.tokens,
            };
            sample.validate(config)?;
            Ok(sample)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_json_is_flat() {
        let m = ModelManifest::for_config(&ModelConfig::default(), "m.nibt");
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["family"], "dual-encoder-v1");
        assert_eq!(v["d_model"], 32);
        assert_eq!(v["bottleneck_layer"], 3);
        let back: ModelManifest = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn manifest_validation() {
        let mut m = ModelManifest::for_config(&ModelConfig::default(), "m.nibt");
        m.validate().unwrap();
        m.bottleneck_layer = 9;
        assert_eq!(m.validate().unwrap_err().code(), "layer_out_of_range");
        m.bottleneck_layer = 3;
        m.family = "other".into();
        assert_eq!(m.validate().unwrap_err().code(), "manifest_error");
    }
}
