#![allow(dead_code)]

use nib_core::dataset::toy_dataset;
use nib_core::{DualEncoderModel, ModelConfig, Sample};

pub fn model() -> DualEncoderModel {
    DualEncoderModel::init_toy(0, ModelConfig::default()).unwrap()
}

pub fn samples(model: &DualEncoderModel, n: usize) -> Vec<Sample> {
    toy_dataset(model, 0, n).unwrap()
}
