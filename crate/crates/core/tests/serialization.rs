mod common;

use nib_core::bundle::{read_bundle, write_bundle, BundleEntry};
use nib_core::manifest::{
    load_dataset, load_model, read_model_manifest, save_dataset, save_model, ModelManifest,
    MODEL_BUNDLE,
};
use proptest::prelude::*;

fn entry_strategy() -> impl Strategy<Value = (Vec<usize>, u64)> {
    (prop::collection::vec(0usize..5, 0..4), any::<u64>())
}

fn entries_from(specs: Vec<(Vec<usize>, u64)>) -> Vec<BundleEntry> {
    specs
        .into_iter()
        .enumerate()
        .map(|(i, (shape, bits))| {
            let n: usize = shape.iter().product();
            // arbitrary bit patterns, NaN and infinities included
            let data = (0..n as u64)
                .map(|k| f32::from_bits((bits.rotate_left(k as u32 % 64) ^ k) as u32))
                .collect();
            BundleEntry::new(format!("t{i}.é"), shape, data).unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn bundle_roundtrip_is_identity(specs in prop::collection::vec(entry_strategy(), 0..6)) {
        let entries = entries_from(specs);
        let back = read_bundle(&write_bundle(&entries).unwrap()).unwrap();
        prop_assert_eq!(back.len(), entries.len());
        for (a, b) in entries.iter().zip(&back) {
            prop_assert!(a.bitwise_eq(b));
        }
    }

    #[test]
    fn truncation_never_panics(specs in prop::collection::vec(entry_strategy(), 1..4), cut in any::<prop::sample::Index>()) {
        let bytes = write_bundle(&entries_from(specs)).unwrap();
        let cut = cut.index(bytes.len());
        prop_assert!(read_bundle(&bytes[..cut]).is_err());
    }
}

#[test]
fn model_roundtrip_through_files() {
    let m = common::model();
    let dir = tempfile::tempdir().unwrap();
    let path = save_model(&m, dir.path()).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.config(), m.config());
    for ((na, a), (nb, b)) in m.named_weights().into_iter().zip(back.named_weights()) {
        assert_eq!(na, nb);
        let narrowed: Vec<f64> = a.data().iter().map(|&v| f64::from(v as f32)).collect();
        assert_eq!(b.data(), &narrowed[..], "{na}");
    }
    // a second save of the loaded model is byte-identical
    let again = tempfile::tempdir().unwrap();
    save_model(&back, again.path()).unwrap();
    for f in ["model.json", "model.nibt"] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(again.path().join(f)).unwrap()
        );
    }
}

#[test]
fn wrong_d_model_is_a_shape_error() {
    let m = common::model();
    let dir = tempfile::tempdir().unwrap();
    let path = save_model(&m, dir.path()).unwrap();
    let mut manifest: ModelManifest = read_model_manifest(&path).unwrap();
    manifest.config.d_model = 16;
    manifest.config.heads = 2;
    std::fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
    assert_eq!(
        load_model(&path).unwrap_err().code(),
        "weight_shape_mismatch"
    );
}

#[test]
fn missing_weight_is_named() {
    let m = common::model();
    let dir = tempfile::tempdir().unwrap();
    let path = save_model(&m, dir.path()).unwrap();
    let bundle = dir.path().join(MODEL_BUNDLE);
    let mut entries = read_bundle(&std::fs::read(&bundle).unwrap()).unwrap();
    let removed = entries.remove(3).name;
    std::fs::write(&bundle, write_bundle(&entries).unwrap()).unwrap();
    let err = load_model(&path).unwrap_err();
    assert_eq!(err.code(), "missing_weight");
    assert!(err.to_string().contains(&removed));
}

#[test]
fn dataset_roundtrip() {
    let m = common::model();
    let samples = common::samples(&m, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = save_dataset(&samples, dir.path()).unwrap();
    let back = load_dataset(&path, m.config()).unwrap();
    assert_eq!(back.len(), 4);
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.tokens, b.tokens);
        assert!(a.image.max_abs_diff(&b.image).unwrap() < 1e-6);
    }
}
