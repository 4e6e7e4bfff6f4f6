mod common;

use nib_core::dataset::{two_concept_fixture, TWO_CONCEPT_SEED};
use nib_core::nib::implementation_invariance_probe;
use nib_core::{nib_attribute, Modality, PathSpec};

#[test]
fn completeness_gap_shrinks_with_steps() {
    let m = common::model();
    let layer = m.config().default_bottleneck_layer();
    for s in common::samples(&m, 2) {
        for modality in [Modality::Image, Modality::Text] {
            let gaps: Vec<f64> = [10, 100, 1000]
                .iter()
                .map(|&steps| {
                    nib_attribute(&m, &s, &PathSpec::new(steps, layer, modality))
                        .unwrap()
                        .completeness_gap()
                        .unwrap()
                })
                .collect();
            assert!(
                gaps[0] > gaps[1] && gaps[1] > gaps[2],
                "{modality:?} {gaps:?}"
            );
            match modality {
                Modality::Image => assert!(gaps[2] <= 1e-3, "{gaps:?}"),
                // first-order rule: two decades of steps cut the gap well over 50x
                Modality::Text => assert!(gaps[2] * 50.0 < gaps[0], "{gaps:?}"),
            }
        }
    }
}

#[test]
fn pass_counts_at_default_steps() {
    let m = common::model();
    let s = &common::samples(&m, 1)[0];
    let layer = m.config().default_bottleneck_layer();
    for modality in [Modality::Image, Modality::Text] {
        let map = nib_attribute(&m, s, &PathSpec::new(10, layer, modality)).unwrap();
        assert_eq!((map.passes.forward, map.passes.backward), (12, 10));
        assert_eq!(map.passes.diagnostic_forward, 1);
    }
    let map = nib_attribute(&m, s, &PathSpec::new(3, layer, Modality::Image)).unwrap();
    assert_eq!((map.passes.forward, map.passes.backward), (5, 3));
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let m = common::model();
    let s = &common::samples(&m, 1)[0];
    let path = PathSpec::new(10, 3, Modality::Image);
    let first = nib_attribute(&m, s, &path).unwrap();
    for _ in 0..4 {
        assert!(first.bitwise_eq(&nib_attribute(&m, s, &path).unwrap()));
    }
}

#[test]
fn invariant_under_identity_block_and_rescaling() {
    let m = common::model();
    let s = &common::samples(&m, 1)[0];
    for layer in 1..=m.config().layers {
        for modality in [Modality::Image, Modality::Text] {
            assert!(
                implementation_invariance_probe(&m, s, &PathSpec::new(10, layer, modality))
                    .unwrap()
            );
        }
    }
}

#[test]
fn shipped_two_concept_fixture_has_a_negative_patch() {
    let m = common::model();
    let s = two_concept_fixture(&m, TWO_CONCEPT_SEED).unwrap();
    let map = nib_attribute(&m, &s, &PathSpec::new(10, 3, Modality::Image)).unwrap();
    assert_eq!(map.scores.len(), m.config().num_patches());
    assert!(map.scores.iter().any(|&v| v < 0.0), "{:?}", map.scores);
}

#[test]
fn reported_scores_cover_content_tokens_only() {
    let m = common::model();
    let s = &common::samples(&m, 1)[0];
    let map = nib_attribute(&m, s, &PathSpec::new(10, 3, Modality::Text)).unwrap();
    assert_eq!(map.scores.len(), s.tokens.len() - 2);
    assert_eq!(map.grid, (1, s.tokens.len() - 2));
}

#[test]
fn invalid_paths_are_rejected() {
    let m = common::model();
    let s = &common::samples(&m, 1)[0];
    let err = nib_attribute(&m, s, &PathSpec::new(0, 3, Modality::Image)).unwrap_err();
    assert_eq!(err.code(), "invalid_parameter");
    let err = nib_attribute(&m, s, &PathSpec::new(10, 0, Modality::Image)).unwrap_err();
    assert_eq!(err.code(), "layer_out_of_range");
    let err = nib_attribute(&m, s, &PathSpec::new(10, 5, Modality::Text)).unwrap_err();
    assert_eq!(err.code(), "layer_out_of_range");
}

#[test]
fn right_endpoint_grid() {
    let l: Vec<f64> = PathSpec::new(4, 1, Modality::Image).lambdas().collect();
    assert_eq!(l, vec![0.25, 0.5, 0.75, 1.0]);
}
