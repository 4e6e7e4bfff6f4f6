use nib_core::attribution::upsample_bilinear;
use nib_core::{AttributionMap, MethodId, Modality, PassCount};

fn grid(rows: usize, cols: usize, scores: Vec<f64>) -> AttributionMap {
    AttributionMap {
        method: MethodId::Random,
        modality: Modality::Image,
        scores,
        grid: (rows, cols),
        layer: None,
        token_scores: vec![],
        roles: vec![],
        path: None,
        seed: None,
        passes: PassCount::default(),
    }
}

#[test]
fn two_by_two_to_four_by_four_half_pixel() {
    let out = upsample_bilinear(&grid(2, 2, vec![0.0, 1.0, 2.0, 3.0]), 4, 4).unwrap();
    #[rustfmt::skip]
    let expected = [
        0.0, 0.25, 0.75, 1.0,
        0.5, 0.75, 1.25, 1.5,
        1.5, 1.75, 2.25, 2.5,
        2.0, 2.25, 2.75, 3.0,
    ];
    for (a, b) in out.raw.iter().zip(expected) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
}

#[test]
fn identity_size_is_a_copy() {
    let scores: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect();
    let out = upsample_bilinear(&grid(3, 4, scores.clone()), 3, 4).unwrap();
    assert_eq!(out.raw, scores);
}

#[test]
fn single_cell_broadcasts() {
    let out = upsample_bilinear(&grid(1, 1, vec![-0.7]), 5, 3).unwrap();
    assert!(out.raw.iter().all(|&v| v == -0.7));
    assert_eq!((out.height, out.width), (5, 3));
}

#[test]
fn text_maps_are_rejected() {
    let mut m = grid(1, 2, vec![0.0, 1.0]);
    m.modality = Modality::Text;
    assert_eq!(
        upsample_bilinear(&m, 2, 2).unwrap_err().code(),
        "wrong_modality"
    );
}
