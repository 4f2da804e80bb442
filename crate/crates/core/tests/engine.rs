mod support {
    pub mod properties;
}

use hybnn_core::xnor::{compile, fold_threshold, PackedBnnModel, ThresholdRule};
use support::properties::{engine_mismatches, fold_mismatches, random_codes, randomized_classifier};

#[test]
fn fold_agrees_with_real_batchnorm_over_all_scores() {
    let (tuples, bad) = fold_mismatches(1000, 200, 7);
    assert_eq!(tuples, 1000);
    assert_eq!(bad, 0);
}

#[test]
fn fold_small_cases() {
    assert_eq!(fold_threshold(1.0, 0.0, 0.0, 1.0, 10).unwrap(), ThresholdRule::AtLeast(0));
    assert_eq!(fold_threshold(-1.0, 0.0, 0.0, 1.0, 10).unwrap(), ThresholdRule::AtMost(0));
    assert_eq!(fold_threshold(0.0, -0.5, 0.0, 1.0, 10).unwrap(), ThresholdRule::Constant(false));
    assert!(fold_threshold(1.0, 0.0, 0.0, 0.0, 10).is_err());
}

#[test]
fn packed_engine_matches_dense_on_random_codes() {
    for seed in 0..3 {
        let model = randomized_classifier(seed);
        assert_eq!(engine_mismatches(&model, &random_codes(seed, 10_000, 200)), 0);
    }
}

#[test]
fn packed_model_file_roundtrip() {
    let packed = compile(&randomized_classifier(9)).unwrap();
    let bytes = packed.to_bytes();
    let back = PackedBnnModel::read_from(&mut bytes.as_slice()).unwrap();
    assert_eq!(back, packed);
    assert!(PackedBnnModel::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
}
