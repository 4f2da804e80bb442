#![allow(dead_code)]

//! Randomized checks of the bit-level engine against plain ±1 arithmetic.

use hybnn_core::bnn::{bnn_predict, BnnConfig, BnnModel};
use hybnn_core::rng::stream_rng;
use hybnn_core::xnor::{compile, fold_threshold, model_size_report};
use hybnn_core::{binary_dot, pack, BitVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_pm1(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect()
}

pub fn random_codes(seed: u64, count: usize, nbits: usize) -> Vec<BitVector> {
    let mut rng = stream_rng(seed, 91);
    (0..count).map(|_| pack(&random_pm1(&mut rng, nbits)).unwrap()).collect()
}

/// Number of random pairs whose packed dot differs from the ±1 sum of products.
/// Lengths vary so partial trailing words are covered.
pub fn binary_dot_mismatches(pairs: usize, seed: u64) -> usize {
    let mut rng = stream_rng(seed, 92);
    let mut bad = 0;
    for i in 0..pairs {
        let n = if i % 2 == 0 { 200 } else { rng.gen_range(1..=300) };
        let a = random_pm1(&mut rng, n);
        let b = random_pm1(&mut rng, n);
        let expect: i32 = a.iter().zip(&b).map(|(x, y)| (x * y) as i32).sum();
        let got = binary_dot(&pack(&a).unwrap(), &pack(&b).unwrap()).unwrap();
        bad += usize::from(got != expect);
    }
    bad
}

/// Evaluates the folded rule against the real-valued batchnorm + sign for every
/// integer score in [-nbits, nbits]. Returns (tuples, mismatching scores).
pub fn fold_mismatches(tuples: usize, nbits: u32, seed: u64) -> (usize, usize) {
    let mut rng = stream_rng(seed, 93);
    let n = nbits as i32;
    let mut bad = 0;
    for i in 0..tuples {
        let mut gamma: f64 = rng.gen_range(-3.0..3.0);
        // a few exact zeros and tiny slopes
        if i % 97 == 0 {
            gamma = 0.0;
        } else if i % 89 == 0 {
            gamma = gamma.signum() * 1e-9;
        }
        let beta: f64 = rng.gen_range(-3.0..3.0);
        let mean: f64 = rng.gen_range(-1.2 * n as f64..1.2 * n as f64);
        let sigma: f64 = rng.gen_range(0.05..40.0);
        // integer-aligned boundaries: beta = 0 and mean on an integer
        let (beta, mean) = if i % 7 == 0 { (0.0, mean.round()) } else { (beta, mean) };
        let rule = fold_threshold(gamma, beta, mean, sigma, nbits).expect("valid tuple");
        for s in -n..=n {
            let y = gamma * (s as f64 - mean) / sigma + beta;
            bad += usize::from(rule.fires(s) != (y >= 0.0));
        }
    }
    (tuples, bad)
}

/// Default-width classifier with randomized latent weights and batchnorm state,
/// so thresholds spread across the reachable score range.
pub fn randomized_classifier(seed: u64) -> BnnModel {
    let mut model = BnnModel::new(BnnConfig {
        seed,
        ..BnnConfig::default()
    })
    .unwrap();
    let mut rng = stream_rng(seed, 94);
    let h = model.config.hidden;
    for (name, lo, hi) in [
        ("bnn.bn1.gamma", -2.0f32, 2.0f32),
        ("bnn.bn1.beta", -1.0, 1.0),
        ("bnn.bn1.running_mean", -30.0, 30.0),
        ("bnn.bn1.running_var", 1.0, 400.0),
    ] {
        let id = model.store.find(name).unwrap_or_else(|| panic!("missing {name}"));
        let t = model.store.value_mut(id);
        assert_eq!(t.len(), h);
        for v in t.data_mut() {
            *v = rng.gen_range(lo..hi);
        }
    }
    model
}

/// Dense eval-mode predictions vs the packed engine. Returns mismatch count.
pub fn engine_mismatches(model: &BnnModel, codes: &[BitVector]) -> usize {
    let packed = compile(model).expect("compile");
    let dense = bnn_predict(model, codes).unwrap();
    let fast = packed.infer_batch(codes).unwrap();
    dense.iter().zip(&fast).filter(|(a, b)| a != b).count()
}

/// Per-layer dense/packed weight memory ratios.
pub fn weight_ratios(model: &BnnModel) -> Vec<(String, f64)> {
    let packed = compile(model).unwrap();
    model_size_report(&packed, model)
        .layers
        .iter()
        .map(|l| (l.name.clone(), l.ratio()))
        .collect()
}

fn store(values: &[f32]) -> hybnn_core::autodiff::ParamStore {
    use hybnn_core::autodiff::{ParamKind, ParamStore};
    let mut s = ParamStore::new();
    s.add("w", hybnn_core::Tensor::new(&[values.len()], values.to_vec()).unwrap(), ParamKind::Weight);
    s
}

/// Largest absolute error over the FedAvg unit cases: weighted means with
/// hand-computed answers and the identical-input fixed point.
pub fn fedavg_case_error() -> f64 {
    use hybnn_core::fed::fedavg;
    // (client values, sample counts, expected mean)
    type Case = (Vec<Vec<f32>>, Vec<usize>, Vec<f64>);
    let cases: Vec<Case> = vec![
        (vec![vec![1.0, 2.0], vec![3.0, 4.0]], vec![1, 1], vec![2.0, 3.0]),
        (vec![vec![1.0, 2.0], vec![3.0, 4.0]], vec![1, 3], vec![2.5, 3.5]),
        (vec![vec![0.0], vec![10.0], vec![-5.0]], vec![2, 1, 2], vec![0.0]),
        (vec![vec![0.3, -0.7]; 4], vec![5, 11, 2, 9], vec![0.3f32 as f64, -0.7f32 as f64]),
    ];
    let mut worst = 0.0f64;
    for (vals, counts, expect) in cases {
        let stores: Vec<_> = vals.iter().map(|v| store(v)).collect();
        let avg = fedavg(&stores, &counts).unwrap();
        let id = avg.find("w").unwrap();
        for (a, e) in avg.value(id).data().iter().zip(&expect) {
            worst = worst.max((*a as f64 - e).abs());
        }
    }
    worst
}
