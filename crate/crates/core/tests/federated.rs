mod support {
    pub mod properties;
}

use hybnn_core::bnn::BnnConfig;
use hybnn_core::features::FeatureSet;
use hybnn_core::binary_dot;
use hybnn_core::fed::{run_simulation, FedConfig};
use support::properties::{fedavg_case_error, random_codes};

#[test]
fn fedavg_unit_cases_are_exact() {
    assert!(fedavg_case_error() <= 1e-7);
}

fn separable(seed: u64, n: usize) -> FeatureSet {
    let codes = random_codes(seed, n, 32);
    // a ±1 teacher over all bits, so the rule is representable with binary weights
    let teacher = random_codes(99, 1, 32).remove(0);
    let labels = codes.iter().map(|c| u8::from(binary_dot(c, &teacher).unwrap() >= 0)).collect();
    FeatureSet::new(32, codes, labels).unwrap()
}

#[test]
fn three_clients_learn_and_account_bytes() {
    let bnn = BnnConfig {
        input_bits: 32,
        hidden: 16,
        batch_size: 16,
        lr: 1e-2,
        seed: 4,
        ..BnnConfig::default()
    };
    let cfg = FedConfig {
        n_clients: 3,
        rounds: 20,
        local_epochs: 2,
        seed: 4,
        bnn,
    };
    let (train, test) = (separable(1, 600), separable(2, 200));
    let (_, reports) = run_simulation(&cfg, &train, &test, |_| {}).unwrap();
    assert_eq!(reports.len(), 20);
    for r in &reports {
        assert_eq!(r.clients.len(), 3);
        assert!(r.bytes_uploaded > 0 && r.bytes_downloaded > 0);
        assert_eq!(r.clients.iter().map(|c| c.samples).sum::<usize>(), 600);
    }
    let last = reports.last().unwrap().global_test.accuracy;
    assert!(last > 0.8, "a binary linear teacher should be learnable, got {last}");
}
