mod support {
    pub mod data;
}

use hybnn_core::mnist::{make_pair_task, partition_iid, task_first_digit, Mnist};

// Digit counts of the canonical MNIST splits.
const TRAIN_COUNTS: [usize; 10] = [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949];
const TEST_COUNTS: [usize; 10] = [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009];

#[test]
fn canonical_sizes_and_pair_tasks() {
    let dir = support::data::mnist_dir();
    let raw = Mnist::load_dir(&dir)
        .unwrap_or_else(|e| panic!("MNIST not found in {}: {e}; run scripts/fetch_mnist.sh", dir.display()));
    assert_eq!((raw.train.len(), raw.test.len()), (60_000, 10_000));
    assert_eq!(raw.train.images.shape(), &[60_000, 1, 28, 28]);
    assert!(raw.train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));

    for task in 1..=5 {
        let d = task_first_digit(task).unwrap() as usize;
        let t = make_pair_task(&raw, d as u8).unwrap();
        assert_eq!(t.train.len(), TRAIN_COUNTS[d] + TRAIN_COUNTS[d + 1], "task {task}");
        assert_eq!(t.test.len(), TEST_COUNTS[d] + TEST_COUNTS[d + 1], "task {task}");
        assert_eq!(t.test.labels.iter().filter(|&&l| l == 0).count(), TEST_COUNTS[d]);
    }
    let t1 = make_pair_task(&raw, 0).unwrap();
    assert_eq!((t1.train.len(), t1.test.len()), (12_665, 2_115));

    let p = partition_iid(&t1.train.labels, 3, 0).unwrap();
    assert_eq!(p.sizes().iter().sum::<usize>(), 12_665);
    let mut all: Vec<usize> = p.shards.concat();
    all.sort_unstable();
    assert!(all.iter().enumerate().all(|(i, &v)| i == v));
}
