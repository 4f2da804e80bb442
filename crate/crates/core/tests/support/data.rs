use std::path::PathBuf;

/// `HYBNN_MNIST_DIR`, else `<workspace>/data/mnist`.
pub fn mnist_dir() -> PathBuf {
    if let Some(d) = std::env::var_os("HYBNN_MNIST_DIR") {
        return PathBuf::from(d);
    }
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}
