//! Hybrid binary neural network.
//!
//! A full-precision convolutional autoencoder with a 200-bit sign-binarized
//! bottleneck is trained once on unlabeled digits and frozen; its codes feed
//! small task-specific binary classifiers. Classifiers can be trained
//! centrally or with federated averaging, and compiled to an XOR/popcount
//! inference engine.

pub mod autodiff;
pub mod baseline;
pub mod binarize;
pub mod bnn;
pub mod error;
pub mod features;
pub mod fed;
pub mod mnist;
pub mod rng;
pub mod tensor;
pub mod vae;
pub mod xnor;

pub use binarize::{binary_dot, pack, sign_binarize, unpack, BitVector, PackedMatrix};
pub use error::{Error, Result};
pub use tensor::Tensor;
