//! Latent-action learning with a variational information bottleneck.
//!
//! The crate trains small stochastic encoder/decoder models on pairs of
//! observations `(O_t, O_{t+k})` drawn from synthetic dynamical systems,
//! extracts per-transition latent codes, and measures how much of the hidden
//! ground-truth action each latent dimension captures (histogram entropy,
//! mutual information, Pearson correlation). Two model wirings are provided:
//! the bottleneck model (encode `O_t` alone, reconstruct `O_{t+k}` from the
//! latent alone) and the inverse-dynamics baseline (encode the pair,
//! reconstruct conditioned on `O_t`). Latent-to-action heads close the loop
//! from codes back to actions on a small labelled subset.
//!
//! Everything is deterministic given a seed: the numeric kernel is a plain
//! f64 MLP stack with hand-written backprop, the RNG is SplitMix64, and all
//! file formats are byte-reproducible.

pub mod checkpoint;
pub mod env;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod mlp;
pub mod models;
pub mod optim;
pub mod rng;
pub mod tensor;

pub(crate) mod container;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::DenseMatrix;
