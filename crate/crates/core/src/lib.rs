//! Split federated learning simulator with pluggable poisoning attacks and
//! Byzantine-robust aggregation.
//!
//! - [`tensor`] / [`nn`]: dense tensors and a small network stack with manual
//!   backpropagation and a cut point.
//! - [`data`]: synthetic blobs, the `SFLD` image-set format, Dirichlet
//!   partitioning.
//! - [`aggregation`]: FedAvg, Krum, trimmed mean, coordinate-wise median.
//! - [`sfl`]: the five-step training round.
//! - [`attacks`]: MISA and the LF / Gaussian / IPM baselines.
//! - [`harness`]: configured runs with per-round metrics files, plus sweeps.

pub mod aggregation;
pub mod attacks;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod selftest;
pub mod sfl;
pub mod tensor;

pub use error::{Result, SflError};
