//! Least-action training of residual networks.
//!
//! A ResNet's blocks `x_{k+1} = x_k + v_k(x_k)` displace their input like a
//! discretized flow; the kinetic energy of the displacements,
//! `Σ_k ‖v_k(x_k)‖²`, measures how much the network moves the data. This
//! crate trains networks that solve the classification task while keeping
//! that transport cost minimal (an adaptive Uzawa-style multiplier scheme,
//! plus a fixed-weight variant), and verifies the resulting cost relations
//! against exact discrete optimal-transport oracles.
//!
//! Modules:
//! - [`tensor`]: f64 tensors, recorded-operation tape, reverse-mode gradients
//! - [`network`]: the encoder/transport/classifier models and trajectories
//! - [`trainer`]: SGD training regimes (vanilla, fixed-λ, adaptive LAP)
//! - [`data`]: the 2-D circles generator and the MNIST IDX loader
//! - [`ot`]: exact assignment-problem and Gaussian transport oracles
//! - [`exp`]: seeded experiment suites emitting plot-ready CSV/JSON

pub mod network;
pub mod tensor;
