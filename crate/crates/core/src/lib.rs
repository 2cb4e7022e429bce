//! Energy-based plug-and-play (EPnP) image recovery.
//!
//! The crate trains a shared-weight scalar energy network by denoising
//! score matching, certifies that its gradient network is a conservative
//! vector field with a measurable Lipschitz constant, and solves linear
//! inverse problems (denoising, inpainting, undersampled multicoil
//! Fourier imaging) by monotone gradient descent on the MAP objective.
//!
//! Module map:
//! - [`tensor`], [`rng`], [`fft`], [`io`] — numerics: dense tensors,
//!   deterministic randomness, unitary 2-D FFT, raw tensor/PGM files
//! - [`graph`] — minimal reverse-mode op set (conv, transpose conv,
//!   linear, pointwise gates) used to express Ψ and H
//! - [`energy`] — Ψ(x), its explicit gradient network H(x), and the
//!   conservativity verification suite
//! - [`dsm`] — denoising score matching training
//! - [`lipschitz`] — Lipschitz estimation and the guaranteed step size
//! - [`linop`] — forward operators A with exact adjoints (identity, mask,
//!   multicoil masked Fourier) and measurement simulation
//! - [`solver`] — the EPnP-GD MAP solver plus RED-SD and score-PnP
//!   baselines
//! - [`baseline`] — the plain spectral-normalized score network
//! - [`phantom`] — synthetic data, analytic oracles, PSNR
//! - [`bench`] — the benchmark harness and its report formats
//! - [`checkpoint`] — serialized model parameters with metadata
//! - [`verify`] — the machine-readable property-check suites

pub mod baseline;
pub mod bench;
pub mod checkpoint;
pub mod dsm;
pub mod energy;
pub mod error;
pub mod fft;
pub mod graph;
pub mod io;
pub mod linop;
pub mod lipschitz;
pub mod phantom;
pub mod rng;
pub mod solver;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
