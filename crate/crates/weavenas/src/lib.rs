//! Differentiable architecture search over a weaved encoder-decoder grid,
//! driven by cross-domain dataset mixing, on synthetic segmentation tasks.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: rank-4 `f64` tensors with tape-based reverse-mode autodiff
//!   and a finite-difference gradient checker.
//! - [`ops`]: the candidate operation catalog (pooling, plain/atrous/
//!   separable/shuffle convolutions, transposed variants, attention gates)
//!   and the per-cell-type candidate sets.
//! - [`mix`]: union datasets and k-way Beta-weighted virtual samples.
//! - [`weave`]: the weaved super-network — a grid of relaxed Normal /
//!   Downsample / Upsample cells — plus genotype discretization,
//!   realization and exact search-space counting.
//! - [`search`]: the two-stage, warm-started, first-order bilevel search
//!   with candidate-set halving between stages.
//! - [`tasks`]: synthetic multi-domain segmentation tasks, losses, metrics,
//!   retraining and evaluation, including a fixed micro U-Net reference.
//! - [`persist`]: on-disk formats (PGM rasters, float rasters, JSON
//!   manifests, genotype documents, reports, line-delimited search logs).
//! - [`cli`]: the command implementations behind the `weavenas` binary.
//!
//! The `examples/` directory of this crate demonstrates each capability as
//! a small runnable program; `tests/acceptance.rs` runs the full acceptance
//! battery.

pub mod cli;
pub mod mix;
pub mod ops;
pub mod persist;
pub mod rng;
pub mod search;
pub mod tasks;
pub mod tensor;
pub mod weave;
