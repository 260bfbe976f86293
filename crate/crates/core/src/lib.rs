//! Budget-aware early-exit inference for layered action policies.
//!
//! The crate is organised bottom-up:
//!
//! - [`numkernel`]: dense networks, backpropagation, AdamW and deterministic random streams.
//! - [`flowcore`]: flow-matching paths, losses, Euler sampling and analytic Gaussian-mixture fields.
//! - [`backbone`]: multi-exit layered policies (a trainable toy model and an analytic oracle).
//! - [`calibration`]: discrepancy metrics, exit distributions and filtered-quantile thresholds.
//! - [`runtime`]: early-exit engines, truncated warm-start flow matching and FLOPs accounting.
//! - [`synthbench`]: the synthetic reaching task, benchmark orchestration and report files.

pub mod backbone;
pub mod calibration;
pub mod error;
pub mod flowcore;
pub mod numkernel;
pub mod runtime;
pub mod synthbench;

pub use error::{Error, Result};
