//! Diffusion denoising for joint source-channel coding links.
//!
//! Power-normalized latent vectors are sent over simulated AWGN, slow Rayleigh
//! and block (fast) Rayleigh fading channels. The equalized channel output is
//! treated as an intermediate state of a variance-preserving diffusion process
//! and cleaned up by a deterministic reverse sampler driven by a continuous
//! sigmoid noise schedule. Every stage has a closed-form oracle so it can be
//! checked end to end.
//!
//! Module map:
//!
//! * [`signal`], [`source`]: latent vectors, real/complex mappings, synthetic
//!   sources with exact posterior means.
//! * [`channel`]: channel draws, transmission, equalization.
//! * [`schedule`]: sigmoid schedule, inverse, step matching.
//! * [`denoiser`], [`nn`]: analytic and trained denoisers.
//! * [`engine`]: forward noising, reverse steps, slow and fast fading loops.
//! * [`estimator`]: pilot-free signal level and phase estimation.
//! * [`latent_ops`]: token masking and metrics.
//! * [`harness`]: configuration, per-trial pipeline, sweeps, persistence.

// Negated comparisons such as `!(x > 0.0)` are used on purpose: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod denoiser;
pub mod engine;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod latent_ops;
pub mod nn;
pub mod par;
pub mod schedule;
pub mod signal;
pub mod source;

pub use error::{Error, Result};
pub use signal::{ComplexVector, LatentVector};
