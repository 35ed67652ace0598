//! Region-confidence proxies for online test-time adaptation.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every piece of the
//! pipeline that is pure computation:
//!
//! * [`numerics`]: stable log-sum-exp/softmax, seeded Gaussian sampling,
//!   central differences.
//! * [`region`]: Gaussian feature regions, the closed-form Regional Entropy
//!   and Regional Instability proxies, the selected/weighted objective and its
//!   gradient with respect to the feature.
//! * [`oracle`]: naive Monte-Carlo and brute-force estimators the closed forms
//!   are checked against.
//! * [`model`]: a tiny dense backbone whose normalization affine parameters
//!   are the only thing adapted at test time.
//! * [`stream`]: synthetic source tasks, corruptions and wild test streams.
//! * [`adapt`]: the predict-then-adapt loop, methods, metrics and probes.
//! * [`suites`]: reusable verification suites shared by the CLI and tests.
//!
//! IO, timing, file formats and the command line live in the `recap` crate.

#![no_std]
// NaN must fail these checks, which `!(x >= 0.0)` does and `x < 0.0` does not.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

mod error;
mod math;

pub mod adapt;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod region;
pub mod stream;
pub mod suites;

pub use error::{Error, Result};
pub use numerics::{Matrix, ProbVector, Seed};
pub use region::{AffineHead, RecapHyper, RegionSpec};
