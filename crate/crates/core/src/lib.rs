//! Opportunistic rate splitting (ORS) for RIS-assisted two-user downlink.
//!
//! The crate is organised bottom-up:
//!
//! * [`channel_model`] - scenario geometry, correlated Rayleigh direct links and
//!   line-of-sight reflected links for each coherence block.
//! * [`estimation`] - pilot budgets and a DFT reflection-pattern least-squares
//!   estimator producing full or alternating partial CSI.
//! * [`rates`] - SINRs, achievable rates, net-rate accounting and the ORS ratio.
//! * [`conic`] - a small solver-agnostic conic program representation and its
//!   interior-point backend.
//! * [`sca`] - alternating successive convex approximation over beamformers and
//!   RIS phase shifts.
//! * [`baselines`] - NOMA baselines reusing the SCA machinery.
//! * [`config`] / [`harness`] - configuration parsing and the seeded Monte Carlo
//!   driver with CSV output.

pub mod baselines;
pub mod channel_model;
pub mod config;
pub mod conic;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod linalg;
pub mod rates;
pub mod sca;

pub use error::{Error, Result};
