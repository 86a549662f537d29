//! Deep multinomial loan-state transition models.
//!
//! A monthly panel of loans moves through seven states (current, three
//! delinquency buckets, foreclosure, REO, paid off). This crate fits
//! feedforward softmax networks to such panels, explains them with
//! finite-difference sensitivities, and projects them to pool-level risk.

pub mod analysis;
pub mod error;
pub mod evalmetrics;
pub mod network;
pub mod pipeline;
pub mod risk;
pub mod state;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use state::{is_absorbing, is_legal_transition, LoanMonthSample, StateIndex, TransitionMatrix, K};
