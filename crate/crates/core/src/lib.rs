//! Budgeted fusion of a safe and a risky language model, with statistical
//! auditing of the cumulative divergence spend and an adversarial prompt
//! search that hunts for budget violations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocator;
pub mod auditstats;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod modelsim;
pub mod overlap;
pub mod probcore;
pub mod search;

pub use error::{Error, Result};
