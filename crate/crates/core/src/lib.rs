#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

//! Domain-adversarial soft actor-critic on a procedurally generated pixel
//! block MDP, with the diagnostics used to measure zero-shot generalization.

pub mod agent;
pub mod blockmdp;
pub mod diagnostics;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod replay;

pub use error::{DarlError, Result};
