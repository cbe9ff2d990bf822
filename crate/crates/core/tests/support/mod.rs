//! Checks shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

pub mod grad;
pub mod losses;
pub mod metrics;
