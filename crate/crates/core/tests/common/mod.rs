//! Oracles and fixtures shared by the integration tests and the acceptance gate.
#![allow(dead_code)]

pub mod checks;
pub mod metric_oracle;
