//! Comparison models fitted alongside the general mixture.

pub mod stationary;
pub mod tar;
