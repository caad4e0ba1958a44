//! Test-only oracles. Nothing here is used by the shipped crates.

pub mod gradcheck;
pub mod reference;
