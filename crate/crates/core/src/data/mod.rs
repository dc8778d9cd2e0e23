//! Synthetic data generation, cropping, and benchmark-style dataset I/O.

pub mod crop;
pub mod generate;
pub mod io;
pub mod types;
