//! Dyadic avoidance constructions for sets that miss configurations.

pub mod avoidance;
pub mod cli;
pub mod configs;
pub mod construct;
pub mod dimension;
pub mod dyadic;
pub mod fourier;
pub mod measure;
pub mod verify;
