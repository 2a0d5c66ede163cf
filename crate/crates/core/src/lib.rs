//! Simulation of a scalar jump-diffusion and its second-order small-mass
//! counterpart on coupled noise, with Malliavin derivative propagation and
//! estimators for strong error, Kolmogorov distance and inverse-norm moments.

pub mod config;
pub mod experiment;
pub mod integrate;
pub mod model;
pub mod noise;
pub mod stats;
