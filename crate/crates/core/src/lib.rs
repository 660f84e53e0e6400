//! Desk-scale construction of the multiscale spectral objects of a 2D
//! quasi-periodic polyharmonic operator (−Δ)^l + V.

pub mod lattice;
pub mod operator;
pub mod spectra;
pub mod resonance;
pub mod isocurve;
pub mod multiscale;
