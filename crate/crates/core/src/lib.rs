//! Optical Bloch equation engine for Doppler cooling and fluorescence of
//! trapped ions with hyperfine structure.
//!
//! The crate builds the complete hyperfine-Zeeman basis of an ion in a
//! magnetic field, assembles the Lindblad master equation for a set of
//! laser beams, and solves it for steady states or time evolution. On top
//! of that sit Doppler-temperature estimates, spectrum fitting and
//! sideband thermometry.

pub mod angular;
pub mod config;
pub mod constants;
pub mod cooling;
pub mod lsq;
pub mod master;
pub mod scan;
pub mod scenario;
pub mod solve;
pub mod specfit;
pub mod structure;
pub mod thermometry;

pub use angular::HalfInt;
pub use master::{build_liouvillian, LaserBeam, Liouvillian, Polarization};
pub use solve::{evolve, steady_state, DensityMatrix};
pub use structure::{build_basis, IonModel, ZeemanBasis, ZeemanState};
