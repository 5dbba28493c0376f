//! Simulation and analysis of a cross-Kerr coupling between two trapped-ion
//! motional modes.
//!
//! The axial breathing mode `a` and radial zigzag mode `b` of a three-ion
//! crystal are coupled by `xi (a^dag b^2 + a b^dag^2)`. Far from the
//! resonance `omega_a = 2 omega_b` this appears as a shift of the axial
//! sideband proportional to the radial phonon number, which is resolved
//! spectroscopically to count radial phonons.
//!
//! Module map:
//! - [`quantum`]: truncated Fock spaces, operators, eigendecomposition, evolution
//! - [`trap`]: trap parameters to mode frequencies and coupling strength
//! - [`dynamics`]: coupled Hamiltonian, exchange, avoided crossings, shifts
//! - [`prep`]: Fock, coherent, thermal and squeezed radial states
//! - [`spectroscopy`]: sideband lineshapes, synthetic scans, shot noise
//! - [`reconstruction`]: peak and distribution fitting
//! - [`measurement`]: single-shot projective phonon measurement

pub mod dynamics;
pub mod error;
pub mod lm;
pub mod measurement;
pub mod prep;
pub mod quantum;
pub mod reconstruction;
pub mod rng;
pub mod spectroscopy;
pub mod trap;

pub use error::{Error, Result};
