//! Waveguide emitters in front of a mirror: spectra, two-photon scattering,
//! and a time-domain cross-check.
//!
//! A chain of two-level emitters couples to a semi-infinite waveguide; the
//! mirror returns every emission after a round-trip delay, so the effective
//! coupling of emitter `n` is `V_n(omega) = 2i sqrt(gamma_n) sin(omega t_n)`.
//! When all emitter frequencies sit at a common `omega_0` with
//! `omega_0 t_n = k_n pi`, the system hosts `N` degenerate single-excitation
//! bound states at `omega_0`. This crate computes those states, the scattering
//! continuum, the two-photon transition amplitudes that feed a bound state,
//! the optimal incident two-photon wavepackets, and runs an independent
//! lattice simulation of the full two-excitation dynamics to verify the
//! predicted trapping probabilities.
//!
//! Everything is expressed in units with the waveguide group velocity set to
//! one, and frequencies/rates are quoted in units of a reference decay rate
//! (`gamma = 1` in all defaults).
//!
//! Module map:
//!
//! * [`model`] — system description (emitter parameters, coupling family,
//!   frequency window) and its validation rules.
//! * [`numerics`] — small dense complex linear algebra, adaptive quadrature,
//!   bracketed root finding, 1-D maximization, interpolation, FFT helpers.
//! * [`spectral`] — single-excitation scattering states, bound states,
//!   overlap tables (`eps`, `xi`) and the identities they satisfy.
//! * [`scatter`] — emitter Green function, two-photon T matrix, trapping
//!   amplitudes, probability bounds, optimal and designed wavepackets.
//! * [`fdtd`] — two-excitation lattice simulation with moving coupling
//!   points, lazy field reconstruction, and trapping extraction.
//! * [`cli`] — config-driven commands used by the `delayqed` binary.
//!
//! The `examples/` directory is the front door: each example exercises one
//! capability end to end and is kept small enough to read in one sitting.

pub mod cli;
pub mod fdtd;
pub mod model;
pub mod numerics;
pub mod scatter;
pub mod spectral;

pub use model::{CouplingKind, EmitterSpec, SystemSpec};

use thiserror::Error;

/// Crate-wide error taxonomy.
///
/// The CLI maps these onto process exit codes: configuration problems exit
/// with 2, numerical failures (non-convergence, singular systems, pole
/// proximity) with 3, and internal invariant breaches with 4.
#[derive(Debug, Error)]
pub enum Error {
    /// The input configuration is malformed or violates a documented
    /// precondition (bad ordering, negative rates, misaligned lattice, ...).
    #[error("config: {0}")]
    Config(String),
    /// A numerical routine could not deliver the requested accuracy or hit a
    /// singular/near-singular system.
    #[error("numerical: {0}")]
    Numerical(String),
    /// An internal consistency check failed; this indicates a bug or a
    /// physically inconsistent intermediate state, not user error.
    #[error("invariant: {0}")]
    Invariant(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
