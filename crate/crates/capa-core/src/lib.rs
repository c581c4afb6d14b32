//! Beamforming workbench for continuous-aperture-array (CAPA) downlink
//! systems.
//!
//! The crate models a planar transmit aperture serving point users over
//! near-field line-of-sight channels, represents beamformers as coefficient
//! matrices over the conjugate channel subspace, and provides:
//!
//! - quadrature rules and channel Gram matrices ([`quadrature`]),
//! - closed-form power/gain/SINR evaluation and power projection
//!   ([`beamfield`]),
//! - classical optimizers: match filtering, discretized-array WMMSE,
//!   Gram-space WMMSE, and a closed-form structure evaluator
//!   ([`baselines`]),
//! - a reverse-mode differentiation engine with dense layers and Adam
//!   ([`autodiff`]),
//! - permutation-equivariant graph networks plus FNN ablations ([`gnn`]),
//! - the three-network policy/projection/value training loop with phased,
//!   alternative, and combined schedules ([`training`]).

pub mod autodiff;
pub mod baselines;
pub mod beamfield;
pub mod error;
pub mod gnn;
pub mod linalg;
pub mod physics;
pub mod quadrature;
pub mod training;

pub use error::{CapaError, Result};

/// Stable 64-bit FNV-1a hash for config/scenario provenance records.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Provenance hash of a scenario's serialized form.
pub fn scenario_hash(scene: &physics::Scenario) -> u64 {
    let text = physics::schema::write_json(scene).unwrap_or_default();
    fnv1a64(text.as_bytes())
}
