//! Universal neural propagator for the driven transverse-field Ising model.
//!
//! A Fourier neural operator turns a driving protocol `h_x(t), h_z(t)` into a
//! trajectory of context tokens; an autoregressive transformer reads those
//! tokens through cross-attention and assigns an amplitude to every doubled
//! configuration `(alpha, beta)`, i.e. to every entry of the normalized
//! propagator `U(t) / sqrt(D)`. Training is self-supervised on the
//! Schrödinger residual; [`oracle`] supplies exact dense evolution for
//! validation.

pub mod checkpoint;
pub mod config;
mod error;
pub mod evolve;
pub mod finetune;
pub mod fno;
pub mod gradcheck;
pub mod lattice;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod protocol;
pub mod tensor;
pub mod training;
pub mod verify;
pub mod transformer;


#[cfg(feature = "cli")]
pub mod cli;

pub use error::{Result, UnpError};
