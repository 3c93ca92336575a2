//! Parametric MIMO-OFDM channel prediction with multidimensional ESPRIT.

pub mod channel;
pub mod esprit;
pub mod linfix;
pub mod numkernel;
pub mod stacking;
pub mod subspace;
pub mod amplitude;
pub mod predictor;
pub mod crb;
pub mod harness;
