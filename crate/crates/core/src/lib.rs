//! Visible/infrared image fusion with a multi-scale autoencoder and a
//! CNN + axial-attention fusion block, trained in two stages.
//!
//! The crate is self-contained: a small reverse-mode tape ([`tensor`])
//! drives the network ([`model`]), the objectives ([`losses`]) and the
//! optimiser ([`train`]); [`metrics`] holds the evaluation measures.

pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod selftest;
pub mod tensor;
pub mod train;
