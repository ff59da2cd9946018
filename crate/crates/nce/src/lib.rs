//! Channel-search engine for ultra-low uniform-precision quantized CNNs.
//!
//! The crate is organized around a small deterministic reverse-mode tensor
//! engine ([`tape`]), fake quantizers with straight-through gradients
//! ([`quantize`]), a channel-candidate search space with expansion
//! ([`searchspace`], [`supernet`]), FLOPs/PARAMs cost accounting
//! ([`costmodel`]), the warm-up / search / derive / retrain state machine
//! ([`pipeline`]), and diagnostics ([`analysis`]).
//!
//! All heavy inner loops go through [`par`], which dispatches to rayon when
//! the `parallel` feature is enabled (the default) and to plain sequential
//! iteration otherwise. Results are bit-identical either way: every parallel
//! loop writes disjoint output elements and accumulates sequentially within
//! an element.

pub mod analysis;
pub mod arch;
pub mod config;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod quantize;
pub mod rundir;
pub mod searchspace;
pub mod supernet;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
