//! Stuck-at fault injection for DNN hardening studies.
//!
//! The crate evaluates software hardening of small CNNs at two abstraction
//! levels: application-level corruption of weights and feature maps
//! ([`appfi`]) and instruction-level stuck-at faults in a register machine
//! the network is lowered onto ([`isa`]). Both share the golden evaluator in
//! [`nn`], the outcome classifier in [`evaluate`], and the orchestration in
//! [`campaign`].

pub mod appfi;
pub mod campaign;
pub mod evaluate;
pub mod hardening;
pub mod isa;
pub mod nn;
pub mod numeric;
pub mod par;

pub use nn::{Dataset, Layer, LayerKind, Model, Tensor};
