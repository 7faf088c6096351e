//! Causal explanatory graphs for feed-forward vision networks.
//!
//! The pipeline intervenes on weight paths of a pre-trained network
//! ([`intervention`]), measures the effect on a class logit and tests it for
//! significance ([`causal`]), threads the significant nodes top-down into a
//! per-class graph ([`graph`]), and turns that graph into saliency maps
//! ([`explain`]) that are scored for stability, faithfulness and fidelity
//! ([`metrics`]).

pub mod causal;
pub mod error;
pub mod explain;
pub mod graph;
pub mod intervention;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use nn::{ActivationTrace, LayerKind, LayerSpec, Network, Preprocess};
pub use tensor::Tensor;
