//! CNN introspection toolkit: feature and class-label inversion with a
//! data-driven patch prior, controlled ReLU-mask pathways through the
//! fully-connected layers, fc7 topic discovery and style-aware completion.

mod binio;
pub mod completion;
pub mod data;
pub mod error;
pub mod net;
pub mod inversion;
pub mod pathways;
pub mod patch;
pub mod tensor;
pub mod topics;

pub use error::{Error, Result};
pub use net::{ForwardTrace, Mask, MaskSet, MaskSlot, Network, NetworkSpec, NetworkWeights};
pub use tensor::Tensor;
