//! Two-stream attribute-guided explainable person re-identification.
//!
//! Stream 1 is a plain CNN re-ID model producing feature maps `F`; Stream 2
//! shares its low and mid stages, adds its own upper stages and an attribute
//! decompose head that emits one positive attention map per binary attribute.
//! Attention-masked features are GeM-pooled into per-attribute distances that
//! are distilled to sum to the Stream-1 distance, with hinge priors steering
//! distance mass towards the attributes two people do not share.

pub mod adh;
pub mod attributes;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod distances;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod explain;
pub mod gradcheck;
pub mod losses;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use attributes::{pairwise_xor, AttributeSchema, AttributeTable, AttributeVector, PairwiseAttributeVector};
pub use error::{Error, Result};
pub use tensor::Tensor;
