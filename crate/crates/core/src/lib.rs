//! Tracklet association for multi-object tracking posed as a binary CRF
//! labeling problem.
//!
//! Detections are linked into short tracklets, every linkable tracklet pair
//! becomes a CRF node, and difficult node pairs (shared tracklets or
//! spatio-temporally close endpoints) become edges. The labeling is relaxed
//! onto the unit simplex and solved by a fixed number of gradient steps,
//! each followed by a softmax renormalization. The same unrolled iterations
//! are differentiated end-to-end to fit the potential weights, the step size
//! and the logistic probability providers.
//!
//! The crate is data-parallel over windows, enumeration blocks and training
//! batches when the default `parallel` feature is enabled; every entry point
//! that fans out takes an [`Execution`] so the sequential path stays
//! available for comparison.

pub mod association;
pub mod config;
pub mod error;
pub mod evalsim;
pub mod graph;
pub mod inference;
pub mod learning;
pub mod par;
pub mod potentials;
pub mod synthetic;
pub mod tracklets;
pub mod types;

pub use error::{Error, Result};
pub use par::Execution;
pub use types::{
    CrfEdge, CrfGraph, CrfNode, CrfParams, Detection, EdgeKind, Projection, RelaxedLabeling, Tracklet, Vec2,
};
