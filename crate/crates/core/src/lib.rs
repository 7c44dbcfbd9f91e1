//! Weakly-supervised lesion localization on chest radiographs with
//! cross-image relational reasoning.
//!
//! A grid-level detector (backbone + class-aware 1×1 head) is trained with a
//! box/MIL base loss plus three graph-weighted feature-contrast losses: a
//! learnable inter-image relation graph, a structural graph built from
//! superpixel hash codes, and a co-attention based knowledge-reasoning graph.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod reasoning;
pub mod relation;
pub mod structure;
pub mod train;

pub use error::{Error, Result};
