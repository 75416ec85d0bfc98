//! Text-graph prompted category-agnostic 2D pose estimation.
//!
//! A category is described to the model as a text-graph: one short text
//! phrase per keypoint plus skeleton edges. Localization works on categories
//! never seen in training because the prompt, not the training set, carries
//! the category definition.

pub mod data;
pub mod decoder;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod featfile;
pub mod harness;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod posegraph;
pub mod proposer;
pub mod scalar;
pub mod tape;
