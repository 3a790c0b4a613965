//! Teacher–student semi-supervised object detection.
//!
//! A teacher trained on labeled images produces scored pseudo-labels on
//! unlabeled images; a confidence-based [`weight_policy`] turns each score into
//! keep/ignore/drop decisions and loss weights; a student of the same
//! architecture is trained on the concatenation, fine-tuned on labeled data,
//! and promoted to teacher for the next round.
//!
//! The crate ships a framework-free [`detector`] and a [`synthetic`] scene
//! generator so the whole loop runs at desk scale, plus a [`backend`] bridge
//! for delegating training and inference to an external process.

pub mod annotations;
pub mod backend;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod pipeline;
pub mod synthetic;
pub mod weight_policy;

pub use error::{Error, Result};
