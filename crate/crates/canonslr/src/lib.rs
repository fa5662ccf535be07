//! Canonical-view guided multi-view continuous sign language recognition
//! on a synthetic desk-scale benchmark.
//!
//! The crate generates multi-view gloss sequences by rigidly rotating a
//! skeletal signer and rendering it to low-resolution frames, trains a
//! frontal-view teacher recognizer with CTC, distills it into a multi-view
//! student through sequence-level soft targets and temporal motion
//! relational enhancement, and reports word error rates per camera view.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod ctc;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod numutil;
pub mod ssd;
pub mod synthviews;
pub mod report;
pub mod tme;
pub mod trainer;

pub use error::{Error, Result};
