//! Real-time decoding of multi-channel ultrasonic rail defectograms.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`simulator`] renders synthetic defectogram runs with ground truth.
//! - [`ingest`] reads firing records, corrects probe positions and cuts
//!   fixed-size per-channel frames from a bounded measurement stack.
//! - [`preprocess`] normalizes, resamples and routes channels into the five
//!   fusion groups.
//! - [`classifier`] is the convolutional network bank (inference, training,
//!   model files).
//! - [`decision`] gates verdicts by confidence, composes track decisions and
//!   runs the expert review loop.
//! - [`format`] holds the `.udfg` and JSONL file formats, and [`pipeline`]
//!   wires the stages together with bounded queues.

pub mod classifier;
pub mod decision;
pub mod error;
pub mod evaluate;
pub mod format;
pub mod ingest;
pub mod pipeline;
pub mod preprocess;
pub mod simulator;

pub use decision::DefectClass;
pub use error::{Error, Result};
pub use ingest::ProbeAngle;
