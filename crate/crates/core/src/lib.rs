//! Frame and event fusion single-object tracking.
//!
//! The crate covers the whole pipeline at desk scale: event loading and aggregation,
//! a small autodiff engine, the fusion network with its classification and IoU heads,
//! training, online tracking, a synthetic event simulator and benchmark metrics.

pub mod aggregation;
pub mod autodiff;
pub mod bbox;
pub mod cdfi;
pub mod checks;
pub mod cli;
pub mod error;
pub mod event_stream;
pub mod experiments;
pub mod heads;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod simulator;
pub mod tracker;
pub mod training;

pub use bbox::BBox;
pub use error::{Error, Result};
