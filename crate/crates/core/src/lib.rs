//! History-bridged end-to-end driving at desk scale.
//!
//! The stack couples a FIFO memory bank of multi-step motion/planning
//! queries with attention modules that fuse time-aligned history into
//! detection, motion prediction, and planning, trained with a
//! winner-takes-all loss and evaluated open- and closed-loop on synthetic
//! scenes.

pub mod autodiff;
pub mod config;
pub mod container;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod memory;
pub mod model;
pub mod nn;
pub mod par;
pub mod perception;
pub mod planner;
pub mod report;
pub mod scene;
pub mod training;

pub use error::{Error, Result};
