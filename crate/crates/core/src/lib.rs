//! A desk-scale laboratory for mode connectivity between trained minima.
//!
//! Small feed-forward classifiers are trained in pairs that differ in one
//! controlled respect. The paths between their parameter vectors (straight
//! lines or trained quadratic Bezier curves) are then scanned for loss barriers,
//! used to trace which samples are forgotten or learned along the way, and
//! combined through trainable per-group sigmoid gates.

pub mod analysis;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod nn;
pub mod objective;
pub mod params;
pub mod paths;
pub mod runner;
pub mod table;

pub use error::{Error, Result};
pub use objective::{Objective, PointMetrics};
