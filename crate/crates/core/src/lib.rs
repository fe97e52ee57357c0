//! Joint estimation of motion state, environment, velocity and grid
//! location from GPS and sensor-board classifier outputs, using a dynamic
//! Bayesian network with beam-pruned inference.

pub mod error;
pub mod factors;
pub mod features;
pub mod harness;
pub mod inference;
pub mod learning;
pub mod map;
pub mod params;
pub mod simulator;
pub mod types;

pub use error::{Error, Result};
pub use factors::{FactorMask, Model};
pub use inference::{BeamConfig, FramePosterior};
pub use map::{BuildingBox, BuildingMap, MapClass};
pub use params::ModelParams;
pub use types::*;
