//! Compliance-aware simulation of robotic milling.
//!
//! The robot is modelled as a serial chain with one torsional virtual spring
//! per link. Its Cartesian stiffness and mass at the tool drive a planar
//! milling simulation on an occupancy grid, and the predicted deflection is
//! used to modify the commanded trajectory off-line.

pub mod analysis;
pub mod compensation;
pub mod config;
pub mod cutting_force;
pub mod dynamic_sim;
pub mod elastodynamics;
pub mod elastostatics;
pub mod error;
pub mod geometry;
pub mod robot_model;
pub mod workpiece_grid;

pub use error::{Error, Result};
