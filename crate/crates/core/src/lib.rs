//! Posture-indexed inverse kinematics for serial manipulators.
//!
//! Offline: sample the joint space on a grid, train an encoder/decoder pair
//! that maps (goal, joint angles) to a low-dimensional posture index and
//! back, and store the λ-distinct indices of every quantized position in a
//! dictionary searched by a k-d tree. Online: find the nearest dictionary
//! entry, decode each of its indices with the goal, and verify the results
//! by forward kinematics.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod kinematics;
pub mod model;
pub mod neuralnet;
pub mod solver;
pub mod spatial;

pub use error::{Error, Result};
