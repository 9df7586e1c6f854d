//! Simulation library for a control loop defended by a digital twin: LQG
//! control, dual Kalman estimation over a physical and a secure channel, a
//! three-tier chi-square detector, an evidence-based signaling game between
//! the estimator and the twin, stealthy and naive estimation attacks, and
//! the closed-form loss bound - with a CLI reproducing the three case
//! studies at desk scale.

pub mod analysis;
pub mod attacks;
pub mod config;
pub mod detector;
pub mod error;
pub mod estimation;
pub mod lqg;
pub mod manipulator;
pub mod mathkit;
pub mod plant;
pub mod runner;
pub mod sge;

pub use error::{Error, Result};
