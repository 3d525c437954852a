//! Simulation, viscous-damping identification and passivity-based controller
//! tuning for port-Hamiltonian mechanical systems.

pub mod cli;
pub mod ebdi;
pub mod error;
pub mod models;
pub mod pbc;
pub mod phsys;
pub mod sim;
pub mod tuning;

pub use error::{Error, Result};
pub use phsys::{MechModel, State};
