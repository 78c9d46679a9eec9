//! Optimal decentralized policies for symmetric LQG team problems.

pub mod cli;
pub mod delayed_solver;
pub mod error;
pub mod info_graph;
pub mod linalg;
pub mod riccati;
pub mod simulator;
pub mod team_model;
pub mod tree_solver;

pub use error::{Error, Result};
