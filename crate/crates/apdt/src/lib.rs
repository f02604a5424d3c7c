//! AoI-aware UAV data collection: a constrained-MDP simulator, scripted
//! experts, and a prompt decision transformer trained offline on expert
//! trajectories and deployed online with return/cost conditioning.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod deploy;
pub mod env;
pub mod mobility;
pub mod model;
pub mod plot;
pub mod rng;
pub mod trainer;
