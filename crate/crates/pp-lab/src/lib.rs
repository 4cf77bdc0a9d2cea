//! A laboratory for non-generative prediction profile models of partially
//! observable discrete dynamical systems.
//!
//! The crate provides benchmark environments with exact prediction oracles,
//! count-based profile estimation and clustering, translation of raw
//! trajectories into prediction-profile trajectories, PP-POMDP and PP-LPST
//! model representations with a self-fed runtime protocol, a policy-gradient
//! controller consuming predictive features, and numeric linear-dimension
//! (system dynamics matrix rank) checks.

pub mod core;
pub mod envs;
pub mod parallel;
pub mod pipeline;
pub mod pomdp;
pub mod control;
pub mod ppmodel;
pub mod sdm;
pub mod profiles;
pub mod stats;
