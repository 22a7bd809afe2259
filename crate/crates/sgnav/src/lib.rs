//! Scene-graph learning and navigation in a procedural desk-scale 3D world.
//!
//! The crate covers the full loop: a synthetic indoor environment with an
//! embodied agent ([`world`]), geometry-derived scene-graph ground truth
//! ([`gtruth`]), a graph transformer network that predicts node classes and
//! typed edges from per-view observations ([`graphnet`]), a recurrent
//! PointGoal policy trained by imitation or PPO with a graph-coverage
//! reward ([`policy`]), and trajectory-level graph accumulation with room
//! separation and attention tracing ([`scenemap`]).
//!
//! All learning runs on a small explicit-gradient tensor core ([`tensor`],
//! [`optim`]) whose backward passes are verified against finite differences.

pub mod config;
pub mod dataset;
pub mod error;
pub mod gtruth;
pub mod graphnet;
pub mod optim;
pub mod plot;
pub mod policy;
pub mod scenemap;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
