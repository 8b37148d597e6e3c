//! Model-based exploration with novelty search in a learned abstract state
//! space.
//!
//! An encoder maps observations to a low-dimensional representation shaped
//! by transition, reward, discount and Q-learning losses plus a uniformity
//! term and a consecutive-distance hinge. Novelty is the mean distance to the
//! k nearest buffered encodings, and actions come from depth-limited
//! rollouts of the learned model.

pub mod agent;
pub mod autodiff;
pub mod envs;
pub mod export;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod novelty;
pub mod par;
pub mod planner;

pub use par::Execution;
