//! Actor-critic training lab with a reward-variance branch.

pub mod nn;
pub mod model;
pub mod losses;
pub mod optimizer;
pub mod envs;
pub mod trainer;
