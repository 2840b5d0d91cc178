//! Mixture Bootstrapped DQN: an ensemble Q-learner whose bootstrapped heads
//! each train against a different n-step return target, together with the
//! single-backup-length and single-λ-target baselines, desk-scale gridworld
//! environments, and a seeded experiment harness.

pub mod agent;
pub mod approximator;
pub mod envs;
pub mod harness;
pub mod replay;
pub mod returns;
