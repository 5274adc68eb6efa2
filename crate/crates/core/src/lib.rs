//! Desk-scale offline reinforcement learning laboratory.
//!
//! The crate implements projection-adaptive implicit Q-learning (Proj-IQL)
//! together with IQL and weighted-behavior-cloning baselines, small exact
//! tabular environments, and a verification suite that checks the
//! algorithm's supporting lemmas and theorems with exact arithmetic.
//!
//! Everything runs in `f64` on the CPU with deterministic accumulation
//! order: the same seed and configuration reproduce results bit for bit.

pub mod datasets;
pub mod envs;
pub mod expectile;
pub mod learner;
pub mod numerics;
pub mod policies;
pub mod seeding;
pub mod theory;
