//! Environments: exact tabular MDPs, grid mazes built from ASCII layouts, a
//! continuous point maze, behavior policies, and trajectory rollouts.

mod behavior;
mod gridmaze;
mod layout;
mod pointmaze;
mod rollout;
mod tabular;

pub use behavior::{stitch_waypoints, BehaviorPolicySpec, SpawnMode, WaypointNoisySpec};
pub use gridmaze::{build_gridmaze, GridMaze};
pub use layout::{MazeLayout, CORRIDOR_1X6, FOUR_ROOMS_5X5, STITCH_MAZE};
pub use pointmaze::PointMazeEnv;
pub use rollout::{
    rollout, rollout_grid, rollout_point, DiscretePolicy, EnvKind, PointPolicy, PointStep,
    TabularStep, Trajectory,
};
pub use tabular::{optimal_q_values, PolicyTable, TabularMDP};

use thiserror::Error;

/// Errors from layout parsing, MDP validation, and rollout wiring.
#[derive(Debug, Error)]
pub enum EnvError {
    #[error("layout line {line}, column {col}: unexpected character {found:?}")]
    LayoutBadChar { line: usize, col: usize, found: char },
    #[error("layout line {line} has {got} columns, expected {expected}")]
    LayoutRagged { line: usize, got: usize, expected: usize },
    #[error("layout has no non-empty lines")]
    LayoutEmpty,
    #[error("layout line {line}, column {col}: second {which:?} marker")]
    LayoutDuplicateMarker { line: usize, col: usize, which: char },
    #[error("layout has no {which:?} marker")]
    LayoutMissingMarker { which: char },
    #[error("invalid MDP: {context}")]
    BadMdp { context: String },
    #[error("invalid policy table: {context}")]
    BadPolicy { context: String },
    #[error("invalid behavior spec: {context}")]
    BadSpec { context: String },
    #[error("behavior policy {spec} cannot act in {env} environments")]
    IncompatiblePolicy { spec: &'static str, env: &'static str },
}
