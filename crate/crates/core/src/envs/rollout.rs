//! Episode rollouts producing offline trajectories.

use super::behavior::{make_grid_policy, make_point_policy};
use super::gridmaze::GridMaze;
use super::pointmaze::PointMazeEnv;
use super::{BehaviorPolicySpec, EnvError};
use crate::seeding;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Acting interface for discrete environments.
pub trait DiscretePolicy {
    fn begin_episode(&mut self, _maze: &GridMaze, _rng: &mut ChaCha8Rng) {}
    fn act(&mut self, state: usize, rng: &mut ChaCha8Rng) -> usize;
}

/// Acting interface for point environments. `begin_episode` returns the
/// initial position, by default the environment's jittered start.
pub trait PointPolicy {
    fn begin_episode(&mut self, env: &PointMazeEnv, rng: &mut ChaCha8Rng) -> [f64; 2] {
        env.reset(rng)
    }
    fn act(&mut self, pos: [f64; 2], rng: &mut ChaCha8Rng) -> [f64; 2];
}

/// One transition in a discrete environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TabularStep {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub done: bool,
}

/// One transition in a point environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointStep {
    pub state: [f64; 2],
    pub action: [f64; 2],
    pub reward: f64,
    pub next_state: [f64; 2],
    pub done: bool,
}

/// Episode from either environment family.
#[derive(Debug, Clone)]
pub enum Trajectory {
    Tabular(Vec<TabularStep>),
    Point(Vec<PointStep>),
}

/// Environment plus the episode settings rollouts need.
#[derive(Debug, Clone)]
pub enum EnvKind {
    Grid { maze: GridMaze, max_steps: usize, exploring_starts: bool },
    Point(PointMazeEnv),
}

impl EnvKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Grid { .. } => "grid",
            Self::Point(_) => "point",
        }
    }
}

fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    seeding::stream(&[seed, 0x726f_6c6c, episode])
}

/// Rolls out `episodes` episodes in a grid maze. Episodes end on entering
/// the goal (`done` true) or after `max_steps` transitions (`done` false).
/// Each episode draws from its own RNG stream keyed by `(seed, episode)`.
pub fn rollout_grid(
    maze: &GridMaze,
    policy: &mut dyn DiscretePolicy,
    episodes: usize,
    max_steps: usize,
    exploring_starts: bool,
    seed: u64,
) -> Vec<Vec<TabularStep>> {
    let goal = maze.goal_state();
    let starts = maze.nonterminal_states();
    let mut out = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let mut rng = episode_rng(seed, e as u64);
        let mut state = if exploring_starts {
            starts[rng.random_range(0..starts.len())]
        } else {
            maze.mdp.sample_initial(&mut rng)
        };
        policy.begin_episode(maze, &mut rng);
        let mut steps = Vec::new();
        for _ in 0..max_steps {
            let action = policy.act(state, &mut rng);
            let next_state = maze.mdp.sample_next(state, action, &mut rng);
            let done = next_state == goal && state != goal;
            let reward = if done { 1.0 } else { 0.0 };
            steps.push(TabularStep { state, action, reward, next_state, done });
            if done {
                break;
            }
            state = next_state;
        }
        out.push(steps);
    }
    out
}

/// Rolls out `episodes` episodes in a point maze; see [`rollout_grid`] for
/// the termination and seeding conventions.
pub fn rollout_point(
    env: &PointMazeEnv,
    policy: &mut dyn PointPolicy,
    episodes: usize,
    seed: u64,
) -> Vec<Vec<PointStep>> {
    let mut out = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let mut rng = episode_rng(seed, e as u64);
        let mut pos = policy.begin_episode(env, &mut rng);
        let mut steps = Vec::new();
        if env.at_goal(pos) {
            out.push(steps);
            continue;
        }
        for _ in 0..env.max_steps() {
            let action = policy.act(pos, &mut rng);
            let (next, reward, done) = env.step(pos, action);
            steps.push(PointStep { state: pos, action, reward, next_state: next, done });
            if done {
                break;
            }
            pos = next;
        }
        out.push(steps);
    }
    out
}

/// Rolls out a behavior spec in either environment family, failing when the
/// spec cannot act there.
pub fn rollout(
    env: &EnvKind,
    spec: &BehaviorPolicySpec,
    episodes: usize,
    seed: u64,
) -> Result<Vec<Trajectory>, EnvError> {
    match env {
        EnvKind::Grid { maze, max_steps, exploring_starts } => {
            let mut policy = make_grid_policy(spec, maze)?;
            let runs =
                rollout_grid(maze, policy.as_mut(), episodes, *max_steps, *exploring_starts, seed);
            Ok(runs.into_iter().map(Trajectory::Tabular).collect())
        }
        EnvKind::Point(point) => {
            let mut policy = make_point_policy(spec, point)?;
            let runs = rollout_point(point, policy.as_mut(), episodes, seed);
            Ok(runs.into_iter().map(Trajectory::Point).collect())
        }
    }
}
