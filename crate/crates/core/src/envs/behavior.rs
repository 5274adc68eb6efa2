//! Behavior policies that generate offline datasets.

use super::gridmaze::GridMaze;
use super::pointmaze::PointMazeEnv;
use super::rollout::{DiscretePolicy, PointPolicy};
use super::tabular::optimal_q_values;
use super::EnvError;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Where waypoint-walk episodes begin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpawnMode {
    /// Every episode starts in the environment's start cell.
    FixedStart,
    /// Episodes start near a waypoint drawn uniformly from those outside the
    /// goal region.
    RandomWaypoint,
}

/// Noisy controller that walks random legs of a waypoint graph.
///
/// Each episode plans a random walk of at most `max_legs` edges from its
/// spawn waypoint, then steers full speed toward the current target with
/// Gaussian action noise of standard deviation `noise` per axis. Targets
/// switch once the agent comes within `switch_radius`.
#[derive(Debug, Clone)]
pub struct WaypointNoisySpec {
    pub noise: f64,
    pub waypoints: Vec<[f64; 2]>,
    pub edges: Vec<(usize, usize)>,
    pub spawn: SpawnMode,
    pub max_legs: usize,
    pub spawn_jitter: f64,
    pub switch_radius: f64,
}

/// Dataset-generating policy, validated before use.
#[derive(Debug, Clone)]
pub enum BehaviorPolicySpec {
    /// Uniform over discrete actions, or uniform in the action box.
    UniformRandom,
    /// Optimal action with probability `1 - epsilon`, else uniform random.
    /// Discrete environments only.
    EpsilonGreedyOracle { epsilon: f64 },
    /// Waypoint-graph random walker. Continuous environments only.
    WaypointNoisy(WaypointNoisySpec),
}

impl BehaviorPolicySpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::UniformRandom => "uniform-random",
            Self::EpsilonGreedyOracle { .. } => "epsilon-greedy-oracle",
            Self::WaypointNoisy(_) => "waypoint-noisy",
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        match self {
            Self::UniformRandom => Ok(()),
            Self::EpsilonGreedyOracle { epsilon } => {
                if !(0.0..=1.0).contains(epsilon) || !epsilon.is_finite() {
                    return Err(EnvError::BadSpec {
                        context: format!("exploration rate {epsilon} outside [0, 1]"),
                    });
                }
                Ok(())
            }
            Self::WaypointNoisy(spec) => spec.validate(),
        }
    }
}

impl WaypointNoisySpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(EnvError::BadSpec {
                context: format!("noise level {} must be finite and non-negative", self.noise),
            });
        }
        if self.waypoints.is_empty() {
            return Err(EnvError::BadSpec { context: "waypoint list is empty".into() });
        }
        for (i, (a, b)) in self.edges.iter().enumerate() {
            if *a >= self.waypoints.len() || *b >= self.waypoints.len() || a == b {
                return Err(EnvError::BadSpec {
                    context: format!("edge {i} = ({a}, {b}) does not join two distinct waypoints"),
                });
            }
        }
        if self.max_legs == 0 {
            return Err(EnvError::BadSpec { context: "max legs must be positive".into() });
        }
        if !(0.0..0.5).contains(&self.spawn_jitter) {
            return Err(EnvError::BadSpec {
                context: format!("spawn jitter {} outside [0, 0.5)", self.spawn_jitter),
            });
        }
        if !(self.switch_radius > 0.0 && self.switch_radius.is_finite()) {
            return Err(EnvError::BadSpec {
                context: format!("switch radius {} must be positive", self.switch_radius),
            });
        }
        Ok(())
    }
}

/// Uniform over the discrete action set.
struct UniformDiscrete {
    n_actions: usize,
}

impl DiscretePolicy for UniformDiscrete {
    fn act(&mut self, _state: usize, rng: &mut ChaCha8Rng) -> usize {
        rng.random_range(0..self.n_actions)
    }
}

/// Greedy on precomputed optimal action values, with epsilon exploration.
struct EpsilonGreedy {
    greedy: Vec<usize>,
    epsilon: f64,
    n_actions: usize,
}

impl EpsilonGreedy {
    fn new(maze: &GridMaze, epsilon: f64) -> Self {
        let (_, q) = optimal_q_values(&maze.mdp, 1e-12);
        let a_n = maze.mdp.n_actions();
        let greedy = (0..maze.mdp.n_states())
            .map(|s| {
                let row = &q[s * a_n..][..a_n];
                let mut best = 0;
                for a in 1..a_n {
                    if row[a] > row[best] {
                        best = a;
                    }
                }
                best
            })
            .collect();
        Self { greedy, epsilon, n_actions: a_n }
    }
}

impl DiscretePolicy for EpsilonGreedy {
    fn act(&mut self, state: usize, rng: &mut ChaCha8Rng) -> usize {
        if rng.random_range(0.0..1.0) < self.epsilon {
            rng.random_range(0..self.n_actions)
        } else {
            self.greedy[state]
        }
    }
}

/// Uniform in the action box of a point environment.
struct UniformPoint {
    bound: f64,
}

impl PointPolicy for UniformPoint {
    fn act(&mut self, _pos: [f64; 2], rng: &mut ChaCha8Rng) -> [f64; 2] {
        let b = self.bound;
        [rng.random_range(-b..b), rng.random_range(-b..b)]
    }
}

/// Waypoint-walk controller; see [`WaypointNoisySpec`].
struct WaypointController {
    spec: WaypointNoisySpec,
    adjacency: Vec<Vec<usize>>,
    spawn_candidates: Vec<usize>,
    bound: f64,
    /// Upcoming targets for the current episode, front first.
    plan: std::collections::VecDeque<usize>,
    /// Waypoint currently steered toward; the controller hovers here once
    /// the plan is exhausted, so walks never drift beyond their last leg.
    current_target: usize,
}

impl WaypointController {
    fn new(spec: WaypointNoisySpec, env: &PointMazeEnv) -> Result<Self, EnvError> {
        spec.validate()?;
        for (i, wp) in spec.waypoints.iter().enumerate() {
            if !env.is_free(*wp) {
                return Err(EnvError::BadSpec {
                    context: format!("waypoint {i} at ({}, {}) lies inside a wall", wp[0], wp[1]),
                });
            }
        }
        let mut adjacency = vec![Vec::new(); spec.waypoints.len()];
        for &(a, b) in &spec.edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        let spawn_candidates: Vec<usize> = (0..spec.waypoints.len())
            .filter(|&i| !env.at_goal(spec.waypoints[i]) && !adjacency[i].is_empty())
            .collect();
        if spawn_candidates.is_empty() {
            return Err(EnvError::BadSpec {
                context: "no connected waypoint outside the goal region to spawn at".into(),
            });
        }
        Ok(Self {
            spec,
            adjacency,
            spawn_candidates,
            bound: env.action_bound(),
            plan: std::collections::VecDeque::new(),
            current_target: 0,
        })
    }

    fn nearest_waypoint(&self, pos: [f64; 2]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, wp) in self.spec.waypoints.iter().enumerate() {
            let d = (wp[0] - pos[0]).powi(2) + (wp[1] - pos[1]).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Random walk along edges, avoiding immediate backtracking when the
    /// current waypoint has another neighbor.
    fn plan_from(&mut self, start: usize, rng: &mut ChaCha8Rng) {
        self.plan.clear();
        let mut prev = None;
        let mut cur = start;
        for _ in 0..self.spec.max_legs {
            let options: Vec<usize> = self.adjacency[cur]
                .iter()
                .copied()
                .filter(|&n| Some(n) != prev || self.adjacency[cur].len() == 1)
                .collect();
            if options.is_empty() {
                break;
            }
            let next = options[rng.random_range(0..options.len())];
            self.plan.push_back(next);
            prev = Some(cur);
            cur = next;
        }
        self.current_target = self.plan.pop_front().unwrap_or(start);
    }
}

impl PointPolicy for WaypointController {
    fn begin_episode(&mut self, env: &PointMazeEnv, rng: &mut ChaCha8Rng) -> [f64; 2] {
        let spawn = match self.spec.spawn {
            SpawnMode::FixedStart => {
                let pos = env.reset(rng);
                self.plan_from(self.nearest_waypoint(pos), rng);
                return pos;
            }
            SpawnMode::RandomWaypoint => {
                self.spawn_candidates[rng.random_range(0..self.spawn_candidates.len())]
            }
        };
        self.plan_from(spawn, rng);
        let center = self.spec.waypoints[spawn];
        let j = self.spec.spawn_jitter;
        if j > 0.0 {
            for _ in 0..32 {
                let pos =
                    [center[0] + rng.random_range(-j..j), center[1] + rng.random_range(-j..j)];
                if env.is_free(pos) {
                    return pos;
                }
            }
        }
        center
    }

    fn act(&mut self, pos: [f64; 2], rng: &mut ChaCha8Rng) -> [f64; 2] {
        let wp = self.spec.waypoints[self.current_target];
        let reached = ((wp[0] - pos[0]).powi(2) + (wp[1] - pos[1]).powi(2)).sqrt()
            <= self.spec.switch_radius;
        if reached {
            if let Some(next) = self.plan.pop_front() {
                self.current_target = next;
            }
        }
        let wp = self.spec.waypoints[self.current_target];
        let (dx, dy) = (wp[0] - pos[0], wp[1] - pos[1]);
        let norm = (dx * dx + dy * dy).sqrt();
        let drift = if norm > self.bound {
            [dx / norm * self.bound, dy / norm * self.bound]
        } else {
            [dx, dy]
        };
        let b = self.bound;
        let noise = self.spec.noise;
        let ex: f64 = StandardNormal.sample(rng);
        let ey: f64 = StandardNormal.sample(rng);
        [(drift[0] + noise * ex).clamp(-b, b), (drift[1] + noise * ey).clamp(-b, b)]
    }
}

/// Waypoint walker for the bundled stitch maze: one waypoint per corridor
/// end, legs covering every corridor, spawned all over the maze. No single
/// planned walk of two legs runs start to goal, so datasets contain only
/// partial segments that must be stitched.
pub fn stitch_waypoints(noise: f64) -> BehaviorPolicySpec {
    BehaviorPolicySpec::WaypointNoisy(WaypointNoisySpec {
        noise,
        waypoints: vec![
            [1.5, 1.5], // start, top of the left corridor
            [1.5, 3.5], // bottom left
            [3.5, 3.5], // bottom middle
            [3.5, 1.5], // dead end, top of the middle corridor
            [5.5, 3.5], // bottom right
            [5.5, 1.5], // goal, top of the right corridor
        ],
        edges: vec![(0, 1), (1, 2), (2, 3), (2, 4), (4, 5)],
        spawn: SpawnMode::RandomWaypoint,
        max_legs: 2,
        spawn_jitter: 0.25,
        switch_radius: 0.45,
    })
}

/// Instantiates a behavior policy for a grid maze.
pub(super) fn make_grid_policy(
    spec: &BehaviorPolicySpec,
    maze: &GridMaze,
) -> Result<Box<dyn DiscretePolicy>, EnvError> {
    spec.validate()?;
    match spec {
        BehaviorPolicySpec::UniformRandom => {
            Ok(Box::new(UniformDiscrete { n_actions: maze.mdp.n_actions() }))
        }
        BehaviorPolicySpec::EpsilonGreedyOracle { epsilon } => {
            Ok(Box::new(EpsilonGreedy::new(maze, *epsilon)))
        }
        BehaviorPolicySpec::WaypointNoisy(_) => {
            Err(EnvError::IncompatiblePolicy { spec: spec.name(), env: "grid" })
        }
    }
}

/// Instantiates a behavior policy for a point maze.
pub(super) fn make_point_policy(
    spec: &BehaviorPolicySpec,
    env: &PointMazeEnv,
) -> Result<Box<dyn PointPolicy>, EnvError> {
    spec.validate()?;
    match spec {
        BehaviorPolicySpec::UniformRandom => {
            Ok(Box::new(UniformPoint { bound: env.action_bound() }))
        }
        BehaviorPolicySpec::EpsilonGreedyOracle { .. } => {
            Err(EnvError::IncompatiblePolicy { spec: spec.name(), env: "point" })
        }
        BehaviorPolicySpec::WaypointNoisy(spec) => {
            Ok(Box::new(WaypointController::new(spec.clone(), env)?))
        }
    }
}
