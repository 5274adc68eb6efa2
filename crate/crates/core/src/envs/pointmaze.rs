//! Continuous 2D point-mass maze over a grid layout.

use super::layout::MazeLayout;
use super::EnvError;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Point-mass navigation in the free space of a maze layout.
///
/// Positions are `[x, y]` with `x` along columns and `y` along rows; cell
/// `(row, col)` spans `[col, col+1] x [row, row+1]`, so cell centers sit at
/// half-integers. Actions are displacement vectors clamped to
/// `[-action_bound, action_bound]` per axis. Motion stops just before the
/// first wall contact along the segment and the blocked remainder slides
/// axis by axis, so positions never enter walls. Reaching within
/// `goal_radius` of the goal center gives reward 1 and ends the episode.
#[derive(Debug, Clone)]
pub struct PointMazeEnv {
    layout: MazeLayout,
    action_bound: f64,
    goal_radius: f64,
    max_steps: usize,
    start_jitter: f64,
}

const MOVE_SUBSTEPS: usize = 32;
const BISECTION_ROUNDS: usize = 40;
const WALL_BACKOFF: f64 = 1e-9;

impl PointMazeEnv {
    pub fn new(
        layout: MazeLayout,
        action_bound: f64,
        goal_radius: f64,
        max_steps: usize,
        start_jitter: f64,
    ) -> Result<Self, EnvError> {
        if !(action_bound > 0.0 && action_bound.is_finite()) {
            return Err(EnvError::BadSpec {
                context: format!("action bound {action_bound} must be positive"),
            });
        }
        if !(goal_radius > 0.0 && goal_radius <= 1.0) {
            return Err(EnvError::BadSpec {
                context: format!("goal radius {goal_radius} outside (0, 1]"),
            });
        }
        if max_steps == 0 {
            return Err(EnvError::BadSpec { context: "max steps must be positive".into() });
        }
        if !(0.0..0.5).contains(&start_jitter) {
            return Err(EnvError::BadSpec {
                context: format!("start jitter {start_jitter} outside [0, 0.5)"),
            });
        }
        Ok(Self { layout, action_bound, goal_radius, max_steps, start_jitter })
    }

    pub fn layout(&self) -> &MazeLayout {
        &self.layout
    }

    pub fn action_bound(&self) -> f64 {
        self.action_bound
    }

    pub fn goal_radius(&self) -> f64 {
        self.goal_radius
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn goal_center(&self) -> [f64; 2] {
        let (r, c) = self.layout.goal();
        [c as f64 + 0.5, r as f64 + 0.5]
    }

    pub fn start_center(&self) -> [f64; 2] {
        let (r, c) = self.layout.start();
        [c as f64 + 0.5, r as f64 + 0.5]
    }

    pub fn is_free(&self, pos: [f64; 2]) -> bool {
        let (col, row) = (pos[0].floor() as i64, pos[1].floor() as i64);
        !self.layout.is_wall(row, col)
    }

    /// Start position jittered uniformly inside the start cell.
    pub fn reset(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        let center = self.start_center();
        if self.start_jitter == 0.0 {
            return center;
        }
        let j = self.start_jitter;
        [center[0] + rng.random_range(-j..j), center[1] + rng.random_range(-j..j)]
    }

    pub fn at_goal(&self, pos: [f64; 2]) -> bool {
        let g = self.goal_center();
        let (dx, dy) = (pos[0] - g[0], pos[1] - g[1]);
        (dx * dx + dy * dy).sqrt() <= self.goal_radius
    }

    /// Applies a clamped action and returns `(next_position, reward, done)`.
    /// Motion truncates at the first wall contact; any blocked remainder is
    /// then retried one axis at a time (x, then y) so diagonal presses slide
    /// along walls instead of sticking in corners.
    pub fn step(&self, pos: [f64; 2], action: [f64; 2]) -> ([f64; 2], f64, bool) {
        let b = self.action_bound;
        let delta = [action[0].clamp(-b, b), action[1].clamp(-b, b)];
        let target = [pos[0] + delta[0], pos[1] + delta[1]];
        let mut next = self.truncated_move(pos, delta);
        if next != target {
            next = self.truncated_move(next, [target[0] - next[0], 0.0]);
            next = self.truncated_move(next, [0.0, target[1] - next[1]]);
        }
        if self.at_goal(next) {
            (next, 1.0, true)
        } else {
            (next, 0.0, false)
        }
    }

    /// Moves along `pos + t * delta`, stopping at the largest `t` in [0, 1]
    /// that keeps the whole prefix in free space.
    fn truncated_move(&self, pos: [f64; 2], delta: [f64; 2]) -> [f64; 2] {
        debug_assert!(self.is_free(pos), "motion must start in free space");
        let point = |t: f64| [pos[0] + t * delta[0], pos[1] + t * delta[1]];
        if delta[0] == 0.0 && delta[1] == 0.0 {
            return pos;
        }
        // Coarse march to bracket the first contact, then bisect.
        let mut lo = 0.0;
        let mut hi = None;
        for i in 1..=MOVE_SUBSTEPS {
            let t = i as f64 / MOVE_SUBSTEPS as f64;
            if self.is_free(point(t)) {
                lo = t;
            } else {
                hi = Some(t);
                break;
            }
        }
        let Some(mut hi) = hi else {
            return point(1.0);
        };
        for _ in 0..BISECTION_ROUNDS {
            let mid = 0.5 * (lo + hi);
            if self.is_free(point(mid)) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        // Back off slightly from the contact point; fall back to the last
        // strictly free sample if rounding still lands in a wall.
        let t = (lo - WALL_BACKOFF).max(0.0);
        let candidate = point(t);
        if self.is_free(candidate) {
            candidate
        } else {
            pos
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::layout::STITCH_MAZE;
    use crate::seeding;
    use approx::assert_abs_diff_eq;

    fn env() -> PointMazeEnv {
        let layout = MazeLayout::parse(STITCH_MAZE).unwrap();
        PointMazeEnv::new(layout, 0.5, 0.45, 80, 0.3).unwrap()
    }

    #[test]
    fn free_motion_applies_full_displacement() {
        let env = env();
        let (next, reward, done) = env.step([1.5, 1.5], [0.0, 0.4]);
        assert_abs_diff_eq!(next[0], 1.5);
        assert_abs_diff_eq!(next[1], 1.9);
        assert_eq!((reward, done), (0.0, false));
    }

    #[test]
    fn motion_into_wall_stops_before_boundary() {
        let env = env();
        // Start cell (1, 1) has a wall to its right at x = 2.
        let (next, _, _) = env.step([1.7, 1.5], [0.5, 0.0]);
        assert!(next[0] < 2.0, "stopped at {}", next[0]);
        assert!(next[0] > 1.99, "should reach nearly to the wall, got {}", next[0]);
        assert!(env.is_free(next));
    }

    #[test]
    fn diagonal_through_corner_is_blocked() {
        let env = env();
        // From the bottom corridor, aiming diagonally up-right into the
        // corner of wall cell (2, 2) must not tunnel through it.
        let pos = [1.9, 3.1];
        let (next, _, _) = env.step(pos, [0.5, -0.5]);
        assert!(env.is_free(next));
        // Never inside the wall cell x in [2, 3], y in [2, 3].
        assert!(!(next[0] >= 2.0 && next[0] < 3.0 && next[1] >= 2.0 && next[1] < 3.0));
    }

    #[test]
    fn diagonal_press_slides_along_the_wall() {
        let env = env();
        // Pressing up-right in the start corridor: x is blocked by the wall
        // at x = 2, y still advances.
        let (next, _, _) = env.step([1.9, 1.5], [0.4, 0.3]);
        assert!(next[0] < 2.0 && next[0] > 1.99, "x clamps to the wall, got {}", next[0]);
        assert_abs_diff_eq!(next[1], 1.8, epsilon = 1e-6);
        assert!(env.is_free(next));
    }

    #[test]
    fn actions_are_clamped_to_bound() {
        let env = env();
        let (next, _, _) = env.step([1.5, 2.5], [0.0, 9.0]);
        assert_abs_diff_eq!(next[1], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn goal_entry_rewards_and_terminates() {
        let env = env();
        let goal = env.goal_center();
        let (next, reward, done) = env.step([goal[0], goal[1] + 0.8], [0.0, -0.5]);
        assert_eq!((reward, done), (1.0, true));
        assert!(env.at_goal(next));
    }

    #[test]
    fn reset_is_jittered_and_free() {
        let env = env();
        let mut rng = seeding::stream(&[3, 7]);
        let mut seen_off_center = false;
        for _ in 0..64 {
            let pos = env.reset(&mut rng);
            assert!(env.is_free(pos));
            let c = env.start_center();
            assert!((pos[0] - c[0]).abs() < 0.3 && (pos[1] - c[1]).abs() < 0.3);
            seen_off_center |= (pos[0] - c[0]).abs() > 1e-3;
        }
        assert!(seen_off_center);
    }

    #[test]
    fn long_random_walk_never_enters_walls() {
        let env = env();
        let mut rng = seeding::stream(&[99, 1]);
        let mut pos = env.reset(&mut rng);
        for _ in 0..4000 {
            let action = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            let (next, _, done) = env.step(pos, action);
            assert!(env.is_free(next), "entered wall at {next:?}");
            pos = if done { env.reset(&mut rng) } else { next };
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let layout = MazeLayout::parse(STITCH_MAZE).unwrap();
        assert!(PointMazeEnv::new(layout.clone(), 0.0, 0.45, 80, 0.3).is_err());
        assert!(PointMazeEnv::new(layout.clone(), 0.5, 1.5, 80, 0.3).is_err());
        assert!(PointMazeEnv::new(layout.clone(), 0.5, f64::NAN, 80, 0.3).is_err());
        assert!(PointMazeEnv::new(layout.clone(), 0.5, 0.45, 0, 0.3).is_err());
        assert!(PointMazeEnv::new(layout, 0.5, 0.45, 80, 0.5).is_err());
    }
}
