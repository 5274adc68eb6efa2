//! Grid maze as an exact tabular MDP.

use super::layout::MazeLayout;
use super::tabular::TabularMDP;
use super::EnvError;

/// Actions move one cell up, down, left, right in this order.
pub const GRID_ACTIONS: [(i64, i64); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Tabular MDP over the free cells of a maze layout.
///
/// Reward is 1 for entering the goal cell (in expectation under slip); the
/// goal is absorbing with reward 0 afterwards, so the optimal start value is
/// `gamma^(shortest_path_moves - 1)`. Moves into walls stay in place. With
/// slip probability `slip` the executed action is resampled uniformly from
/// all four actions.
#[derive(Debug, Clone)]
pub struct GridMaze {
    pub mdp: TabularMDP,
    layout: MazeLayout,
    state_of_cell: Vec<Option<usize>>,
    cell_of_state: Vec<(usize, usize)>,
    start_state: usize,
    goal_state: usize,
}

pub fn build_gridmaze(layout: &MazeLayout, gamma: f64, slip: f64) -> Result<GridMaze, EnvError> {
    if !(0.0..=1.0).contains(&slip) {
        return Err(EnvError::BadMdp { context: format!("slip {slip} outside [0, 1]") });
    }
    let cells = layout.free_cells();
    if cells.is_empty() {
        return Err(EnvError::BadMdp { context: "layout has no free cells".into() });
    }
    let mut state_of_cell = vec![None; layout.rows() * layout.cols()];
    for (i, &(r, c)) in cells.iter().enumerate() {
        state_of_cell[r * layout.cols() + c] = Some(i);
    }
    let goal_state = state_of_cell[layout.goal().0 * layout.cols() + layout.goal().1]
        .expect("goal cell is free by construction");
    let start_state = state_of_cell[layout.start().0 * layout.cols() + layout.start().1]
        .expect("start cell is free by construction");

    let n = cells.len();
    let n_actions = GRID_ACTIONS.len();
    let mut transition = vec![0.0; n * n_actions * n];
    let mut reward = vec![0.0; n * n_actions];

    let move_target = |s: usize, a: usize| -> usize {
        let (r, c) = cells[s];
        let (dr, dc) = GRID_ACTIONS[a];
        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
        if layout.is_wall(nr, nc) {
            s
        } else {
            state_of_cell[nr as usize * layout.cols() + nc as usize]
                .expect("non-wall cells are indexed")
        }
    };

    for s in 0..n {
        for a in 0..n_actions {
            let row = &mut transition[(s * n_actions + a) * n..][..n];
            if s == goal_state {
                row[goal_state] = 1.0;
                continue;
            }
            row[move_target(s, a)] += 1.0 - slip;
            for b in 0..n_actions {
                row[move_target(s, b)] += slip / n_actions as f64;
            }
            reward[s * n_actions + a] = row[goal_state];
        }
    }

    let mut initial = vec![0.0; n];
    initial[start_state] = 1.0;
    let mdp = TabularMDP::new(n, n_actions, transition, reward, gamma, initial)?;
    Ok(GridMaze { mdp, layout: layout.clone(), state_of_cell, cell_of_state: cells, start_state, goal_state })
}

impl GridMaze {
    pub fn layout(&self) -> &MazeLayout {
        &self.layout
    }

    pub fn n_states(&self) -> usize {
        self.cell_of_state.len()
    }

    pub fn start_state(&self) -> usize {
        self.start_state
    }

    pub fn goal_state(&self) -> usize {
        self.goal_state
    }

    pub fn cell_of_state(&self, s: usize) -> (usize, usize) {
        self.cell_of_state[s]
    }

    pub fn state_of_cell(&self, row: usize, col: usize) -> Option<usize> {
        self.state_of_cell[row * self.layout.cols() + col]
    }

    /// Free non-goal states, the support of exploring starts.
    pub fn nonterminal_states(&self) -> Vec<usize> {
        (0..self.n_states()).filter(|&s| s != self.goal_state).collect()
    }
}
