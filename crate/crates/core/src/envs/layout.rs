//! ASCII maze layouts shared by the grid and point environments.

use super::EnvError;

/// Rectangular maze with walls, one start cell, and one goal cell.
///
/// Layout text uses `#` for walls, `.` for free cells, `S` for the start,
/// and `G` for the goal. Lines are 1-indexed in parse errors. Cells outside
/// the rectangle count as walls.
#[derive(Debug, Clone)]
pub struct MazeLayout {
    rows: usize,
    cols: usize,
    walls: Vec<bool>,
    start: (usize, usize),
    goal: (usize, usize),
}

/// Single hallway: five steps from start to goal.
pub const CORRIDOR_1X6: &str = "S....G";

/// Four 2x2 rooms separated by a wall cross with four doorways.
pub const FOUR_ROOMS_5X5: &str = "\
S.#..
.....
#.#.#
.....
..#.G";

/// Three vertical corridors joined along the bottom; the middle corridor is
/// a dead end. Built for stitching experiments: short waypoint-to-waypoint
/// segments cover the maze but no single segment runs start to goal.
pub const STITCH_MAZE: &str = "\
#######
#S#.#G#
#.#.#.#
#.....#
#######";

impl MazeLayout {
    pub fn parse(text: &str) -> Result<Self, EnvError> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.is_empty() {
            return Err(EnvError::LayoutEmpty);
        }
        let cols = lines[0].chars().count();
        let rows = lines.len();
        let mut walls = vec![false; rows * cols];
        let mut start = None;
        let mut goal = None;
        for (r, line) in lines.iter().enumerate() {
            let got = line.chars().count();
            if got != cols {
                return Err(EnvError::LayoutRagged { line: r + 1, got, expected: cols });
            }
            for (c, ch) in line.chars().enumerate() {
                match ch {
                    '#' => walls[r * cols + c] = true,
                    '.' => {}
                    'S' => {
                        if start.replace((r, c)).is_some() {
                            return Err(EnvError::LayoutDuplicateMarker {
                                line: r + 1,
                                col: c + 1,
                                which: 'S',
                            });
                        }
                    }
                    'G' => {
                        if goal.replace((r, c)).is_some() {
                            return Err(EnvError::LayoutDuplicateMarker {
                                line: r + 1,
                                col: c + 1,
                                which: 'G',
                            });
                        }
                    }
                    found => {
                        return Err(EnvError::LayoutBadChar { line: r + 1, col: c + 1, found })
                    }
                }
            }
        }
        let start = start.ok_or(EnvError::LayoutMissingMarker { which: 'S' })?;
        let goal = goal.ok_or(EnvError::LayoutMissingMarker { which: 'G' })?;
        Ok(Self { rows, cols, walls, start, goal })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn start(&self) -> (usize, usize) {
        self.start
    }

    pub fn goal(&self) -> (usize, usize) {
        self.goal
    }

    /// Wall test with out-of-bounds treated as wall; takes signed indices so
    /// callers can probe neighbors of border cells directly.
    pub fn is_wall(&self, row: i64, col: i64) -> bool {
        if row < 0 || col < 0 || row >= self.rows as i64 || col >= self.cols as i64 {
            return true;
        }
        self.walls[row as usize * self.cols + col as usize]
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                if !self.walls[r * self.cols + c] {
                    cells.push((r, c));
                }
            }
        }
        cells
    }

    /// Breadth-first shortest path length in moves from start to goal, or
    /// `None` when the goal is unreachable.
    pub fn shortest_path_moves(&self) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.rows * self.cols];
        let mut queue = std::collections::VecDeque::new();
        dist[self.start.0 * self.cols + self.start.1] = 0;
        queue.push_back(self.start);
        while let Some((r, c)) = queue.pop_front() {
            let d = dist[r * self.cols + c];
            if (r, c) == self.goal {
                return Some(d);
            }
            for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if !self.is_wall(nr, nc) && dist[nr as usize * self.cols + nc as usize] == usize::MAX
                {
                    dist[nr as usize * self.cols + nc as usize] = d + 1;
                    queue.push_back((nr as usize, nc as usize));
                }
            }
        }
        None
    }
}
