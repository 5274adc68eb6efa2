//! Offline transition datasets: columnar storage, deterministic batch
//! sampling, reward shifts, and a checksummed on-disk format.

mod container;

pub use container::Container;

use crate::envs::Trajectory;
use crate::seeding;
use rand::Rng;
use std::io;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, not a container file")]
    BadMagic { found: [u8; 4] },
    #[error("container format version {found}, this build reads {expected}")]
    BadVersion { found: u32, expected: u32 },
    #[error("container truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("container has no block named {name:?}")]
    MissingBlock { name: String },
    #[error("container has no metadata named {name:?}")]
    MissingMeta { name: String },
    #[error("bad shape: {context}")]
    BadShape { context: String },
    #[error("bad metadata: {context}")]
    BadMeta { context: String },
    #[error("trajectory kind does not match dataset kind {expected}")]
    KindMismatch { expected: &'static str },
    #[error("transition {row}: {what} {got} out of range, table has {bound}")]
    IndexOutOfRange { row: usize, what: &'static str, got: usize, bound: usize },
    #[error("dataset has no transitions")]
    Empty,
}

/// State and action spaces the dataset was collected in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Tabular { n_states: usize, n_actions: usize },
    Continuous { state_dim: usize, action_dim: usize },
}

impl DataKind {
    pub fn state_cols(&self) -> usize {
        match self {
            Self::Tabular { .. } => 1,
            Self::Continuous { state_dim, .. } => *state_dim,
        }
    }

    pub fn action_cols(&self) -> usize {
        match self {
            Self::Tabular { .. } => 1,
            Self::Continuous { action_dim, .. } => *action_dim,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Tabular { .. } => "tabular",
            Self::Continuous { .. } => "continuous",
        }
    }
}

/// Columnar transition dataset. Tabular states and actions are stored as
/// indices in single columns; continuous ones as one row per transition.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    kind: DataKind,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    dones: Vec<f64>,
    n: usize,
}

impl OfflineDataset {
    pub fn from_trajectories(
        kind: DataKind,
        trajectories: &[Trajectory],
    ) -> Result<Self, DatasetError> {
        let mut ds = Self {
            kind,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            dones: Vec::new(),
            n: 0,
        };
        for traj in trajectories {
            match (kind, traj) {
                (DataKind::Tabular { n_states, n_actions }, Trajectory::Tabular(steps)) => {
                    for step in steps {
                        if step.state >= n_states || step.next_state >= n_states {
                            return Err(DatasetError::IndexOutOfRange {
                                row: ds.n,
                                what: "state",
                                got: step.state.max(step.next_state),
                                bound: n_states,
                            });
                        }
                        if step.action >= n_actions {
                            return Err(DatasetError::IndexOutOfRange {
                                row: ds.n,
                                what: "action",
                                got: step.action,
                                bound: n_actions,
                            });
                        }
                        ds.states.push(step.state as f64);
                        ds.actions.push(step.action as f64);
                        ds.rewards.push(step.reward);
                        ds.next_states.push(step.next_state as f64);
                        ds.dones.push(if step.done { 1.0 } else { 0.0 });
                        ds.n += 1;
                    }
                }
                (DataKind::Continuous { state_dim, action_dim }, Trajectory::Point(steps)) => {
                    if state_dim != 2 || action_dim != 2 {
                        return Err(DatasetError::BadShape {
                            context: format!(
                                "point trajectories are 2-dimensional, dataset wants {state_dim}/{action_dim}"
                            ),
                        });
                    }
                    for step in steps {
                        ds.states.extend_from_slice(&step.state);
                        ds.actions.extend_from_slice(&step.action);
                        ds.rewards.push(step.reward);
                        ds.next_states.extend_from_slice(&step.next_state);
                        ds.dones.push(if step.done { 1.0 } else { 0.0 });
                        ds.n += 1;
                    }
                }
                _ => return Err(DatasetError::KindMismatch { expected: kind.name() }),
            }
        }
        if ds.n == 0 {
            return Err(DatasetError::Empty);
        }
        Ok(ds)
    }

    pub fn kind(&self) -> DataKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn state_row(&self, i: usize) -> &[f64] {
        let c = self.kind.state_cols();
        &self.states[i * c..][..c]
    }

    pub fn action_row(&self, i: usize) -> &[f64] {
        let c = self.kind.action_cols();
        &self.actions[i * c..][..c]
    }

    pub fn next_state_row(&self, i: usize) -> &[f64] {
        let c = self.kind.state_cols();
        &self.next_states[i * c..][..c]
    }

    pub fn reward(&self, i: usize) -> f64 {
        self.rewards[i]
    }

    pub fn done(&self, i: usize) -> f64 {
        self.dones[i]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.n as f64
    }

    pub fn done_fraction(&self) -> f64 {
        self.dones.iter().sum::<f64>() / self.n as f64
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.rewards.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Adds `delta` to every reward in place.
    pub fn reward_shift(&mut self, delta: f64) {
        for r in &mut self.rewards {
            *r += delta;
        }
    }

    /// Uniform batch indices from a counter-based stream keyed by
    /// `(seed, step)`: any step's batch can be regenerated independently of
    /// sampling order.
    pub fn sample_indices(&self, seed: u64, step: u64, batch: usize) -> Vec<usize> {
        let mut rng = seeding::stream(&[seed, 0x6261_7463, step]);
        (0..batch).map(|_| rng.random_range(0..self.n)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut c = Container::new();
        c.set_meta("content", "dataset");
        c.set_meta("kind", self.kind.name());
        match self.kind {
            DataKind::Tabular { n_states, n_actions } => {
                c.set_meta("n_states", &n_states.to_string());
                c.set_meta("n_actions", &n_actions.to_string());
            }
            DataKind::Continuous { state_dim, action_dim } => {
                c.set_meta("state_dim", &state_dim.to_string());
                c.set_meta("action_dim", &action_dim.to_string());
            }
        }
        let sc = self.kind.state_cols();
        let ac = self.kind.action_cols();
        c.add_block("states", vec![self.n, sc], self.states.clone())?;
        c.add_block("actions", vec![self.n, ac], self.actions.clone())?;
        c.add_block("rewards", vec![self.n], self.rewards.clone())?;
        c.add_block("next_states", vec![self.n, sc], self.next_states.clone())?;
        c.add_block("dones", vec![self.n], self.dones.clone())?;
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let c = Container::load(path)?;
        let kind = match c.require_meta("kind")? {
            "tabular" => DataKind::Tabular {
                n_states: parse_meta(&c, "n_states")?,
                n_actions: parse_meta(&c, "n_actions")?,
            },
            "continuous" => DataKind::Continuous {
                state_dim: parse_meta(&c, "state_dim")?,
                action_dim: parse_meta(&c, "action_dim")?,
            },
            other => {
                return Err(DatasetError::BadMeta { context: format!("unknown kind {other:?}") })
            }
        };
        let (dims, states) = c.require_block("states")?;
        if dims.len() != 2 || dims[1] != kind.state_cols() {
            return Err(DatasetError::BadShape {
                context: format!("states dims {dims:?}, expected [n, {}]", kind.state_cols()),
            });
        }
        let n = dims[0];
        if n == 0 {
            return Err(DatasetError::Empty);
        }
        let take_matrix = |name: &str, cols: usize| -> Result<Vec<f64>, DatasetError> {
            let (dims, data) = c.require_block(name)?;
            if dims != [n, cols] {
                return Err(DatasetError::BadShape {
                    context: format!("{name} dims {dims:?}, expected [{n}, {cols}]"),
                });
            }
            Ok(data.to_vec())
        };
        let take_column = |name: &str| -> Result<Vec<f64>, DatasetError> {
            let (dims, data) = c.require_block(name)?;
            if dims != [n] {
                return Err(DatasetError::BadShape {
                    context: format!("{name} dims {dims:?}, expected [{n}]"),
                });
            }
            Ok(data.to_vec())
        };
        Ok(Self {
            kind,
            states: states.to_vec(),
            actions: take_matrix("actions", kind.action_cols())?,
            rewards: take_column("rewards")?,
            next_states: take_matrix("next_states", kind.state_cols())?,
            dones: take_column("dones")?,
            n,
        })
    }

    /// Writes the dataset as CSV with one transition per row. Tabular
    /// columns: `state,action,reward,next_state,done`; continuous ones get
    /// one column per coordinate.
    pub fn export_csv<W: io::Write>(&self, w: &mut W) -> io::Result<()> {
        match self.kind {
            DataKind::Tabular { .. } => writeln!(w, "state,action,reward,next_state,done")?,
            DataKind::Continuous { state_dim, action_dim } => {
                let mut header = Vec::new();
                for i in 0..state_dim {
                    header.push(format!("state_{i}"));
                }
                for i in 0..action_dim {
                    header.push(format!("action_{i}"));
                }
                header.push("reward".into());
                for i in 0..state_dim {
                    header.push(format!("next_state_{i}"));
                }
                header.push("done".into());
                writeln!(w, "{}", header.join(","))?;
            }
        }
        for i in 0..self.n {
            let mut fields: Vec<String> = Vec::new();
            fields.extend(self.state_row(i).iter().map(f64::to_string));
            fields.extend(self.action_row(i).iter().map(f64::to_string));
            fields.push(self.reward(i).to_string());
            fields.extend(self.next_state_row(i).iter().map(f64::to_string));
            fields.push(self.done(i).to_string());
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

fn parse_meta(c: &Container, key: &str) -> Result<usize, DatasetError> {
    c.require_meta(key)?
        .parse()
        .map_err(|_| DatasetError::BadMeta { context: format!("{key} is not an integer") })
}
