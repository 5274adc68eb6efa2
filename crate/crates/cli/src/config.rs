//! Plain-text run configuration: `key = value` lines under `[section]`
//! headers. Every key is known; anything else is a hard error, so a typo
//! cannot silently fall back to a default.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use projiql_core::learner::{ClipOrder, LearnerConfig, Mode};

/// Which band the plot command draws around the seed-mean line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandKind {
    /// Mean plus and minus one standard deviation across runs.
    Std,
    /// Envelope of the per-run minima and maxima.
    MinMax,
}

impl BandKind {
    fn name(self) -> &'static str {
        match self {
            Self::Std => "std",
            Self::MinMax => "minmax",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "std" => Some(Self::Std),
            "minmax" => Some(Self::MinMax),
            _ => None,
        }
    }
}

/// Environment settings; `gamma` lives in `[learner]` so the discount has
/// one source of truth.
#[derive(Debug, Clone)]
pub struct EnvConfig {
    /// `point` (continuous maze) or `grid` (tabular maze).
    pub kind: String,
    /// Bundled maze name: `corridor`, `fourroom`, or `stitch`.
    pub layout: String,
    pub action_bound: f64,
    pub goal_radius: f64,
    /// Episode cap during evaluation.
    pub max_steps: usize,
    pub start_jitter: f64,
    /// Probability a grid action slips to a random direction.
    pub slip: f64,
    /// Grid rollouts start from a uniformly random free cell.
    pub exploring_starts: bool,
}

/// Dataset generation settings.
#[derive(Debug, Clone)]
pub struct DataConfig {
    /// `waypoint-stitch`, `uniform-random`, or `epsilon-greedy`.
    pub behavior: String,
    /// Gaussian action noise of the waypoint walker.
    pub noise: f64,
    /// Exploration rate of the epsilon-greedy oracle.
    pub epsilon: f64,
    pub episodes: usize,
    pub seed: u64,
    /// Episode cap during generation; shorter than evaluation so datasets
    /// hold partial segments rather than complete solutions.
    pub max_steps: usize,
    pub path: PathBuf,
}

/// Sweep and report settings.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    /// Fixed asymmetry levels for `sweep-tau`.
    pub taus: Vec<f64>,
    /// Batch sizes for `ablate-batch`.
    pub batches: Vec<usize>,
    /// Steps per window for windowed projection statistics.
    pub window: usize,
}

/// Everything a command needs, resolved from defaults, an optional config
/// file, `--set` overrides, and the `PROJIQL_OUT` environment variable.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Run directory name under `out_dir`.
    pub name: String,
    pub out_dir: PathBuf,
    /// Training seeds; sweeps repeat every setting across all of them.
    pub seeds: Vec<u64>,
    pub plot_band: BandKind,
    pub env: EnvConfig,
    pub data: DataConfig,
    pub learner: LearnerConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".to_string(),
            out_dir: PathBuf::from("out"),
            seeds: vec![0, 2, 4, 6, 8],
            plot_band: BandKind::Std,
            env: EnvConfig {
                kind: "point".to_string(),
                layout: "stitch".to_string(),
                action_bound: 0.5,
                goal_radius: 0.6,
                max_steps: 120,
                start_jitter: 0.2,
                slip: 0.1,
                exploring_starts: false,
            },
            data: DataConfig {
                behavior: "waypoint-stitch".to_string(),
                noise: 0.22,
                epsilon: 0.1,
                episodes: 500,
                seed: 7,
                max_steps: 25,
                path: PathBuf::from("out/dataset.bin"),
            },
            learner: LearnerConfig::desk_default(Mode::ProjIql),
            sweep: SweepConfig {
                taus: vec![0.3, 0.6, 0.9],
                batches: vec![16, 64, 128, 256],
                window: 1000,
            },
        }
    }
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::ProjIql => "proj-iql",
        Mode::Iql => "iql",
        Mode::Wbc => "wbc",
    }
}

fn clip_order_name(order: ClipOrder) -> &'static str {
    match order {
        ClipOrder::ClipThenMean => "clip-then-mean",
        ClipOrder::MeanThenClip => "mean-then-clip",
    }
}

fn parse_clip_order(s: &str) -> Option<ClipOrder> {
    match s {
        "clip-then-mean" => Some(ClipOrder::ClipThenMean),
        "mean-then-clip" => Some(ClipOrder::MeanThenClip),
        _ => None,
    }
}

fn parse_list<T: std::str::FromStr>(value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let mut out = Vec::new();
    for part in value.split(',') {
        let part = part.trim();
        if part.is_empty() {
            bail!("empty element in list '{value}'");
        }
        out.push(part.parse::<T>().map_err(|e| anyhow::anyhow!("bad element '{part}': {e}"))?);
    }
    Ok(out)
}

fn join_list<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses a full config file. Defaults fill anything the file leaves
    /// unset; unknown sections or keys abort.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(inner) = line.strip_prefix('[') {
                let name = inner
                    .strip_suffix(']')
                    .with_context(|| format!("line {}: unterminated section header", idx + 1))?
                    .trim();
                if !matches!(name, "run" | "env" | "data" | "learner" | "sweep") {
                    bail!("line {}: unknown section [{name}]", idx + 1);
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected 'key = value', got '{line}'", idx + 1))?;
            cfg.set(&section, key.trim(), value.trim())
                .with_context(|| format!("line {}", idx + 1))?;
        }
        Ok(cfg)
    }

    /// Applies one `--set section.key=value` override.
    pub fn apply_set(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .with_context(|| format!("--set '{spec}' is not of the form section.key=value"))?;
        let (section, key) = key
            .trim()
            .split_once('.')
            .with_context(|| format!("--set key '{key}' is missing its section prefix"))?;
        self.set(section, key, value.trim())
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let f64_of = |v: &str| -> Result<f64> {
            v.parse::<f64>().with_context(|| format!("'{v}' is not a number"))
        };
        let u64_of = |v: &str| -> Result<u64> {
            v.parse::<u64>().with_context(|| format!("'{v}' is not a non-negative integer"))
        };
        let usize_of = |v: &str| -> Result<usize> {
            v.parse::<usize>().with_context(|| format!("'{v}' is not a non-negative integer"))
        };
        let bool_of = |v: &str| -> Result<bool> {
            v.parse::<bool>().with_context(|| format!("'{v}' is not true or false"))
        };
        match (section, key) {
            ("run", "name") => self.name = value.to_string(),
            ("run", "out_dir") => self.out_dir = PathBuf::from(value),
            ("run", "seeds") => self.seeds = parse_list(value)?,
            ("run", "plot_band") => {
                self.plot_band = BandKind::parse(value)
                    .with_context(|| format!("plot band '{value}' is not std or minmax"))?;
            }
            ("env", "kind") => {
                if !matches!(value, "point" | "grid") {
                    bail!("env kind '{value}' is not point or grid");
                }
                self.env.kind = value.to_string();
            }
            ("env", "layout") => {
                if !matches!(value, "corridor" | "fourroom" | "stitch") {
                    bail!("layout '{value}' is not corridor, fourroom, or stitch");
                }
                self.env.layout = value.to_string();
            }
            ("env", "action_bound") => self.env.action_bound = f64_of(value)?,
            ("env", "goal_radius") => self.env.goal_radius = f64_of(value)?,
            ("env", "max_steps") => self.env.max_steps = usize_of(value)?,
            ("env", "start_jitter") => self.env.start_jitter = f64_of(value)?,
            ("env", "slip") => self.env.slip = f64_of(value)?,
            ("env", "exploring_starts") => self.env.exploring_starts = bool_of(value)?,
            ("data", "behavior") => {
                if !matches!(value, "waypoint-stitch" | "uniform-random" | "epsilon-greedy") {
                    bail!(
                        "behavior '{value}' is not waypoint-stitch, uniform-random, or epsilon-greedy"
                    );
                }
                self.data.behavior = value.to_string();
            }
            ("data", "noise") => self.data.noise = f64_of(value)?,
            ("data", "epsilon") => self.data.epsilon = f64_of(value)?,
            ("data", "episodes") => self.data.episodes = usize_of(value)?,
            ("data", "seed") => self.data.seed = u64_of(value)?,
            ("data", "max_steps") => self.data.max_steps = usize_of(value)?,
            ("data", "path") => self.data.path = PathBuf::from(value),
            ("learner", "mode") => {
                self.learner.mode = Mode::parse(value)
                    .with_context(|| format!("mode '{value}' is not proj-iql, iql, or wbc"))?;
            }
            ("learner", "gamma") => self.learner.gamma = f64_of(value)?,
            ("learner", "tau") => self.learner.tau = f64_of(value)?,
            ("learner", "inv_temperature") => self.learner.inv_temperature = f64_of(value)?,
            ("learner", "advantage_cap") => self.learner.advantage_cap = f64_of(value)?,
            ("learner", "lr") => self.learner.lr = f64_of(value)?,
            ("learner", "policy_lr") => self.learner.policy_lr = f64_of(value)?,
            ("learner", "polyak") => self.learner.polyak = f64_of(value)?,
            ("learner", "batch_size") => self.learner.batch_size = usize_of(value)?,
            ("learner", "gradient_steps") => self.learner.gradient_steps = u64_of(value)?,
            ("learner", "bc_steps") => self.learner.bc_steps = u64_of(value)?,
            ("learner", "policy_bc_steps") => self.learner.policy_bc_steps = u64_of(value)?,
            ("learner", "bc_batch_size") => self.learner.bc_batch_size = usize_of(value)?,
            ("learner", "hidden_width") => self.learner.hidden_width = usize_of(value)?,
            ("learner", "hidden_depth") => self.learner.hidden_depth = usize_of(value)?,
            ("learner", "dropout") => self.learner.dropout = f64_of(value)?,
            ("learner", "twin_critics") => self.learner.twin_critics = bool_of(value)?,
            ("learner", "tau_clip_lo") => self.learner.tau_clip_lo = f64_of(value)?,
            ("learner", "tau_clip_hi") => self.learner.tau_clip_hi = f64_of(value)?,
            ("learner", "clip_order") => {
                self.learner.clip_order = parse_clip_order(value).with_context(|| {
                    format!("clip order '{value}' is not clip-then-mean or mean-then-clip")
                })?;
            }
            ("learner", "density_floor") => self.learner.density_floor = f64_of(value)?,
            ("learner", "log_std_lo") => self.learner.log_std_bounds.0 = f64_of(value)?,
            ("learner", "log_std_hi") => self.learner.log_std_bounds.1 = f64_of(value)?,
            ("learner", "eval_every") => self.learner.eval_every = u64_of(value)?,
            ("learner", "eval_episodes") => self.learner.eval_episodes = usize_of(value)?,
            ("sweep", "taus") => self.sweep.taus = parse_list(value)?,
            ("sweep", "batches") => self.sweep.batches = parse_list(value)?,
            ("sweep", "window") => {
                let w = usize_of(value)?;
                if w == 0 {
                    bail!("window must be positive");
                }
                self.sweep.window = w;
            }
            _ if section.is_empty() => bail!("key '{key}' appears before any [section] header"),
            _ => bail!("unknown key {section}.{key}"),
        }
        Ok(())
    }

    /// Serializes every setting; `parse` of the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "seeds = {}", join_list(&self.seeds));
        let _ = writeln!(s, "plot_band = {}", self.plot_band.name());
        let _ = writeln!(s, "\n[env]");
        let _ = writeln!(s, "kind = {}", self.env.kind);
        let _ = writeln!(s, "layout = {}", self.env.layout);
        let _ = writeln!(s, "action_bound = {}", self.env.action_bound);
        let _ = writeln!(s, "goal_radius = {}", self.env.goal_radius);
        let _ = writeln!(s, "max_steps = {}", self.env.max_steps);
        let _ = writeln!(s, "start_jitter = {}", self.env.start_jitter);
        let _ = writeln!(s, "slip = {}", self.env.slip);
        let _ = writeln!(s, "exploring_starts = {}", self.env.exploring_starts);
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "behavior = {}", self.data.behavior);
        let _ = writeln!(s, "noise = {}", self.data.noise);
        let _ = writeln!(s, "epsilon = {}", self.data.epsilon);
        let _ = writeln!(s, "episodes = {}", self.data.episodes);
        let _ = writeln!(s, "seed = {}", self.data.seed);
        let _ = writeln!(s, "max_steps = {}", self.data.max_steps);
        let _ = writeln!(s, "path = {}", self.data.path.display());
        let _ = writeln!(s, "\n[learner]");
        let _ = writeln!(s, "mode = {}", mode_name(self.learner.mode));
        let _ = writeln!(s, "gamma = {}", self.learner.gamma);
        let _ = writeln!(s, "tau = {}", self.learner.tau);
        let _ = writeln!(s, "inv_temperature = {}", self.learner.inv_temperature);
        let _ = writeln!(s, "advantage_cap = {}", self.learner.advantage_cap);
        let _ = writeln!(s, "lr = {}", self.learner.lr);
        let _ = writeln!(s, "policy_lr = {}", self.learner.policy_lr);
        let _ = writeln!(s, "polyak = {}", self.learner.polyak);
        let _ = writeln!(s, "batch_size = {}", self.learner.batch_size);
        let _ = writeln!(s, "gradient_steps = {}", self.learner.gradient_steps);
        let _ = writeln!(s, "bc_steps = {}", self.learner.bc_steps);
        let _ = writeln!(s, "policy_bc_steps = {}", self.learner.policy_bc_steps);
        let _ = writeln!(s, "bc_batch_size = {}", self.learner.bc_batch_size);
        let _ = writeln!(s, "hidden_width = {}", self.learner.hidden_width);
        let _ = writeln!(s, "hidden_depth = {}", self.learner.hidden_depth);
        let _ = writeln!(s, "dropout = {}", self.learner.dropout);
        let _ = writeln!(s, "twin_critics = {}", self.learner.twin_critics);
        let _ = writeln!(s, "tau_clip_lo = {}", self.learner.tau_clip_lo);
        let _ = writeln!(s, "tau_clip_hi = {}", self.learner.tau_clip_hi);
        let _ = writeln!(s, "clip_order = {}", clip_order_name(self.learner.clip_order));
        let _ = writeln!(s, "density_floor = {}", self.learner.density_floor);
        let _ = writeln!(s, "log_std_lo = {}", self.learner.log_std_bounds.0);
        let _ = writeln!(s, "log_std_hi = {}", self.learner.log_std_bounds.1);
        let _ = writeln!(s, "eval_every = {}", self.learner.eval_every);
        let _ = writeln!(s, "eval_episodes = {}", self.learner.eval_episodes);
        let _ = writeln!(s, "\n[sweep]");
        let _ = writeln!(s, "taus = {}", join_list(&self.sweep.taus));
        let _ = writeln!(s, "batches = {}", join_list(&self.sweep.batches));
        let _ = writeln!(s, "window = {}", self.sweep.window);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn modified_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_set("learner.mode=iql").unwrap();
        cfg.apply_set("learner.tau=0.9").unwrap();
        cfg.apply_set("run.seeds=1,3").unwrap();
        cfg.apply_set("env.kind=grid").unwrap();
        cfg.apply_set("data.behavior=epsilon-greedy").unwrap();
        cfg.apply_set("sweep.batches=4,8").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!(back.seeds, vec![1, 3]);
        assert_eq!(back.sweep.batches, vec![4, 8]);
    }

    #[test]
    fn unknown_keys_and_sections_abort() {
        assert!(RunConfig::parse("[run]\nnam = x\n").is_err());
        assert!(RunConfig::parse("[learning]\nlr = 0.1\n").is_err());
        assert!(RunConfig::parse("lr = 0.1\n").is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_set("learner.learning_rate=0.1").is_err());
        assert!(cfg.apply_set("tau=0.5").is_err());
    }

    #[test]
    fn malformed_values_carry_context() {
        let err = RunConfig::parse("[learner]\ngamma = fast\n").unwrap_err();
        let chain = format!("{err:#}");
        assert!(chain.contains("line 2"), "missing line number: {chain}");
        assert!(chain.contains("fast"), "missing offending value: {chain}");
        assert!(RunConfig::parse("[env]\nkind = water\n").is_err());
        assert!(RunConfig::parse("[run]\nplot_band = violin\n").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# top comment\n\n[run]\n# about the name\nname = demo\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.name, "demo");
    }
}
