//! Command implementations. Every command resolves its full configuration
//! up front, fails before any side effect on bad inputs, and writes outputs
//! that rerunning reproduces byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use projiql_core::datasets::{DataKind, OfflineDataset};
use projiql_core::envs::{
    build_gridmaze, rollout, stitch_waypoints, BehaviorPolicySpec, EnvKind, MazeLayout,
    PointMazeEnv, Trajectory, CORRIDOR_1X6, FOUR_ROOMS_5X5, STITCH_MAZE,
};
use projiql_core::learner::{
    evaluate, save_policy, train, write_metrics_csv, LearnerConfig, MetricsRow, Mode, TrainState,
};
use projiql_core::seeding;
use projiql_core::theory::verify_suite_with_fault;

use crate::config::RunConfig;
use crate::plot;

/// Windowed τ standard deviations above this fraction of the clip interval
/// mark a run as high-variance in the batch-ablation report.
pub const HIGH_VARIANCE_FRACTION: f64 = 0.125;

fn layout_text(name: &str) -> Result<&'static str> {
    Ok(match name {
        "corridor" => CORRIDOR_1X6,
        "fourroom" => FOUR_ROOMS_5X5,
        "stitch" => STITCH_MAZE,
        other => bail!("no bundled layout named '{other}'"),
    })
}

/// Builds the environment used for a purpose-specific episode cap: data
/// generation uses `[data] max_steps`, evaluation `[env] max_steps`.
fn build_env(cfg: &RunConfig, max_steps: usize) -> Result<EnvKind> {
    let layout = MazeLayout::parse(layout_text(&cfg.env.layout)?)?;
    match cfg.env.kind.as_str() {
        "point" => {
            let env = PointMazeEnv::new(
                layout,
                cfg.env.action_bound,
                cfg.env.goal_radius,
                max_steps,
                cfg.env.start_jitter,
            )?;
            Ok(EnvKind::Point(env))
        }
        "grid" => {
            let maze = build_gridmaze(&layout, cfg.learner.gamma, cfg.env.slip)?;
            Ok(EnvKind::Grid { maze, max_steps, exploring_starts: cfg.env.exploring_starts })
        }
        other => bail!("env kind '{other}' is not point or grid"),
    }
}

fn behavior_spec(cfg: &RunConfig) -> Result<BehaviorPolicySpec> {
    match cfg.data.behavior.as_str() {
        "waypoint-stitch" => {
            ensure!(
                cfg.env.kind == "point" && cfg.env.layout == "stitch",
                "waypoint-stitch behavior needs env kind point with the stitch layout"
            );
            Ok(stitch_waypoints(cfg.data.noise))
        }
        "uniform-random" => Ok(BehaviorPolicySpec::UniformRandom),
        "epsilon-greedy" => {
            Ok(BehaviorPolicySpec::EpsilonGreedyOracle { epsilon: cfg.data.epsilon })
        }
        other => bail!("behavior '{other}' is unknown"),
    }
}

fn data_kind(cfg: &RunConfig, env: &EnvKind) -> DataKind {
    match env {
        EnvKind::Point(_) => DataKind::Continuous { state_dim: 2, action_dim: 2 },
        EnvKind::Grid { maze, .. } => {
            DataKind::Tabular { n_states: maze.mdp.n_states(), n_actions: maze.mdp.n_actions() }
        }
    }
}

fn episode_succeeded(t: &Trajectory) -> bool {
    match t {
        Trajectory::Tabular(steps) => steps.iter().any(|s| s.done),
        Trajectory::Point(steps) => steps.iter().any(|s| s.done),
    }
}

/// Generates the dataset described by `[env]` and `[data]` and saves it to
/// `[data] path`. Rerunning with the same config writes identical bytes.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<String> {
    let env = build_env(cfg, cfg.data.max_steps)?;
    let spec = behavior_spec(cfg)?;
    let trajs = rollout(&env, &spec, cfg.data.episodes, cfg.data.seed)?;
    let successes = trajs.iter().filter(|t| episode_succeeded(t)).count();
    let ds = OfflineDataset::from_trajectories(data_kind(cfg, &env), &trajs)?;
    if let Some(parent) = cfg.data.path.parent() {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    ds.save(&cfg.data.path)
        .with_context(|| format!("writing {}", cfg.data.path.display()))?;
    Ok(format!(
        "wrote {} transitions from {} episodes ({} reached the goal) to {}",
        ds.len(),
        trajs.len(),
        successes,
        cfg.data.path.display()
    ))
}

/// Output artifacts of one seed's training run.
struct SeedRun {
    seed: u64,
    metrics: Vec<MetricsRow>,
    final_return: f64,
    final_success: f64,
}

/// Trains one seed into `dir`: frozen config first, then metrics and
/// checkpoints. The frozen copy pins `[run] seeds` to this seed alone, so
/// the directory is reproducible from its own artifacts.
fn run_seed(
    cfg: &RunConfig,
    dataset: &OfflineDataset,
    eval_env: &EnvKind,
    seed: u64,
    dir: &Path,
) -> Result<SeedRun> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut frozen = cfg.clone();
    frozen.seeds = vec![seed];
    fs::write(dir.join("config.txt"), frozen.to_text())
        .with_context(|| format!("writing {}", dir.join("config.txt").display()))?;

    let mut lc: LearnerConfig = cfg.learner.clone();
    lc.seed = seed;
    let state: TrainState = train(&lc, dataset, Some(eval_env))?;

    let mut csv = Vec::new();
    write_metrics_csv(&state.metrics, &mut csv)?;
    fs::write(dir.join("metrics.csv"), csv)?;
    save_policy(&state.behavior, state.kind, &dir.join("behavior.ckpt"))?;
    save_policy(&state.policy, state.kind, &dir.join("policy.ckpt"))?;

    let fin = evaluate(
        &state.policy,
        eval_env,
        lc.eval_episodes,
        lc.gamma,
        seeding::fold_seed(&[seed, 0x66_696e_616c]),
    )?;
    Ok(SeedRun {
        seed,
        metrics: state.metrics,
        final_return: fin.mean_return,
        final_success: fin.success_rate,
    })
}

/// Pre-flight shared by the training commands: the dataset must load and
/// every target run directory must be absent unless `force` is set. Runs
/// start only after all checks pass.
fn preflight(cfg: &RunConfig, dirs: &[PathBuf], force: bool) -> Result<OfflineDataset> {
    let dataset = OfflineDataset::load(&cfg.data.path)
        .with_context(|| format!("loading dataset {}", cfg.data.path.display()))?;
    ensure!(!dataset.is_empty(), "dataset {} holds no transitions", cfg.data.path.display());
    for dir in dirs {
        if dir.exists() {
            ensure!(
                force,
                "{} already exists; pass --force to overwrite finished runs",
                dir.display()
            );
        }
    }
    fs::create_dir_all(cfg.out_dir.join(&cfg.name))
        .with_context(|| format!("creating {}", cfg.out_dir.join(&cfg.name).display()))?;
    Ok(dataset)
}

/// Runs `jobs` to completion, one scoped worker thread per job, and returns
/// their outputs in job order.
fn run_workers<T: Send>(
    jobs: Vec<Box<dyn FnOnce() -> Result<T> + Send + '_>>,
) -> Result<Vec<T>> {
    let outcomes: Vec<Result<T>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs.into_iter().map(|job| scope.spawn(job)).collect();
        handles
            .into_iter()
            .map(|h| match h.join() {
                Ok(r) => r,
                Err(_) => Err(anyhow::anyhow!("a worker thread panicked")),
            })
            .collect()
    });
    outcomes.into_iter().collect()
}

/// Trains every `[run] seeds` entry on the dataset, one directory per seed
/// under `<out_dir>/<name>/`.
pub fn cmd_train(cfg: &RunConfig, force: bool) -> Result<String> {
    let root = cfg.out_dir.join(&cfg.name);
    let dirs: Vec<PathBuf> =
        cfg.seeds.iter().map(|s| root.join(format!("seed{s}"))).collect();
    let dataset = preflight(cfg, &dirs, force)?;
    let eval_env = build_env(cfg, cfg.env.max_steps)?;

    let jobs: Vec<Box<dyn FnOnce() -> Result<SeedRun> + Send>> = cfg
        .seeds
        .iter()
        .zip(&dirs)
        .map(|(&seed, dir)| {
            let (dataset, eval_env, dir) = (&dataset, &eval_env, dir.clone());
            Box::new(move || run_seed(cfg, dataset, eval_env, seed, &dir)) as _
        })
        .collect();
    let runs = run_workers(jobs)?;

    let mut lines = Vec::new();
    for r in &runs {
        lines.push(format!(
            "seed {}: return {:.4}, success {:.2}",
            r.seed, r.final_return, r.final_success
        ));
    }
    Ok(format!("trained {} seeds under {}\n{}", runs.len(), root.display(), lines.join("\n")))
}

/// Trains `[sweep] taus` × `[run] seeds` in fixed-τ mode and aggregates
/// final evaluations into `sweep_tau.csv`.
pub fn cmd_sweep_tau(cfg: &RunConfig, force: bool) -> Result<String> {
    ensure!(
        cfg.learner.mode == Mode::Iql,
        "sweep-tau studies the fixed-tau learner; set learner.mode = iql"
    );
    ensure!(!cfg.sweep.taus.is_empty(), "sweep.taus is empty");
    let root = cfg.out_dir.join(&cfg.name);
    let mut dirs = Vec::new();
    let mut settings = Vec::new();
    for &tau in &cfg.sweep.taus {
        for &seed in &cfg.seeds {
            dirs.push(root.join(format!("tau{tau}")).join(format!("seed{seed}")));
            settings.push((tau, seed));
        }
    }
    let dataset = preflight(cfg, &dirs, force)?;
    let eval_env = build_env(cfg, cfg.env.max_steps)?;

    let jobs: Vec<Box<dyn FnOnce() -> Result<SeedRun> + Send>> = settings
        .iter()
        .zip(&dirs)
        .map(|(&(tau, seed), dir)| {
            let (dataset, eval_env, dir) = (&dataset, &eval_env, dir.clone());
            let mut sub = cfg.clone();
            sub.learner.tau = tau;
            Box::new(move || run_seed(&sub, dataset, eval_env, seed, &dir)) as _
        })
        .collect();
    let runs = run_workers(jobs)?;

    let mut csv = String::from("tau,seed,return,success\n");
    for ((tau, seed), r) in settings.iter().zip(&runs) {
        csv.push_str(&format!("{tau},{seed},{},{}\n", r.final_return, r.final_success));
    }
    let out = root.join("sweep_tau.csv");
    fs::write(&out, csv)?;
    Ok(format!("swept {} settings; aggregate at {}", settings.len(), out.display()))
}

/// Mean over whole windows of the within-window standard deviation of the
/// projected asymmetry level.
pub fn windowed_tau_std(metrics: &[MetricsRow], window: usize) -> f64 {
    let stds: Vec<f64> = metrics
        .chunks(window.max(1))
        .map(|c| {
            let n = c.len() as f64;
            let mean = c.iter().map(|r| r.tau).sum::<f64>() / n;
            (c.iter().map(|r| (r.tau - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect();
    stds.iter().sum::<f64>() / stds.len().max(1) as f64
}

/// Trains `[sweep] batches` × `[run] seeds` in projection mode and reports
/// per-run windowed τ stability in `ablate_batch.csv`.
pub fn cmd_ablate_batch(cfg: &RunConfig, force: bool) -> Result<String> {
    ensure!(
        cfg.learner.mode == Mode::ProjIql,
        "ablate-batch studies the projected learner; set learner.mode = proj-iql"
    );
    ensure!(!cfg.sweep.batches.is_empty(), "sweep.batches is empty");
    let root = cfg.out_dir.join(&cfg.name);
    let mut dirs = Vec::new();
    let mut settings = Vec::new();
    for &batch in &cfg.sweep.batches {
        for &seed in &cfg.seeds {
            dirs.push(root.join(format!("batch{batch}")).join(format!("seed{seed}")));
            settings.push((batch, seed));
        }
    }
    let dataset = preflight(cfg, &dirs, force)?;
    let eval_env = build_env(cfg, cfg.env.max_steps)?;

    let jobs: Vec<Box<dyn FnOnce() -> Result<SeedRun> + Send>> = settings
        .iter()
        .zip(&dirs)
        .map(|(&(batch, seed), dir)| {
            let (dataset, eval_env, dir) = (&dataset, &eval_env, dir.clone());
            let mut sub = cfg.clone();
            sub.learner.batch_size = batch;
            Box::new(move || run_seed(&sub, dataset, eval_env, seed, &dir)) as _
        })
        .collect();
    let runs = run_workers(jobs)?;

    let flag_above =
        HIGH_VARIANCE_FRACTION * (cfg.learner.tau_clip_hi - cfg.learner.tau_clip_lo);
    let mut csv = String::from("batch,seed,tau_window_std,return,success,high_variance\n");
    for ((batch, seed), r) in settings.iter().zip(&runs) {
        let std = windowed_tau_std(&r.metrics, cfg.sweep.window);
        csv.push_str(&format!(
            "{batch},{seed},{std},{},{},{}\n",
            r.final_return,
            r.final_success,
            std > flag_above
        ));
    }
    let out = root.join("ablate_batch.csv");
    fs::write(&out, csv)?;
    Ok(format!("ablated {} settings; report at {}", settings.len(), out.display()))
}

/// Renders seed-aggregated charts of the given metrics files into one SVG.
pub fn cmd_plot(cfg: &RunConfig, files: &[PathBuf], out: &Path) -> Result<String> {
    ensure!(!files.is_empty(), "plot needs at least one metrics file");
    let svg = plot::render(files, cfg.plot_band)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(out, svg)?;
    Ok(format!("wrote {}", out.display()))
}

/// Runs the full verification suite with pinned seeds, printing one JSON
/// object per check. Returns false when any check fails (or when a fault
/// was injected to confirm failures are detected).
pub fn cmd_verify(inject_fault: bool, mut sink: impl std::io::Write) -> Result<bool> {
    let reports = verify_suite_with_fault(0, inject_fault)?;
    let mut all_pass = true;
    for r in &reports {
        writeln!(sink, "{}", r.to_json_line())?;
        all_pass &= r.pass;
    }
    Ok(all_pass)
}
