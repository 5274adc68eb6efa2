use projiql_core::datasets::{DataKind, OfflineDataset};
use projiql_core::envs::{rollout, stitch_waypoints, EnvKind, MazeLayout, PointMazeEnv, STITCH_MAZE};
use projiql_core::learner::{train, LearnerConfig, Mode};
use std::time::Instant;

fn spearman(xs: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let steps: Vec<f64> = (0..xs.len()).map(|i| i as f64).collect();
    let ra = rank(&steps);
    let rb = rank(xs);
    let ma = ra.iter().sum::<f64>() / ra.len() as f64;
    let mb = rb.iter().sum::<f64>() / rb.len() as f64;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (a, b) in ra.iter().zip(&rb) {
        cov += (a - ma) * (b - mb);
        va += (a - ma) * (a - ma);
        vb += (b - mb) * (b - mb);
    }
    cov / (va * vb).sqrt()
}

#[test]
#[ignore]
fn desk_scale_step_rate() {
    let layout = MazeLayout::parse(STITCH_MAZE).unwrap();
    let data_env = PointMazeEnv::new(layout.clone(), 0.5, 0.6, 25, 0.2).unwrap();
    let env = PointMazeEnv::new(layout, 0.5, 0.6, 120, 0.2).unwrap();
    let spec = stitch_waypoints(0.22);
    let kind = EnvKind::Point(env.clone());
    let trajs = rollout(&EnvKind::Point(data_env), &spec, 500, 7).unwrap();
    let succ = trajs
        .iter()
        .filter(|t| match t {
            projiql_core::envs::Trajectory::Point(steps) => steps.iter().any(|s| s.done),
            _ => false,
        })
        .count();
    println!("behavior success: {} / {}", succ, trajs.len());
    let ds = OfflineDataset::from_trajectories(
        DataKind::Continuous { state_dim: 2, action_dim: 2 },
        &trajs,
    )
    .unwrap();
    println!("transitions: {}", ds.len());

    let window = 1000usize;
    let mut mean_curve: Vec<f64> = Vec::new();
    for seed in [0u64, 1, 2] {
        let mut cfg = LearnerConfig::desk_default(Mode::ProjIql);
        cfg.seed = seed;
        cfg.eval_every = 2000;
        let t0 = Instant::now();
        let state = train(&cfg, &ds, Some(&kind)).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        let successes: Vec<f64> =
            state.metrics.iter().filter_map(|r| r.eval_success).collect();
        let svec: Vec<String> = successes.iter().map(|s| format!("{s:.1}")).collect();
        println!("seed {seed} success curve [{}]", svec.join(" "));
        for rs in [99u64, 100, 101] {
            use projiql_core::seeding;
            let mut rng = seeding::stream(&[rs]);
            let mut pos = env.reset(&mut rng);
            let mut out = String::new();
            let mut done_at = None;
            for t in 0..120 {
                let a = match state.policy.deterministic_action(&pos) {
                    projiql_core::policies::ActionSample::Continuous(v) => v,
                    _ => unreachable!(),
                };
                let (next, _r, done) = env.step(pos, [a[0], a[1]]);
                pos = next;
                if t % 20 == 0 {
                    out.push_str(&format!(" t{t}=({:.2},{:.2})", pos[0], pos[1]));
                }
                if done {
                    done_at = Some(t);
                    break;
                }
            }
            match done_at {
                Some(t) => println!("  rollout {rs}: goal at t={t}"),
                None => println!("  rollout {rs}: TIMEOUT{out}"),
            }
        }
        let n_full = successes.iter().filter(|&&s| s >= 0.995).count();
        let final_s = successes.last().copied().unwrap_or(-1.0);
        let taus: Vec<f64> = state.metrics.iter().map(|r| r.tau).collect();
        let windows: Vec<f64> = taus
            .chunks(window)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        if mean_curve.is_empty() {
            mean_curve = vec![0.0; windows.len()];
        }
        for (m, w) in mean_curve.iter_mut().zip(&windows) {
            *m += w / 3.0;
        }
        let line: Vec<String> = windows.iter().map(|w| format!("{w:.4}")).collect();
        println!(
            "seed {seed}: {dt:.0}s  spearman {:+.4}  success(final {final_s:.2}, full {n_full}/{})  windows [{}]",
            spearman(&windows),
            successes.len(),
            line.join(" ")
        );
    }
    let line: Vec<String> = mean_curve.iter().map(|w| format!("{w:.4}")).collect();
    println!("seed-mean windows [{}]", line.join(" "));
    println!("seed-mean spearman {:+.4}", spearman(&mean_curve));
}
