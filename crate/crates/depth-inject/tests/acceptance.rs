//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero when any criterion fails. Numeric arguments after
//! `--` restrict the run to those criteria.

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use depth_inject::config::RunConfig;
use depth_inject::depth_file::{load_depth_file, save_depth_file};
use depth_inject::gradsuite::{self, SuiteConfig};
use depth_inject::harness::{self, Data};
use depth_inject::ply::{read_ply, write_ply};
use depth_inject_core::benchmark::{make_sample, BenchmarkConfig};
use depth_inject_core::expert::{sample_actions, NoInjection};
use depth_inject_core::geometry::{backproject, dist2, project, sample_fps, Point, PointCloud};
use depth_inject_core::pipeline::{sampled_cloud, CloudConfig, PreparedSample};
use depth_inject_core::policy::{observation, AssistantInjection, ParamCounts, Policy};
use depth_inject_core::rng::rng_for;
use depth_inject_core::scene::{CameraIntrinsics, DepthMap};
use depth_inject_core::{ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Outcome = Result<String, String>;

const MODES: [&str; 2] = ["projection", "cross_attention"];

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    format!("error: {e}")
}

fn with_mode(base: &RunConfig, mode: &str) -> RunConfig {
    let mut cfg = base.clone();
    cfg.assistant.mode = mode.to_string();
    cfg
}

/// A default-sized policy whose non-gate weights are shifted away from
/// their initial values, with every gate set to `alpha`.
fn perturbed_policy(cfg: &RunConfig, alpha: f64) -> Result<(Policy, ParamStore), String> {
    let (policy, mut store) = harness::build(cfg).map_err(fail)?;
    let mut rng = rng_for(1234, 0);
    for id in store.ids().collect::<Vec<_>>() {
        if policy.injection.alpha.contains(&id) {
            *store.get_mut(id) = Tensor::scalar(alpha);
        } else {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
    }
    Ok((policy, store))
}

fn small_data(cfg: &RunConfig) -> Result<Data, String> {
    harness::load_data(cfg, 1).map_err(fail)
}

fn gate_zero(base: &RunConfig) -> Outcome {
    let mut cfg = base.clone();
    cfg.data.train_size = 1;
    cfg.data.eval_size = 8;
    let data = small_data(&cfg)?;
    let refs: Vec<&PreparedSample> = data.eval.iter().collect();
    let (obs, clouds) = observation(&refs).map_err(fail)?;
    let seeds: Vec<u64> = (0..refs.len() as u64).collect();
    let mut worst = 0.0_f64;
    for mode in MODES {
        let cfg = with_mode(&cfg, mode);
        let (policy, store) = perturbed_policy(&cfg, 0.0)?;
        let (expert, mut alone) = Policy::build_expert_only(&policy.config.expert, cfg.run.seed).map_err(fail)?;
        let names: Vec<String> = alone.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let id = alone.id_of(&name).expect("own name");
            *alone.get_mut(id) = store.get(store.id_of(&name).expect("shared name")).clone();
        }
        let provider = AssistantInjection {
            policy: &policy,
            clouds: &clouds,
            state: &obs.state,
            eps_aux_override: None,
        };
        let a = sample_actions(&store, &policy.expert, &obs, &provider, &seeds).map_err(fail)?;
        let b = sample_actions(&alone, &expert, &obs, &NoInjection, &seeds).map_err(fail)?;
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    check(worst <= 1e-12, format!("max |injected - expert_only| = {worst:e} over both modes"))
}

fn gradients() -> Outcome {
    let cfg = SuiteConfig::default();
    let start = Instant::now();
    let results = gradsuite::run(&cfg, None).map_err(fail)?;
    let elapsed = start.elapsed();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    let min_instances = results.iter().map(|r| r.instances).min().unwrap_or(0);
    check(
        failed.is_empty() && min_instances >= 20 && cfg.step == 1e-5 && cfg.tol <= 1e-4 && elapsed < Duration::from_secs(120),
        format!(
            "{} cases, >= {min_instances} instances each, worst relative error {worst:.2e}, {:.1} s, failing {failed:?}",
            results.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn fps_oracle(points: &[Point], m: usize) -> Vec<usize> {
    let mut selected = vec![0];
    while selected.len() < m {
        let (mut best, mut best_d) = (0, f64::NEG_INFINITY);
        for i in 0..points.len() {
            if selected.contains(&i) {
                continue;
            }
            let d = selected.iter().map(|&s| dist2(&points[i], &points[s])).fold(f64::INFINITY, f64::min);
            if d > best_d {
                (best, best_d) = (i, d);
            }
        }
        selected.push(best);
    }
    selected
}

fn geometry(base: &RunConfig) -> Outcome {
    let mut rng = rng_for(77, 0);
    let cam = CameraIntrinsics::new(91.0, 87.0, 49.5, 50.25, 100, 100).map_err(fail)?;
    let values: Vec<Option<f64>> = (0..10_000).map(|_| Some(rng.random_range(0.1..9.5))).collect();
    let depth = DepthMap::from_options(cam, 10.0, &values).map_err(fail)?;
    let mut round_trip = 0.0_f64;
    for (i, p) in backproject(&depth).points.iter().enumerate() {
        let (u, v, z) = project(p, &cam);
        round_trip = round_trip
            .max((u - (i % 100) as f64).abs())
            .max((v - (i / 100) as f64).abs())
            .max((z - values[i].unwrap_or(f64::NAN)).abs());
    }

    let mut fps_mismatch = 0;
    for _ in 0..100 {
        let n = rng.random_range(64..200);
        let m = rng.random_range(1..=64);
        let cloud = PointCloud::new(
            (0..n)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect(),
        );
        let (_, idx) = sample_fps(&cloud, m, 0).map_err(fail)?;
        if idx != fps_oracle(&cloud.points, m) {
            fps_mismatch += 1;
        }
    }

    let (policy, store) = harness::build(base).map_err(fail)?;
    let n = 64;
    let pts: Vec<Point> = (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let tensor = |order: &[usize]| Tensor::new(&[n, 3], order.iter().flat_map(|&i| pts[i]).collect());
    let mut order: Vec<usize> = (0..n).collect();
    let (_, reference) = policy.pointnet.encode_values(&store, &tensor(&order).map_err(fail)?).map_err(fail)?;
    let mut pointnet_diff = 0.0_f64;
    for _ in 0..100 {
        order.shuffle(&mut rng);
        let (_, g) = policy.pointnet.encode_values(&store, &tensor(&order).map_err(fail)?).map_err(fail)?;
        for (a, b) in g.data().iter().zip(reference.data()) {
            pointnet_diff = pointnet_diff.max((a - b).abs());
        }
    }
    check(
        round_trip <= 1e-9 && fps_mismatch == 0 && pointnet_diff == 0.0,
        format!(
            "round trip {round_trip:.2e} on 10000 pixels, FPS mismatches {fps_mismatch}/100, PointNet max diff {pointnet_diff:e} over 100 permutations"
        ),
    )
}

struct TimedRun {
    depth_mse: f64,
    seconds: f64,
}

fn timed_train(cfg: &RunConfig, data: &Data) -> Result<TimedRun, String> {
    let start = Instant::now();
    let run = harness::train(cfg, data, None).map_err(fail)?;
    Ok(TimedRun {
        depth_mse: run.final_eval.depth_mse,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn ablation(base: &RunConfig) -> Outcome {
    let data = small_data(base)?;
    let floor = base.benchmark().depth_information_floor();
    let limit = 15.0 * 60.0;
    let mut baseline_cfg = base.clone();
    baseline_cfg.ablation.no_injection = true;
    baseline_cfg.ablation.no_aux_loss = true;
    let baseline = timed_train(&baseline_cfg, &data)?;
    let mut ok = baseline.depth_mse >= 0.9 * floor && baseline.seconds <= limit;
    let mut detail = format!(
        "floor {floor:.4}; baseline depth MSE {:.4} ({:.0} s)",
        baseline.depth_mse, baseline.seconds
    );
    for mode in MODES {
        let full = timed_train(&with_mode(base, mode), &data)?;
        ok &= full.depth_mse <= 0.5 * baseline.depth_mse && full.seconds <= limit;
        detail.push_str(&format!("; {mode} {:.4} ({:.0} s)", full.depth_mse, full.seconds));
    }
    check(ok, detail)
}

fn parameter_ratio(base: &RunConfig) -> Outcome {
    let mut ratios = Vec::new();
    for mode in MODES {
        let (_, store) = harness::build(&with_mode(base, mode)).map_err(fail)?;
        ratios.push(ParamCounts::of(&store).ratio());
    }
    check(
        ratios.iter().all(|&r| r <= 0.25),
        format!("(assistant + injection) / expert = {:.4} projection, {:.4} cross_attention", ratios[0], ratios[1]),
    )
}

fn determinism(base: &RunConfig) -> Outcome {
    let mut cfg = base.clone();
    cfg.data.train_size = 64;
    cfg.data.eval_size = 16;
    cfg.train.steps = 40;
    cfg.train.eval_every = 20;
    cfg.train.probe_size = 16;
    let data = small_data(&cfg)?;
    let dir = tempfile::tempdir().map_err(fail)?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let run = harness::train(&cfg, &data, Some(&a)).map_err(fail)?;
    harness::train(&cfg, &data, Some(&b)).map_err(fail)?;
    let read = |p: std::path::PathBuf| fs::read(p).map_err(fail);
    let metrics_equal = read(a.join(harness::METRICS_FILE))? == read(b.join(harness::METRICS_FILE))?;
    let ckpt_equal = read(a.join(harness::CHECKPOINT_FILE))? == read(b.join(harness::CHECKPOINT_FILE))?;

    let (loaded_cfg, policy, store) = harness::load_checkpoint(&a.join(harness::CHECKPOINT_FILE)).map_err(fail)?;
    let reloaded = harness::evaluate(&loaded_cfg, &policy, &store, &data.eval).map_err(fail)?;
    let memory = harness::evaluate(&cfg, &run.policy, &run.store, &data.eval).map_err(fail)?;
    let eval_equal = reloaded.mse.to_bits() == memory.mse.to_bits()
        && reloaded.depth_mse.to_bits() == memory.depth_mse.to_bits()
        && reloaded
            .per_sample
            .iter()
            .zip(&memory.per_sample)
            .all(|(x, y)| x.mse.to_bits() == y.mse.to_bits() && x.depth_mse.to_bits() == y.depth_mse.to_bits());

    let bench = BenchmarkConfig {
        view_offsets: vec![0.0, 0.15],
        ..cfg.benchmark()
    };
    let sample = make_sample(&bench, 5, 3).map_err(fail)?;
    let mut depth_equal = true;
    for (v, d) in sample.depth_views.iter().enumerate() {
        let path = dir.path().join(format!("view{v}.pfm"));
        save_depth_file(&path, d).map_err(fail)?;
        let back = load_depth_file(&path).map_err(fail)?;
        depth_equal &= back.intrinsics() == d.intrinsics()
            && back.far_clip().to_bits() == d.far_clip().to_bits()
            && back.values().iter().zip(d.values()).all(|(x, y)| x.map(f64::to_bits) == y.map(f64::to_bits));
    }
    let ex = harness::extrinsics(&bench);
    let cloud = sampled_cloud(&sample.depth_views, Some(&ex), &CloudConfig::default(), 0).map_err(fail)?;
    let ply = dir.path().join("cloud.ply");
    write_ply(&ply, &cloud).map_err(fail)?;
    let back = read_ply(&ply).map_err(fail)?;
    let ply_equal = back.points.len() == cloud.points.len()
        && back
            .points
            .iter()
            .zip(&cloud.points)
            .all(|(p, q)| p.iter().zip(q).all(|(x, y)| x.to_bits() == y.to_bits()));

    check(
        metrics_equal && ckpt_equal && eval_equal && depth_equal && ply_equal,
        format!(
            "metrics identical {metrics_equal}, checkpoints identical {ckpt_equal}, reload evaluation identical {eval_equal}, depth round trip {depth_equal}, PLY round trip {ply_equal}"
        ),
    )
}

fn provenance(base: &RunConfig) -> Outcome {
    let mut cfg = base.clone();
    cfg.data.train_size = 1;
    cfg.data.eval_size = 6;
    let data = small_data(&cfg)?;
    let refs: Vec<&PreparedSample> = data.eval.iter().collect();
    let (obs, clouds) = observation(&refs).map_err(fail)?;
    let seeds: Vec<u64> = (10..10 + refs.len() as u64).collect();
    let rows = refs.len() * cfg.model.horizon;
    let cols = cfg.model.action_dim;
    let mut rng = rng_for(4242, 0);
    let adversarial = [
        Tensor::full(&[rows, cols], f64::NAN),
        Tensor::full(&[rows, cols], -1e300),
        Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-1e6..1e6)).collect()).map_err(fail)?,
    ];
    let mut identical = true;
    for mode in MODES {
        let (policy, store) = perturbed_policy(&with_mode(&cfg, mode), 0.7)?;
        let run = |over: Option<&Tensor>| {
            let provider = AssistantInjection {
                policy: &policy,
                clouds: &clouds,
                state: &obs.state,
                eps_aux_override: over,
            };
            sample_actions(&store, &policy.expert, &obs, &provider, &seeds).map_err(fail)
        };
        let honest = run(None)?;
        for bad in &adversarial {
            let got = run(Some(bad))?;
            identical &= got.data().iter().zip(honest.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        }
    }
    check(identical, format!("actions bit-identical under 3 adversarial assistant predictions in both modes: {identical}"))
}

fn main() -> ExitCode {
    let base = RunConfig::default();
    let criteria: [(&str, &dyn Fn() -> Outcome); 7] = [
        ("gate-zero equivalence", &|| gate_zero(&base)),
        ("gradient suite", &gradients),
        ("geometry oracles", &|| geometry(&base)),
        ("ablation", &|| ablation(&base)),
        ("parameter ratio", &|| parameter_ratio(&base)),
        ("determinism", &|| determinism(&base)),
        ("provenance", &|| provenance(&base)),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut all = true;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !selected.is_empty() && !selected.contains(&(i + 1)) {
            println!("SKIP criterion {} {name}", i + 1);
            continue;
        }
        let (status, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                all = false;
                ("FAIL", d)
            }
        };
        println!("{status} criterion {} {name}: {detail}", i + 1);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
