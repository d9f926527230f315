//! Training, evaluation and ablation runs driven by a [`RunConfig`].

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use depth_inject_core::benchmark::{BenchmarkConfig, TrajectorySample, DEPTH_COORD};
use depth_inject_core::geometry::Rigid;
use depth_inject_core::pipeline::{prepare, PreparedSample};
use depth_inject_core::policy::{evaluate_losses, predict, train_step, Policy, TrainBatch};
use depth_inject_core::rng::rng_for;
use depth_inject_core::{Adam, ParamStore, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{check_compatible, generate, read_dataset};
use crate::error::{Error, Result};
use crate::metrics::{MetricsRecord, MetricsWriter};

/// RNG stream for minibatch selection, timesteps and training noise.
const BATCH_STREAM: u64 = 10;
/// RNG stream for the fixed probe batch.
const PROBE_STREAM: u64 = 11;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone)]
pub struct Data {
    pub train: Vec<PreparedSample>,
    pub eval: Vec<PreparedSample>,
}

/// Camera-to-world transforms of the configured views.
pub fn extrinsics(cfg: &BenchmarkConfig) -> Vec<Rigid> {
    cfg.view_offsets.iter().map(|&o| Rigid::translation([o, 0.0, 0.0])).collect()
}

pub fn prepare_all(cfg: &RunConfig, samples: &[TrajectorySample], seed: u64) -> Result<Vec<PreparedSample>> {
    let ex = extrinsics(&cfg.benchmark());
    let cloud = cfg.cloud();
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| Ok(prepare(s, Some(&ex), &cloud, cfg.model.patch, seed, i)?))
        .collect()
}

fn stored_split(cfg: &RunConfig, dir: &Path, want: usize) -> Result<Vec<TrajectorySample>> {
    let (meta, mut samples) = read_dataset(dir)?;
    check_compatible(&meta, &cfg.benchmark())?;
    if samples.len() < want {
        return Err(Error::config(format!(
            "{} holds {} samples, configuration needs {want}",
            dir.display(),
            samples.len()
        )));
    }
    samples.truncate(want);
    Ok(samples)
}

/// Which half of the data a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    /// Dataset seed of the split; also seeds its random point sampler.
    pub fn seed(self, cfg: &RunConfig) -> u64 {
        match self {
            Split::Train => cfg.data.data_seed,
            Split::Eval => cfg.data.data_seed.wrapping_add(1),
        }
    }

    pub fn size(self, cfg: &RunConfig) -> usize {
        match self {
            Split::Train => cfg.data.train_size,
            Split::Eval => cfg.data.eval_size,
        }
    }

    fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// The first `n` raw samples of a split, from `data.dataset_dir` when set
/// and generated in memory otherwise.
pub fn raw_split(cfg: &RunConfig, split: Split, n: usize, workers: usize) -> Result<Vec<TrajectorySample>> {
    if cfg.data.dataset_dir.is_empty() {
        generate(&cfg.benchmark(), n, split.seed(cfg), workers)
    } else {
        stored_split(cfg, &PathBuf::from(&cfg.data.dataset_dir).join(split.dir_name()), n)
    }
}

pub fn raw_data(cfg: &RunConfig, workers: usize) -> Result<(Vec<TrajectorySample>, Vec<TrajectorySample>)> {
    Ok((
        raw_split(cfg, Split::Train, cfg.data.train_size, workers)?,
        raw_split(cfg, Split::Eval, cfg.data.eval_size, workers)?,
    ))
}

pub fn load_data(cfg: &RunConfig, workers: usize) -> Result<Data> {
    let (train, eval) = raw_data(cfg, workers)?;
    Ok(Data {
        train: prepare_all(cfg, &train, Split::Train.seed(cfg))?,
        eval: prepare_all(cfg, &eval, Split::Eval.seed(cfg))?,
    })
}

/// Builds the policy for `cfg` and sets every gate to `alpha_init`.
pub fn build(cfg: &RunConfig) -> Result<(Policy, ParamStore)> {
    let (policy, mut store) = Policy::build(&cfg.policy()?, cfg.run.seed)?;
    for &id in &policy.injection.alpha {
        *store.get_mut(id) = Tensor::scalar(cfg.assistant.alpha_init);
    }
    Ok((policy, store))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub mse: f64,
    pub depth_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub mse: f64,
    pub depth_mse: f64,
    /// Lowest depth error reachable without depth information.
    pub depth_floor: f64,
    pub per_sample: Vec<SampleError>,
}

fn check_dims(policy: &Policy, samples: &[PreparedSample]) -> Result<()> {
    let e = &policy.config.expert;
    let patches = [e.n_patches(), e.patch * e.patch];
    for (i, s) in samples.iter().enumerate() {
        let ok = s.patches.shape() == patches
            && s.state.shape() == [1, e.state_dim]
            && s.action.shape() == [e.horizon, e.action_dim]
            && s.cloud.rank() == 2
            && s.cloud.shape()[1] == 3;
        if !ok {
            return Err(Error::config(format!(
                "sample {i} does not match the model: patches {:?}, state {:?}, action {:?}, cloud {:?}",
                s.patches.shape(),
                s.state.shape(),
                s.action.shape(),
                s.cloud.shape()
            )));
        }
    }
    Ok(())
}

/// Samples an action chunk for every element of `data` and scores it
/// against the demonstration.
pub fn evaluate(cfg: &RunConfig, policy: &Policy, store: &ParamStore, data: &[PreparedSample]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::config("evaluation split is empty"));
    }
    check_dims(policy, data)?;
    let preds = predict(store, policy, data, cfg.train.eval_seed, cfg.train.eval_batch)?;
    let mut per_sample = Vec::with_capacity(data.len());
    for (p, s) in preds.iter().zip(data) {
        let (h, d) = (s.action.shape()[0], s.action.shape()[1]);
        let (mut all, mut depth) = (0.0, 0.0);
        for r in 0..h {
            for c in 0..d {
                let e = p.at(r, c) - s.action.at(r, c);
                all += e * e;
                if c == DEPTH_COORD {
                    depth += e * e;
                }
            }
        }
        per_sample.push(SampleError {
            mse: all / (h * d) as f64,
            depth_mse: depth / h as f64,
        });
    }
    let n = per_sample.len() as f64;
    Ok(EvalReport {
        samples: per_sample.len(),
        mse: per_sample.iter().map(|e| e.mse).sum::<f64>() / n,
        depth_mse: per_sample.iter().map(|e| e.depth_mse).sum::<f64>() / n,
        depth_floor: cfg.benchmark().depth_information_floor(),
        per_sample,
    })
}

fn probe_batch(cfg: &RunConfig, data: &Data) -> Result<TrainBatch> {
    let n = cfg.train.probe_size.min(data.train.len());
    let refs: Vec<&PreparedSample> = data.train[..n].iter().collect();
    let mut rng = rng_for(cfg.run.seed, PROBE_STREAM);
    Ok(TrainBatch::draw(&refs, cfg.model.diffusion_steps, &mut rng)?)
}

#[derive(Debug)]
pub struct RunOutput {
    pub policy: Policy,
    pub store: ParamStore,
    pub records: Vec<MetricsRecord>,
    pub final_eval: EvalReport,
}

struct Outputs {
    dir: PathBuf,
    metrics: MetricsWriter,
}

fn record(
    cfg: &RunConfig,
    policy: &Policy,
    store: &ParamStore,
    data: &Data,
    probe: &TrainBatch,
    step: usize,
) -> Result<(MetricsRecord, EvalReport)> {
    let losses = evaluate_losses(store, policy, probe)?;
    let eval = evaluate(cfg, policy, store, &data.eval)?;
    let assistant_runs = policy.config.inject || policy.config.lambda > 0.0;
    Ok((
        MetricsRecord {
            step,
            loss_main: losses.main,
            loss_aux: assistant_runs.then_some(losses.aux),
            eval_mse: eval.mse,
            eval_depth_mse: eval.depth_mse,
            alpha: policy.alphas(store),
            failed: false,
        },
        eval,
    ))
}

/// Trains from scratch. With `out_dir`, writes the metrics streams, the
/// configuration and a checkpoint at every evaluation; on a non-finite
/// loss the last checkpoint is kept and a final record marked `failed`
/// is appended before returning [`Error::NanAbort`].
pub fn train(cfg: &RunConfig, data: &Data, out_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    check_dims(&build(cfg)?.0, &data.train)?;
    let (policy, mut store) = build(cfg)?;
    let mut adam = Adam::new(cfg.adam(), &store);
    let probe = probe_batch(cfg, data)?;
    let mut rng = rng_for(cfg.run.seed, BATCH_STREAM);
    let start = Instant::now();

    let mut outputs = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let config_path = dir.join(CONFIG_FILE);
            fs::write(&config_path, cfg.to_toml_string()).map_err(|e| Error::io(&config_path, e))?;
            Some(Outputs {
                dir: dir.to_path_buf(),
                metrics: MetricsWriter::create(&dir.join(METRICS_FILE))?,
            })
        }
        None => None,
    };
    let metadata = cfg.to_toml_string();
    let mut records = Vec::new();
    let mut emit = |records: &mut Vec<MetricsRecord>, r: MetricsRecord, store: &ParamStore| -> Result<()> {
        if let Some(o) = outputs.as_mut() {
            o.metrics.append(&r, start.elapsed().as_secs_f64())?;
            if !r.failed {
                Checkpoint::from_store(metadata.clone(), store).save(&o.dir.join(CHECKPOINT_FILE))?;
            }
        }
        records.push(r);
        Ok(())
    };

    let (first, mut last_eval) = record(cfg, &policy, &store, data, &probe, 0)?;
    emit(&mut records, first, &store)?;
    let n = data.train.len();
    let k = cfg.model.diffusion_steps;
    for step in 1..=cfg.train.steps {
        let refs: Vec<&PreparedSample> = (0..cfg.train.batch_size)
            .map(|_| &data.train[rng.random_range(0..n)])
            .collect();
        let batch = TrainBatch::draw(&refs, k, &mut rng)?;
        match train_step(&mut store, &mut adam, &policy, &batch) {
            Ok(_) => {}
            Err(depth_inject_core::Error::NumericInstability(reason)) => {
                let mut failed = records.last().cloned().expect("step 0 is recorded");
                failed.step = step;
                failed.failed = true;
                failed.alpha = policy.alphas(&store);
                emit(&mut records, failed, &store)?;
                return Err(Error::NanAbort { step, reason });
            }
            Err(e) => return Err(e.into()),
        }
        let due = cfg.train.eval_every > 0 && step % cfg.train.eval_every == 0;
        if due || step == cfg.train.steps {
            let (r, eval) = record(cfg, &policy, &store, data, &probe, step)?;
            last_eval = eval;
            emit(&mut records, r, &store)?;
        }
    }
    Ok(RunOutput {
        policy,
        store,
        records,
        final_eval: last_eval,
    })
}

/// Reads a checkpoint and rebuilds the policy it was saved from.
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, Policy, ParamStore)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = RunConfig::from_toml_str(&ckpt.metadata)?;
    let (policy, mut store) = build(&cfg)?;
    ckpt.restore_into(&mut store)?;
    Ok((cfg, policy, store))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub step: usize,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub eval_mse: f64,
    pub eval_depth_mse: f64,
    pub depth_floor: f64,
    pub alpha_trajectory: Vec<AlphaPoint>,
}

/// The configuration variants compared by [`ablate`].
pub fn ablation_variants(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let mut full = base.clone();
    full.ablation.no_injection = false;
    full.ablation.no_aux_loss = false;
    full.ablation.random_sampler = false;
    let mut no_injection = full.clone();
    no_injection.ablation.no_injection = true;
    let mut no_aux_loss = full.clone();
    no_aux_loss.ablation.no_aux_loss = true;
    let mut random_sampler = full.clone();
    random_sampler.ablation.random_sampler = true;
    vec![
        ("full", full),
        ("no_injection", no_injection),
        ("no_aux_loss", no_aux_loss),
        ("random_sampler", random_sampler),
    ]
}

/// Trains every variant on the same data, each into `<out_dir>/<variant>`.
pub fn ablate(base: &RunConfig, workers: usize, out_dir: &Path) -> Result<Vec<AblationRow>> {
    let (train_raw, eval_raw) = raw_data(base, workers)?;
    let mut rows = Vec::new();
    for (name, cfg) in ablation_variants(base) {
        cfg.validate()?;
        let data = Data {
            train: prepare_all(&cfg, &train_raw, Split::Train.seed(&cfg))?,
            eval: prepare_all(&cfg, &eval_raw, Split::Eval.seed(&cfg))?,
        };
        let run = train(&cfg, &data, Some(&out_dir.join(name)))?;
        rows.push(AblationRow {
            variant: name.to_string(),
            eval_mse: run.final_eval.mse,
            eval_depth_mse: run.final_eval.depth_mse,
            depth_floor: run.final_eval.depth_floor,
            alpha_trajectory: run
                .records
                .iter()
                .map(|r| AlphaPoint {
                    step: r.step,
                    alpha: r.alpha.clone(),
                })
                .collect(),
        });
    }
    let path = out_dir.join("ablation.json");
    let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Plain-text table of ablation results.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<16} {:>12} {:>14} {:>12}\n", "variant", "eval_mse", "depth_mse", "mean_alpha");
    for r in rows {
        let alpha = r.alpha_trajectory.last().map_or(0.0, |p| {
            if p.alpha.is_empty() {
                0.0
            } else {
                p.alpha.iter().sum::<f64>() / p.alpha.len() as f64
            }
        });
        s.push_str(&format!(
            "{:<16} {:>12.6} {:>14.6} {:>12.6}\n",
            r.variant, r.eval_mse, r.eval_depth_mse, alpha
        ));
    }
    if let Some(r) = rows.first() {
        s.push_str(&format!("depth floor without depth information: {:.6}\n", r.depth_floor));
    }
    s
}
