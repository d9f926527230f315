use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use depth_inject::config::{help_text, RunConfig};
use depth_inject::dataset::{generate, workers_from_env, write_dataset};
use depth_inject::error::{Error, Result};
use depth_inject::gradsuite::{self, SuiteConfig};
use depth_inject::harness::{self, Split};
use depth_inject::ply::write_ply;
use depth_inject_core::geometry::{backproject, merge_views, PointCloud};
use depth_inject_core::pipeline::sampled_cloud;
use depth_inject_core::rng::mix_seed;

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "depth-inject", version, about = "Diffusion action policy with gated 3D feature injection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct ConfigArgs {
    /// TOML configuration file; missing keys take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=500` (repeatable)
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Eval => Split::Eval,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Stage {
    /// All views back-projected and merged, tagged with their view
    Merged,
    /// After outlier removal, normalization and sampling
    Sampled,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train and eval dataset directories under OUT
    #[command(after_long_help = help_text())]
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one policy; writes metrics, checkpoint and config under OUT
    #[command(after_long_help = help_text())]
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the eval split and print a JSON report
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override keys of the configuration stored in the checkpoint
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
        /// Also write the report to this file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full model and each ablation variant under OUT
    #[command(after_long_help = help_text())]
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the point cloud of one sample as ASCII PLY
    #[command(after_long_help = help_text())]
    ExportCloud {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        #[arg(long, value_enum, default_value_t = Stage::Merged)]
        stage: Stage,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients
    GradCheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only run cases whose name contains this text
        #[arg(long)]
        filter: Option<String>,
    },
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let workers = workers_from_env()?;
    let bench = cfg.benchmark();
    for (name, split) in [("train", Split::Train), ("eval", Split::Eval)] {
        let (n, seed) = (split.size(cfg), split.seed(cfg));
        let samples = generate(&bench, n, seed, workers)?;
        write_dataset(&out.join(name), &bench, seed, &samples)?;
        println!("{name}: {n} samples in {}", out.join(name).display());
    }
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = harness::load_data(cfg, workers_from_env()?)?;
    let run = harness::train(cfg, &data, Some(out))?;
    let last = run.records.last().expect("at least one record");
    println!(
        "step {} loss_main {:.6} eval_mse {:.6} eval_depth_mse {:.6} depth_floor {:.6}",
        last.step, last.loss_main, last.eval_mse, last.eval_depth_mse, run.final_eval.depth_floor
    );
    Ok(())
}

fn eval(checkpoint: &Path, overrides: &[String], out: Option<&Path>) -> Result<()> {
    let ckpt = depth_inject::checkpoint::Checkpoint::load(checkpoint)?;
    let stored = RunConfig::from_toml_str(&ckpt.metadata)?;
    let cfg = stored.layered(None, overrides)?;
    let (policy, mut store) = harness::build(&cfg)?;
    ckpt.restore_into(&mut store)?;
    let eval_raw = harness::raw_split(&cfg, Split::Eval, cfg.data.eval_size, workers_from_env()?)?;
    let eval = harness::prepare_all(&cfg, &eval_raw, Split::Eval.seed(&cfg))?;
    let report = harness::evaluate(&cfg, &policy, &store, &eval)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(path) = out {
        write_text(path, &(json.clone() + "\n"))?;
    }
    println!(
        "{{\"samples\":{},\"mse\":{},\"depth_mse\":{},\"depth_floor\":{}}}",
        report.samples, report.mse, report.depth_mse, report.depth_floor
    );
    Ok(())
}

fn export_cloud(cfg: &RunConfig, index: usize, split: Split, stage: Stage, out: &Path) -> Result<()> {
    let samples = harness::raw_split(cfg, split, index + 1, 1)?;
    let seed = split.seed(cfg);
    let sample = &samples[index];
    let bench = cfg.benchmark();
    let ex = harness::extrinsics(&bench);
    let cloud: PointCloud = match stage {
        Stage::Merged => {
            let views: Vec<PointCloud> = sample.depth_views.iter().map(backproject).collect();
            merge_views(&views, Some(&ex))?
        }
        Stage::Sampled => sampled_cloud(
            &sample.depth_views,
            Some(&ex),
            &cfg.cloud(),
            mix_seed(seed, index as u64),
        )?,
    };
    write_ply(out, &cloud)?;
    println!("{} points written to {}", cloud.len(), out.display());
    Ok(())
}

fn grad_check(cfg: &SuiteConfig, filter: Option<&str>) -> Result<bool> {
    let results = gradsuite::run(cfg, filter)?;
    if results.is_empty() {
        return Err(Error::config(format!("no gradient case matches `{}`", filter.unwrap_or(""))));
    }
    let mut all = true;
    for r in &results {
        println!(
            "{:<24} {:>3} instances  max_rel_err {:.3e}  {}",
            r.name,
            r.instances,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        );
        all &= r.passed;
    }
    Ok(all)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, out } => gen_data(&cfg.load()?, &out),
        Command::Train { cfg, out } => train(&cfg.load()?, &out),
        Command::Eval {
            checkpoint,
            overrides,
            out,
        } => eval(&checkpoint, &overrides, out.as_deref()),
        Command::Ablate { cfg, out } => {
            let rows = harness::ablate(&cfg.load()?, workers_from_env()?, &out)?;
            print!("{}", harness::ablation_table(&rows));
            Ok(())
        }
        Command::ExportCloud {
            cfg,
            index,
            split,
            stage,
            out,
        } => export_cloud(&cfg.load()?, index, split.into(), stage, &out),
        Command::GradCheck {
            instances,
            step,
            tol,
            seed,
            filter,
        } => {
            if instances == 0 {
                return Err(Error::config("--instances must be ≥ 1"));
            }
            let cfg = SuiteConfig {
                instances,
                step,
                tol,
                seed,
            };
            if grad_check(&cfg, filter.as_deref())? {
                Ok(())
            } else {
                Err(Error::Core(depth_inject_core::Error::NumericInstability(
                    "gradient check exceeded tolerance".into(),
                )))
            }
        }
    }
}

fn report(kind: &str, code: u8, message: &str) -> ExitCode {
    let message = serde_json::to_string(message.lines().collect::<Vec<_>>().join(" ").trim()).expect("string serializes");
    eprintln!("error kind={kind} code={code} message={message}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid usage");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            return report("usage", 1, first);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e.kind(), e.exit_code() as u8, &e.to_string()),
    }
}
