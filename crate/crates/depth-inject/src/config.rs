//! Run configuration: TOML with fixed sections and strictly known keys.
//!
//! Values come from three layers, later ones winning: built-in defaults,
//! an optional config file, and `section.key=value` overrides. Any key
//! not in the schema is rejected by name.

use std::fmt::Write as _;
use std::path::Path;

use depth_inject_core::assistant::{AssistantConfig, InjectionMode};
use depth_inject_core::benchmark::BenchmarkConfig;
use depth_inject_core::expert::ExpertConfig;
use depth_inject_core::pipeline::{CloudConfig, Sampler};
use depth_inject_core::policy::PolicyConfig;
use depth_inject_core::scene::{CameraIntrinsics, DEFAULT_FAR_CLIP};
use depth_inject_core::AdamConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_size: usize,
    pub eval_size: usize,
    pub data_seed: u64,
    pub dataset_dir: String,
    pub image_size: usize,
    pub focal: f64,
    pub depth_alternatives: Vec<f64>,
    pub wall_depth: f64,
    pub angular_radius: f64,
    pub lateral_range: f64,
    pub view_offsets: Vec<f64>,
    pub noise_sigma_rel: f64,
    pub noise_dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudSection {
    pub filter_k: usize,
    pub filter_alpha: f64,
    pub points: usize,
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub d_main: usize,
    pub mlp_ratio: usize,
    pub horizon: usize,
    pub action_dim: usize,
    pub state_dim: usize,
    pub patch: usize,
    pub time_embed_dim: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub pointnet_dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssistantSection {
    pub mode: String,
    pub d_aux: usize,
    pub mlp_ratio: usize,
    pub k_aux: usize,
    pub d_transform: usize,
    pub lambda: f64,
    pub ratio_max: f64,
    pub alpha_init: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub eval_batch: usize,
    pub eval_seed: u64,
    pub probe_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub no_injection: bool,
    pub no_aux_loss: bool,
    pub random_sampler: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub cloud: CloudSection,
    pub model: ModelSection,
    pub assistant: AssistantSection,
    pub optim: OptimSection,
    pub train: TrainSection,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bench = BenchmarkConfig::default();
        let expert = ExpertConfig::default();
        let assistant = AssistantConfig::default();
        let policy = PolicyConfig::default();
        let cloud = CloudConfig::default();
        let adam = AdamConfig::default();
        Self {
            run: RunSection { seed: 0 },
            data: DataSection {
                train_size: 2000,
                eval_size: 500,
                data_seed: 1,
                dataset_dir: String::new(),
                image_size: bench.camera.width,
                focal: bench.camera.fx,
                depth_alternatives: bench.depth_alternatives,
                wall_depth: bench.wall_depth,
                angular_radius: bench.angular_radius,
                lateral_range: bench.lateral_range,
                view_offsets: bench.view_offsets,
                noise_sigma_rel: bench.noise_sigma_rel,
                noise_dropout: bench.noise_dropout,
            },
            cloud: CloudSection {
                filter_k: cloud.filter_k,
                filter_alpha: cloud.filter_alpha,
                points: cloud.m_prime,
                normalize: cloud.normalize,
            },
            model: ModelSection {
                layers: expert.layers,
                d_main: expert.d_main,
                mlp_ratio: expert.mlp_ratio,
                horizon: expert.horizon,
                action_dim: expert.action_dim,
                state_dim: expert.state_dim,
                patch: expert.patch,
                time_embed_dim: expert.time_embed_dim,
                diffusion_steps: expert.diffusion_steps,
                beta_start: expert.beta_start,
                beta_end: expert.beta_end,
                pointnet_dims: policy.pointnet_dims,
            },
            assistant: AssistantSection {
                mode: assistant.mode.as_str().into(),
                d_aux: assistant.d_aux,
                mlp_ratio: assistant.mlp_ratio,
                k_aux: assistant.k_aux,
                d_transform: assistant.d_transform,
                lambda: policy.lambda,
                ratio_max: policy.ratio_max,
                alpha_init: 0.0,
            },
            optim: OptimSection {
                lr: adam.lr,
                beta1: adam.beta1,
                beta2: adam.beta2,
                eps: adam.eps,
            },
            train: TrainSection {
                steps: 10_000,
                batch_size: 8,
                eval_every: 2500,
                eval_batch: 50,
                eval_seed: 7,
                probe_size: 64,
            },
            ablation: AblationSection {
                no_injection: false,
                no_aux_loss: false,
                random_sampler: false,
            },
        }
    }
}

/// One-line description of every key, used for the generated help.
fn describe(section: &str, key: &str) -> Option<&'static str> {
    Some(match (section, key) {
        ("run", "seed") => "seed for initialization, batch order and diffusion noise",
        ("data", "train_size") => "number of training samples",
        ("data", "eval_size") => "number of held-out samples",
        ("data", "data_seed") => "seed of the synthetic dataset (eval split uses data_seed + 1)",
        ("data", "dataset_dir") => "directory written by gen-data; empty = generate in memory",
        ("data", "image_size") => "square camera resolution in pixels",
        ("data", "focal") => "focal length in pixels (fx = fy)",
        ("data", "depth_alternatives") => "candidate target depths in meters",
        ("data", "wall_depth") => "depth of the back wall in meters",
        ("data", "angular_radius") => "target radius divided by target depth",
        ("data", "lateral_range") => "bound on |x/z| and |y/z| of the target ray",
        ("data", "view_offsets") => "lateral camera offset of each view in meters",
        ("data", "noise_sigma_rel") => "relative std of multiplicative depth noise",
        ("data", "noise_dropout") => "probability that a valid pixel is dropped",
        ("cloud", "filter_k") => "neighbors for statistical outlier removal",
        ("cloud", "filter_alpha") => "outlier threshold in standard deviations",
        ("cloud", "points") => "points kept by the sampler",
        ("cloud", "normalize") => "center the cloud and scale it into the unit ball",
        ("model", "layers") => "expert transformer layers",
        ("model", "d_main") => "expert width",
        ("model", "mlp_ratio") => "expert MLP hidden width / d_main",
        ("model", "horizon") => "action chunk length",
        ("model", "action_dim") => "action dimension (xyz displacement + gripper)",
        ("model", "state_dim") => "robot state dimension",
        ("model", "patch") => "image patch side in pixels",
        ("model", "time_embed_dim") => "sinusoidal timestep embedding width",
        ("model", "diffusion_steps") => "denoising steps K",
        ("model", "beta_start") => "first beta of the linear noise schedule",
        ("model", "beta_end") => "last beta of the linear noise schedule",
        ("model", "pointnet_dims") => "PointNet layer widths, starting at 3",
        ("assistant", "mode") => "injection transform: projection | cross_attention",
        ("assistant", "d_aux") => "assistant width (must be < d_main)",
        ("assistant", "mlp_ratio") => "assistant MLP hidden width / d_aux",
        ("assistant", "k_aux") => "assistant denoising horizon, 1..=K",
        ("assistant", "d_transform") => "hidden width of the injection transform",
        ("assistant", "lambda") => "weight of the auxiliary loss",
        ("assistant", "ratio_max") => "limit on (assistant + injection) / expert parameters",
        ("assistant", "alpha_init") => "initial value of every injection gate",
        ("optim", "lr") => "Adam learning rate",
        ("optim", "beta1") => "Adam first-moment decay",
        ("optim", "beta2") => "Adam second-moment decay",
        ("optim", "eps") => "Adam denominator epsilon",
        ("train", "steps") => "optimizer steps",
        ("train", "batch_size") => "samples per step",
        ("train", "eval_every") => "steps between evaluations (0 = only at start and end)",
        ("train", "eval_batch") => "samples per sampling batch during evaluation",
        ("train", "eval_seed") => "seed of the evaluation sampling noise",
        ("train", "probe_size") => "training samples in the fixed batch used for logged losses",
        ("ablation", "no_injection") => "train the assistant but add nothing to the expert",
        ("ablation", "no_aux_loss") => "drop the auxiliary loss (lambda = 0)",
        ("ablation", "random_sampler") => "uniform random point sampling instead of FPS",
        _ => return None,
    })
}

fn schema() -> Table {
    Table::try_from(RunConfig::default()).expect("defaults serialize")
}

fn inline(v: &Value) -> String {
    match v {
        Value::String(s) => format!("{s:?}"),
        other => other.to_string(),
    }
}

/// Every key with its default and description, one per line.
pub fn help_text() -> String {
    let mut s = String::from("configuration keys (section.key = default):\n");
    for (section, table) in schema() {
        let Value::Table(table) = table else { continue };
        for (key, value) in table {
            let doc = describe(&section, &key).unwrap_or("");
            let _ = writeln!(s, "  {section}.{key} = {}  # {doc}", inline(&value));
        }
    }
    s
}

fn merge(base: &mut Table, layer: Table, origin: &str) -> Result<()> {
    for (section, value) in layer {
        let Some(Value::Table(target)) = base.get_mut(&section) else {
            return Err(Error::config(format!("unknown config key `{section}` in {origin}")));
        };
        let Value::Table(entries) = value else {
            return Err(Error::config(format!("`{section}` in {origin} must be a section")));
        };
        for (key, v) in entries {
            if !target.contains_key(&key) {
                return Err(Error::config(format!("unknown config key `{section}.{key}` in {origin}")));
            }
            target.insert(key, v);
        }
    }
    Ok(())
}

/// Parses `section.key=value`; the value is TOML, or a bare string.
pub fn parse_override(text: &str) -> Result<(String, String, Value)> {
    let (path, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{text}` is not of the form section.key=value")))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| Error::config(format!("override key `{}` is not of the form section.key", path.trim())))?;
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((section.to_string(), key.to_string(), value))
}

impl RunConfig {
    /// Defaults, then the file at `path` if any, then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        Self::default().layered(path, overrides)
    }

    /// `self`, then the file at `path` if any, then `overrides`.
    pub fn layered(&self, path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = Table::try_from(self).expect("config serializes");
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read config file {}: {e}", path.display())))?;
            let file: Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::config(format!("{}: {}", path.display(), e.message())))?;
            merge(&mut table, file, &path.display().to_string())?;
        }
        for o in overrides {
            let (section, key, value) = parse_override(o)?;
            let mut layer = Table::new();
            let mut inner = Table::new();
            inner.insert(key, value);
            layer.insert(section, Value::Table(inner));
            merge(&mut table, layer, "overrides")?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn mode(&self) -> Result<InjectionMode> {
        Ok(self.assistant.mode.parse()?)
    }

    pub fn benchmark(&self) -> BenchmarkConfig {
        let n = self.data.image_size;
        let c = (n as f64 - 1.0) / 2.0;
        BenchmarkConfig {
            camera: CameraIntrinsics {
                fx: self.data.focal,
                fy: self.data.focal,
                cx: c,
                cy: c,
                width: n,
                height: n,
            },
            far_clip: DEFAULT_FAR_CLIP,
            depth_alternatives: self.data.depth_alternatives.clone(),
            wall_depth: self.data.wall_depth,
            angular_radius: self.data.angular_radius,
            lateral_range: self.data.lateral_range,
            view_offsets: self.data.view_offsets.clone(),
            noise_sigma_rel: self.data.noise_sigma_rel,
            noise_dropout: self.data.noise_dropout,
            state_dim: self.model.state_dim,
            horizon: self.model.horizon,
            action_dim: self.model.action_dim,
            ..BenchmarkConfig::default()
        }
    }

    pub fn cloud(&self) -> CloudConfig {
        CloudConfig {
            filter_k: self.cloud.filter_k,
            filter_alpha: self.cloud.filter_alpha,
            m_prime: self.cloud.points,
            sampler: if self.ablation.random_sampler {
                Sampler::Uniform
            } else {
                Sampler::Fps
            },
            normalize: self.cloud.normalize,
        }
    }

    pub fn expert(&self) -> ExpertConfig {
        let m = &self.model;
        ExpertConfig {
            layers: m.layers,
            d_main: m.d_main,
            mlp_ratio: m.mlp_ratio,
            horizon: m.horizon,
            action_dim: m.action_dim,
            state_dim: m.state_dim,
            image_height: self.data.image_size,
            image_width: self.data.image_size,
            patch: m.patch,
            time_embed_dim: m.time_embed_dim,
            diffusion_steps: m.diffusion_steps,
            beta_start: m.beta_start,
            beta_end: m.beta_end,
        }
    }

    pub fn policy(&self) -> Result<PolicyConfig> {
        let a = &self.assistant;
        Ok(PolicyConfig {
            expert: self.expert(),
            assistant: AssistantConfig {
                d_aux: a.d_aux,
                mlp_ratio: a.mlp_ratio,
                k_aux: a.k_aux,
                d_transform: a.d_transform,
                mode: self.mode()?,
            },
            pointnet_dims: self.model.pointnet_dims.clone(),
            lambda: if self.ablation.no_aux_loss { 0.0 } else { a.lambda },
            ratio_max: a.ratio_max,
            inject: !self.ablation.no_injection,
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.optim.lr,
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
        }
    }

    /// Checks every value and cross-section dependency without building
    /// anything large.
    pub fn validate(&self) -> Result<()> {
        self.mode()?;
        self.benchmark().validate()?;
        self.expert().validate()?;
        self.policy()?.assistant.validate(&self.expert())?;
        let positive = [
            ("data.train_size", self.data.train_size),
            ("data.eval_size", self.data.eval_size),
            ("cloud.points", self.cloud.points),
            ("train.batch_size", self.train.batch_size),
            ("train.eval_batch", self.train.eval_batch),
            ("train.probe_size", self.train.probe_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be ≥ 1")));
            }
        }
        if self.cloud.filter_k == 0 || !(self.cloud.filter_alpha >= 0.0) {
            return Err(Error::config("cloud.filter_k must be ≥ 1 and cloud.filter_alpha ≥ 0"));
        }
        if self.model.pointnet_dims.first() != Some(&3) || self.model.pointnet_dims.len() < 2 {
            return Err(Error::config("model.pointnet_dims must start at 3 and have at least two entries"));
        }
        if !(self.assistant.lambda >= 0.0) {
            return Err(Error::config("assistant.lambda must be ≥ 0"));
        }
        if !self.assistant.alpha_init.is_finite() {
            return Err(Error::config("assistant.alpha_init must be finite"));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::config("optim values out of range (lr > 0, betas in [0, 1), eps > 0)"));
        }
        if !(0.0..1.0).contains(&self.data.noise_dropout) || !(self.data.noise_sigma_rel >= 0.0) {
            return Err(Error::config("data.noise_dropout must lie in [0, 1) and noise_sigma_rel ≥ 0"));
        }
        Ok(())
    }
}
