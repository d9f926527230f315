//! Depth-ambiguity benchmark.
//!
//! Samples come in groups of `depth_alternatives.len()` that share one
//! random draw: a target sphere sits on a fixed camera ray at one of the
//! alternative depths, its radius growing in proportion to depth so its
//! silhouette (and therefore the depth-free 2D raster) is identical across
//! the group. The robot state is shared too, while the action chunk moves
//! the gripper to the true 3D target. From the raster and state alone the
//! target depth cannot be recovered.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{mix_seed, rng_for};
use crate::scene::{add_depth_noise, render, CameraIntrinsics, DepthMap, Primitive, Scene, Shape};
use crate::tensor::Tensor;

pub const WALL_ID: u32 = 0;
pub const TARGET_ID: u32 = 1;

/// Raster intensity of wall pixels in `image2d`.
pub const WALL_INTENSITY: f64 = 0.25;
/// Raster intensity of target pixels in `image2d`.
pub const TARGET_INTENSITY: f64 = 1.0;

/// Salt separating the depth-noise streams from the scene draws.
const NOISE_STREAM: u64 = 0x6e6f_6973_6500_0001;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub camera: CameraIntrinsics,
    pub far_clip: f64,
    /// Candidate target-center depths (meters); at least two, distinct.
    pub depth_alternatives: Vec<f64>,
    /// Depth of the frontal back wall.
    pub wall_depth: f64,
    /// Target radius divided by target depth.
    pub angular_radius: f64,
    /// Bound on |x/z| and |y/z| of the target ray.
    pub lateral_range: f64,
    /// Lateral (x) camera offsets, one per view.
    pub view_offsets: Vec<f64>,
    pub noise_sigma_rel: f64,
    pub noise_dropout: f64,
    pub state_dim: usize,
    pub horizon: usize,
    pub action_dim: usize,
    /// Half-width of the gripper start box in x and y.
    pub start_xy: f64,
    /// Upper bound of the gripper start z (lower bound 0).
    pub start_z: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            camera: CameraIntrinsics {
                fx: 16.0,
                fy: 16.0,
                cx: 7.5,
                cy: 7.5,
                width: 16,
                height: 16,
            },
            far_clip: crate::scene::DEFAULT_FAR_CLIP,
            depth_alternatives: vec![1.5, 2.5],
            wall_depth: 4.0,
            angular_radius: 0.15,
            lateral_range: 0.25,
            view_offsets: vec![0.0],
            noise_sigma_rel: 0.01,
            noise_dropout: 0.02,
            state_dim: 8,
            horizon: 8,
            action_dim: 4,
            start_xy: 0.2,
            start_z: 0.2,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let alts = &self.depth_alternatives;
        if alts.len() < 2 {
            return Err(Error::config(format!(
                "need at least 2 depth alternatives, got {}",
                alts.len()
            )));
        }
        for (i, &z) in alts.iter().enumerate() {
            if !(z > 0.0) || z * (1.0 + self.angular_radius) >= self.wall_depth {
                return Err(Error::config(format!(
                    "depth alternative {z} must be positive and in front of the wall"
                )));
            }
            if alts[..i].contains(&z) {
                return Err(Error::config(format!("duplicate depth alternative {z}")));
            }
        }
        if !(self.wall_depth <= self.far_clip) {
            return Err(Error::config("wall must lie within far_clip"));
        }
        if !(self.angular_radius > 0.0 && self.lateral_range >= 0.0) {
            return Err(Error::config("angular_radius must be > 0 and lateral_range ≥ 0"));
        }
        if self.view_offsets.is_empty() {
            return Err(Error::config("need at least one view"));
        }
        if self.action_dim != 4 {
            return Err(Error::config(format!(
                "action_dim must be 4 (xyz displacement + gripper), got {}",
                self.action_dim
            )));
        }
        if self.state_dim < 4 {
            return Err(Error::config(format!("state_dim must be ≥ 4, got {}", self.state_dim)));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be ≥ 1"));
        }
        if self.start_xy < 0.0 || self.start_z < 0.0 {
            return Err(Error::config("start box extents must be ≥ 0"));
        }
        Ok(())
    }

    pub fn alternatives(&self) -> usize {
        self.depth_alternatives.len()
    }

    /// Fraction of the way to the target reached at chunk step `h`.
    pub fn progress(&self, h: usize) -> f64 {
        (h + 1) as f64 / self.horizon as f64
    }

    /// Population variance of the (equiprobable) depth alternatives.
    pub fn depth_variance(&self) -> f64 {
        let n = self.depth_alternatives.len() as f64;
        let mean = self.depth_alternatives.iter().sum::<f64>() / n;
        self.depth_alternatives
            .iter()
            .map(|z| (z - mean) * (z - mean))
            .sum::<f64>()
            / n
    }

    /// Smallest achievable MSE on the action depth coordinate for any
    /// predictor that sees only `image2d` and `state`:
    /// `Var(z) · mean_h progress(h)²`.
    pub fn depth_information_floor(&self) -> f64 {
        let mean_sq = (0..self.horizon)
            .map(|h| self.progress(h) * self.progress(h))
            .sum::<f64>()
            / self.horizon as f64;
        self.depth_variance() * mean_sq
    }
}

/// One demonstration: observations, robot state and action chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub depth_views: Vec<DepthMap>,
    /// `height × width` raster with depth discarded.
    pub image2d: Tensor,
    pub state: Vec<f64>,
    /// `horizon × action_dim` ground-truth chunk.
    pub action: Tensor,
    pub target_id: u32,
    /// Group index shared by samples with identical `image2d` and `state`.
    pub pair: usize,
    /// Which depth alternative this sample uses.
    pub alternative: usize,
    pub target_center: [f64; 3],
}

/// Scene for one sample, with the target at `depth` along `ray`.
pub fn target_scene(cfg: &BenchmarkConfig, ray: [f64; 2], depth: f64) -> Result<Scene> {
    Scene::new(vec![
        Primitive {
            shape: Shape::Plane {
                point: [0.0, 0.0, cfg.wall_depth],
                normal: [0.0, 0.0, 1.0],
            },
            object_id: WALL_ID,
        },
        Primitive {
            shape: Shape::Sphere {
                center: [ray[0] * depth, ray[1] * depth, depth],
                radius: cfg.angular_radius * depth,
            },
            object_id: TARGET_ID,
        },
    ])
}

/// Depth-free raster: rendered with the target at unit depth, keeping
/// only object identity. Depends on `ray` alone.
pub fn image2d_for(cfg: &BenchmarkConfig, ray: [f64; 2]) -> Result<Tensor> {
    let r = render(&target_scene(cfg, ray, 1.0)?, &cfg.camera, cfg.far_clip)?;
    let data = r
        .ids
        .iter()
        .map(|id| match id {
            Some(TARGET_ID) => TARGET_INTENSITY,
            Some(_) => WALL_INTENSITY,
            None => 0.0,
        })
        .collect();
    Tensor::new(&[cfg.camera.height, cfg.camera.width], data)
}

/// Builds sample `index` of the dataset generated with `seed`.
pub fn make_sample(cfg: &BenchmarkConfig, seed: u64, index: usize) -> Result<TrajectorySample> {
    let n_alt = cfg.alternatives();
    let pair = index / n_alt;
    let alternative = index % n_alt;
    let mut rng = rng_for(seed, pair as u64);

    let lr = cfg.lateral_range;
    let ray = [rng.random_range(-lr..=lr), rng.random_range(-lr..=lr)];
    let start = [
        rng.random_range(-cfg.start_xy..=cfg.start_xy),
        rng.random_range(-cfg.start_xy..=cfg.start_xy),
        rng.random_range(0.0..=cfg.start_z),
    ];
    let grip: f64 = rng.random();
    let mut state = vec![start[0], start[1], start[2], grip];
    state.extend((4..cfg.state_dim).map(|_| rng.random_range(-1.0..=1.0)));

    let depth = cfg.depth_alternatives[alternative];
    let scene = target_scene(cfg, ray, depth)?;
    let target = [ray[0] * depth, ray[1] * depth, depth];

    let mut depth_views = Vec::with_capacity(cfg.view_offsets.len());
    for (v, &offset) in cfg.view_offsets.iter().enumerate() {
        let clean = render(&scene.seen_from([offset, 0.0, 0.0]), &cfg.camera, cfg.far_clip)?.depth;
        let noise_seed = mix_seed(seed ^ NOISE_STREAM, (index * cfg.view_offsets.len() + v) as u64);
        depth_views.push(add_depth_noise(&clean, cfg.noise_sigma_rel, cfg.noise_dropout, noise_seed)?);
    }

    let mut action = Vec::with_capacity(cfg.horizon * cfg.action_dim);
    for h in 0..cfg.horizon {
        let s = cfg.progress(h);
        action.extend_from_slice(&[
            s * (target[0] - start[0]),
            s * (target[1] - start[1]),
            s * (target[2] - start[2]),
            grip * (1.0 - s),
        ]);
    }

    Ok(TrajectorySample {
        depth_views,
        image2d: image2d_for(cfg, ray)?,
        state,
        action: Tensor::new(&[cfg.horizon, cfg.action_dim], action)?,
        target_id: TARGET_ID,
        pair,
        alternative,
        target_center: target,
    })
}

/// `n` samples for `seed`; sample `i` depends only on `(seed, i)`.
pub fn make_ambiguity_dataset(n: usize, seed: u64, cfg: &BenchmarkConfig) -> Result<Vec<TrajectorySample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::config("dataset size must be ≥ 1"));
    }
    (0..n).map(|i| make_sample(cfg, seed, i)).collect()
}

/// Index of the depth coordinate within an action row.
pub const DEPTH_COORD: usize = 2;
