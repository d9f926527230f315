//! From depth views to the sampled cloud fed to PointNet, and from a
//! [`TrajectorySample`] to the tensors a policy consumes.

use alloc::vec::Vec;

use crate::benchmark::TrajectorySample;
use crate::error::{Error, Result};
use crate::geometry::{backproject, filter_outliers, merge_views, normalize, sample_fps, sample_uniform, PointCloud, Rigid};
use crate::rng::mix_seed;
use crate::scene::DepthMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    /// Farthest-point sampling seeded at index 0.
    Fps,
    /// Uniform without replacement (ablation).
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudConfig {
    pub filter_k: usize,
    pub filter_alpha: f64,
    /// Target point count M'. Clouds with fewer points are kept whole.
    pub m_prime: usize,
    pub sampler: Sampler,
    pub normalize: bool,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self {
            filter_k: 8,
            filter_alpha: 2.0,
            m_prime: 64,
            sampler: Sampler::Fps,
            normalize: true,
        }
    }
}

/// Back-projects, merges, filters, normalizes and samples a set of views.
pub fn sampled_cloud(
    views: &[DepthMap],
    extrinsics: Option<&[Rigid]>,
    cfg: &CloudConfig,
    seed: u64,
) -> Result<PointCloud> {
    let clouds: Vec<PointCloud> = views.iter().map(backproject).collect();
    let merged = merge_views(&clouds, extrinsics)?;
    let filtered = if merged.len() > cfg.filter_k {
        filter_outliers(&merged, cfg.filter_k, cfg.filter_alpha)?
    } else {
        merged
    };
    if filtered.is_empty() {
        return Err(Error::EmptyInput("sampled_cloud"));
    }
    let cloud = if cfg.normalize { normalize(&filtered)? } else { filtered };
    let m = cfg.m_prime.min(cloud.len());
    let (sampled, _) = match cfg.sampler {
        Sampler::Fps => sample_fps(&cloud, m, 0)?,
        Sampler::Uniform => sample_uniform(&cloud, m, seed)?,
    };
    Ok(sampled)
}

/// Splits a `h × w` raster into row-major `patch × patch` tiles, one row each.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (h, w) = image.dims2("patchify")?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape("patchify", &[h, w], &[patch, patch]));
    }
    let (ph, pw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w);
    for py in 0..ph {
        for px in 0..pw {
            for y in 0..patch {
                let row = image.row(py * patch + y);
                data.extend_from_slice(&row[px * patch..(px + 1) * patch]);
            }
        }
    }
    Tensor::new(&[ph * pw, patch * patch], data)
}

/// Policy-ready tensors for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    /// `n_patches × patch²`
    pub patches: Tensor,
    /// `1 × state_dim`
    pub state: Tensor,
    /// `M' × 3`
    pub cloud: Tensor,
    /// `horizon × action_dim`
    pub action: Tensor,
}

pub fn prepare(
    sample: &TrajectorySample,
    extrinsics: Option<&[Rigid]>,
    cloud_cfg: &CloudConfig,
    patch: usize,
    seed: u64,
    index: usize,
) -> Result<PreparedSample> {
    let cloud = sampled_cloud(&sample.depth_views, extrinsics, cloud_cfg, mix_seed(seed, index as u64))?;
    Ok(PreparedSample {
        patches: patchify(&sample.image2d, patch)?,
        state: Tensor::new(&[1, sample.state.len()], sample.state.clone())?,
        cloud: cloud.to_tensor(),
        action: sample.action.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{make_sample, BenchmarkConfig};

    #[test]
    fn patchify_tiles_row_major() {
        let img = Tensor::new(&[4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
        assert!(patchify(&img, 3).is_err());
    }

    #[test]
    fn prepared_sample_shapes() {
        let cfg = BenchmarkConfig::default();
        let s = make_sample(&cfg, 0, 0).unwrap();
        let p = prepare(&s, None, &CloudConfig::default(), 4, 0, 0).unwrap();
        assert_eq!(p.patches.shape(), &[16, 16]);
        assert_eq!(p.state.shape(), &[1, 8]);
        assert_eq!(p.cloud.shape(), &[64, 3]);
        assert_eq!(p.action.shape(), &[8, 4]);
        // normalized: every point inside the unit ball
        for r in 0..64 {
            let n: f64 = p.cloud.row(r).iter().map(|v| v * v).sum();
            assert!(n <= 1.0 + 1e-12);
        }
    }
}
