//! Camera-frame point clouds: back-projection, statistical outlier
//! removal, normalization, farthest-point sampling and view merging.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample as sample_indices;

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::scene::{CameraIntrinsics, DepthMap};
use crate::tensor::Tensor;

pub type Point = [f64; 3];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    /// View index per point, when the cloud came from [`merge_views`].
    pub source_view: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self {
            points,
            source_view: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Subset in the given index order, carrying `source_view` along.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            source_view: self
                .source_view
                .as_ref()
                .map(|sv| indices.iter().map(|&i| sv[i]).collect()),
        }
    }

    /// `M × 3` tensor of the coordinates.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.points.iter().flat_map(|p| p.iter().copied()).collect();
        Tensor::new(&[self.points.len(), 3], data).expect("3 coordinates per point")
    }

    pub fn centroid(&self) -> Option<Point> {
        if self.points.is_empty() {
            return None;
        }
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.points.len() as f64;
        Some([c[0] / n, c[1] / n, c[2] / n])
    }
}

pub fn dist2(a: &Point, b: &Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

fn norm(p: &Point) -> f64 {
    libm::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2])
}

/// Rigid transform `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Rigid {
    pub const IDENTITY: Rigid = Rigid {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0; 3],
    };

    pub fn translation(t: [f64; 3]) -> Self {
        Rigid {
            translation: t,
            ..Self::IDENTITY
        }
    }

    pub fn apply(&self, p: &Point) -> Point {
        let r = &self.rotation;
        let mut out = self.translation;
        for (i, row) in r.iter().enumerate() {
            out[i] += row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
        }
        out
    }
}

/// Pinhole back-projection of every valid pixel, row-major.
pub fn backproject(d: &DepthMap) -> PointCloud {
    let cam = d.intrinsics();
    let mut points = Vec::with_capacity(d.valid_count());
    for v in 0..cam.height {
        for u in 0..cam.width {
            if let Some(z) = d.get(u, v) {
                points.push([
                    (u as f64 - cam.cx) * z / cam.fx,
                    (v as f64 - cam.cy) * z / cam.fy,
                    z,
                ]);
            }
        }
    }
    PointCloud::new(points)
}

/// Inverse of [`backproject`] for one point: `(u, v, z)` in pixels/meters.
pub fn project(p: &Point, cam: &CameraIntrinsics) -> (f64, f64, f64) {
    (
        p[0] * cam.fx / p[2] + cam.cx,
        p[1] * cam.fy / p[2] + cam.cy,
        p[2],
    )
}

/// Mean distance from each point to its `k` nearest neighbours (brute force).
pub fn knn_mean_distances(points: &[Point], k: usize) -> Vec<f64> {
    let mut scratch = Vec::with_capacity(points.len());
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            scratch.clear();
            scratch.extend(
                points
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, q)| dist2(p, q)),
            );
            scratch.select_nth_unstable_by(k - 1, f64::total_cmp);
            let nearest = &mut scratch[..k];
            nearest.sort_unstable_by(f64::total_cmp);
            nearest.iter().map(|d| libm::sqrt(*d)).sum::<f64>() / k as f64
        })
        .collect()
}

/// Statistical outlier removal: drops points whose mean k-NN distance
/// exceeds `μ + alpha·σ` of that statistic over the cloud. Order is kept.
pub fn filter_outliers(c: &PointCloud, k: usize, alpha: f64) -> Result<PointCloud> {
    if k == 0 || c.len() <= k {
        return Err(Error::InsufficientPoints { k, got: c.len() });
    }
    let stats = knn_mean_distances(&c.points, k);
    let n = stats.len() as f64;
    let mu = stats.iter().sum::<f64>() / n;
    let sigma = libm::sqrt(stats.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n);
    let threshold = mu + alpha * sigma;
    let keep: Vec<usize> = (0..c.len()).filter(|&i| !(stats[i] > threshold)).collect();
    Ok(c.select(&keep))
}

/// Centers the cloud at its centroid and scales the farthest point to unit norm.
pub fn normalize(c: &PointCloud) -> Result<PointCloud> {
    let centroid = c.centroid().ok_or(Error::EmptyInput("normalize"))?;
    let centered: Vec<Point> = c
        .points
        .iter()
        .map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
        .collect();
    let radius = centered.iter().map(norm).fold(0.0, f64::max);
    if !(radius > 0.0) {
        return Err(Error::DegenerateCloud);
    }
    Ok(PointCloud {
        points: centered
            .iter()
            .map(|p| [p[0] / radius, p[1] / radius, p[2] / radius])
            .collect(),
        source_view: c.source_view.clone(),
    })
}

/// Greedy farthest-point sampling from `seed_index`.
///
/// Each step adds the point with the largest squared distance to the
/// selected set; ties go to the lowest index. Returns the sampled cloud
/// and the selected indices in selection order.
pub fn sample_fps(c: &PointCloud, m_prime: usize, seed_index: usize) -> Result<(PointCloud, Vec<usize>)> {
    if m_prime == 0 || m_prime > c.len() {
        return Err(Error::Size {
            op: "sample_fps",
            requested: m_prime,
            available: c.len(),
        });
    }
    if seed_index >= c.len() {
        return Err(Error::Size {
            op: "sample_fps seed",
            requested: seed_index,
            available: c.len(),
        });
    }
    let mut selected = Vec::with_capacity(m_prime);
    let mut min_d2 = vec![f64::INFINITY; c.len()];
    let mut chosen = vec![false; c.len()];
    let mut current = seed_index;
    selected.push(current);
    chosen[current] = true;
    while selected.len() < m_prime {
        let anchor = c.points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in c.points.iter().enumerate() {
            let d = dist2(p, &anchor);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if !chosen[i] && min_d2[i] > best_d {
                best_d = min_d2[i];
                best = i;
            }
        }
        current = best;
        chosen[current] = true;
        selected.push(current);
    }
    Ok((c.select(&selected), selected))
}

/// Uniform sampling without replacement; indices are returned sorted.
pub fn sample_uniform(c: &PointCloud, m_prime: usize, seed: u64) -> Result<(PointCloud, Vec<usize>)> {
    if m_prime == 0 || m_prime > c.len() {
        return Err(Error::Size {
            op: "sample_uniform",
            requested: m_prime,
            available: c.len(),
        });
    }
    let mut idx = sample_indices(&mut rng_for(seed, 0), c.len(), m_prime).into_vec();
    idx.sort_unstable();
    Ok((c.select(&idx), idx))
}

/// Concatenates clouds in order, mapping view `i` through `extrinsics[i]`
/// (identity when absent) and tagging each point with its view index.
pub fn merge_views(clouds: &[PointCloud], extrinsics: Option<&[Rigid]>) -> Result<PointCloud> {
    if clouds.is_empty() {
        return Err(Error::EmptyInput("merge_views"));
    }
    if let Some(ex) = extrinsics {
        if ex.len() != clouds.len() {
            return Err(Error::Size {
                op: "merge_views extrinsics",
                requested: ex.len(),
                available: clouds.len(),
            });
        }
    }
    let total = clouds.iter().map(PointCloud::len).sum();
    let mut points = Vec::with_capacity(total);
    let mut views = Vec::with_capacity(total);
    for (i, c) in clouds.iter().enumerate() {
        let tf = extrinsics.map_or(Rigid::IDENTITY, |ex| ex[i]);
        points.extend(c.points.iter().map(|p| tf.apply(p)));
        views.extend(core::iter::repeat_n(i, c.len()));
    }
    Ok(PointCloud {
        points,
        source_view: Some(views),
    })
}

/// Splits a merged cloud back into per-view clouds (view order, stable).
pub fn split_by_view(c: &PointCloud) -> Vec<PointCloud> {
    let Some(views) = &c.source_view else {
        return vec![PointCloud::new(c.points.clone())];
    };
    let n = views.iter().max().map_or(0, |m| m + 1);
    let mut out = vec![PointCloud::default(); n];
    for (p, &v) in c.points.iter().zip(views) {
        out[v].points.push(*p);
    }
    out
}
