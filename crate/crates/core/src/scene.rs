//! Analytic ray-cast depth rendering and an estimator-style noise model.
//!
//! Pixel `(u, v)` (integer column/row) looks along the ray
//! `s · ((u − cx)/fx, (v − cy)/fy, 1)`, so the ray parameter `s` at a hit
//! is exactly the hit's z coordinate, i.e. the depth.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{normal, rng_for};

pub const DEFAULT_FAR_CLIP: f64 = 10.0;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid camera intrinsics {self:?}")))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Direction with unit z through pixel `(u, v)`.
    pub fn ray(&self, u: usize, v: usize) -> [f64; 3] {
        [
            (u as f64 - self.cx) / self.fx,
            (v as f64 - self.cy) / self.fy,
            1.0,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned box given by its center and half extents.
    AxisBox { center: [f64; 3], half_extents: [f64; 3] },
    /// Infinite plane through `point` with (not necessarily unit) `normal`.
    Plane { point: [f64; 3], normal: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub object_id: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl Shape {
    /// Smallest positive ray parameter at which `s · dir` meets the surface.
    pub fn intersect(&self, dir: [f64; 3]) -> Option<f64> {
        match *self {
            Shape::Sphere { center, radius } => {
                let a = dot(dir, dir);
                let b = dot(dir, center);
                let c = dot(center, center) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let root = libm::sqrt(disc);
                let near = (b - root) / a;
                let far = (b + root) / a;
                [near, far].into_iter().find(|&s| s > 0.0)
            }
            Shape::AxisBox {
                center,
                half_extents,
            } => {
                let mut t_min = f64::NEG_INFINITY;
                let mut t_max = f64::INFINITY;
                for axis in 0..3 {
                    let lo = center[axis] - half_extents[axis];
                    let hi = center[axis] + half_extents[axis];
                    if dir[axis] == 0.0 {
                        if 0.0 < lo || 0.0 > hi {
                            return None;
                        }
                        continue;
                    }
                    let t1 = lo / dir[axis];
                    let t2 = hi / dir[axis];
                    let (a, b) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                    t_min = t_min.max(a);
                    t_max = t_max.min(b);
                }
                if t_min > t_max {
                    None
                } else if t_min > 0.0 {
                    Some(t_min)
                } else if t_max > 0.0 {
                    Some(t_max)
                } else {
                    None
                }
            }
            Shape::Plane { point, normal } => {
                let denom = dot(normal, dir);
                if denom == 0.0 {
                    return None;
                }
                let s = dot(normal, point) / denom;
                (s > 0.0).then_some(s)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Sphere { center, radius } => radius > 0.0 && center.iter().all(|v| v.is_finite()),
            Shape::AxisBox {
                center,
                half_extents,
            } => half_extents.iter().all(|&e| e > 0.0) && center.iter().all(|v| v.is_finite()),
            Shape::Plane { point, normal } => {
                dot(normal, normal) > 0.0 && point.iter().chain(&normal).all(|v| v.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("degenerate primitive {self:?}")))
        }
    }

    pub fn translated(&self, offset: [f64; 3]) -> Shape {
        let add = |p: [f64; 3]| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]];
        match *self {
            Shape::Sphere { center, radius } => Shape::Sphere {
                center: add(center),
                radius,
            },
            Shape::AxisBox {
                center,
                half_extents,
            } => Shape::AxisBox {
                center: add(center),
                half_extents,
            },
            Shape::Plane { point, normal } => Shape::Plane {
                point: add(point),
                normal,
            },
        }
    }
}

impl Scene {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        let scene = Self { primitives };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.primitives.iter().enumerate() {
            p.shape.validate()?;
            if self.primitives[..i].iter().any(|q| q.object_id == p.object_id) {
                return Err(Error::config(format!("duplicate object id {}", p.object_id)));
            }
        }
        Ok(())
    }

    /// The same scene seen from a camera displaced by `offset`.
    pub fn seen_from(&self, offset: [f64; 3]) -> Scene {
        let neg = [-offset[0], -offset[1], -offset[2]];
        Scene {
            primitives: self
                .primitives
                .iter()
                .map(|p| Primitive {
                    shape: p.shape.translated(neg),
                    object_id: p.object_id,
                })
                .collect(),
        }
    }

    /// Nearest hit along `dir`: `(depth, object_id)`.
    pub fn cast(&self, dir: [f64; 3]) -> Option<(f64, u32)> {
        let mut best: Option<(f64, u32)> = None;
        for p in &self.primitives {
            if let Some(s) = p.shape.intersect(dir) {
                if best.is_none_or(|(b, _)| s < b) {
                    best = Some((s, p.object_id));
                }
            }
        }
        best
    }
}

/// Per-pixel metric depth with validity flags, row-major `height × width`.
///
/// Invalid pixels always store `0.0`; consumers must check the flag.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    intrinsics: CameraIntrinsics,
    far_clip: f64,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Builds a map from raw values; `None` marks an invalid pixel.
    pub fn from_options(intrinsics: CameraIntrinsics, far_clip: f64, values: &[Option<f64>]) -> Result<Self> {
        intrinsics.validate()?;
        if values.len() != intrinsics.pixel_count() {
            return Err(Error::shape(
                "depth_map",
                &[intrinsics.height, intrinsics.width],
                &[values.len()],
            ));
        }
        if !(far_clip > 0.0) {
            return Err(Error::config(format!("far_clip must be positive, got {far_clip}")));
        }
        let mut depth = vec![0.0; values.len()];
        let mut valid = vec![false; values.len()];
        for (i, v) in values.iter().enumerate() {
            if let Some(z) = *v {
                if !(z > 0.0 && z <= far_clip) {
                    return Err(Error::config(format!(
                        "pixel {i}: depth {z} outside (0, {far_clip}]"
                    )));
                }
                depth[i] = z;
                valid[i] = true;
            }
        }
        Ok(Self {
            intrinsics,
            far_clip,
            depth,
            valid,
        })
    }

    pub fn invalid(intrinsics: CameraIntrinsics, far_clip: f64) -> Result<Self> {
        Self::from_options(intrinsics, far_clip, &vec![None; intrinsics.pixel_count()])
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn far_clip(&self) -> f64 {
        self.far_clip
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// Depth at `(u, v)` if valid.
    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let i = v * self.intrinsics.width + u;
        self.valid[i].then(|| self.depth[i])
    }

    pub fn depths(&self) -> &[f64] {
        &self.depth
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn values(&self) -> Vec<Option<f64>> {
        self.depth
            .iter()
            .zip(&self.valid)
            .map(|(&d, &ok)| ok.then_some(d))
            .collect()
    }
}

/// Depth and object-id rasters of one render.
#[derive(Debug, Clone, PartialEq)]
pub struct Render {
    pub depth: DepthMap,
    pub ids: Vec<Option<u32>>,
}

pub fn render(scene: &Scene, cam: &CameraIntrinsics, far_clip: f64) -> Result<Render> {
    scene.validate()?;
    cam.validate()?;
    let mut values = Vec::with_capacity(cam.pixel_count());
    let mut ids = Vec::with_capacity(cam.pixel_count());
    for v in 0..cam.height {
        for u in 0..cam.width {
            match scene.cast(cam.ray(u, v)) {
                Some((z, id)) if z <= far_clip => {
                    values.push(Some(z));
                    ids.push(Some(id));
                }
                _ => {
                    values.push(None);
                    ids.push(None);
                }
            }
        }
    }
    Ok(Render {
        depth: DepthMap::from_options(*cam, far_clip, &values)?,
        ids,
    })
}

/// Ray-cast depth of the nearest primitive per pixel; misses and hits
/// beyond `far_clip` are invalid.
pub fn render_depth(scene: &Scene, cam: &CameraIntrinsics, far_clip: f64) -> Result<DepthMap> {
    Ok(render(scene, cam, far_clip)?.depth)
}

/// Multiplicative Gaussian depth noise plus random pixel dropout.
///
/// Valid pixels are visited in row-major order. Each draws, in this order,
/// a uniform `u ∈ [0,1)` from the stream and then a standard normal `n`;
/// the pixel is dropped when `u < dropout`, otherwise its depth becomes
/// `z · (1 + sigma_rel · n)`. A perturbed depth leaving `(0, far_clip]`
/// is also marked invalid. The stream is `rng_for(seed, 0)`.
pub fn add_depth_noise(d: &DepthMap, sigma_rel: f64, dropout: f64, seed: u64) -> Result<DepthMap> {
    if !(sigma_rel >= 0.0) {
        return Err(Error::config(format!("sigma_rel must be ≥ 0, got {sigma_rel}")));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::config(format!("dropout must lie in [0, 1), got {dropout}")));
    }
    let mut rng = rng_for(seed, 0);
    let mut values = d.values();
    for slot in values.iter_mut() {
        if let Some(z) = *slot {
            let u: f64 = rng.random();
            let n = normal(&mut rng);
            if u < dropout {
                *slot = None;
                continue;
            }
            let noisy = z * (1.0 + sigma_rel * n);
            *slot = (noisy > 0.0 && noisy <= d.far_clip).then_some(noisy);
        }
    }
    DepthMap::from_options(d.intrinsics, d.far_clip, &values)
}
