//! Dataset directories written by `gen-data`.
//!
//! ```text
//! <dir>/meta.json            DatasetMeta
//! <dir>/samples.jsonl        one SampleRecord per line, in index order
//! <dir>/depth/<index>_<view>.pfm       depth raster (see depth_file)
//! <dir>/depth/<index>_<view>.pfm.json  its sidecar
//! ```
//!
//! Index is zero-padded to six digits. Every sample depends only on the
//! dataset seed and its index, so the directory contents do not depend on
//! the number of worker threads.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use depth_inject_core::benchmark::{make_sample, BenchmarkConfig, TrajectorySample};
use depth_inject_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::depth_file::{load_depth_file, save_depth_file};
use crate::error::{Error, Location, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const WORKERS_ENV: &str = "DEPTH_INJECT_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub size: usize,
    pub seed: u64,
    pub image_size: usize,
    pub state_dim: usize,
    pub horizon: usize,
    pub action_dim: usize,
    pub views: usize,
    pub view_offsets: Vec<f64>,
    pub depth_alternatives: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub index: usize,
    pub pair: usize,
    pub alternative: usize,
    pub target_id: u32,
    pub target_center: [f64; 3],
    pub state: Vec<f64>,
    /// `horizon` rows of `action_dim` values.
    pub action: Vec<Vec<f64>>,
    /// Depth-free raster, `image_size` rows.
    pub image2d: Vec<Vec<f64>>,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|r| t.row(r).to_vec()).collect()
}

fn from_rows(path: &Path, line: usize, what: &str, rows: &[Vec<f64>], cols: usize) -> Result<Tensor> {
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::parse(path, Location::Line(line), format!("{what} rows must have {cols} values")));
    }
    let data = rows.concat();
    Ok(Tensor::new(&[rows.len(), cols], data)?)
}

pub fn depth_path(dir: &Path, index: usize, view: usize) -> PathBuf {
    dir.join("depth").join(format!("{index:06}_{view}.pfm"))
}

/// Worker count from the environment: unset means 1.
pub fn workers_from_env() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(_) => Err(Error::config(format!("{WORKERS_ENV} is not valid UTF-8"))),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::config(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

/// Builds `n` samples on `workers` threads. The result is identical for
/// every worker count.
pub fn generate(cfg: &BenchmarkConfig, n: usize, seed: u64, workers: usize) -> Result<Vec<TrajectorySample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::config("dataset size must be ≥ 1"));
    }
    let workers = workers.clamp(1, n);
    if workers == 1 {
        return (0..n).map(|i| Ok(make_sample(cfg, seed, i)?)).collect();
    }
    let chunk = n.div_ceil(workers);
    let parts: Vec<Result<Vec<TrajectorySample>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let range = (w * chunk)..((w + 1) * chunk).min(n);
                s.spawn(move || range.map(|i| Ok(make_sample(cfg, seed, i)?)).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Writes a complete dataset directory, creating it if needed.
pub fn write_dataset(dir: &Path, cfg: &BenchmarkConfig, seed: u64, samples: &[TrajectorySample]) -> Result<()> {
    let depth_dir = dir.join("depth");
    fs::create_dir_all(&depth_dir).map_err(|e| Error::io(&depth_dir, e))?;
    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        size: samples.len(),
        seed,
        image_size: cfg.camera.width,
        state_dim: cfg.state_dim,
        horizon: cfg.horizon,
        action_dim: cfg.action_dim,
        views: cfg.view_offsets.len(),
        view_offsets: cfg.view_offsets.clone(),
        depth_alternatives: cfg.depth_alternatives.clone(),
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))?;

    let list_path = dir.join("samples.jsonl");
    let mut list = fs::File::create(&list_path).map_err(|e| Error::io(&list_path, e))?;
    let mut buf = String::new();
    for (i, s) in samples.iter().enumerate() {
        for (v, d) in s.depth_views.iter().enumerate() {
            save_depth_file(&depth_path(dir, i, v), d)?;
        }
        let record = SampleRecord {
            index: i,
            pair: s.pair,
            alternative: s.alternative,
            target_id: s.target_id,
            target_center: s.target_center,
            state: s.state.clone(),
            action: rows(&s.action),
            image2d: rows(&s.image2d),
        };
        buf.push_str(&serde_json::to_string(&record).expect("record serializes"));
        buf.push('\n');
    }
    list.write_all(buf.as_bytes()).map_err(|e| Error::io(&list_path, e))
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: DatasetMeta =
        serde_json::from_str(&text).map_err(|e| Error::parse(&path, Location::Line(e.line()), e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::parse(
            &path,
            Location::Line(1),
            format!("unsupported dataset format version {}", meta.format_version),
        ));
    }
    Ok(meta)
}

/// Reads a dataset directory back into samples.
pub fn read_dataset(dir: &Path) -> Result<(DatasetMeta, Vec<TrajectorySample>)> {
    let meta = read_meta(dir)?;
    let list_path = dir.join("samples.jsonl");
    let text = fs::read_to_string(&list_path).map_err(|e| Error::io(&list_path, e))?;
    let mut samples = Vec::with_capacity(meta.size);
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let r: SampleRecord = serde_json::from_str(line)
            .map_err(|e| Error::parse(&list_path, Location::Line(line_no), e.to_string()))?;
        if r.index != n {
            return Err(Error::parse(
                &list_path,
                Location::Line(line_no),
                format!("expected index {n}, found {}", r.index),
            ));
        }
        if r.state.len() != meta.state_dim || r.action.len() != meta.horizon || r.image2d.len() != meta.image_size {
            return Err(Error::parse(
                &list_path,
                Location::Line(line_no),
                "sample dimensions disagree with meta.json",
            ));
        }
        let depth_views = (0..meta.views)
            .map(|v| load_depth_file(&depth_path(dir, n, v)))
            .collect::<Result<Vec<_>>>()?;
        samples.push(TrajectorySample {
            depth_views,
            image2d: from_rows(&list_path, line_no, "image2d", &r.image2d, meta.image_size)?,
            state: r.state,
            action: from_rows(&list_path, line_no, "action", &r.action, meta.action_dim)?,
            target_id: r.target_id,
            pair: r.pair,
            alternative: r.alternative,
            target_center: r.target_center,
        });
    }
    if samples.len() != meta.size {
        return Err(Error::parse(
            &list_path,
            Location::Line(samples.len() + 1),
            format!("meta.json declares {} samples, found {}", meta.size, samples.len()),
        ));
    }
    Ok((meta, samples))
}

/// Fails with a configuration error when a stored dataset was produced
/// with dimensions other than those of `cfg`.
pub fn check_compatible(meta: &DatasetMeta, cfg: &BenchmarkConfig) -> Result<()> {
    let pairs = [
        ("image_size", meta.image_size, cfg.camera.width),
        ("state_dim", meta.state_dim, cfg.state_dim),
        ("horizon", meta.horizon, cfg.horizon),
        ("action_dim", meta.action_dim, cfg.action_dim),
        ("views", meta.views, cfg.view_offsets.len()),
    ];
    for (name, stored, want) in pairs {
        if stored != want {
            return Err(Error::config(format!("dataset {name} is {stored}, configuration expects {want}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worker_count_does_not_change_samples() {
        let cfg = BenchmarkConfig::default();
        let one = generate(&cfg, 7, 3, 1).unwrap();
        let three = generate(&cfg, 7, 3, 3).unwrap();
        assert_eq!(one, three);
    }

    #[test]
    fn directory_round_trip_is_exact() {
        let cfg = BenchmarkConfig {
            view_offsets: vec![0.0, 0.1],
            ..BenchmarkConfig::default()
        };
        let samples = generate(&cfg, 3, 11, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &cfg, 11, &samples).unwrap();
        let (meta, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(meta.size, 3);
        assert_eq!(meta.views, 2);
        check_compatible(&meta, &cfg).unwrap();
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.action.data(), b.action.data());
            assert_eq!(a.image2d, b.image2d);
            assert_eq!(a.state, b.state);
            for (da, db) in a.depth_views.iter().zip(&b.depth_views) {
                assert_eq!(da.values(), db.values());
            }
        }
        let other = BenchmarkConfig {
            horizon: 4,
            ..cfg
        };
        assert!(matches!(check_compatible(&meta, &other), Err(Error::Config(_))));
    }
}
