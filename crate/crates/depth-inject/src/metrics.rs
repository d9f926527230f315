//! Append-only metrics streams.
//!
//! `metrics.jsonl` holds one JSON object per evaluation, with the fields
//! of [`MetricsRecord`] in declaration order. Everything in it is a pure
//! function of the configuration and seed. Wall-clock readings go to a
//! separate `metrics.timing.jsonl` ([`TimingRecord`]) so the main file can
//! be compared byte for byte across runs.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Location, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: usize,
    /// Denoising loss of the expert on the fixed probe batch.
    pub loss_main: f64,
    /// Denoising loss of the assistant on the probe batch; `null` when the
    /// assistant is not run.
    pub loss_aux: Option<f64>,
    /// Mean squared error of sampled action chunks on the eval split.
    pub eval_mse: f64,
    /// The same restricted to the depth coordinate.
    pub eval_depth_mse: f64,
    /// Gate values, one per expert layer.
    pub alpha: Vec<f64>,
    /// Set on the last record of a run that stopped on a non-finite loss.
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingRecord {
    pub step: usize,
    pub wall_clock_s: f64,
}

pub fn timing_path(metrics: &Path) -> PathBuf {
    metrics.with_file_name(
        metrics
            .file_stem()
            .map(|s| format!("{}.timing.jsonl", s.to_string_lossy()))
            .unwrap_or_else(|| "timing.jsonl".into()),
    )
}

/// Writes both streams, flushing after every record.
pub struct MetricsWriter {
    path: PathBuf,
    main: File,
    timing_path: PathBuf,
    timing: File,
    last_step: Option<usize>,
}

fn create(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

fn append_line<T: Serialize>(file: &mut File, path: &Path, record: &T) -> Result<()> {
    let mut line = serde_json::to_string(record).expect("records serialize");
    line.push('\n');
    file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))
}

impl MetricsWriter {
    /// Starts fresh streams at `path` and its timing sibling.
    pub fn create(path: &Path) -> Result<Self> {
        let timing_path = timing_path(path);
        Ok(Self {
            main: create(path)?,
            timing: create(&timing_path)?,
            path: path.to_path_buf(),
            timing_path,
            last_step: None,
        })
    }

    pub fn append(&mut self, record: &MetricsRecord, wall_clock_s: f64) -> Result<()> {
        if self.last_step.is_some_and(|s| record.step <= s) {
            return Err(Error::config(format!(
                "metrics step {} does not follow {}",
                record.step,
                self.last_step.unwrap_or(0)
            )));
        }
        self.last_step = Some(record.step);
        append_line(&mut self.main, &self.path, record)?;
        append_line(
            &mut self.timing,
            &self.timing_path,
            &TimingRecord {
                step: record.step,
                wall_clock_s,
            },
        )
    }
}

/// Reads a JSON-lines stream. A final line that is unterminated or does
/// not parse is treated as an interrupted write and dropped; a bad line
/// anywhere else is an error.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(path, &text)
}

pub fn parse_jsonl<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>> {
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    let lines: Vec<&str> = complete.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => return Err(Error::parse(path, Location::Line(i + 1), e.to_string())),
        }
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let records: Vec<MetricsRecord> = read_jsonl(path)?;
    for (i, w) in records.windows(2).enumerate() {
        if w[1].step <= w[0].step {
            return Err(Error::parse(path, Location::Line(i + 2), "step indices must increase"));
        }
    }
    Ok(records)
}
