//! Depth maps on disk: a PFM-style float map plus a JSON sidecar.
//!
//! Raster file, byte by byte:
//!
//! ```text
//! "Pd" or "Pf"        2 bytes; Pd = 64-bit samples, Pf = 32-bit samples
//! one whitespace byte
//! width  (ASCII decimal), one whitespace byte
//! height (ASCII decimal), one whitespace byte
//! scale  (ASCII decimal, non-zero): negative = little-endian,
//!        positive = big-endian; the magnitude is ignored
//! exactly one whitespace byte (normally '\n')
//! width·height samples, IEEE-754, rows stored bottom row first,
//! left to right within a row
//! ```
//!
//! The writer always emits `Pd\n<w> <h>\n-1.0\n` followed by little-endian
//! f64 samples, so a save/load round trip is bit-exact. Invalid pixels are
//! stored as NaN.
//!
//! The sidecar lives next to the raster at `<file>.json`:
//!
//! ```json
//! {"width":16,"height":16,"fx":16.0,"fy":16.0,"cx":7.5,"cy":7.5,
//!  "far_clip":10.0,"invalid":"nan"}
//! ```
//!
//! `invalid` is `"nan"` (NaN marks an invalid pixel) or `"nonpositive"`
//! (NaN or any value ≤ 0 marks an invalid pixel).

use std::fs;
use std::path::{Path, PathBuf};

use depth_inject_core::scene::{CameraIntrinsics, DepthMap};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Location, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InvalidEncoding {
    Nan,
    Nonpositive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub far_clip: f64,
    pub invalid: InvalidEncoding,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Serializes the raster part of a depth file.
pub fn encode_raster(d: &DepthMap) -> Vec<u8> {
    let (w, h) = (d.width(), d.height());
    let mut out = format!("Pd\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 8);
    for v in (0..h).rev() {
        for u in 0..w {
            let z = d.get(u, v).unwrap_or(f64::NAN);
            out.extend_from_slice(&z.to_le_bytes());
        }
    }
    out
}

pub fn save_depth_file(path: &Path, d: &DepthMap) -> Result<()> {
    let k = d.intrinsics();
    let sidecar = Sidecar {
        width: k.width,
        height: k.height,
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        far_clip: d.far_clip(),
        invalid: InvalidEncoding::Nan,
    };
    fs::write(path, encode_raster(d)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string(&sidecar).expect("sidecar serializes");
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
}

pub fn load_depth_file(path: &Path) -> Result<DepthMap> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| {
        let offset = byte_offset(&text, e.line(), e.column());
        Error::parse(&side, Location::Byte(offset), e.to_string())
    })?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(path, &bytes, &sidecar)
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (before + column.saturating_sub(1)) as u64
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, at: usize, reason: impl Into<String>) -> Error {
        Error::parse(self.path, Location::Byte(at as u64), reason)
    }

    fn whitespace(&mut self, what: &str) -> Result<()> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(())
            }
            Some(_) => Err(self.err(self.pos, format!("expected whitespace after {what}"))),
            None => Err(self.err(self.pos, format!("file ends after {what}"))),
        }
    }

    fn token(&mut self, what: &str) -> Result<(usize, &'a str)> {
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(start, format!("missing {what}")));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| self.err(start, format!("{what} is not ASCII")))?;
        Ok((start, s))
    }
}

/// Parses a raster against its sidecar.
pub fn decode_raster(path: &Path, bytes: &[u8], sidecar: &Sidecar) -> Result<DepthMap> {
    let mut c = Cursor { path, bytes, pos: 0 };
    let wide = match bytes.get(..2) {
        Some(b"Pd") => true,
        Some(b"Pf") => false,
        _ => return Err(c.err(0, "magic must be `Pd` or `Pf`")),
    };
    c.pos = 2;
    c.whitespace("magic")?;
    let (at, w) = c.token("width")?;
    let w: usize = w.parse().map_err(|_| c.err(at, format!("width `{w}` is not a non-negative integer")))?;
    c.whitespace("width")?;
    let (at_h, h) = c.token("height")?;
    let h: usize = h.parse().map_err(|_| c.err(at_h, format!("height `{h}` is not a non-negative integer")))?;
    if (w, h) != (sidecar.width, sidecar.height) {
        return Err(c.err(
            at,
            format!("raster is {w}×{h} but sidecar says {}×{}", sidecar.width, sidecar.height),
        ));
    }
    c.whitespace("height")?;
    let (at, scale) = c.token("scale")?;
    let scale: f64 = scale.parse().map_err(|_| c.err(at, format!("scale `{scale}` is not a number")))?;
    if !(scale.is_finite() && scale != 0.0) {
        return Err(c.err(at, "scale must be finite and non-zero"));
    }
    let little = scale < 0.0;
    c.whitespace("scale")?;

    let width = if wide { 8 } else { 4 };
    let expected = w * h * width;
    let data = &bytes[c.pos..];
    if data.len() < expected {
        return Err(c.err(
            bytes.len(),
            format!("truncated raster: {} of {expected} sample bytes", data.len()),
        ));
    }
    if data.len() > expected {
        return Err(c.err(c.pos + expected, "unexpected bytes after raster"));
    }

    let intrinsics = CameraIntrinsics::new(sidecar.fx, sidecar.fy, sidecar.cx, sidecar.cy, w, h)?;
    let mut values = vec![None; w * h];
    for (i, chunk) in data.chunks_exact(width).enumerate() {
        let z = match (wide, little) {
            (true, true) => f64::from_le_bytes(chunk.try_into().expect("8 bytes")),
            (true, false) => f64::from_be_bytes(chunk.try_into().expect("8 bytes")),
            (false, true) => f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes"))),
            (false, false) => f64::from(f32::from_be_bytes(chunk.try_into().expect("4 bytes"))),
        };
        let invalid = z.is_nan() || (sidecar.invalid == InvalidEncoding::Nonpositive && z <= 0.0);
        if invalid {
            continue;
        }
        if !(z > 0.0 && z <= sidecar.far_clip) {
            return Err(c.err(
                c.pos + i * width,
                format!("sample {z} outside (0, {}]", sidecar.far_clip),
            ));
        }
        let (row_from_bottom, u) = (i / w, i % w);
        values[(h - 1 - row_from_bottom) * w + u] = Some(z);
    }
    Ok(DepthMap::from_options(intrinsics, sidecar.far_clip, &values)?)
}
