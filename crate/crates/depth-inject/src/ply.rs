//! ASCII PLY for point clouds.
//!
//! Coordinates are written as `double` with 17 significant digits
//! (`{:.16e}`), which is enough for every f64 to read back bit-exactly.
//! Clouds that remember their source view carry an extra `uint view`
//! property.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use depth_inject_core::geometry::PointCloud;

use crate::error::{Error, Location, Result};

pub fn encode_ply(c: &PointCloud) -> String {
    let mut s = String::with_capacity(64 + c.len() * 72);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", c.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if c.source_view.is_some() {
        s.push_str("property uint view\n");
    }
    s.push_str("end_header\n");
    for (i, p) in c.points.iter().enumerate() {
        let _ = write!(s, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]);
        if let Some(views) = &c.source_view {
            let _ = write!(s, " {}", views[i]);
        }
        s.push('\n');
    }
    s
}

pub fn write_ply(path: &Path, c: &PointCloud) -> Result<()> {
    fs::write(path, encode_ply(c)).map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_ply(path, &text)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Column {
    X,
    Y,
    Z,
    View,
    Other,
}

pub fn decode_ply(path: &Path, text: &str) -> Result<PointCloud> {
    let err = |line: usize, reason: String| Error::parse(path, Location::Line(line), reason);
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));

    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(err(1, "first line must be `ply`".into())),
    }
    let mut count: Option<usize> = None;
    let mut columns: Vec<Column> = Vec::new();
    let mut header_done = false;
    let mut last_line = 1;
    for (n, line) in lines.by_ref() {
        last_line = n;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", "1.0"] => {}
            ["format", other, ..] => return Err(err(n, format!("unsupported format `{other}`"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", k] => {
                if count.is_some() {
                    return Err(err(n, "duplicate vertex element".into()));
                }
                count = Some(k.parse().map_err(|_| err(n, format!("bad vertex count `{k}`")))?);
            }
            ["element", name, ..] => return Err(err(n, format!("unsupported element `{name}`"))),
            ["property", "list", ..] => return Err(err(n, "list properties are not supported".into())),
            ["property", ty, name] => {
                if count.is_none() {
                    return Err(err(n, "property before element".into()));
                }
                let numeric = matches!(
                    *ty,
                    "float" | "double" | "float32" | "float64" | "char" | "uchar" | "short" | "ushort" | "int" | "uint"
                        | "int8" | "uint8" | "int16" | "uint16" | "int32" | "uint32"
                );
                if !numeric {
                    return Err(err(n, format!("unknown property type `{ty}`")));
                }
                columns.push(match *name {
                    "x" => Column::X,
                    "y" => Column::Y,
                    "z" => Column::Z,
                    "view" => Column::View,
                    _ => Column::Other,
                });
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(err(n, format!("unrecognized header line `{line}`"))),
        }
    }
    if !header_done {
        return Err(err(last_line, "missing end_header".into()));
    }
    let count = count.ok_or_else(|| err(last_line, "missing vertex element".into()))?;
    for need in [Column::X, Column::Y, Column::Z] {
        if !columns.contains(&need) {
            return Err(err(last_line, format!("missing property {need:?}").to_lowercase()));
        }
    }
    let has_view = columns.contains(&Column::View);

    let mut points = Vec::with_capacity(count);
    let mut views = Vec::with_capacity(if has_view { count } else { 0 });
    for _ in 0..count {
        let (n, line) = lines
            .next()
            .ok_or_else(|| err(last_line + 1, format!("expected {count} vertices, got {}", points.len())))?;
        last_line = n;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != columns.len() {
            return Err(err(n, format!("expected {} values, got {}", columns.len(), fields.len())));
        }
        let mut p = [0.0; 3];
        for (col, f) in columns.iter().zip(&fields) {
            let slot = match col {
                Column::X => &mut p[0],
                Column::Y => &mut p[1],
                Column::Z => &mut p[2],
                Column::View => {
                    views.push(f.parse().map_err(|_| err(n, format!("bad view index `{f}`")))?);
                    continue;
                }
                Column::Other => continue,
            };
            *slot = f.parse().map_err(|_| err(n, format!("bad number `{f}`")))?;
        }
        points.push(p);
    }
    if let Some((n, line)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(err(n, format!("unexpected data after vertices: `{line}`")));
    }
    Ok(PointCloud {
        points,
        source_view: has_view.then_some(views),
    })
}
