//! Point-cloud files.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! "SPTC"          4-byte magic
//! version: u32    currently 1
//! n: u64          point count
//! c: u32          feature channels
//! has_labels: u8
//! n × 3 f32       positions
//! n × c f32       features
//! n × u32         labels, if present
//! ```
//!
//! Text files hold one point per line, `x y z f_1 .. f_c [label]`. Blank lines
//! and lines starting with `#` are skipped, except a leading
//! `# channels <c> labels <0|1>` header, which fixes the column layout.
//! Without it, six columns mean rgb and seven mean rgb plus label.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub const CLOUD_MAGIC: &[u8; 4] = b"SPTC";
pub const CLOUD_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Text,
    Binary,
}

impl CloudFormat {
    /// `.txt`, `.xyz` and `.pts` are text; everything else is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("txt" | "xyz" | "pts") => CloudFormat::Text,
            _ => CloudFormat::Binary,
        }
    }
}

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Stores values as 32-bit floats, so a cloud survives the round trip exactly
/// once it has been through [`PointCloud::round_to_f32`].
pub fn encode_binary(cloud: &PointCloud) -> Vec<u8> {
    let n = cloud.len();
    let mut out = Vec::with_capacity(HEADER_LEN + n * (3 + cloud.channels + 1) * 4);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(cloud.channels as u32).to_le_bytes());
    out.push(u8::from(cloud.labels.is_some()));
    for v in cloud.positions.iter().flatten().chain(&cloud.features) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if let Some(labels) = &cloud.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

pub fn decode_binary(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if bytes.len() < HEADER_LEN {
        return Err(parse_err(
            path,
            format!("truncated header: expected {HEADER_LEN} bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[..4] != CLOUD_MAGIC {
        return Err(parse_err(path, format!("bad magic at byte 0: {:?}", &bytes[..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != CLOUD_VERSION {
        return Err(parse_err(path, format!("unsupported version {version} at byte 4")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let c = u32_at(16) as usize;
    let has_labels = match bytes[20] {
        0 => false,
        1 => true,
        other => return Err(parse_err(path, format!("has_labels byte at offset 20 is {other}, expected 0 or 1"))),
    };
    let per_point = (3 + c + usize::from(has_labels)) as u128 * 4;
    let expected = HEADER_LEN as u128 + n as u128 * per_point;
    if bytes.len() as u128 != expected {
        return Err(parse_err(
            path,
            format!("payload length mismatch: expected {expected} bytes for {n} points, found {}", bytes.len()),
        ));
    }
    let n = n as usize;
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let mut offset = HEADER_LEN;
    let mut read = |count: usize| -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(count);
        for _ in 0..count {
            let x = f32_at(offset);
            if !x.is_finite() {
                return Err(parse_err(path, format!("non-finite value {x} at byte {offset}")));
            }
            v.push(x as f64);
            offset += 4;
        }
        Ok(v)
    };
    let flat = read(3 * n)?;
    let features = read(c * n)?;
    let positions = flat.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
    let labels = has_labels.then(|| (0..n).map(|i| u32_at(offset + 4 * i)).collect());
    PointCloud::new(positions, features, c, labels)
}

/// Text rendering with shortest round-trip formatting of each value.
pub fn encode_text(cloud: &PointCloud) -> String {
    let mut out = String::new();
    let standard = cloud.channels == 3;
    if !standard {
        let _ = writeln!(out, "# channels {} labels {}", cloud.channels, u8::from(cloud.labels.is_some()));
    }
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        let _ = write!(out, "{} {} {}", p[0], p[1], p[2]);
        for f in cloud.feature_row(i) {
            let _ = write!(out, " {f}");
        }
        if let Some(l) = &cloud.labels {
            let _ = write!(out, " {}", l[i]);
        }
        out.push('\n');
    }
    out
}

fn parse_header(line: &str) -> Option<(usize, bool)> {
    let mut it = line.trim_start_matches('#').split_whitespace();
    if it.next()? != "channels" {
        return None;
    }
    let c = it.next()?.parse().ok()?;
    if it.next()? != "labels" {
        return None;
    }
    let l = match it.next()? {
        "0" => false,
        "1" => true,
        _ => return None,
    };
    Some((c, l))
}

pub fn decode_text(text: &str, path: &Path) -> Result<PointCloud> {
    let mut layout: Option<(usize, bool)> = None;
    let mut positions = Vec::new();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if positions.is_empty() && layout.is_none() {
                layout = parse_header(line);
            }
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let (c, has_label) = match layout {
            Some(l) => l,
            None => match cols.len() {
                6 => (3, false),
                7 => (3, true),
                k => return Err(parse_err(path, format!("line {line_no}: expected 6 or 7 columns, found {k}"))),
            },
        };
        layout = Some((c, has_label));
        let want = 3 + c + usize::from(has_label);
        if cols.len() != want {
            return Err(parse_err(path, format!("line {line_no}: expected {want} columns, found {}", cols.len())));
        }
        let mut vals = Vec::with_capacity(3 + c);
        for (k, s) in cols[..3 + c].iter().enumerate() {
            let v: f64 = s
                .parse()
                .map_err(|_| parse_err(path, format!("line {line_no}, column {}: `{s}` is not a number", k + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(path, format!("line {line_no}, column {}: non-finite value", k + 1)));
            }
            vals.push(v);
        }
        positions.push([vals[0], vals[1], vals[2]]);
        features.extend_from_slice(&vals[3..]);
        if has_label {
            let s = cols[3 + c];
            labels.push(
                s.parse::<u32>()
                    .map_err(|_| parse_err(path, format!("line {line_no}: label `{s}` is not a non-negative integer")))?,
            );
        }
    }
    let (c, has_label) = layout.unwrap_or((3, false));
    PointCloud::new(positions, features, c, has_label.then_some(labels))
}

/// Reads either format; binary files are recognised by their magic.
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(CLOUD_MAGIC) || CloudFormat::from_path(path) == CloudFormat::Binary {
        decode_binary(&bytes, path)
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|e| parse_err(path, format!("not utf-8 at byte {}", e.valid_up_to())))?;
        decode_text(text, path)
    }
}

/// Writes text or binary according to the file extension.
pub fn write_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    cloud.validate()?;
    let bytes = match CloudFormat::from_path(path) {
        CloudFormat::Text => encode_text(cloud).into_bytes(),
        CloudFormat::Binary => encode_binary(cloud),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
