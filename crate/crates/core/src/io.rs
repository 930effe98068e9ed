//! File formats: binary matrices, CSV matrices, key-value run configs and
//! CSV number formatting.
//!
//! A `.bfmat` file is a 24-byte header followed by the payload:
//!
//! | bytes  | content                                          |
//! |--------|--------------------------------------------------|
//! | 0..6   | magic `BFMAT1`                                   |
//! | 6      | layout tag, `C` column-major or `R` row-major    |
//! | 7      | reserved, 0                                      |
//! | 8..16  | rows, u64 little-endian                          |
//! | 16..24 | cols, u64 little-endian                          |
//! | 24..   | rows·cols f64 little-endian in the tagged layout |
//!
//! Files are always written column-major. Anything without the magic is
//! parsed as comma-separated text, one matrix row per line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ShapeBuilder};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"BFMAT1";
pub const HEADER_LEN: usize = 24;
const LAYOUT_COL_MAJOR: u8 = b'C';
const LAYOUT_ROW_MAJOR: u8 = b'R';

/// Serializes `m` as a column-major `.bfmat` payload.
pub fn encode_matrix(m: &Array2<f64>) -> Vec<u8> {
    let (rows, cols) = m.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * rows * cols);
    out.extend_from_slice(MAGIC);
    out.push(LAYOUT_COL_MAJOR);
    out.push(0);
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for c in m.columns() {
        for v in c {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), message: message.into() }
}

/// Parses a `.bfmat` payload. `path` only labels errors.
pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    if bytes.len() < HEADER_LEN || &bytes[..6] != MAGIC {
        return Err(format_err(path, "missing BFMAT1 header"));
    }
    let layout = bytes[6];
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let count = rows
        .checked_mul(cols)
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| format_err(path, "matrix dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count * 8 {
        return Err(format_err(
            path,
            format!("expected {count} values for {rows}x{cols}, found {} bytes", payload.len()),
        ));
    }
    let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let shape = (rows as usize, cols as usize);
    let m = match layout {
        LAYOUT_COL_MAJOR => Array2::from_shape_vec(shape.f(), values),
        LAYOUT_ROW_MAJOR => Array2::from_shape_vec(shape, values),
        other => return Err(format_err(path, format!("unknown layout tag {other:#04x}"))),
    }
    .map_err(|e| format_err(path, e.to_string()))?;
    Ok(m)
}

/// Parses comma-separated rows; blank lines and `#` comments are skipped.
pub fn parse_csv_matrix(text: &str, path: &Path) -> Result<Array2<f64>> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format_err(path, format!("line {}: {e}", lineno + 1)))?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(format_err(path, format!("line {}: {} fields, expected {c}", lineno + 1, row.len())))
            }
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| format_err(path, "no data rows"))?;
    Array2::from_shape_vec((rows, cols), values).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    fs::write(path, encode_matrix(m))?;
    Ok(())
}

/// Reads a `.bfmat` file, or a CSV matrix when the magic is absent.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| format_err(path, e.to_string()))?;
    if bytes.starts_with(MAGIC) {
        decode_matrix(&bytes, path)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| format_err(path, "neither BFMAT1 nor UTF-8 CSV"))?;
        parse_csv_matrix(&text, path)
    }
}

/// Formats a float so that parsing it back yields the same bits; infinities
/// are written `inf` / `-inf`.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// Writes `iteration,objective` rows.
pub fn write_trace_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut s = String::from("iteration,objective\n");
    for (i, j) in trace.iter().enumerate() {
        let _ = writeln!(s, "{i},{}", fmt_f64(*j));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|f| f.trim().parse::<f64>().ok())
                .ok_or_else(|| format_err(path, format!("bad trace row '{l}'")))
        })
        .collect()
}

/// Flat `key = value` configuration, one entry per line, `#` comments.
/// Keys are restricted to a caller-supplied vocabulary.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, allowed: &[&str], origin: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format_err(origin, format!("line {}: expected key = value", lineno + 1)))?;
            let key = k.trim().replace('-', "_");
            if !allowed.contains(&key.as_str()) {
                return Err(format_err(origin, format!("line {}: unknown key '{key}'", lineno + 1)));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(format_err(origin, format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
        }
        Ok(RunConfig { entries })
    }

    pub fn load(path: &Path, allowed: &[&str]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| format_err(path, e.to_string()))?;
        Self::parse(&text, allowed, path)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Parses `key` if present.
    pub fn parsed<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::InvalidArgument(format!("config key '{key}' = '{v}': {e}"))))
            .transpose()
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    /// Sorted `key = value` lines.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn header_layout() {
        let m = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let bytes = encode_matrix(&m);
        assert_eq!(&bytes[..6], b"BFMAT1");
        assert_eq!(bytes[6], b'C');
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
        // column-major: second value is m[1, 0]
        assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()), 4.0);
        assert_eq!(bytes.len(), 24 + 6 * 8);
        assert_eq!(decode_matrix(&bytes, Path::new("m")).unwrap(), m);
    }

    #[test]
    fn row_major_tag_accepted() {
        let mut bytes = Vec::from(&MAGIC[..]);
        bytes.extend_from_slice(&[b'R', 0]);
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        for v in [1.0f64, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(decode_matrix(&bytes, Path::new("m")).unwrap(), array![[1.0, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn truncated_and_bad_tag_rejected() {
        let mut bytes = encode_matrix(&array![[1.0, 2.0]]);
        bytes.pop();
        assert!(decode_matrix(&bytes, Path::new("m")).is_err());
        let mut bytes = encode_matrix(&array![[1.0, 2.0]]);
        bytes[6] = b'X';
        assert!(decode_matrix(&bytes, Path::new("m")).is_err());
        assert!(decode_matrix(b"BFMAT", Path::new("m")).is_err());
    }

    #[test]
    fn csv_matrix() {
        let m = parse_csv_matrix("# comment\n1, 2.5\n\n3,4e-3\n", Path::new("x.csv")).unwrap();
        assert_eq!(m, array![[1.0, 2.5], [3.0, 4e-3]]);
        assert!(parse_csv_matrix("1,2\n3\n", Path::new("x.csv")).is_err());
        assert!(parse_csv_matrix("1,a\n", Path::new("x.csv")).is_err());
        assert!(parse_csv_matrix("# only\n", Path::new("x.csv")).is_err());
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.0, 1.0, -2.5, 1e-300, 123456.789, 1e20, f64::INFINITY, 0.1 + 0.2, 5e-324] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
    }

    #[test]
    fn run_config() {
        let allowed = ["model", "beta", "max_iter"];
        let cfg = RunConfig::parse("model = slmm\n# c\nmax-iter = 20\n", &allowed, Path::new("c")).unwrap();
        assert_eq!(cfg.get("model"), Some("slmm"));
        assert_eq!(cfg.parsed::<usize>("max_iter").unwrap(), Some(20));
        assert_eq!(cfg.parsed::<f64>("beta").unwrap(), None);
        assert!(RunConfig::parse("gamma = 1\n", &allowed, Path::new("c")).is_err());
        assert!(RunConfig::parse("beta 1\n", &allowed, Path::new("c")).is_err());
        assert!(RunConfig::parse("beta = 1\nbeta = 2\n", &allowed, Path::new("c")).is_err());
        let again = RunConfig::parse(&cfg.render(), &allowed, Path::new("c")).unwrap();
        assert_eq!(again, cfg);
    }
}
