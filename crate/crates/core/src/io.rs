//! Cloud file formats.
//!
//! CSV: a `# dim=<d>` header line followed by one comma-separated row per
//! point. Values are written in Rust's shortest round-trip representation, so
//! reading a file back yields the identical `f64`s.
//!
//! Packed binary (little-endian):
//!
//! | offset | size  | content                 |
//! |--------|-------|-------------------------|
//! | 0      | 4     | magic `FRPC`            |
//! | 4      | 4     | version `u32` = 1       |
//! | 8      | 8     | `u64` N                 |
//! | 16     | 8     | `u64` d                 |
//! | 24     | 8·N·d | row-major IEEE-754 `f64` |

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;

pub const CLOUD_MAGIC: [u8; 4] = *b"FRPC";
pub const CLOUD_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudFormat {
    Csv,
    #[serde(alias = "binary")]
    PackedBinary,
}

impl CloudFormat {
    /// `.csv` is CSV; anything else is packed binary.
    pub fn from_path(path: &Path) -> CloudFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => CloudFormat::Csv,
            _ => CloudFormat::PackedBinary,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            CloudFormat::Csv => "csv",
            CloudFormat::PackedBinary => "bin",
        }
    }
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    match format {
        CloudFormat::Csv => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_csv(&text, path)
        }
        CloudFormat::PackedBinary => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_binary(&bytes, path)
        }
    }
}

pub fn save_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    let bytes = match format {
        CloudFormat::Csv => csv_string(cloud).into_bytes(),
        CloudFormat::PackedBinary => encode_binary(cloud),
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn csv_string(cloud: &PointCloud) -> String {
    let mut out = format!("# dim={}\n", cloud.dim());
    for i in 0..cloud.len() {
        let row = cloud.row(i);
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

fn parse_header(line: &str) -> Option<&str> {
    let line = line.trim();
    let line = line.strip_prefix('#').unwrap_or(line).trim();
    line.strip_prefix("dim=").or_else(|| line.strip_prefix("dim =")).map(str::trim)
}

/// Parses the CSV format. Row numbers in errors are 1-based file line numbers.
pub fn parse_csv(text: &str, path: &Path) -> Result<PointCloud> {
    let mut header_dim = None;
    let mut width = None;
    let mut data = Vec::new();
    let mut n = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let row = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(d) = parse_header(trimmed) {
            if n > 0 || header_dim.is_some() {
                return Err(Error::Format {
                    path: path.into(),
                    message: format!("unexpected header at line {row}"),
                });
            }
            let d: usize = d.parse().map_err(|_| Error::Format {
                path: path.into(),
                message: format!("bad dim header {trimmed:?}"),
            })?;
            header_dim = Some(d);
            width = Some(d);
            continue;
        }
        if trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let expected = *width.get_or_insert(fields.len());
        if fields.len() != expected {
            return Err(Error::RaggedRow {
                path: path.into(),
                row,
                expected,
                found: fields.len(),
            });
        }
        for (field, s) in fields.iter().enumerate() {
            let v: f64 = s.parse().map_err(|_| Error::ParseField {
                path: path.into(),
                row,
                field: field + 1,
                value: s.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteField {
                    path: path.into(),
                    row,
                    field: field + 1,
                    value: s.to_string(),
                });
            }
            data.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    PointCloud::from_flat(n, width.expect("at least one row"), data)
}

pub fn encode_binary(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * cloud.as_slice().len());
    out.extend_from_slice(&CLOUD_MAGIC);
    out.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    out.extend_from_slice(&(cloud.dim() as u64).to_le_bytes());
    for v in cloud.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_binary(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let mut r = ByteReader::new(bytes, path);
    if r.take(4)? != CLOUD_MAGIC {
        return Err(r.error("bad magic, not a packed point cloud"));
    }
    let version = r.u32()?;
    if version != CLOUD_VERSION {
        return Err(r.error(&format!("unsupported version {version}")));
    }
    let n = r.u64()? as usize;
    let d = r.u64()? as usize;
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    let count = n
        .checked_mul(d)
        .filter(|c| c.checked_mul(8) == Some(r.remaining()))
        .ok_or_else(|| r.error("payload length does not match header"))?;
    let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    PointCloud::from_flat(n, d, data)
}

/// Little-endian cursor used by the binary decoders.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub(crate) fn error(&self, message: &str) -> Error {
        Error::Format {
            path: self.path.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        if self.remaining() < k {
            return Err(self.error("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
