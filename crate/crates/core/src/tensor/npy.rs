//! NPY v1.0 container I/O (little-endian float payloads, C order).

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"\x93NUMPY";

pub fn npy_read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    npy_decode(&bytes)
}

pub fn npy_write(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, npy_encode(t)).map_err(|e| Error::io(path, e))
}

pub fn npy_encode(t: &Tensor) -> Vec<u8> {
    let shape = match t.shape() {
        [n] => format!("({n},)"),
        dims => format!("({})", dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape}, }}");
    // magic(6) + version(2) + len(2) + header + '\n' padded to a multiple of 64
    let unpadded = MAGIC.len() + 4 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn npy_decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("missing NPY magic".into()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize, 12),
        _ => return Err(Error::Format(format!("unsupported NPY version {major}.{minor}"))),
    };
    let end = start + header_len;
    let header = bytes.get(start..end).ok_or_else(|| Error::Format("truncated NPY header".into()))?;
    let header = std::str::from_utf8(header).map_err(|_| Error::Format("header is not text".into()))?;

    let descr = dict_value(header, "descr")?;
    let descr = descr.trim_matches(|c| c == '\'' || c == '"');
    let width = match descr {
        "<f4" => 4,
        "<f8" => 8,
        other => return Err(Error::UnsupportedDtype(other.to_string())),
    };
    match dict_value(header, "fortran_order")? {
        "False" => {}
        "True" => return Err(Error::Format("Fortran-ordered arrays are not supported".into())),
        other => return Err(Error::Format(format!("bad fortran_order `{other}`"))),
    }
    let shape = parse_shape(dict_value(header, "shape")?)?;

    let n: usize = shape.iter().product();
    let payload = &bytes[end..];
    if payload.len() != n * width {
        return Err(Error::Format(format!("payload has {} bytes, shape {shape:?} needs {}", payload.len(), n * width)));
    }
    let data: Vec<f32> = if width == 4 {
        payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
    } else {
        payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")) as f32).collect()
    };
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Tensor::new(shape, data)
}

/// Raw text of `key`'s value in a Python dict literal. Handles the tuple
/// value of `shape` by scanning to the closing parenthesis.
fn dict_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let missing = || Error::Format(format!("NPY header lacks `{key}`"));
    let pos = header.find(&format!("'{key}'")).or_else(|| header.find(&format!("\"{key}\""))).ok_or_else(missing)?;
    let rest = &header[pos + key.len() + 2..];
    let rest = rest.trim_start().strip_prefix(':').ok_or_else(missing)?.trim_start();
    let end = if rest.starts_with('(') { rest.find(')').map(|i| i + 1) } else { rest.find([',', '}']) }
        .ok_or_else(missing)?;
    Ok(rest[..end].trim())
}

fn parse_shape(text: &str) -> Result<Vec<usize>> {
    let inner = text
        .strip_prefix('(')
        .and_then(|t| t.strip_suffix(')'))
        .ok_or_else(|| Error::Format(format!("bad shape `{text}`")))?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| Error::Format(format!("bad dimension `{s}`"))))
        .collect()
}
