//! Minimal reader/writer for the NPY v1.0 container.
//!
//! Only little-endian `f8`/`f4` payloads in C order are supported. Everything
//! is widened to `f64` on read; writes are always `<f8`.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) const MAGIC: [u8; 6] = *b"\x93NUMPY";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F8,
    F4,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F8 => 8,
            Dtype::F4 => 4,
        }
    }
}

/// A dense array as stored on disk: shape plus row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub dtype: Dtype,
}

#[derive(Debug)]
struct Header {
    dtype: Dtype,
    fortran_order: bool,
    shape: Vec<usize>,
}

pub fn read<R: Read>(reader: &mut R) -> Result<NpyArray> {
    let mut prefix = [0u8; 10];
    reader
        .read_exact(&mut prefix)
        .map_err(|_| Error::Format("file shorter than npy preamble".into()))?;
    if prefix[..6] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    if prefix[6] != 1 || prefix[7] != 0 {
        return Err(Error::Format(format!(
            "unsupported npy version {}.{}",
            prefix[6], prefix[7]
        )));
    }
    let header_len = u16::from_le_bytes([prefix[8], prefix[9]]) as usize;
    let mut raw = vec![0u8; header_len];
    reader
        .read_exact(&mut raw)
        .map_err(|_| Error::Format("truncated header".into()))?;
    let text = std::str::from_utf8(&raw).map_err(|_| Error::Format("header is not ASCII".into()))?;
    let header = parse_header(text)?;
    if header.fortran_order {
        return Err(Error::Format("Fortran-order arrays are not supported".into()));
    }

    let count: usize = header.shape.iter().product();
    let width = header.dtype.width();
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != count * width {
        return Err(Error::Format(format!(
            "payload has {} bytes, header implies {}",
            payload.len(),
            count * width
        )));
    }
    let data = match header.dtype {
        Dtype::F8 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F4 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok(NpyArray {
        shape: header.shape,
        data,
        dtype: header.dtype,
    })
}

pub fn write<W: Write>(writer: &mut W, shape: &[usize], data: &[f64]) -> Result<()> {
    let count: usize = shape.iter().product();
    if count != data.len() {
        return Err(Error::Shape(format!(
            "shape {:?} does not fit {} values",
            shape,
            data.len()
        )));
    }
    let shape_str = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut dict = format!(
        "{{'descr': '<f8', 'fortran_order': False, 'shape': {}, }}",
        shape_str
    );
    // preamble + header (incl. trailing newline) padded to a multiple of 64
    let unpadded = MAGIC.len() + 4 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');
    let header_len = u16::try_from(dict.len())
        .map_err(|_| Error::Format("header too long for npy v1.0".into()))?;

    writer.write_all(&MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&header_len.to_le_bytes())?;
    writer.write_all(dict.as_bytes())?;
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    writer.write_all(&buf)?;
    Ok(())
}

fn parse_header(text: &str) -> Result<Header> {
    let body = text.trim().trim_end_matches(',');
    let body = body
        .strip_prefix('{')
        .and_then(|b| b.trim_end().strip_suffix('}'))
        .ok_or_else(|| Error::Format("header is not a dict".into()))?;

    let descr = dict_value(body, "descr")?;
    let descr = descr.trim().trim_matches(|c| c == '\'' || c == '"');
    let dtype = match descr {
        "<f8" => Dtype::F8,
        "<f4" => Dtype::F4,
        other => {
            return Err(Error::Format(format!(
                "unsupported dtype '{other}' (expected '<f8' or '<f4')"
            )))
        }
    };

    let fortran_order = match dict_value(body, "fortran_order")?.trim() {
        "False" => false,
        "True" => true,
        other => return Err(Error::Format(format!("bad fortran_order value '{other}'"))),
    };

    let shape_raw = dict_value(body, "shape")?;
    let inner = shape_raw
        .trim()
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| Error::Format("shape is not a tuple".into()))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim_end_matches('L')
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("bad shape entry '{s}'")))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Header {
        dtype,
        fortran_order,
        shape,
    })
}

/// Returns the raw text of the value stored under `key`.
fn dict_value<'a>(body: &'a str, key: &str) -> Result<&'a str> {
    let missing = || Error::Format(format!("header lacks '{key}'"));
    let pos = body
        .find(&format!("'{key}'"))
        .or_else(|| body.find(&format!("\"{key}\"")))
        .ok_or_else(missing)?;
    let rest = &body[pos + key.len() + 2..];
    let rest = rest.trim_start().strip_prefix(':').ok_or_else(missing)?.trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|i| i + 1)
    } else if let Some(stripped) = rest.strip_prefix('\'') {
        stripped.find('\'').map(|i| i + 2)
    } else {
        Some(rest.find(',').unwrap_or(rest.len()))
    }
    .ok_or_else(|| Error::Format(format!("unterminated value for '{key}'")))?;
    Ok(&rest[..end])
}
