//! NPY v1.0 reader and writer for 4-D attention tensors.
//!
//! Accepted element types are little-endian float16, float32 and uint16.
//! uint16 data is only read when the caller declares it bfloat16, because NPY
//! has no native bfloat16 tag. Every element is converted to the FP16
//! carrier on load.

use std::fs;
use std::path::Path;

use pasa_core::halfprec::{bf16_to_f64, F16Value};
use pasa_core::{Precision, Tensor4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const MAGIC: &[u8] = b"\x93NUMPY";
/// Magic, two version bytes and the u16 header length.
const PREAMBLE: usize = 10;

#[derive(Debug, Error)]
pub enum NpyError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("{path}: byte {offset}: {message}")]
    InFile {
        path: String,
        offset: usize,
        message: String,
    },
}

fn parse_err<T>(offset: usize, message: impl Into<String>) -> Result<T, NpyError> {
    Err(NpyError::Parse {
        offset,
        message: message.into(),
    })
}

/// Element interpretation requested by the caller.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    /// Use the type recorded in the file.
    #[default]
    Auto,
    F16,
    F32,
    /// Read uint16 payloads as bfloat16 bit patterns; float files are read
    /// as recorded.
    Bf16,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Stored {
    F16,
    F32,
    U16,
}

impl Stored {
    fn width(self) -> usize {
        match self {
            Stored::F32 => 4,
            _ => 2,
        }
    }
}

struct Header {
    stored: Stored,
    shape: [usize; 4],
    data_start: usize,
}

/// Finds `'key':` in the header dict and returns the offset just past it.
fn find_key(dict: &str, key: &str) -> Option<usize> {
    for quote in ['\'', '"'] {
        let pat = format!("{quote}{key}{quote}");
        if let Some(pos) = dict.find(&pat) {
            let rest = &dict[pos + pat.len()..];
            let colon = rest.find(':')?;
            if rest[..colon].trim().is_empty() {
                return Some(pos + pat.len() + colon + 1);
            }
        }
    }
    None
}

fn parse_header(bytes: &[u8]) -> Result<Header, NpyError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return parse_err(0, "missing \\x93NUMPY magic");
    }
    if bytes.len() < PREAMBLE {
        return parse_err(bytes.len(), "truncated preamble");
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return parse_err(6, format!("unsupported NPY version {major}.{minor}; expected 1.0"));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = PREAMBLE + header_len;
    if bytes.len() < data_start {
        return parse_err(bytes.len(), format!("header declares {header_len} bytes but the file ends early"));
    }
    let dict = std::str::from_utf8(&bytes[PREAMBLE..data_start])
        .map_err(|e| NpyError::Parse {
            offset: PREAMBLE + e.valid_up_to(),
            message: "header is not valid text".into(),
        })?;
    let base = PREAMBLE;

    let descr_at = find_key(dict, "descr").ok_or(NpyError::Parse {
        offset: base,
        message: "header has no 'descr'".into(),
    })?;
    let rest = dict[descr_at..].trim_start();
    let value_at = base + dict.len() - rest.len();
    let quote = rest.chars().next().filter(|c| *c == '\'' || *c == '"');
    let Some(quote) = quote else {
        return parse_err(value_at, "descr is not a string");
    };
    let end = rest[1..].find(quote).ok_or(NpyError::Parse {
        offset: value_at,
        message: "unterminated descr".into(),
    })?;
    let descr = &rest[1..1 + end];
    let stored = match descr {
        "<f2" => Stored::F16,
        "<f4" => Stored::F32,
        "<u2" => Stored::U16,
        "|u2" | "=u2" if cfg!(target_endian = "little") => Stored::U16,
        other => {
            return parse_err(
                value_at,
                format!("unsupported dtype {other:?}; expected '<f2', '<f4' or '<u2' (bfloat16)"),
            )
        }
    };

    let fortran_at = find_key(dict, "fortran_order").ok_or(NpyError::Parse {
        offset: base,
        message: "header has no 'fortran_order'".into(),
    })?;
    let rest = dict[fortran_at..].trim_start();
    if !rest.starts_with("False") {
        return parse_err(base + dict.len() - rest.len(), "only C-ordered arrays are supported");
    }

    let shape_at = find_key(dict, "shape").ok_or(NpyError::Parse {
        offset: base,
        message: "header has no 'shape'".into(),
    })?;
    let rest = dict[shape_at..].trim_start();
    let shape_offset = base + dict.len() - rest.len();
    if !rest.starts_with('(') {
        return parse_err(shape_offset, "shape is not a tuple");
    }
    let close = rest.find(')').ok_or(NpyError::Parse {
        offset: shape_offset,
        message: "unterminated shape tuple".into(),
    })?;
    let dims: Vec<usize> = rest[1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>())
        .collect::<Result<_, _>>()
        .or_else(|_| parse_err(shape_offset, format!("bad shape {:?}", &rest[..=close])))?;
    let shape: [usize; 4] = dims.as_slice().try_into().or_else(|_| {
        parse_err(
            shape_offset,
            format!("expected a 4-D (batch, heads, seq, dim) array, found {} dimensions", dims.len()),
        )
    })?;

    let expected = shape.iter().product::<usize>() * stored.width();
    let available = bytes.len() - data_start;
    if available != expected {
        return parse_err(
            data_start,
            format!("payload has {available} bytes but shape {shape:?} needs {expected}"),
        );
    }
    Ok(Header {
        stored,
        shape,
        data_start,
    })
}

/// Decodes an NPY image into an FP16-carrier tensor.
pub fn decode(bytes: &[u8], dtype: DType) -> Result<Tensor4, NpyError> {
    let header = parse_header(bytes)?;
    let stored = header.stored;
    match (dtype, stored) {
        (DType::Auto, Stored::U16) => {
            return parse_err(0, "uint16 payload needs --dtype bf16 to be read as bfloat16")
        }
        (DType::Auto | DType::Bf16, _) | (DType::F16, Stored::F16) | (DType::F32, Stored::F32) => {}
        (requested, found) => {
            return parse_err(0, format!("file holds {found:?} but --dtype {requested:?} was requested"))
        }
    }
    let payload = &bytes[header.data_start..];
    let data: Vec<f64> = match stored {
        Stored::F16 => payload
            .chunks_exact(2)
            .map(|c| F16Value::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f64())
            .collect(),
        Stored::F32 => payload
            .chunks_exact(4)
            .map(|c| Precision::Fp16.round(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect(),
        Stored::U16 => payload
            .chunks_exact(2)
            .map(|c| Precision::Fp16.round(bf16_to_f64(u16::from_le_bytes([c[0], c[1]]))))
            .collect(),
    };
    Tensor4::new(header.shape, data).map_err(|e| NpyError::Parse {
        offset: header.data_start,
        message: e.to_string(),
    })
}

pub fn load_tensor_file(path: &Path, dtype: DType) -> Result<Tensor4, NpyError> {
    let bytes = fs::read(path).map_err(|source| NpyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes, dtype).map_err(|e| match e {
        NpyError::Parse { offset, message } => NpyError::InFile {
            path: path.display().to_string(),
            offset,
            message,
        },
        other => other,
    })
}

/// Encodes a tensor as float16 (every value is rounded to FP16 first) or
/// float32.
pub fn encode(tensor: &Tensor4, as_f32: bool) -> Vec<u8> {
    let [b, h, s, d] = tensor.shape();
    let descr = if as_f32 { "<f4" } else { "<f2" };
    let mut dict = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': ({b}, {h}, {s}, {d}), }}");
    // Pad with spaces so the payload starts on a 64-byte boundary; the
    // header ends with a newline.
    let unpadded = PREAMBLE + dict.len() + 1;
    dict.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    dict.push('\n');

    let width = if as_f32 { 4 } else { 2 };
    let mut out = Vec::with_capacity(PREAMBLE + dict.len() + tensor.len() * width);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    for &x in tensor.data() {
        if as_f32 {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&F16Value::from_f64(x).to_bits().to_le_bytes());
        }
    }
    out
}

pub fn save_tensor_file(path: &Path, tensor: &Tensor4, as_f32: bool) -> Result<(), NpyError> {
    fs::write(path, encode(tensor, as_f32)).map_err(|source| NpyError::Io {
        path: path.display().to_string(),
        source,
    })
}
