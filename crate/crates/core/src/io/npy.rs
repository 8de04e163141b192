//! NPY v1.0 reader and writer for little-endian `f4`/`f8` C-ordered arrays.
//!
//! Layout: the magic `\x93NUMPY`, version bytes `1 0`, a little-endian `u16`
//! header length, then an ASCII Python dict literal padded with spaces and
//! terminated by `\n` so the data starts on a 64-byte boundary.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 6] = *b"\x93NUMPY";
const ALIGNMENT: usize = 64;
const PREAMBLE: usize = MAGIC.len() + 2 + 2;

/// On-disk element type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::F64 => "<f8",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_descr(descr: &str) -> Result<Self> {
        match descr {
            "<f4" => Ok(Dtype::F32),
            "<f8" => Ok(Dtype::F64),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }
}

/// A dense row-major array held in `f64` regardless of its file dtype.
#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Element type the array was read as (or should be written as).
    pub dtype: Dtype,
}

impl NpyArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, dtype: Dtype) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::SchemaViolation("array rank must be at least 1".into()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::SchemaViolation(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data, dtype })
    }
}

/// Header dict formatted the way numpy writes it, e.g.
/// `{'descr': '<f8', 'fortran_order': False, 'shape': (2, 2), }`.
fn header_dict(dtype: Dtype, shape: &[usize]) -> String {
    let dims = match shape {
        [d] => format!("({d},)"),
        _ => {
            let parts: Vec<String> = shape.iter().map(usize::to_string).collect();
            format!("({})", parts.join(", "))
        }
    };
    format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {dims}, }}",
        dtype.descr()
    )
}

pub fn write_npy<W: Write>(writer: &mut W, array: &NpyArray) -> Result<()> {
    if array.shape.is_empty() {
        return Err(Error::SchemaViolation("array rank must be at least 1".into()));
    }
    let dict = header_dict(array.dtype, &array.shape);
    let unpadded = PREAMBLE + dict.len() + 1;
    let total = unpadded.div_ceil(ALIGNMENT) * ALIGNMENT;
    let header_len = total - PREAMBLE;
    let header_len_u16 = u16::try_from(header_len)
        .map_err(|_| Error::SchemaViolation("header too long for NPY v1.0".into()))?;

    let mut header = Vec::with_capacity(total);
    header.extend_from_slice(&MAGIC);
    header.extend_from_slice(&[1, 0]);
    header.extend_from_slice(&header_len_u16.to_le_bytes());
    header.extend_from_slice(dict.as_bytes());
    header.resize(total - 1, b' ');
    header.push(b'\n');
    writer.write_all(&header)?;

    let mut body = Vec::with_capacity(array.data.len() * array.dtype.size());
    match array.dtype {
        Dtype::F32 => array
            .data
            .iter()
            .for_each(|&x| body.extend_from_slice(&(x as f32).to_le_bytes())),
        Dtype::F64 => array
            .data
            .iter()
            .for_each(|&x| body.extend_from_slice(&x.to_le_bytes())),
    }
    writer.write_all(&body)?;
    Ok(())
}

pub fn read_npy<R: Read>(reader: &mut R) -> Result<NpyArray> {
    let mut preamble = [0u8; PREAMBLE];
    read_exact_or_truncated(reader, &mut preamble)?;
    if preamble[..6] != MAGIC {
        return Err(Error::BadMagic);
    }
    if preamble[6..8] != [1, 0] {
        return Err(Error::UnsupportedVersion(preamble[6], preamble[7]));
    }
    let header_len = u16::from_le_bytes([preamble[8], preamble[9]]) as usize;
    let mut header = vec![0u8; header_len];
    read_exact_or_truncated(reader, &mut header)?;
    let header = std::str::from_utf8(&header)
        .map_err(|_| Error::ParseError("NPY header is not ASCII".into()))?;
    let parsed = parse_header(header)?;
    if parsed.fortran_order {
        return Err(Error::FortranOrderUnsupported);
    }
    let dtype = Dtype::from_descr(&parsed.descr)?;
    if parsed.shape.is_empty() {
        return Err(Error::SchemaViolation("scalar arrays are not supported".into()));
    }

    let count: usize = parsed.shape.iter().product();
    let expected = count * dtype.size();
    let mut body = Vec::with_capacity(expected);
    reader.take(expected as u64).read_to_end(&mut body)?;
    if body.len() != expected {
        return Err(Error::TruncatedData {
            expected,
            found: body.len(),
        });
    }
    let data = match dtype {
        Dtype::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    };
    Ok(NpyArray {
        shape: parsed.shape,
        data,
        dtype,
    })
}

fn read_exact_or_truncated<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..])? {
            0 => {
                return Err(Error::TruncatedData {
                    expected: buf.len(),
                    found: filled,
                })
            }
            k => filled += k,
        }
    }
    Ok(())
}

struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

/// Parses the restricted dict literal numpy emits for simple dtypes.
fn parse_header(text: &str) -> Result<Header> {
    let bad = |what: &str| Error::ParseError(format!("malformed NPY header: {what}"));
    let body = text
        .trim_end_matches(['\n', ' ', '\0'])
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| bad("expected a dict"))?;

    let mut descr = None;
    let mut fortran_order = None;
    let mut shape = None;
    let mut rest = body.trim_start();
    while !rest.is_empty() {
        let quote = rest.chars().next().filter(|c| *c == '\'' || *c == '"').ok_or_else(|| bad("key"))?;
        let end = rest[1..].find(quote).ok_or_else(|| bad("unterminated key"))? + 1;
        let key = &rest[1..end];
        rest = rest[end + 1..].trim_start().strip_prefix(':').ok_or_else(|| bad("missing ':'"))?.trim_start();

        let value_end = if rest.starts_with('(') {
            rest.find(')').ok_or_else(|| bad("unterminated tuple"))? + 1
        } else if rest.starts_with('\'') || rest.starts_with('"') {
            let q = rest.as_bytes()[0] as char;
            rest[1..].find(q).ok_or_else(|| bad("unterminated string"))? + 2
        } else {
            rest.find(',').unwrap_or(rest.len())
        };
        let value = rest[..value_end].trim();
        match key {
            "descr" => descr = Some(value.trim_matches(['\'', '"']).to_string()),
            "fortran_order" => {
                fortran_order = Some(match value {
                    "True" => true,
                    "False" => false,
                    _ => return Err(bad("fortran_order")),
                })
            }
            "shape" => {
                let inner = value
                    .strip_prefix('(')
                    .and_then(|s| s.strip_suffix(')'))
                    .ok_or_else(|| bad("shape"))?;
                let dims = inner
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<usize>().map_err(|_| bad("shape entry")))
                    .collect::<Result<Vec<_>>>()?;
                shape = Some(dims);
            }
            _ => {}
        }
        rest = rest[value_end..].trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }

    Ok(Header {
        descr: descr.ok_or_else(|| bad("missing descr"))?,
        fortran_order: fortran_order.ok_or_else(|| bad("missing fortran_order"))?,
        shape: shape.ok_or_else(|| bad("missing shape"))?,
    })
}

/// Reads an NPY file; `dtype` is the element type the caller expects on disk.
pub fn load_array(path: &Path, dtype: Dtype) -> Result<NpyArray> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let array = read_npy(&mut BufReader::new(file))?;
    if array.dtype != dtype {
        return Err(Error::UnsupportedDtype(format!(
            "{} (expected {})",
            array.dtype.descr(),
            dtype.descr()
        )));
    }
    Ok(array)
}

pub fn save_array(path: &Path, array: &NpyArray) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_npy(&mut writer, array)?;
    writer.flush()?;
    Ok(())
}
