//! Spatial heatmaps and masks as binary PGM (P5) or plain CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapFormat {
    Pgm,
    Csv,
}

impl std::str::FromStr for HeatmapFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "pgm" => Ok(HeatmapFormat::Pgm),
            "csv" => Ok(HeatmapFormat::Csv),
            other => Err(format!("unknown heatmap format {other:?}")),
        }
    }
}

/// Formats with 17 significant digits.
pub fn full_precision(x: f64) -> String {
    format!("{x:.16e}")
}

/// Splits a per-token vector into its spatial grid values (row-major) and
/// the `(token, value)` pairs of the special tokens.
pub fn split_spatial(
    values: &[f64],
    grid: (usize, usize),
    special_tokens: &[usize],
) -> Result<(Vec<f64>, Vec<(usize, f64)>)> {
    let (h, w) = grid;
    let mismatch = || Error::GridMismatch {
        height: h,
        width: w,
        len: values.len().saturating_sub(special_tokens.len()),
    };
    if special_tokens.iter().any(|&t| t >= values.len()) || values.len() != h * w + special_tokens.len() {
        return Err(mismatch());
    }
    let mut spatial = Vec::with_capacity(h * w);
    let mut special = Vec::with_capacity(special_tokens.len());
    for (i, &x) in values.iter().enumerate() {
        if special_tokens.contains(&i) {
            special.push((i, x));
        } else {
            spatial.push(x);
        }
    }
    if spatial.len() != h * w {
        return Err(mismatch());
    }
    Ok((spatial, special))
}

/// Min-max normalizes to `0..=255`. A zero range maps everything to 0.
pub fn quantize(values: &[f64]) -> Vec<u8> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    values
        .iter()
        .map(|&x| {
            if range > 0.0 {
                ((x - min) / range * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height, "pixel count must match the grid");
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes)?;
    Ok(())
}

/// Row-major values of an 8-bit PGM (P5), with its `(height, width)`.
pub fn read_pgm(path: &Path) -> Result<((usize, usize), Vec<u8>)> {
    let bytes = read(path)?;
    let bad = |msg: &str| Error::ParseError(format!("{}: {msg}", path.display()));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    pos += 1; // single whitespace byte after maxval
    let pixels = bytes.get(pos..pos + width * height).ok_or(Error::TruncatedData {
        expected: width * height,
        found: bytes.len().saturating_sub(pos),
    })?;
    Ok(((height, width), pixels.to_vec()))
}

/// One line per grid row, comma separated, no header.
pub fn write_csv_grid(path: &Path, width: usize, values: &[f64]) -> Result<()> {
    let mut out = String::new();
    for row in values.chunks(width) {
        let cells: Vec<String> = row.iter().map(|&x| full_precision(x)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a rectangular CSV of numbers; returns `(height, width)` and row-major values.
pub fn read_csv_grid(path: &Path) -> Result<((usize, usize), Vec<f64>)> {
    let text = String::from_utf8(read(path)?)
        .map_err(|_| Error::ParseError(format!("{}: not UTF-8", path.display())))?;
    let mut width = None;
    let mut values = Vec::new();
    let mut height = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| {
                c.trim().parse::<f64>().map_err(|_| {
                    Error::ParseError(format!("{}:{}: bad number {c:?}", path.display(), lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::ParseError(format!(
                    "{}:{}: ragged row",
                    path.display(),
                    lineno + 1
                )))
            }
            _ => {}
        }
        values.extend(row);
        height += 1;
    }
    let width = width.ok_or_else(|| Error::ParseError(format!("{}: empty grid", path.display())))?;
    Ok(((height, width), values))
}

/// Loads a ground-truth mask from PGM (nonzero = foreground) or CSV of 0/1,
/// chosen by file extension.
pub fn load_mask(path: &Path) -> Result<((usize, usize), Vec<bool>)> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let (dims, values) = read_csv_grid(path)?;
        Ok((dims, values.iter().map(|&x| x != 0.0).collect()))
    } else {
        let (dims, pixels) = read_pgm(path)?;
        Ok((dims, pixels.iter().map(|&p| p != 0).collect()))
    }
}

pub fn write_mask_pgm(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let pixels: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_pgm(path, width, height, &pixels)
}

/// `<stem>_special.csv` next to `path`.
pub fn special_sidecar(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}_special.csv"))
}

/// Writes the spatial part of `values` as a heatmap and, when there are
/// special tokens, their values to a `token_index,value` sidecar CSV.
pub fn export_heatmap(
    values: &[f64],
    grid: (usize, usize),
    special_tokens: &[usize],
    path: &Path,
    format: HeatmapFormat,
) -> Result<()> {
    let (spatial, special) = split_spatial(values, grid, special_tokens)?;
    let (h, w) = grid;
    match format {
        HeatmapFormat::Pgm => write_pgm(path, w, h, &quantize(&spatial))?,
        HeatmapFormat::Csv => write_csv_grid(path, w, &spatial)?,
    }
    if !special.is_empty() {
        let mut out = String::new();
        for (t, x) in special {
            let _ = writeln!(out, "{t},{}", full_precision(x));
        }
        fs::write(special_sidecar(path), out)?;
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}
