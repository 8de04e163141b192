//! JSON manifest describing a per-layer stack of attention arrays.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::npy::{load_array, save_array, Dtype, NpyArray};
use crate::chain::{RepairPolicy, StochasticMatrix};
use crate::error::{Error, Result};
use crate::ops::AttentionTensor;

pub const MANIFEST_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub layer: usize,
    pub heads: usize,
    pub dtype: Dtype,
    /// Relative to the manifest's directory.
    pub path: String,
    /// `[heads, seq_len, seq_len]`.
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seq_len: usize,
    pub grid: Option<[usize; 2]>,
    pub special_tokens: Vec<usize>,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(
        seq_len: usize,
        grid: Option<(usize, usize)>,
        special_tokens: Vec<usize>,
        entries: Vec<ManifestEntry>,
    ) -> Self {
        Self {
            version: MANIFEST_VERSION.to_string(),
            seq_len,
            grid: grid.map(|(h, w)| [h, w]),
            special_tokens,
            entries,
            base_dir: PathBuf::new(),
        }
    }

    pub fn grid(&self) -> Option<(usize, usize)> {
        self.grid.map(|[h, w]| (h, w))
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// Absolute (or caller-relative) location of an entry's array file.
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }

    /// Checks the structural invariants; errors are `SchemaViolation`s.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::SchemaViolation(msg));
        if self.version != MANIFEST_VERSION {
            return fail(format!("unsupported manifest version {:?}", self.version));
        }
        if self.seq_len == 0 {
            return fail("seq_len must be positive".into());
        }
        if self.entries.is_empty() {
            return fail("manifest has no entries".into());
        }
        let mut specials = HashSet::new();
        for &t in &self.special_tokens {
            if t >= self.seq_len || !specials.insert(t) {
                return fail(format!("special token {t} invalid or repeated"));
            }
        }
        if let Some([h, w]) = self.grid {
            if h * w + self.special_tokens.len() != self.seq_len {
                return fail(format!(
                    "grid {h}x{w} plus {} special tokens != seq_len {}",
                    self.special_tokens.len(),
                    self.seq_len
                ));
            }
        }
        let mut layers = HashSet::new();
        for e in &self.entries {
            if !layers.insert(e.layer) {
                return fail(format!("layer {} listed twice", e.layer));
            }
            if e.heads == 0 {
                return fail(format!("layer {} has no heads", e.layer));
            }
            match e.shape.as_slice() {
                [h, s1, s2] if s1 != s2 => {
                    return fail(format!("layer {}: non-square shape [{h}, {s1}, {s2}]", e.layer))
                }
                [h, s, _] if *h != e.heads || *s != self.seq_len => {
                    return fail(format!(
                        "layer {}: shape {:?} inconsistent with heads {} / seq_len {}",
                        e.layer, e.shape, e.heads, self.seq_len
                    ))
                }
                [_, _, _] => {}
                _ => return fail(format!("layer {}: shape must have three dims", e.layer)),
            }
            if Path::new(&e.path).is_absolute() {
                return fail(format!("layer {}: path must be relative", e.layer));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Reads and validates a manifest; entry paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::ParseError(e.to_string()))?;
    manifest.validate()?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(manifest)
}

/// Loads the raw `[heads, s, s]` array of every entry, in manifest order.
pub fn load_layers(manifest: &Manifest) -> Result<Vec<(usize, NpyArray)>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let array = load_array(&manifest.resolve(e), e.dtype)?;
            if array.shape != e.shape {
                return Err(Error::SchemaViolation(format!(
                    "{}: file shape {:?} differs from manifest {:?}",
                    e.path, array.shape, e.shape
                )));
            }
            Ok((e.layer, array))
        })
        .collect()
}

/// Health of one raw (pre-repair) attention matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatrixStats {
    pub max_row_deviation: f64,
    pub min_entry: f64,
    pub non_finite: usize,
}

impl MatrixStats {
    pub fn of(entries: &[f64], n: usize) -> Self {
        let non_finite = entries.iter().filter(|x| !x.is_finite()).count();
        let min_entry = entries
            .iter()
            .filter(|x| x.is_finite())
            .copied()
            .fold(f64::INFINITY, f64::min);
        let max_row_deviation = entries
            .chunks(n)
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, |a: f64, b| if b.is_nan() { f64::INFINITY } else { a.max(b) });
        Self {
            max_row_deviation,
            min_entry,
            non_finite,
        }
    }

    /// Whether [`RepairPolicy::ClampAndRenormalize`] can repair this matrix.
    pub fn repairable(&self) -> bool {
        self.non_finite == 0 && self.min_entry >= -1e-9
    }
}

/// Builds the attention tensor, repairing each matrix under `policy`.
/// Layers are ordered by their manifest layer index.
pub fn load_tensor(manifest: &Manifest, policy: RepairPolicy) -> Result<AttentionTensor> {
    let mut raw = load_layers(manifest)?;
    raw.sort_by_key(|(layer, _)| *layer);
    let s = manifest.seq_len;
    let mut ids = Vec::with_capacity(raw.len());
    let mut layers = Vec::with_capacity(raw.len());
    for (layer, array) in raw {
        let heads = array
            .data
            .chunks(s * s)
            .map(|chunk| StochasticMatrix::from_raw(s, chunk.to_vec(), policy))
            .collect::<Result<Vec<_>>>()?;
        ids.push(layer);
        layers.push(heads);
    }
    AttentionTensor::with_layer_ids(
        layers,
        ids,
        manifest.special_tokens.clone(),
        manifest.grid(),
    )
}

/// Writes one `layer_NNN.npy` per layer plus `manifest.json` into `dir`.
pub fn save_tensor(dir: &Path, tensor: &AttentionTensor, dtype: Dtype) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let s = tensor.seq_len();
    let mut entries = Vec::with_capacity(tensor.num_layers());
    for (heads, &layer) in tensor.layers().iter().zip(tensor.layer_ids()) {
        let file = format!("layer_{layer:03}.npy");
        let data: Vec<f64> = heads.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
        let shape = vec![heads.len(), s, s];
        save_array(&dir.join(&file), &NpyArray::new(shape.clone(), data, dtype)?)?;
        entries.push(ManifestEntry {
            layer,
            heads: heads.len(),
            dtype,
            path: file,
            shape,
        });
    }
    let manifest = Manifest::new(s, tensor.grid(), tensor.special_tokens().to_vec(), entries);
    let path = dir.join("manifest.json");
    fs::write(&path, manifest.to_json() + "\n")?;
    Ok(path)
}
