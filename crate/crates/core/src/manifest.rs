//! `.hvm` manifests: TOML documents that describe diagnostic corpora and
//! inference records and point at `.hvt` tensor files.
//!
//! Corpus manifest:
//!
//! ```toml
//! kind = "diagnostic-corpus"
//! version = 1
//! n_layers = 32
//! n_heads = 32
//!
//! [[record]]
//! token_index = 0
//! total_len = 71
//! valid = [[1, 71]]          # half-open index ranges (special tokens excluded)
//! visual = [[1, 65]]
//! mask = [12, 13, 20]        # sequence indices of the grounding region
//! attention = "rec_0000.hvt" # [n_layers, n_heads, total_len] or [len(heads), total_len]
//! heads = [[0, 3], [1, 0]]   # optional; required when not every head is present
//! ```
//!
//! Inference manifest:
//!
//! ```toml
//! kind = "inference-record"
//! version = 1
//! n_layers = 4
//! n_heads = 4
//! grid_side = 24
//! image_width = 336
//! image_height = 336
//! patch_size = 14
//! predicted_token = "green"
//! log_prob = -0.2
//! attention = "attn.hvt"     # [n_layers, n_heads, N_img] or [len(heads), N_img]
//! gradient = "grad.hvt"      # optional, same shape as attention
//! heads = [[0, 0], [0, 1]]   # optional
//! ```
//!
//! Tensor paths are resolved relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{
    AttentionTable, Corpus, DiagnosticRecord, HeadId, ImageGeometry, InferenceRecord,
    ModelGeometry, RecordError, SequenceLayout,
};
use crate::tensor::{read_tensor_file, write_tensor_file, Tensor, TensorError};

pub const MANIFEST_VERSION: u32 = 1;
pub const CORPUS_KIND: &str = "diagnostic-corpus";
pub const INFERENCE_KIND: &str = "inference-record";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: expected kind {expected:?}, found {found:?}")]
    Kind {
        path: PathBuf,
        expected: &'static str,
        found: String,
    },
    #[error("{path}: unsupported manifest version {found}")]
    Version { path: PathBuf, found: u32 },
    #[error("tensor {path}: {source}")]
    Tensor { path: PathBuf, source: TensorError },
    #[error("record {index}: {source}")]
    Record { index: usize, source: RecordError },
    #[error("record {index}: tensor dims {dims:?} do not match {expected}")]
    TensorShape {
        index: usize,
        dims: Vec<usize>,
        expected: String,
    },
    #[error("inference record: {0}")]
    Inference(RecordError),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusDoc {
    kind: String,
    version: u32,
    n_layers: u32,
    n_heads: u32,
    #[serde(default, rename = "record")]
    records: Vec<RecordDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordDoc {
    token_index: usize,
    total_len: usize,
    valid: Vec<[usize; 2]>,
    visual: Vec<[usize; 2]>,
    mask: Vec<usize>,
    attention: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    heads: Option<Vec<HeadId>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InferenceDoc {
    kind: String,
    version: u32,
    n_layers: u32,
    n_heads: u32,
    grid_side: usize,
    image_width: u32,
    image_height: u32,
    patch_size: u32,
    predicted_token: String,
    log_prob: f64,
    attention: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gradient: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    heads: Option<Vec<HeadId>>,
}

/// Expands half-open ranges into a sorted index list.
fn expand_ranges(ranges: &[[usize; 2]]) -> Vec<usize> {
    ranges.iter().flat_map(|&[a, b]| a..b).collect()
}

/// Compresses a sorted index list into half-open ranges.
fn compress_ranges(idx: &[usize]) -> Vec<[usize; 2]> {
    let mut out: Vec<[usize; 2]> = Vec::new();
    for &i in idx {
        match out.last_mut() {
            Some(r) if r[1] == i => r[1] = i + 1,
            _ => out.push([i, i + 1]),
        }
    }
    out
}

fn read_text(path: &Path) -> Result<String, ManifestError> {
    fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), ManifestError> {
    fs::write(path, text).map_err(|source| ManifestError::Io {
        path: path.to_owned(),
        source,
    })
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

fn load_tensor(path: PathBuf) -> Result<Tensor, ManifestError> {
    read_tensor_file(&path).map_err(|source| ManifestError::Tensor { path, source })
}

fn store_tensor(t: &Tensor, path: PathBuf) -> Result<(), ManifestError> {
    write_tensor_file(t, &path)
        .map(|_| ())
        .map_err(|source| ManifestError::Tensor { path, source })
}

fn check_header(
    path: &Path,
    kind: &str,
    version: u32,
    expected: &'static str,
) -> Result<(), ManifestError> {
    if kind != expected {
        return Err(ManifestError::Kind {
            path: path.to_owned(),
            expected,
            found: kind.to_owned(),
        });
    }
    if version != MANIFEST_VERSION {
        return Err(ManifestError::Version {
            path: path.to_owned(),
            found: version,
        });
    }
    Ok(())
}

/// Turns a `[rows, width]` or `[n_layers, n_heads, width]` tensor into a
/// table keyed by head.
fn table_from_tensor(
    index: usize,
    t: Tensor,
    heads: Option<&[HeadId]>,
    geometry: ModelGeometry,
    width: usize,
) -> Result<AttentionTable, ManifestError> {
    let dims = t.dims().to_vec();
    let row_width = *dims.last().unwrap_or(&0);
    let rows: usize = dims[..dims.len().saturating_sub(1)].iter().product();
    let heads: Vec<HeadId> = match heads {
        Some(h) => {
            if dims.len() != 2 {
                return Err(ManifestError::TensorShape {
                    index,
                    dims,
                    expected: format!("[{}, {width}]", h.len()),
                });
            }
            if rows < h.len() {
                return Err(ManifestError::Record {
                    index,
                    source: RecordError::MissingHead(h[rows]),
                });
            }
            if rows > h.len() {
                return Err(ManifestError::TensorShape {
                    index,
                    dims,
                    expected: format!("[{}, {width}]", h.len()),
                });
            }
            h.to_vec()
        }
        None => {
            let full = dims.len() == 3
                && dims[0] == geometry.n_layers as usize
                && dims[1] == geometry.n_heads as usize;
            if !full {
                let missing = geometry.head_at(rows.min(geometry.head_count().saturating_sub(1)));
                return Err(ManifestError::Record {
                    index,
                    source: RecordError::MissingHead(missing),
                });
            }
            geometry.heads().collect()
        }
    };
    if row_width != width {
        return Err(ManifestError::Record {
            index,
            source: RecordError::RowLength {
                head: heads[0],
                expected: width,
                actual: row_width,
            },
        });
    }
    AttentionTable::new(heads, width, t.into_data())
        .map_err(|source| ManifestError::Record { index, source })
}

/// Loads and validates a diagnostic corpus manifest and its tensors.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, ManifestError> {
    let path = path.as_ref();
    let doc: CorpusDoc = toml::from_str(&read_text(path)?).map_err(|e| ManifestError::Parse {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    check_header(path, &doc.kind, doc.version, CORPUS_KIND)?;
    let geometry = ModelGeometry::new(doc.n_layers, doc.n_heads);
    let dir = base_dir(path);
    let mut records = Vec::with_capacity(doc.records.len());
    for (index, r) in doc.records.into_iter().enumerate() {
        let rec_err = |source| ManifestError::Record { index, source };
        let layout = SequenceLayout::new(
            r.total_len,
            expand_ranges(&r.valid),
            expand_ranges(&r.visual),
        )
        .map_err(rec_err)?;
        let t = load_tensor(dir.join(&r.attention))?;
        let table = table_from_tensor(index, t, r.heads.as_deref(), geometry, r.total_len)?;
        let record = DiagnosticRecord::new(layout, &r.mask, table, r.token_index).map_err(rec_err)?;
        records.push(record);
    }
    Corpus::new(geometry, records).map_err(|(index, source)| ManifestError::Record { index, source })
}

/// Writes `corpus` as `<dir>/<stem>.hvm` with one `.hvt` file per record.
/// Returns the manifest path.
pub fn save_corpus(corpus: &Corpus, dir: &Path, stem: &str) -> Result<PathBuf, ManifestError> {
    fs::create_dir_all(dir).map_err(|source| ManifestError::Io {
        path: dir.to_owned(),
        source,
    })?;
    let geometry = corpus.geometry();
    let mut docs = Vec::with_capacity(corpus.len());
    for (i, r) in corpus.records().iter().enumerate() {
        let attn = r.attention();
        let complete = attn.len() == geometry.head_count();
        let file = PathBuf::from(format!("{stem}_{i:05}.hvt"));
        let dims = if complete {
            vec![
                geometry.n_layers as usize,
                geometry.n_heads as usize,
                attn.width(),
            ]
        } else {
            vec![attn.len(), attn.width()]
        };
        let t = Tensor::new(dims, attn.data().to_vec()).map_err(|source| ManifestError::Tensor {
            path: dir.join(&file),
            source,
        })?;
        store_tensor(&t, dir.join(&file))?;
        docs.push(RecordDoc {
            token_index: r.token_index(),
            total_len: r.layout().total_len(),
            valid: compress_ranges(r.layout().valid()),
            visual: compress_ranges(r.layout().visual()),
            mask: r.mask_indices(),
            attention: file,
            heads: (!complete).then(|| attn.heads().to_vec()),
        });
    }
    let doc = CorpusDoc {
        kind: CORPUS_KIND.into(),
        version: MANIFEST_VERSION,
        n_layers: geometry.n_layers,
        n_heads: geometry.n_heads,
        records: docs,
    };
    let path = dir.join(format!("{stem}.hvm"));
    write_text(&path, &toml::to_string(&doc).expect("corpus manifest serializes"))?;
    Ok(path)
}

/// Loads and validates an inference record manifest.
pub fn load_inference_record(path: impl AsRef<Path>) -> Result<InferenceRecord, ManifestError> {
    let path = path.as_ref();
    let doc: InferenceDoc = toml::from_str(&read_text(path)?).map_err(|e| ManifestError::Parse {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    check_header(path, &doc.kind, doc.version, INFERENCE_KIND)?;
    let geometry = ModelGeometry::new(doc.n_layers, doc.n_heads);
    let dir = base_dir(path);
    let width = doc.grid_side * doc.grid_side;
    let attn = table_from_tensor(
        0,
        load_tensor(dir.join(&doc.attention))?,
        doc.heads.as_deref(),
        geometry,
        width,
    )?;
    let grad = match &doc.gradient {
        Some(p) => Some(table_from_tensor(
            0,
            load_tensor(dir.join(p))?,
            doc.heads.as_deref(),
            geometry,
            width,
        )?),
        None => None,
    };
    InferenceRecord::new(
        geometry,
        doc.grid_side,
        ImageGeometry {
            width: doc.image_width,
            height: doc.image_height,
            patch_size: doc.patch_size,
        },
        attn,
        grad,
        doc.predicted_token,
        doc.log_prob,
    )
    .map_err(ManifestError::Inference)
}

/// Writes `record` as `<dir>/<stem>.hvm` plus `<stem>_attn.hvt` and, when
/// present, `<stem>_grad.hvt`. Returns the manifest path.
pub fn save_inference_record(
    record: &InferenceRecord,
    dir: &Path,
    stem: &str,
) -> Result<PathBuf, ManifestError> {
    fs::create_dir_all(dir).map_err(|source| ManifestError::Io {
        path: dir.to_owned(),
        source,
    })?;
    let table_tensor = |t: &AttentionTable, file: &Path| {
        Tensor::new(vec![t.len(), t.width()], t.data().to_vec()).map_err(|source| {
            ManifestError::Tensor {
                path: dir.join(file),
                source,
            }
        })
    };
    let attn_file = PathBuf::from(format!("{stem}_attn.hvt"));
    store_tensor(&table_tensor(record.attention(), &attn_file)?, dir.join(&attn_file))?;
    let grad_file = match record.gradient() {
        Some(g) => {
            let f = PathBuf::from(format!("{stem}_grad.hvt"));
            store_tensor(&table_tensor(g, &f)?, dir.join(&f))?;
            Some(f)
        }
        None => None,
    };
    let geometry = record.geometry();
    let image = record.image();
    let doc = InferenceDoc {
        kind: INFERENCE_KIND.into(),
        version: MANIFEST_VERSION,
        n_layers: geometry.n_layers,
        n_heads: geometry.n_heads,
        grid_side: record.grid_side(),
        image_width: image.width,
        image_height: image.height,
        patch_size: image.patch_size,
        predicted_token: record.predicted_token().to_owned(),
        log_prob: record.log_prob(),
        attention: attn_file,
        gradient: grad_file,
        heads: Some(record.attention().heads().to_vec()),
    };
    let path = dir.join(format!("{stem}.hvm"));
    write_text(&path, &toml::to_string(&doc).expect("inference manifest serializes"))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_round_trip() {
        let idx = vec![1, 2, 3, 7, 9, 10];
        let r = compress_ranges(&idx);
        assert_eq!(r, vec![[1, 4], [7, 8], [9, 11]]);
        assert_eq!(expand_ranges(&r), idx);
    }

    #[test]
    fn empty_corpus_keeps_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.hvm");
        fs::write(
            &path,
            "kind = \"diagnostic-corpus\"\nversion = 1\nn_layers = 3\nn_heads = 5\n",
        )
        .unwrap();
        let c = load_corpus(&path).unwrap();
        assert!(c.is_empty());
        assert_eq!(c.geometry(), ModelGeometry::new(3, 5));
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.hvm");
        fs::write(
            &path,
            "kind = \"diagnostic-corpus\"\nversion = 1\nn_layers = 3\nn_heads = 5\nextra = 1\n",
        )
        .unwrap();
        assert!(matches!(load_corpus(&path), Err(ManifestError::Parse { .. })));
    }

    #[test]
    fn wrong_kind_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.hvm");
        fs::write(
            &path,
            "kind = \"inference-record\"\nversion = 1\nn_layers = 3\nn_heads = 5\n",
        )
        .unwrap();
        assert!(matches!(load_corpus(&path), Err(ManifestError::Kind { .. })));
    }
}
