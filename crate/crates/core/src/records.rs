//! In-memory record types shared by the profiler and the guidance pipeline.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row sums within this distance of 1 are accepted as-is.
pub const ROW_SUM_TOLERANCE: f64 = 1e-3;
/// Row sums further than this from 1 are rejected; in between they are
/// renormalized with a warning.
pub const ROW_SUM_HARD_LIMIT: f64 = 1e-2;

/// Address of one attention head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 2]", into = "[u32; 2]")]
pub struct HeadId {
    pub layer: u32,
    pub head: u32,
}

impl HeadId {
    pub const fn new(layer: u32, head: u32) -> Self {
        Self { layer, head }
    }
}

impl From<[u32; 2]> for HeadId {
    fn from([layer, head]: [u32; 2]) -> Self {
        Self { layer, head }
    }
}

impl From<HeadId> for [u32; 2] {
    fn from(h: HeadId) -> Self {
        [h.layer, h.head]
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// Number of layers and heads per layer of the profiled model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelGeometry {
    pub n_layers: u32,
    pub n_heads: u32,
}

impl ModelGeometry {
    pub fn new(n_layers: u32, n_heads: u32) -> Self {
        Self { n_layers, n_heads }
    }

    pub fn contains(&self, h: HeadId) -> bool {
        h.layer < self.n_layers && h.head < self.n_heads
    }

    pub fn head_count(&self) -> usize {
        self.n_layers as usize * self.n_heads as usize
    }

    /// Flat row-major position of `h` in a layers × heads matrix.
    pub fn flat_index(&self, h: HeadId) -> usize {
        h.layer as usize * self.n_heads as usize + h.head as usize
    }

    pub fn head_at(&self, flat: usize) -> HeadId {
        let n = self.n_heads as usize;
        HeadId::new((flat / n) as u32, (flat % n) as u32)
    }

    /// All heads in (layer, head) order.
    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.head_count()).map(|i| self.head_at(i))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RecordError {
    #[error("sequence length must be positive")]
    EmptySequence,
    #[error("{set} indices must be strictly increasing and below {len}; offending index {index}")]
    BadIndexSet {
        set: &'static str,
        index: usize,
        len: usize,
    },
    #[error("visual token set is empty")]
    NoVisualTokens,
    #[error("visual index {0} is not in the valid token set")]
    VisualNotValid(usize),
    #[error("grounding mask is empty")]
    EmptyMask,
    #[error("mask index {0} is not a visual token")]
    MaskOutsideVisual(usize),
    #[error("head {head} is outside geometry {n_layers}x{n_heads}")]
    HeadOutOfRange {
        head: HeadId,
        n_layers: u32,
        n_heads: u32,
    },
    #[error("duplicate head {0}")]
    DuplicateHead(HeadId),
    #[error("missing head {0}")]
    MissingHead(HeadId),
    #[error("attention table has {rows} heads but {data} values for width {width}")]
    TableShape {
        rows: usize,
        width: usize,
        data: usize,
    },
    #[error("row for head {head} has length {actual}, expected {expected}")]
    RowLength {
        head: HeadId,
        expected: usize,
        actual: usize,
    },
    #[error("negative attention {value} for head {head} at index {index}")]
    NegativeAttention {
        head: HeadId,
        index: usize,
        value: f32,
    },
    #[error("non-finite value for head {head} at index {index}")]
    NonFinite { head: HeadId, index: usize },
    #[error("attention row for head {head} sums to {sum}")]
    RowSum { head: HeadId, sum: f64 },
    #[error("visual token count {n_visual} is not grid_side² for grid side {grid_side}")]
    NotSquare { grid_side: usize, n_visual: usize },
    #[error("gradient heads differ from attention heads")]
    GradientKeys,
    #[error("invalid image geometry: {0}")]
    ImageGeometry(String),
    #[error("log probability {0} must be finite and <= 0")]
    LogProb(f64),
    #[error("record head geometry {found:?} differs from corpus geometry {expected:?}")]
    GeometryMismatch {
        expected: ModelGeometry,
        found: ModelGeometry,
    },
}

/// The input token sequence: its length, the searchable tokens (special
/// tokens excluded) and the visual tokens among them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    total_len: usize,
    valid: Vec<usize>,
    visual: Vec<usize>,
}

fn check_index_set(set: &'static str, idx: &[usize], len: usize) -> Result<(), RecordError> {
    let mut prev: Option<usize> = None;
    for &i in idx {
        if i >= len || prev.is_some_and(|p| i <= p) {
            return Err(RecordError::BadIndexSet { set, index: i, len });
        }
        prev = Some(i);
    }
    Ok(())
}

impl SequenceLayout {
    pub fn new(total_len: usize, valid: Vec<usize>, visual: Vec<usize>) -> Result<Self, RecordError> {
        if total_len == 0 {
            return Err(RecordError::EmptySequence);
        }
        check_index_set("valid", &valid, total_len)?;
        check_index_set("visual", &visual, total_len)?;
        if visual.is_empty() {
            return Err(RecordError::NoVisualTokens);
        }
        if let Some(&v) = visual.iter().find(|v| valid.binary_search(v).is_err()) {
            return Err(RecordError::VisualNotValid(v));
        }
        Ok(Self {
            total_len,
            valid,
            visual,
        })
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn valid(&self) -> &[usize] {
        &self.valid
    }

    pub fn visual(&self) -> &[usize] {
        &self.visual
    }

    pub fn is_visual(&self, i: usize) -> bool {
        self.visual.binary_search(&i).is_ok()
    }
}

/// Rows of per-head values, keyed by head and sorted by (layer, head).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTable {
    heads: Vec<HeadId>,
    width: usize,
    data: Vec<f32>,
}

impl AttentionTable {
    /// Rows may arrive in any head order; they are sorted on construction.
    pub fn new(heads: Vec<HeadId>, width: usize, data: Vec<f32>) -> Result<Self, RecordError> {
        if width == 0 || heads.len() * width != data.len() {
            return Err(RecordError::TableShape {
                rows: heads.len(),
                width,
                data: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(RecordError::NonFinite {
                head: heads[i / width],
                index: i % width,
            });
        }
        let mut order: Vec<usize> = (0..heads.len()).collect();
        order.sort_by_key(|&i| heads[i]);
        if let Some(w) = order.windows(2).find(|w| heads[w[0]] == heads[w[1]]) {
            return Err(RecordError::DuplicateHead(heads[w[0]]));
        }
        if order.iter().enumerate().all(|(k, &i)| k == i) {
            return Ok(Self { heads, width, data });
        }
        let mut sorted = Vec::with_capacity(data.len());
        for &i in &order {
            sorted.extend_from_slice(&data[i * width..(i + 1) * width]);
        }
        Ok(Self {
            heads: order.iter().map(|&i| heads[i]).collect(),
            width,
            data: sorted,
        })
    }

    pub fn from_rows<I>(width: usize, rows: I) -> Result<Self, RecordError>
    where
        I: IntoIterator<Item = (HeadId, Vec<f32>)>,
    {
        let mut heads = Vec::new();
        let mut data = Vec::new();
        for (h, row) in rows {
            if row.len() != width {
                return Err(RecordError::RowLength {
                    head: h,
                    expected: width,
                    actual: row.len(),
                });
            }
            heads.push(h);
            data.extend(row);
        }
        Self::new(heads, width, data)
    }

    pub fn heads(&self) -> &[HeadId] {
        &self.heads
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, h: HeadId) -> Option<&[f32]> {
        self.heads
            .binary_search(&h)
            .ok()
            .map(|i| &self.data[i * self.width..(i + 1) * self.width])
    }

    pub fn iter(&self) -> impl Iterator<Item = (HeadId, &[f32])> + '_ {
        self.heads
            .iter()
            .copied()
            .zip(self.data.chunks_exact(self.width))
    }

    fn check_geometry(&self, geometry: &ModelGeometry) -> Result<(), RecordError> {
        match self.heads.iter().find(|h| !geometry.contains(**h)) {
            Some(&head) => Err(RecordError::HeadOutOfRange {
                head,
                n_layers: geometry.n_layers,
                n_heads: geometry.n_heads,
            }),
            None => Ok(()),
        }
    }

    fn check_nonnegative(&self) -> Result<(), RecordError> {
        for (head, row) in self.iter() {
            if let Some(index) = row.iter().position(|&v| v < 0.0) {
                return Err(RecordError::NegativeAttention {
                    head,
                    index,
                    value: row[index],
                });
            }
        }
        Ok(())
    }

    /// Checks that each row is a probability vector, renormalizing rows whose
    /// sum is off by more than [`ROW_SUM_TOLERANCE`] but within
    /// [`ROW_SUM_HARD_LIMIT`]. Returns the number of renormalized rows.
    fn normalize_rows(&mut self) -> Result<usize, RecordError> {
        self.check_nonnegative()?;
        let mut fixed = 0;
        for (k, row) in self.data.chunks_exact_mut(self.width).enumerate() {
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            let dev = (sum - 1.0).abs();
            if dev <= ROW_SUM_TOLERANCE {
                continue;
            }
            if dev > ROW_SUM_HARD_LIMIT {
                return Err(RecordError::RowSum {
                    head: self.heads[k],
                    sum,
                });
            }
            for v in row.iter_mut() {
                *v = (*v as f64 / sum) as f32;
            }
            fixed += 1;
        }
        Ok(fixed)
    }
}

/// One matched output token from the OCR diagnostic run.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRecord {
    layout: SequenceLayout,
    mask: Vec<bool>,
    mask_size: usize,
    attn: AttentionTable,
    token_index: usize,
}

impl DiagnosticRecord {
    /// `mask` lists the sequence indices of the grounding region.
    pub fn new(
        layout: SequenceLayout,
        mask: &[usize],
        mut attn: AttentionTable,
        token_index: usize,
    ) -> Result<Self, RecordError> {
        let len = layout.total_len();
        let mut dense = vec![false; len];
        for &i in mask {
            if i >= len || !layout.is_visual(i) {
                return Err(RecordError::MaskOutsideVisual(i));
            }
            dense[i] = true;
        }
        let mask_size = dense.iter().filter(|&&b| b).count();
        if mask_size == 0 {
            return Err(RecordError::EmptyMask);
        }
        if attn.width() != len {
            return Err(RecordError::RowLength {
                head: attn.heads().first().copied().unwrap_or(HeadId::new(0, 0)),
                expected: len,
                actual: attn.width(),
            });
        }
        let fixed = attn.normalize_rows()?;
        if fixed > 0 {
            log::warn!("token {token_index}: renormalized {fixed} attention rows");
        }
        Ok(Self {
            layout,
            mask: dense,
            mask_size,
            attn,
            token_index,
        })
    }

    pub fn layout(&self) -> &SequenceLayout {
        &self.layout
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn mask_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    /// ∥m∥₁, the number of visual tokens in the grounding region.
    pub fn mask_size(&self) -> usize {
        self.mask_size
    }

    pub fn attention(&self) -> &AttentionTable {
        &self.attn
    }

    pub fn token_index(&self) -> usize {
        self.token_index
    }
}

/// A validated diagnostic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    geometry: ModelGeometry,
    records: Vec<DiagnosticRecord>,
}

impl Corpus {
    /// Fails with the index of the first record whose heads fall outside
    /// `geometry`.
    pub fn new(
        geometry: ModelGeometry,
        records: Vec<DiagnosticRecord>,
    ) -> Result<Self, (usize, RecordError)> {
        for (i, r) in records.iter().enumerate() {
            r.attn.check_geometry(&geometry).map_err(|e| (i, e))?;
        }
        Ok(Self { geometry, records })
    }

    pub fn geometry(&self) -> ModelGeometry {
        self.geometry
    }

    pub fn records(&self) -> &[DiagnosticRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Pixel geometry of the source image and its patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGeometry {
    pub width: u32,
    pub height: u32,
    pub patch_size: u32,
}

/// Per-head visual attention (and optionally gradient sensitivity) for one
/// decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRecord {
    geometry: ModelGeometry,
    grid_side: usize,
    image: ImageGeometry,
    attn: AttentionTable,
    grad: Option<AttentionTable>,
    predicted_token: String,
    log_prob: f64,
}

impl InferenceRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        geometry: ModelGeometry,
        grid_side: usize,
        image: ImageGeometry,
        attn: AttentionTable,
        grad: Option<AttentionTable>,
        predicted_token: String,
        log_prob: f64,
    ) -> Result<Self, RecordError> {
        let n_visual = attn.width();
        if grid_side == 0 || grid_side.checked_mul(grid_side) != Some(n_visual) {
            return Err(RecordError::NotSquare {
                grid_side,
                n_visual,
            });
        }
        if image.width == 0 || image.height == 0 || image.patch_size == 0 {
            return Err(RecordError::ImageGeometry(format!(
                "{}x{} with patch {}",
                image.width, image.height, image.patch_size
            )));
        }
        if !log_prob.is_finite() || log_prob > 0.0 {
            return Err(RecordError::LogProb(log_prob));
        }
        attn.check_geometry(&geometry)?;
        attn.check_nonnegative()?;
        if let Some(g) = &grad {
            if g.heads() != attn.heads() || g.width() != n_visual {
                return Err(RecordError::GradientKeys);
            }
        }
        Ok(Self {
            geometry,
            grid_side,
            image,
            attn,
            grad,
            predicted_token,
            log_prob,
        })
    }

    pub fn geometry(&self) -> ModelGeometry {
        self.geometry
    }

    /// N_p, the side of the square patch grid.
    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    /// N_img = N_p².
    pub fn n_visual(&self) -> usize {
        self.attn.width()
    }

    pub fn image(&self) -> ImageGeometry {
        self.image
    }

    pub fn attention(&self) -> &AttentionTable {
        &self.attn
    }

    pub fn gradient(&self) -> Option<&AttentionTable> {
        self.grad.as_ref()
    }

    pub fn predicted_token(&self) -> &str {
        &self.predicted_token
    }

    pub fn log_prob(&self) -> f64 {
        self.log_prob
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> SequenceLayout {
        // 0 = BOS, 1..=4 visual, 5 text
        SequenceLayout::new(6, vec![1, 2, 3, 4, 5], vec![1, 2, 3, 4]).unwrap()
    }

    #[test]
    fn layout_rejects_visual_outside_valid() {
        assert_eq!(
            SequenceLayout::new(4, vec![1, 2], vec![2, 3]),
            Err(RecordError::VisualNotValid(3))
        );
        assert!(matches!(
            SequenceLayout::new(4, vec![2, 1], vec![2]),
            Err(RecordError::BadIndexSet { set: "valid", .. })
        ));
        assert_eq!(
            SequenceLayout::new(4, vec![1], vec![]),
            Err(RecordError::NoVisualTokens)
        );
    }

    #[test]
    fn table_sorts_rows() {
        let t = AttentionTable::new(
            vec![HeadId::new(1, 0), HeadId::new(0, 1)],
            2,
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        assert_eq!(t.heads(), &[HeadId::new(0, 1), HeadId::new(1, 0)]);
        assert_eq!(t.row(HeadId::new(0, 1)), Some(&[3.0, 4.0][..]));
        assert_eq!(t.row(HeadId::new(5, 5)), None);
        assert!(matches!(
            AttentionTable::new(vec![HeadId::new(0, 0); 2], 1, vec![1.0, 1.0]),
            Err(RecordError::DuplicateHead(_))
        ));
    }

    #[test]
    fn mask_over_non_visual_index_is_named() {
        let attn = AttentionTable::new(vec![HeadId::new(0, 0)], 6, vec![1.0 / 6.0; 6]).unwrap();
        let err = DiagnosticRecord::new(layout(), &[2, 5], attn, 0).unwrap_err();
        assert_eq!(err, RecordError::MaskOutsideVisual(5));
        assert!(err.to_string().contains('5'));
    }

    #[test]
    fn row_sum_tolerances() {
        let h = HeadId::new(0, 0);
        // off by 5e-3: renormalized
        let mut row = vec![0.0f32; 6];
        row[1] = 0.5;
        row[2] = 0.505;
        let attn = AttentionTable::new(vec![h], 6, row).unwrap();
        let r = DiagnosticRecord::new(layout(), &[1], attn, 0).unwrap();
        let sum: f64 = r.attention().row(h).unwrap().iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
        // off by 0.05: rejected
        let mut row = vec![0.0f32; 6];
        row[1] = 1.05;
        let attn = AttentionTable::new(vec![h], 6, row).unwrap();
        assert!(matches!(
            DiagnosticRecord::new(layout(), &[1], attn, 0),
            Err(RecordError::RowSum { .. })
        ));
    }

    #[test]
    fn inference_record_requires_square_grid() {
        let attn = AttentionTable::new(vec![HeadId::new(0, 0)], 5, vec![0.2; 5]).unwrap();
        let img = ImageGeometry {
            width: 28,
            height: 28,
            patch_size: 14,
        };
        assert!(matches!(
            InferenceRecord::new(ModelGeometry::new(1, 1), 2, img, attn, None, "a".into(), -0.1),
            Err(RecordError::NotSquare { .. })
        ));
    }
}
