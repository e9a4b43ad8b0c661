//! Expert-head profiling over an OCR diagnostic corpus.
//!
//! For every matched output token and every head, the head's attention peak
//! (searched over non-special tokens) either lands inside the token's
//! grounding region or it doesn't. A hit is worth `1/|region|`, so heads that
//! consistently hit small regions accumulate the highest scores. Averaged
//! scores form a layers × heads matrix that is min–max normalized; heads
//! whose normalized score exceeds a threshold become expert heads.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{Corpus, DiagnosticRecord, HeadId, ModelGeometry, SequenceLayout};

pub const DEFAULT_EXPERT_THRESHOLD: f64 = 0.5;
pub const EXPERT_DOC_KIND: &str = "expert-heads";

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("no valid (non-special) tokens to search")]
    EmptyValidSet,
    #[error("grounding mask is empty")]
    EmptyMask,
    #[error("attention row has length {actual}, layout expects {expected}")]
    RowLength { expected: usize, actual: usize },
    #[error("corpus has no records")]
    NoRecords,
    #[error("record {record}: head {head} is outside geometry {geometry:?}")]
    GeometryMismatch {
        record: usize,
        head: HeadId,
        geometry: ModelGeometry,
    },
    #[error("accumulators have different geometry")]
    MergeMismatch,
    #[error("score matrix is constant ({0}); no head is more informative than another")]
    DegenerateMatrix(f64),
    #[error("threshold {0} is outside [0, 1]")]
    BadThreshold(f64),
}

/// Index of the largest attention value among valid (non-special) tokens.
/// Ties resolve to the lowest index.
pub fn peak_index(row: &[f32], layout: &SequenceLayout) -> Result<usize, ProfileError> {
    if row.len() != layout.total_len() {
        return Err(ProfileError::RowLength {
            expected: layout.total_len(),
            actual: row.len(),
        });
    }
    let mut best: Option<(usize, f32)> = None;
    for &j in layout.valid() {
        let v = row[j];
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| j).ok_or(ProfileError::EmptyValidSet)
}

/// `1/|mask|` when the attention peak falls inside the mask, else 0.
pub fn proj_score(row: &[f32], mask: &[bool], layout: &SequenceLayout) -> Result<f64, ProfileError> {
    let size = mask.iter().filter(|&&b| b).count();
    if size == 0 {
        return Err(ProfileError::EmptyMask);
    }
    if mask.len() != layout.total_len() {
        return Err(ProfileError::RowLength {
            expected: layout.total_len(),
            actual: mask.len(),
        });
    }
    let peak = peak_index(row, layout)?;
    Ok(if mask[peak] { 1.0 / size as f64 } else { 0.0 })
}

/// Running sums of projection scores. Merging is commutative, so records
/// can be reduced in any order or in parallel chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreAccumulator {
    geometry: ModelGeometry,
    sums: Vec<f64>,
    counts: Vec<u64>,
    records: usize,
}

impl ScoreAccumulator {
    pub fn new(geometry: ModelGeometry) -> Self {
        let n = geometry.head_count();
        Self {
            geometry,
            sums: vec![0.0; n],
            counts: vec![0; n],
            records: 0,
        }
    }

    /// `index` is only used to label errors.
    pub fn add(&mut self, index: usize, record: &DiagnosticRecord) -> Result<(), ProfileError> {
        for (head, row) in record.attention().iter() {
            if !self.geometry.contains(head) {
                return Err(ProfileError::GeometryMismatch {
                    record: index,
                    head,
                    geometry: self.geometry,
                });
            }
            let s = proj_score(row, record.mask(), record.layout())?;
            let k = self.geometry.flat_index(head);
            self.sums[k] += s;
            self.counts[k] += 1;
        }
        self.records += 1;
        Ok(())
    }

    pub fn merge(mut self, other: &ScoreAccumulator) -> Result<Self, ProfileError> {
        if self.geometry != other.geometry {
            return Err(ProfileError::MergeMismatch);
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.records += other.records;
        Ok(self)
    }

    pub fn finish(self) -> Result<HeadScoreMatrix, ProfileError> {
        if self.records == 0 {
            return Err(ProfileError::NoRecords);
        }
        let raw = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect();
        Ok(HeadScoreMatrix {
            geometry: self.geometry,
            raw,
            counts: self.counts,
            normalized: None,
        })
    }
}

/// Averages projection scores per head over the records it appears in.
pub fn accumulate(corpus: &Corpus) -> Result<HeadScoreMatrix, ProfileError> {
    accumulate_records(corpus.geometry(), corpus.records())
}

pub fn accumulate_records<'a, I>(geometry: ModelGeometry, records: I) -> Result<HeadScoreMatrix, ProfileError>
where
    I: IntoIterator<Item = &'a DiagnosticRecord>,
{
    let mut acc = ScoreAccumulator::new(geometry);
    for (i, r) in records.into_iter().enumerate() {
        acc.add(i, r)?;
    }
    acc.finish()
}

/// How the score matrix is min–max normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationScope {
    /// One min and max over every observed head.
    #[default]
    Global,
    /// Separate min and max per layer.
    PerLayer,
}

/// Layers × heads matrix of averaged projection scores.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadScoreMatrix {
    geometry: ModelGeometry,
    raw: Vec<f64>,
    counts: Vec<u64>,
    normalized: Option<Vec<f64>>,
}

impl HeadScoreMatrix {
    /// Builds a matrix directly from averaged scores, every head counted once.
    pub fn from_raw(geometry: ModelGeometry, raw: Vec<f64>) -> Self {
        assert_eq!(raw.len(), geometry.head_count(), "raw score length");
        let counts = vec![1; raw.len()];
        Self {
            geometry,
            raw,
            counts,
            normalized: None,
        }
    }

    pub fn geometry(&self) -> ModelGeometry {
        self.geometry
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn normalized(&self) -> Option<&[f64]> {
        self.normalized.as_deref()
    }

    pub fn raw_score(&self, h: HeadId) -> f64 {
        self.raw[self.geometry.flat_index(h)]
    }

    /// Min–max normalizes observed heads into [0, 1]; unobserved heads get 0.
    /// A constant matrix is an error. Under [`NormalizationScope::PerLayer`]
    /// a constant layer normalizes to zeros.
    pub fn normalize(&mut self, scope: NormalizationScope) -> Result<&[f64], ProfileError> {
        let observed = |k: usize| self.counts[k] > 0;
        let (lo, hi) = min_max((0..self.raw.len()).filter(|&k| observed(k)).map(|k| self.raw[k]));
        if !(hi > lo) {
            return Err(ProfileError::DegenerateMatrix(lo));
        }
        let mut out = vec![0.0; self.raw.len()];
        match scope {
            NormalizationScope::Global => {
                for k in (0..self.raw.len()).filter(|&k| observed(k)) {
                    out[k] = (self.raw[k] - lo) / (hi - lo);
                }
            }
            NormalizationScope::PerLayer => {
                let n = self.geometry.n_heads as usize;
                for layer in 0..self.geometry.n_layers as usize {
                    let ks: Vec<usize> = (layer * n..(layer + 1) * n).filter(|&k| observed(k)).collect();
                    let (lo, hi) = min_max(ks.iter().map(|&k| self.raw[k]));
                    if hi > lo {
                        for k in ks {
                            out[k] = (self.raw[k] - lo) / (hi - lo);
                        }
                    }
                }
            }
        }
        self.normalized = Some(out);
        Ok(self.normalized.as_deref().unwrap())
    }
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Heads retained as expert visual heads, in (layer, head) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertHeadSet {
    pub heads: Vec<HeadId>,
    pub threshold: f64,
}

impl ExpertHeadSet {
    pub fn new(mut heads: Vec<HeadId>, threshold: f64) -> Self {
        heads.sort();
        heads.dedup();
        Self { heads, threshold }
    }

    pub fn contains(&self, h: HeadId) -> bool {
        self.heads.binary_search(&h).is_ok()
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }
}

/// Normalizes `m` and keeps heads whose normalized score is strictly above
/// `threshold`.
pub fn normalize_and_filter(
    m: &mut HeadScoreMatrix,
    threshold: f64,
    scope: NormalizationScope,
) -> Result<ExpertHeadSet, ProfileError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ProfileError::BadThreshold(threshold));
    }
    let geometry = m.geometry;
    let norm = m.normalize(scope)?;
    let heads = norm
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > threshold)
        .map(|(k, _)| geometry.head_at(k))
        .collect();
    Ok(ExpertHeadSet { heads, threshold })
}

/// The expert-head document written by `score-heads` and read by `guide`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertHeadDocument {
    pub kind: String,
    pub version: u32,
    pub n_layers: u32,
    pub n_heads: u32,
    pub threshold: f64,
    pub normalization: NormalizationScope,
    pub records: usize,
    /// Selected heads as `[layer, head]` pairs.
    pub heads: Vec<HeadId>,
    /// `[layer][head]` normalized scores.
    pub normalized: Vec<Vec<f64>>,
    /// `[layer][head]` averaged projection scores.
    pub raw: Vec<Vec<f64>>,
    /// `[layer][head]` matched-token counts.
    pub counts: Vec<Vec<u64>>,
}

#[derive(Debug, Error)]
pub enum ExpertDocError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("malformed expert-head document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid expert-head document: {0}")]
    Invalid(String),
}

fn by_layer<T: Copy>(geometry: ModelGeometry, flat: &[T]) -> Vec<Vec<T>> {
    flat.chunks(geometry.n_heads as usize).map(<[T]>::to_vec).collect()
}

impl ExpertHeadDocument {
    /// `m` must already be normalized.
    pub fn new(m: &HeadScoreMatrix, set: &ExpertHeadSet, scope: NormalizationScope, records: usize) -> Self {
        let g = m.geometry();
        let normalized = m.normalized().map(|n| by_layer(g, n)).unwrap_or_default();
        Self {
            kind: EXPERT_DOC_KIND.into(),
            version: 1,
            n_layers: g.n_layers,
            n_heads: g.n_heads,
            threshold: set.threshold,
            normalization: scope,
            records,
            heads: set.heads.clone(),
            normalized,
            raw: by_layer(g, m.raw()),
            counts: by_layer(g, m.counts()),
        }
    }

    /// Document for a known head set with no profiling behind it: selected
    /// heads score 1, the rest 0, all counts 0.
    pub fn from_set(geometry: ModelGeometry, set: &ExpertHeadSet) -> Self {
        let flat: Vec<f64> = geometry
            .heads()
            .map(|h| if set.contains(h) { 1.0 } else { 0.0 })
            .collect();
        Self {
            kind: EXPERT_DOC_KIND.into(),
            version: 1,
            n_layers: geometry.n_layers,
            n_heads: geometry.n_heads,
            threshold: set.threshold,
            normalization: NormalizationScope::Global,
            records: 0,
            heads: set.heads.clone(),
            normalized: by_layer(geometry, &flat),
            raw: by_layer(geometry, &flat),
            counts: by_layer(geometry, &vec![0; geometry.head_count()]),
        }
    }

    pub fn geometry(&self) -> ModelGeometry {
        ModelGeometry::new(self.n_layers, self.n_heads)
    }

    pub fn expert_set(&self) -> ExpertHeadSet {
        ExpertHeadSet::new(self.heads.clone(), self.threshold)
    }

    pub fn validate(&self) -> Result<(), ExpertDocError> {
        if self.kind != EXPERT_DOC_KIND {
            return Err(ExpertDocError::Invalid(format!("kind {:?}", self.kind)));
        }
        let g = self.geometry();
        if let Some(h) = self.heads.iter().find(|h| !g.contains(**h)) {
            return Err(ExpertDocError::Invalid(format!("head {h} outside geometry")));
        }
        if self.heads.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ExpertDocError::Invalid("heads must be strictly increasing".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ExpertDocError::Invalid(format!("threshold {}", self.threshold)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("expert document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ExpertDocError> {
        let doc: Self = serde_json::from_str(text)?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ExpertDocError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ExpertDocError> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::AttentionTable;

    fn layout(len: usize, valid: &[usize], visual: &[usize]) -> SequenceLayout {
        SequenceLayout::new(len, valid.to_vec(), visual.to_vec()).unwrap()
    }

    #[test]
    fn special_token_is_excluded_from_peak() {
        let l = layout(3, &[1, 2], &[1, 2]);
        assert_eq!(peak_index(&[0.9, 0.05, 0.05], &l).unwrap(), 1);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let l = layout(6, &[3, 4, 5], &[3, 4, 5]);
        let third = 1.0 / 3.0;
        assert_eq!(peak_index(&[0.0, 0.0, 0.0, third, third, third], &l).unwrap(), 3);
    }

    #[test]
    fn proj_score_inside_and_outside() {
        let l = layout(6, &[1, 2, 3, 4, 5], &[1, 2, 3, 4, 5]);
        let mask = [false, true, true, true, true, false];
        let row = [0.0, 0.1, 0.6, 0.1, 0.1, 0.1];
        assert_eq!(proj_score(&row, &mask, &l).unwrap(), 0.25);
        let row = [0.0, 0.1, 0.1, 0.1, 0.1, 0.6];
        assert_eq!(proj_score(&row, &mask, &l).unwrap(), 0.0);
        assert_eq!(
            proj_score(&row, &[false; 6], &l),
            Err(ProfileError::EmptyMask)
        );
    }

    fn one_head_record(peak: usize, mask: &[usize]) -> DiagnosticRecord {
        let l = layout(4, &[1, 2, 3], &[1, 2, 3]);
        let mut row = vec![0.1f32; 4];
        row[peak] = 0.7;
        let attn = AttentionTable::new(vec![HeadId::new(0, 0)], 4, row).unwrap();
        DiagnosticRecord::new(l, mask, attn, 0).unwrap()
    }

    #[test]
    fn single_record_hit_in_unit_mask_scores_one() {
        let g = ModelGeometry::new(1, 1);
        let m = accumulate_records(g, [&one_head_record(2, &[2])]).unwrap();
        assert_eq!(m.raw(), &[1.0]);
    }

    #[test]
    fn two_records_average() {
        let g = ModelGeometry::new(1, 1);
        let a = one_head_record(2, &[2]);
        let b = one_head_record(3, &[2]);
        let m = accumulate_records(g, [&a, &b]).unwrap();
        assert_eq!(m.raw(), &[0.5]);
        assert_eq!(m.counts(), &[2]);
    }

    #[test]
    fn no_records_is_an_error() {
        let g = ModelGeometry::new(1, 1);
        assert_eq!(
            accumulate_records(g, std::iter::empty()),
            Err(ProfileError::NoRecords)
        );
    }

    #[test]
    fn head_outside_geometry_is_reported() {
        let g = ModelGeometry::new(1, 1);
        let l = layout(2, &[1], &[1]);
        let attn = AttentionTable::new(vec![HeadId::new(0, 3)], 2, vec![0.0, 1.0]).unwrap();
        let r = DiagnosticRecord::new(l, &[1], attn, 0).unwrap();
        assert!(matches!(
            accumulate_records(g, [&r]),
            Err(ProfileError::GeometryMismatch { record: 0, .. })
        ));
    }

    #[test]
    fn min_max_example() {
        let g = ModelGeometry::new(2, 2);
        let mut m = HeadScoreMatrix::from_raw(g, vec![0.0, 1.0, 2.0, 3.0]);
        let set = normalize_and_filter(&mut m, 0.5, NormalizationScope::Global).unwrap();
        let n = m.normalized().unwrap();
        assert_eq!(n[0], 0.0);
        assert!((n[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((n[2] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(n[3], 1.0);
        assert_eq!(set.heads, vec![HeadId::new(1, 0), HeadId::new(1, 1)]);
    }

    #[test]
    fn threshold_is_strict() {
        let g = ModelGeometry::new(1, 3);
        let mut m = HeadScoreMatrix::from_raw(g, vec![0.0, 0.5, 1.0]);
        let set = normalize_and_filter(&mut m, 0.5, NormalizationScope::Global).unwrap();
        assert_eq!(set.heads, vec![HeadId::new(0, 2)]);
    }

    #[test]
    fn constant_matrix_is_degenerate() {
        let g = ModelGeometry::new(2, 2);
        let mut m = HeadScoreMatrix::from_raw(g, vec![0.25; 4]);
        assert_eq!(
            normalize_and_filter(&mut m, 0.5, NormalizationScope::Global),
            Err(ProfileError::DegenerateMatrix(0.25))
        );
    }

    #[test]
    fn per_layer_scope() {
        let g = ModelGeometry::new(2, 2);
        let mut m = HeadScoreMatrix::from_raw(g, vec![0.0, 0.1, 0.5, 0.5]);
        let set = normalize_and_filter(&mut m, 0.5, NormalizationScope::PerLayer).unwrap();
        assert_eq!(m.normalized().unwrap(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(set.heads, vec![HeadId::new(0, 1)]);
    }

    #[test]
    fn expert_document_round_trip() {
        let g = ModelGeometry::new(2, 2);
        let mut m = HeadScoreMatrix::from_raw(g, vec![0.0, 1.0, 2.0, 3.0]);
        let set = normalize_and_filter(&mut m, 0.5, NormalizationScope::Global).unwrap();
        let doc = ExpertHeadDocument::new(&m, &set, NormalizationScope::Global, 4);
        let back = ExpertHeadDocument::from_json(&doc.to_json()).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.expert_set(), set);
    }
}
