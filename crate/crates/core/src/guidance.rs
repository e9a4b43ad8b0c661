//! Inference-time refinement of expert heads into a cropping guidance map.
//!
//! Each candidate head's visual attention is reshaped to the patch grid and
//! scored twice: a spatial entropy (component count plus centroid spread of
//! its Otsu mask) and a gradient score (attention-weighted positive
//! sensitivity of the answer's log-probability). Heads that are concentrated
//! enough are ranked by a blend of both scores, the top K are weighted by a
//! temperature softmax, and their maps are summed into the guidance map.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiler::ExpertHeadSet;
use crate::records::{HeadId, InferenceRecord};
use crate::spatial::{
    connected_components, extract_bbox, grid_diagonal, mean_pairwise_distance, normalize01,
    otsu_threshold, BoxParams, Connectivity, Extraction, GridMap, SpatialError, DEFAULT_OTSU_BINS,
};

#[derive(Debug, Error, PartialEq)]
pub enum GuidanceError {
    #[error("attention vector of length {0} is not a square patch grid of side {1}")]
    NotSquare(usize, usize),
    #[error("attention has length {attn} but sensitivity has length {sens}")]
    LengthMismatch { attn: usize, sens: usize },
    #[error("expert head set is empty")]
    NoExperts,
    #[error("none of the expert heads appear in the inference record")]
    DisjointExperts,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("{maps} maps but {weights} weights")]
    WeightCount { maps: usize, weights: usize },
    #[error("map side {found} differs from {expected}")]
    MapSide { expected: usize, found: usize },
    #[error("nothing selected")]
    EmptySelection,
    #[error("invalid parameter: {0}")]
    BadParams(String),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
}

/// Pipeline stage, used to label errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Params,
    Reshape,
    Entropy,
    Gradient,
    Select,
    Softmax,
    Aggregate,
    Crop,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Params => "params",
            Stage::Reshape => "reshape",
            Stage::Entropy => "entropy",
            Stage::Gradient => "gradient",
            Stage::Select => "select",
            Stage::Softmax => "softmax",
            Stage::Aggregate => "aggregate",
            Stage::Crop => "crop",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("{stage} stage: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    pub source: GuidanceError,
}

impl PipelineError {
    fn at(stage: Stage) -> impl FnOnce(GuidanceError) -> Self {
        move |source| Self { stage, source }
    }

    /// True when the guidance map had nothing to crop.
    pub fn is_degenerate(&self) -> bool {
        matches!(
            self.source,
            GuidanceError::Spatial(SpatialError::NoSalientRegion)
                | GuidanceError::Spatial(SpatialError::EmptyCrop(_))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyParams {
    /// Weight of the extra-component penalty.
    pub lambda_c: f64,
    /// Weight of the normalized centroid spread.
    pub lambda_d: f64,
    /// Heads with entropy strictly below this survive.
    pub threshold: f64,
    pub otsu_bins: usize,
    pub connectivity: Connectivity,
}

impl Default for EntropyParams {
    fn default() -> Self {
        Self {
            lambda_c: 0.25,
            lambda_d: 0.75,
            threshold: 0.3,
            otsu_bins: DEFAULT_OTSU_BINS,
            connectivity: Connectivity::Eight,
        }
    }
}

/// Which heads the min–max normalization of the fused score ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionScope {
    /// Only heads that pass the entropy filter.
    #[default]
    Survivors,
    /// Every candidate head, before filtering.
    AllCandidates,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionParams {
    /// Weight of the concentration branch; `1 - alpha` goes to the gradient branch.
    pub alpha: f64,
    pub top_k: usize,
    pub temperature: f64,
    pub scope: FusionScope,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            top_k: 8,
            temperature: 0.1,
            scope: FusionScope::Survivors,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceParams {
    pub entropy: EntropyParams,
    pub fusion: FusionParams,
    pub bbox: BoxParams,
}

impl GuidanceParams {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        let e = &self.entropy;
        let f = &self.fusion;
        let bad = |m: String| Err(GuidanceError::BadParams(m));
        if !(e.lambda_c >= 0.0 && e.lambda_d >= 0.0) {
            return bad(format!("lambdas must be >= 0 ({}, {})", e.lambda_c, e.lambda_d));
        }
        if !(0.0..=1.0).contains(&e.threshold) {
            return bad(format!("entropy threshold {} not in [0, 1]", e.threshold));
        }
        if e.otsu_bins < 2 {
            return bad(format!("otsu_bins {} < 2", e.otsu_bins));
        }
        if !(0.0..=1.0).contains(&f.alpha) {
            return bad(format!("alpha {} not in [0, 1]", f.alpha));
        }
        if f.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if !(f.temperature > 0.0 && f.temperature.is_finite()) {
            return Err(GuidanceError::BadTemperature(f.temperature));
        }
        self.bbox.validate()?;
        Ok(())
    }
}

/// Lays a row-major visual attention vector out on the `side × side` grid.
pub fn reshape_attention(a: &[f32], side: usize) -> Result<GridMap, GuidanceError> {
    if side == 0 || a.len() != side * side {
        return Err(GuidanceError::NotSquare(a.len(), side));
    }
    Ok(GridMap::new(side, a.iter().map(|&v| v as f64).collect())?)
}

/// Inverse of [`reshape_attention`].
pub fn flatten(m: &GridMap) -> Vec<f32> {
    m.values().iter().map(|&v| v as f32).collect()
}

/// Terms of the spatial entropy for one map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyBreakdown {
    pub components: usize,
    pub mean_distance: f64,
    /// Value before clamping to 1.
    pub unclamped: f64,
    pub entropy: f64,
}

/// `min(λc·(C−1) + λd·d̄/d_max, 1)` over the Otsu mask of the normalized map.
/// An empty mask gives entropy 1.
pub fn spatial_entropy(m: &GridMap, p: &EntropyParams) -> EntropyBreakdown {
    let norm = normalize01(m);
    let otsu = otsu_threshold(&norm, p.otsu_bins);
    let comps = connected_components(&otsu.mask, m.side(), p.connectivity);
    let c = comps.count();
    if c == 0 {
        return EntropyBreakdown {
            components: 0,
            mean_distance: 0.0,
            unclamped: 1.0,
            entropy: 1.0,
        };
    }
    let d = mean_pairwise_distance(&comps.centroids);
    let unclamped = p.lambda_c * (c - 1) as f64 + p.lambda_d * d / grid_diagonal(m.side());
    EntropyBreakdown {
        components: c,
        mean_distance: d,
        unclamped,
        entropy: unclamped.min(1.0),
    }
}

/// `Σ a[j] · max(0, sens[j])`.
pub fn gradient_score(a: &[f32], sens: &[f32]) -> Result<f64, GuidanceError> {
    if a.len() != sens.len() {
        return Err(GuidanceError::LengthMismatch {
            attn: a.len(),
            sens: sens.len(),
        });
    }
    Ok(a.iter()
        .zip(sens)
        .map(|(&a, &s)| a as f64 * (s as f64).max(0.0))
        .sum())
}

/// Min–max normalization; a constant (or empty) input maps to zeros.
pub fn minmax(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// `α·N(1−E) + (1−α)·N(G)` with N the min–max over the given heads.
pub fn fuse_scores(entropies: &[f64], grads: &[f64], alpha: f64) -> Vec<f64> {
    assert_eq!(entropies.len(), grads.len(), "one entropy and one gradient score per head");
    let conc: Vec<f64> = entropies.iter().map(|e| 1.0 - e).collect();
    let nc = minmax(&conc);
    let ng = minmax(grads);
    nc.iter()
        .zip(&ng)
        .map(|(c, g)| alpha * c + (1.0 - alpha) * g)
        .collect()
}

/// Temperature softmax with max subtraction.
pub fn softmax_weights(scores: &[f64], temperature: f64) -> Result<Vec<f64>, GuidanceError> {
    if !(temperature > 0.0) {
        return Err(GuidanceError::BadTemperature(temperature));
    }
    if scores.is_empty() {
        return Err(GuidanceError::EmptySelection);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Elementwise `Σ w_h · A_h`.
pub fn aggregate_map(maps: &[&GridMap], weights: &[f64]) -> Result<GridMap, GuidanceError> {
    if maps.len() != weights.len() {
        return Err(GuidanceError::WeightCount {
            maps: maps.len(),
            weights: weights.len(),
        });
    }
    let first = maps.first().ok_or(GuidanceError::EmptySelection)?;
    let side = first.side();
    let mut acc = vec![0.0f64; side * side];
    for (m, &w) in maps.iter().zip(weights) {
        if m.side() != side {
            return Err(GuidanceError::MapSide {
                expected: side,
                found: m.side(),
            });
        }
        for (a, &v) in acc.iter_mut().zip(m.values()) {
            *a += w * v;
        }
    }
    Ok(GridMap::new(side, acc)?)
}

/// Per-head scores. `fused` is set for heads that entered the ranking and
/// `weight` for heads that were selected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadAssessment {
    pub head: HeadId,
    pub entropy: f64,
    pub components: usize,
    pub mean_distance: f64,
    pub grad_score: f64,
    pub passed_entropy: bool,
    pub fused: Option<f64>,
    pub weight: Option<f64>,
}

/// Which heads are considered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidatePool {
    Experts,
    AllHeads,
}

/// How selected heads are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Every candidate with equal weight, no ranking.
    Uniform,
    /// Fused score, top-K, temperature softmax. `alpha` overrides the
    /// configured blend when set.
    Fused { alpha: Option<f64> },
}

/// A point on the ablation ladder; [`Strategy::HAVC`] is the full method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Strategy {
    pub pool: CandidatePool,
    pub entropy_filter: bool,
    pub weighting: Weighting,
}

impl Strategy {
    pub const HAVC: Strategy = Strategy {
        pool: CandidatePool::Experts,
        entropy_filter: true,
        weighting: Weighting::Fused { alpha: None },
    };
    pub const ALL_HEADS: Strategy = Strategy {
        pool: CandidatePool::AllHeads,
        entropy_filter: false,
        weighting: Weighting::Uniform,
    };
    pub const FILTER_HEADS: Strategy = Strategy {
        pool: CandidatePool::Experts,
        entropy_filter: false,
        weighting: Weighting::Uniform,
    };
    pub const FILTER_ENTROPY: Strategy = Strategy {
        pool: CandidatePool::Experts,
        entropy_filter: true,
        weighting: Weighting::Fused { alpha: Some(1.0) },
    };
    pub const FILTER_GRADIENT: Strategy = Strategy {
        pool: CandidatePool::Experts,
        entropy_filter: false,
        weighting: Weighting::Fused { alpha: Some(0.0) },
    };
}

/// Output of the whole pipeline for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceResult {
    /// Selected heads by descending fused score, ties by head id.
    pub selected: Vec<HeadAssessment>,
    /// Every head that was assessed, in head order.
    pub candidates: Vec<HeadAssessment>,
    pub map: GridMap,
    pub crop: Extraction,
    /// No head passed the entropy filter and ranking fell back to gradients.
    pub fallback: bool,
    pub gradient_available: bool,
    /// Blend actually used by the ranking.
    pub alpha: f64,
    pub warnings: Vec<String>,
}

struct Assessed {
    info: HeadAssessment,
    map: GridMap,
}

fn assess(
    record: &InferenceRecord,
    heads: &[HeadId],
    p: &EntropyParams,
) -> Result<Vec<Assessed>, PipelineError> {
    let side = record.grid_side();
    let mut out = Vec::with_capacity(heads.len());
    for &h in heads {
        let a = record
            .attention()
            .row(h)
            .expect("candidate heads come from the record");
        let map = reshape_attention(a, side).map_err(PipelineError::at(Stage::Reshape))?;
        let e = spatial_entropy(&map, p);
        let g = match record.gradient().and_then(|g| g.row(h)) {
            Some(s) => gradient_score(a, s).map_err(PipelineError::at(Stage::Gradient))?,
            None => 0.0,
        };
        out.push(Assessed {
            info: HeadAssessment {
                head: h,
                entropy: e.entropy,
                components: e.components,
                mean_distance: e.mean_distance,
                grad_score: g,
                passed_entropy: e.entropy < p.threshold,
                fused: None,
                weight: None,
            },
            map,
        });
    }
    Ok(out)
}

fn by_score_then_head(a: &HeadAssessment, b: &HeadAssessment) -> Ordering {
    let (sa, sb) = (a.fused.unwrap_or(0.0), b.fused.unwrap_or(0.0));
    sb.total_cmp(&sa).then(a.head.cmp(&b.head))
}

/// Candidate heads for `pool`: the experts present in the record, or every
/// head of the record.
pub fn candidate_heads(
    experts: &ExpertHeadSet,
    record: &InferenceRecord,
    pool: CandidatePool,
) -> Result<Vec<HeadId>, GuidanceError> {
    match pool {
        CandidatePool::AllHeads => Ok(record.attention().heads().to_vec()),
        CandidatePool::Experts => {
            if experts.is_empty() {
                return Err(GuidanceError::NoExperts);
            }
            let heads: Vec<HeadId> = experts
                .heads
                .iter()
                .copied()
                .filter(|&h| record.attention().row(h).is_some())
                .collect();
            if heads.is_empty() {
                return Err(GuidanceError::DisjointExperts);
            }
            Ok(heads)
        }
    }
}

/// Heads chosen by the ranking stage, before softmax weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub candidates: Vec<HeadAssessment>,
    /// Ranked heads with `fused` set.
    pub selected: Vec<HeadAssessment>,
    pub fallback: bool,
    pub alpha: f64,
}

/// Entropy filter, fusion and top-K over precomputed assessments.
///
/// Survivors of the strict entropy cut are ranked by the fused score. If no
/// head survives, all candidates are ranked by their gradient score alone.
pub fn select_heads(
    assessments: &[HeadAssessment],
    entropy_filter: bool,
    alpha: f64,
    fusion: &FusionParams,
) -> Result<Selection, GuidanceError> {
    if assessments.is_empty() {
        return Err(GuidanceError::EmptySelection);
    }
    let mut candidates = assessments.to_vec();
    let pool: Vec<usize> = if entropy_filter {
        (0..candidates.len())
            .filter(|&i| candidates[i].passed_entropy)
            .collect()
    } else {
        (0..candidates.len()).collect()
    };
    let (ranked, fallback, alpha) = if pool.is_empty() {
        log::warn!("no head passed the entropy filter; ranking by gradient score");
        ((0..candidates.len()).collect::<Vec<_>>(), true, 0.0)
    } else {
        (pool, false, alpha)
    };

    let norm_over: Vec<usize> = match fusion.scope {
        FusionScope::AllCandidates if !fallback => (0..candidates.len()).collect(),
        _ => ranked.clone(),
    };
    let e: Vec<f64> = norm_over.iter().map(|&i| candidates[i].entropy).collect();
    let g: Vec<f64> = norm_over.iter().map(|&i| candidates[i].grad_score).collect();
    let fused = fuse_scores(&e, &g, alpha);
    for (&i, s) in norm_over.iter().zip(fused) {
        if ranked.contains(&i) {
            candidates[i].fused = Some(s);
        }
    }
    let mut selected: Vec<HeadAssessment> = ranked.iter().map(|&i| candidates[i].clone()).collect();
    selected.sort_by(by_score_then_head);
    selected.truncate(fusion.top_k);
    Ok(Selection {
        candidates,
        selected,
        fallback,
        alpha,
    })
}

/// Runs the full method on one record.
pub fn run_pipeline(
    experts: &ExpertHeadSet,
    record: &InferenceRecord,
    params: &GuidanceParams,
) -> Result<GuidanceResult, PipelineError> {
    run_strategy(Strategy::HAVC, experts, record, params)
}

/// Runs one ablation variant on one record.
pub fn run_strategy(
    strategy: Strategy,
    experts: &ExpertHeadSet,
    record: &InferenceRecord,
    params: &GuidanceParams,
) -> Result<GuidanceResult, PipelineError> {
    params.validate().map_err(PipelineError::at(Stage::Params))?;
    let mut warnings = Vec::new();
    let heads = candidate_heads(experts, record, strategy.pool).map_err(PipelineError::at(Stage::Select))?;
    let gradient_available = record.gradient().is_some();
    let alpha = match strategy.weighting {
        Weighting::Fused { alpha: Some(a) } => a,
        _ => params.fusion.alpha,
    };
    if !gradient_available && alpha < 1.0 && matches!(strategy.weighting, Weighting::Fused { .. }) {
        let msg = "record has no gradient tensors; gradient branch is a constant axis".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let assessed = assess(record, &heads, &params.entropy)?;
    let infos: Vec<HeadAssessment> = assessed.iter().map(|a| a.info.clone()).collect();

    let (mut selected, candidates, fallback, alpha) = match strategy.weighting {
        Weighting::Uniform => {
            let pool: Vec<HeadAssessment> = if strategy.entropy_filter {
                infos.iter().filter(|a| a.passed_entropy).cloned().collect()
            } else {
                infos.clone()
            };
            let (pool, fallback) = if pool.is_empty() {
                (infos.clone(), true)
            } else {
                (pool, false)
            };
            (pool, infos, fallback, alpha)
        }
        Weighting::Fused { .. } => {
            let sel = select_heads(&infos, strategy.entropy_filter, alpha, &params.fusion)
                .map_err(PipelineError::at(Stage::Select))?;
            (sel.selected, sel.candidates, sel.fallback, sel.alpha)
        }
    };
    if fallback {
        warnings.push("no head passed the entropy filter; fell back to gradient ranking".into());
    }

    let weights = match strategy.weighting {
        Weighting::Uniform => vec![1.0 / selected.len() as f64; selected.len()],
        Weighting::Fused { .. } => {
            let s: Vec<f64> = selected.iter().map(|a| a.fused.unwrap_or(0.0)).collect();
            softmax_weights(&s, params.fusion.temperature).map_err(PipelineError::at(Stage::Softmax))?
        }
    };
    for (a, &w) in selected.iter_mut().zip(&weights) {
        a.weight = Some(w);
    }
    let maps: Vec<&GridMap> = selected
        .iter()
        .map(|s| {
            &assessed
                .iter()
                .find(|a| a.info.head == s.head)
                .expect("selected heads were assessed")
                .map
        })
        .collect();
    let map = aggregate_map(&maps, &weights).map_err(PipelineError::at(Stage::Aggregate))?;
    let crop = extract_bbox(&map, record.image(), &params.bbox)
        .map_err(|e| PipelineError::at(Stage::Crop)(e.into()))?;
    Ok(GuidanceResult {
        selected,
        candidates,
        map,
        crop,
        fallback,
        gradient_available,
        alpha,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_is_row_major() {
        let m = reshape_attention(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(m.get(0, 1), 2.0);
        assert_eq!(m.get(1, 0), 3.0);
        assert_eq!(
            reshape_attention(&[1.0; 5], 2),
            Err(GuidanceError::NotSquare(5, 2))
        );
    }

    #[test]
    fn single_blob_has_zero_entropy() {
        let mut v = vec![0.0; 64];
        for (r, c) in [(3, 3), (3, 4), (4, 3), (4, 4)] {
            v[r * 8 + c] = 1.0;
        }
        let e = spatial_entropy(&GridMap::new(8, v).unwrap(), &EntropyParams::default());
        assert_eq!(e.components, 1);
        assert_eq!(e.entropy, 0.0);
    }

    #[test]
    fn constant_map_has_unit_entropy() {
        let e = spatial_entropy(&GridMap::new(4, vec![0.5; 16]).unwrap(), &EntropyParams::default());
        assert_eq!(e.components, 0);
        assert_eq!(e.entropy, 1.0);
    }

    #[test]
    fn gradient_score_examples() {
        assert_eq!(gradient_score(&[0.5, 0.5], &[2.0, -2.0]).unwrap(), 1.0);
        assert_eq!(gradient_score(&[0.3, 0.7], &[-1.0, 0.0]).unwrap(), 0.0);
        assert!(gradient_score(&[0.3], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn fusion_boundaries() {
        let e = [0.1, 0.0, 0.25];
        let g = [5.0, 1.0, 3.0];
        let f = fuse_scores(&e, &g, 1.0);
        for (a, b) in f.iter().zip([0.6, 1.0, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(fuse_scores(&e, &g, 0.0), vec![1.0, 0.0, 0.5]);
        // constant gradient axis contributes nothing
        assert!((fuse_scores(&e, &[2.0; 3], 0.4)[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn softmax_limits() {
        let w = softmax_weights(&[0.3; 4], 0.1).unwrap();
        assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let w = softmax_weights(&[0.2, 0.9, 0.5], 1e-6).unwrap();
        assert!(w[1] > 1.0 - 1e-6);
        assert_eq!(
            softmax_weights(&[1.0], 0.0),
            Err(GuidanceError::BadTemperature(0.0))
        );
    }

    #[test]
    fn aggregate_linearity() {
        let m = GridMap::new(2, vec![0.1, 0.7, 0.3, 0.0]).unwrap();
        let inv = GridMap::new(2, m.values().iter().map(|v| 1.0 - v).collect()).unwrap();
        let out = aggregate_map(&[&m, &inv], &[0.5, 0.5]).unwrap();
        assert!(out.values().iter().all(|v| (v - 0.5).abs() < 1e-15));
        assert_eq!(aggregate_map(&[&m], &[1.0]).unwrap(), m);
    }

    fn assessment(layer: u32, entropy: f64, grad: f64, threshold: f64) -> HeadAssessment {
        HeadAssessment {
            head: HeadId::new(layer, 0),
            entropy,
            components: 1,
            mean_distance: 0.0,
            grad_score: grad,
            passed_entropy: entropy < threshold,
            fused: None,
            weight: None,
        }
    }

    #[test]
    fn underfull_k_takes_all_survivors() {
        let a = vec![
            assessment(0, 0.0, 1.0, 0.3),
            assessment(1, 0.5, 9.0, 0.3),
            assessment(2, 0.1, 2.0, 0.3),
            assessment(3, 0.29, 0.5, 0.3),
        ];
        let s = select_heads(&a, true, 0.4, &FusionParams::default()).unwrap();
        assert!(!s.fallback);
        let heads: Vec<u32> = s.selected.iter().map(|a| a.head.layer).collect();
        assert_eq!(heads.len(), 3);
        assert!(!heads.contains(&1));
    }

    #[test]
    fn exact_threshold_is_excluded() {
        let a = vec![assessment(0, 0.3, 1.0, 0.3), assessment(1, 0.0, 0.0, 0.3)];
        let s = select_heads(&a, true, 0.4, &FusionParams::default()).unwrap();
        assert_eq!(s.selected.len(), 1);
        assert_eq!(s.selected[0].head.layer, 1);
    }

    #[test]
    fn fallback_ranks_by_gradient() {
        let a = vec![
            assessment(0, 0.5, 1.0, 0.3),
            assessment(1, 0.9, 3.0, 0.3),
            assessment(2, 0.4, 2.0, 0.3),
        ];
        let p = FusionParams {
            top_k: 2,
            ..FusionParams::default()
        };
        let s = select_heads(&a, true, 0.4, &p).unwrap();
        assert!(s.fallback);
        let heads: Vec<u32> = s.selected.iter().map(|a| a.head.layer).collect();
        assert_eq!(heads, vec![1, 2]);
    }

    #[test]
    fn ties_break_by_head() {
        let a = vec![assessment(3, 0.0, 1.0, 0.3), assessment(1, 0.0, 1.0, 0.3)];
        let s = select_heads(&a, true, 0.4, &FusionParams::default()).unwrap();
        assert_eq!(s.selected[0].head.layer, 1);
    }
}
