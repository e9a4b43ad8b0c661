//! Localization benchmark on synthetic scenes: the ablation ladder and the
//! alpha and top-K sweeps. Quality is IoU in patch space between the crop
//! and the planted region.

use rand::Rng;
use serde::Serialize;

use crate::guidance::{run_strategy, GuidanceParams, Strategy};
use crate::spatial::PatchBox;
use crate::synth::{gen_scene, stream, Scene, ScenarioError, ScenarioSpec};

/// IoU at or above which a crop counts as a hit.
pub const HIT_IOU: f64 = 0.5;

pub const ALPHA_GRID: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
pub const TOP_K_GRID: [usize; 5] = [1, 2, 4, 8, 16];

const STREAM_RANDOM_CROP: u64 = 3 << 32;

/// Rungs of the ablation ladder, weakest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// The whole image.
    NoCrop,
    /// A box of the full method's size at a uniformly random position.
    RandomCrop,
    AllHeads,
    FilterHeads,
    FilterEntropy,
    FilterGradient,
    Havc,
}

impl Variant {
    pub const LADDER: [Variant; 7] = [
        Variant::NoCrop,
        Variant::RandomCrop,
        Variant::AllHeads,
        Variant::FilterHeads,
        Variant::FilterEntropy,
        Variant::FilterGradient,
        Variant::Havc,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::NoCrop => "no-crop",
            Variant::RandomCrop => "random-crop",
            Variant::AllHeads => "all-heads",
            Variant::FilterHeads => "filter-heads",
            Variant::FilterEntropy => "+entropy",
            Variant::FilterGradient => "+gradient",
            Variant::Havc => "havc",
        }
    }

    fn strategy(self) -> Option<Strategy> {
        match self {
            Variant::AllHeads => Some(Strategy::ALL_HEADS),
            Variant::FilterHeads => Some(Strategy::FILTER_HEADS),
            Variant::FilterEntropy => Some(Strategy::FILTER_ENTROPY),
            Variant::FilterGradient => Some(Strategy::FILTER_GRADIENT),
            Variant::Havc => Some(Strategy::HAVC),
            Variant::NoCrop | Variant::RandomCrop => None,
        }
    }
}

/// The scenes of a benchmark suite, generated once.
#[derive(Debug, Clone)]
pub struct Suite {
    pub scenes: Vec<Scene>,
}

impl Suite {
    pub fn generate(base: &ScenarioSpec, n_scenes: usize) -> Result<Self, ScenarioError> {
        let scenes = (0..n_scenes as u64)
            .map(|i| gen_scene(&base.suite_member(i)))
            .collect::<Result<_, _>>()?;
        Ok(Self { scenes })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// Crop box chosen by `strategy` for `scene`, or `None` when the pipeline
/// fails on it.
pub fn strategy_box(strategy: Strategy, scene: &Scene, params: &GuidanceParams) -> Option<PatchBox> {
    run_strategy(strategy, &scene.truth.experts, &scene.record, params)
        .map(|r| r.crop.patch)
        .ok()
}

fn random_box(reference: PatchBox, side: usize, seed: u64) -> PatchBox {
    let mut rng = stream(seed, STREAM_RANDOM_CROP);
    let (h, w) = (reference.height().clamp(1, side), reference.width().clamp(1, side));
    let r0 = rng.gen_range(0..=side - h);
    let c0 = rng.gen_range(0..=side - w);
    PatchBox::new(r0, c0, r0 + h, c0 + w)
}

/// IoU of `variant` on one scene; a failed run scores 0.
pub fn variant_iou(variant: Variant, scene: &Scene, params: &GuidanceParams) -> f64 {
    let side = scene.record.grid_side();
    let region = scene.truth.region;
    let crop = match variant {
        Variant::NoCrop => Some(PatchBox::new(0, 0, side, side)),
        Variant::RandomCrop => {
            let reference = strategy_box(Strategy::HAVC, scene, params).unwrap_or(region);
            Some(random_box(reference, side, scene.spec.seed))
        }
        v => strategy_box(v.strategy().expect("pipeline variant"), scene, params),
    };
    crop.map_or(0.0, |b| b.iou(&region))
}

/// Mean IoU and hit count of one configuration over a suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Score {
    pub mean_iou: f64,
    pub hits: usize,
    pub scenes: usize,
}

impl Score {
    fn from_ious(ious: &[f64]) -> Self {
        let n = ious.len();
        Self {
            mean_iou: if n == 0 { 0.0 } else { ious.iter().sum::<f64>() / n as f64 },
            hits: ious.iter().filter(|&&v| v >= HIT_IOU).count(),
            scenes: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderRow {
    pub variant: Variant,
    pub label: &'static str,
    #[serde(flatten)]
    pub score: Score,
}

pub fn evaluate(suite: &Suite, variant: Variant, params: &GuidanceParams) -> Score {
    let ious: Vec<f64> = suite
        .scenes
        .iter()
        .map(|s| variant_iou(variant, s, params))
        .collect();
    Score::from_ious(&ious)
}

pub fn ablation_ladder(suite: &Suite, params: &GuidanceParams) -> Vec<LadderRow> {
    Variant::LADDER
        .iter()
        .map(|&v| LadderRow {
            variant: v,
            label: v.label(),
            score: evaluate(suite, v, params),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    #[serde(flatten)]
    pub score: Score,
}

/// Full method at each `alpha`, other parameters from `params`.
pub fn sweep_alpha(suite: &Suite, params: &GuidanceParams, alphas: &[f64]) -> Vec<SweepPoint> {
    alphas
        .iter()
        .map(|&alpha| {
            let mut p = *params;
            p.fusion.alpha = alpha;
            SweepPoint {
                value: alpha,
                score: evaluate(suite, Variant::Havc, &p),
            }
        })
        .collect()
}

/// Full method at each `top_k`, other parameters from `params`.
pub fn sweep_top_k(suite: &Suite, params: &GuidanceParams, ks: &[usize]) -> Vec<SweepPoint> {
    ks.iter()
        .map(|&k| {
            let mut p = *params;
            p.fusion.top_k = k;
            SweepPoint {
                value: k as f64,
                score: evaluate(suite, Variant::Havc, &p),
            }
        })
        .collect()
}

/// True when the best mean IoU sits at an interior point and strictly
/// exceeds both endpoints.
pub fn has_interior_max(points: &[SweepPoint]) -> bool {
    if points.len() < 3 {
        return false;
    }
    let first = points[0].score.mean_iou;
    let last = points[points.len() - 1].score.mean_iou;
    let best = points[1..points.len() - 1]
        .iter()
        .map(|p| p.score.mean_iou)
        .fold(f64::NEG_INFINITY, f64::max);
    best > first && best > last
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub kind: &'static str,
    pub version: u32,
    pub seed: u64,
    pub scenes: usize,
    pub params: GuidanceParams,
    pub ladder: Vec<LadderRow>,
    pub alpha: Vec<SweepPoint>,
    pub top_k: Vec<SweepPoint>,
    pub alpha_interior_max: bool,
}

pub fn run_sweeps(suite: &Suite, seed: u64, params: &GuidanceParams) -> SweepReport {
    let alpha = sweep_alpha(suite, params, &ALPHA_GRID);
    let mut k_params = *params;
    k_params.fusion.alpha = 0.4;
    SweepReport {
        kind: "sweep-report",
        version: 1,
        seed,
        scenes: suite.len(),
        params: *params,
        ladder: ablation_ladder(suite, params),
        alpha_interior_max: has_interior_max(&alpha),
        alpha,
        top_k: sweep_top_k(suite, &k_params, &TOP_K_GRID),
    }
}
