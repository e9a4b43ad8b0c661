//! Inference scenes: per-head visual attention maps with known roles, and a
//! logistic-linear surrogate that gives the answer log-probability exact
//! gradients with respect to every attention entry.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{stream, ScenarioError, ScenarioSpec, STREAM_SCENE};
use crate::profiler::ExpertHeadSet;
use crate::records::{AttentionTable, HeadId, ImageGeometry, InferenceRecord};
use crate::spatial::PatchBox;

/// Largest attention value of any generated visual map.
const PEAK_ATTENTION: f64 = 0.05;
const PLANTED_READOUT: f64 = 2.0;
const SURROGATE_BIAS: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadRole {
    /// One compact blob over the planted region; positive readout there.
    Planted,
    /// One compact blob elsewhere; negative readout.
    Distractor,
    /// Two hot cells close together elsewhere; the largest positive readout.
    Greedy,
    /// Several scattered blobs; zero or negative readout.
    Noise,
}

/// Ground truth of a generated scene.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneTruth {
    pub region: PatchBox,
    pub roles: BTreeMap<HeadId, HeadRole>,
    /// Heads a stage-1 profile would hand to the guidance stage.
    pub experts: ExpertHeadSet,
    /// Ratio of the planted head's gradient score to the greedy head's.
    pub gradient_ratio: f64,
}

impl SceneTruth {
    pub fn heads_with(&self, role: HeadRole) -> Vec<HeadId> {
        self.roles
            .iter()
            .filter(|(_, &r)| r == role)
            .map(|(&h, _)| h)
            .collect()
    }
}

/// Raw maps (before quantization) plus the cells each head's readout covers.
#[derive(Debug, Clone)]
pub struct SceneMaps {
    pub maps: BTreeMap<HeadId, Vec<f64>>,
    pub support: BTreeMap<HeadId, Vec<usize>>,
    pub truth: SceneTruth,
}

/// A generated record with its surrogate and ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: ScenarioSpec,
    pub record: InferenceRecord,
    pub surrogate: SurrogateModel,
    pub truth: SceneTruth,
}

fn add_blob(map: &mut [f64], n: usize, center: (f64, f64), sigma: (f64, f64), amp: f64) {
    for r in 0..n {
        for c in 0..n {
            let dr = (r as f64 - center.0) / sigma.0;
            let dc = (c as f64 - center.1) / sigma.1;
            map[r * n + c] += amp * (-0.5 * (dr * dr + dc * dc)).exp();
        }
    }
}

fn dist_to_box(p: (f64, f64), b: &PatchBox) -> f64 {
    let axis = |v: f64, lo: usize, hi: usize| {
        let (lo, hi) = (lo as f64, (hi - 1) as f64);
        (lo - v).max(v - hi).max(0.0)
    };
    axis(p.0, b.r0, b.r1).hypot(axis(p.1, b.c0, b.c1))
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Random integer cell at least `box_gap` from `avoid_box` and `sep` from
/// every point in `taken`. Falls back to the best of 2000 draws.
fn place(
    rng: &mut ChaCha8Rng,
    n: usize,
    margin: usize,
    avoid_box: Option<&PatchBox>,
    box_gap: f64,
    taken: &[(f64, f64)],
    sep: f64,
) -> (f64, f64) {
    let lo = margin.min(n / 2);
    let hi = (n - 1).saturating_sub(margin).max(lo);
    let mut best = ((lo as f64, lo as f64), f64::NEG_INFINITY);
    for _ in 0..2000 {
        let p = (rng.gen_range(lo..=hi) as f64, rng.gen_range(lo..=hi) as f64);
        let box_slack = avoid_box.map_or(f64::INFINITY, |b| dist_to_box(p, b) - box_gap);
        let sep_slack = taken
            .iter()
            .map(|&t| dist(p, t) - sep)
            .fold(f64::INFINITY, f64::min);
        let slack = box_slack.min(sep_slack);
        if slack >= 0.0 {
            return p;
        }
        if slack > best.1 {
            best = (p, slack);
        }
    }
    best.0
}

fn finish_map(rng: &mut ChaCha8Rng, mut map: Vec<f64>, noise: f64) -> Vec<f64> {
    for v in &mut map {
        *v += noise * rng.gen::<f64>();
    }
    let max = map.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut map {
            *v *= PEAK_ATTENTION / max;
        }
    }
    map
}

/// Builds every head's visual attention map for `spec`, deterministically.
pub fn scene_maps(spec: &ScenarioSpec) -> Result<SceneMaps, ScenarioError> {
    spec.validate()?;
    let mut rng = stream(spec.seed, STREAM_SCENE);
    let n = spec.grid_side;
    let region = spec.planted_region;
    let geometry = spec.geometry();

    let mut others: Vec<HeadId> = geometry
        .heads()
        .filter(|h| !spec.planted_heads.contains(h))
        .collect();
    others.shuffle(&mut rng);
    let mut roles = BTreeMap::new();
    for &h in &spec.planted_heads {
        roles.insert(h, HeadRole::Planted);
    }
    let mut it = others.iter().copied();
    let distractors: Vec<HeadId> = it.by_ref().take(spec.distractor_heads).collect();
    let greedy: Vec<HeadId> = it.by_ref().take(spec.greedy_heads).collect();
    let noise: Vec<HeadId> = it.collect();
    roles.extend(distractors.iter().map(|&h| (h, HeadRole::Distractor)));
    roles.extend(greedy.iter().map(|&h| (h, HeadRole::Greedy)));
    roles.extend(noise.iter().map(|&h| (h, HeadRole::Noise)));
    let mut expert_heads: Vec<HeadId> = spec.planted_heads.clone();
    expert_heads.extend(&distractors);
    expert_heads.extend(&greedy);
    expert_heads.extend(noise.iter().take(spec.expert_noise_heads));

    let mut maps = BTreeMap::new();
    let mut support = BTreeMap::new();
    let center = (
        (region.r0 + region.r1 - 1) as f64 / 2.0,
        (region.c0 + region.c1 - 1) as f64 / 2.0,
    );
    let region_cells: Vec<usize> = (region.r0..region.r1)
        .flat_map(|r| (region.c0..region.c1).map(move |c| r * n + c))
        .collect();
    let cells_above = |m: &[f64], frac: f64| -> Vec<usize> {
        let max = m.iter().copied().fold(0.0, f64::max);
        (0..m.len()).filter(|&i| m[i] >= frac * max).collect()
    };

    for &h in &spec.planted_heads {
        let mut m = vec![0.0; n * n];
        let sigma = (region.height() as f64 / 3.5, region.width() as f64 / 3.5);
        add_blob(&mut m, n, center, sigma, 1.0);
        maps.insert(h, finish_map(&mut rng, m, spec.noise_level));
        support.insert(h, region_cells.clone());
    }

    let mut taken: Vec<(f64, f64)> = Vec::new();
    for &h in &distractors {
        let sigma = (
            rng.gen_range(4..=8) as f64 / 3.5,
            rng.gen_range(4..=8) as f64 / 3.5,
        );
        let reach = 2.0 * sigma.0.max(sigma.1) + 2.0;
        let p = place(&mut rng, n, 2, Some(&region), reach, &taken, 6.0);
        taken.push(p);
        let mut m = vec![0.0; n * n];
        add_blob(&mut m, n, p, sigma, 1.0);
        support.insert(h, cells_above(&m, 0.1));
        maps.insert(h, finish_map(&mut rng, m, spec.noise_level));
    }

    for &h in &greedy {
        let p = place(&mut rng, n, 1, Some(&region), 3.0, &taken, 5.0);
        taken.push(p);
        let (r, c) = (p.0 as usize, (p.1 as usize).min(n.saturating_sub(3)));
        let mut m = vec![0.0; n * n];
        m[r * n + c] = 1.0;
        m[r * n + c + 2] = 0.95;
        support.insert(h, vec![r * n + c, r * n + c + 2]);
        maps.insert(h, finish_map(&mut rng, m, spec.noise_level));
    }

    for &h in &noise {
        let k = rng.gen_range(2..=4);
        let mut centers: Vec<(f64, f64)> = Vec::new();
        let mut m = vec![0.0; n * n];
        for _ in 0..k {
            let p = place(&mut rng, n, 1, None, 0.0, &centers, 7.0);
            centers.push(p);
            let s = rng.gen_range(0.8..1.3);
            let amp = rng.gen_range(0.8..1.0);
            add_blob(&mut m, n, p, (s, s), amp);
        }
        let negative = rng.gen_bool(0.5);
        support.insert(h, if negative { cells_above(&m, 0.1) } else { Vec::new() });
        maps.insert(h, finish_map(&mut rng, m, spec.noise_level));
    }

    let gradient_ratio = rng.gen_range(0.5..0.9);
    Ok(SceneMaps {
        maps,
        support,
        truth: SceneTruth {
            region,
            roles,
            experts: ExpertHeadSet::new(expert_heads, 0.5),
            gradient_ratio,
        },
    })
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log σ(z)` without overflow.
fn log_logistic(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// `log p(y*) = log σ(Σ_h ⟨readout_h, a_h⟩ + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub readout: BTreeMap<HeadId, Vec<f64>>,
    pub bias: f64,
}

impl SurrogateModel {
    /// Readout that is identically zero.
    pub fn zeros(heads: impl IntoIterator<Item = HeadId>, n_visual: usize) -> Self {
        Self {
            readout: heads.into_iter().map(|h| (h, vec![0.0; n_visual])).collect(),
            bias: 0.0,
        }
    }

    /// Surrogate matched to a scene: the planted heads read the planted
    /// region, greedy heads read their hot cells with a weight chosen so the
    /// planted-to-greedy gradient score ratio equals `truth.gradient_ratio`,
    /// distractors and some noise heads read their blobs negatively.
    pub fn for_scene(scene: &SceneMaps, n_visual: usize) -> Self {
        let roles = &scene.truth.roles;
        let mass = |h: &HeadId| -> f64 {
            let m = &scene.maps[h];
            scene.support[h].iter().map(|&i| m[i]).sum()
        };
        let planted_g: f64 = scene
            .truth
            .heads_with(HeadRole::Planted)
            .iter()
            .map(|h| PLANTED_READOUT * mass(h))
            .fold(0.0, f64::max);
        let mut readout = BTreeMap::new();
        for (h, role) in roles {
            let mut w = vec![0.0; n_visual];
            let value = match role {
                HeadRole::Planted => PLANTED_READOUT,
                HeadRole::Greedy => planted_g / (scene.truth.gradient_ratio * mass(h)),
                HeadRole::Distractor => -1.0,
                HeadRole::Noise => -0.5,
            };
            for &i in &scene.support[h] {
                w[i] = value;
            }
            readout.insert(*h, w);
        }
        Self {
            readout,
            bias: SURROGATE_BIAS,
        }
    }

    /// Logit for per-head attention given as `f64` rows.
    pub fn logit<'a, I>(&self, rows: I) -> f64
    where
        I: IntoIterator<Item = (HeadId, &'a [f64])>,
    {
        let mut z = self.bias;
        for (h, a) in rows {
            if let Some(w) = self.readout.get(&h) {
                z += w.iter().zip(a).map(|(w, a)| w * a).sum::<f64>();
            }
        }
        z
    }

    pub fn log_prob<'a, I>(&self, rows: I) -> f64
    where
        I: IntoIterator<Item = (HeadId, &'a [f64])>,
    {
        log_logistic(self.logit(rows))
    }

    /// Closed-form `∂ log p / ∂ a_h = (1 − p) · readout_h` at the given attention.
    pub fn sensitivity<'a, I>(&self, rows: I) -> BTreeMap<HeadId, Vec<f64>>
    where
        I: IntoIterator<Item = (HeadId, &'a [f64])>,
    {
        let p = logistic(self.logit(rows));
        self.readout
            .iter()
            .map(|(&h, w)| (h, w.iter().map(|&x| (1.0 - p) * x).collect()))
            .collect()
    }
}

/// Converts a table to `f64` rows keyed by head.
pub fn table_rows(t: &AttentionTable) -> BTreeMap<HeadId, Vec<f64>> {
    t.iter()
        .map(|(h, r)| (h, r.iter().map(|&v| v as f64).collect()))
        .collect()
}

/// Builds the inference record for `spec` under `surrogate`. The stored
/// log-probability and gradients are evaluated at the stored (`f32`)
/// attention values.
pub fn gen_inference_record(
    spec: &ScenarioSpec,
    surrogate: &SurrogateModel,
) -> Result<InferenceRecord, ScenarioError> {
    let scene = scene_maps(spec)?;
    let n_visual = spec.grid_side * spec.grid_side;
    let attn = AttentionTable::from_rows(
        n_visual,
        scene
            .maps
            .iter()
            .map(|(&h, m)| (h, m.iter().map(|&v| v as f32).collect())),
    )
    .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let rows = table_rows(&attn);
    let as_slices = || rows.iter().map(|(&h, r)| (h, r.as_slice()));
    let log_prob = surrogate.log_prob(as_slices());
    let sens = surrogate.sensitivity(as_slices());
    let grad = AttentionTable::from_rows(
        n_visual,
        attn.heads().iter().map(|h| {
            let s = sens.get(h).cloned().unwrap_or_else(|| vec![0.0; n_visual]);
            (*h, s.iter().map(|&v| v as f32).collect())
        }),
    )
    .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let side = spec.grid_side as u32;
    InferenceRecord::new(
        spec.geometry(),
        spec.grid_side,
        ImageGeometry {
            width: side * spec.patch_size,
            height: side * spec.patch_size,
            patch_size: spec.patch_size,
        },
        attn,
        Some(grad),
        "target".into(),
        log_prob.min(0.0),
    )
    .map_err(|e| ScenarioError::Invalid(e.to_string()))
}

/// Maps, matched surrogate and record for `spec`.
pub fn gen_scene(spec: &ScenarioSpec) -> Result<Scene, ScenarioError> {
    let maps = scene_maps(spec)?;
    let n_visual = spec.grid_side * spec.grid_side;
    let surrogate = SurrogateModel::for_scene(&maps, n_visual);
    let record = gen_inference_record(spec, &surrogate)?;
    Ok(Scene {
        spec: spec.clone(),
        record,
        surrogate,
        truth: maps.truth,
    })
}
