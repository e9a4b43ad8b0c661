//! Synthetic corpora and inference scenes with planted ground truth.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), seeded through
//! `SeedableRng::seed_from_u64` and split into independent streams with
//! `set_stream`. Floats are drawn with `rand`'s standard 53-bit uniform
//! conversion. Both are specified bit-for-bit by their crates, so a given
//! seed reproduces the same bytes on every platform.

mod oracles;
mod scene;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{
    AttentionTable, Corpus, DiagnosticRecord, HeadId, ModelGeometry, SequenceLayout,
};
use crate::spatial::PatchBox;

pub use oracles::*;
pub use scene::{
    gen_inference_record, gen_scene, scene_maps, table_rows, HeadRole, Scene, SceneMaps,
    SceneTruth, SurrogateModel,
};

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Everything needed to generate a synthetic corpus or scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub grid_side: usize,
    pub n_layers: u32,
    pub n_heads: u32,
    pub planted_heads: Vec<HeadId>,
    pub planted_region: PatchBox,
    /// Relative amplitude of background noise.
    pub noise_level: f64,
    pub seed: u64,
    pub patch_size: u32,
    /// Non-visual prompt tokens in diagnostic sequences.
    pub text_tokens: usize,
    /// Scene heads that are concentrated on a wrong spot and useless for the answer.
    pub distractor_heads: usize,
    /// Scene heads that are nearly concentrated on a wrong spot but carry the
    /// largest gradient.
    pub greedy_heads: usize,
    /// Scattered noise heads that are nonetheless listed as experts.
    pub expert_noise_heads: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            grid_side: 24,
            n_layers: 4,
            n_heads: 4,
            planted_heads: vec![HeadId::new(2, 1)],
            planted_region: PatchBox::new(8, 12, 14, 18),
            noise_level: 0.05,
            seed: 0,
            patch_size: 14,
            text_tokens: 6,
            distractor_heads: 3,
            greedy_heads: 1,
            expert_noise_heads: 3,
        }
    }
}

impl ScenarioSpec {
    pub fn geometry(&self) -> ModelGeometry {
        ModelGeometry::new(self.n_layers, self.n_heads)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.grid_side < 2 {
            return bad(format!("grid_side {} < 2", self.grid_side));
        }
        if self.n_layers == 0 || self.n_heads == 0 {
            return bad("geometry must have at least one head".into());
        }
        let r = &self.planted_region;
        if r.area() == 0 || r.r1 > self.grid_side || r.c1 > self.grid_side {
            return bad(format!("planted region {r:?} not inside a {0}x{0} grid", self.grid_side));
        }
        if self.planted_heads.is_empty() {
            return bad("at least one planted head is required".into());
        }
        let g = self.geometry();
        if let Some(h) = self.planted_heads.iter().find(|h| !g.contains(**h)) {
            return bad(format!("planted head {h} outside geometry"));
        }
        let mut sorted = self.planted_heads.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.planted_heads.len() {
            return bad("planted heads must be distinct".into());
        }
        if !(self.noise_level >= 0.0 && self.noise_level < 1.0) {
            return bad(format!("noise_level {} not in [0, 1)", self.noise_level));
        }
        if self.patch_size == 0 {
            return bad("patch_size must be positive".into());
        }
        let decoys = self.distractor_heads + self.greedy_heads;
        let total = g.head_count();
        if self.planted_heads.len() + decoys > total {
            return bad(format!("{} planted + {decoys} decoy heads exceed {total}", self.planted_heads.len()));
        }
        if self.planted_heads.len() + decoys + self.expert_noise_heads > total {
            return bad("expert_noise_heads exceeds the remaining heads".into());
        }
        Ok(())
    }

    /// Copy of `self` for scene `index` of a suite: new seed and a random
    /// planted region of 4–8 patches per side.
    pub fn suite_member(&self, index: u64) -> Self {
        let seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index);
        let mut rng = stream(seed, STREAM_REGION);
        let n = self.grid_side;
        let max_side = 8.min(n);
        let min_side = 4.min(max_side);
        let h = rng.gen_range(min_side..=max_side);
        let w = rng.gen_range(min_side..=max_side);
        let r0 = rng.gen_range(0..=n - h);
        let c0 = rng.gen_range(0..=n - w);
        Self {
            seed,
            planted_region: PatchBox::new(r0, c0, r0 + h, c0 + w),
            ..self.clone()
        }
    }
}

const STREAM_REGION: u64 = 1;
const STREAM_DIAG: u64 = 1 << 32;
const STREAM_SCENE: u64 = 2 << 32;

/// ChaCha8 stream `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Flat Dirichlet(1) sample of length `n` via normalized exponentials.
pub fn dirichlet_row<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let s: f64 = v.iter().sum();
    for x in &mut v {
        *x /= s;
    }
    v
}

/// Sequence layout of diagnostic records: `[BOS] visual… text…`.
pub fn diagnostic_layout(spec: &ScenarioSpec) -> SequenceLayout {
    let n_img = spec.grid_side * spec.grid_side;
    let len = 1 + n_img + spec.text_tokens;
    SequenceLayout::new(len, (1..len).collect(), (1..=n_img).collect())
        .expect("diagnostic layout is well formed")
}

/// Mass the BOS token soaks up in every generated row.
const SINK_MASS: f64 = 0.4;

/// One attention row over the full sequence as `f64`: BOS sink, background
/// over valid tokens, strict peak at `peak`. Sums to 1.
pub fn attention_row<R: Rng>(
    rng: &mut R,
    layout: &SequenceLayout,
    peak: usize,
    noise: f64,
) -> Vec<f64> {
    let valid = layout.valid();
    let bg = dirichlet_row(rng, valid.len());
    let mut row = vec![0.0; layout.total_len()];
    let mut top = 0.0f64;
    for (&j, &b) in valid.iter().zip(&bg) {
        row[j] = noise * b;
        top = top.max(row[j]);
    }
    row[peak] = top + (1.0 - noise) + 1e-3;
    let valid_mass: f64 = valid.iter().map(|&j| row[j]).sum();
    for &j in valid {
        row[j] *= (1.0 - SINK_MASS) / valid_mass;
    }
    // all non-valid tokens share the sink
    let specials: Vec<usize> = (0..layout.total_len())
        .filter(|j| valid.binary_search(j).is_err())
        .collect();
    for &j in &specials {
        row[j] = SINK_MASS / specials.len() as f64;
    }
    row
}

/// Diagnostic corpus where planted heads always peak inside the grounding
/// mask and every other head peaks uniformly over valid tokens.
pub fn gen_diagnostic_corpus(spec: &ScenarioSpec, n_records: usize) -> Result<Corpus, ScenarioError> {
    spec.validate()?;
    if n_records == 0 {
        return Err(ScenarioError::Invalid("n_records must be at least 1".into()));
    }
    let geometry = spec.geometry();
    let layout = diagnostic_layout(spec);
    let n = spec.grid_side;
    let region = spec.planted_region;
    let mut records = Vec::with_capacity(n_records);
    for i in 0..n_records {
        let mut rng = stream(spec.seed, STREAM_DIAG + i as u64);
        let h = rng.gen_range(1..=region.height().min(2));
        let w = rng.gen_range(1..=region.width().min(3));
        let r0 = rng.gen_range(region.r0..=region.r1 - h);
        let c0 = rng.gen_range(region.c0..=region.c1 - w);
        let mask: Vec<usize> = (r0..r0 + h)
            .flat_map(|r| (c0..c0 + w).map(move |c| 1 + r * n + c))
            .collect();
        let mut data = Vec::with_capacity(geometry.head_count() * layout.total_len());
        for head in geometry.heads() {
            let peak = if spec.planted_heads.contains(&head) {
                mask[rng.gen_range(0..mask.len())]
            } else {
                layout.valid()[rng.gen_range(0..layout.valid().len())]
            };
            let row = attention_row(&mut rng, &layout, peak, spec.noise_level);
            data.extend(row.iter().map(|&v| v as f32));
        }
        let table = AttentionTable::new(geometry.heads().collect(), layout.total_len(), data)
            .expect("generated table is well formed");
        let record = DiagnosticRecord::new(layout.clone(), &mask, table, i)
            .expect("generated record is valid");
        records.push(record);
    }
    Ok(Corpus::new(geometry, records).expect("generated heads lie in the geometry"))
}
