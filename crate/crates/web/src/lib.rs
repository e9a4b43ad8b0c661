//! WebAssembly bindings for the browser demo: generate a synthetic scene,
//! run guidance with adjustable knobs and read back maps, masks and boxes.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use havc::guidance::{reshape_attention, run_pipeline, GuidanceParams, GuidanceResult};
use havc::pixmap::to_gray8;
use havc::records::HeadId;
use havc::spatial::{normalize01, otsu_threshold, GridMap};
use havc::synth::{gen_scene, HeadRole, ScenarioSpec, Scene};

#[derive(Serialize)]
struct HeadRow {
    layer: u32,
    head: u32,
    role: Option<HeadRole>,
    expert: bool,
    entropy: f64,
    components: usize,
    grad_score: f64,
    passed_entropy: bool,
    fused: Option<f64>,
    weight: Option<f64>,
}

#[derive(Serialize)]
struct Summary<'a> {
    ok: bool,
    error: Option<String>,
    iou: f64,
    fallback: bool,
    region: [usize; 4],
    bbox: Option<[usize; 4]>,
    heads: &'a [HeadRow],
}

/// One synthetic scene plus the latest guidance run over it.
#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
    params: GuidanceParams,
    result: Result<GuidanceResult, String>,
    rows: Vec<HeadRow>,
}

fn quad(b: havc::spatial::PatchBox) -> [usize; 4] {
    [b.r0, b.c0, b.r1, b.c1]
}

#[wasm_bindgen]
impl Demo {
    /// Scene `index` of the suite seeded by `seed`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, index: u32) -> Result<Demo, JsError> {
        let base = ScenarioSpec {
            seed,
            ..ScenarioSpec::default()
        };
        let scene = gen_scene(&base.suite_member(index as u64)).map_err(|e| JsError::new(&e.to_string()))?;
        let mut demo = Demo {
            scene,
            params: GuidanceParams::default(),
            result: Err("not run".into()),
            rows: Vec::new(),
        };
        demo.run();
        Ok(demo)
    }

    pub fn grid_side(&self) -> usize {
        self.scene.record.grid_side()
    }

    /// Sets the fusion and entropy knobs and reruns the pipeline.
    pub fn configure(&mut self, alpha: f64, top_k: usize, temperature: f64, entropy_cut: f64) {
        self.params.fusion.alpha = alpha;
        self.params.fusion.top_k = top_k;
        self.params.fusion.temperature = temperature;
        self.params.entropy.threshold = entropy_cut;
        self.run();
    }

    fn run(&mut self) {
        let experts = &self.scene.truth.experts;
        self.result = run_pipeline(experts, &self.scene.record, &self.params).map_err(|e| e.to_string());
        self.rows = match &self.result {
            Ok(r) => r
                .candidates
                .iter()
                .map(|c| {
                    let sel = r.selected.iter().find(|s| s.head == c.head);
                    HeadRow {
                        layer: c.head.layer,
                        head: c.head.head,
                        role: self.scene.truth.roles.get(&c.head).copied(),
                        expert: experts.contains(c.head),
                        entropy: c.entropy,
                        components: c.components,
                        grad_score: c.grad_score,
                        passed_entropy: c.passed_entropy,
                        fused: c.fused,
                        weight: sel.and_then(|s| s.weight),
                    }
                })
                .collect(),
            Err(_) => Vec::new(),
        };
    }

    /// JSON summary: IoU, planted region, crop box and per-head scores.
    pub fn summary(&self) -> String {
        let region = self.scene.truth.region;
        let (ok, error, bbox, iou, fallback) = match &self.result {
            Ok(r) => (true, None, Some(quad(r.crop.patch)), r.crop.patch.iou(&region), r.fallback),
            Err(e) => (false, Some(e.clone()), None, 0.0, false),
        };
        serde_json::to_string(&Summary {
            ok,
            error,
            iou,
            fallback,
            region: quad(region),
            bbox,
            heads: &self.rows,
        })
        .expect("summary serializes")
    }

    /// Guidance map as 8-bit grayscale, row-major; empty when the run failed.
    pub fn guidance_pixels(&self) -> Vec<u8> {
        self.result.as_ref().map(|r| to_gray8(&r.map)).unwrap_or_default()
    }

    /// One head's attention map as 8-bit grayscale.
    pub fn head_pixels(&self, layer: u32, head: u32) -> Vec<u8> {
        self.head_map(layer, head).map(|m| to_gray8(&m)).unwrap_or_default()
    }

    /// One head's Otsu foreground, 255 for foreground cells.
    pub fn head_mask(&self, layer: u32, head: u32) -> Vec<u8> {
        self.head_map(layer, head)
            .map(|m| {
                let otsu = otsu_threshold(&normalize01(&m), self.params.entropy.otsu_bins);
                otsu.mask.iter().map(|&b| if b { 255 } else { 0 }).collect()
            })
            .unwrap_or_default()
    }
}

impl Demo {
    fn head_map(&self, layer: u32, head: u32) -> Option<GridMap> {
        let row = self.scene.record.attention().row(HeadId::new(layer, head))?;
        reshape_attention(row, self.grid_side()).ok()
    }
}
