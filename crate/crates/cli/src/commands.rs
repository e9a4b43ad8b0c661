use std::fs;
use std::path::Path;

use serde::Serialize;

use havc::bench::{has_interior_max, run_sweeps, Suite, SweepPoint};
use havc::guidance::{run_pipeline, GuidanceParams};
use havc::manifest::{load_corpus, load_inference_record, save_corpus, save_inference_record};
use havc::pixmap::encode_pgm;
use havc::profiler::{accumulate, normalize_and_filter, ExpertHeadDocument, NormalizationScope, ProfileError};
use havc::records::HeadId;
use havc::report::GuidanceReport;
use havc::spatial::{CropBox, GridMap, PatchBox};
use havc::synth::{gen_diagnostic_corpus, gen_scene, HeadRole, ScenarioSpec, Scene};
use havc::tensor::{read_tensor_file, write_tensor_file, Tensor};

use crate::config::Config;
use crate::error::{CliError, Context};
use crate::{CropArgs, GuideArgs, GuidanceFlags, RenderArgs, ScoreHeadsArgs, SweepArgs, SynthArgs};

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).context(path.display())
}

pub fn score_heads(config: &Config, a: ScoreHeadsArgs) -> Result<(), CliError> {
    let threshold = a.threshold.unwrap_or(config.profile.threshold);
    let scope = if a.per_layer {
        NormalizationScope::PerLayer
    } else {
        config.profile.normalization
    };
    let corpus = load_corpus(&a.corpus).map_err(|e| CliError::data(e.to_string()))?;
    let mut m = accumulate(&corpus).map_err(|e| CliError::data(e.to_string()))?;
    let set = normalize_and_filter(&mut m, threshold, scope).map_err(|e| match e {
        ProfileError::DegenerateMatrix(_) => CliError::degenerate(e.to_string()),
        ProfileError::BadThreshold(_) => CliError::usage(e.to_string()),
        _ => CliError::data(e.to_string()),
    })?;
    let doc = ExpertHeadDocument::new(&m, &set, scope, corpus.len());
    doc.write(&a.out).context(a.out.display())?;

    let g = m.geometry();
    let norm = m.normalized().expect("normalized above");
    let mut order: Vec<usize> = (0..g.head_count()).collect();
    order.sort_by(|&i, &j| norm[j].total_cmp(&norm[i]).then(i.cmp(&j)));
    println!(
        "{} records, {} of {} heads above {threshold}",
        corpus.len(),
        set.len(),
        g.head_count()
    );
    println!("{:<8} {:>10} {:>10} {:>7}  expert", "head", "raw", "normalized", "count");
    for &k in order.iter().take(a.show.max(set.len())) {
        let h = g.head_at(k);
        println!(
            "{:<8} {:>10.5} {:>10.5} {:>7}  {}",
            h.to_string(),
            m.raw()[k],
            norm[k],
            m.counts()[k],
            if set.contains(h) { "*" } else { "" }
        );
    }
    Ok(())
}

fn apply_flags(mut p: GuidanceParams, f: &GuidanceFlags) -> Result<GuidanceParams, CliError> {
    if let Some(v) = f.alpha {
        p.fusion.alpha = v;
    }
    if let Some(v) = f.top_k {
        p.fusion.top_k = v;
    }
    if let Some(v) = f.tau {
        p.fusion.temperature = v;
    }
    if let Some(v) = f.fusion_scope {
        p.fusion.scope = v;
    }
    if let Some(v) = f.entropy_threshold {
        p.entropy.threshold = v;
    }
    if let Some(v) = f.lambda_c {
        p.entropy.lambda_c = v;
    }
    if let Some(v) = f.lambda_d {
        p.entropy.lambda_d = v;
    }
    if let Some(v) = f.theta_box {
        p.bbox.theta = v;
    }
    if let Some(v) = f.pad {
        p.bbox.pad = v;
    }
    if let Some(v) = f.min_side {
        p.bbox.min_side = v;
    }
    if let Some(v) = f.connectivity {
        p.entropy.connectivity = v;
        p.bbox.connectivity = v;
    }
    p.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(p)
}

pub fn guide(config: &Config, a: GuideArgs) -> Result<(), CliError> {
    let params = apply_flags(config.guidance, &a.flags)?;
    let doc = ExpertHeadDocument::read(&a.experts).context(a.experts.display())?;
    let record = load_inference_record(&a.record).map_err(|e| CliError::data(e.to_string()))?;
    if doc.geometry() != record.geometry() {
        return Err(CliError::data(format!(
            "expert file geometry {}x{} differs from record geometry {}x{}",
            doc.n_layers,
            doc.n_heads,
            record.geometry().n_layers,
            record.geometry().n_heads
        )));
    }
    let result = run_pipeline(&doc.expert_set(), &record, &params)?;
    let report = GuidanceReport::new(&record, &params, &result);

    if let Some(path) = &a.report {
        write_text(path, &(report.to_json() + "\n"))?;
    }
    if let Some(path) = &a.write_map {
        let t = result.map.to_tensor().context(path.display())?;
        write_tensor_file(&t, path).context(path.display())?;
    }
    if let Some(path) = &a.write_pgm {
        fs::write(path, encode_pgm(&result.map, a.pgm_scale, Some(result.crop.patch))).context(path.display())?;
    }
    if a.json {
        println!("{}", report.to_json());
        return Ok(());
    }
    println!(
        "token {:?}  grid {side}x{side}  branch weights: entropy {:.2}, gradient {:.2}{}",
        report.predicted_token,
        report.branch_weights.entropy,
        report.branch_weights.gradient,
        if report.fallback { "  (fallback)" } else { "" },
        side = report.grid_side,
    );
    println!("{:<4} {:<8} {:>7} {:>10} {:>7} {:>7}", "rank", "head", "E", "G", "S", "w");
    for (i, h) in report.selected.iter().enumerate() {
        println!(
            "{:<4} {:<8} {:>7.4} {:>10.4e} {:>7.4} {:>7.4}",
            i + 1,
            h.head.to_string(),
            h.entropy,
            h.grad_score,
            h.fused.unwrap_or(0.0),
            h.weight.unwrap_or(0.0)
        );
    }
    let (p, x) = (report.bbox.patch, report.bbox.pixels);
    println!("bbox_patch {},{},{},{}", p.r0, p.c0, p.r1, p.c1);
    println!("bbox_pixels {},{},{},{}", x.x0, x.y0, x.x1, x.y1);
    Ok(())
}

fn parse_quad(s: &str, what: &str) -> Result<[u32; 4], CliError> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || CliError::usage(format!("{what} must be four comma-separated integers, got {s:?}"));
    if parts.len() != 4 {
        return Err(bad());
    }
    let mut out = [0u32; 4];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p.parse().map_err(|_| bad())?;
    }
    Ok(out)
}

pub fn crop(a: CropArgs) -> Result<(), CliError> {
    let bbox = match (&a.bbox, &a.report) {
        (Some(s), _) => {
            let [x0, y0, x1, y1] = parse_quad(s, "--bbox")?;
            CropBox { x0, y0, x1, y1 }
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(path).context(path.display())?;
            GuidanceReport::from_json(&text).context(path.display())?.bbox.pixels
        }
        (None, None) => return Err(CliError::usage("one of --bbox or --report is required")),
    };
    let img = image::open(&a.image).context(a.image.display())?;
    if !bbox.fits(img.width(), img.height()) {
        return Err(CliError::data(format!(
            "box {},{},{},{} is empty or outside the {}x{} image",
            bbox.x0,
            bbox.y0,
            bbox.x1,
            bbox.y1,
            img.width(),
            img.height()
        )));
    }
    let out = img.crop_imm(bbox.x0, bbox.y0, bbox.width(), bbox.height());
    out.save(&a.out).context(a.out.display())?;
    println!("{}x{} -> {}", out.width(), out.height(), a.out.display());
    Ok(())
}

fn load_spec(path: Option<&Path>, seed: Option<u64>) -> Result<ScenarioSpec, CliError> {
    let mut spec = match path {
        Some(p) => {
            let text = fs::read_to_string(p).context(p.display())?;
            toml::from_str(&text).context(p.display())?
        }
        None => ScenarioSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| CliError::data(e.to_string()))?;
    Ok(spec)
}

#[derive(Serialize)]
struct RoleEntry {
    head: HeadId,
    role: HeadRole,
}

#[derive(Serialize)]
struct SceneTruthEntry {
    manifest: String,
    experts: String,
    image: String,
    seed: u64,
    region: PatchBox,
    region_pixels: CropBox,
    gradient_ratio: f64,
    roles: Vec<RoleEntry>,
}

#[derive(Serialize)]
struct TruthDocument {
    kind: &'static str,
    version: u32,
    spec: ScenarioSpec,
    corpus: String,
    planted_heads: Vec<HeadId>,
    scenes: Vec<SceneTruthEntry>,
}

/// Grayscale picture of a scene: a texture with the planted region brightened.
fn scene_image(scene: &Scene) -> image::GrayImage {
    let img = scene.record.image();
    let ps = img.patch_size;
    let r = scene.truth.region;
    image::GrayImage::from_fn(img.width, img.height, |x, y| {
        let (row, col) = ((y / ps) as usize, (x / ps) as usize);
        let texture = ((x / 7 + y / 7) % 2) as u8 * 24 + ((x * 3 + y * 5) % 11) as u8;
        let base = if r.contains(row, col) { 180 } else { 40 };
        image::Luma([base + texture])
    })
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let spec = load_spec(a.scenario.as_deref(), a.seed)?;
    fs::create_dir_all(&a.out).context(a.out.display())?;
    let name = |p: &Path| p.file_name().unwrap_or_default().to_string_lossy().into_owned();

    let corpus = gen_diagnostic_corpus(&spec, a.records).map_err(|e| CliError::data(e.to_string()))?;
    let corpus_path = save_corpus(&corpus, &a.out, "diag").map_err(|e| CliError::data(e.to_string()))?;

    let mut scenes = Vec::with_capacity(a.scenes);
    for i in 0..a.scenes {
        let member = if i == 0 { spec.clone() } else { spec.suite_member(i as u64) };
        let scene = gen_scene(&member).map_err(|e| CliError::data(e.to_string()))?;
        let stem = format!("scene_{i:03}");
        let manifest = save_inference_record(&scene.record, &a.out, &stem).map_err(|e| CliError::data(e.to_string()))?;
        let experts = a.out.join(format!("{stem}_experts.json"));
        ExpertHeadDocument::from_set(member.geometry(), &scene.truth.experts)
            .write(&experts)
            .context(experts.display())?;
        let image_path = a.out.join(format!("{stem}.png"));
        scene_image(&scene).save(&image_path).context(image_path.display())?;
        let ps = member.patch_size;
        let r = scene.truth.region;
        scenes.push(SceneTruthEntry {
            manifest: name(&manifest),
            experts: name(&experts),
            image: name(&image_path),
            seed: member.seed,
            region: r,
            region_pixels: CropBox {
                x0: r.c0 as u32 * ps,
                y0: r.r0 as u32 * ps,
                x1: r.c1 as u32 * ps,
                y1: r.r1 as u32 * ps,
            },
            gradient_ratio: scene.truth.gradient_ratio,
            roles: scene
                .truth
                .roles
                .iter()
                .map(|(&head, &role)| RoleEntry { head, role })
                .collect(),
        });
    }
    let truth = TruthDocument {
        kind: "synthetic-truth",
        version: 1,
        planted_heads: spec.planted_heads.clone(),
        spec,
        corpus: name(&corpus_path),
        scenes,
    };
    let truth_path = a.out.join("truth.json");
    write_text(&truth_path, &(serde_json::to_string_pretty(&truth).expect("truth serializes") + "\n"))?;
    println!(
        "wrote {} ({} records), {} scene(s), {}",
        corpus_path.display(),
        corpus.len(),
        truth.scenes.len(),
        truth_path.display()
    );
    Ok(())
}

pub fn render(a: RenderArgs) -> Result<(), CliError> {
    let t: Tensor = read_tensor_file(&a.map).context(a.map.display())?;
    let map = match t.dims() {
        [n] => {
            let side = (*n as f64).sqrt().round() as usize;
            let data = t.data().iter().map(|&v| v as f64).collect();
            GridMap::new(side, data).context(a.map.display())?
        }
        _ => GridMap::from_tensor(&t).context(a.map.display())?,
    };
    let outline = match &a.outline {
        Some(s) => {
            let [r0, c0, r1, c1] = parse_quad(s, "--outline")?.map(|v| v as usize);
            if r0 >= r1 || c0 >= c1 || r1 > map.side() || c1 > map.side() {
                return Err(CliError::usage(format!("--outline {s} is outside the {0}x{0} grid", map.side())));
            }
            Some(PatchBox::new(r0, c0, r1, c1))
        }
        None => None,
    };
    fs::write(&a.out, encode_pgm(&map, a.scale, outline)).context(a.out.display())?;
    Ok(())
}

fn print_points(title: &str, points: &[SweepPoint]) {
    println!("{title:<8} {:>9} {:>6}", "mean IoU", "hits");
    for p in points {
        println!("{:<8} {:>9.4} {:>6}", p.value, p.score.mean_iou, p.score.hits);
    }
}

pub fn sweep(config: &Config, a: SweepArgs) -> Result<(), CliError> {
    let params = apply_flags(config.guidance, &a.flags)?;
    let spec = load_spec(a.scenario.as_deref(), a.seed)?;
    if a.scenes == 0 {
        return Err(CliError::usage("--scenes must be at least 1"));
    }
    let suite = Suite::generate(&spec, a.scenes).map_err(|e| CliError::data(e.to_string()))?;
    let report = run_sweeps(&suite, spec.seed, &params);
    println!("{:<14} {:>9} {:>6}", "variant", "mean IoU", "hits");
    for row in &report.ladder {
        println!("{:<14} {:>9.4} {:>6}", row.label, row.score.mean_iou, row.score.hits);
    }
    println!();
    print_points("alpha", &report.alpha);
    println!();
    print_points("top_k", &report.top_k);
    println!(
        "\ninterior maximum: alpha {}, top_k {}",
        report.alpha_interior_max,
        has_interior_max(&report.top_k)
    );
    if let Some(path) = &a.report {
        write_text(path, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    }
    Ok(())
}
