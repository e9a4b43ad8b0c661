use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use havc::manifest::{load_inference_record, save_corpus, save_inference_record};
use havc::records::{AttentionTable, Corpus, DiagnosticRecord, HeadId, InferenceRecord, ModelGeometry, SequenceLayout};

fn havc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_havc"))
        .args(args)
        .env_remove("HAVC_CONFIG")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(&havc(&["synth", "-o", p(dir), "--records", "40", "--scenes", "2"]));
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn score_heads_finds_planted_heads() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let experts = dir.path().join("experts.json");
    let stdout = ok(&havc(&["score-heads", p(&dir.path().join("diag.hvm")), "-o", p(&experts)]));
    assert!(stdout.contains("L2H1"));
    let doc = json(&experts);
    assert_eq!(doc["kind"], "expert-heads");
    assert_eq!(doc["heads"], serde_json::json!([[2, 1]]));

    let strict = dir.path().join("strict.json");
    ok(&havc(&["score-heads", p(&dir.path().join("diag.hvm")), "-o", p(&strict), "--threshold", "0.9"]));
    let loose: Vec<serde_json::Value> = doc["heads"].as_array().unwrap().clone();
    for h in json(&strict)["heads"].as_array().unwrap() {
        assert!(loose.contains(h));
    }
}

fn constant_corpus(dir: &Path) -> std::path::PathBuf {
    let layout = SequenceLayout::new(4, vec![1, 2, 3], vec![1, 2]).unwrap();
    let heads = vec![HeadId::new(0, 0), HeadId::new(0, 1)];
    let records = (0..3)
        .map(|i| {
            let row = [0.1f32, 0.6, 0.2, 0.1];
            let data = [row, row].concat();
            let t = AttentionTable::new(heads.clone(), 4, data).unwrap();
            DiagnosticRecord::new(layout.clone(), &[1, 2], t, i).unwrap()
        })
        .collect();
    let corpus = Corpus::new(ModelGeometry::new(1, 2), records).unwrap();
    save_corpus(&corpus, dir, "flat").unwrap()
}

#[test]
fn constant_scores_are_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = constant_corpus(dir.path());
    let out = havc(&["score-heads", p(&manifest), "-o", p(&dir.path().join("e.json"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("constant"));
}

#[test]
fn corrupt_record_is_reported_by_index() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    fs::write(dir.path().join("diag_00003.hvt"), b"HAVC").unwrap();
    let out = havc(&["score-heads", p(&dir.path().join("diag.hvm")), "-o", p(&dir.path().join("e.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diag_00003.hvt"));
}

#[test]
fn guide_reports_and_crop_matches_source_pixels() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let d = dir.path();
    let report = d.join("report.json");
    let stdout = ok(&havc(&[
        "guide",
        "--experts",
        p(&d.join("scene_000_experts.json")),
        p(&d.join("scene_000.hvm")),
        "--report",
        p(&report),
        "--write-map",
        p(&d.join("map.hvt")),
        "--write-pgm",
        p(&d.join("map.pgm")),
    ]));
    assert!(stdout.contains("bbox_pixels"));
    let r = json(&report);
    assert_eq!(r["kind"], "guidance-report");
    let truth = json(&d.join("truth.json"));
    assert_eq!(r["bbox"]["patch"], truth["scenes"][0]["region"]);
    assert!(fs::read(d.join("map.pgm")).unwrap().starts_with(b"P5\n192 192\n255\n"));

    let cropped = d.join("crop.png");
    ok(&havc(&["crop", p(&d.join("scene_000.png")), "--report", p(&report), "-o", p(&cropped)]));
    let src = image::open(d.join("scene_000.png")).unwrap().to_luma8();
    let out = image::open(&cropped).unwrap().to_luma8();
    let b = &r["bbox"]["pixels"];
    let (x0, y0) = (b["x0"].as_u64().unwrap() as u32, b["y0"].as_u64().unwrap() as u32);
    assert_eq!(out.width() as u64, b["x1"].as_u64().unwrap() - x0 as u64);
    for (x, y, px) in out.enumerate_pixels() {
        assert_eq!(px, src.get_pixel(x0 + x, y0 + y));
    }

    ok(&havc(&["render", p(&d.join("map.hvt")), "-o", p(&d.join("again.pgm")), "--scale", "2"]));
    assert!(fs::read(d.join("again.pgm")).unwrap().starts_with(b"P5\n48 48\n255\n"));
}

#[test]
fn full_image_crop_keeps_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = dir.path().join("full.png");
    ok(&havc(&["crop", p(&dir.path().join("scene_000.png")), "--bbox", "0,0,336,336", "-o", p(&out)]));
    let img = image::open(&out).unwrap();
    assert_eq!((img.width(), img.height()), (336, 336));
    let bad = havc(&["crop", p(&dir.path().join("scene_000.png")), "--bbox", "0,0,337,10", "-o", p(&out)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn alpha_one_zeroes_gradient_branch() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let d = dir.path();
    let stdout = ok(&havc(&[
        "guide",
        "--experts",
        p(&d.join("scene_000_experts.json")),
        p(&d.join("scene_000.hvm")),
        "--alpha",
        "1.0",
        "--json",
    ]));
    let r: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(r["branch_weights"]["gradient"], 0.0);
    assert_eq!(r["branch_weights"]["entropy"], 1.0);
}

#[test]
fn missing_gradients_warn() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let d = dir.path();
    let rec = load_inference_record(d.join("scene_000.hvm")).unwrap();
    let bare = InferenceRecord::new(
        rec.geometry(),
        rec.grid_side(),
        rec.image(),
        rec.attention().clone(),
        None,
        rec.predicted_token().to_owned(),
        rec.log_prob(),
    )
    .unwrap();
    let manifest = save_inference_record(&bare, d, "bare").unwrap();
    assert!(!d.join("bare_grad.hvt").exists());
    let out = havc(&["guide", "--experts", p(&d.join("scene_000_experts.json")), p(&manifest), "--json"]);
    let stdout = ok(&out);
    let r: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(r["gradient_available"], false);
    assert!(!r["warnings"].as_array().unwrap().is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gradient"));
}

#[test]
fn synth_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth(a.path());
    synth(b.path());
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 40);
    for n in names {
        assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let d = dir.path();
    let cfg = d.join("havc.toml");
    fs::write(&cfg, "[guidance.fusion]\nalpha = 0.8\ntop_k = 3\n").unwrap();
    let (experts, record) = (d.join("scene_000_experts.json"), d.join("scene_000.hvm"));
    let run = |extra: &[&str]| {
        let mut args = vec!["guide", "--experts", p(&experts), p(&record), "--json"];
        args.extend_from_slice(extra);
        let out = Command::new(env!("CARGO_BIN_EXE_havc"))
            .args(&args)
            .env("HAVC_CONFIG", &cfg)
            .output()
            .unwrap();
        serde_json::from_str::<serde_json::Value>(&ok(&out)).unwrap()
    };
    let r = run(&[]);
    assert_eq!(r["params"]["fusion"]["alpha"], 0.8);
    assert_eq!(r["params"]["fusion"]["top_k"], 3);
    let r = run(&["--top-k", "5"]);
    assert_eq!(r["params"]["fusion"]["top_k"], 5);

    fs::write(&cfg, "[guidance.fusion]\nbeta = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_havc"))
        .args(["--config", p(&cfg), "sweep", "--scenes", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(havc(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(havc(&["guide"]).status.code(), Some(1));
    assert_eq!(havc(&["crop", "x.png", "--bbox", "1,2,3", "-o", "y.png"]).status.code(), Some(1));
    assert_eq!(havc(&["--help"]).status.code(), Some(0));
}

#[test]
fn sweep_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("sweep.json");
    let stdout = ok(&havc(&["sweep", "--scenes", "4", "--report", p(&report)]));
    assert!(stdout.contains("all-heads"));
    let r = json(&report);
    assert_eq!(r["kind"], "sweep-report");
    assert_eq!(r["alpha"].as_array().unwrap().len(), 6);
    assert_eq!(r["top_k"].as_array().unwrap().len(), 5);
}
