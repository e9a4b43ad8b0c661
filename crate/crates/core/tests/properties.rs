use proptest::prelude::*;

use havc::guidance::{
    aggregate_map, flatten, minmax, reshape_attention, run_pipeline, spatial_entropy, EntropyParams,
    GuidanceParams,
};
use havc::profiler::{accumulate, normalize_and_filter, NormalizationScope};
use havc::records::{AttentionTable, Corpus, DiagnosticRecord, HeadId, ImageGeometry, ModelGeometry, SequenceLayout};
use havc::spatial::{
    connected_components, extract_bbox, grid_diagonal, mean_pairwise_distance, normalize01, otsu_threshold,
    BoxParams, Connectivity, GridMap,
};
use havc::synth::{gen_scene, ScenarioSpec};

fn eighths(side: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0u8..=8).prop_map(|k| k as f64 / 8.0), side * side)
}

fn mask_grid() -> impl Strategy<Value = (usize, Vec<bool>)> {
    (1usize..20).prop_flat_map(|side| (Just(side), prop::collection::vec(any::<bool>(), side * side)))
}

fn bump(side: usize, center: (f64, f64), sigma: f64) -> GridMap {
    let v = (0..side * side)
        .map(|i| {
            let (dr, dc) = ((i / side) as f64 - center.0, (i % side) as f64 - center.1);
            (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    GridMap::new(side, v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn otsu_mask_is_affine_invariant(v in eighths(12), scale in 0i32..4, shift in -3i32..=3) {
        let a = 2f64.powi(scale - 1);
        let m = GridMap::new(12, v.clone()).unwrap();
        let moved = GridMap::new(12, v.iter().map(|x| a * x + shift as f64).collect()).unwrap();
        let m0 = otsu_threshold(&normalize01(&m), 256).mask;
        let m1 = otsu_threshold(&normalize01(&moved), 256).mask;
        prop_assert_eq!(m0, m1);
    }

    #[test]
    fn normalize01_spans_unit_interval(v in prop::collection::vec(-5.0f64..5.0, 64)) {
        let n = normalize01(&GridMap::new(8, v).unwrap());
        prop_assume!(n.max() > n.min());
        prop_assert_eq!(n.min(), 0.0);
        prop_assert_eq!(n.max(), 1.0);
    }

    #[test]
    fn components_transpose((side, mask) in mask_grid()) {
        for conn in [Connectivity::Four, Connectivity::Eight] {
            let a = connected_components(&mask, side, conn);
            let t: Vec<bool> = (0..side * side).map(|i| mask[(i % side) * side + i / side]).collect();
            let b = connected_components(&t, side, conn);
            prop_assert_eq!(a.count(), b.count());
            let mut ca: Vec<(i64, i64)> = a.centroids.iter().map(|&(r, c)| ((c * 1e6).round() as i64, (r * 1e6).round() as i64)).collect();
            let mut cb: Vec<(i64, i64)> = b.centroids.iter().map(|&(r, c)| ((r * 1e6).round() as i64, (c * 1e6).round() as i64)).collect();
            ca.sort();
            cb.sort();
            prop_assert_eq!(ca, cb);
        }
    }

    #[test]
    fn component_invariants((side, mask) in mask_grid()) {
        let c = connected_components(&mask, side, Connectivity::Eight);
        prop_assert!(c.labels.iter().all(|&l| l as usize <= c.count()));
        prop_assert_eq!(c.centroids.len(), c.count());
        for k in 0..c.count() {
            prop_assert!(c.areas[k] > 0);
            let (r, col) = c.centroids[k];
            let b = c.boxes[k];
            prop_assert!(r >= b.r0 as f64 && r <= (b.r1 - 1) as f64);
            prop_assert!(col >= b.c0 as f64 && col <= (b.c1 - 1) as f64);
        }
        prop_assert!(mean_pairwise_distance(&c.centroids) <= grid_diagonal(side));
    }

    #[test]
    fn minmax_is_idempotent(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let once = minmax(&v);
        let twice = minmax(&once);
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reshape_flatten_round_trip(v in prop::collection::vec(0.0f32..1.0, 49)) {
        prop_assert_eq!(flatten(&reshape_attention(&v, 7).unwrap()), v);
    }

    #[test]
    fn bbox_holds_the_bump_peak(r in 0.0f64..24.0, c in 0.0f64..24.0, sigma in 0.6f64..5.0) {
        let m = bump(24, (r, c), sigma);
        let image = ImageGeometry { width: 336, height: 336, patch_size: 14 };
        let ex = extract_bbox(&m, image, &BoxParams::default()).unwrap();
        let peak = m.argmax();
        prop_assert!(ex.patch.contains(peak / 24, peak % 24));
        let p = ex.pixels;
        prop_assert!(p.x0 < p.x1 && p.x1 <= 336 && p.y0 < p.y1 && p.y1 <= 336);
    }

    #[test]
    fn extra_component_never_lowers_entropy(gap in 3usize..6, size in 1usize..3) {
        let p = EntropyParams { lambda_c: 0.25, lambda_d: 0.75, ..EntropyParams::default() };
        // two blobs, then a third placed at their midpoint row so dispersion is comparable
        let mut v = vec![0.0; 24 * 24];
        let mut put = |r0: usize, c0: usize| {
            for r in r0..r0 + size {
                for c in c0..c0 + size {
                    v[r * 24 + c] = 1.0;
                }
            }
        };
        put(2, 2);
        put(2, 2 + gap + size);
        let two = spatial_entropy(&GridMap::new(24, v.clone()).unwrap(), &p);
        let mut v3 = v.clone();
        for r in 2..2 + size {
            for c in 2 + 2 * (gap + size)..2 + 2 * (gap + size) + size {
                v3[r * 24 + c] = 1.0;
            }
        }
        let three = spatial_entropy(&GridMap::new(24, v3).unwrap(), &p);
        prop_assert_eq!(three.components, two.components + 1);
        prop_assert!(three.unclamped >= two.unclamped);
    }
}

#[test]
fn guidance_map_is_convex_combination_and_deterministic() {
    let params = GuidanceParams::default();
    for i in 0..10 {
        let scene = gen_scene(&ScenarioSpec::default().suite_member(i)).unwrap();
        let a = run_pipeline(&scene.truth.experts, &scene.record, &params).unwrap();
        let b = run_pipeline(&scene.truth.experts, &scene.record, &params).unwrap();
        assert_eq!(a, b);
        let side = scene.record.grid_side();
        let maps: Vec<GridMap> = a
            .selected
            .iter()
            .map(|h| reshape_attention(scene.record.attention().row(h.head).unwrap(), side).unwrap())
            .collect();
        let weights: Vec<f64> = a.selected.iter().map(|h| h.weight.unwrap()).collect();
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let refs: Vec<&GridMap> = maps.iter().collect();
        assert_eq!(aggregate_map(&refs, &weights).unwrap(), a.map);
        for j in 0..side * side {
            let lo = maps.iter().map(|m| m.values()[j]).fold(f64::INFINITY, f64::min);
            let hi = maps.iter().map(|m| m.values()[j]).fold(f64::NEG_INFINITY, f64::max);
            let v = a.map.values()[j];
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}

#[test]
fn selection_ignores_gradient_scale() {
    let params = GuidanceParams::default();
    let scene = gen_scene(&ScenarioSpec::default()).unwrap();
    let base = run_pipeline(&scene.truth.experts, &scene.record, &params).unwrap();
    let grad = scene.record.gradient().unwrap();
    let scaled = AttentionTable::new(
        grad.heads().to_vec(),
        grad.width(),
        grad.data().iter().map(|v| v * 8.0).collect(),
    )
    .unwrap();
    let record = havc::records::InferenceRecord::new(
        scene.record.geometry(),
        scene.record.grid_side(),
        scene.record.image(),
        scene.record.attention().clone(),
        Some(scaled),
        scene.record.predicted_token().to_owned(),
        scene.record.log_prob(),
    )
    .unwrap();
    let other = run_pipeline(&scene.truth.experts, &record, &params).unwrap();
    let ids = |r: &havc::GuidanceResult| r.selected.iter().map(|a| a.head).collect::<Vec<_>>();
    assert_eq!(ids(&base), ids(&other));
    assert_eq!(base.crop, other.crop);
}

/// Layout `[BOS] v1..v4 t5`, mask over `mask`, each head peaking at `peaks[k]`.
fn record(peaks: &[usize], mask: &[usize], index: usize) -> DiagnosticRecord {
    let layout = SequenceLayout::new(6, (1..6).collect(), (1..5).collect()).unwrap();
    let heads: Vec<HeadId> = (0..peaks.len() as u32).map(|h| HeadId::new(0, h)).collect();
    let mut data = Vec::new();
    for &p in peaks {
        let mut row = vec![0.08f32; 6];
        row[p] = 0.6;
        data.extend(row);
    }
    DiagnosticRecord::new(layout, mask, AttentionTable::new(heads, 6, data).unwrap(), index).unwrap()
}

#[test]
fn adding_a_record_that_favours_the_top_head_keeps_it() {
    let geometry = ModelGeometry::new(1, 3);
    let base = vec![
        record(&[1, 2, 5], &[1], 0),
        record(&[2, 5, 2], &[2, 3], 1),
        record(&[3, 3, 4], &[3, 4], 2),
    ];
    let mut before = accumulate(&Corpus::new(geometry, base.clone()).unwrap()).unwrap();
    let set0 = normalize_and_filter(&mut before, 0.5, NormalizationScope::Global).unwrap();
    let top = HeadId::new(0, 0);
    assert!(set0.contains(top));
    let mut grown = base;
    grown.push(record(&[4, 1, 1], &[4], 3));
    let mut after = accumulate(&Corpus::new(geometry, grown).unwrap()).unwrap();
    let set1 = normalize_and_filter(&mut after, 0.5, NormalizationScope::Global).unwrap();
    assert!(after.normalized().unwrap()[0] == 1.0);
    assert!(set1.contains(top));
}
