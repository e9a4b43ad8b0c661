//! Patch-grid kernels: normalization, Otsu thresholding, connected
//! components, centroid dispersion and crop-box extraction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::ImageGeometry;
use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_OTSU_BINS: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum SpatialError {
    #[error("grid of side {side} needs {expected} values, got {actual}")]
    Shape {
        side: usize,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite map value at index {0}")]
    NonFinite(usize),
    #[error("tensor dims {0:?} are not a square grid")]
    NotSquare(Vec<usize>),
    #[error("map has no positive value; nothing to crop")]
    NoSalientRegion,
    #[error("crop box {0:?} is empty after clamping to the image")]
    EmptyCrop(CropBox),
    #[error("invalid box parameters: {0}")]
    BadParams(String),
}

/// Square `side × side` map stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    side: usize,
    values: Vec<f64>,
}

impl GridMap {
    pub fn new(side: usize, values: Vec<f64>) -> Result<Self, SpatialError> {
        if side == 0 || side * side != values.len() {
            return Err(SpatialError::Shape {
                side,
                expected: side * side,
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(SpatialError::NonFinite(i));
        }
        Ok(Self { side, values })
    }

    pub fn zeros(side: usize) -> Self {
        Self {
            side,
            values: vec![0.0; side * side],
        }
    }

    /// Accepts `[side, side]` tensors.
    pub fn from_tensor(t: &Tensor) -> Result<Self, SpatialError> {
        match t.dims() {
            &[r, c] if r == c => Self::new(r, t.data().iter().map(|&v| v as f64).collect()),
            d => Err(SpatialError::NotSquare(d.to_vec())),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor, TensorError> {
        Tensor::from_f64(vec![self.side, self.side], &self.values)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.side + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn transpose(&self) -> Self {
        let n = self.side;
        let values = (0..n * n).map(|k| self.values[(k % n) * n + k / n]).collect();
        Self { side: n, values }
    }

    /// Row-major cell index of the first maximum.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Min–max rescaling to [0, 1]; a constant map becomes all zeros.
pub fn normalize01(m: &GridMap) -> GridMap {
    let (lo, hi) = (m.min(), m.max());
    let values = if hi > lo {
        m.values.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; m.values.len()]
    };
    GridMap {
        side: m.side,
        values,
    }
}

/// Result of Otsu thresholding.
#[derive(Debug, Clone, PartialEq)]
pub struct OtsuResult {
    pub threshold: f64,
    /// Chosen histogram split `k`; the threshold is `k / bins`. `None` when no
    /// split separates the values into two non-empty classes.
    pub split: Option<usize>,
    /// Between-class variance at the chosen split.
    pub variance: f64,
    /// `value > threshold`, row-major.
    pub mask: Vec<bool>,
}

/// Histogram bin whose membership is consistent with the boundaries
/// `k / bins`: `bin_of(v) >= k` exactly when `v > k / bins`.
fn bin_of(v: f64, bins: usize) -> usize {
    let boundary = |k: usize| k as f64 / bins as f64;
    let mut b = ((v * bins as f64).ceil() - 1.0).clamp(0.0, (bins - 1) as f64) as usize;
    while b > 0 && !(v > boundary(b)) {
        b -= 1;
    }
    while b + 1 < bins && v > boundary(b + 1) {
        b += 1;
    }
    b
}

/// Otsu's threshold over a `bins`-bucket histogram of values in [0, 1].
///
/// Candidate thresholds are the interior bin boundaries `k / bins`. Class
/// means use the actual member values. Equal variances resolve to the lower
/// threshold. Maps with no separating split (e.g. constant maps) get an empty
/// foreground.
pub fn otsu_threshold(m: &GridMap, bins: usize) -> OtsuResult {
    let bins = bins.max(2);
    let mut counts = vec![0usize; bins];
    let mut sums = vec![0.0f64; bins];
    for &v in &m.values {
        let b = bin_of(v, bins);
        counts[b] += 1;
        sums[b] += v;
    }
    let n = m.values.len() as f64;
    let total: f64 = sums.iter().sum();

    let mut best: Option<(usize, f64)> = None;
    let (mut w0, mut s0) = (0usize, 0.0f64);
    for k in 1..bins {
        w0 += counts[k - 1];
        s0 += sums[k - 1];
        let w1 = m.values.len() - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let mu0 = s0 / w0 as f64;
        let mu1 = (total - s0) / w1 as f64;
        let var = (w0 as f64 / n) * (w1 as f64 / n) * (mu0 - mu1) * (mu0 - mu1);
        if best.is_none_or(|(_, b)| var > b) {
            best = Some((k, var));
        }
    }
    match best {
        Some((k, variance)) => {
            let threshold = k as f64 / bins as f64;
            OtsuResult {
                threshold,
                split: Some(k),
                variance,
                mask: m.values.iter().map(|&v| v > threshold).collect(),
            }
        }
        None => {
            let threshold = m.max();
            OtsuResult {
                threshold,
                split: None,
                variance: 0.0,
                mask: vec![false; m.values.len()],
            }
        }
    }
}

/// Pixel adjacency used for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    pub fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

impl std::str::FromStr for Connectivity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "4" => Ok(Self::Four),
            "8" => Ok(Self::Eight),
            _ => Err(format!("connectivity must be 4 or 8, got {s:?}")),
        }
    }
}

/// Half-open rectangle in patch coordinates: rows `r0..r1`, cols `c0..c1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchBox {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl PatchBox {
    pub fn new(r0: usize, c0: usize, r1: usize, c1: usize) -> Self {
        Self { r0, c0, r1, c1 }
    }

    pub fn height(&self) -> usize {
        self.r1.saturating_sub(self.r0)
    }

    pub fn width(&self) -> usize {
        self.c1.saturating_sub(self.c0)
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.r0..self.r1).contains(&row) && (self.c0..self.c1).contains(&col)
    }

    pub fn intersection(&self, o: &PatchBox) -> usize {
        let h = self.r1.min(o.r1).saturating_sub(self.r0.max(o.r0));
        let w = self.c1.min(o.c1).saturating_sub(self.c0.max(o.c0));
        h * w
    }

    /// Intersection over union; two empty boxes give 0.
    pub fn iou(&self, o: &PatchBox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Labeled connected components of a binary grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSet {
    pub side: usize,
    /// 0 is background; components are numbered from 1 in row-major order of
    /// their first cell.
    pub labels: Vec<u32>,
    /// `(row, col)` mean of member cells.
    pub centroids: Vec<(f64, f64)>,
    pub areas: Vec<usize>,
    pub boxes: Vec<PatchBox>,
}

impl ComponentSet {
    pub fn count(&self) -> usize {
        self.areas.len()
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

/// Two-pass union–find labeling of a `side × side` row-major mask.
pub fn connected_components(mask: &[bool], side: usize, conn: Connectivity) -> ComponentSet {
    assert_eq!(mask.len(), side * side, "mask must be side × side");
    let n = side;
    // provisional labels, 0 = background
    let mut prov = vec![0u32; n * n];
    let mut parent: Vec<u32> = vec![0];
    // neighbors already visited in a row-major scan
    let back: &[(isize, isize)] = match conn {
        Connectivity::Four => &[(-1, 0), (0, -1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1)],
    };
    for r in 0..n {
        for c in 0..n {
            if !mask[r * n + c] {
                continue;
            }
            let mut label = 0u32;
            for &(dr, dc) in back {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || cc < 0 || cc >= n as isize {
                    continue;
                }
                let l = prov[rr as usize * n + cc as usize];
                if l == 0 {
                    continue;
                }
                if label == 0 {
                    label = l;
                } else {
                    let (a, b) = (find(&mut parent, label), find(&mut parent, l));
                    if a != b {
                        parent[a.max(b) as usize] = a.min(b);
                    }
                }
            }
            if label == 0 {
                label = parent.len() as u32;
                parent.push(label);
            }
            prov[r * n + c] = label;
        }
    }

    let mut final_of = vec![0u32; parent.len()];
    let mut labels = vec![0u32; n * n];
    let mut sums: Vec<(f64, f64)> = Vec::new();
    let mut areas: Vec<usize> = Vec::new();
    let mut boxes: Vec<PatchBox> = Vec::new();
    for r in 0..n {
        for c in 0..n {
            let p = prov[r * n + c];
            if p == 0 {
                continue;
            }
            let root = find(&mut parent, p) as usize;
            if final_of[root] == 0 {
                areas.push(0);
                sums.push((0.0, 0.0));
                boxes.push(PatchBox::new(r, c, r + 1, c + 1));
                final_of[root] = areas.len() as u32;
            }
            let l = final_of[root];
            labels[r * n + c] = l;
            let k = l as usize - 1;
            areas[k] += 1;
            sums[k].0 += r as f64;
            sums[k].1 += c as f64;
            let b = &mut boxes[k];
            b.r0 = b.r0.min(r);
            b.c0 = b.c0.min(c);
            b.r1 = b.r1.max(r + 1);
            b.c1 = b.c1.max(c + 1);
        }
    }
    let centroids = sums
        .iter()
        .zip(&areas)
        .map(|(&(sr, sc), &a)| (sr / a as f64, sc / a as f64))
        .collect();
    ComponentSet {
        side,
        labels,
        centroids,
        areas,
        boxes,
    }
}

/// Mean Euclidean distance over unordered centroid pairs; 0 for fewer than
/// two centroids.
pub fn mean_pairwise_distance(centroids: &[(f64, f64)]) -> f64 {
    let n = centroids.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for (i, a) in centroids.iter().enumerate() {
        for b in &centroids[i + 1..] {
            total += (a.0 - b.0).hypot(a.1 - b.1);
        }
    }
    total / (n * (n - 1) / 2) as f64
}

/// Diagonal of an `n × n` grid.
pub fn grid_diagonal(side: usize) -> f64 {
    let n = side as f64;
    (n * n + n * n).sqrt()
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl CropBox {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }
}

/// Knobs for turning a guidance map into a crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoxParams {
    /// Cells at or above `theta * max` are salient.
    pub theta: f64,
    /// Patches added on each side of the component's box.
    pub pad: usize,
    /// Minimum box side in patches.
    pub min_side: usize,
    pub connectivity: Connectivity,
}

impl Default for BoxParams {
    fn default() -> Self {
        Self {
            theta: 0.5,
            pad: 1,
            min_side: 2,
            connectivity: Connectivity::Eight,
        }
    }
}

impl BoxParams {
    pub fn validate(&self) -> Result<(), SpatialError> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(SpatialError::BadParams(format!("theta {} not in (0, 1]", self.theta)));
        }
        if self.min_side == 0 {
            return Err(SpatialError::BadParams("min_side must be at least 1".into()));
        }
        Ok(())
    }
}

/// A crop in both coordinate systems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub patch: PatchBox,
    pub pixels: CropBox,
}

/// Grows `[lo, hi)` symmetrically to at least `min` cells inside `[0, n)`.
fn grow_span(lo: usize, hi: usize, min: usize, n: usize) -> (usize, usize) {
    let len = hi - lo;
    if len >= min {
        return (lo, hi);
    }
    let deficit = (min - len) as isize;
    let mut lo = lo as isize - deficit / 2;
    let mut hi = hi as isize + (deficit - deficit / 2);
    if lo < 0 {
        hi -= lo;
        lo = 0;
    }
    if hi > n as isize {
        lo -= hi - n as isize;
        hi = n as isize;
    }
    (lo.max(0) as usize, hi as usize)
}

/// Box around the largest salient component of `map`, padded, grown to a
/// minimum size, and scaled to pixels.
///
/// Salient cells are those at or above `theta · max`. Equal-area components
/// resolve to the one found first in row-major order.
pub fn extract_bbox(
    map: &GridMap,
    image: ImageGeometry,
    params: &BoxParams,
) -> Result<Extraction, SpatialError> {
    params.validate()?;
    let max = map.max();
    if !(max > 0.0) {
        return Err(SpatialError::NoSalientRegion);
    }
    let cut = params.theta * max;
    let mask: Vec<bool> = map.values.iter().map(|&v| v >= cut).collect();
    let comps = connected_components(&mask, map.side, params.connectivity);
    let mut pick = 0;
    for (k, &a) in comps.areas.iter().enumerate() {
        if a > comps.areas[pick] {
            pick = k;
        }
    }
    let b = comps.boxes[pick];
    let n = map.side;
    let (r0, r1) = (b.r0.saturating_sub(params.pad), (b.r1 + params.pad).min(n));
    let (c0, c1) = (b.c0.saturating_sub(params.pad), (b.c1 + params.pad).min(n));
    let (r0, r1) = grow_span(r0, r1, params.min_side, n);
    let (c0, c1) = grow_span(c0, c1, params.min_side, n);
    let patch = PatchBox::new(r0, c0, r1, c1);

    let p = image.patch_size as usize;
    let scale = |v: usize, limit: u32| (v.saturating_mul(p)).min(limit as usize) as u32;
    let pixels = CropBox {
        x0: scale(c0, image.width),
        y0: scale(r0, image.height),
        x1: scale(c1, image.width),
        y1: scale(r1, image.height),
    };
    if !pixels.fits(image.width, image.height) {
        return Err(SpatialError::EmptyCrop(pixels));
    }
    Ok(Extraction { patch, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(side: usize, v: &[f64]) -> GridMap {
        GridMap::new(side, v.to_vec()).unwrap()
    }

    #[test]
    fn normalize_example() {
        let m = normalize01(&grid(2, &[0.0, 2.0, 4.0, 8.0]));
        assert_eq!(m.values(), &[0.0, 0.25, 0.5, 1.0]);
        assert_eq!(normalize01(&grid(2, &[3.0; 4])).values(), &[0.0; 4]);
    }

    #[test]
    fn otsu_bimodal_and_constant() {
        let v: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 0.1 } else { 0.9 }).collect();
        let r = otsu_threshold(&grid(4, &v), 256);
        let expected: Vec<bool> = v.iter().map(|&x| x == 0.9).collect();
        assert_eq!(r.mask, expected);
        // lowest boundary strictly above 0.1
        assert_eq!(r.split, Some(26));

        let r = otsu_threshold(&grid(3, &[0.0; 9]), 256);
        assert!(r.mask.iter().all(|&b| !b));
        assert_eq!(r.split, None);
    }

    #[test]
    fn bin_membership_matches_boundaries() {
        for bins in [2, 3, 7, 10, 256] {
            for i in 0..=1000 {
                let v = i as f64 / 1000.0;
                let b = bin_of(v, bins);
                for k in 1..bins {
                    assert_eq!(b >= k, v > k as f64 / bins as f64, "v={v} bins={bins} k={k}");
                }
            }
        }
    }

    #[test]
    fn diagonal_cells_join_under_eight_connectivity() {
        let mask = [true, false, false, true];
        assert_eq!(connected_components(&mask, 2, Connectivity::Eight).count(), 1);
        assert_eq!(connected_components(&mask, 2, Connectivity::Four).count(), 2);
    }

    #[test]
    fn empty_mask_has_no_components() {
        let c = connected_components(&[false; 9], 3, Connectivity::Eight);
        assert_eq!(c.count(), 0);
        assert!(c.centroids.is_empty());
    }

    #[test]
    fn u_shape_merges_and_orders_labels() {
        #[rustfmt::skip]
        let mask = [
            true,  false, true,  false,
            true,  false, true,  false,
            true,  true,  true,  false,
            false, false, false, true,
        ];
        let c = connected_components(&mask, 4, Connectivity::Four);
        assert_eq!(c.count(), 2);
        assert_eq!(c.areas, vec![7, 1]);
        assert_eq!(c.labels[0], 1);
        assert_eq!(c.labels[15], 2);
        assert_eq!(c.boxes[0], PatchBox::new(0, 0, 3, 3));
        let (r, col) = c.centroids[0];
        assert!((r - 8.0 / 7.0).abs() < 1e-12 && (col - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pairwise_distance_examples() {
        assert_eq!(mean_pairwise_distance(&[(1.0, 1.0)]), 0.0);
        assert_eq!(mean_pairwise_distance(&[(0.0, 0.0), (3.0, 4.0)]), 5.0);
    }

    const IMG: ImageGeometry = ImageGeometry {
        width: 336,
        height: 336,
        patch_size: 14,
    };

    #[test]
    fn single_hot_cell_gives_padded_neighborhood() {
        let mut v = vec![0.0; 24 * 24];
        v[10 * 24 + 5] = 1.0;
        let e = extract_bbox(&grid(24, &v), IMG, &BoxParams::default()).unwrap();
        assert_eq!(e.patch, PatchBox::new(9, 4, 12, 7));
        assert_eq!(
            e.pixels,
            CropBox {
                x0: 4 * 14,
                y0: 9 * 14,
                x1: 7 * 14,
                y1: 12 * 14
            }
        );
        // corner cell clamps
        let mut v = vec![0.0; 24 * 24];
        v[0] = 1.0;
        let e = extract_bbox(&grid(24, &v), IMG, &BoxParams::default()).unwrap();
        assert_eq!(e.patch, PatchBox::new(0, 0, 2, 2));
    }

    #[test]
    fn min_side_without_padding() {
        let mut v = vec![0.0; 24 * 24];
        v[10 * 24 + 5] = 1.0;
        let p = BoxParams {
            pad: 0,
            min_side: 2,
            ..BoxParams::default()
        };
        let e = extract_bbox(&grid(24, &v), IMG, &p).unwrap();
        assert_eq!(e.patch.height(), 2);
        assert_eq!(e.patch.width(), 2);
        assert_eq!(e.pixels.width(), 28);
    }

    #[test]
    fn largest_blob_wins() {
        let mut v = vec![0.0; 12 * 12];
        // 5-cell plus at (2,2), 9-cell square at rows 7..10, cols 7..10
        for (r, c) in [(1, 2), (2, 1), (2, 2), (2, 3), (3, 2)] {
            v[r * 12 + c] = 1.0;
        }
        for r in 7..10 {
            for c in 7..10 {
                v[r * 12 + c] = 0.9;
            }
        }
        let p = BoxParams {
            pad: 0,
            ..BoxParams::default()
        };
        let e = extract_bbox(&grid(12, &v), IMG, &p).unwrap();
        assert_eq!(e.patch, PatchBox::new(7, 7, 10, 10));
    }

    #[test]
    fn zero_map_has_no_region() {
        assert_eq!(
            extract_bbox(&GridMap::zeros(4), IMG, &BoxParams::default()),
            Err(SpatialError::NoSalientRegion)
        );
    }

    #[test]
    fn iou_basics() {
        let a = PatchBox::new(0, 0, 2, 2);
        let b = PatchBox::new(1, 1, 3, 3);
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(a.iou(&a), 1.0);
    }
}
