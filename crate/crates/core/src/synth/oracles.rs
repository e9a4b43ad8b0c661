//! Brute-force reference implementations used to cross-check the
//! production kernels. They share no code with the kernels they check.

use std::collections::VecDeque;

use crate::records::SequenceLayout;
use crate::spatial::Connectivity;

/// Argmax over the valid tokens by exhaustive scan, lowest index on ties.
pub fn oracle_peak_index(row: &[f32], layout: &SequenceLayout) -> Option<usize> {
    let mut best: Option<usize> = None;
    for j in 0..row.len() {
        if !layout.valid().contains(&j) {
            continue;
        }
        match best {
            Some(b) if row[b] >= row[j] => {}
            _ => best = Some(j),
        }
    }
    best
}

/// Builds the one-hot peak vector explicitly and returns `⟨p, m⟩ / ∥m∥₁`.
pub fn oracle_proj_score(row: &[f32], mask: &[bool], layout: &SequenceLayout) -> Option<f64> {
    let peak = oracle_peak_index(row, layout)?;
    let p: Vec<f64> = (0..row.len()).map(|j| if j == peak { 1.0 } else { 0.0 }).collect();
    let m: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let norm: f64 = m.iter().sum();
    if norm == 0.0 {
        return None;
    }
    let dot: f64 = p.iter().zip(&m).map(|(a, b)| a * b).sum();
    Some(dot / norm)
}

/// Otsu by trying every boundary `k / bins` and partitioning the raw values
/// directly. Returns `(split, threshold, variance)` for the first maximum,
/// or `None` when no boundary separates two non-empty classes.
pub fn oracle_otsu(values: &[f64], bins: usize) -> Option<(usize, f64, f64)> {
    let mut best: Option<(usize, f64, f64)> = None;
    for k in 1..bins {
        let t = k as f64 / bins as f64;
        let lo: Vec<f64> = values.iter().copied().filter(|&v| !(v > t)).collect();
        let hi: Vec<f64> = values.iter().copied().filter(|&v| v > t).collect();
        if lo.is_empty() || hi.is_empty() {
            continue;
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let n = values.len() as f64;
        let (w0, w1) = (lo.len() as f64 / n, hi.len() as f64 / n);
        let d = mean(&lo) - mean(&hi);
        let var = w0 * w1 * d * d;
        match best {
            Some((_, _, b)) if b >= var => {}
            _ => best = Some((k, t, var)),
        }
    }
    best
}

/// Breadth-first flood fill labeling. Labels start at 1 and follow the
/// row-major order of each component's first cell.
pub fn oracle_flood_fill(mask: &[bool], side: usize, conn: Connectivity) -> Vec<u32> {
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0u32;
    let neighbors: Vec<(isize, isize)> = match conn {
        Connectivity::Four => vec![(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => (-1..=1)
            .flat_map(|dr| (-1..=1).map(move |dc| (dr, dc)))
            .filter(|&d| d != (0, 0))
            .collect(),
    };
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(cell) = queue.pop_front() {
            let (r, c) = ((cell / side) as isize, (cell % side) as isize);
            for &(dr, dc) in &neighbors {
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= side as isize || cc >= side as isize {
                    continue;
                }
                let j = rr as usize * side + cc as usize;
                if mask[j] && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
    }
    labels
}

/// Mean distance over all ordered pairs `i != j`.
pub fn oracle_mean_pairwise(points: &[(f64, f64)]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let (dr, dc) = (points[i].0 - points[j].0, points[i].1 - points[j].1);
                total += (dr * dr + dc * dc).sqrt();
                pairs += 1;
            }
        }
    }
    total / pairs as f64
}

/// Fusion computed in two explicit passes: normalize each branch, then blend.
pub fn oracle_fuse(entropies: &[f64], grads: &[f64], alpha: f64) -> Vec<f64> {
    fn norm(xs: &[f64]) -> Vec<f64> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &x in xs {
            if x < lo {
                lo = x;
            }
            if x > hi {
                hi = x;
            }
        }
        xs.iter()
            .map(|&x| if hi == lo { 0.0 } else { (x - lo) / (hi - lo) })
            .collect()
    }
    let conc: Vec<f64> = entropies.iter().map(|&e| 1.0 - e).collect();
    let a = norm(&conc);
    let b = norm(grads);
    (0..a.len()).map(|i| alpha * a[i] + (1.0 - alpha) * b[i]).collect()
}

/// Softmax via `w_i = 1 / Σ_j exp((s_j − s_i)/τ)` with compensated
/// summation; a different algebraic route from the max-subtraction form.
pub fn oracle_softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    scores
        .iter()
        .map(|&si| {
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            for &sj in scores {
                let y = ((sj - si) / temperature).exp() - comp;
                let t = sum + y;
                comp = (t - sum) - y;
                sum = t;
            }
            1.0 / sum
        })
        .collect()
}

/// Weighted sum by explicit per-cell loops.
pub fn oracle_aggregate(maps: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let len = maps.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(len);
    for cell in 0..len {
        let mut acc = 0.0;
        for (m, w) in maps.iter().zip(weights) {
            acc += w * m[cell];
        }
        out.push(acc);
    }
    out
}

/// `Σ a·max(0, s)` by an index loop.
pub fn oracle_gradient_score(a: &[f32], sens: &[f32]) -> f64 {
    let mut g = 0.0;
    for i in 0..a.len() {
        if sens[i] > 0.0 {
            g += a[i] as f64 * sens[i] as f64;
        }
    }
    g
}

/// Central finite difference of `f` at `x[i]` with step `h`.
pub fn central_difference<F>(f: F, x: &[f64], i: usize, h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[i] += h;
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::{connected_components, otsu_threshold, GridMap};

    #[test]
    fn otsu_oracle_agrees_on_bimodal_map() {
        let v: Vec<f64> = (0..36).map(|i| if i < 18 { 0.1 } else { 0.9 }).collect();
        let fast = otsu_threshold(&GridMap::new(6, v.clone()).unwrap(), 256);
        let (k, t, _) = oracle_otsu(&v, 256).unwrap();
        assert_eq!(fast.split, Some(k));
        assert_eq!(fast.threshold, t);
    }

    #[test]
    fn flood_fill_on_empty_mask() {
        assert!(oracle_flood_fill(&[false; 16], 4, Connectivity::Eight)
            .iter()
            .all(|&l| l == 0));
    }

    #[test]
    fn flood_fill_matches_union_find_on_spiral() {
        #[rustfmt::skip]
        let mask = [
            true,  true,  true,  true,  true,
            false, false, false, false, true,
            true,  true,  true,  false, true,
            true,  false, false, false, true,
            true,  true,  true,  true,  true,
        ];
        for conn in [Connectivity::Four, Connectivity::Eight] {
            let a = connected_components(&mask, 5, conn);
            assert_eq!(a.labels, oracle_flood_fill(&mask, 5, conn));
        }
    }
}
