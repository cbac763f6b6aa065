//! One-to-one region matching by minimum total cost.

use serde::{Deserialize, Serialize};

use super::color::{distance, ColorSpace};
use super::segment::{BBox, Region};

/// Weight of the geometric term in the matching cost.
pub const MATCH_ALPHA: f64 = 0.5;

/// Minimum-cost assignment for a rectangular cost matrix; returns
/// `min(rows, cols)` `(row, col)` pairs sorted by row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    if m == 0 {
        return Vec::new();
    }
    if n > m {
        let t: Vec<Vec<f64>> = (0..m)
            .map(|j| (0..n).map(|i| cost[i][j]).collect())
            .collect();
        let mut out: Vec<(usize, usize)> = hungarian(&t).into_iter().map(|(j, i)| (i, j)).collect();
        out.sort_unstable();
        return out;
    }
    // Potentials method, rows 1..=n assigned into columns 1..=m.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    out.sort_unstable();
    out
}

fn union_bbox(regions: &[Region]) -> BBox {
    regions.iter().fold((usize::MAX, usize::MAX, 0, 0), |b, r| {
        (
            b.0.min(r.bbox.0),
            b.1.min(r.bbox.1),
            b.2.max(r.bbox.2),
            b.3.max(r.bbox.3),
        )
    })
}

/// Box in continuous coordinates relative to the foreground box, in [0, 1]².
fn normalized(b: BBox, fg: BBox) -> [f64; 4] {
    let hh = (fg.2 + 1 - fg.0) as f64;
    let ww = (fg.3 + 1 - fg.1) as f64;
    [
        (b.0 - fg.0) as f64 / hh,
        (b.1 - fg.1) as f64 / ww,
        (b.2 + 1 - fg.0) as f64 / hh,
        (b.3 + 1 - fg.1) as f64 / ww,
    ]
}

fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ih = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iw = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ih * iw;
    let area = |x: [f64; 4]| (x[2] - x[0]) * (x[3] - x[1]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `α(1 − IoU) + (1 − α)·min(ΔE/100, 1)` for every `(ref, gen)` pair, with
/// boxes normalised to each side's foreground extent.
pub fn cost_matrix(reference: &[Region], generated: &[Region]) -> Vec<Vec<f64>> {
    if reference.is_empty() || generated.is_empty() {
        return vec![Vec::new(); reference.len()];
    }
    let fr = union_bbox(reference);
    let fg = union_bbox(generated);
    let lab = ColorSpace::Lab.index();
    reference
        .iter()
        .map(|r| {
            generated
                .iter()
                .map(|g| {
                    let geo = 1.0 - iou(normalized(r.bbox, fr), normalized(g.bbox, fg));
                    let col =
                        (distance(r.mean[lab], g.mean[lab], ColorSpace::Lab) / 100.0).min(1.0);
                    MATCH_ALPHA * geo + (1.0 - MATCH_ALPHA) * col
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// `(ref index, gen index, cost)`, sorted by ref index.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_reference: usize,
    pub unmatched_generated: usize,
    pub total_cost: f64,
}

pub fn match_regions(reference: &[Region], generated: &[Region]) -> Matching {
    let cost = cost_matrix(reference, generated);
    let pairs: Vec<(usize, usize, f64)> = hungarian(&cost)
        .into_iter()
        .map(|(i, j)| (i, j, cost[i][j]))
        .collect();
    Matching {
        unmatched_reference: reference.len() - pairs.len(),
        unmatched_generated: generated.len() - pairs.len(),
        total_cost: pairs.iter().map(|p| p.2).sum(),
        pairs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_three_by_three() {
        let c = vec![
            vec![4.0, 1.0, 3.0],
            vec![2.0, 0.0, 5.0],
            vec![3.0, 2.0, 2.0],
        ];
        let m = hungarian(&c);
        let total: f64 = m.iter().map(|&(i, j)| c[i][j]).sum();
        assert_eq!(total, 5.0);
        assert_eq!(m.len(), 3);
    }

    #[test]
    fn rectangular_both_ways() {
        let c = vec![vec![5.0, 1.0, 9.0, 2.0]];
        assert_eq!(hungarian(&c), vec![(0, 1)]);
        let t = vec![vec![5.0], vec![1.0], vec![9.0]];
        assert_eq!(hungarian(&t), vec![(1, 0)]);
        assert!(hungarian(&[]).is_empty());
    }

    #[test]
    fn iou_of_identical_and_disjoint_boxes() {
        assert_eq!(iou([0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]), 1.0);
        assert_eq!(iou([0.0, 0.0, 0.5, 0.5], [0.5, 0.5, 1.0, 1.0]), 0.0);
    }
}
