//! Boundary-based Hausdorff and average surface distances.
//!
//! Distances come from an exact squared Euclidean distance transform of the
//! other mask's boundary, so results are exact for integer pixel grids.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub hd: f64,
    pub hd95: f64,
    pub asd: f64,
}

/// Foreground pixels with a 4-neighbour in the background or on the image edge.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    assert_eq!(mask.len(), h * w, "mask size mismatch");
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            out[y * w + x] = edge
                || !mask[(y - 1) * w + x]
                || !mask[(y + 1) * w + x]
                || !mask[y * w + x - 1]
                || !mask[y * w + x + 1];
        }
    }
    out
}

const FAR: f64 = 1e12;

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: replace the only parabola
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel.
pub fn squared_distance_transform(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut tmp[..h]);
        for y in 0..h {
            grid[y * w + x] = tmp[y];
        }
    }
    for y in 0..h {
        let row = grid[y * w..(y + 1) * w].to_vec();
        edt_1d(&row, &mut tmp[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&tmp[..w]);
    }
    grid
}

/// Linear-interpolated percentile of sorted values, `q` in `[0, 100]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Symmetric boundary distances between two masks, or `None` when either
/// mask is empty.
pub fn surface_distances(pred: &[bool], gt: &[bool], h: usize, w: usize) -> Option<SurfaceDistances> {
    if !pred.iter().any(|&v| v) || !gt.iter().any(|&v| v) {
        return None;
    }
    let bp = boundary(pred, h, w);
    let bg = boundary(gt, h, w);
    let to_gt = squared_distance_transform(&bg, h, w);
    let to_pred = squared_distance_transform(&bp, h, w);
    let mut dists = Vec::new();
    for i in 0..h * w {
        if bp[i] {
            dists.push(to_gt[i].sqrt());
        }
        if bg[i] {
            dists.push(to_pred[i].sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    Some(SurfaceDistances {
        hd: *dists.last().expect("nonempty masks have boundaries"),
        hd95: percentile(&dists, 95.0),
        asd: dists.iter().sum::<f64>() / dists.len() as f64,
    })
}
