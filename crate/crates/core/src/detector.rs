//! Harris corner detection and ground-truth correspondences under a known
//! point mapping.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::geometry::{Point2, PointMap};
use crate::imaging::{patch_origin, Image};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub position: Point2,
    /// Harris response, non-negative for returned key-points.
    pub response: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarrisConfig {
    pub sigma: f64,
    pub k: f64,
    pub max_points: usize,
    /// Absolute response floor; filters flat and noise-only regions.
    pub min_response: f64,
    /// Responses below this fraction of the frame maximum are dropped.
    pub relative_threshold: f64,
    /// Side of the patch that must fit around each key-point (0 disables).
    pub patch_side: usize,
}

impl Default for HarrisConfig {
    fn default() -> Self {
        Self {
            sigma: 1.5,
            k: 0.04,
            max_points: 512,
            min_response: 1e-6,
            relative_threshold: 0.01,
            patch_side: 128,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = libm::ceil(3.0 * sigma).max(1.0) as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma)) as f32)
        .collect();
    let total: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable convolution with replicated borders.
fn separable(src: &[f32], w: usize, h: usize, kx: &[f32], ky: &[f32]) -> Vec<f32> {
    let rx = (kx.len() / 2) as isize;
    let ry = (ky.len() / 2) as isize;
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        let row = &src[y * w..][..w];
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in kx.iter().enumerate() {
                let xs = (x as isize + i as isize - rx).clamp(0, w as isize - 1) as usize;
                acc += kv * row[xs];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for (i, &kv) in ky.iter().enumerate() {
            let ys = (y as isize + i as isize - ry).clamp(0, h as isize - 1) as usize;
            let src_row = &tmp[ys * w..][..w];
            let dst = &mut out[y * w..][..w];
            for (d, &s) in dst.iter_mut().zip(src_row) {
                *d += kv * s;
            }
        }
    }
    out
}

/// Harris response map `det(M) - k tr(M)^2` with Sobel gradients and a
/// Gaussian window.
pub fn harris_response(img: &Image, sigma: f64, k: f64) -> Vec<f32> {
    let (w, h) = (img.width(), img.height());
    let px = img.pixels();
    // Sobel scaled by 1/8 to estimate the derivative in intensity per pixel.
    let ix = separable(px, w, h, &[-0.5, 0.0, 0.5], &[0.25, 0.5, 0.25]);
    let iy = separable(px, w, h, &[0.25, 0.5, 0.25], &[-0.5, 0.0, 0.5]);
    let xx: Vec<f32> = ix.iter().map(|v| v * v).collect();
    let yy: Vec<f32> = iy.iter().map(|v| v * v).collect();
    let xy: Vec<f32> = ix.iter().zip(&iy).map(|(a, b)| a * b).collect();
    let g = gaussian_kernel(sigma);
    let sxx = separable(&xx, w, h, &g, &g);
    let syy = separable(&yy, w, h, &g, &g);
    let sxy = separable(&xy, w, h, &g, &g);
    let k = k as f32;
    (0..w * h)
        .map(|i| {
            let tr = sxx[i] + syy[i];
            sxx[i] * syy[i] - sxy[i] * sxy[i] - k * tr * tr
        })
        .collect()
}

/// `a` beats `b` when it has a larger response, or an equal response and
/// a smaller `(y, x)` position.
fn beats(ra: f32, ia: usize, rb: f32, ib: usize) -> bool {
    ra > rb || (ra == rb && ia < ib)
}

/// Harris corners after 3x3 non-maximum suppression, strongest first.
///
/// Key-points whose patch window (`cfg.patch_side`) does not fit inside the
/// image are discarded before the `max_points` cut.
pub fn detect_corners(img: &Image, cfg: &HarrisConfig) -> Vec<Keypoint> {
    let (w, h) = (img.width(), img.height());
    if img.channels() != 1 || w < 3 || h < 3 || cfg.max_points == 0 {
        return Vec::new();
    }
    let r = harris_response(img, cfg.sigma, cfg.k);
    let max = r.iter().copied().fold(0.0f32, f32::max);
    let floor = (cfg.min_response.max(cfg.relative_threshold * max as f64)) as f32;
    if !(max > 0.0) || max < floor {
        return Vec::new();
    }
    // Gradients within the window radius of the border see replicated pixels.
    let margin = (libm::ceil(3.0 * cfg.sigma) as usize).max(1) + 1;
    let mut found: Vec<(f32, usize)> = Vec::new();
    for y in margin..h.saturating_sub(margin) {
        for x in margin..w.saturating_sub(margin) {
            let i = y * w + x;
            let v = r[i];
            if !(v > 0.0) || v < floor {
                continue;
            }
            let mut is_max = true;
            'nbr: for dy in [-1isize, 0, 1] {
                for dx in [-1isize, 0, 1] {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let j = ((y as isize + dy) as usize) * w + (x as isize + dx) as usize;
                    if !beats(v, i, r[j], j) {
                        is_max = false;
                        break 'nbr;
                    }
                }
            }
            if !is_max {
                continue;
            }
            let p = Point2::new(x as f64, y as f64);
            if cfg.patch_side > 0 && patch_origin(w, h, p, cfg.patch_side).is_none() {
                continue;
            }
            found.push((v, i));
        }
    }
    found.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    found.truncate(cfg.max_points);
    found
        .into_iter()
        .map(|(v, i)| Keypoint { position: Point2::new((i % w) as f64, (i / w) as f64), response: v as f64 })
        .collect()
}

/// Ground-truth correspondences between two key-point lists.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    /// Nearest `j` within the projection-error bound for each `i`, with its distance.
    pub nearest: Vec<Option<(usize, f64)>>,
    /// Every pair `(i, j)` with projection error within the bound.
    pub within: BTreeSet<(usize, usize)>,
    pub pe_threshold: f64,
}

impl GroundTruth {
    /// Number of `i` that have at least one correspondent.
    pub fn total(&self) -> usize {
        self.nearest.iter().filter(|n| n.is_some()).count()
    }

    pub fn is_correct(&self, i: usize, j: usize) -> bool {
        self.within.contains(&(i, j))
    }

    /// `(i, j)` pairs of the nearest-correspondent mapping.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.nearest
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.map(|(j, _)| (i, j)))
            .collect()
    }
}

pub const DEFAULT_PE_THRESHOLD: f64 = 5.0;

/// Pairs `(i, j)` with `|T(p_i) - p_j| <= pe_threshold`; each `i` records its
/// nearest such `j` (smaller index on ties).
pub fn ground_truth_matches<M: PointMap + ?Sized>(
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    map: &M,
    pe_threshold: f64,
) -> GroundTruth {
    let mut gt = GroundTruth { nearest: Vec::with_capacity(kps_a.len()), within: BTreeSet::new(), pe_threshold };
    for (i, a) in kps_a.iter().enumerate() {
        let projected = map.map_point(a.position);
        let mut best: Option<(usize, f64)> = None;
        for (j, b) in kps_b.iter().enumerate() {
            let d = projected.distance(b.position);
            if d <= pe_threshold {
                gt.within.insert((i, j));
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
        }
        gt.nearest.push(best);
    }
    gt
}
