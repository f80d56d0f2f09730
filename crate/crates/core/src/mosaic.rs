//! Homography estimation (normalised DLT inside RANSAC) and panorama
//! compositing with feathered blending.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix3, SMatrix, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::geometry::{AffineTransform, Point2, PointMap};
use crate::imaging::Image;

/// Projective map with the inliers that supported its estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Homography {
    /// Row-major, scaled so the bottom-right entry is 1 whenever it is nonzero.
    pub matrix: [[f64; 3]; 3],
    pub inliers: Vec<usize>,
}

impl Homography {
    pub fn identity() -> Self {
        Self::from_matrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self::from_matrix([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])
    }

    pub fn from_affine(t: &AffineTransform) -> Self {
        Self::from_matrix(t.to_matrix3())
    }

    pub fn from_matrix(m: [[f64; 3]; 3]) -> Self {
        let s = m[2][2];
        let matrix = if s != 0.0 { m.map(|r| r.map(|v| v / s)) } else { m };
        Self { matrix, inliers: Vec::new() }
    }

    /// Row-major entries.
    pub fn entries(&self) -> [f64; 9] {
        let m = &self.matrix;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]]
    }

    pub fn from_entries(e: &[f64; 9]) -> Self {
        Self::from_matrix([[e[0], e[1], e[2]], [e[3], e[4], e[5]], [e[6], e[7], e[8]]])
    }

    fn to_na(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.matrix[r][c])
    }

    fn from_na(m: &Matrix3<f64>) -> Self {
        Self::from_matrix(core::array::from_fn(|r| core::array::from_fn(|c| m[(r, c)])))
    }

    pub fn determinant(&self) -> f64 {
        self.to_na().determinant()
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Homography {
        Self::from_na(&(self.to_na() * other.to_na()))
    }

    pub fn inverse(&self) -> Result<Homography> {
        self.to_na()
            .try_inverse()
            .map(|m| Self::from_na(&m))
            .ok_or_else(|| Error::Parameter("homography is singular".into()))
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let m = &self.matrix;
        let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
        if w == 0.0 {
            return Point2::new(f64::INFINITY, f64::INFINITY);
        }
        Point2::new(
            (m[0][0] * p.x + m[0][1] * p.y + m[0][2]) / w,
            (m[1][0] * p.x + m[1][1] * p.y + m[1][2]) / w,
        )
    }

    /// Largest distance between `self` and `other` over the corners of a
    /// `width x height` frame.
    pub fn corner_error(&self, other: &Homography, width: usize, height: usize) -> f64 {
        frame_corners(width, height)
            .iter()
            .map(|&c| self.apply(c).distance(other.apply(c)))
            .fold(0.0, f64::max)
    }
}

impl PointMap for Homography {
    fn map_point(&self, p: Point2) -> Point2 {
        self.apply(p)
    }
}

fn frame_corners(width: usize, height: usize) -> [Point2; 4] {
    let (w, h) = ((width.max(1) - 1) as f64, (height.max(1) - 1) as f64);
    [Point2::new(0.0, 0.0), Point2::new(w, 0.0), Point2::new(0.0, h), Point2::new(w, h)]
}

/// Similarity moving the centroid to the origin with mean distance `sqrt(2)`.
fn normalizer(points: impl Iterator<Item = Point2> + Clone) -> Option<Matrix3<f64>> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
    let (cx, cy) = (sx / n, sy / n);
    let mean = points.map(|p| libm::hypot(p.x - cx, p.y - cy)).sum::<f64>() / n;
    if !(mean > 1e-12) || !mean.is_finite() {
        return None;
    }
    let s = core::f64::consts::SQRT_2 / mean;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn transform(m: &Matrix3<f64>, p: Point2) -> (f64, f64) {
    let v = m * Vector3::new(p.x, p.y, 1.0);
    (v.x / v.z, v.y / v.z)
}

/// Relative size below which the second-smallest eigenvalue of the DLT
/// normal matrix marks a rank-deficient configuration.
const RANK_TOLERANCE: f64 = 1e-10;

/// Least-squares homography mapping each `pairs[k].0` onto `pairs[k].1`.
pub fn dlt_homography(pairs: &[(Point2, Point2)]) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(contract_err!("homography needs at least 4 correspondences, got {}", pairs.len()));
    }
    if pairs.iter().any(|(a, b)| !(a.x.is_finite() && a.y.is_finite() && b.x.is_finite() && b.y.is_finite())) {
        return Err(contract_err!("non-finite correspondence"));
    }
    let ts = normalizer(pairs.iter().map(|p| p.0)).ok_or(Error::RankDeficient)?;
    let td = normalizer(pairs.iter().map(|p| p.1)).ok_or(Error::RankDeficient)?;
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (a, b) in pairs {
        let (x, y) = transform(&ts, *a);
        let (u, v) = transform(&td, *b);
        let r1 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r2 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for r in [r1, r2] {
            for i in 0..9 {
                for j in 0..9 {
                    ata[(i, j)] += r[i] * r[j];
                }
            }
        }
    }
    let eig = SymmetricEigen::new(ata);
    let mut order: [usize; 9] = core::array::from_fn(|i| i);
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let largest = eig.eigenvalues[order[8]];
    if !(eig.eigenvalues[order[1]] > RANK_TOLERANCE * largest) {
        return Err(Error::RankDeficient);
    }
    let h = eig.eigenvectors.column(order[0]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse().ok_or(Error::RankDeficient)?;
    let full = td_inv * hn * ts;
    if !(full.determinant().abs() > 1e-300) || full.iter().any(|v| !v.is_finite()) {
        return Err(Error::RankDeficient);
    }
    let mut out = Homography::from_na(&full);
    out.inliers = (0..pairs.len()).collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold_px: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { iterations: 2000, inlier_threshold_px: 3.0, seed: 0 }
    }
}

fn inliers_of(h: &Homography, pairs: &[(Point2, Point2)], threshold: f64) -> Vec<usize> {
    pairs
        .iter()
        .enumerate()
        .filter(|(_, (a, b))| h.apply(*a).distance(*b) <= threshold)
        .map(|(k, _)| k)
        .collect()
}

/// RANSAC over minimal 4-point samples, then a DLT refit on the inliers of
/// the best hypothesis. The reported inliers are those of that hypothesis.
pub fn ransac_homography(pairs: &[(Point2, Point2)], cfg: &RansacConfig) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(contract_err!("homography needs at least 4 correspondences, got {}", pairs.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Vec<usize> = Vec::new();
    let mut sample = Vec::with_capacity(4);
    for _ in 0..cfg.iterations {
        let idx = rand::seq::index::sample(&mut rng, pairs.len(), 4);
        sample.clear();
        sample.extend(idx.iter().map(|k| pairs[k]));
        let Ok(h) = dlt_homography(&sample) else { continue };
        let inl = inliers_of(&h, pairs, cfg.inlier_threshold_px);
        if inl.len() > best.len() {
            best = inl;
        }
    }
    if best.len() < 4 {
        return Err(Error::EstimationFailed(alloc::format!(
            "best model has {} inliers out of {}",
            best.len(),
            pairs.len()
        )));
    }
    let chosen: Vec<(Point2, Point2)> = best.iter().map(|&k| pairs[k]).collect();
    let mut h = dlt_homography(&chosen).map_err(|e| Error::EstimationFailed(alloc::format!("refit failed: {e}")))?;
    h.inliers = best;
    Ok(h)
}

/// Inverse-mapping warp: content at `p` moves to `H(p)`; samples outside
/// the source are zero.
pub fn warp_homography(img: &Image, h: &Homography) -> Result<Image> {
    let inv = h.inverse()?;
    let mut pixels = Vec::with_capacity(img.pixels().len());
    for y in 0..img.height() {
        for x in 0..img.width() {
            let src = inv.apply(Point2::new(x as f64, y as f64));
            for c in 0..img.channels() {
                pixels.push(img.sample_bilinear(src.x, src.y, c));
            }
        }
    }
    Image::new(img.width(), img.height(), img.channels(), pixels)
}

/// Chains pairwise maps (`pairwise[k]` takes frame `k+1` into frame `k`)
/// into maps from every frame to frame 0.
pub fn chain_homographies(pairwise: &[Homography]) -> Vec<Homography> {
    let mut out = vec![Homography::identity()];
    for h in pairwise {
        let next = out.last().expect("nonempty").compose(h);
        out.push(next);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeConfig {
    /// Largest canvas, in pixels, before giving up.
    pub max_pixels: usize,
}

impl Default for CompositeConfig {
    fn default() -> Self {
        Self { max_pixels: 64 << 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panorama {
    pub image: Image,
    /// Frame-0 coordinates of canvas pixel `(0, 0)`.
    pub origin: (i64, i64),
    /// RMS intensity difference between overlapping frames; `None` without overlap.
    pub overlap_rms: Option<f64>,
    pub overlap_pixels: usize,
}

/// Warps every frame into frame 0 coordinates and blends with weights that
/// grow with the distance to each frame's border.
pub fn composite_panorama(
    frames: &[Image],
    pairwise: &[Homography],
    cfg: &CompositeConfig,
) -> Result<Panorama> {
    let Some(first) = frames.first() else {
        return Err(contract_err!("no frames to composite"));
    };
    if pairwise.len() + 1 != frames.len() {
        return Err(contract_err!("{} frames need {} homographies, got {}", frames.len(), frames.len() - 1, pairwise.len()));
    }
    let channels = first.channels();
    if frames.iter().any(|f| f.channels() != channels) {
        return Err(contract_err!("frames differ in channel count"));
    }
    let to_ref = chain_homographies(pairwise);
    let from_ref = to_ref.iter().map(Homography::inverse).collect::<Result<Vec<_>>>()?;

    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (f, g) in frames.iter().zip(&to_ref) {
        for c in frame_corners(f.width(), f.height()) {
            let p = g.apply(c);
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
    }
    if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
        return Err(Error::Resource("panorama bounds are unbounded".into()));
    }
    // Tolerate round-off so integer extents stay integer.
    let snap = |v: f64| if (v - libm::round(v)).abs() < 1e-7 { libm::round(v) } else { v };
    let (ox, oy) = (libm::floor(snap(x0)), libm::floor(snap(y0)));
    let width_f = libm::ceil(snap(x1)) - ox + 1.0;
    let height_f = libm::ceil(snap(y1)) - oy + 1.0;
    if width_f * height_f > cfg.max_pixels as f64 {
        return Err(Error::Resource(alloc::format!(
            "canvas {width_f}x{height_f} exceeds {} pixels",
            cfg.max_pixels
        )));
    }
    let (width, height) = (width_f as usize, height_f as usize);

    let mut pixels = vec![0.0f32; width * height * channels];
    let mut sq_sum = 0.0f64;
    let mut sq_count = 0usize;
    let mut overlap_pixels = 0usize;
    let mut samples: Vec<(f64, [f32; 3])> = Vec::with_capacity(frames.len());
    for cy in 0..height {
        for cx in 0..width {
            let p = Point2::new(cx as f64 + ox, cy as f64 + oy);
            samples.clear();
            for (f, inv) in frames.iter().zip(&from_ref) {
                let q = inv.apply(p);
                let (wmax, hmax) = ((f.width() - 1) as f64, (f.height() - 1) as f64);
                let eps = 1e-6;
                if !(q.x >= -eps && q.y >= -eps && q.x <= wmax + eps && q.y <= hmax + eps) {
                    continue;
                }
                let (qx, qy) = (q.x.clamp(0.0, wmax), q.y.clamp(0.0, hmax));
                let weight = qx.min(wmax - qx).min(qy).min(hmax - qy) + 1.0;
                let mut v = [0.0f32; 3];
                for (c, vc) in v.iter_mut().enumerate().take(channels) {
                    *vc = f.sample_bilinear(qx, qy, c);
                }
                samples.push((weight, v));
            }
            if samples.is_empty() {
                continue;
            }
            let total: f64 = samples.iter().map(|s| s.0).sum();
            let out = &mut pixels[(cy * width + cx) * channels..][..channels];
            for (c, o) in out.iter_mut().enumerate() {
                let acc: f64 = samples.iter().map(|(w, v)| w * v[c] as f64).sum();
                *o = (acc / total).clamp(0.0, 1.0) as f32;
            }
            if samples.len() >= 2 {
                overlap_pixels += 1;
                for a in 0..samples.len() {
                    for b in a + 1..samples.len() {
                        for c in 0..channels {
                            let d = samples[a].1[c] as f64 - samples[b].1[c] as f64;
                            sq_sum += d * d;
                            sq_count += 1;
                        }
                    }
                }
            }
        }
    }
    let image = Image::new(width, height, channels, pixels)?;
    Ok(Panorama {
        image,
        origin: (ox as i64, oy as i64),
        overlap_rms: (sq_count > 0).then(|| libm::sqrt(sq_sum / sq_count as f64)),
        overlap_pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::standard_normal;
    use crate::synth::{synthesize, SynthConfig};
    use crate::testutil::rng;
    use rand::Rng;

    fn projective() -> Homography {
        Homography::from_matrix([[1.05, 0.08, 12.0], [-0.04, 0.97, -7.0], [2e-4, -1e-4, 1.0]])
    }

    fn grid_pairs(h: &Homography, n: usize) -> Vec<(Point2, Point2)> {
        let mut r = rng(n as u64);
        (0..n)
            .map(|_| {
                let p = Point2::new(r.random_range(0.0..255.0), r.random_range(0.0..255.0));
                (p, h.apply(p))
            })
            .collect()
    }

    #[test]
    fn dlt_recovers_exact_maps() {
        let affine = Homography::from_affine(&AffineTransform::rotation_about(20.0, 128.0, 128.0));
        for truth in [Homography::identity(), Homography::translation(5.0, -3.0), affine, projective()] {
            for n in [4, 30] {
                let est = dlt_homography(&grid_pairs(&truth, n)).unwrap();
                let e = est.corner_error(&truth, 256, 256);
                assert!(e < 1e-6, "{truth:?} n={n}: {e}");
                assert_eq!(est.inliers.len(), n);
            }
        }
        let est = dlt_homography(&grid_pairs(&Homography::identity(), 10)).unwrap();
        for (a, b) in est.entries().iter().zip(Homography::identity().entries()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn dlt_rejects_degenerate_input() {
        let h = Homography::identity();
        assert!(dlt_homography(&grid_pairs(&h, 3)).is_err());
        let line: Vec<(Point2, Point2)> = (0..6).map(|k| (Point2::new(k as f64, 2.0 * k as f64), Point2::new(k as f64, 2.0 * k as f64))).collect();
        assert_eq!(dlt_homography(&line), Err(Error::RankDeficient));
        let same = vec![(Point2::new(1.0, 1.0), Point2::new(2.0, 2.0)); 5];
        assert!(dlt_homography(&same).is_err());
        let mut nan = grid_pairs(&h, 5);
        nan[0].0.x = f64::NAN;
        assert!(dlt_homography(&nan).is_err());
    }

    fn contaminated(truth: &Homography, inliers: usize, outliers: usize, noise: f64, seed: u64) -> Vec<(Point2, Point2)> {
        let mut r = rng(seed);
        let mut pairs = Vec::new();
        for _ in 0..inliers {
            let p = Point2::new(r.random_range(0.0..255.0), r.random_range(0.0..255.0));
            let q = truth.apply(p);
            pairs.push((p, Point2::new(q.x + noise * standard_normal(&mut r), q.y + noise * standard_normal(&mut r))));
        }
        for _ in 0..outliers {
            let p = Point2::new(r.random_range(0.0..255.0), r.random_range(0.0..255.0));
            pairs.push((p, Point2::new(r.random_range(0.0..255.0), r.random_range(0.0..255.0))));
        }
        pairs
    }

    #[test]
    fn ransac_on_clean_data() {
        let truth = projective();
        let h = ransac_homography(&grid_pairs(&truth, 25), &RansacConfig::default()).unwrap();
        assert!(h.corner_error(&truth, 256, 256) < 1e-6);
        assert_eq!(h.inliers.len(), 25);
    }

    #[test]
    fn ransac_ignores_outliers() {
        let truth = projective();
        let mut good = 0;
        for trial in 0..20 {
            let pairs = contaminated(&truth, 70, 30, 0.5, trial);
            let cfg = RansacConfig { seed: trial, ..RansacConfig::default() };
            let h = ransac_homography(&pairs, &cfg).unwrap();
            if h.corner_error(&truth, 256, 256) < 2.0 {
                good += 1;
            }
            assert!(h.inliers.iter().filter(|&&k| k >= 70).count() <= 3);
        }
        assert!(good >= 19, "{good}/20");
    }

    #[test]
    fn ransac_is_deterministic() {
        let pairs = contaminated(&projective(), 40, 20, 0.5, 3);
        let cfg = RansacConfig { iterations: 300, ..RansacConfig::default() };
        assert_eq!(ransac_homography(&pairs, &cfg).unwrap(), ransac_homography(&pairs, &cfg).unwrap());
        assert!(ransac_homography(&pairs[..3], &cfg).is_err());
    }

    #[test]
    fn chaining_translations_adds_offsets() {
        let pw = [Homography::translation(10.0, 0.0), Homography::translation(5.0, -2.0)];
        let chain = chain_homographies(&pw);
        assert_eq!(chain.len(), 3);
        let p = chain[2].apply(Point2::new(0.0, 0.0));
        assert!((p.x - 15.0).abs() < 1e-12 && (p.y + 2.0).abs() < 1e-12);
    }

    #[test]
    fn warp_identity_keeps_image() {
        let img = synthesize(1, &SynthConfig { width: 64, height: 64, ..SynthConfig::default() }).unwrap();
        assert_eq!(warp_homography(&img, &Homography::identity()).unwrap(), img);
    }

    fn crop(img: &Image, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| img.at(x0 + x, y0 + y))
    }

    #[test]
    fn single_frame_panorama_is_the_frame() {
        let img = synthesize(2, &SynthConfig { width: 64, height: 80, ..SynthConfig::default() }).unwrap();
        let p = composite_panorama(core::slice::from_ref(&img), &[], &CompositeConfig::default()).unwrap();
        assert_eq!(p.image, img);
        assert_eq!(p.origin, (0, 0));
        assert_eq!((p.overlap_rms, p.overlap_pixels), (None, 0));
    }

    #[test]
    fn translated_pair_panorama() {
        let scene = synthesize(3, &SynthConfig { width: 256 + 30, height: 256 + 12, ..SynthConfig::default() }).unwrap();
        let a = crop(&scene, 0, 12, 256, 256);
        let b = crop(&scene, 30, 0, 256, 256);
        // A pixel at x in b sits at x + 30 in a; rows move up by 12.
        let p = composite_panorama(&[a, b], &[Homography::translation(30.0, -12.0)], &CompositeConfig::default()).unwrap();
        assert_eq!((p.image.width(), p.image.height()), (286, 268));
        assert_eq!(p.origin, (0, -12));
        assert_eq!(p.overlap_pixels, 226 * 244);
        assert!(p.overlap_rms.unwrap() < 1e-6);
        for (x, y) in [(0, 12), (285, 0), (100, 100)] {
            assert!((p.image.at(x, y) - scene.at(x, y)).abs() < 1e-6);
        }
    }

    #[test]
    fn composite_argument_errors() {
        let img = Image::filled(16, 16, 0.5);
        let cfg = CompositeConfig::default();
        assert!(composite_panorama(&[], &[], &cfg).is_err());
        assert!(composite_panorama(&[img.clone(), img.clone()], &[], &cfg).is_err());
        let tiny = CompositeConfig { max_pixels: 100 };
        assert!(matches!(composite_panorama(&[img], &[], &tiny), Err(Error::Resource(_))));
    }
}
