//! Matching evaluation of a model on image pairs with known geometry.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{detect_corners, ground_truth_matches, GroundTruth, HarrisConfig, Keypoint, DEFAULT_PE_THRESHOLD};
use crate::error::{contract_err, Result};
use crate::geometry::{Point2, PointMap};
use crate::imaging::{extract_patch, motion_blur, patch_origin, warp_affine, Image, MOTION_BLUR_SIZES};
use crate::matcher::{match_nn, matching_score, precision_recall, CurveRow, MatchSet, PrecisionRecall};
use crate::model::ModelParams;
use crate::mosaic::{dlt_homography, Homography};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::views::{sample_augmentation, Augmentation, AugmentationSet};

/// Which descriptor the matcher compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// GNN output `g`.
    Global,
    /// CNN output `f`, no graph context.
    Visual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairEvaluation {
    pub keypoints_a: Vec<Keypoint>,
    pub keypoints_b: Vec<Keypoint>,
    /// Indices into `keypoints_a` whose mapped position admits a patch in image b.
    pub queries: Vec<usize>,
    /// Matches from query rows (`i` indexes `queries`) into `keypoints_b`, annotated.
    pub matches: MatchSet,
    pub ground_truth: GroundTruth,
    pub metrics: PrecisionRecall,
    pub matching_score: f64,
}

/// Descriptors `[N, 128]` of key-points whose patches fit in `img`.
pub fn describe_keypoints<T: Scalar>(
    model: &ModelParams<T>,
    img: &Image,
    kps: &[Keypoint],
    kind: FeatureKind,
) -> Result<Tensor<T>> {
    let side = model.patch_side();
    let patches = kps
        .iter()
        .map(|k| extract_patch(img, k.position, side).ok_or_else(|| contract_err!("key-point patch leaves the image")))
        .collect::<Result<Vec<_>>>()?;
    let positions: Vec<Point2> = kps.iter().map(|k| k.position).collect();
    match kind {
        FeatureKind::Global => model.global_features(&patches, &positions, (img.width(), img.height())),
        FeatureKind::Visual => model.visual_features(&patches),
    }
}

/// Detects in both preprocessed images, describes every key-point, and
/// matches the covisible key-points of `a` against all key-points of `b`.
pub fn evaluate_pair<T: Scalar, M: PointMap + ?Sized>(
    model: &ModelParams<T>,
    img_a: &Image,
    img_b: &Image,
    map: &M,
    harris: &HarrisConfig,
    pe_threshold: f64,
    kind: FeatureKind,
) -> Result<PairEvaluation> {
    let harris = HarrisConfig { patch_side: model.patch_side(), ..*harris };
    let kps_a = detect_corners(img_a, &harris);
    let kps_b = detect_corners(img_b, &harris);
    if kps_a.is_empty() || kps_b.is_empty() {
        return Err(contract_err!("no key-points ({} in a, {} in b)", kps_a.len(), kps_b.len()));
    }
    let side = model.patch_side();
    let queries: Vec<usize> = (0..kps_a.len())
        .filter(|&i| patch_origin(img_b.width(), img_b.height(), map.map_point(kps_a[i].position), side).is_some())
        .collect();
    if queries.is_empty() {
        return Err(contract_err!("no key-point of a is visible in b"));
    }
    let fa = describe_keypoints(model, img_a, &kps_a, kind)?;
    let fb = describe_keypoints(model, img_b, &kps_b, kind)?;
    let d = fa.shape()[1];
    let rows = queries.iter().flat_map(|&i| fa.row(i).iter().copied()).collect();
    let fq = Tensor::new(&[queries.len(), d], rows)?;
    let query_kps: Vec<Keypoint> = queries.iter().map(|&i| kps_a[i]).collect();
    let gt = ground_truth_matches(&query_kps, &kps_b, map, pe_threshold);
    let mut matches = match_nn(&fq, &fb)?;
    matches.annotate(&gt);
    let metrics = precision_recall(&matches, &gt);
    let score = matching_score(&matches, kps_a.len(), kps_b.len())?;
    Ok(PairEvaluation {
        keypoints_a: kps_a,
        keypoints_b: kps_b,
        queries,
        matches,
        ground_truth: gt,
        metrics,
        matching_score: score,
    })
}

/// Totals over several pairs; precision pools all retrieved matches.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Aggregate {
    pub pairs: usize,
    pub retrieved: usize,
    pub correct: usize,
    pub ground_truth: usize,
    pub score_sum: f64,
}

impl Aggregate {
    pub fn add(&mut self, e: &PairEvaluation) {
        self.pairs += 1;
        self.retrieved += e.metrics.retrieved;
        self.correct += e.metrics.correct;
        self.ground_truth += e.metrics.ground_truth;
        self.score_sum += e.matching_score;
    }

    pub fn precision(&self) -> Option<f64> {
        (self.retrieved > 0).then(|| self.correct as f64 / self.retrieved as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        (self.ground_truth > 0).then(|| self.correct as f64 / self.ground_truth as f64)
    }

    pub fn matching_score(&self) -> Option<f64> {
        (self.pairs > 0).then(|| self.score_sum / self.pairs as f64)
    }
}

/// A named test transformation applied to a preprocessed frame.
#[derive(Debug, Clone, PartialEq)]
pub enum TestTransform {
    Affine(Augmentation),
    MotionBlur(usize),
    Homography(Homography),
}

impl TestTransform {
    pub fn family(&self) -> &'static str {
        match self {
            TestTransform::Affine(Augmentation::Rotation { .. }) => "rotation",
            TestTransform::Affine(Augmentation::Translation { .. }) => "translation",
            TestTransform::Affine(Augmentation::Scale { .. }) => "scale",
            TestTransform::MotionBlur(_) => "motion_blur",
            TestTransform::Homography(_) => "viewpoint",
        }
    }

    pub fn label(&self) -> String {
        match self {
            TestTransform::Affine(a) => alloc::format!("{a}"),
            TestTransform::MotionBlur(k) => alloc::format!("blur({k})"),
            TestTransform::Homography(h) => {
                let e = h.entries();
                alloc::format!("H({:.4};{:.4};{:.2};{:.4};{:.4};{:.2};{:.2e};{:.2e})", e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7])
            }
        }
    }

    /// The transformed image and the map from source to transformed coordinates.
    pub fn apply(&self, img: &Image) -> Result<(Image, Homography)> {
        match self {
            TestTransform::Affine(a) => {
                let t = a.transform(img.width(), img.height());
                Ok((warp_affine(img, &t)?, Homography::from_affine(&t)))
            }
            TestTransform::MotionBlur(k) => Ok((motion_blur(img, *k)?, Homography::identity())),
            TestTransform::Homography(h) => Ok((crate::mosaic::warp_homography(img, h)?, h.clone())),
        }
    }
}

/// Every value of every augmentation family (both signs for rotations and
/// translations along each axis) plus the motion-blur kernels.
pub fn individual_suite(set: &AugmentationSet) -> Vec<TestTransform> {
    let mut out = Vec::new();
    for &a in &set.rotations_deg {
        for s in [-1.0, 1.0] {
            out.push(TestTransform::Affine(Augmentation::Rotation { degrees: s * a }));
        }
    }
    for &t in &set.translations_px {
        out.push(TestTransform::Affine(Augmentation::Translation { dx: t, dy: 0.0 }));
        out.push(TestTransform::Affine(Augmentation::Translation { dx: 0.0, dy: t }));
    }
    for &s in &set.scales {
        out.push(TestTransform::Affine(Augmentation::Scale { factor: s }));
    }
    for k in MOTION_BLUR_SIZES {
        out.push(TestTransform::MotionBlur(k));
    }
    out
}

/// Projective map moving each frame corner by up to `max_shift` pixels.
pub fn random_viewpoint<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize, max_shift: f64) -> Result<Homography> {
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    let corners = [Point2::new(0.0, 0.0), Point2::new(w, 0.0), Point2::new(0.0, h), Point2::new(w, h)];
    let pairs: Vec<(Point2, Point2)> = corners
        .iter()
        .map(|&c| {
            let dx = rng.random_range(-max_shift..=max_shift);
            let dy = rng.random_range(-max_shift..=max_shift);
            (c, Point2::new(c.x + dx, c.y + dy))
        })
        .collect();
    let mut hm = dlt_homography(&pairs)?;
    hm.inliers.clear();
    Ok(hm)
}

/// Seeded viewpoint changes of increasing strength.
pub fn viewpoint_suite(seed: u64, width: usize, height: usize, per_level: usize) -> Result<Vec<TestTransform>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for shift in [4.0, 8.0, 12.0, 16.0] {
        for _ in 0..per_level {
            out.push(TestTransform::Homography(random_viewpoint(&mut rng, width, height, shift)?));
        }
    }
    Ok(out)
}

/// Held-out protocol: each frame is paired with its warp under a transform
/// freshly sampled from the augmentation sets. Frames without usable
/// key-points are left out.
pub fn held_out_pairs<T: Scalar>(
    model: &ModelParams<T>,
    frames: &[Image],
    set: &AugmentationSet,
    harris: &HarrisConfig,
    seed: u64,
    kind: FeatureKind,
) -> Result<Vec<PairEvaluation>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(frames.len());
    for frame in frames {
        let aug = sample_augmentation(&mut rng, set)?;
        let (warped, map) = TestTransform::Affine(aug).apply(frame)?;
        match evaluate_pair(model, frame, &warped, &map, harris, DEFAULT_PE_THRESHOLD, kind) {
            Ok(e) => out.push(e),
            Err(crate::Error::Contract(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

pub fn evaluate_held_out<T: Scalar>(
    model: &ModelParams<T>,
    frames: &[Image],
    set: &AugmentationSet,
    harris: &HarrisConfig,
    seed: u64,
    kind: FeatureKind,
) -> Result<Aggregate> {
    let mut agg = Aggregate::default();
    for e in held_out_pairs(model, frames, set, harris, seed, kind)? {
        agg.add(&e);
    }
    Ok(agg)
}

/// Recall and 1 - precision pooled over pairs, keeping matches with
/// distance below each threshold.
pub fn pooled_curve(pairs: &[PairEvaluation], thresholds: &[f64]) -> Result<Vec<CurveRow>> {
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(contract_err!("thresholds must be sorted ascending"));
    }
    let gt: usize = pairs.iter().map(|p| p.metrics.ground_truth).sum();
    Ok(thresholds
        .iter()
        .map(|&t| {
            let (mut retrieved, mut correct) = (0usize, 0usize);
            for p in pairs {
                let kept = p.matches.below(t);
                retrieved += kept.len();
                correct += kept.correct_count();
            }
            CurveRow {
                threshold: t,
                recall: (gt > 0).then(|| correct as f64 / gt as f64),
                one_minus_precision: (retrieved > 0).then(|| 1.0 - correct as f64 / retrieved as f64),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{preprocess, ClaheConfig};
    use crate::synth::{synthesize, SynthConfig};

    fn frame(seed: u64) -> Image {
        let raw = synthesize(seed, &SynthConfig { width: 128, height: 128, ..SynthConfig::default() }).unwrap();
        preprocess(&raw, &ClaheConfig::default()).unwrap()
    }

    fn harris() -> HarrisConfig {
        HarrisConfig { max_points: 40, ..HarrisConfig::default() }
    }

    #[test]
    fn identical_images_match_perfectly() {
        let m = ModelParams::<f32>::init(32, 1).unwrap();
        let img = frame(1);
        for kind in [FeatureKind::Global, FeatureKind::Visual] {
            let e = evaluate_pair(&m, &img, &img, &Homography::identity(), &harris(), DEFAULT_PE_THRESHOLD, kind).unwrap();
            assert_eq!(e.queries.len(), e.keypoints_a.len());
            assert_eq!(e.metrics.precision, Some(1.0));
            assert_eq!(e.metrics.recall, Some(1.0));
            assert_eq!(e.matching_score, 1.0);
            assert!(e.matches.matches.iter().all(|x| x.i == x.j && x.correct == Some(true)));
        }
    }

    #[test]
    fn aggregate_pools_counts() {
        let m = ModelParams::<f32>::init(32, 2).unwrap();
        let frames = [frame(2), frame(3)];
        let set = AugmentationSet::default();
        let pairs = held_out_pairs(&m, &frames, &set, &harris(), 4, FeatureKind::Global).unwrap();
        let agg = evaluate_held_out(&m, &frames, &set, &harris(), 4, FeatureKind::Global).unwrap();
        assert_eq!(agg.pairs, pairs.len());
        assert_eq!(agg.retrieved, pairs.iter().map(|p| p.metrics.retrieved).sum::<usize>());
        assert_eq!(agg.correct, pairs.iter().map(|p| p.metrics.correct).sum::<usize>());
        let mean_score = pairs.iter().map(|p| p.matching_score).sum::<f64>() / pairs.len() as f64;
        assert!((agg.matching_score().unwrap() - mean_score).abs() < 1e-12);
        assert_eq!(agg.precision(), Some(agg.correct as f64 / agg.retrieved as f64));
        assert_eq!(Aggregate::default().precision(), None);

        let curve = pooled_curve(&pairs, &[0.0, f64::INFINITY]).unwrap();
        assert_eq!(curve[0].one_minus_precision, None);
        assert!((curve[1].one_minus_precision.unwrap() - (1.0 - agg.precision().unwrap())).abs() < 1e-12);
        assert!((curve[1].recall.unwrap() - agg.recall().unwrap()).abs() < 1e-12);
        assert!(pooled_curve(&pairs, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn held_out_is_seeded() {
        let m = ModelParams::<f32>::init(32, 3).unwrap();
        let frames = [frame(5)];
        let set = AugmentationSet::default();
        let a = held_out_pairs(&m, &frames, &set, &harris(), 9, FeatureKind::Global).unwrap();
        let b = held_out_pairs(&m, &frames, &set, &harris(), 9, FeatureKind::Global).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn suites() {
        let set = AugmentationSet::default();
        let s = individual_suite(&set);
        assert_eq!(s.len(), 2 * 3 + 2 * 4 + 5 + MOTION_BLUR_SIZES.len());
        assert!(s.iter().any(|t| t.family() == "motion_blur"));
        let v = viewpoint_suite(1, 128, 128, 2).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(v, viewpoint_suite(1, 128, 128, 2).unwrap());
        for (k, t) in v.iter().enumerate() {
            let TestTransform::Homography(h) = t else { panic!("not a homography") };
            let limit = [4.0, 8.0, 12.0, 16.0][k / 2] * 2f64.sqrt() + 1e-6;
            assert!(h.corner_error(&Homography::identity(), 128, 128) <= limit);
            assert_eq!(t.family(), "viewpoint");
        }
    }

    #[test]
    fn transforms_report_their_geometry() {
        let img = frame(6);
        let (out, h) = TestTransform::Affine(Augmentation::Translation { dx: 4.0, dy: 0.0 }).apply(&img).unwrap();
        assert_eq!(h.apply(Point2::new(10.0, 10.0)), Point2::new(14.0, 10.0));
        assert!((out.at(20, 30) - img.at(16, 30)).abs() < 1e-6);
        let (_, h) = TestTransform::MotionBlur(5).apply(&img).unwrap();
        assert_eq!(h, Homography::identity());
        assert_eq!(TestTransform::MotionBlur(5).label(), "blur(5)");
    }
}
