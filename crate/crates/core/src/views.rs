//! Random augmentations and the paired graph views built from them.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::Keypoint;
use crate::error::{contract_err, param_err, Result};
use crate::geometry::{AffineTransform, Point2};
use crate::imaging::{extract_patch, warp_affine, Image, Patch};

/// Transformation families and their parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSet {
    pub rotations_deg: Vec<f64>,
    pub translations_px: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Default for AugmentationSet {
    fn default() -> Self {
        Self {
            rotations_deg: alloc::vec![5.0, 10.0, 15.0],
            translations_px: alloc::vec![4.0, 6.0, 8.0, 10.0],
            scales: alloc::vec![0.9, 0.95, 1.05, 1.1, 1.15],
        }
    }
}

impl AugmentationSet {
    pub fn validate(&self) -> Result<()> {
        if self.rotations_deg.is_empty() || self.translations_px.is_empty() || self.scales.is_empty() {
            return Err(param_err!("augmentation lists must be nonempty"));
        }
        if self.scales.iter().any(|&s| !(s > 0.0)) {
            return Err(param_err!("scales must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Augmentation {
    Rotation { degrees: f64 },
    Translation { dx: f64, dy: f64 },
    Scale { factor: f64 },
}

impl Augmentation {
    /// The transform about the centre of a `width x height` image.
    pub fn transform(&self, width: usize, height: usize) -> AffineTransform {
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        match *self {
            Augmentation::Rotation { degrees } => AffineTransform::rotation_about(degrees, cx, cy),
            Augmentation::Translation { dx, dy } => AffineTransform::translation(dx, dy),
            Augmentation::Scale { factor } => AffineTransform::scale_about(factor, cx, cy),
        }
    }
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Augmentation::Rotation { degrees } => write!(f, "rotate({degrees})"),
            Augmentation::Translation { dx, dy } => write!(f, "translate({dx};{dy})"),
            Augmentation::Scale { factor } => write!(f, "scale({factor})"),
        }
    }
}

fn pick<R: Rng + ?Sized>(rng: &mut R, values: &[f64]) -> f64 {
    values[rng.random_range(0..values.len())]
}

fn sign<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// One family uniformly, then one value uniformly. Rotation angles and
/// translation offsets also get a random sign; translations draw each axis
/// independently.
pub fn sample_augmentation<R: Rng + ?Sized>(rng: &mut R, set: &AugmentationSet) -> Result<Augmentation> {
    set.validate()?;
    Ok(match rng.random_range(0..3u8) {
        0 => {
            let a = pick(rng, &set.rotations_deg);
            Augmentation::Rotation { degrees: a * sign(rng) }
        }
        1 => {
            let dx = pick(rng, &set.translations_px) * sign(rng);
            let dy = pick(rng, &set.translations_px) * sign(rng);
            Augmentation::Translation { dx, dy }
        }
        _ => Augmentation::Scale { factor: pick(rng, &set.scales) },
    })
}

/// The original and augmented views of one frame. Node `i` of both views is
/// the same key-point, at `p_i` and `T(p_i)` respectively.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphViews {
    pub positions: Vec<Point2>,
    pub patches: Vec<Patch>,
    pub augmented_positions: Vec<Point2>,
    pub augmented_patches: Vec<Patch>,
    /// Index of each surviving node in the input key-point list.
    pub source_indices: Vec<usize>,
    pub image_size: (usize, usize),
}

impl GraphViews {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Builds both views from a preprocessed frame and its key-points. Nodes
/// whose patch does not fit in either image are dropped from both.
pub fn build_graph_views(frame: &Image, keypoints: &[Keypoint], t: &AffineTransform, patch_side: usize) -> Result<GraphViews> {
    let warped = warp_affine(frame, t)?;
    let mut v = GraphViews {
        positions: Vec::new(),
        patches: Vec::new(),
        augmented_positions: Vec::new(),
        augmented_patches: Vec::new(),
        source_indices: Vec::new(),
        image_size: (frame.width(), frame.height()),
    };
    for (k, kp) in keypoints.iter().enumerate() {
        let p = kp.position;
        let q = t.apply(p);
        let (Some(a), Some(b)) = (extract_patch(frame, p, patch_side), extract_patch(&warped, q, patch_side)) else {
            continue;
        };
        v.positions.push(p);
        v.patches.push(a);
        v.augmented_positions.push(q);
        v.augmented_patches.push(b);
        v.source_indices.push(k);
    }
    if v.len() < 2 {
        return Err(contract_err!("only {} nodes survive the augmentation", v.len()));
    }
    Ok(v)
}

/// Short human-readable summary used in diagnostics.
pub fn describe_views(v: &GraphViews) -> String {
    alloc::format!("{} nodes in a {}x{} frame", v.len(), v.image_size.0, v.image_size.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthesize, SynthConfig};
    use crate::testutil::rng;
    use proptest::prelude::*;

    fn frame() -> Image {
        synthesize(3, &SynthConfig { width: 128, height: 128, ..SynthConfig::default() }).unwrap()
    }

    fn kp(x: f64, y: f64) -> Keypoint {
        Keypoint { position: Point2::new(x, y), response: 1.0 }
    }

    #[test]
    fn identity_views_coincide() {
        let kps = [kp(40.0, 40.0), kp(70.0, 90.0), kp(64.0, 64.0)];
        let v = build_graph_views(&frame(), &kps, &AffineTransform::identity(), 32).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.positions, v.augmented_positions);
        assert_eq!(v.patches, v.augmented_patches);
        assert_eq!(v.source_indices, [0, 1, 2]);
        assert_eq!(v.image_size, (128, 128));
    }

    #[test]
    fn translation_moves_nodes_and_drops_border() {
        let kps = [kp(40.0, 40.0), kp(110.0, 60.0), kp(64.0, 64.0)];
        let t = Augmentation::Translation { dx: 10.0, dy: 0.0 }.transform(128, 128);
        let v = build_graph_views(&frame(), &kps, &t, 32).unwrap();
        assert_eq!(v.source_indices, [0, 2]);
        for (p, q) in v.positions.iter().zip(&v.augmented_positions) {
            assert_eq!((q.x - p.x, q.y - p.y), (10.0, 0.0));
        }
        for (a, b) in v.patches.iter().zip(&v.augmented_patches) {
            let diff = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
            assert!(diff < 1e-6);
        }
    }

    #[test]
    fn too_few_nodes() {
        let t = AffineTransform::identity();
        assert!(build_graph_views(&frame(), &[kp(64.0, 64.0)], &t, 32).is_err());
        assert!(build_graph_views(&frame(), &[kp(2.0, 2.0), kp(120.0, 3.0)], &t, 32).is_err());
    }

    #[test]
    fn augmentation_transforms() {
        let r = Augmentation::Rotation { degrees: 90.0 }.transform(101, 101);
        let c = r.apply(Point2::new(50.0, 50.0));
        assert!((c.x - 50.0).abs() < 1e-12 && (c.y - 50.0).abs() < 1e-12);
        let s = Augmentation::Scale { factor: 2.0 }.transform(101, 101);
        let p = s.apply(Point2::new(60.0, 50.0));
        assert!((p.x - 70.0).abs() < 1e-12);
        assert_eq!(alloc::format!("{}", Augmentation::Scale { factor: 1.1 }), "scale(1.1)");
    }

    #[test]
    fn set_validation() {
        let mut s = AugmentationSet::default();
        assert!(s.validate().is_ok());
        s.scales = alloc::vec![0.0];
        assert!(s.validate().is_err());
        s.scales.clear();
        assert!(sample_augmentation(&mut rng(0), &s).is_err());
    }

    #[test]
    fn every_family_is_drawn() {
        let set = AugmentationSet::default();
        let mut r = rng(1);
        let mut seen = [false; 3];
        for _ in 0..100 {
            match sample_augmentation(&mut r, &set).unwrap() {
                Augmentation::Rotation { .. } => seen[0] = true,
                Augmentation::Translation { .. } => seen[1] = true,
                Augmentation::Scale { .. } => seen[2] = true,
            }
        }
        assert_eq!(seen, [true; 3]);
    }

    proptest! {
        #[test]
        fn samples_come_from_the_sets(seed in any::<u64>()) {
            let set = AugmentationSet::default();
            match sample_augmentation(&mut rng(seed), &set).unwrap() {
                Augmentation::Rotation { degrees } => prop_assert!(set.rotations_deg.contains(&degrees.abs())),
                Augmentation::Translation { dx, dy } => {
                    prop_assert!(set.translations_px.contains(&dx.abs()));
                    prop_assert!(set.translations_px.contains(&dy.abs()));
                }
                Augmentation::Scale { factor } => prop_assert!(set.scales.contains(&factor)),
            }
        }
    }
}
