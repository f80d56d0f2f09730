//! Two-image matching and sequence mosaicking.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kpgraph_core::detector::{detect_corners, ground_truth_matches, HarrisConfig, Keypoint, DEFAULT_PE_THRESHOLD};
use kpgraph_core::eval::{describe_keypoints, FeatureKind};
use kpgraph_core::geometry::Point2;
use kpgraph_core::imaging::{preprocess, to_grayscale, ClaheConfig, Image};
use kpgraph_core::matcher::{match_nn, match_nnt, MatchSet};
use kpgraph_core::model::ModelParams;
use kpgraph_core::mosaic::{composite_panorama, ransac_homography, CompositeConfig, Homography, Panorama, RansacConfig};
use log::info;

use crate::formats::{match_records, MatchRecord};
use crate::io::{is_image_path, read_image};

#[derive(Debug, Clone)]
pub struct ImageMatches {
    pub keypoints_a: Vec<Keypoint>,
    pub keypoints_b: Vec<Keypoint>,
    pub matches: MatchSet,
}

impl ImageMatches {
    pub fn records(&self) -> Vec<MatchRecord> {
        let pa: Vec<Point2> = self.keypoints_a.iter().map(|k| k.position).collect();
        let pb: Vec<Point2> = self.keypoints_b.iter().map(|k| k.position).collect();
        match_records(&self.matches, &pa, &pb)
    }

    /// Matched position pairs `(p_a, p_b)`.
    pub fn point_pairs(&self) -> Vec<(Point2, Point2)> {
        self.matches
            .matches
            .iter()
            .map(|m| (self.keypoints_a[m.i].position, self.keypoints_b[m.j].position))
            .collect()
    }
}

/// Detects, describes and matches two preprocessed images. Without a
/// threshold every key-point of `a` gets its nearest neighbour. With
/// `truth` (mapping `a` into `b`), matches are annotated.
pub fn match_prepared(
    model: &ModelParams<f32>,
    img_a: &Image,
    img_b: &Image,
    harris: &HarrisConfig,
    threshold: Option<f64>,
    truth: Option<&Homography>,
) -> Result<ImageMatches> {
    let harris = HarrisConfig { patch_side: model.patch_side(), ..*harris };
    let keypoints_a = detect_corners(img_a, &harris);
    let keypoints_b = detect_corners(img_b, &harris);
    if keypoints_a.is_empty() || keypoints_b.is_empty() {
        bail!("no key-points ({} in a, {} in b)", keypoints_a.len(), keypoints_b.len());
    }
    let fa = describe_keypoints(model, img_a, &keypoints_a, FeatureKind::Global)?;
    let fb = describe_keypoints(model, img_b, &keypoints_b, FeatureKind::Global)?;
    let mut matches = match threshold {
        Some(t) => match_nnt(&fa, &fb, t)?,
        None => match_nn(&fa, &fb)?,
    };
    if let Some(h) = truth {
        matches.annotate(&ground_truth_matches(&keypoints_a, &keypoints_b, h, DEFAULT_PE_THRESHOLD));
    }
    Ok(ImageMatches { keypoints_a, keypoints_b, matches })
}

/// As [`match_prepared`] on raw images.
pub fn match_images(
    model: &ModelParams<f32>,
    img_a: &Image,
    img_b: &Image,
    harris: &HarrisConfig,
    threshold: Option<f64>,
    truth: Option<&Homography>,
) -> Result<ImageMatches> {
    let clahe = ClaheConfig::default();
    match_prepared(model, &preprocess(img_a, &clahe)?, &preprocess(img_b, &clahe)?, harris, threshold, truth)
}

/// Image files of a sequence directory in name order.
pub fn sequence_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_path(p))
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_sequence(dir: &Path) -> Result<Vec<Image>> {
    let files = sequence_files(dir)?;
    if files.is_empty() {
        bail!("no PNG or PGM frames in {}", dir.display());
    }
    files.iter().map(|p| read_image(p)).collect()
}

/// Maps taking frame `k+1` into frame `k`, from nearest-neighbour matches
/// and RANSAC.
pub fn estimate_pairwise(
    model: &ModelParams<f32>,
    frames: &[Image],
    harris: &HarrisConfig,
    ransac: &RansacConfig,
) -> Result<Vec<Homography>> {
    let clahe = ClaheConfig::default();
    let prepared = frames.iter().map(|f| preprocess(f, &clahe)).collect::<kpgraph_core::Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(frames.len().saturating_sub(1));
    for k in 1..prepared.len() {
        let m = match_prepared(model, &prepared[k], &prepared[k - 1], harris, None, None)?;
        let h = ransac_homography(&m.point_pairs(), ransac).with_context(|| format!("frames {} -> {}", k, k - 1))?;
        info!("frame {k} -> {}: {} of {} matches are inliers", k - 1, h.inliers.len(), m.matches.len());
        out.push(h);
    }
    Ok(out)
}

/// Registers a sequence and blends its grayscale frames into frame 0
/// coordinates.
pub fn mosaic_sequence(
    model: &ModelParams<f32>,
    frames: &[Image],
    harris: &HarrisConfig,
    ransac: &RansacConfig,
) -> Result<(Panorama, Vec<Homography>)> {
    let pairwise = estimate_pairwise(model, frames, harris, ransac)?;
    let gray = frames
        .iter()
        .map(|f| if f.channels() == 1 { Ok(f.clone()) } else { to_grayscale(f) })
        .collect::<kpgraph_core::Result<Vec<_>>>()?;
    let pano = composite_panorama(&gray, &pairwise, &CompositeConfig::default())?;
    Ok((pano, pairwise))
}
