//! Frame directories: per-sequence subdirectories split into training and
//! validation by sequence.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kpgraph_core::imaging::Image;
use kpgraph_core::mosaic::Homography;
use kpgraph_core::synth::{synthesize, SynthConfig};
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::formats::write_homographies;
use crate::io::{is_image_path, read_image, write_image};

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    /// Lexicographically ordered frame files.
    pub frames: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
    /// Indices into `sequences`.
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Share of sequences held out for validation (5 of 21).
pub const VALIDATION_SHARE: f64 = 5.0 / 21.0;

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_path(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Every subdirectory with image files is a sequence; loose images in the
/// root form one more sequence named `.`.
pub fn load_dataset(root: &Path, split_seed: u64) -> Result<Dataset> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .with_context(|| format!("reading dataset root {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut sequences = Vec::new();
    let loose = image_files(root)?;
    if !loose.is_empty() {
        sequences.push(Sequence { name: ".".into(), frames: loose });
    }
    for d in dirs {
        let frames = image_files(&d)?;
        if !frames.is_empty() {
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            sequences.push(Sequence { name, frames });
        }
    }
    if sequences.is_empty() {
        bail!("no image frames found under {}", root.display());
    }
    let n = sequences.len();
    let n_val = if n < 2 { 0 } else { ((n as f64 * VALIDATION_SHARE).round() as usize).clamp(1, n - 1) };
    if n_val == 0 {
        warn!("only one sequence in {}; validation split is empty", root.display());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let mut validation = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    validation.sort_unstable();
    train.sort_unstable();
    Ok(Dataset { sequences, train, validation })
}

impl Dataset {
    pub fn frames_of(&self, split: &[usize]) -> Vec<PathBuf> {
        split.iter().flat_map(|&s| self.sequences[s].frames.iter().cloned()).collect()
    }

    pub fn all_frames(&self) -> Vec<PathBuf> {
        self.sequences.iter().flat_map(|s| s.frames.iter().cloned()).collect()
    }
}

/// Reads frames, skipping unreadable files with a warning.
pub fn read_frames(paths: &[PathBuf]) -> Vec<(PathBuf, Image)> {
    paths
        .iter()
        .filter_map(|p| match read_image(p) {
            Ok(img) => Some((p.clone(), img)),
            Err(e) => {
                warn!("skipping {}: {e:#}", p.display());
                None
            }
        })
        .collect()
}

/// Seed of synthetic frame `index` in a set generated from `seed`.
pub fn frame_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// In-memory synthetic frames, frame `k` seeded by [`frame_seed`].
pub fn synthetic_frames(frames: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<Image>> {
    (0..frames).map(|k| Ok(synthesize(frame_seed(seed, k), cfg)?)).collect()
}

/// Writes `frames` synthetic frames as `seq_XXX/frame_YYYY.png`.
pub fn write_synthetic_dataset(out: &Path, frames: usize, seed: u64, per_sequence: usize, cfg: &SynthConfig) -> Result<Vec<PathBuf>> {
    let per_sequence = per_sequence.max(1);
    let mut written = Vec::with_capacity(frames);
    for k in 0..frames {
        let dir = out.join(format!("seq_{:03}", k / per_sequence));
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("frame_{:04}.png", k % per_sequence));
        write_image(&path, &synthesize(frame_seed(seed, k), cfg)?)?;
        written.push(path);
    }
    Ok(written)
}

/// Crops of one large synthetic scene, frame `k` offset by `k * (dx, dy)`.
/// Returns the frames and the maps taking frame `k+1` into frame `k`.
pub fn translation_sequence(frames: usize, seed: u64, step: (i64, i64), cfg: &SynthConfig) -> Result<(Vec<Image>, Vec<Homography>)> {
    if frames == 0 {
        bail!("sequence needs at least one frame");
    }
    let span = |s: i64| s.unsigned_abs() as usize * (frames - 1);
    let scene_cfg = SynthConfig { width: cfg.width + span(step.0), height: cfg.height + span(step.1), ..*cfg };
    let scene = synthesize(seed, &scene_cfg)?;
    let origin = |k: usize, s: i64| if s >= 0 { k as i64 * s } else { span(s) as i64 + k as i64 * s };
    let mut imgs = Vec::with_capacity(frames);
    for k in 0..frames {
        let (ox, oy) = (origin(k, step.0) as usize, origin(k, step.1) as usize);
        imgs.push(Image::from_fn(cfg.width, cfg.height, |x, y| scene.at(ox + x, oy + y)));
    }
    let maps = (1..frames).map(|_| Homography::translation(step.0 as f64, step.1 as f64)).collect();
    Ok((imgs, maps))
}

/// Writes a translation sequence as `frame_YYYY.png` plus `homographies.csv`.
pub fn write_translation_sequence(out: &Path, frames: usize, seed: u64, step: (i64, i64), cfg: &SynthConfig) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let (imgs, maps) = translation_sequence(frames, seed, step, cfg)?;
    for (k, img) in imgs.iter().enumerate() {
        write_image(&out.join(format!("frame_{k:04}.png")), img)?;
    }
    write_homographies(&out.join("homographies.csv"), &maps)
}
