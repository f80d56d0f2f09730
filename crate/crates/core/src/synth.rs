//! Synthetic vessel-like frames standing in for endoscopic images.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::imaging::Image;
use crate::nn::standard_normal;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Strokes per 64x64 block of image area.
    pub vessel_density: f64,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { width: 256, height: 256, vessel_density: 1.0, noise_std: 0.01 }
    }
}

pub const MIN_SYNTH_SIDE: usize = 64;

/// Smooth background, dark cubic-Bezier strokes of width 1 to 4 px, and
/// Gaussian noise. Deterministic in `seed`.
pub fn generate_synthetic_frame(seed: u64, size: (usize, usize), vessel_density: f64) -> Result<Image> {
    synthesize(seed, &SynthConfig { width: size.0, height: size.1, vessel_density, ..SynthConfig::default() })
}

pub fn synthesize(seed: u64, cfg: &SynthConfig) -> Result<Image> {
    let (w, h) = (cfg.width, cfg.height);
    if w < MIN_SYNTH_SIDE || h < MIN_SYNTH_SIDE {
        return Err(param_err!("synthetic frames need at least {MIN_SYNTH_SIDE}x{MIN_SYNTH_SIDE}, got {w}x{h}"));
    }
    if !(cfg.vessel_density >= 0.0) || !cfg.vessel_density.is_finite() || !(cfg.noise_std >= 0.0) {
        return Err(param_err!("invalid density {} or noise {}", cfg.vessel_density, cfg.noise_std));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (w as f64, h as f64);

    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            let fx = rng.random_range(-1.5..1.5);
            let fy = rng.random_range(-1.5..1.5);
            [fx, fy, rng.random_range(0.0..core::f64::consts::TAU), rng.random_range(0.03..0.07)]
        })
        .collect();
    let base = rng.random_range(0.5..0.65);
    let mut img = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut v = base;
            for [fx, fy, ph, amp] in &waves {
                v += amp * libm::cos(core::f64::consts::TAU * (fx * x as f64 / wf + fy * y as f64 / hf) + ph);
            }
            img[y * w + x] = v;
        }
    }

    let strokes = libm::round(cfg.vessel_density * wf * hf / 4096.0) as usize;
    let mut shade = vec![0.0f64; w * h];
    for _ in 0..strokes {
        let start = (rng.random_range(-0.1 * wf..1.1 * wf), rng.random_range(-0.1 * hf..1.1 * hf));
        let reach = 0.45 * wf.min(hf);
        let mut ctrl = [start; 4];
        for k in 1..4 {
            let (px, py) = ctrl[k - 1];
            ctrl[k] = (px + rng.random_range(-reach..reach), py + rng.random_range(-reach..reach));
        }
        let w0 = rng.random_range(1.0..4.0);
        let w1 = rng.random_range(1.0..4.0);
        let depth = rng.random_range(0.2..0.5);
        let length: f64 = ctrl.windows(2).map(|s| libm::hypot(s[1].0 - s[0].0, s[1].1 - s[0].1)).sum();
        let steps = libm::ceil(2.0 * length).max(2.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let (bx, by) = bezier(&ctrl, t);
            let radius = 0.5 * (w0 + (w1 - w0) * t);
            stamp_disc(&mut shade, w, h, bx, by, radius, depth);
        }
    }

    let pixels = img
        .iter()
        .zip(&shade)
        .map(|(&b, &s)| {
            let n = if cfg.noise_std > 0.0 { cfg.noise_std * standard_normal(&mut rng) } else { 0.0 };
            (b * (1.0 - s) + n).clamp(0.0, 1.0) as f32
        })
        .collect();
    Image::new(w, h, 1, pixels)
}

fn bezier(c: &[(f64, f64); 4], t: f64) -> (f64, f64) {
    let u = 1.0 - t;
    let (a, b, cc, d) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
    (
        a * c[0].0 + b * c[1].0 + cc * c[2].0 + d * c[3].0,
        a * c[0].1 + b * c[1].1 + cc * c[2].1 + d * c[3].1,
    )
}

/// Darkens a soft-edged disc; overlapping stamps keep the strongest shade.
fn stamp_disc(shade: &mut [f64], w: usize, h: usize, cx: f64, cy: f64, radius: f64, depth: f64) {
    let r = radius + 1.0;
    let (x0, x1) = (libm::floor(cx - r).max(0.0), libm::ceil(cx + r).min(w as f64 - 1.0));
    let (y0, y1) = (libm::floor(cy - r).max(0.0), libm::ceil(cy + r).min(h as f64 - 1.0));
    if x0 > x1 || y0 > y1 {
        return;
    }
    for y in y0 as usize..=y1 as usize {
        for x in x0 as usize..=x1 as usize {
            let d = libm::hypot(x as f64 - cx, y as f64 - cy);
            let cover = (radius + 0.5 - d).clamp(0.0, 1.0);
            let v = &mut shade[y * w + x];
            *v = v.max(cover * depth);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{detect_corners, HarrisConfig};
    use crate::imaging::{preprocess, ClaheConfig};

    #[test]
    fn deterministic_in_seed() {
        let cfg = SynthConfig { width: 96, height: 80, ..SynthConfig::default() };
        assert_eq!(synthesize(5, &cfg).unwrap(), synthesize(5, &cfg).unwrap());
        assert_ne!(synthesize(5, &cfg).unwrap(), synthesize(6, &cfg).unwrap());
    }

    #[test]
    fn default_frame() {
        let img = synthesize(0, &SynthConfig::default()).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (256, 256, 1));
        assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        let pre = preprocess(&img, &ClaheConfig::default()).unwrap();
        let kps = detect_corners(&pre, &HarrisConfig { patch_side: 32, ..HarrisConfig::default() });
        assert!(kps.len() > 30, "{}", kps.len());
    }

    #[test]
    fn no_vessels_few_corners() {
        let img = generate_synthetic_frame(1, (256, 256), 0.0).unwrap();
        let pre = preprocess(&img, &ClaheConfig::default()).unwrap();
        let kps = detect_corners(&pre, &HarrisConfig { patch_side: 32, ..HarrisConfig::default() });
        assert!(kps.len() < 10, "{}", kps.len());
    }

    #[test]
    fn vessels_darken() {
        let plain = generate_synthetic_frame(2, (128, 128), 0.0).unwrap();
        let dense = generate_synthetic_frame(2, (128, 128), 3.0).unwrap();
        let mean = |i: &Image| i.pixels().iter().map(|&v| v as f64).sum::<f64>() / i.pixels().len() as f64;
        assert!(mean(&dense) < mean(&plain) - 0.01);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate_synthetic_frame(0, (32, 256), 1.0).is_err());
        assert!(generate_synthetic_frame(0, (256, 256), -1.0).is_err());
        assert!(generate_synthetic_frame(0, (256, 256), f64::INFINITY).is_err());
        assert!(synthesize(0, &SynthConfig { noise_std: -0.1, ..SynthConfig::default() }).is_err());
    }
}
