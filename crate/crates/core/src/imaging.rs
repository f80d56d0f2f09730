//! Image preparation: grayscale conversion, CLAHE, affine warps, motion
//! blur and patch extraction.
//!
//! Intensities are `f32` in `[0, 1]`, pixel centres sit on integer
//! coordinates, and channels are interleaved row-major.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{param_err, Result};
use crate::geometry::{AffineTransform, Point2};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(param_err!("image extents must be positive, got {width}x{height}"));
        }
        if channels != 1 && channels != 3 {
            return Err(param_err!("images have 1 or 3 channels, got {channels}"));
        }
        if pixels.len() != width * height * channels {
            return Err(param_err!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                pixels.len()
            ));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(param_err!("intensity {v} outside [0, 1]"));
        }
        Ok(Self { width, height, channels, pixels })
    }

    /// Single-channel image filled with `value`.
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, channels: 1, pixels: vec![value.clamp(0.0, 1.0); width * height] }
    }

    /// Builds a grayscale image from a function of `(x, y)`; outputs are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self { width, height, channels: 1, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Grayscale value; only meaningful for single-channel images.
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Bilinear sample of channel `c`. Neighbours outside the image
    /// contribute zero; samples beyond the outer pixel centres are zero.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> f32 {
        const SLACK: f64 = 1e-9;
        let (wmax, hmax) = ((self.width - 1) as f64, (self.height - 1) as f64);
        if !(x >= -SLACK && y >= -SLACK && x <= wmax + SLACK && y <= hmax + SLACK) {
            return 0.0;
        }
        let x = x.clamp(0.0, wmax);
        let y = y.clamp(0.0, hmax);
        let x0 = libm::floor(x) as usize;
        let y0 = libm::floor(y) as usize;
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        if fx == 0.0 && fy == 0.0 {
            return self.get(x0, y0, c);
        }
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let top = self.get(x0, y0, c) * (1.0 - fx) + self.get(x1, y0, c) * fx;
        let bottom = self.get(x0, y1, c) * (1.0 - fx) + self.get(x1, y1, c) * fx;
        (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
    }
}

/// Luminance `0.299 R + 0.587 G + 0.114 B`.
pub fn to_grayscale(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(param_err!("grayscale conversion needs 3 channels, got {}", img.channels));
    }
    let pixels = img
        .pixels
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
        .collect();
    Ok(Image { width: img.width, height: img.height, channels: 1, pixels })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClaheConfig {
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Histogram clip limit as a multiple of the mean bin count.
    pub clip_limit: f64,
}

impl Default for ClaheConfig {
    fn default() -> Self {
        Self { tiles_x: 8, tiles_y: 8, clip_limit: 2.0 }
    }
}

const HIST_BINS: usize = 256;

#[inline]
fn intensity_bin(v: f32) -> usize {
    libm::roundf(v.clamp(0.0, 1.0) * 255.0) as usize
}

/// Equalisation lookup table for one clipped histogram.
///
/// Excess above the clip level is spread evenly over all bins; the mapping
/// is `(cdf(b) - cdf_min) / (total - cdf_min)`. A histogram whose mass sits
/// in a single unclipped bin maps to identity.
fn equalization_lut(hist: &[f64; HIST_BINS], clip: Option<f64>) -> [f32; HIST_BINS] {
    let mut h = *hist;
    if let Some(clip) = clip {
        let mut excess = 0.0;
        for v in h.iter_mut() {
            if *v > clip {
                excess += *v - clip;
                *v = clip;
            }
        }
        let share = excess / HIST_BINS as f64;
        for v in h.iter_mut() {
            *v += share;
        }
    }
    let total: f64 = h.iter().sum();
    let cdf_min = h.iter().copied().find(|&v| v > 0.0).unwrap_or(0.0);
    let denom = total - cdf_min;
    let mut lut = [0.0f32; HIST_BINS];
    if denom <= total * 1e-12 {
        for (b, l) in lut.iter_mut().enumerate() {
            *l = b as f32 / 255.0;
        }
        return lut;
    }
    let mut cdf = 0.0;
    for (b, l) in lut.iter_mut().enumerate() {
        cdf += h[b];
        *l = ((cdf - cdf_min) / denom).clamp(0.0, 1.0) as f32;
    }
    lut
}

/// Contrast-limited adaptive histogram equalisation of a grayscale image.
///
/// Each tile gets a clipped-histogram equalisation table; every pixel blends
/// the tables of the four nearest tile centres bilinearly.
pub fn clahe(img: &Image, cfg: &ClaheConfig) -> Result<Image> {
    if img.channels != 1 {
        return Err(param_err!("CLAHE expects a grayscale image"));
    }
    if cfg.tiles_x == 0 || cfg.tiles_y == 0 {
        return Err(param_err!("tile grid must be at least 1x1"));
    }
    if !(cfg.clip_limit > 0.0) {
        return Err(param_err!("clip limit must be positive, got {}", cfg.clip_limit));
    }
    if img.width < cfg.tiles_x || img.height < cfg.tiles_y {
        return Err(param_err!(
            "{}x{} image is smaller than the {}x{} tile grid",
            img.width,
            img.height,
            cfg.tiles_x,
            cfg.tiles_y
        ));
    }
    let xb: Vec<usize> = (0..=cfg.tiles_x).map(|t| t * img.width / cfg.tiles_x).collect();
    let yb: Vec<usize> = (0..=cfg.tiles_y).map(|t| t * img.height / cfg.tiles_y).collect();
    let mut luts = Vec::with_capacity(cfg.tiles_x * cfg.tiles_y);
    for ty in 0..cfg.tiles_y {
        for tx in 0..cfg.tiles_x {
            let mut hist = [0.0f64; HIST_BINS];
            for y in yb[ty]..yb[ty + 1] {
                for x in xb[tx]..xb[tx + 1] {
                    hist[intensity_bin(img.at(x, y))] += 1.0;
                }
            }
            let area = ((xb[tx + 1] - xb[tx]) * (yb[ty + 1] - yb[ty])) as f64;
            let clip = (cfg.clip_limit * area / HIST_BINS as f64).max(1.0);
            luts.push(equalization_lut(&hist, Some(clip)));
        }
    }
    let cx: Vec<f64> = (0..cfg.tiles_x).map(|t| (xb[t] + xb[t + 1]) as f64 / 2.0 - 0.5).collect();
    let cy: Vec<f64> = (0..cfg.tiles_y).map(|t| (yb[t] + yb[t + 1]) as f64 / 2.0 - 0.5).collect();
    let mut out = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        let (ty0, ty1, wy) = interpolation_cell(&cy, y as f64);
        for x in 0..img.width {
            let (tx0, tx1, wx) = interpolation_cell(&cx, x as f64);
            let b = intensity_bin(img.at(x, y));
            let l = |tx: usize, ty: usize| luts[ty * cfg.tiles_x + tx][b] as f64;
            let top = l(tx0, ty0) * (1.0 - wx) + l(tx1, ty0) * wx;
            let bottom = l(tx0, ty1) * (1.0 - wx) + l(tx1, ty1) * wx;
            out.push(((top * (1.0 - wy) + bottom * wy) as f32).clamp(0.0, 1.0));
        }
    }
    Ok(Image { width: img.width, height: img.height, channels: 1, pixels: out })
}

/// Neighbouring tile indices and the weight of the second one.
fn interpolation_cell(centres: &[f64], v: f64) -> (usize, usize, f64) {
    let last = centres.len() - 1;
    if v <= centres[0] {
        return (0, 0, 0.0);
    }
    if v >= centres[last] {
        return (last, last, 0.0);
    }
    let i = centres.iter().rposition(|&c| c <= v).unwrap_or(0);
    let w = (v - centres[i]) / (centres[i + 1] - centres[i]);
    (i, i + 1, w)
}

/// Inverse-mapping warp: output pixel `q` takes the bilinear sample of the
/// input at `T⁻¹(q)`, so content at `p` moves to `T(p)`.
pub fn warp_affine(img: &Image, t: &AffineTransform) -> Result<Image> {
    let inv = t.inverse()?;
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        for x in 0..img.width {
            let src = inv.apply(Point2::new(x as f64, y as f64));
            for c in 0..img.channels {
                pixels.push(img.sample_bilinear(src.x, src.y, c));
            }
        }
    }
    Ok(Image { width: img.width, height: img.height, channels: img.channels, pixels })
}

/// Default motion-blur kernel lengths.
pub const MOTION_BLUR_SIZES: [usize; 4] = [3, 5, 10, 15];

/// Horizontal motion blur with a normalised line kernel of `kernel_size` taps.
///
/// Taps cover offsets `-(k-1)/2 ..= k/2`; borders replicate edge pixels.
pub fn motion_blur(img: &Image, kernel_size: usize) -> Result<Image> {
    if kernel_size == 0 || kernel_size > img.width {
        return Err(param_err!("kernel size {kernel_size} invalid for image width {}", img.width));
    }
    let lo = (kernel_size as isize - 1) / 2;
    let hi = kernel_size as isize / 2;
    let norm = 1.0 / kernel_size as f32;
    let last = img.width as isize - 1;
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        for x in 0..img.width as isize {
            for c in 0..img.channels {
                let mut acc = 0.0f32;
                for o in -lo..=hi {
                    let xs = (x + o).clamp(0, last) as usize;
                    acc += img.get(xs, y, c);
                }
                pixels.push((acc * norm).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Image { width: img.width, height: img.height, channels: img.channels, pixels })
}

/// Square grayscale window centred on a key-point.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub side: usize,
    pub pixels: Vec<f32>,
    pub center: Point2,
}

pub const DEFAULT_PATCH_SIDE: usize = 128;

/// Top-left corner of the `side`-wide window centred on `center`, or `None`
/// if the window leaves the image.
pub fn patch_origin(width: usize, height: usize, center: Point2, side: usize) -> Option<(usize, usize)> {
    if !center.x.is_finite() || !center.y.is_finite() {
        return None;
    }
    let half = (side / 2) as i64;
    let x0 = libm::round(center.x) as i64 - half;
    let y0 = libm::round(center.y) as i64 - half;
    let fits = x0 >= 0 && y0 >= 0 && x0 + side as i64 <= width as i64 && y0 + side as i64 <= height as i64;
    fits.then_some((x0 as usize, y0 as usize))
}

/// Extracts the `side x side` window around `center` (rounded to the
/// nearest pixel); `None` when the window does not fit inside the image.
pub fn extract_patch(img: &Image, center: Point2, side: usize) -> Option<Patch> {
    if img.channels != 1 || side == 0 || side % 2 != 0 {
        return None;
    }
    let (x0, y0) = patch_origin(img.width, img.height, center, side)?;
    let mut pixels = Vec::with_capacity(side * side);
    for y in y0..y0 + side {
        pixels.extend_from_slice(&img.pixels[y * img.width + x0..][..side]);
    }
    Some(Patch { side, pixels, center })
}

/// Grayscale conversion (for colour input) followed by CLAHE.
pub fn preprocess(img: &Image, cfg: &ClaheConfig) -> Result<Image> {
    if img.channels == 3 {
        clahe(&to_grayscale(img)?, cfg)
    } else {
        clahe(img, cfg)
    }
}
