//! Image files: PNG and binary PGM, intensities as byte / 255.

use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{DynamicImage, GrayImage, ImageFormat};
use kpgraph_core::imaging::Image;

pub fn image_from_dynamic(img: DynamicImage) -> Result<Image> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let out = match img {
        DynamicImage::ImageLuma8(g) => Image::new(w, h, 1, g.into_raw().into_iter().map(to_unit).collect()),
        DynamicImage::ImageLuma16(g) => {
            Image::new(w, h, 1, g.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect())
        }
        other if other.color().has_color() => {
            Image::new(w, h, 3, other.to_rgb8().into_raw().into_iter().map(to_unit).collect())
        }
        other => Image::new(w, h, 1, other.to_luma8().into_raw().into_iter().map(to_unit).collect()),
    };
    Ok(out?)
}

fn to_unit(v: u8) -> f32 {
    v as f32 / 255.0
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::ImageReader::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .with_guessed_format()?
        .decode()
        .with_context(|| format!("decoding {}", path.display()))?;
    image_from_dynamic(img)
}

/// Writes PNG or PGM depending on the extension (PNG otherwise).
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let bytes: Vec<u8> = img.pixels().iter().map(|&v| to_byte(v)).collect();
    let pgm = matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm") | Some("pnm")
    );
    if pgm {
        if img.channels() != 1 {
            bail!("PGM output needs a grayscale image");
        }
        return write_pgm(path, img);
    }
    let dynamic = match img.channels() {
        1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("buffer size")),
        3 => DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, bytes).expect("buffer size")),
        c => bail!("cannot write {c}-channel image"),
    };
    dynamic.save_with_format(path, ImageFormat::Png).with_context(|| format!("writing {}", path.display()))
}

/// Binary P5 with maxval 255.
fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    buf.extend(img.pixels().iter().map(|&v| to_byte(v)));
    std::fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

pub fn is_image_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png") | Some("pgm")
    )
}


#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        Image::from_fn(17, 9, |x, y| ((x * 9 + y) % 256) as f32 / 255.0)
    }

    #[test]
    fn png_and_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = ramp();
        for name in ["a.png", "a.pgm", "b.PGM"] {
            let path = dir.path().join(name);
            write_image(&path, &img).unwrap();
            assert_eq!(read_image(&path).unwrap(), img, "{name}");
        }
        let raw = std::fs::read(dir.path().join("a.pgm")).unwrap();
        assert!(raw.starts_with(b"P5\n17 9\n255\n"));
        assert_eq!(raw.len(), 12 + 17 * 9);
    }

    #[test]
    fn values_are_rounded_to_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        write_image(&path, &Image::new(3, 1, 1, vec![0.001, 0.5, 0.999]).unwrap()).unwrap();
        assert_eq!(read_image(&path).unwrap().pixels(), &[0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn color_images() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Image::new(2, 1, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let path = dir.path().join("rgb.png");
        write_image(&path, &rgb).unwrap();
        assert_eq!(read_image(&path).unwrap(), rgb);
        assert!(write_image(&dir.path().join("rgb.pgm"), &rgb).is_err());
    }

    #[test]
    fn extensions() {
        assert!(is_image_path(Path::new("x/f.PNG")));
        assert!(is_image_path(Path::new("f.pgm")));
        assert!(!is_image_path(Path::new("f.jpg")));
        assert!(!is_image_path(Path::new("png")));
    }
}
