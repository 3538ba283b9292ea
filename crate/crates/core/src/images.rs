//! Pixel loading: procedural class patterns and image files, resized and
//! normalized to the model's input grid.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::ImageSource;
use crate::error::{Error, Result};

/// Height x width x channels, normalized.
pub type Pixels = Array3<f64>;

pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

pub fn normalize(x: f64) -> f64 {
    (x - PIXEL_MEAN) / PIXEL_STD
}

/// Hue-spread base color for a class; consecutive classes sit far apart on
/// the color wheel.
fn class_color(class: u32) -> [f64; 3] {
    let hue = (class as f64 * 0.618_033_988_75).fract();
    let h = hue * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// A colored sinusoidal grating. Class fixes orientation, frequency and
/// color; the instance seed jitters phase and orientation slightly and adds
/// pixel noise.
pub fn render_synthetic(class: u32, seed: u64, size: usize, channels: usize) -> Pixels {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = (class as f64 * 0.382) * PI + rng.random_range(-0.08..0.08);
    let freq = 1.0 + (class % 3) as f64;
    let phase = rng.random_range(0.0..2.0 * PI);
    let color = class_color(class);
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let (c, s) = (theta.cos(), theta.sin());
    Array3::from_shape_fn((size, size, channels), |(y, x, k)| {
        let u = (x as f64 * c + y as f64 * s) / size as f64;
        let wave = 0.5 + 0.5 * (2.0 * PI * freq * u + phase).sin();
        let base = if channels == 3 { color[k] } else { color.iter().sum::<f64>() / 3.0 };
        let v = 0.15 + 0.7 * base * (0.4 + 0.6 * wave);
        normalize((v + noise.sample(&mut rng)).clamp(0.0, 1.0))
    })
}

/// Reads an image file, resizes it to `size` x `size` and normalizes it.
pub fn load_file(path: &Path, size: usize, channels: usize) -> Result<Pixels> {
    let img = image::open(path).map_err(|e| Error::Manifest(format!("cannot read {}: {e}", path.display())))?;
    let img = img.resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle);
    match channels {
        3 => {
            let rgb = img.to_rgb8();
            Ok(Array3::from_shape_fn((size, size, 3), |(y, x, k)| {
                normalize(rgb.get_pixel(x as u32, y as u32)[k] as f64 / 255.0)
            }))
        }
        1 => {
            let gray = img.to_luma8();
            Ok(Array3::from_shape_fn((size, size, 1), |(y, x, _)| {
                normalize(gray.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
            }))
        }
        n => Err(Error::Contract(format!("unsupported channel count {n}"))),
    }
}

/// Resolves an image source; relative paths are taken against `base`.
pub fn load(source: &ImageSource, base: Option<&Path>, size: usize, channels: usize) -> Result<Pixels> {
    match source {
        ImageSource::Synthetic { class, seed } => Ok(render_synthetic(*class, *seed, size, channels)),
        ImageSource::Uri(uri) => {
            let path = Path::new(uri.strip_prefix("file://").unwrap_or(uri));
            match base {
                Some(b) if path.is_relative() => load_file(&b.join(path), size, channels),
                _ => load_file(path, size, channels),
            }
        }
    }
}
