//! Procedural 32×32 training images and 8-bit image files.
//!
//! Images are `[3, H, W]` tensors in `[-1, 1]`; files map an 8-bit value `v`
//! to `v / 127.5 − 1` and back with round-to-nearest.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{invalid, Error, Result};
use crate::nets::IMAGE_SIZE;
use crate::rng::Rng;
use crate::tensor::Tensor;

type Rgb = [f32; 3];

fn random_color(rng: &mut Rng) -> Rgb {
    [rng.uniform() as f32, rng.uniform() as f32, rng.uniform() as f32]
}

/// Bilinearly interpolated value noise on a `cells × cells` lattice, one
/// lattice per channel, values in `[0, 1]`.
fn value_noise(size: usize, cells: usize, rng: &mut Rng) -> Vec<[f32; 3]> {
    let n = cells + 1;
    let lattice: Vec<Rgb> = (0..n * n).map(|_| random_color(rng)).collect();
    let mut out = vec![[0.0; 3]; size * size];
    for y in 0..size {
        let fy = y as f32 / (size - 1) as f32 * cells as f32;
        let y0 = (fy.floor() as usize).min(cells - 1);
        let ty = fy - y0 as f32;
        for x in 0..size {
            let fx = x as f32 / (size - 1) as f32 * cells as f32;
            let x0 = (fx.floor() as usize).min(cells - 1);
            let tx = fx - x0 as f32;
            let (a, b, c, d) = (
                lattice[y0 * n + x0],
                lattice[y0 * n + x0 + 1],
                lattice[(y0 + 1) * n + x0],
                lattice[(y0 + 1) * n + x0 + 1],
            );
            for ch in 0..3 {
                let top = a[ch] + (b[ch] - a[ch]) * tx;
                let bot = c[ch] + (d[ch] - c[ch]) * tx;
                out[y * size + x][ch] = top + (bot - top) * ty;
            }
        }
    }
    out
}

/// One procedural image: a flat, gradient or value-noise background with one
/// to four rectangles, ellipses or stripe patches on top.
pub fn procedural_image(rng: &mut Rng) -> Tensor {
    let s = IMAGE_SIZE;
    let mut px: Vec<Rgb> = match rng.below(3) {
        0 => vec![random_color(rng); s * s],
        1 => {
            let (a, b) = (random_color(rng), random_color(rng));
            let horizontal = rng.bit();
            (0..s * s)
                .map(|i| {
                    let t = if horizontal { i % s } else { i / s } as f32 / (s - 1) as f32;
                    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
                })
                .collect()
        }
        _ => {
            let cells = 2 + rng.below(4);
            value_noise(s, cells, rng)
        }
    };
    let shapes = 1 + rng.below(4);
    for _ in 0..shapes {
        let color = random_color(rng);
        let cx = rng.uniform_range(0.0, s as f32);
        let cy = rng.uniform_range(0.0, s as f32);
        let rx = rng.uniform_range(3.0, s as f32 / 2.5);
        let ry = rng.uniform_range(3.0, s as f32 / 2.5);
        let kind = rng.below(3);
        let (other, period, vertical) = (random_color(rng), 2 + rng.below(5), rng.bit());
        for y in 0..s {
            for x in 0..s {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let inside = match kind {
                    0 | 2 => dx.abs() <= rx && dy.abs() <= ry,
                    _ => (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0,
                };
                if !inside {
                    continue;
                }
                px[y * s + x] = if kind == 2 {
                    let coord = if vertical { x } else { y };
                    if (coord / period) % 2 == 0 {
                        color
                    } else {
                        other
                    }
                } else {
                    color
                };
            }
        }
    }
    let mut data = vec![0.0f32; 3 * s * s];
    for (i, p) in px.iter().enumerate() {
        for c in 0..3 {
            data[c * s * s + i] = p[c] * 2.0 - 1.0;
        }
    }
    Tensor::new(&[3, s, s], data).unwrap()
}

/// `n` procedural images from one seeded stream.
pub fn procedural_corpus(n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| procedural_image(&mut rng)).collect()
}

/// Maps `[-1, 1]` to 8-bit, clamping and rounding to nearest.
pub fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Interleaved RGB bytes of a `[3, H, W]` image.
pub fn to_rgb8(img: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (c, h, w) = img.chw()?;
    if c != 3 {
        return Err(invalid(format!("expected 3 channels, got {c}")));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            out.push(to_u8(d[ch * h * w + i]));
        }
    }
    Ok((h, w, out))
}

pub fn from_rgb8(h: usize, w: usize, bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() != 3 * h * w {
        return Err(invalid("RGB buffer length does not match dimensions"));
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + i] = from_u8(bytes[3 * i + ch]);
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Snaps an image to the 8-bit grid, as if written and read back.
pub fn quantize(img: &Tensor) -> Tensor {
    img.map(|v| from_u8(to_u8(v)))
}

fn image_err(e: image::ImageError) -> Error {
    Error::Image(e.to_string())
}

/// Writes PNG, or binary PPM when the extension is `.ppm`.
pub fn save_image(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, bytes) = to_rgb8(img)?;
    let is_ppm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        out.extend_from_slice(&bytes);
        fs::write(path, out)?;
        return Ok(());
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png).map_err(image_err)
}

/// Reads PNG or PPM into `[3, H, W]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path.as_ref()).map_err(image_err)?.to_rgb8();
    let (w, h) = img.dimensions();
    from_rgb8(h as usize, w as usize, img.as_raw())
}

/// All `.png`/`.ppm` files in a directory, sorted by name.
pub fn image_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("ppm"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every 32×32 image in a directory.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    for f in image_files(dir)? {
        let img = load_image(&f)?;
        if img.shape() != [3, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(invalid(format!(
                "{} is {:?}, expected 3x{IMAGE_SIZE}x{IMAGE_SIZE}",
                f.display(),
                img.shape()
            )));
        }
        out.push(img);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn procedural_images_are_in_range_and_seeded() {
        let a = procedural_corpus(20, 3);
        let b = procedural_corpus(20, 3);
        assert_eq!(a, b);
        for img in &a {
            assert_eq!(img.shape(), [3, 32, 32]);
            assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert_ne!(procedural_corpus(1, 4), procedural_corpus(1, 3));
    }

    #[test]
    fn u8_mapping_round_trips() {
        for v in 0..=255u8 {
            assert_eq!(to_u8(from_u8(v)), v);
        }
        assert_eq!(to_u8(-1.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(5.0), 255);
    }

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = quantize(&procedural_image(&mut Rng::new(9)));
        for name in ["a.png", "b.ppm"] {
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            assert_eq!(load_image(&p).unwrap(), img);
        }
        assert_eq!(load_corpus(dir.path()).unwrap().len(), 2);
    }
}
