//! Segmentation samples: the synthetic lesion generator and the on-disk
//! `images/<id>.pgm`, `masks/<id>.pgm` layout.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Tensor};

use super::pgm::{read_image_pgm, read_mask_pgm, write_image_pgm, write_mask_pgm};

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: String,
    /// `[1, H, W]`, values in [0, 1].
    pub image: Tensor,
    /// `[1, H, W]`, values in {0, 1}.
    pub mask: Tensor,
}

/// A rotated ellipse in pixel coordinates; pixel `(row, col)` is sampled at
/// its centre `(col + 0.5, row + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along the rotated x direction.
    pub a: f64,
    pub b: f64,
    /// Rotation in radians.
    pub theta: f64,
    /// Brightness added over the background.
    pub intensity: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }

    pub fn contains_pixel(&self, row: usize, col: usize) -> bool {
        self.contains(col as f64 + 0.5, row as f64 + 0.5)
    }
}

/// A generated sample together with the ellipses that define its mask.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub sample: SegSample,
    pub ellipses: Vec<Ellipse>,
}

const NOISE_STD: f64 = 0.04;

/// `n` dark, noisy `size x size` images with 1-3 brighter elliptical
/// lesions each. Intensities are quantised to multiples of 1/255 so that a
/// PGM round trip is lossless.
pub fn generate_synthetic(n: usize, size: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    if n == 0 || size < 16 {
        return Err(Error::invalid(format!(
            "synthetic dataset needs n >= 1 and size >= 16, got n={n} size={size}"
        )));
    }
    let mut rng = seeded_rng(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let s = size as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let count = rng.random_range(1..=3);
        let ellipses: Vec<Ellipse> = (0..count)
            .map(|_| Ellipse {
                cx: rng.random_range(0.2 * s..0.8 * s),
                cy: rng.random_range(0.2 * s..0.8 * s),
                a: rng.random_range(0.05 * s..0.15 * s),
                b: rng.random_range(0.05 * s..0.15 * s),
                theta: rng.random_range(0.0..std::f64::consts::PI),
                intensity: rng.random_range(0.4..0.75),
            })
            .collect();
        let background = rng.random_range(0.05..0.2);
        let mut image = vec![0.0; size * size];
        let mut mask = vec![0.0; size * size];
        for row in 0..size {
            for col in 0..size {
                let lesion = ellipses
                    .iter()
                    .filter(|e| e.contains_pixel(row, col))
                    .map(|e| e.intensity)
                    .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
                let v = background + noise.sample(&mut rng) + lesion.unwrap_or(0.0);
                image[row * size + col] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                mask[row * size + col] = if lesion.is_some() { 1.0 } else { 0.0 };
            }
        }
        out.push(SyntheticSample {
            sample: SegSample {
                id: format!("sample_{i:04}"),
                image: Tensor::new(&[1, size, size], image)?,
                mask: Tensor::new(&[1, size, size], mask)?,
            },
            ellipses,
        });
    }
    Ok(out)
}

pub fn generate_synthetic_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<SegSample>> {
    Ok(generate_synthetic(n, size, seed)?.into_iter().map(|s| s.sample).collect())
}

/// Share of foreground pixels over all masks.
pub fn foreground_fraction(samples: &[SegSample]) -> f64 {
    let (fg, total) = samples
        .iter()
        .fold((0.0, 0usize), |(f, t), s| (f + s.mask.sum(), t + s.mask.numel()));
    if total == 0 {
        0.0
    } else {
        fg / total as f64
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(dir: &Path, samples: &[SegSample]) -> Result<()> {
    let (images, masks) = (dir.join("images"), dir.join("masks"));
    create_dir(&images)?;
    create_dir(&masks)?;
    for s in samples {
        write_image_pgm(&s.image, &images.join(format!("{}.pgm", s.id)))?;
        write_mask_pgm(&s.mask, &masks.join(format!("{}.pgm", s.id)))?;
    }
    Ok(())
}

/// Load every `images/<id>.pgm` with its `masks/<id>.pgm`, sorted by id.
pub fn load_dataset(dir: &Path) -> Result<Vec<SegSample>> {
    let images = dir.join("images");
    let entries = std::fs::read_dir(&images).map_err(|e| Error::io(&images, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&images, e))?.path();
        if path.extension().is_some_and(|x| x == "pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    if ids.is_empty() {
        return Err(Error::invalid(format!("no .pgm images in {}", images.display())));
    }
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let image = read_image_pgm(&images.join(format!("{id}.pgm")))?;
            let mask_path = dir.join("masks").join(format!("{id}.pgm"));
            let mask = read_mask_pgm(&mask_path)?;
            if image.shape() != mask.shape() {
                return Err(Error::shape(format!(
                    "{id}: image {:?} and mask {:?} differ",
                    image.shape(),
                    mask.shape()
                )));
            }
            Ok(SegSample { id, image, mask })
        })
        .collect()
}

/// Stack samples into `[N, 1, H, W]` image and mask batches.
pub fn stack(samples: &[&SegSample]) -> Result<(Tensor, Tensor)> {
    let as_batch = |t: &Tensor| {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.reshape(&shape)
    };
    let images = samples.iter().map(|s| as_batch(&s.image)).collect::<Result<Vec<_>>>()?;
    let masks = samples.iter().map(|s| as_batch(&s.mask)).collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack_batch(&images)?, Tensor::stack_batch(&masks)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic_dataset(3, 32, 5).unwrap();
        let b = generate_synthetic_dataset(3, 32, 5).unwrap();
        let c = generate_synthetic_dataset(3, 32, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn masks_match_their_ellipses() {
        for s in generate_synthetic(10, 32, 1).unwrap() {
            let m = s.sample.mask.data();
            for row in 0..32 {
                for col in 0..32 {
                    let inside = s.ellipses.iter().any(|e| e.contains_pixel(row, col));
                    assert_eq!(m[row * 32 + col] == 1.0, inside);
                }
            }
            assert!((1..=3).contains(&s.ellipses.len()));
        }
    }

    #[test]
    fn foreground_fraction_in_range() {
        let f = foreground_fraction(&generate_synthetic_dataset(100, 64, 0).unwrap());
        assert!(f > 0.005 && f < 0.30, "{f}");
    }

    #[test]
    fn disk_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_synthetic_dataset(4, 16, 2).unwrap();
        save_dataset(dir.path(), &data).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), data);
    }

    #[test]
    fn rejects_degenerate_requests() {
        assert!(generate_synthetic(0, 32, 0).is_err());
        assert!(generate_synthetic(1, 8, 0).is_err());
    }
}
