//! Seeded two-class toy dataset: soft round blobs versus oriented stripes.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::Gray8;
use crate::error::{Error, Result};

pub const BLOB_CLASS: &str = "blob";
pub const STRIPE_CLASS: &str = "stripe";

#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub series_per_class: usize,
    pub slices_per_series: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            series_per_class: 20,
            slices_per_series: 4,
            size: 32,
            seed: 0,
        }
    }
}

fn noise(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-12.0..12.0)
}

pub fn blob_slice(size: usize, rng: &mut ChaCha8Rng) -> Gray8 {
    let s = size as f64;
    let cy = s / 2.0 + rng.random_range(-0.15..0.15) * s;
    let cx = s / 2.0 + rng.random_range(-0.15..0.15) * s;
    let radius = rng.random_range(0.15..0.28) * s;
    let mut px = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
            let v = 30.0 + 200.0 * (-d2 / (2.0 * radius * radius)).exp() + noise(rng);
            px.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Gray8::new(size, size, px).expect("square image")
}

pub fn stripe_slice(size: usize, rng: &mut ChaCha8Rng) -> Gray8 {
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let period = rng.random_range(5.0..9.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (sa, ca) = angle.sin_cos();
    let mut px = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let t = (j as f64 * ca + i as f64 * sa) * std::f64::consts::TAU / period + phase;
            let v = 130.0 + 100.0 * t.sin() + noise(rng);
            px.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Gray8::new(size, size, px).expect("square image")
}

/// Writes `root/<class>/<class>_<nnn>/slice_<nn>.pgm`.
pub fn write_dataset(root: &Path, spec: &SyntheticSpec) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for class in [BLOB_CLASS, STRIPE_CLASS] {
        for s in 0..spec.series_per_class {
            let dir = root.join(class).join(format!("{class}_{s:03}"));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for k in 0..spec.slices_per_series {
                let img = if class == BLOB_CLASS {
                    blob_slice(spec.size, &mut rng)
                } else {
                    stripe_slice(spec.size, &mut rng)
                };
                img.write_pgm(&dir.join(format!("slice_{k:02}.pgm")))?;
            }
        }
    }
    Ok(())
}
