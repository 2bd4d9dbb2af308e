//! Random horizontal flips and rotations on rescaled images.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::ImageGrid;
use crate::error::{Error, Result};

/// Value written where a rotation samples outside the source image.
pub const FILL_VALUE: f32 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip_prob: f64,
    /// Rotation range as a fraction of a full turn: angles are drawn from
    /// `U(-factor · 2π, factor · 2π)`.
    pub rotation_factor: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotation_factor: 0.2,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if !(self.rotation_factor >= 0.0) {
            return Err(Error::config(format!(
                "rotation factor must be non-negative, got {}",
                self.rotation_factor
            )));
        }
        Ok(())
    }
}

pub fn flip_horizontal(img: &ImageGrid) -> ImageGrid {
    let mut data = Vec::with_capacity(img.data.len());
    for row in img.data.chunks(img.width) {
        data.extend(row.iter().rev());
    }
    ImageGrid {
        height: img.height,
        width: img.width,
        data,
    }
}

/// Rotates content counter-clockwise (as displayed, rows growing downward)
/// by `theta` radians about the image center, with bilinear resampling.
pub fn rotate(img: &ImageGrid, theta: f64, fill: f32) -> ImageGrid {
    if theta == 0.0 {
        return img.clone();
    }
    let (h, w) = (img.height, img.width);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (s, c) = theta.sin_cos();
    const SLACK: f64 = 1e-9;
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64 - cy, j as f64 - cx);
            let sx = c * x - s * y + cx;
            let sy = s * x + c * y + cy;
            let inside = (-SLACK..=(w as f64 - 1.0 + SLACK)).contains(&sx)
                && (-SLACK..=(h as f64 - 1.0 + SLACK)).contains(&sy);
            if !inside {
                data.push(fill);
                continue;
            }
            let sx = sx.clamp(0.0, w as f64 - 1.0);
            let sy = sy.clamp(0.0, h as f64 - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let p = |r: usize, cc: usize| f64::from(img.get(r, cc));
            let top = (1.0 - fx) * p(y0, x0) + fx * p(y0, x1);
            let bottom = (1.0 - fx) * p(y1, x0) + fx * p(y1, x1);
            data.push(((1.0 - fy) * top + fy * bottom) as f32);
        }
    }
    ImageGrid {
        height: h,
        width: w,
        data,
    }
}

/// Deterministic augmentation with explicit choices: optional mirror, then
/// rotation by `theta`.
pub fn augment_with(img: &ImageGrid, flip: bool, theta: f64) -> ImageGrid {
    let base = if flip { flip_horizontal(img) } else { img.clone() };
    rotate(&base, theta, FILL_VALUE)
}

/// Draws a flip decision and a rotation angle from `rng` and applies them.
/// Both draws always happen, so the stream position does not depend on the
/// outcome.
pub fn augment<R: Rng + ?Sized>(img: &ImageGrid, rng: &mut R, params: &AugmentParams) -> Result<ImageGrid> {
    params.validate()?;
    let flip = rng.random::<f64>() < params.flip_prob;
    let span = params.rotation_factor * 2.0 * PI;
    let u: f64 = rng.random();
    let theta = (2.0 * u - 1.0) * span;
    Ok(augment_with(img, flip, theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ImageGrid {
        ImageGrid::new(3, 4, (0..12).map(|i| i as f32 / 6.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn zero_angle_without_flip_is_identity() {
        let img = sample();
        assert_eq!(augment_with(&img, false, 0.0), img);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = sample();
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        assert_ne!(flip_horizontal(&img), img);
    }

    #[test]
    fn quarter_turn_permutes_2x2() {
        // [[a, b], [c, d]] rotated a quarter turn counter-clockwise is
        // [[b, d], [a, c]].
        let img = ImageGrid::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let out = rotate(&img, PI / 2.0, FILL_VALUE);
        let want = [0.2, 0.4, 0.1, 0.3];
        for (g, w) in out.data.iter().zip(want) {
            assert!((g - w).abs() < 1e-6, "{:?}", out.data);
        }
    }

    #[test]
    fn negative_factor_is_rejected() {
        let params = AugmentParams {
            flip_prob: 0.5,
            rotation_factor: -0.1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(augment(&sample(), &mut rng, &params), Err(Error::Config(_))));
    }

    #[test]
    fn rng_determines_outcome() {
        let img = sample();
        let params = AugmentParams::default();
        let a = augment(&img, &mut ChaCha8Rng::seed_from_u64(5), &params).unwrap();
        let b = augment(&img, &mut ChaCha8Rng::seed_from_u64(5), &params).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn augmented_values_stay_in_range(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
            let img = ImageGrid::new(8, 8, data).unwrap();
            let out = augment(&img, &mut rng, &AugmentParams::default()).unwrap();
            prop_assert!(out.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
