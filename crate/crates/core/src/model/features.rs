use crate::autodiff::Mode;
use crate::data::image::{Gray8, ImageGrid};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::Model;

/// Tiles a `C×H×W` feature map into one grayscale image, one tile per
/// channel in row-major order on a grid `ceil(sqrt(C))` tiles wide.
///
/// Each channel is min-max normalized to `[0, 255]` on its own; a constant
/// channel becomes an all-zero tile, as do unused grid cells.
pub fn feature_grid(channels: usize, height: usize, width: usize, data: &[f32]) -> Result<Gray8> {
    if channels == 0 || data.len() != channels * height * width {
        return Err(Error::dim(format!(
            "feature map of {} values is not {channels}×{height}×{width}",
            data.len()
        )));
    }
    let cols = (channels as f64).sqrt().ceil() as usize;
    let rows = channels.div_ceil(cols);
    let (gw, gh) = (cols * width, rows * height);
    let mut pixels = vec![0u8; gw * gh];
    let plane = height * width;
    for (c, map) in data.chunks(plane).enumerate() {
        let (lo, hi) = map
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let (tr, tc) = (c / cols, c % cols);
        for i in 0..height {
            for j in 0..width {
                let v = map[i * width + j];
                let level = if hi > lo {
                    ((f64::from(v) - f64::from(lo)) / (f64::from(hi) - f64::from(lo)) * 255.0).round() as u8
                } else {
                    0
                };
                pixels[(tr * height + i) * gw + tc * width + j] = level;
            }
        }
    }
    Gray8::new(gh, gw, pixels)
}

/// Captures the fused (post-addition) map for one preprocessed image.
pub fn export_features<T: Scalar>(model: &Model<T>, image: &ImageGrid) -> Result<Gray8> {
    let cfg = model.config();
    let batch = Tensor::new(
        vec![1, cfg.input_channels, image.height, image.width],
        image.data.iter().map(|&v| T::of(f64::from(v))).collect(),
    )?;
    let pass = model.forward(batch, Mode::Infer)?;
    let fused = pass.graph.value(pass.fused);
    let (_, c, h, w) = fused.dims4("fused map")?;
    let data: Vec<f32> = fused.data().iter().map(|v| v.as_f64() as f32).collect();
    feature_grid(c, h, w, &data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_layout_uses_ceil_sqrt_columns() {
        let (c, h, w) = (5, 2, 3);
        let data: Vec<f32> = (0..c * h * w).map(|i| i as f32).collect();
        let grid = feature_grid(c, h, w, &data).unwrap();
        // ceil(sqrt(5)) = 3 columns, 2 rows.
        assert_eq!((grid.width, grid.height), (3 * w, 2 * h));
        // Channel 4 sits at tile (1, 1); its normalized max is 255.
        assert_eq!(grid.pixels[(h + h - 1) * grid.width + w + w - 1], 255);
        assert_eq!(grid.pixels[h * grid.width + w], 0);
        // The unused sixth tile is zero.
        assert!(grid.pixels[h * grid.width + 2 * w..h * grid.width + 3 * w].iter().all(|&p| p == 0));
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let grid = feature_grid(1, 2, 2, &[3.5; 4]).unwrap();
        assert_eq!(grid.pixels, vec![0; 4]);
    }

    #[test]
    fn square_channel_counts() {
        let grid = feature_grid(16, 4, 4, &vec![1.0; 256]).unwrap();
        assert_eq!((grid.width, grid.height), (16, 16));
    }
}
