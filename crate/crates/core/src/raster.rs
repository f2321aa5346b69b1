//! Small raster helpers shared by the codec, the denoisers and the metrics.

use image::RgbImage;
use ndarray::{Array3, ArrayView3};

/// Channel-first planes with values `v / 255`.
pub fn rgb_to_planes(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        f32::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    })
}

/// Inverse of [`rgb_to_planes`], rounding and clamping to 8 bits.
pub fn planes_to_rgb(planes: ArrayView3<f32>) -> RgbImage {
    let (_, h, w) = planes.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (planes[[c, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Overlap of `[a0, a1)` and `[b0, b1)`.
pub fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Box-filter resampling: every output cell is the area-weighted mean of the
/// source cells it covers.
pub fn area_resize(src: ArrayView3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.to_owned();
    }
    let weights = |n_src: usize, n_out: usize| -> Vec<Vec<(usize, f64)>> {
        let step = n_src as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let (lo, hi) = (o as f64 * step, (o + 1) as f64 * step);
                (lo.floor() as usize..(hi.ceil() as usize).min(n_src))
                    .map(|s| (s, overlap(lo, hi, s as f64, s as f64 + 1.0) / step))
                    .filter(|(_, wt)| *wt > 0.0)
                    .collect()
            })
            .collect()
    };
    let wy = weights(h, out_h);
    let wx = weights(w, out_w);
    Array3::from_shape_fn((c, out_h, out_w), |(ch, oy, ox)| {
        let mut acc = 0.0f64;
        for &(sy, fy) in &wy[oy] {
            for &(sx, fx) in &wx[ox] {
                acc += fy * fx * f64::from(src[[ch, sy, sx]]);
            }
        }
        acc as f32
    })
}
