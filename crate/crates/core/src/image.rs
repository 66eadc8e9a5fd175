//! Planar float images and the resampling primitives shared by the
//! preprocessing and augmentation code.

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

/// How pixels outside the source image are filled when a window crosses the
/// border.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PaddingPolicy {
    #[default]
    ZeroPad,
    Clamp,
}

/// Channel-major (`C × H × W`) `f32` image.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FloatImage {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FloatImage {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "buffer size mismatch");
        FloatImage {
            channels,
            height,
            width,
            data,
        }
    }

    /// Scales 8-bit RGB to `[0, 1]`.
    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut out = FloatImage::zeros(3, h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.data[(c * h + y as usize) * w + x as usize] = f32::from(px[c]) / 255.0;
            }
        }
        out
    }

    /// Inverse of [`FloatImage::from_rgb8`], rounding and saturating.
    pub fn to_rgb8(&self) -> RgbImage {
        assert_eq!(self.channels, 3);
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let f = self.get(c, y as usize, x as usize);
                *v = (f * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            image::Rgb(px)
        })
    }

    pub fn from_gray8(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
        FloatImage::from_vec(1, h as usize, w as usize, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Bilinear resize with half-pixel centres (`align_corners = false`).
    /// When shrinking an axis the triangle kernel widens by the scale
    /// factor, so every input pixel contributes (antialiased bilinear).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> FloatImage {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let ys = axis_taps(self.height, out_h);
        let xs = axis_taps(self.width, out_w);
        let mut out = FloatImage::zeros(self.channels, out_h, out_w);
        let mut rows = vec![0.0f32; self.height * out_w];
        for c in 0..self.channels {
            let src = self.plane(c);
            for y in 0..self.height {
                let r = &src[y * self.width..(y + 1) * self.width];
                for (ox, taps) in xs.iter().enumerate() {
                    rows[y * out_w + ox] = taps.iter().map(|&(i, w)| r[i] * w).sum();
                }
            }
            let dst = &mut out.data[c * out_h * out_w..(c + 1) * out_h * out_w];
            for (oy, taps) in ys.iter().enumerate() {
                for ox in 0..out_w {
                    dst[oy * out_w + ox] = taps.iter().map(|&(i, w)| rows[i * out_w + ox] * w).sum();
                }
            }
        }
        out
    }

    /// Extracts the `w × h` window whose top-left corner is `(x0, y0)`;
    /// the window may extend past the border.
    pub fn crop(&self, x0: i64, y0: i64, w: usize, h: usize, policy: PaddingPolicy) -> FloatImage {
        let mut out = FloatImage::zeros(self.channels, h, w);
        let (sw, sh) = (self.width as i64, self.height as i64);
        for c in 0..self.channels {
            for oy in 0..h {
                let sy = y0 + oy as i64;
                for ox in 0..w {
                    let sx = x0 + ox as i64;
                    let inside = (0..sw).contains(&sx) && (0..sh).contains(&sy);
                    let v = match (inside, policy) {
                        (true, _) => self.get(c, sy as usize, sx as usize),
                        (false, PaddingPolicy::ZeroPad) => 0.0,
                        (false, PaddingPolicy::Clamp) => self.get(
                            c,
                            sy.clamp(0, sh - 1) as usize,
                            sx.clamp(0, sw - 1) as usize,
                        ),
                    };
                    out.set(c, oy, ox, v);
                }
            }
        }
        out
    }

    pub fn hflip(&self) -> FloatImage {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len().max(1) as f64
    }
}

/// Source indices and weights for every output position along one axis.
fn axis_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            if scale <= 1.0 {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                let f = pos - i0 as f64;
                return vec![(i0, (1.0 - f) as f32), (i1, f as f32)];
            }
            let centre = (o as f64 + 0.5) * scale;
            let lo = (centre - scale).floor().max(0.0) as usize;
            let hi = ((centre + scale).ceil() as usize).min(src);
            let mut taps: Vec<(usize, f64)> = (lo..hi)
                .map(|i| (i, (1.0 - ((i as f64 + 0.5 - centre) / scale).abs()).max(0.0)))
                .filter(|&(_, w)| w > 0.0)
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps.into_iter().map(|(i, w)| (i, w as f32)).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_is_noop() {
        let img = FloatImage::from_vec(1, 2, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(img.resize_bilinear(2, 3), img);
    }

    #[test]
    fn constant_stays_constant_under_resize() {
        let img = FloatImage::from_vec(2, 5, 7, vec![0.25; 70]);
        let out = img.resize_bilinear(13, 4);
        assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn upsample_by_two_interpolates_midpoints() {
        let img = FloatImage::from_vec(1, 1, 2, vec![0.0, 1.0]);
        let out = img.resize_bilinear(1, 4);
        // Half-pixel centres: sample positions -0.25, 0.25, 0.75, 1.25.
        assert_eq!(out.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn halving_uses_a_widened_triangle() {
        let img = FloatImage::from_vec(1, 1, 8, vec![0.0, 0.0, 0.0, 8.0, 0.0, 0.0, 0.0, 0.0]);
        let out = img.resize_bilinear(1, 4);
        // Weights 1/8, 3/8, 3/8, 1/8 around each output centre.
        assert_eq!(out.data(), &[0.0, 3.0, 1.0, 0.0]);
    }

    #[test]
    fn shrinking_keeps_an_isolated_pixel() {
        for pos in 0..12 {
            let mut data = vec![0.0; 12];
            data[pos] = 1.0;
            let out = FloatImage::from_vec(1, 1, 12, data).resize_bilinear(1, 4);
            assert!(out.data().iter().any(|&v| v > 0.2), "pixel {pos} lost");
        }
    }

    #[test]
    fn crop_padding_policies() {
        let img = FloatImage::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let z = img.crop(-1, -1, 3, 3, PaddingPolicy::ZeroPad);
        assert_eq!(z.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);
        let c = img.crop(-1, -1, 3, 3, PaddingPolicy::Clamp);
        assert_eq!(c.data(), &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0, 3.0, 3.0, 4.0]);
    }

    #[test]
    fn rgb8_round_trip() {
        let img = RgbImage::from_fn(4, 3, |x, y| image::Rgb([x as u8 * 60, y as u8 * 80, 7]));
        assert_eq!(FloatImage::from_rgb8(&img).to_rgb8(), img);
    }
}
