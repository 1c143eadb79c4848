//! Planar (`C x H x W`) float images and the geometric helpers used by the
//! augmentation, detection and localisation code.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(channels * height * width, data.len(), "image buffer size mismatch");
        Self { channels, height, width, data }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width])
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

    pub fn same_shape(&self, other: &Image) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
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
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    pub fn is_unit_range(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Sub-image of size `h x w` with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Image {
        assert!(y + h <= self.height && x + w <= self.width, "crop out of bounds");
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for yy in y..y + h {
                let row = (c * self.height + yy) * self.width;
                data.extend_from_slice(&self.data[row + x..row + x + w]);
            }
        }
        Image::new(self.channels, h, w, data)
    }

    /// Writes `patch` into this image at `(y, x)`.
    pub fn paste(&mut self, patch: &Image, y: usize, x: usize) {
        assert_eq!(patch.channels, self.channels);
        for c in 0..self.channels {
            for yy in 0..patch.height {
                for xx in 0..patch.width {
                    self.set(c, y + yy, x + xx, patch.get(c, yy, xx));
                }
            }
        }
    }

    /// Bilinear resampling with half-pixel centres.
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Image {
        if h == self.height && w == self.width {
            return self.clone();
        }
        let sy = self.height as f32 / h as f32;
        let sx = self.width as f32 / w as f32;
        let mut out = Image::filled(self.channels, h, w, 0.0);
        for y in 0..h {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f32;
            for x in 0..w {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f32;
                for c in 0..self.channels {
                    let top = self.get(c, y0, x0) * (1.0 - tx) + self.get(c, y0, x1) * tx;
                    let bot = self.get(c, y1, x0) * (1.0 - tx) + self.get(c, y1, x1) * tx;
                    out.set(c, y, x, top * (1.0 - ty) + bot * ty);
                }
            }
        }
        out
    }

    /// Rotation by `quarter_turns * 90°` counter-clockwise on square images.
    pub fn rotate90(&self, quarter_turns: usize) -> Image {
        let turns = quarter_turns % 4;
        if turns == 0 {
            return self.clone();
        }
        assert_eq!(self.height, self.width, "rotation requires square images");
        let n = self.height;
        let mut out = self.clone();
        for c in 0..self.channels {
            for r in 0..n {
                for col in 0..n {
                    // CCW quarter turn sends (r, c) to (n-1-c, r).
                    let (dr, dc) = match turns {
                        1 => (n - 1 - col, r),
                        2 => (n - 1 - r, n - 1 - col),
                        _ => (col, n - 1 - r),
                    };
                    out.set(c, dr, dc, self.get(c, r, col));
                }
            }
        }
        out
    }

    /// Separable Gaussian blur with clamped borders. `kernel` must be odd.
    pub fn gaussian_blur(&self, sigma: f32, kernel: usize) -> Image {
        if kernel <= 1 || sigma <= 0.0 {
            return self.clone();
        }
        let r = (kernel / 2) as isize;
        let mut g: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
        let s: f32 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= s);
        let (h, w) = (self.height as isize, self.width as isize);
        let mut tmp = self.clone();
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let acc: f32 = g
                        .iter()
                        .enumerate()
                        .map(|(k, gk)| gk * self.get(c, y as usize, (x + k as isize - r).clamp(0, w - 1) as usize))
                        .sum();
                    tmp.set(c, y as usize, x as usize, acc);
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let acc: f32 = g
                        .iter()
                        .enumerate()
                        .map(|(k, gk)| gk * tmp.get(c, (y + k as isize - r).clamp(0, h - 1) as usize, x as usize))
                        .sum();
                    out.set(c, y as usize, x as usize, acc);
                }
            }
        }
        out
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Stacks images of identical shape into an `[N, C, H, W]` tensor.
    pub fn batch(images: &[&Image]) -> Tensor {
        assert!(!images.is_empty(), "empty image batch");
        let (c, h, w) = (images[0].channels, images[0].height, images[0].width);
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for im in images {
            assert!(im.same_shape(images[0]), "batch of mixed image shapes");
            data.extend_from_slice(&im.data);
        }
        Tensor::new(vec![images.len(), c, h, w], data)
    }

    /// Splits an `[N, C, H, W]` tensor back into images.
    pub fn unbatch(t: &Tensor) -> Vec<Image> {
        let (n, c, h, w) = t.dims4();
        (0..n).map(|i| Image::new(c, h, w, t.row(i).to_vec())).collect()
    }
}

/// Binary `H x W` mask (1 = lesion).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(height * width, data.len(), "mask buffer size mismatch");
        debug_assert!(data.iter().all(|&v| v <= 1));
        Self { height, width, data }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn resize_nearest(&self, h: usize, w: usize) -> Mask {
        let mut out = Mask::empty(h, w);
        for y in 0..h {
            let sy = (y * self.height) / h;
            for x in 0..w {
                let sx = (x * self.width) / w;
                out.set(y, x, self.get(sy, sx));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotate_ccw_index_mapping() {
        // [[a, b], [c, d]] -> [[b, d], [a, c]]
        let im = Image::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(im.rotate90(1).data(), &[2.0, 4.0, 1.0, 3.0]);
        assert_eq!(im.rotate90(1).rotate90(1), im.rotate90(2));
        assert_eq!(im.rotate90(4), im);
    }

    #[test]
    fn crop_paste_roundtrip() {
        let im = Image::new(2, 4, 4, (0..32).map(|v| v as f32 / 32.0).collect());
        let mut blank = Image::filled(2, 4, 4, 0.0);
        blank.paste(&im.crop(1, 2, 3, 2), 1, 2);
        assert_eq!(blank.get(1, 3, 3), im.get(1, 3, 3));
        assert_eq!(blank.get(0, 0, 0), 0.0);
    }

    #[test]
    fn bilinear_preserves_constants_and_identity() {
        let im = Image::filled(3, 10, 7, 0.25);
        let r = im.resize_bilinear(5, 12);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
        let ramp = Image::new(1, 2, 3, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]);
        assert_eq!(ramp.resize_bilinear(2, 3), ramp);
    }
}
