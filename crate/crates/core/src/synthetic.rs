//! Deterministic procedural dataset: smooth sinusoidal textures as normal
//! images, with a blended square (or disc) injected into abnormal ones.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ImageSample, Label};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyShape {
    Square,
    Disc,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub channels: usize,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_abnormal: usize,
    /// Inclusive side-length range of the injected anomaly, in pixels.
    pub anomaly_size_range: (usize, usize),
    /// Blend weight of the anomaly colour, in `(0, 1]`.
    pub anomaly_contrast: f32,
    pub anomaly_shape: AnomalyShape,
    /// Abnormal test images are split into this many contiguous groups (at
    /// most one per image).
    pub n_groups: usize,
    pub texture_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            n_train: 200,
            n_test_normal: 50,
            n_test_abnormal: 50,
            anomaly_size_range: (8, 16),
            anomaly_contrast: 0.8,
            anomaly_shape: AnomalyShape::Square,
            n_groups: 5,
            texture_seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.anomaly_size_range;
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size {} is too small", self.image_size)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if lo == 0 || lo > hi || hi >= self.image_size {
            return Err(Error::Config(format!(
                "anomaly size range ({lo}, {hi}) must satisfy 0 < lo <= hi < image_size {}",
                self.image_size
            )));
        }
        if !(self.anomaly_contrast > 0.0 && self.anomaly_contrast <= 1.0) {
            return Err(Error::Config(format!("anomaly_contrast {} must lie in (0, 1]", self.anomaly_contrast)));
        }
        if self.n_groups == 0 {
            return Err(Error::Config("n_groups must be at least 1".into()));
        }
        Ok(())
    }
}

const TRAIN_STREAM: u64 = 1;
const TEST_NORMAL_STREAM: u64 = 2;
const TEST_ABNORMAL_STREAM: u64 = 3;
const ANOMALY_STREAM: u64 = 4;

/// Normal texture number `index` of `stream`.
pub fn texture(cfg: &SyntheticConfig, stream: u64, index: usize) -> Image {
    let mut rng = rng_from(cfg.texture_seed, &[stream, index as u64]);
    let n = cfg.image_size;
    let c = cfg.channels;
    let base: Vec<f32> = (0..c).map(|_| rng.random_range(0.35..0.65)).collect();
    struct Wave {
        kx: f32,
        ky: f32,
        phase: f32,
        amp: f32,
        gains: Vec<f32>,
    }
    let waves: Vec<Wave> = (0..3)
        .map(|_| {
            let freq = rng.random_range(1.0f32..3.0);
            let angle = rng.random_range(0.0..std::f32::consts::PI);
            Wave {
                kx: std::f32::consts::TAU * freq * angle.cos() / n as f32,
                ky: std::f32::consts::TAU * freq * angle.sin() / n as f32,
                phase: rng.random_range(0.0..std::f32::consts::TAU),
                amp: rng.random_range(0.03..0.07),
                gains: (0..c).map(|_| rng.random_range(0.5f32..1.0)).collect(),
            }
        })
        .collect();
    // Illumination falls off towards the bottom-right corner, giving every
    // texture a canonical orientation.
    let ramp_y = rng.random_range(0.15f32..0.25);
    let ramp_x = rng.random_range(0.15f32..0.25);
    // Radial vignette around a slightly jittered centre.
    let vignette = rng.random_range(0.25f32..0.35);
    let jitter = n as f32 / 16.0;
    let vy = n as f32 / 2.0 + rng.random_range(-jitter..jitter);
    let vx = n as f32 / 2.0 + rng.random_range(-jitter..jitter);
    let r2 = (n * n) as f32 / 4.0;
    let grain = Normal::new(0.0f32, 0.03).expect("valid std");
    let mut im = Image::filled(c, n, n, 0.0);
    for y in 0..n {
        for x in 0..n {
            let d2 = ((y as f32 + 0.5 - vy).powi(2) + (x as f32 + 0.5 - vx).powi(2)) / r2;
            for ch in 0..c {
                let v = base[ch] - vignette * (d2 - 0.5) + ramp_y * (0.5 - y as f32 / n as f32) + ramp_x * (0.5 - x as f32 / n as f32)
                    + waves
                        .iter()
                        .map(|w| w.amp * w.gains[ch] * (w.kx * x as f32 + w.ky * y as f32 + w.phase).sin())
                        .sum::<f32>();
                im.set(ch, y, x, v + grain.sample(&mut rng));
            }
        }
    }
    let mut im = im.gaussian_blur(1.0, 5);
    im.clamp_unit();
    im
}

/// Injects one anomaly into `base`; returns the corrupted image and its mask.
pub fn inject_anomaly(cfg: &SyntheticConfig, base: &Image, index: usize) -> (Image, Mask) {
    let mut rng = rng_from(cfg.texture_seed, &[ANOMALY_STREAM, index as u64]);
    let n = cfg.image_size;
    let (lo, hi) = cfg.anomaly_size_range;
    let side = rng.random_range(lo..=hi);
    let y0 = rng.random_range(0..=n - side);
    let x0 = rng.random_range(0..=n - side);
    let disc = match cfg.anomaly_shape {
        AnomalyShape::Square => false,
        AnomalyShape::Disc => true,
        AnomalyShape::Mixed => rng.random_bool(0.5),
    };
    // Colour pushed away from the local mean in a random direction per channel.
    let target: Vec<f32> = (0..base.channels())
        .map(|c| {
            let mut mean = 0.0;
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    mean += base.get(c, y, x);
                }
            }
            mean /= (side * side) as f32;
            let delta = rng.random_range(0.3f32..0.45);
            if rng.random_bool(0.5) && mean + delta <= 1.0 || mean - delta < 0.0 {
                mean + delta
            } else {
                mean - delta
            }
        })
        .collect();
    let mut out = base.clone();
    let mut mask = Mask::empty(n, n);
    let r = side as f32 / 2.0;
    let (cy, cx) = (y0 as f32 + r, x0 as f32 + r);
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            if disc {
                let dy = y as f32 + 0.5 - cy;
                let dx = x as f32 + 0.5 - cx;
                if dy * dy + dx * dx > r * r {
                    continue;
                }
            }
            mask.set(y, x, true);
            for (c, t) in target.iter().enumerate() {
                let v = (1.0 - cfg.anomaly_contrast) * base.get(c, y, x) + cfg.anomaly_contrast * t;
                out.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    (out, mask)
}

/// Uncorrupted base of abnormal test sample `index`.
pub fn abnormal_base(cfg: &SyntheticConfig, index: usize) -> Image {
    texture(cfg, TEST_ABNORMAL_STREAM, index)
}

/// `(train, test)`; test holds the normal samples followed by the abnormal ones.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    cfg.validate()?;
    let mut train = Vec::with_capacity(cfg.n_train);
    for i in 0..cfg.n_train {
        train.push(ImageSample::new(format!("train_{i:05}"), texture(cfg, TRAIN_STREAM, i), Label::Normal, None)?);
    }
    let mut test = Vec::with_capacity(cfg.n_test_normal + cfg.n_test_abnormal);
    for i in 0..cfg.n_test_normal {
        test.push(ImageSample::new(
            format!("test_normal_{i:05}"),
            texture(cfg, TEST_NORMAL_STREAM, i),
            Label::Normal,
            None,
        )?);
    }
    // Fewer abnormal images than groups would leave empty groups.
    let n_groups = cfg.n_groups.min(cfg.n_test_abnormal);
    for i in 0..cfg.n_test_abnormal {
        let (im, mask) = inject_anomaly(cfg, &abnormal_base(cfg, i), i);
        let group = (i * n_groups / cfg.n_test_abnormal) as u32;
        test.push(
            ImageSample::new(format!("test_abnormal_{i:05}"), im, Label::Abnormal, Some(mask))?.with_group(Some(group)),
        );
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig { n_train: 4, n_test_normal: 3, n_test_abnormal: 10, texture_seed: 7, ..Default::default() }
    }

    fn bytes(samples: &[ImageSample]) -> Vec<u8> {
        samples.iter().flat_map(|s| s.pixels.data().iter().flat_map(|v| v.to_le_bytes())).collect()
    }

    #[test]
    fn identical_seed_identical_bytes() {
        let (a_tr, a_te) = generate_synthetic(&small()).unwrap();
        let (b_tr, b_te) = generate_synthetic(&small()).unwrap();
        assert_eq!(bytes(&a_tr), bytes(&b_tr));
        assert_eq!(bytes(&a_te), bytes(&b_te));
        let other = SyntheticConfig { texture_seed: 8, ..small() };
        assert_ne!(bytes(&generate_synthetic(&other).unwrap().0), bytes(&a_tr));
    }

    #[test]
    fn fixed_size_square_masks() {
        let cfg = SyntheticConfig { anomaly_contrast: 1.0, anomaly_size_range: (8, 8), ..small() };
        let (train, test) = generate_synthetic(&cfg).unwrap();
        assert!(train.iter().all(|s| s.label == Label::Normal && s.mask.is_none()));
        for s in test.iter().filter(|s| s.is_abnormal()) {
            assert_eq!(s.mask.as_ref().unwrap().count(), 64);
        }
    }

    #[test]
    fn anomalies_only_change_masked_pixels() {
        let cfg = SyntheticConfig { anomaly_shape: AnomalyShape::Mixed, ..small() };
        let (_, test) = generate_synthetic(&cfg).unwrap();
        for (i, s) in test.iter().filter(|s| s.is_abnormal()).enumerate() {
            let base = abnormal_base(&cfg, i);
            let mask = s.mask.as_ref().unwrap();
            let mut changed = 0;
            for c in 0..cfg.channels {
                for y in 0..cfg.image_size {
                    for x in 0..cfg.image_size {
                        if base.get(c, y, x) != s.pixels.get(c, y, x) {
                            assert!(mask.get(y, x));
                            changed += 1;
                        }
                    }
                }
            }
            assert!(changed > 0);
        }
    }

    #[test]
    fn groups_are_contiguous_and_balanced() {
        let (_, test) = generate_synthetic(&small()).unwrap();
        let groups: Vec<u32> = test.iter().filter_map(|s| s.group).collect();
        assert_eq!(groups, vec![0, 0, 1, 1, 2, 2, 3, 3, 4, 4]);
    }

    #[test]
    fn invalid_configs() {
        assert!(SyntheticConfig { anomaly_size_range: (8, 64), ..small() }.validate().is_err());
        assert!(SyntheticConfig { anomaly_contrast: 0.0, ..small() }.validate().is_err());
        assert!(SyntheticConfig { channels: 2, ..small() }.validate().is_err());
    }
}
