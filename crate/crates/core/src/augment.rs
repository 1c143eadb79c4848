//! Weak (label-preserving) and strong (distribution-shifting) augmentations,
//! and the neighbouring-patch sampler for the relative-position task.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    Jitter,
    Grayscale,
    CropResize,
    Blur,
    Rotation,
    Permutation,
    Cutout,
    GaussianNoise,
}

impl AugKind {
    pub fn family(self) -> Family {
        match self {
            AugKind::Jitter | AugKind::Grayscale | AugKind::CropResize | AugKind::Blur => Family::Weak,
            _ => Family::Strong,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown augmentation kind '{s}'")))
    }

    pub fn name(self) -> &'static str {
        match self {
            AugKind::Jitter => "jitter",
            AugKind::Grayscale => "grayscale",
            AugKind::CropResize => "crop_resize",
            AugKind::Blur => "blur",
            AugKind::Rotation => "rotation",
            AugKind::Permutation => "permutation",
            AugKind::Cutout => "cutout",
            AugKind::GaussianNoise => "gaussian_noise",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugParams {
    Jitter { brightness: f32, contrast: f32, saturation: f32, hue: f32 },
    Grayscale,
    CropResize { scale_min: f32, scale_max: f32 },
    Blur { sigma_min: f32, sigma_max: f32 },
    /// Counter-clockwise quarter turns.
    Rotation { quarter_turns: usize },
    /// Output tile `i` of a `grid x grid` layout is input tile `order[i]`.
    Permutation { grid: usize, order: Vec<usize> },
    /// Box given as fractions of the image height/width.
    Cutout { y: f32, x: f32, h: f32, w: f32, fill: f32 },
    GaussianNoise { sigma: f32 },
}

impl AugParams {
    pub fn kind(&self) -> AugKind {
        match self {
            AugParams::Jitter { .. } => AugKind::Jitter,
            AugParams::Grayscale => AugKind::Grayscale,
            AugParams::CropResize { .. } => AugKind::CropResize,
            AugParams::Blur { .. } => AugKind::Blur,
            AugParams::Rotation { .. } => AugKind::Rotation,
            AugParams::Permutation { .. } => AugKind::Permutation,
            AugParams::Cutout { .. } => AugKind::Cutout,
            AugParams::GaussianNoise { .. } => AugKind::GaussianNoise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationDescriptor {
    pub family: Family,
    pub params: AugParams,
    /// Class label in `[0, |A_n|)` for strong descriptors; 0 for weak ones.
    pub class_index: usize,
}

impl AugmentationDescriptor {
    pub fn kind(&self) -> AugKind {
        self.params.kind()
    }

    /// True when the transform leaves every image unchanged.
    pub fn is_identity(&self) -> bool {
        match &self.params {
            AugParams::Rotation { quarter_turns } => quarter_turns % 4 == 0,
            AugParams::Permutation { order, .. } => order.iter().enumerate().all(|(i, &o)| i == o),
            AugParams::GaussianNoise { sigma } => *sigma == 0.0,
            AugParams::Cutout { h, w, .. } => *h == 0.0 || *w == 0.0,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeakConfig {
    pub jitter_prob: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub grayscale_prob: f32,
    pub crop_prob: f32,
    /// Range of the retained area fraction.
    pub crop_scale: (f32, f32),
    pub blur_prob: f32,
    pub blur_sigma: (f32, f32),
}

impl Default for WeakConfig {
    fn default() -> Self {
        Self {
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_prob: 0.2,
            crop_prob: 1.0,
            crop_scale: (0.6, 1.0),
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
        }
    }
}

impl WeakConfig {
    /// Every probability zero: `apply_weak` is the identity.
    pub fn disabled() -> Self {
        Self { jitter_prob: 0.0, grayscale_prob: 0.0, crop_prob: 0.0, blur_prob: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.jitter_prob, self.grayscale_prob, self.crop_prob, self.blur_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("weak augmentation probabilities must lie in [0, 1]".into()));
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        let (slo, shi) = self.blur_sigma;
        if !(slo > 0.0 && slo <= shi) {
            return Err(Error::Config(format!("blur_sigma ({slo}, {shi}) must satisfy 0 < lo <= hi")));
        }
        Ok(())
    }

    /// The individual weak descriptors this configuration samples from.
    pub fn descriptors(&self) -> Vec<AugmentationDescriptor> {
        let weak = |params| AugmentationDescriptor { family: Family::Weak, params, class_index: 0 };
        vec![
            weak(AugParams::Jitter {
                brightness: self.brightness,
                contrast: self.contrast,
                saturation: self.saturation,
                hue: self.hue,
            }),
            weak(AugParams::Grayscale),
            weak(AugParams::CropResize { scale_min: self.crop_scale.0, scale_max: self.crop_scale.1 }),
            weak(AugParams::Blur { sigma_min: self.blur_sigma.0, sigma_max: self.blur_sigma.1 }),
        ]
    }
}

/// Blur kernel width: `size / 20` rounded to the nearest odd integer, at least 3.
pub fn blur_kernel(size: usize) -> usize {
    let k = (size as f32 / 20.0).round() as usize;
    (if k.is_multiple_of(2) { k + 1 } else { k }).max(3)
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    // Exact for r == g == b.
    r + 0.587 * (g - r) + 0.114 * (b - r)
}

fn grayscale(im: &Image) -> Image {
    if im.channels() != 3 {
        return im.clone();
    }
    let mut out = im.clone();
    for y in 0..im.height() {
        for x in 0..im.width() {
            let v = luma(im.get(0, y, x), im.get(1, y, x), im.get(2, y, x));
            for c in 0..3 {
                out.set(c, y, x, v);
            }
        }
    }
    out
}

fn jitter(im: &Image, factors: [f32; 4]) -> Image {
    let [b, c, s, h] = factors;
    let mut out = im.clone();
    out.data_mut().iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
    let gray_mean = if im.channels() == 3 {
        let g = grayscale(&out);
        g.plane(0).iter().sum::<f32>() / g.plane(0).len() as f32
    } else {
        out.data().iter().sum::<f32>() / out.data().len() as f32
    };
    out.data_mut().iter_mut().for_each(|v| *v = (gray_mean + c * (*v - gray_mean)).clamp(0.0, 1.0));
    if im.channels() == 3 {
        let (cos, sin) = ((h * std::f32::consts::TAU).cos(), (h * std::f32::consts::TAU).sin());
        for y in 0..im.height() {
            for x in 0..im.width() {
                let (r, g, bl) = (out.get(0, y, x), out.get(1, y, x), out.get(2, y, x));
                let l = luma(r, g, bl);
                let rgb = [l + s * (r - l), l + s * (g - l), l + s * (bl - l)];
                // Hue rotation in YIQ space.
                let yy = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
                let i = 0.596 * rgb[0] - 0.274 * rgb[1] - 0.322 * rgb[2];
                let q = 0.211 * rgb[0] - 0.523 * rgb[1] + 0.312 * rgb[2];
                let (i2, q2) = (i * cos - q * sin, i * sin + q * cos);
                let rgb2 = [
                    yy + 0.956 * i2 + 0.621 * q2,
                    yy - 0.272 * i2 - 0.647 * q2,
                    yy - 1.106 * i2 + 1.703 * q2,
                ];
                for (ch, v) in rgb2.iter().enumerate() {
                    out.set(ch, y, x, v.clamp(0.0, 1.0));
                }
            }
        }
    }
    out
}

fn crop_resize(im: &Image, area: f32, log_ratio: f32, fy: f32, fx: f32) -> Image {
    let (h, w) = (im.height(), im.width());
    let ratio = log_ratio.exp();
    let total = (h * w) as f32 * area;
    let ch = ((total / ratio).sqrt().round() as usize).clamp(1, h);
    let cw = ((total * ratio).sqrt().round() as usize).clamp(1, w);
    let y0 = ((h - ch) as f32 * fy).floor() as usize;
    let x0 = ((w - cw) as f32 * fx).floor() as usize;
    let mut out = im.crop(y0, x0, ch, cw).resize_bilinear(h, w);
    out.clamp_unit();
    out
}

/// Random composition of the weak family: jitter, grayscale, crop-resize and
/// blur, each gated by its probability. Deterministic in `(image, seed)`.
pub fn apply_weak(image: &Image, cfg: &WeakConfig, seed: u64) -> Image {
    let mut rng = rng_from(seed, &[0x5745_414b]);
    let mut out = image.clone();
    // Draws happen unconditionally so the stream layout does not depend on
    // which transforms fire.
    let fire_crop = rng.random::<f32>() < cfg.crop_prob;
    let area = rng.random_range(cfg.crop_scale.0..=cfg.crop_scale.1);
    let log_ratio = rng.random_range((0.75f32).ln()..=(4.0f32 / 3.0).ln());
    let (fy, fx) = (rng.random::<f32>(), rng.random::<f32>());
    let fire_jitter = rng.random::<f32>() < cfg.jitter_prob;
    let mut factor = |s: f32| if s > 0.0 { rng.random_range((1.0 - s).max(0.0)..=1.0 + s) } else { 1.0 };
    let factors = [factor(cfg.brightness), factor(cfg.contrast), factor(cfg.saturation), 0.0];
    let hue = if cfg.hue > 0.0 { rng.random_range(-cfg.hue..=cfg.hue) } else { 0.0 };
    let fire_gray = rng.random::<f32>() < cfg.grayscale_prob;
    let fire_blur = rng.random::<f32>() < cfg.blur_prob;
    let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);

    if fire_crop {
        out = crop_resize(&out, area, log_ratio, fy, fx);
    }
    if fire_jitter {
        out = jitter(&out, [factors[0], factors[1], factors[2], hue]);
    }
    if fire_gray {
        out = grayscale(&out);
    }
    if fire_blur {
        out = out.gaussian_blur(sigma, blur_kernel(image.height().min(image.width())));
    }
    out.clamp_unit();
    out
}

fn permute_tiles(im: &Image, grid: usize, order: &[usize]) -> Result<Image> {
    let (h, w) = (im.height(), im.width());
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(Error::Shape(format!("{h}x{w} image does not tile into a {grid}x{grid} grid")));
    }
    if order.len() != grid * grid {
        return Err(Error::Config(format!("permutation of length {} for a {grid}x{grid} grid", order.len())));
    }
    let (th, tw) = (h / grid, w / grid);
    let mut out = im.clone();
    for (dst, &src) in order.iter().enumerate() {
        let tile = im.crop((src / grid) * th, (src % grid) * tw, th, tw);
        out.paste(&tile, (dst / grid) * th, (dst % grid) * tw);
    }
    Ok(out)
}

/// Applies a strong descriptor. Deterministic in `(descriptor, seed)`; only
/// Gaussian noise consumes randomness.
pub fn apply_strong(image: &Image, desc: &AugmentationDescriptor, seed: u64) -> Result<Image> {
    if desc.family != Family::Strong {
        return Err(Error::Config(format!("{} is not a strong augmentation", desc.kind().name())));
    }
    let mut out = match &desc.params {
        AugParams::Rotation { quarter_turns } => {
            if image.height() != image.width() {
                return Err(Error::Shape("rotation requires square images".into()));
            }
            image.rotate90(*quarter_turns)
        }
        AugParams::Permutation { grid, order } => permute_tiles(image, *grid, order)?,
        AugParams::Cutout { y, x, h, w, fill } => {
            let (ih, iw) = (image.height() as f32, image.width() as f32);
            let y0 = (y * ih).round() as usize;
            let x0 = (x * iw).round() as usize;
            let y1 = ((y + h) * ih).round().min(ih) as usize;
            let x1 = ((x + w) * iw).round().min(iw) as usize;
            let mut out = image.clone();
            for c in 0..image.channels() {
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        out.set(c, yy, xx, *fill);
                    }
                }
            }
            out
        }
        AugParams::GaussianNoise { sigma } => {
            let mut rng = rng_from(seed, &[0x4e4f_4953]);
            let normal = Normal::new(0.0f32, *sigma)
                .map_err(|e| Error::Config(format!("invalid noise sigma {sigma}: {e}")))?;
            let mut out = image.clone();
            out.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            out
        }
        other => return Err(Error::Config(format!("{} is not a strong augmentation", other.kind().name()))),
    };
    out.clamp_unit();
    Ok(out)
}

/// Parameters shared by every member of an enumerated strong family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrongBase {
    /// Tile grid for permutations; `None` picks 2 for images of at most 64
    /// pixels and 4 otherwise.
    pub grid: Option<usize>,
    pub permutation_seed: u64,
    pub noise_levels: Vec<f32>,
    pub cutout_fill: f32,
}

impl Default for StrongBase {
    fn default() -> Self {
        Self { grid: None, permutation_seed: 0, noise_levels: vec![0.05, 0.1, 0.2, 0.3], cutout_fill: 0.0 }
    }
}

impl StrongBase {
    pub fn grid_for(&self, image_size: usize) -> usize {
        self.grid.unwrap_or(if image_size <= 64 { 2 } else { 4 })
    }
}

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

/// `k` strong descriptors of one family with class indices `0..k`.
///
/// Rotations are the first `k` quarter turns, cutouts the first `k` image
/// quadrants (NW, NE, SW, SE), noise levels the first `k` entries of
/// `base.noise_levels`, and permutations `k` distinct non-identity tile
/// orders drawn once from `base.permutation_seed`.
pub fn enumerate_strong(kind: AugKind, k: usize, base: &StrongBase, image_size: usize) -> Result<Vec<AugmentationDescriptor>> {
    if k < 2 {
        return Err(Error::Config(format!("a strong family needs at least 2 members, got {k}")));
    }
    let too_many = |avail: usize| {
        Err(Error::Config(format!("{} admits only {avail} distinct parameterisations, {k} requested", kind.name())))
    };
    let params: Vec<AugParams> = match kind {
        AugKind::Rotation => {
            if k > 4 {
                return too_many(4);
            }
            (0..k).map(|q| AugParams::Rotation { quarter_turns: q }).collect()
        }
        AugKind::Cutout => {
            if k > 4 {
                return too_many(4);
            }
            (0..k)
                .map(|q| AugParams::Cutout {
                    y: 0.5 * (q / 2) as f32,
                    x: 0.5 * (q % 2) as f32,
                    h: 0.5,
                    w: 0.5,
                    fill: base.cutout_fill,
                })
                .collect()
        }
        AugKind::GaussianNoise => {
            let mut levels = base.noise_levels.clone();
            levels.dedup();
            if levels.len() < k {
                return too_many(levels.len());
            }
            levels[..k].iter().map(|&sigma| AugParams::GaussianNoise { sigma }).collect()
        }
        AugKind::Permutation => {
            let grid = base.grid_for(image_size);
            let tiles = grid * grid;
            if tiles < 2 || (tiles <= 10 && factorial(tiles) - 1 < k) {
                return too_many(if tiles < 2 { 0 } else { factorial(tiles) - 1 });
            }
            let mut rng = rng_from(base.permutation_seed, &[0x5045_524d, grid as u64]);
            let identity: Vec<usize> = (0..tiles).collect();
            let mut orders: Vec<Vec<usize>> = Vec::with_capacity(k);
            while orders.len() < k {
                let mut o = identity.clone();
                o.shuffle(&mut rng);
                if o != identity && !orders.contains(&o) {
                    orders.push(o);
                }
            }
            orders.into_iter().map(|order| AugParams::Permutation { grid, order }).collect()
        }
        weak => return Err(Error::Config(format!("{} is not a strong augmentation", weak.name()))),
    };
    Ok(params
        .into_iter()
        .enumerate()
        .map(|(class_index, params)| AugmentationDescriptor { family: Family::Strong, params, class_index })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub strong_kind: AugKind,
    /// `|A_n|`.
    pub k: usize,
    pub strong: StrongBase,
    pub weak: WeakConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { strong_kind: AugKind::Permutation, k: 4, strong: StrongBase::default(), weak: WeakConfig::default() }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strong_kind.family() != Family::Strong {
            return Err(Error::Config(format!("{} is not a strong augmentation", self.strong_kind.name())));
        }
        self.weak.validate()
    }

    pub fn strong_set(&self, image_size: usize) -> Result<Vec<AugmentationDescriptor>> {
        enumerate_strong(self.strong_kind, self.k, &self.strong, image_size)
    }
}

/// Checks the stored-family invariants: all strong, one kind, indices `0..k`.
pub fn validate_strong_set(descs: &[AugmentationDescriptor]) -> Result<()> {
    if descs.len() < 2 {
        return Err(Error::Config("a strong family needs at least 2 members".into()));
    }
    let kind = descs[0].kind();
    for (i, d) in descs.iter().enumerate() {
        if d.family != Family::Strong || d.kind() != kind || d.class_index != i {
            return Err(Error::Config(format!("strong descriptor {i} breaks the single-family contiguous layout")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub patch_a: Image,
    pub patch_b: Image,
    /// Slot of `patch_b` around `patch_a`: 0=NW, 1=N, 2=NE, 3=W, 4=E, 5=SW, 6=S, 7=SE.
    pub position_label: usize,
    /// Top-left corner of `patch_a`.
    pub anchor: (usize, usize),
}

/// Row/column tile offset of each position label.
pub const POSITION_OFFSETS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Extracts `patch_a` and the neighbour at `label` given `patch_a`'s corner.
pub fn patch_pair_at(image: &Image, patch_size: usize, anchor: (usize, usize), label: usize) -> Result<PatchPair> {
    let p = patch_size;
    let (ay, ax) = anchor;
    if label >= 8 || ay < p || ax < p || ay + 2 * p > image.height() || ax + 2 * p > image.width() {
        return Err(Error::Shape(format!("neighbourhood of patch at {anchor:?} does not fit the image")));
    }
    let (dy, dx) = POSITION_OFFSETS[label];
    let by = (ay as isize + dy * p as isize) as usize;
    let bx = (ax as isize + dx * p as isize) as usize;
    Ok(PatchPair { patch_a: image.crop(ay, ax, p, p), patch_b: image.crop(by, bx, p, p), position_label: label, anchor })
}

/// Random anchor whose 3x3 neighbourhood fits in the image, with a uniformly
/// drawn neighbour slot.
pub fn sample_patch_pair(image: &Image, patch_size: usize, seed: u64) -> Result<PatchPair> {
    let p = patch_size;
    if p == 0 || 3 * p > image.height().min(image.width()) {
        return Err(Error::Shape(format!(
            "{}x{} image is too small for a 3x3 neighbourhood of {p}-pixel patches",
            image.height(),
            image.width()
        )));
    }
    let mut rng = rng_from(seed, &[0x5041_5443]);
    let ay = rng.random_range(p..=image.height() - 2 * p);
    let ax = rng.random_range(p..=image.width() - 2 * p);
    let label = rng.random_range(0..8);
    patch_pair_at(image, p, (ay, ax), label)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(c: usize, n: usize, seed: u64) -> Image {
        let mut rng = rng_from(seed, &[]);
        Image::new(c, n, n, (0..c * n * n).map(|_| rng.random::<f32>()).collect())
    }

    #[test]
    fn disabled_weak_is_identity_and_weak_is_deterministic() {
        let im = random_image(3, 32, 1);
        assert_eq!(apply_weak(&im, &WeakConfig::disabled(), 9), im);
        let cfg = WeakConfig::default();
        assert_eq!(apply_weak(&im, &cfg, 9), apply_weak(&im, &cfg, 9));
        assert_ne!(apply_weak(&im, &cfg, 9), apply_weak(&im, &cfg, 10));
        assert!(apply_weak(&im, &cfg, 11).is_unit_range());
    }

    #[test]
    fn grayscale_of_gray_is_identity() {
        let plane: Vec<f32> = (0..64).map(|i| i as f32 / 63.0).collect();
        let im = Image::new(3, 8, 8, [plane.clone(), plane.clone(), plane].concat());
        assert_eq!(grayscale(&im), im);
    }

    #[test]
    fn rotation_enumeration_and_closure() {
        let r4 = enumerate_strong(AugKind::Rotation, 4, &StrongBase::default(), 8).unwrap();
        let turns: Vec<usize> = r4
            .iter()
            .map(|d| match d.params {
                AugParams::Rotation { quarter_turns } => quarter_turns * 90,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(turns, vec![0, 90, 180, 270]);
        assert_eq!(r4.iter().map(|d| d.class_index).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        let r2 = enumerate_strong(AugKind::Rotation, 2, &StrongBase::default(), 8).unwrap();
        let im = random_image(1, 8, 2);
        let twice = apply_strong(&apply_strong(&im, &r2[1], 0).unwrap(), &r2[1], 0).unwrap();
        assert_eq!(twice, apply_strong(&im, &r4[2], 0).unwrap());
        let tiny = Image::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(apply_strong(&tiny, &r4[1], 0).unwrap().data(), &[0.2, 0.4, 0.1, 0.3]);
        assert!(enumerate_strong(AugKind::Rotation, 5, &StrongBase::default(), 8).is_err());
        assert!(enumerate_strong(AugKind::Rotation, 1, &StrongBase::default(), 8).is_err());
    }

    #[test]
    fn permutation_patterns() {
        let base = StrongBase { permutation_seed: 3, ..Default::default() };
        let a = enumerate_strong(AugKind::Permutation, 4, &base, 64).unwrap();
        assert_eq!(a, enumerate_strong(AugKind::Permutation, 4, &base, 64).unwrap());
        assert!(a.iter().all(|d| !d.is_identity()));
        let ident = AugmentationDescriptor {
            family: Family::Strong,
            params: AugParams::Permutation { grid: 4, order: (0..16).collect() },
            class_index: 0,
        };
        let im = random_image(3, 32, 4);
        assert_eq!(apply_strong(&im, &ident, 0).unwrap(), im);
        assert!(enumerate_strong(AugKind::Permutation, 24, &base, 64).is_err());
    }

    #[test]
    fn full_cutout_zeroes_image() {
        let d = AugmentationDescriptor {
            family: Family::Strong,
            params: AugParams::Cutout { y: 0.0, x: 0.0, h: 1.0, w: 1.0, fill: 0.0 },
            class_index: 0,
        };
        let out = apply_strong(&random_image(3, 16, 5), &d, 0).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weak_descriptor_rejected_by_apply_strong() {
        let d = &WeakConfig::default().descriptors()[0];
        assert!(apply_strong(&random_image(3, 8, 1), d, 0).is_err());
    }

    #[test]
    fn patch_pair_labels() {
        let im = random_image(1, 96, 6);
        let pair = patch_pair_at(&im, 32, (32, 32), 1).unwrap();
        assert_eq!(pair.patch_b, im.crop(0, 32, 32, 32));
        assert_eq!(sample_patch_pair(&im, 32, 3).unwrap(), sample_patch_pair(&im, 32, 3).unwrap());
        assert!(sample_patch_pair(&im, 33, 3).is_err());
        let mut seen = [false; 8];
        for s in 0..1000 {
            seen[sample_patch_pair(&im, 20, s).unwrap().position_label] = true;
        }
        assert!(seen.iter().all(|&b| b));
    }
}
