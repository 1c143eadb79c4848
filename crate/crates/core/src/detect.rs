//! Downstream detectors on top of a (pretrained or fresh) [`ModelBundle`]:
//! an MS-SSIM autoencoder, an IGD-style reconstruction-plus-normality
//! detector, and an f-AnoGAN-style reconstruction/latent scorer.
//!
//! A detector works either on whole images (`global`) or on square crops
//! (`local`); in the local case the bundle's `input_size` is the crop side.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom as _;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::apply_strong;
use crate::ccd::check_training_set;
use crate::data::{ImageSample, Label};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::binary_cross_entropy_logits;
use crate::model::{load_checkpoint_with, save_checkpoint_with, ModelBundle, Pass};
use crate::msssim::{local_ms_ssim_f64, ms_ssim_f64, Dims, MsSsimConfig};
use crate::nn::{Adam, AdamConfig, Graph, ParamId, ParamStore, Sgd, SgdConfig};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    MsssimAe,
    Igd,
    Fanogan,
}

impl DetectorKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "msssim_ae" => Ok(Self::MsssimAe),
            "igd" => Ok(Self::Igd),
            "fanogan" => Ok(Self::Fanogan),
            _ => Err(Error::Config(format!("unknown detector kind {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::MsssimAe => "msssim_ae",
            Self::Igd => "igd",
            Self::Fanogan => "fanogan",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorScale {
    #[serde(alias = "global_256")]
    Global,
    #[serde(alias = "local_32")]
    Local,
}

impl DetectorScale {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" | "global_256" => Ok(Self::Global),
            "local" | "local_32" => Ok(Self::Local),
            _ => Err(Error::Config(format!("unknown detector scale {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    fn current_lr(&self) -> f64 {
        match self {
            Self::Sgd(o) => o.current_lr(),
            Self::Adam(o) => o.current_lr(),
        }
    }

    fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], frozen: &dyn Fn(ParamId) -> bool) {
        match self {
            Self::Sgd(o) => o.step(params, grads, frozen),
            Self::Adam(o) => o.step(params, grads, frozen),
        }
    }
}

/// Side of the local training instances for images of side `image_size`.
pub fn local_instance_size(image_size: usize) -> usize {
    32.min(image_size / 2)
}

/// Tile side of the local MS-SSIM term for inputs of side `size`; falls back
/// to the whole input when a half-size tile cannot hold one window.
pub fn local_tile(size: usize) -> usize {
    let t = 32.min(size / 2);
    if t < MsSsimConfig::default().window_size {
        size
    } else {
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    /// Weight of the reconstruction term in the IGD score.
    pub xi: f64,
    /// Weight of the mean absolute error in the reconstruction loss.
    pub rho: f64,
    /// Weight of the global MS-SSIM against the tiled one.
    pub nu: f64,
    /// Weight of the latent term in the f-AnoGAN score.
    pub kappa: f64,
    pub scale: DetectorScale,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// SGD only.
    pub momentum: f64,
    pub batch_size: usize,
    pub freeze_encoder: bool,
    /// Random crops drawn per training image and epoch at local scale.
    pub crops_per_image: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            kind: DetectorKind::MsssimAe,
            xi: 0.5,
            rho: 0.5,
            nu: 0.5,
            kappa: 1.0,
            scale: DetectorScale::Global,
            epochs: 30,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 16,
            freeze_encoder: false,
            crops_per_image: 2,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("xi", self.xi), ("rho", self.rho), ("nu", self.nu)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config(format!("kappa must be non-negative, got {}", self.kappa)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.crops_per_image == 0 {
            return Err(Error::Config("batch_size and crops_per_image must be positive".into()));
        }
        Ok(())
    }

    /// Mean-absolute-error weight used while training; the MS-SSIM
    /// autoencoder trains on MS-SSIM alone.
    pub fn training_rho(&self) -> f64 {
        match self.kind {
            DetectorKind::MsssimAe => 0.0,
            _ => self.rho,
        }
    }

    /// Side of the model input for images of side `image_size`.
    pub fn instance_size(&self, image_size: usize) -> usize {
        match self.scale {
            DetectorScale::Global => image_size,
            DetectorScale::Local => local_instance_size(image_size),
        }
    }
}

/// `(m_G, m_L)` with optional gradients with respect to `xr`.
struct Similarity {
    global: f64,
    local: f64,
    d_global: Option<Vec<f64>>,
    d_local: Option<Vec<f64>>,
}

fn similarity(x: &[f64], xr: &[f64], dims: Dims, want_grad: bool) -> Result<Similarity> {
    let side = dims.height.min(dims.width);
    let cfg = MsSsimConfig::for_size(side)?;
    let (global, d_global) = ms_ssim_f64(x, xr, dims, &cfg, want_grad)?;
    let (local, d_local) = local_ms_ssim_f64(x, xr, dims, local_tile(side), &MsSsimConfig::for_size(local_tile(side))?, want_grad)?;
    Ok(Similarity { global, local, d_global, d_local })
}

fn check_same(x: &Image, xr: &Image) -> Result<()> {
    if !x.same_shape(xr) {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            x.channels(),
            x.height(),
            x.width(),
            xr.channels(),
            xr.height(),
            xr.width()
        )));
    }
    Ok(())
}

/// `(m_G, m_L)` between an image and its reconstruction.
pub fn ms_ssim_pair(x: &Image, xr: &Image) -> Result<(f64, f64)> {
    check_same(x, xr)?;
    let s = similarity(&x.to_f64(), &xr.to_f64(), Dims::of(x), false)?;
    Ok((s.global, s.local))
}

/// `rho * MAE + (1 - rho) * (1 - (nu * m_G + (1 - nu) * m_L))` on flat
/// planar buffers, optionally with the gradient with respect to `xr`.
pub fn reconstruction_loss_f64(
    x: &[f64],
    xr: &[f64],
    dims: Dims,
    rho: f64,
    nu: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let n = x.len() as f64;
    let mae = x.iter().zip(xr).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let need_ssim = rho < 1.0;
    let sim = if need_ssim { Some(similarity(x, xr, dims, want_grad)?) } else { None };
    let ssim_term = sim.as_ref().map_or(0.0, |s| 1.0 - (nu * s.global + (1.0 - nu) * s.local));
    let loss = rho * mae + (1.0 - rho) * ssim_term;
    if !want_grad {
        return Ok((loss, None));
    }
    let mut grad: Vec<f64> = x
        .iter()
        .zip(xr)
        .map(|(a, b)| {
            let d = b - a;
            rho * if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            } / n
        })
        .collect();
    if let Some(s) = sim {
        let (dg, dl) = (s.d_global.expect("gradient requested"), s.d_local.expect("gradient requested"));
        for ((g, a), b) in grad.iter_mut().zip(&dg).zip(&dl) {
            *g -= (1.0 - rho) * (nu * a + (1.0 - nu) * b);
        }
    }
    Ok((loss, Some(grad)))
}

/// Mixed absolute-error / MS-SSIM reconstruction loss; zero iff `x == xr`.
pub fn reconstruction_loss(x: &Image, xr: &Image, rho: f64, nu: f64) -> Result<f64> {
    check_same(x, xr)?;
    Ok(reconstruction_loss_f64(&x.to_f64(), &xr.to_f64(), Dims::of(x), rho, nu, false)?.0)
}

/// `1 - (nu * m_G + (1 - nu) * m_L)`.
pub fn msssim_score(m_global: f64, m_local: f64, nu: f64) -> f64 {
    (1.0 - (nu * m_global + (1.0 - nu) * m_local)).max(0.0)
}

/// `xi * rec + (1 - xi) * (1 - h)`.
pub fn igd_score(rec: f64, normality: f64, xi: f64) -> f64 {
    xi * rec + (1.0 - xi) * (1.0 - normality)
}

/// `pixel + kappa * latent`.
pub fn fanogan_score(pixel: f64, latent: f64, kappa: f64) -> f64 {
    pixel + kappa * latent
}

fn mean_sq(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.len() as f64
}

#[derive(Debug, Clone)]
pub struct DetectorBundle {
    pub config: DetectorConfig,
    pub model: ModelBundle,
    /// False only for bundles that never went through [`train_detector`].
    pub trained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_time: f64,
}

impl DetectorBundle {
    pub fn untrained(config: DetectorConfig, model: ModelBundle) -> Self {
        Self { config, model, trained: false }
    }

    pub fn input_size(&self) -> usize {
        self.model.config.input_size
    }

    /// Reconstructions of model-sized inputs.
    pub fn reconstruct(&self, images: &[&Image]) -> Result<Vec<Image>> {
        self.model.reconstruct(images)
    }

    /// Score of each model-sized input under the configured detector;
    /// higher means more anomalous.
    pub fn score(&self, images: &[&Image]) -> Result<Vec<f64>> {
        let cfg = &self.config;
        if cfg.kind == DetectorKind::Igd && !self.trained {
            return Err(Error::Config("the IGD score needs a trained normality head".into()));
        }
        let z = self.model.encode(images)?;
        let recon = self.model.decode(&z)?;
        let extra: Vec<f64> = match cfg.kind {
            DetectorKind::MsssimAe => vec![0.0; images.len()],
            DetectorKind::Igd => self.model.classify_normal(&z)?.into_iter().map(f64::from).collect(),
            DetectorKind::Fanogan => {
                let z2 = self.model.encode(&recon.iter().collect::<Vec<_>>())?;
                let d = z.dim();
                (0..images.len()).map(|i| mean_sq(&z.values.data()[i * d..(i + 1) * d], &z2.values.data()[i * d..(i + 1) * d])).collect()
            }
        };
        images
            .iter()
            .zip(&recon)
            .zip(extra)
            .map(|((x, xr), e)| {
                Ok(match cfg.kind {
                    DetectorKind::MsssimAe => {
                        let (g, l) = ms_ssim_pair(x, xr)?;
                        msssim_score(g, l, cfg.nu)
                    }
                    DetectorKind::Igd => igd_score(reconstruction_loss(x, xr, cfg.rho, cfg.nu)?, e, cfg.xi),
                    DetectorKind::Fanogan => fanogan_score(mean_sq(x.data(), xr.data()), e, cfg.kappa),
                })
            })
            .collect()
    }

    /// Reconstruction part of the score between a region and the same region
    /// of a reconstruction. Terms that depend only on the whole image are
    /// omitted.
    pub fn region_score(&self, x: &Image, xr: &Image) -> Result<f64> {
        check_same(x, xr)?;
        let cfg = &self.config;
        Ok(match cfg.kind {
            DetectorKind::MsssimAe => {
                let (g, l) = ms_ssim_pair(x, xr)?;
                msssim_score(g, l, cfg.nu)
            }
            DetectorKind::Igd => reconstruction_loss(x, xr, cfg.rho, cfg.nu)?,
            DetectorKind::Fanogan => mean_sq(x.data(), xr.data()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "detector": self.config, "trained": self.trained });
        save_checkpoint_with(&self.model, &meta, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (model, meta) = load_checkpoint_with(path)?;
        let Some(cfg) = meta.get("detector") else {
            return Err(Error::Checkpoint(format!("{} holds no detector configuration", path.display())));
        };
        let config: DetectorConfig = serde_json::from_value(cfg.clone())?;
        let trained = meta.get("trained").and_then(|v| v.as_bool()).unwrap_or(false);
        Ok(Self { config, model, trained })
    }
}

/// `per_image` random `size x size` crops of every sample.
pub fn random_crops(dataset: &[ImageSample], size: usize, per_image: usize, seed: u64) -> Result<Vec<ImageSample>> {
    let mut out = Vec::with_capacity(dataset.len() * per_image);
    for (i, s) in dataset.iter().enumerate() {
        let (h, w) = (s.pixels.height(), s.pixels.width());
        if size > h || size > w {
            return Err(Error::Shape(format!("{size}-pixel crops do not fit {h}x{w} sample {}", s.id)));
        }
        let mut rng = rng_from(seed, &[i as u64]);
        for k in 0..per_image {
            let y = rng.random_range(0..=h - size);
            let x = rng.random_range(0..=w - size);
            out.push(ImageSample::new(format!("{}_crop{k}", s.id), s.pixels.crop(y, x, size, size), s.label, None)?);
        }
    }
    Ok(out)
}

fn to_tensor(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), v.iter().map(|&x| x as f32).collect())
}

/// Loss and parameter gradients for one batch of model-sized inputs.
fn detector_step(
    model: &ModelBundle,
    cfg: &DetectorConfig,
    images: &[&Image],
    seed: u64,
    pass: &mut Pass,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let n = images.len();
    let mut g = Graph::new(&model.params);
    let x = g.input(Image::batch(images));
    let z = model.encoder_graph(&mut g, x, pass);
    let xr = model.decoder_graph(&mut g, z);
    let recon = Image::unbatch(g.value(xr));
    let dims = Dims::of(images[0]);
    let mut seeds = Vec::new();
    let mut loss = 0.0;

    let mut d_xr = Vec::with_capacity(g.value(xr).len());
    match cfg.kind {
        DetectorKind::Fanogan => {
            let total = g.value(xr).len() as f64;
            for (im, r) in images.iter().zip(&recon) {
                for (a, b) in im.data().iter().zip(r.data()) {
                    let d = *b as f64 - *a as f64;
                    loss += d * d / total;
                    d_xr.push(2.0 * d / total);
                }
            }
        }
        _ => {
            for (im, r) in images.iter().zip(&recon) {
                let (l, gr) = reconstruction_loss_f64(&im.to_f64(), &r.to_f64(), dims, cfg.training_rho(), cfg.nu, true)?;
                loss += l / n as f64;
                d_xr.extend(gr.expect("gradient requested").into_iter().map(|v| v / n as f64));
            }
        }
    }
    seeds.push((xr, to_tensor(g.value(xr).shape(), &d_xr)));

    match cfg.kind {
        DetectorKind::MsssimAe => {}
        DetectorKind::Igd => {
            let pseudo: Vec<_> = model.aug_descriptors.iter().filter(|d| !d.is_identity()).collect();
            if pseudo.is_empty() {
                return Err(Error::Config("IGD training needs at least one non-identity strong augmentation".into()));
            }
            let mut rng = rng_from(seed, &[0x4947_44]);
            let mut views = Vec::with_capacity(n);
            for (i, im) in images.iter().enumerate() {
                let d = pseudo[rng.random_range(0..pseudo.len())];
                views.push(apply_strong(im, d, derive_seed(seed, &[i as u64]))?);
            }
            let xa = g.input(Image::batch(&views.iter().collect::<Vec<_>>()));
            let za = model.encoder_graph(&mut g, xa, pass);
            let ln = model.normal_head_graph(&mut g, z);
            let la = model.normal_head_graph(&mut g, za);
            let mut logits: Vec<f64> = g.value(ln).data().iter().map(|&v| v as f64).collect();
            logits.extend(g.value(la).data().iter().map(|&v| v as f64));
            let targets: Vec<f64> = (0..2 * n).map(|i| if i < n { 1.0 } else { 0.0 }).collect();
            let (bce, d) = binary_cross_entropy_logits(&logits, &targets)?;
            loss += bce;
            seeds.push((ln, to_tensor(g.value(ln).shape(), &d[..n])));
            seeds.push((la, to_tensor(g.value(la).shape(), &d[n..])));
        }
        DetectorKind::Fanogan => {
            let z2 = model.encoder_graph(&mut g, xr, pass);
            let a = g.value(z).data();
            let b = g.value(z2).data();
            let total = a.len() as f64;
            let mut dz2 = Vec::with_capacity(a.len());
            for (p, q) in a.iter().zip(b) {
                let d = *q as f64 - *p as f64;
                loss += cfg.kappa * d * d / total;
                dz2.push(2.0 * cfg.kappa * d / total);
            }
            let dz: Vec<f64> = dz2.iter().map(|v| -v).collect();
            seeds.push((z2, to_tensor(g.value(z2).shape(), &dz2)));
            seeds.push((z, to_tensor(g.value(z).shape(), &dz)));
        }
    }
    Ok((loss, g.backward(seeds).into_params()))
}

/// Trains a detector of kind `cfg.kind` starting from `init` (a pretrained
/// bundle or a fresh one for the ablation baseline). At local scale the
/// instances are random crops of side `init.config.input_size`.
pub fn train_detector(
    init: &ModelBundle,
    dataset: &[ImageSample],
    cfg: &DetectorConfig,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<(DetectorBundle, Vec<DetectorEpochLog>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if let Some(s) = dataset.iter().find(|s| s.label != Label::Normal) {
        return Err(Error::Data(format!("training sample {} is labelled {:?}; training data must be normal", s.id, s.label)));
    }
    let size = init.config.input_size;
    let image_size = dataset[0].pixels.height();
    if cfg.instance_size(image_size) != size {
        return Err(Error::Shape(format!(
            "{:?} detector on {image_size}-pixel images needs a {}-pixel model, got {size}",
            cfg.scale,
            cfg.instance_size(image_size)
        )));
    }
    if cfg.scale == DetectorScale::Global {
        check_training_set(dataset, &init.config)?;
    }
    let mut model = init.clone();
    let per_epoch = match cfg.scale {
        DetectorScale::Global => dataset.len(),
        DetectorScale::Local => dataset.len() * cfg.crops_per_image,
    };
    let b = cfg.batch_size.min(per_epoch);
    let steps = per_epoch / b;
    let total = cfg.epochs * steps;
    let mut opt = match cfg.optimizer {
        OptimizerKind::Sgd => {
            Optimizer::Sgd(Sgd::new(SgdConfig { lr: cfg.lr, momentum: cfg.momentum, weight_decay: 0.0, cosine: true }, total))
        }
        OptimizerKind::Adam => Optimizer::Adam(Adam::new(AdamConfig { lr: cfg.lr, cosine: true, ..Default::default() }, total)),
    };
    let frozen_ids: Vec<bool> = model.params.ids().map(|id| cfg.freeze_encoder && model.is_encoder_param(id)).collect();
    let freeze = cfg.freeze_encoder;
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let pool: Vec<Image> = match cfg.scale {
            DetectorScale::Global => Vec::new(),
            DetectorScale::Local => random_crops(dataset, size, cfg.crops_per_image, derive_seed(cfg.seed, &[0x4352_4f50, epoch as u64]))?
                .into_iter()
                .map(|s| s.pixels)
                .collect(),
        };
        let source: Vec<&Image> = match cfg.scale {
            DetectorScale::Global => dataset.iter().map(|s| &s.pixels).collect(),
            DetectorScale::Local => pool.iter().collect(),
        };
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut rng_from(cfg.seed, &[0x4445_5445, epoch as u64]));
        let lr = opt.current_lr();
        let mut sum = 0.0;
        for step in 0..steps {
            let images: Vec<&Image> = order[step * b..(step + 1) * b].iter().map(|&i| source[i]).collect();
            let mut pass = Pass::train();
            let (loss, grads) = detector_step(&model, cfg, &images, derive_seed(cfg.seed, &[epoch as u64, step as u64]), &mut pass)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite detector loss at epoch {epoch}, step {step}")));
            }
            opt.step(&mut model.params, &grads, &|id| frozen_ids[id.index()]);
            if !freeze {
                model.apply_bn_updates(pass);
            }
            if !model.params.all_finite() {
                return Err(Error::Numerical(format!("detector parameters diverged at epoch {epoch}, step {step}")));
            }
            sum += loss;
        }
        let entry = DetectorEpochLog { epoch, loss: sum / steps as f64, lr, wall_time: start.elapsed().as_secs_f64() };
        log::info!("detector epoch {epoch}: loss {:.4}", entry.loss);
        if let Some(sink) = log_sink.as_deref_mut() {
            let line = serde_json::to_string(&entry)?;
            writeln!(sink, "{line}").map_err(|e| Error::Data(format!("cannot write training log: {e}")))?;
        }
        log.push(entry);
    }
    Ok((DetectorBundle { config: cfg.clone(), model, trained: true }, log))
}

/// Normality probabilities (IGD head) of model-sized inputs.
pub fn normality(bundle: &DetectorBundle, images: &[&Image]) -> Result<Vec<f64>> {
    let z = bundle.model.encode(images)?;
    Ok(bundle.model.classify_normal(&z)?.into_iter().map(f64::from).collect())
}
