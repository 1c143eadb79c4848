//! Experiment configuration and the end-to-end pipeline: data, CCD
//! pretraining (whole images and local crops), detector training, image
//! scoring, heatmap localisation and evaluation.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugKind, AugmentConfig};
use crate::ccd::{pretext_accuracy, pretrain, CCDTrainConfig, EpochLog};
use crate::data::{load_manifest, load_split, ImageSample, LoadOptions, Split};
use crate::detect::{local_instance_size, random_crops, DetectorBundle, DetectorConfig, DetectorEpochLog, DetectorScale};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::localize::{accumulate_windows, binarize, combine_maps, connected_components, window_grid, Binarize, Heatmap, MapScale};
use crate::losses::LossWeights;
use crate::metrics::{auroc, grouped_mean_iou, iou, EvalReport};
use crate::model::{EncoderConfig, ModelBundle};
use crate::rng::derive_seed;
use crate::synthetic::{generate_synthetic, SyntheticConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset manifest; the synthetic generator is used when absent.
    pub manifest: Option<PathBuf>,
    /// Images are resized to this side on load.
    pub image_size: usize,
    pub channels: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { manifest: None, image_size: 64, channels: 3, synthetic: SyntheticConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Pretrained,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapSelection {
    Global,
    Local,
    Both,
}

impl MapSelection {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "local" => Ok(Self::Local),
            "both" => Ok(Self::Both),
            _ => Err(Error::Config(format!("unknown map selection {s:?}"))),
        }
    }

    pub fn global(self) -> bool {
        self != Self::Local
    }

    pub fn local(self) -> bool {
        self != Self::Global
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalisationConfig {
    /// Which detector scales are trained and fused.
    pub maps: MapSelection,
    /// Global-map window; `None` is `min(32, size / 4)`.
    pub window: Option<usize>,
    /// `None` is a quarter of the global window.
    pub stride: Option<usize>,
    pub binarize: Binarize,
    /// `None` is a quarter of the squared global window.
    pub min_area: Option<usize>,
    /// Crops per training image for local CCD pretraining.
    pub local_crops_per_image: usize,
}

impl Default for LocalisationConfig {
    fn default() -> Self {
        Self {
            maps: MapSelection::Both,
            window: None,
            stride: None,
            binarize: Binarize::default(),
            min_area: None,
            local_crops_per_image: 2,
        }
    }
}

impl LocalisationConfig {
    pub fn window_for(&self, image_size: usize) -> usize {
        self.window.unwrap_or_else(|| 32.min(image_size / 4))
    }

    pub fn stride_for(&self, image_size: usize) -> usize {
        self.stride.unwrap_or_else(|| (self.window_for(image_size) / 4).max(1))
    }

    pub fn min_area_for(&self, image_size: usize) -> usize {
        self.min_area.unwrap_or_else(|| self.window_for(image_size).pow(2) / 4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Report per-group IoU using the manifest's group ids (one group
    /// otherwise).
    pub grouped: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { grouped: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub augment: AugmentConfig,
    pub model: EncoderConfig,
    pub ccd: CCDTrainConfig,
    pub detector: DetectorConfig,
    pub init: InitKind,
    pub localisation: LocalisationConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    /// Master seed; overrides the `ccd` and `detector` seeds.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSection::default(),
            augment: AugmentConfig::default(),
            model: EncoderConfig::default(),
            ccd: CCDTrainConfig::default(),
            detector: DetectorConfig { epochs: 20, ..Default::default() },
            init: InitKind::Pretrained,
            localisation: LocalisationConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Copy with the master seed pushed into the sub-configurations and the
    /// encoder input tied to the data resolution.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.ccd.seed = self.seed;
        c.detector.seed = self.seed;
        c.model.input_size = self.data.image_size;
        c.model.in_channels = self.data.channels;
        if self.data.manifest.is_none() {
            c.data.synthetic.image_size = self.data.image_size;
            c.data.synthetic.channels = self.data.channels;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.resolved();
        if self.data.manifest.is_none() {
            c.data.synthetic.validate()?;
        }
        c.augment.validate()?;
        c.model.validate()?;
        c.ccd.validate()?;
        c.detector.validate()?;
        c.localisation.binarize.validate()?;
        if c.localisation.maps.local() {
            c.local_encoder().validate()?;
        }
        let size = c.data.image_size;
        let window = c.localisation.window_for(size);
        if window == 0 || window > size {
            return Err(Error::Config(format!("localisation window {window} does not fit {size}-pixel images")));
        }
        if c.localisation.stride_for(size) == 0 {
            return Err(Error::Config("localisation stride must be positive".into()));
        }
        Ok(())
    }

    /// Encoder of the local model: the global one at crop resolution.
    pub fn local_encoder(&self) -> EncoderConfig {
        let c = self.resolved();
        EncoderConfig { input_size: local_instance_size(c.data.image_size), ..c.model }
    }

    pub fn detector_for(&self, scale: DetectorScale) -> DetectorConfig {
        DetectorConfig { scale, ..self.resolved().detector }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let c = cfg.resolved();
    match &c.data.manifest {
        Some(path) => {
            let manifest = load_manifest(path)?;
            manifest.validate()?;
            let opts = LoadOptions { image_size: c.data.image_size, channels: c.data.channels };
            Ok(Dataset { train: load_split(&manifest, Split::Train, opts)?, test: load_split(&manifest, Split::Test, opts)? })
        }
        None => {
            let (train, test) = generate_synthetic(&c.data.synthetic)?;
            Ok(Dataset { train, test })
        }
    }
}

fn reborrow<'a>(log: &'a mut Option<&mut dyn Write>) -> Option<&'a mut dyn Write> {
    match log {
        Some(w) => Some(&mut **w),
        None => None,
    }
}

#[derive(Debug, Clone)]
pub struct Models {
    pub global: ModelBundle,
    pub local: Option<ModelBundle>,
    pub global_log: Vec<EpochLog>,
    pub local_log: Vec<EpochLog>,
}

/// Crops used for local pretraining.
pub fn local_training_crops(cfg: &ExperimentConfig, train: &[ImageSample]) -> Result<Vec<ImageSample>> {
    let c = cfg.resolved();
    random_crops(train, local_instance_size(c.data.image_size), c.localisation.local_crops_per_image, derive_seed(c.seed, &[0x4c43_524f]))
}

/// CCD pretraining of the local encoder on random crops of the training set.
pub fn pretrain_local(cfg: &ExperimentConfig, train: &[ImageSample], log: Option<&mut dyn Write>) -> Result<(ModelBundle, Vec<EpochLog>)> {
    let c = cfg.resolved();
    let crops = local_training_crops(&c, train)?;
    // The configured patch side refers to whole images.
    let ccd = CCDTrainConfig { seed: derive_seed(c.seed, &[0x4c4f_4341]), patch_size: None, ..c.ccd.clone() };
    let out = pretrain(&crops, &ccd, &c.local_encoder(), &c.augment, log)?;
    Ok((out.bundle, out.log))
}

/// Freshly initialised encoder for the no-pretraining baseline.
pub fn random_model(cfg: &ExperimentConfig, enc: &EncoderConfig, stream: u64) -> Result<ModelBundle> {
    let c = cfg.resolved();
    ModelBundle::new(enc.clone(), c.augment.strong_set(enc.input_size)?, derive_seed(c.seed, &[0x5241_4e44, stream]))
}

/// Encoders the detectors start from: CCD-pretrained, or freshly
/// initialised for the no-pretraining baseline.
pub fn initial_models(cfg: &ExperimentConfig, train: &[ImageSample], mut log: Option<&mut dyn Write>) -> Result<Models> {
    let c = cfg.resolved();
    c.validate()?;
    let local = c.localisation.maps.local();
    match c.init {
        InitKind::Random => Ok(Models {
            global: random_model(&c, &c.model, 0)?,
            local: if local { Some(random_model(&c, &c.local_encoder(), 1)?) } else { None },
            global_log: Vec::new(),
            local_log: Vec::new(),
        }),
        InitKind::Pretrained => {
            let g = pretrain(train, &c.ccd, &c.model, &c.augment, reborrow(&mut log))?;
            let (local, local_log) = if local {
                let (m, l) = pretrain_local(&c, train, reborrow(&mut log))?;
                (Some(m), l)
            } else {
                (None, Vec::new())
            };
            Ok(Models { global: g.bundle, local, global_log: g.log, local_log })
        }
    }
}

#[derive(Debug, Clone)]
pub struct Detectors {
    pub global: DetectorBundle,
    pub local: Option<DetectorBundle>,
    pub global_log: Vec<DetectorEpochLog>,
    pub local_log: Vec<DetectorEpochLog>,
}

pub fn train_detectors(
    cfg: &ExperimentConfig,
    models: &Models,
    train: &[ImageSample],
    mut log: Option<&mut dyn Write>,
) -> Result<Detectors> {
    let (global, global_log) =
        crate::detect::train_detector(&models.global, train, &cfg.detector_for(DetectorScale::Global), reborrow(&mut log))?;
    let (local, local_log) = match (&models.local, cfg.localisation.maps.local()) {
        (Some(m), true) => {
            let (d, l) = crate::detect::train_detector(m, train, &cfg.detector_for(DetectorScale::Local), reborrow(&mut log))?;
            (Some(d), l)
        }
        (None, true) => return Err(Error::Config("local maps requested but no local model was prepared".into())),
        _ => (None, Vec::new()),
    };
    Ok(Detectors { global, local, global_log, local_log })
}

/// Image-level anomaly scores from the global detector.
pub fn score_samples(det: &DetectorBundle, samples: &[ImageSample]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Data("no test images to score".into()));
    }
    let images: Vec<&Image> = samples.iter().map(|s| &s.pixels).collect();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        out.extend(det.score(chunk)?);
    }
    Ok(out)
}

/// Global map: reconstruction score of each window against the same window
/// of the whole-image reconstruction.
pub fn global_map(det: &DetectorBundle, image: &Image, window: usize, stride: usize) -> Result<Heatmap> {
    let recon = det.reconstruct(&[image])?.remove(0);
    let origins = window_grid(image.height(), image.width(), window, stride)?;
    let scores = origins
        .iter()
        .map(|&(y, x)| det.region_score(&image.crop(y, x, window, window), &recon.crop(y, x, window, window)))
        .collect::<Result<Vec<_>>>()?;
    accumulate_windows(image.height(), image.width(), window, &origins, &scores, MapScale::Global)
}

/// Local map: the local detector's score of every crop of its input size.
pub fn local_map(det: &DetectorBundle, image: &Image, stride: usize) -> Result<Heatmap> {
    let window = det.input_size();
    let origins = window_grid(image.height(), image.width(), window, stride)?;
    let crops: Vec<Image> = origins.iter().map(|&(y, x)| image.crop(y, x, window, window)).collect();
    let mut scores = Vec::with_capacity(crops.len());
    for chunk in crops.chunks(64) {
        scores.extend(det.score(&chunk.iter().collect::<Vec<_>>())?);
    }
    accumulate_windows(image.height(), image.width(), window, &origins, &scores, MapScale::Local)
}

#[derive(Debug, Clone)]
pub struct Localisation {
    pub global: Option<Heatmap>,
    pub local: Option<Heatmap>,
    pub fused: Heatmap,
    /// Binarised fused map after connected-component filtering.
    pub mask: Mask,
}

pub fn localize(cfg: &ExperimentConfig, dets: &Detectors, image: &Image) -> Result<Localisation> {
    let c = cfg.resolved();
    let size = image.height().min(image.width());
    let (window, stride) = (c.localisation.window_for(size), c.localisation.stride_for(size));
    let maps = c.localisation.maps;
    let global = if maps.global() { Some(global_map(&dets.global, image, window, stride)?) } else { None };
    let local = match (&dets.local, maps.local()) {
        (Some(d), true) => Some(local_map(d, image, stride)?),
        (None, true) => return Err(Error::Config("local maps requested but no local detector is available".into())),
        _ => None,
    };
    let fused = match (&global, &local) {
        (Some(g), Some(l)) => combine_maps(g, l)?,
        (Some(m), None) | (None, Some(m)) => Heatmap { source_scale: MapScale::Fused, ..m.normalized() },
        (None, None) => unreachable!("map selection always includes one scale"),
    };
    let raw = binarize(&fused, c.localisation.binarize);
    let (mask, _) = connected_components(&raw, c.localisation.min_area_for(size));
    Ok(Localisation { global, local, fused, mask })
}

/// AUROC over all test samples plus grouped IoU over the abnormal samples
/// that carry both a ground-truth and a predicted mask.
pub fn evaluate(
    cfg: &ExperimentConfig,
    test: &[ImageSample],
    scores: &[f64],
    predicted: &[(String, Mask)],
) -> Result<EvalReport> {
    if scores.len() != test.len() {
        return Err(Error::Arity { expected: test.len(), got: scores.len() });
    }
    let labels: Vec<bool> = test.iter().map(|s| s.is_abnormal()).collect();
    let auc = auroc(scores, &labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let mut ious = Vec::new();
    let mut groups = Vec::new();
    for (id, pred) in predicted {
        let Some(s) = test.iter().find(|s| &s.id == id) else {
            return Err(Error::Data(format!("prediction for unknown sample {id}")));
        };
        let Some(gt) = &s.mask else { continue };
        ious.push(iou(pred, gt)?);
        groups.push(if cfg.eval.grouped { s.group.unwrap_or(0) } else { 0 });
    }
    let grouped = if ious.is_empty() { None } else { Some(grouped_mean_iou(&ious, &groups)?) };
    Ok(EvalReport {
        auroc: auc,
        per_group_iou: grouped.as_ref().map(|g| g.per_group.clone()).unwrap_or_default(),
        mean_iou: grouped.as_ref().map(|g| g.mean),
        std_iou: grouped.as_ref().map(|g| g.std),
        n_pos,
        n_neg: labels.len() - n_pos,
        config: serde_json::to_value(cfg.resolved())?,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub models: Models,
    pub detectors: Detectors,
    pub scores: Vec<f64>,
    pub localisations: Vec<(String, Localisation)>,
    pub report: EvalReport,
    /// Held-out `(strong augmentation, patch position)` accuracy of the
    /// global pretrained model; `None` without pretraining.
    pub pretext: Option<(f64, f64)>,
}

/// Whole pipeline in memory. `localize_abnormal` controls whether heatmaps
/// are computed for the abnormal test images.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Dataset, localize_abnormal: bool) -> Result<RunOutput> {
    let c = cfg.resolved();
    c.validate()?;
    let models = initial_models(&c, &data.train, None)?;
    let pretext = match c.init {
        InitKind::Pretrained => {
            let normals: Vec<&Image> = data.test.iter().filter(|s| !s.is_abnormal()).map(|s| &s.pixels).collect();
            let held_out = if normals.is_empty() { data.test.iter().map(|s| &s.pixels).collect() } else { normals };
            Some(pretext_accuracy(&models.global, &held_out, c.ccd.patch_size_for(c.model.input_size), 16, derive_seed(c.seed, &[0x4556_414c]))?)
        }
        InitKind::Random => None,
    };
    let detectors = train_detectors(&c, &models, &data.train, None)?;
    let scores = score_samples(&detectors.global, &data.test)?;
    let mut localisations = Vec::new();
    if localize_abnormal {
        for s in data.test.iter().filter(|s| s.is_abnormal()) {
            localisations.push((s.id.clone(), localize(&c, &detectors, &s.pixels)?));
        }
    }
    let predicted: Vec<(String, Mask)> = localisations.iter().map(|(id, l)| (id.clone(), l.mask.clone())).collect();
    let report = evaluate(&c, &data.test, &scores, &predicted)?;
    Ok(RunOutput { models, detectors, scores, localisations, report, pretext })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    BatchSize,
    StrongFamily,
    LossTerms,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "batch_size" => Ok(Self::BatchSize),
            "strong_family" => Ok(Self::StrongFamily),
            "loss_terms" => Ok(Self::LossTerms),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        }
    }

    /// Values swept when none are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Self::BatchSize => &["16", "32", "64"],
            Self::StrongFamily => &["rotation", "permutation", "cutout", "gaussian_noise"],
            Self::LossTerms => &["vanilla", "con", "con+cla", "con+cla+pos"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

/// `cfg` with one sweep value applied.
pub fn apply_sweep_value(cfg: &ExperimentConfig, axis: SweepAxis, value: &str) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    match axis {
        SweepAxis::BatchSize => {
            c.ccd.batch_size = value.parse().map_err(|_| Error::Config(format!("batch size {value:?} is not an integer")))?;
        }
        SweepAxis::StrongFamily => c.augment.strong_kind = AugKind::parse(value)?,
        SweepAxis::LossTerms => {
            let (vanilla, w) = match value {
                "vanilla" => (true, LossWeights { con: 1.0, cla: 0.0, pos: 0.0 }),
                "con" => (false, LossWeights { con: 1.0, cla: 0.0, pos: 0.0 }),
                "con+cla" => (false, LossWeights { con: 1.0, cla: 1.0, pos: 0.0 }),
                "con+cla+pos" => (false, LossWeights { con: 1.0, cla: 1.0, pos: 1.0 }),
                _ => return Err(Error::Config(format!("unknown loss-term row {value:?}"))),
            };
            c.ccd.vanilla_contrast = vanilla;
            c.ccd.loss_weights = w;
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub auroc: f64,
    pub mean_iou: Option<f64>,
}
