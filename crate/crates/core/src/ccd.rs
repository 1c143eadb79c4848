//! Constrained contrastive distribution pretraining: batch construction,
//! the three-term objective, and the training loop.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_strong, apply_weak, sample_patch_pair, AugmentConfig, AugmentationDescriptor, PatchPair, WeakConfig};
use crate::data::{ImageSample, Label};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{contrastive_distribution_loss, cross_entropy_logits, in_batch_contrastive_loss, LossBreakdown, LossWeights};
use crate::model::{EncoderConfig, ModelBundle, Pass};
use crate::nn::{Graph, Sgd, SgdConfig, Var};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

/// Default neighbourhood patch side: a third of the image, rounded down to a
/// multiple of 8 when that leaves at least 8 pixels.
pub fn default_patch_size(image_size: usize) -> usize {
    let third = image_size / 3;
    if third >= 8 {
        third / 8 * 8
    } else {
        third.max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CCDBatch {
    /// `a(a_j(x))` per image.
    pub anchors: Vec<Image>,
    /// `a'(a_j(x))` per image.
    pub positives: Vec<Image>,
    /// Strong index `j` used for each anchor row. Identical across the batch
    /// unless the batch was built in strict mode.
    pub strong_index: Vec<usize>,
    /// Strict mode only: for anchor `k`, the other images under `a_{j_k}` then
    /// a weak view, `B - 1` per anchor.
    pub negatives: Option<Vec<Vec<Image>>>,
    /// `a_j(x)` with independently drawn `j` per image.
    pub cla_views: Vec<Image>,
    pub cla_labels: Vec<usize>,
    pub patch_pairs: Vec<PatchPair>,
}

impl CCDBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Number of negatives each anchor is contrasted with.
    pub fn negatives_per_anchor(&self) -> usize {
        self.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOptions {
    pub patch_size: usize,
    pub strict_eq2: bool,
    /// Instance contrast on weak views of the raw images (no `a_j`).
    pub vanilla_contrast: bool,
}

/// Builds one training step's views from `images` (already at model resolution).
pub fn build_batch(
    images: &[&Image],
    descriptors: &[AugmentationDescriptor],
    weak: &WeakConfig,
    opts: BatchOptions,
    seed: u64,
) -> Result<CCDBatch> {
    let b = images.len();
    if b < 2 {
        return Err(Error::Data(format!("a CCD batch needs at least 2 images, got {b}")));
    }
    let k = descriptors.len();
    let mut rng = rng_from(seed, &[0x4241_5443]);
    let shared_j = rng.random_range(0..k);
    let strong_index: Vec<usize> =
        (0..b).map(|_| if opts.strict_eq2 { rng.random_range(0..k) } else { shared_j }).collect();
    let view_seed = |i: usize, tag: u64| derive_seed(seed, &[i as u64, tag]);

    let mut anchors = Vec::with_capacity(b);
    let mut positives = Vec::with_capacity(b);
    for (i, im) in images.iter().enumerate() {
        let strong = if opts.vanilla_contrast {
            (*im).clone()
        } else {
            apply_strong(im, &descriptors[strong_index[i]], view_seed(i, 1))?
        };
        anchors.push(apply_weak(&strong, weak, view_seed(i, 2)));
        positives.push(apply_weak(&strong, weak, view_seed(i, 3)));
    }
    let negatives = if opts.strict_eq2 {
        let mut all = Vec::with_capacity(b);
        for (a, &j) in strong_index.iter().enumerate() {
            let mut row = Vec::with_capacity(b - 1);
            for (i, im) in images.iter().enumerate().filter(|&(i, _)| i != a) {
                let s = derive_seed(seed, &[a as u64, i as u64, 4]);
                let strong = if opts.vanilla_contrast { (*im).clone() } else { apply_strong(im, &descriptors[j], s)? };
                row.push(apply_weak(&strong, weak, derive_seed(s, &[5])));
            }
            all.push(row);
        }
        Some(all)
    } else {
        None
    };
    let mut cla_views = Vec::with_capacity(b);
    let mut cla_labels = Vec::with_capacity(b);
    for (i, im) in images.iter().enumerate() {
        let j = rng.random_range(0..k);
        cla_views.push(apply_strong(im, &descriptors[j], view_seed(i, 6))?);
        cla_labels.push(j);
    }
    let patch_pairs = images
        .iter()
        .enumerate()
        .map(|(i, im)| sample_patch_pair(im, opts.patch_size, view_seed(i, 7)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CCDBatch { anchors, positives, strong_index, negatives, cla_views, cla_labels, patch_pairs })
}

/// Head outputs entering the objective, all row-major `f64`.
#[derive(Debug, Clone)]
pub struct ObjectiveInputs<'a> {
    pub dim: usize,
    pub anchors: &'a [f64],
    pub positives: &'a [f64],
    /// `[B, M, dim]`; `None` uses the other rows' positives (`M = B - 1`).
    pub negatives: Option<&'a [f64]>,
    pub cla_logits: &'a [f64],
    pub cla_labels: &'a [usize],
    pub n_classes: usize,
    pub pos_logits: &'a [f64],
    pub pos_labels: &'a [usize],
}

/// Gradients of the weighted total with respect to each input.
#[derive(Debug, Clone, Default)]
pub struct ObjectiveGrads {
    pub d_anchors: Vec<f64>,
    pub d_positives: Vec<f64>,
    pub d_negatives: Option<Vec<f64>>,
    pub d_cla_logits: Vec<f64>,
    pub d_pos_logits: Vec<f64>,
}

/// The CCD objective on embeddings and head logits. Terms with zero weight
/// are skipped and reported as 0.
pub fn ccd_objective(
    x: &ObjectiveInputs,
    weights: &LossWeights,
    tau: f64,
) -> Result<(LossBreakdown, ObjectiveGrads)> {
    let mut grads = ObjectiveGrads::default();
    let scale = |v: Vec<f64>, w: f64| v.into_iter().map(|g| g * w).collect::<Vec<_>>();
    let l_con = if weights.con != 0.0 {
        match x.negatives {
            None => {
                let (l, da, dp) = in_batch_contrastive_loss(x.anchors, x.positives, x.dim, tau)?;
                grads.d_anchors = scale(da, weights.con);
                grads.d_positives = scale(dp, weights.con);
                l
            }
            Some(neg) => {
                let g = contrastive_distribution_loss(x.anchors, x.positives, neg, x.dim, tau)?;
                grads.d_anchors = scale(g.d_anchor, weights.con);
                grads.d_positives = scale(g.d_positive, weights.con);
                grads.d_negatives = Some(scale(g.d_negative, weights.con));
                g.loss
            }
        }
    } else {
        0.0
    };
    let l_cla = if weights.cla != 0.0 {
        let (l, g) = cross_entropy_logits(x.cla_logits, x.n_classes, x.cla_labels)?;
        grads.d_cla_logits = scale(g, weights.cla);
        l
    } else {
        0.0
    };
    let l_pos = if weights.pos != 0.0 {
        let (l, g) = cross_entropy_logits(x.pos_logits, 8, x.pos_labels)?;
        grads.d_pos_logits = scale(g, weights.pos);
        l
    } else {
        0.0
    };
    Ok((LossBreakdown::combine(l_con, l_cla, l_pos, weights), grads))
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn to_tensor(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), v.iter().map(|&g| g as f32).collect())
}

/// A diverged encoder yields zero or non-finite rows after normalisation.
fn check_embeddings(v: &[f64], dim: usize) -> Result<()> {
    match v.chunks(dim).position(|r| !(r.iter().map(|x| x * x).sum::<f64>() > 0.5)) {
        Some(i) => Err(Error::Numerical(format!("embedding row {i} collapsed (zero or non-finite)"))),
        None => Ok(()),
    }
}

fn refs(v: &[Image]) -> Vec<&Image> {
    v.iter().collect()
}

/// Loss and parameter gradients of one batch; batch-norm statistics are
/// collected into `pass`.
fn batch_gradients(
    bundle: &ModelBundle,
    batch: &CCDBatch,
    weights: &LossWeights,
    tau: f64,
    pass: &mut Pass,
) -> Result<(LossBreakdown, Vec<Option<Tensor>>)> {
    let b = batch.len();
    let dim = bundle.config.embed_dim;
    let mut g = Graph::new(&bundle.params);
    let mut seeds: Vec<(Var, Tensor)> = Vec::new();

    let mut con_vars = None;
    let (mut za_v, mut zp_v, mut neg_v) = (Vec::new(), Vec::new(), None);
    if weights.con != 0.0 {
        let xa = g.input(Image::batch(&refs(&batch.anchors)));
        let za = bundle.encoder_graph(&mut g, xa, pass);
        let xp = g.input(Image::batch(&refs(&batch.positives)));
        let zp = bundle.encoder_graph(&mut g, xp, pass);
        za_v = to_f64(g.value(za));
        zp_v = to_f64(g.value(zp));
        check_embeddings(&za_v, dim)?;
        check_embeddings(&zp_v, dim)?;
        let mut zn_var = None;
        if let Some(neg) = &batch.negatives {
            let flat: Vec<&Image> = neg.iter().flatten().collect();
            let xn = g.input(Image::batch(&flat));
            let zn = bundle.encoder_graph(&mut g, xn, pass);
            let v = to_f64(g.value(zn));
            check_embeddings(&v, dim)?;
            neg_v = Some(v);
            zn_var = Some(zn);
        }
        con_vars = Some((za, zp, zn_var));
    }
    let mut cla = None;
    let mut cla_logits = Vec::new();
    if weights.cla != 0.0 {
        let xc = g.input(Image::batch(&refs(&batch.cla_views)));
        let zc = bundle.encoder_graph(&mut g, xc, pass);
        let lc = bundle.aug_head_graph(&mut g, zc);
        cla_logits = to_f64(g.value(lc));
        cla = Some(lc);
    }
    let mut pos = None;
    let mut pos_logits = Vec::new();
    let pos_labels: Vec<usize> = batch.patch_pairs.iter().map(|p| p.position_label).collect();
    if weights.pos != 0.0 {
        let pa: Vec<&Image> = batch.patch_pairs.iter().map(|p| &p.patch_a).collect();
        let pb: Vec<&Image> = batch.patch_pairs.iter().map(|p| &p.patch_b).collect();
        let xa = g.input(Image::batch(&pa));
        let za = bundle.encoder_graph(&mut g, xa, pass);
        let xb = g.input(Image::batch(&pb));
        let zb = bundle.encoder_graph(&mut g, xb, pass);
        let lp = bundle.pos_head_graph(&mut g, za, zb);
        pos_logits = to_f64(g.value(lp));
        pos = Some(lp);
    }

    let inputs = ObjectiveInputs {
        dim,
        anchors: &za_v,
        positives: &zp_v,
        negatives: neg_v.as_deref(),
        cla_logits: &cla_logits,
        cla_labels: &batch.cla_labels,
        n_classes: bundle.n_aug_classes(),
        pos_logits: &pos_logits,
        pos_labels: &pos_labels,
    };
    let (breakdown, grads) = ccd_objective(&inputs, weights, tau)?;
    if let Some((za, zp, zn)) = con_vars {
        seeds.push((za, to_tensor(&[b, dim], &grads.d_anchors)));
        seeds.push((zp, to_tensor(&[b, dim], &grads.d_positives)));
        if let (Some(zn), Some(dn)) = (zn, &grads.d_negatives) {
            seeds.push((zn, to_tensor(g.value(zn).shape(), dn)));
        }
    }
    if let Some(lc) = cla {
        seeds.push((lc, to_tensor(g.value(lc).shape(), &grads.d_cla_logits)));
    }
    if let Some(lp) = pos {
        seeds.push((lp, to_tensor(g.value(lp).shape(), &grads.d_pos_logits)));
    }
    let param_grads = if seeds.is_empty() {
        vec![None; bundle.params.len()]
    } else {
        g.backward(seeds).into_params()
    };
    Ok((breakdown, param_grads))
}

/// The weighted CCD loss of `batch` under `bundle`.
pub fn ccd_total_loss(batch: &CCDBatch, bundle: &ModelBundle, weights: &LossWeights, tau: f64) -> Result<LossBreakdown> {
    Ok(batch_gradients(bundle, batch, weights, tau, &mut Pass::train())?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CCDTrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub cosine: bool,
    pub epochs: usize,
    pub temperature: f64,
    pub loss_weights: LossWeights,
    /// Per-anchor strong index with re-augmented negatives (`O(B^2)` views).
    pub strict_eq2: bool,
    /// Replaces the distribution contrast by plain instance contrast.
    pub vanilla_contrast: bool,
    /// Reductions are always sequential in this implementation; the flag is
    /// recorded for provenance.
    pub deterministic: bool,
    /// Side of the neighbourhood patches; `None` picks [`default_patch_size`].
    pub patch_size: Option<usize>,
    pub seed: u64,
}

impl Default for CCDTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            cosine: true,
            epochs: 80,
            temperature: 0.2,
            loss_weights: LossWeights::default(),
            strict_eq2: false,
            vanilla_contrast: false,
            deterministic: true,
            patch_size: None,
            seed: 0,
        }
    }
}

impl CCDTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        let w = &self.loss_weights;
        if [w.con, w.cla, w.pos].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn patch_size_for(&self, image_size: usize) -> usize {
        self.patch_size.unwrap_or_else(|| default_patch_size(image_size))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_con: f64,
    pub l_cla: f64,
    pub l_pos: f64,
    pub total: f64,
    pub lr: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub bundle: ModelBundle,
    pub log: Vec<EpochLog>,
}

/// Checks the normal-only contract and that every image matches the encoder.
pub fn check_training_set(dataset: &[ImageSample], enc: &EncoderConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for s in dataset {
        if s.label != Label::Normal {
            return Err(Error::Data(format!("training sample {} is labelled {:?}; training data must be normal", s.id, s.label)));
        }
        let p = &s.pixels;
        if p.height() != enc.input_size || p.width() != enc.input_size || p.channels() != enc.in_channels {
            return Err(Error::Shape(format!(
                "sample {} is {}x{}x{}, encoder expects {}x{}x{}",
                s.id,
                p.channels(),
                p.height(),
                p.width(),
                enc.in_channels,
                enc.input_size,
                enc.input_size
            )));
        }
    }
    Ok(())
}

/// Self-supervised pretraining from a fresh initialisation seeded by
/// `cfg.seed`. Each epoch's mean losses are appended to `log_sink` as one
/// JSON line.
pub fn pretrain(
    dataset: &[ImageSample],
    cfg: &CCDTrainConfig,
    enc: &EncoderConfig,
    aug: &AugmentConfig,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    aug.validate()?;
    enc.validate()?;
    check_training_set(dataset, enc)?;
    let descriptors = aug.strong_set(enc.input_size)?;
    let mut bundle = ModelBundle::new(enc.clone(), descriptors, derive_seed(cfg.seed, &[0x494e_4954]))?;
    let opts = BatchOptions {
        patch_size: cfg.patch_size_for(enc.input_size),
        strict_eq2: cfg.strict_eq2,
        vanilla_contrast: cfg.vanilla_contrast,
    };
    let b = cfg.batch_size.min(dataset.len());
    if b < 2 {
        return Err(Error::Data("pretraining needs at least 2 training images".into()));
    }
    let steps_per_epoch = dataset.len() / b;
    let mut sgd = Sgd::new(
        SgdConfig { lr: cfg.lr, momentum: cfg.momentum, weight_decay: cfg.weight_decay, cosine: cfg.cosine },
        cfg.epochs * steps_per_epoch,
    );
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng_from(cfg.seed, &[0x4550_4f43, epoch as u64]));
        let mut sums = [0.0f64; 4];
        let lr = sgd.current_lr();
        for step in 0..steps_per_epoch {
            let images: Vec<&Image> = order[step * b..(step + 1) * b].iter().map(|&i| &dataset[i].pixels).collect();
            let seed = derive_seed(cfg.seed, &[epoch as u64, step as u64]);
            let batch = build_batch(&images, &bundle.aug_descriptors, &aug.weak, opts, seed)?;
            let mut pass = Pass::train();
            let (loss, grads) = batch_gradients(&bundle, &batch, &cfg.loss_weights, cfg.temperature, &mut pass)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite CCD loss at epoch {epoch}, step {step}: l_con={}, l_cla={}, l_pos={}",
                    loss.l_con, loss.l_cla, loss.l_pos
                )));
            }
            sgd.step(&mut bundle.params, &grads, &|_| false);
            bundle.apply_bn_updates(pass);
            if !bundle.params.all_finite() {
                return Err(Error::Numerical(format!("parameters diverged at epoch {epoch}, step {step}")));
            }
            for (s, v) in sums.iter_mut().zip([loss.l_con, loss.l_cla, loss.l_pos, loss.total]) {
                *s += v;
            }
        }
        let n = steps_per_epoch as f64;
        let entry = EpochLog {
            epoch,
            l_con: sums[0] / n,
            l_cla: sums[1] / n,
            l_pos: sums[2] / n,
            total: sums[3] / n,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "pretrain epoch {epoch}: l_con {:.4} l_cla {:.4} l_pos {:.4} total {:.4}",
            entry.l_con,
            entry.l_cla,
            entry.l_pos,
            entry.total
        );
        if let Some(sink) = log_sink.as_deref_mut() {
            let line = serde_json::to_string(&entry)?;
            writeln!(sink, "{line}").map_err(|e| Error::Data(format!("cannot write training log: {e}")))?;
        }
        log.push(entry);
    }
    Ok(PretrainOutput { bundle, log })
}

/// Held-out pretext accuracies `(strong augmentation, patch position)`.
/// Every image is viewed under every strong descriptor, and contributes
/// `pairs_per_image` neighbour pairs.
pub fn pretext_accuracy(
    bundle: &ModelBundle,
    images: &[&Image],
    patch_size: usize,
    pairs_per_image: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut views = Vec::new();
    let mut labels = Vec::new();
    for (i, im) in images.iter().enumerate() {
        for d in &bundle.aug_descriptors {
            views.push(apply_strong(im, d, derive_seed(seed, &[i as u64, d.class_index as u64]))?);
            labels.push(d.class_index);
        }
    }
    let probs = bundle.classify_augmentation(&bundle.encode(&refs(&views))?)?;
    let aug_acc = accuracy(&probs, &labels);

    let mut pa = Vec::new();
    let mut pb = Vec::new();
    let mut plabels = Vec::new();
    for (i, im) in images.iter().enumerate() {
        for r in 0..pairs_per_image {
            let p = sample_patch_pair(im, patch_size, derive_seed(seed, &[0x504f_53, i as u64, r as u64]))?;
            pa.push(p.patch_a);
            pb.push(p.patch_b);
            plabels.push(p.position_label);
        }
    }
    let za = bundle.encode_any(&refs(&pa))?;
    let zb = bundle.encode_any(&refs(&pb))?;
    let pos_acc = accuracy(&bundle.classify_position(&za, &zb)?, &plabels);
    Ok((aug_acc, pos_acc))
}

fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = probs.row(i);
            let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}
