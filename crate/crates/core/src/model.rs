//! Networks: encoder with projection head, decoder, the three classifier
//! heads, and checkpoint persistence.
//!
//! Every head consumes the L2-normalised projection output `z`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{validate_strong_set, AugmentationDescriptor};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{sigmoid, softmax_rows};
use crate::nn::{BatchStats, Graph, ParamId, ParamStore, Var};
use crate::rng::rng_from;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    StandardResnet18,
    SmallCnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    pub embed_dim: usize,
    pub input_size: usize,
    pub in_channels: usize,
    pub projection_layers: usize,
    /// Hidden width of the position and normality heads.
    pub head_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::SmallCnn,
            embed_dim: 128,
            input_size: 64,
            in_channels: 3,
            projection_layers: 2,
            head_hidden: 128,
        }
    }
}

const SMALL_CHANNELS: [usize; 4] = [32, 64, 128, 256];
const RESNET_CHANNELS: [usize; 4] = [64, 128, 256, 512];
const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;
const EVAL_CHUNK: usize = 64;

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 8 {
            return Err(Error::Config(format!("embed_dim {} must be at least 8", self.embed_dim)));
        }
        if self.input_size <= 64 && self.backbone != Backbone::SmallCnn {
            return Err(Error::Config(format!("input_size {} requires the small_cnn backbone", self.input_size)));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.downsample()) {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of {}",
                self.input_size,
                self.downsample()
            )));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::Config(format!("in_channels must be 1 or 3, got {}", self.in_channels)));
        }
        if self.projection_layers == 0 || self.head_hidden == 0 {
            return Err(Error::Config("projection_layers and head_hidden must be positive".into()));
        }
        Ok(())
    }

    /// Total spatial stride of the backbone.
    pub fn downsample(&self) -> usize {
        match self.backbone {
            Backbone::SmallCnn => 16,
            Backbone::StandardResnet18 => 32,
        }
    }

    /// Channels of the decoder's coarsest feature map.
    pub fn decoder_base(&self) -> usize {
        self.feature_dim() / 2
    }

    pub fn feature_dim(&self) -> usize {
        match self.backbone {
            Backbone::SmallCnn => SMALL_CHANNELS[3],
            Backbone::StandardResnet18 => RESNET_CHANNELS[3],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv,
    bn1: Bn,
    conv2: Conv,
    bn2: Bn,
    down: Option<(Conv, Bn)>,
}

#[derive(Debug, Clone)]
enum Backend {
    Small(Vec<(Conv, Bn)>),
    Resnet { stem: Conv, stem_bn: Bn, blocks: Vec<ResBlock> },
}

#[derive(Debug, Clone)]
struct Layout {
    backbone: Backend,
    projection: Vec<Dense>,
    projection_bn: Vec<Bn>,
    dec_fc: Dense,
    dec_convs: Vec<Conv>,
    dec_out: Conv,
    aug: Dense,
    pos: [Dense; 2],
    normal: [Dense; 2],
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut crate::rng::Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Conv {
        let w = self.store.add_he(&format!("{name}.w"), &[cout, cin, k, k], cin * k * k, self.rng);
        let b = bias.then(|| self.store.add(format!("{name}.b"), Tensor::zeros(&[cout])));
        Conv { w, b, stride, pad: k / 2 }
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn {
        Bn {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0)),
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            mean: self.store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c])),
            var: self.store.add_buffer(format!("{name}.running_var"), Tensor::full(&[c], 1.0)),
        }
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize) -> Dense {
        Dense {
            w: self.store.add_he(&format!("{name}.w"), &[fout, fin], fin, self.rng),
            b: self.store.add(format!("{name}.b"), Tensor::zeros(&[fout])),
        }
    }
}

fn build(cfg: &EncoderConfig, n_aug: usize, seed: u64) -> (ParamStore, Layout) {
    let mut rng = rng_from(seed, &[0x4d4f_4445_4c]);
    let mut b = Builder { store: ParamStore::new(), rng: &mut rng };
    let backbone = match cfg.backbone {
        Backbone::SmallCnn => {
            let mut cin = cfg.in_channels;
            let convs = SMALL_CHANNELS
                .iter()
                .enumerate()
                .map(|(i, &cout)| {
                    let c = b.conv(&format!("enc.conv{i}"), cin, cout, 3, 2, false);
                    let bn = b.bn(&format!("enc.bn{i}"), cout);
                    cin = cout;
                    (c, bn)
                })
                .collect();
            Backend::Small(convs)
        }
        Backbone::StandardResnet18 => {
            let stem = b.conv("enc.stem", cfg.in_channels, 64, 7, 2, false);
            let stem_bn = b.bn("enc.stem_bn", 64);
            let mut blocks = Vec::new();
            let mut cin = 64;
            for (stage, &cout) in RESNET_CHANNELS.iter().enumerate() {
                for blk in 0..2 {
                    let stride = if stage > 0 && blk == 0 { 2 } else { 1 };
                    let name = format!("enc.layer{}.{blk}", stage + 1);
                    let conv1 = b.conv(&format!("{name}.conv1"), cin, cout, 3, stride, false);
                    let bn1 = b.bn(&format!("{name}.bn1"), cout);
                    let conv2 = b.conv(&format!("{name}.conv2"), cout, cout, 3, 1, false);
                    let bn2 = b.bn(&format!("{name}.bn2"), cout);
                    let down = (stride != 1 || cin != cout).then(|| {
                        (b.conv(&format!("{name}.down"), cin, cout, 1, stride, false), b.bn(&format!("{name}.down_bn"), cout))
                    });
                    blocks.push(ResBlock { conv1, bn1, conv2, bn2, down });
                    cin = cout;
                }
            }
            Backend::Resnet { stem, stem_bn, blocks }
        }
    };
    let feat = cfg.feature_dim();
    let projection = (0..cfg.projection_layers)
        .map(|i| {
            let fout = if i + 1 == cfg.projection_layers { cfg.embed_dim } else { feat };
            b.dense(&format!("enc.proj{i}"), feat, fout)
        })
        .collect();
    let projection_bn = (0..cfg.projection_layers - 1).map(|i| b.bn(&format!("enc.proj{i}_bn"), feat)).collect();

    let side = cfg.input_size / cfg.downsample();
    let dec_fc = b.dense("dec.fc", cfg.embed_dim, cfg.decoder_base() * side * side);
    let n_up = cfg.downsample().trailing_zeros() as usize;
    let mut cin = cfg.decoder_base();
    let dec_convs = (0..n_up)
        .map(|i| {
            let cout = (cin / 2).max(16);
            let c = b.conv(&format!("dec.conv{i}"), cin, cout, 3, 1, true);
            cin = cout;
            c
        })
        .collect();
    let dec_out = b.conv("dec.out", cin, cfg.in_channels, 3, 1, true);

    let h = cfg.head_hidden;
    let d = cfg.embed_dim;
    let aug = b.dense("aug.fc", d, n_aug);
    let pos = [b.dense("pos.fc0", 2 * d, h), b.dense("pos.fc1", h, 8)];
    let normal = [b.dense("nrm.fc0", d, h), b.dense("nrm.fc1", h, 1)];
    let store = b.store;
    (store, Layout { backbone, projection, projection_bn, dec_fc, dec_convs, dec_out, aug, pos, normal })
}

/// Records whether batch norm runs on batch statistics, and collects them.
#[derive(Debug, Default)]
pub struct Pass {
    pub train: bool,
    updates: Vec<(ParamId, ParamId, BatchStats)>,
}

impl Pass {
    pub fn train() -> Self {
        Self { train: true, updates: Vec::new() }
    }

    pub fn eval() -> Self {
        Self::default()
    }
}

/// `d_z`-dimensional unit-norm embeddings; `provenance[i]` is the strong
/// augmentation class that produced row `i`, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub values: Tensor,
    pub provenance: Vec<Option<usize>>,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        self.values.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.dim(1)
    }
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: EncoderConfig,
    pub aug_descriptors: Vec<AugmentationDescriptor>,
    pub params: ParamStore,
    layout: Layout,
}

impl PartialEq for ModelBundle {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.aug_descriptors == other.aug_descriptors && self.params == other.params
    }
}

impl ModelBundle {
    /// Freshly initialised bundle; parameters are a pure function of
    /// `(config, |A_n|, seed)`.
    pub fn new(config: EncoderConfig, aug_descriptors: Vec<AugmentationDescriptor>, seed: u64) -> Result<Self> {
        config.validate()?;
        validate_strong_set(&aug_descriptors)?;
        let (params, layout) = build(&config, aug_descriptors.len(), seed);
        Ok(Self { config, aug_descriptors, params, layout })
    }

    pub fn n_aug_classes(&self) -> usize {
        self.aug_descriptors.len()
    }

    /// Number of trainable scalars whose name starts with `prefix`
    /// (`"enc."`, `"dec."`, `"aug."`, `"pos."`, `"nrm."`).
    pub fn count_params(&self, prefix: &str) -> usize {
        self.params.iter().filter(|(n, _, t)| *t && n.starts_with(prefix)).map(|(_, v, _)| v.len()).sum()
    }

    pub fn is_encoder_param(&self, id: ParamId) -> bool {
        self.params.name(id).starts_with("enc.")
    }

    fn conv(&self, g: &mut Graph, x: Var, c: &Conv) -> Var {
        let w = g.param(c.w);
        let b = match c.b {
            Some(b) => g.param(b),
            None => g.input(Tensor::zeros(&[self.params.get(c.w).dim(0)])),
        };
        g.conv2d(x, w, b, c.stride, c.pad)
    }

    fn bn(&self, g: &mut Graph, x: Var, bn: &Bn, pass: &mut Pass) -> Var {
        let gamma = g.param(bn.gamma);
        let beta = g.param(bn.beta);
        if pass.train {
            let (y, stats) = g.batch_norm(x, gamma, beta, None, BN_EPS);
            pass.updates.push((bn.mean, bn.var, stats.expect("training batch norm yields stats")));
            y
        } else {
            let running = (self.params.get(bn.mean).data(), self.params.get(bn.var).data());
            g.batch_norm(x, gamma, beta, Some(running), BN_EPS).0
        }
    }

    fn dense(&self, g: &mut Graph, x: Var, d: &Dense) -> Var {
        let w = g.param(d.w);
        let b = g.param(d.b);
        g.linear(x, w, b)
    }

    fn mlp(&self, g: &mut Graph, x: Var, layers: &[Dense]) -> Var {
        let mut h = x;
        for (i, d) in layers.iter().enumerate() {
            h = self.dense(g, h, d);
            if i + 1 < layers.len() {
                h = g.relu(h);
            }
        }
        h
    }

    /// Encoder on `[N, C, H, W]` input in `[0, 1]` of any spatial size;
    /// returns `z`.
    pub fn encoder_graph(&self, g: &mut Graph, x: Var, pass: &mut Pass) -> Var {
        let x = g.affine(x, 2.0, -1.0);
        let feat = match &self.layout.backbone {
            Backend::Small(blocks) => {
                let mut h = x;
                for (c, bn) in blocks {
                    h = self.conv(g, h, c);
                    h = self.bn(g, h, bn, pass);
                    h = g.relu(h);
                }
                h
            }
            Backend::Resnet { stem, stem_bn, blocks } => {
                let mut h = self.conv(g, x, stem);
                h = self.bn(g, h, stem_bn, pass);
                h = g.relu(h);
                h = g.max_pool3x3s2(h);
                for blk in blocks {
                    let mut y = self.conv(g, h, &blk.conv1);
                    y = self.bn(g, y, &blk.bn1, pass);
                    y = g.relu(y);
                    y = self.conv(g, y, &blk.conv2);
                    y = self.bn(g, y, &blk.bn2, pass);
                    let skip = match &blk.down {
                        Some((c, bn)) => {
                            let s = self.conv(g, h, c);
                            self.bn(g, s, bn, pass)
                        }
                        None => h,
                    };
                    let sum = g.add(y, skip);
                    h = g.relu(sum);
                }
                h
            }
        };
        let mut h = g.global_avg_pool(feat);
        let n = g.value(h).dim(0);
        let last = self.layout.projection.len() - 1;
        for (i, d) in self.layout.projection.iter().enumerate() {
            h = self.dense(g, h, d);
            if i < last {
                let width = g.value(h).dim(1);
                let h4 = g.reshape(h, vec![n, width, 1, 1]);
                let normed = self.bn(g, h4, &self.layout.projection_bn[i], pass);
                let flat = g.reshape(normed, vec![n, width]);
                h = g.relu(flat);
            }
        }
        g.l2_normalize(h)
    }

    /// Decoder from `[N, d_z]` to `[N, C, input_size, input_size]` in `(0, 1)`.
    pub fn decoder_graph(&self, g: &mut Graph, z: Var) -> Var {
        let n = g.value(z).dim(0);
        let side = self.config.input_size / self.config.downsample();
        let h = self.dense(g, z, &self.layout.dec_fc);
        let h = g.relu(h);
        let mut h = g.reshape(h, vec![n, self.config.decoder_base(), side, side]);
        for c in &self.layout.dec_convs {
            h = g.upsample2x(h);
            h = self.conv(g, h, c);
            h = g.relu(h);
        }
        let out = self.conv(g, h, &self.layout.dec_out);
        g.sigmoid(out)
    }

    /// Strong-augmentation logits `[N, |A_n|]` from a single linear layer.
    pub fn aug_head_graph(&self, g: &mut Graph, z: Var) -> Var {
        self.dense(g, z, &self.layout.aug)
    }

    /// Relative-position logits `[N, 8]` for ordered pairs.
    pub fn pos_head_graph(&self, g: &mut Graph, za: Var, zb: Var) -> Var {
        let cat = g.concat_cols(za, zb);
        self.mlp(g, cat, &self.layout.pos)
    }

    /// Normality logit `[N, 1]`.
    pub fn normal_head_graph(&self, g: &mut Graph, z: Var) -> Var {
        self.mlp(g, z, &self.layout.normal)
    }

    /// Folds the batch statistics gathered in `pass` into the running buffers.
    pub fn apply_bn_updates(&mut self, pass: Pass) {
        for (mean_id, var_id, stats) in pass.updates {
            for (r, s) in self.params.get_mut(mean_id).data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s;
            }
            for (r, s) in self.params.get_mut(var_id).data_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s;
            }
        }
    }

    fn check_images(&self, images: &[&Image], exact_size: bool) -> Result<()> {
        if images.is_empty() {
            return Err(Error::Data("cannot encode an empty batch".into()));
        }
        let first = images[0];
        for im in images {
            if !im.same_shape(first) {
                return Err(Error::Shape("batch mixes image shapes".into()));
            }
        }
        if first.channels() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "encoder expects {} channels, got {}",
                self.config.in_channels,
                first.channels()
            )));
        }
        let s = self.config.input_size;
        if exact_size && (first.height() != s || first.width() != s) {
            return Err(Error::Shape(format!(
                "encoder expects {s}x{s} images, got {}x{}",
                first.height(),
                first.width()
            )));
        }
        Ok(())
    }

    /// Evaluation-mode embeddings of equally sized images of any spatial size.
    pub fn encode_any(&self, images: &[&Image]) -> Result<EmbeddingBatch> {
        self.check_images(images, false)?;
        let mut parts = Vec::new();
        for chunk in images.chunks(EVAL_CHUNK) {
            let mut g = Graph::new(&self.params);
            let x = g.input(Image::batch(chunk));
            let z = self.encoder_graph(&mut g, x, &mut Pass::eval());
            parts.push(g.value(z).clone());
        }
        let values = Tensor::concat(&parts.iter().collect::<Vec<_>>());
        Ok(EmbeddingBatch { values, provenance: vec![None; images.len()] })
    }

    /// Evaluation-mode embeddings of `input_size` images.
    pub fn encode(&self, images: &[&Image]) -> Result<EmbeddingBatch> {
        self.check_images(images, true)?;
        self.encode_any(images)
    }

    pub fn decode(&self, z: &EmbeddingBatch) -> Result<Vec<Image>> {
        self.check_dim(z)?;
        let mut out = Vec::with_capacity(z.len());
        for start in (0..z.len()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(z.len());
            let mut g = Graph::new(&self.params);
            let zv = g.input(z.values.slice_rows(start, end));
            let y = self.decoder_graph(&mut g, zv);
            out.extend(Image::unbatch(g.value(y)));
        }
        Ok(out)
    }

    /// `decode(encode(x))`.
    pub fn reconstruct(&self, images: &[&Image]) -> Result<Vec<Image>> {
        self.decode(&self.encode(images)?)
    }

    fn check_dim(&self, z: &EmbeddingBatch) -> Result<()> {
        if z.values.shape().len() != 2 || z.dim() != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "embeddings of shape {:?}, expected [N, {}]",
                z.values.shape(),
                self.config.embed_dim
            )));
        }
        Ok(())
    }

    fn head_logits(&self, z: &EmbeddingBatch, f: impl Fn(&Self, &mut Graph, Var) -> Var) -> Result<Tensor> {
        self.check_dim(z)?;
        let mut g = Graph::new(&self.params);
        let zv = g.input(z.values.clone());
        let out = f(self, &mut g, zv);
        Ok(g.value(out).clone())
    }

    /// Softmax rows over the stored strong family.
    pub fn classify_augmentation(&self, z: &EmbeddingBatch) -> Result<Tensor> {
        let logits = self.head_logits(z, |m, g, v| m.aug_head_graph(g, v))?;
        let k = self.n_aug_classes();
        if logits.dim(1) != k {
            return Err(Error::Arity { expected: k, got: logits.dim(1) });
        }
        Ok(probabilities(&logits, k))
    }

    /// Softmax rows over the 8 neighbour slots for ordered pairs `(a, b)`.
    pub fn classify_position(&self, a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<Tensor> {
        self.check_dim(a)?;
        self.check_dim(b)?;
        if a.len() != b.len() {
            return Err(Error::Shape(format!("paired batches of {} and {} rows", a.len(), b.len())));
        }
        let mut g = Graph::new(&self.params);
        let za = g.input(a.values.clone());
        let zb = g.input(b.values.clone());
        let out = self.pos_head_graph(&mut g, za, zb);
        Ok(probabilities(g.value(out), 8))
    }

    /// Probability of the normal class per row.
    pub fn classify_normal(&self, z: &EmbeddingBatch) -> Result<Vec<f32>> {
        let logits = self.head_logits(z, |m, g, v| m.normal_head_graph(g, v))?;
        Ok(logits.data().iter().map(|&l| sigmoid(l as f64) as f32).collect())
    }
}

fn probabilities(logits: &Tensor, k: usize) -> Tensor {
    let l: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    let p = softmax_rows(&l, k);
    Tensor::new(logits.shape().to_vec(), p.into_iter().map(|v| v as f32).collect())
}

const MAGIC: &[u8; 8] = b"CCDCKPT\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    encoder: EncoderConfig,
    aug_descriptors: Vec<AugmentationDescriptor>,
    #[serde(default)]
    meta: serde_json::Value,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Serialises a bundle plus an arbitrary JSON `meta` record.
///
/// Layout: magic, `u32` version, `u32` header length, JSON header, `u32`
/// array count, then per array `u32` name length, name, `u8` trainable flag,
/// `u32` rank, `u64` dims, little-endian `f32` data; finally an FNV-1a `u64`
/// checksum of everything before it.
pub fn checkpoint_bytes(bundle: &ModelBundle, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        encoder: bundle.config.clone(),
        aug_descriptors: bundle.aug_descriptors.clone(),
        meta: meta.clone(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(bundle.params.len() as u32).to_le_bytes());
    for (name, value, trainable) in bundle.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(trainable as u8);
        out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    save_checkpoint_with(bundle, &serde_json::Value::Null, path)
}

pub fn save_checkpoint_with(bundle: &ModelBundle, meta: &serde_json::Value, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(bundle, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ModelBundle, serde_json::Value)> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes; not a checkpoint or corrupt".into()));
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    if fnv1a(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch; file is corrupt".into()));
    }
    let mut cur = Cursor { bytes: body, pos: MAGIC.len() };
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = cur.u32()? as usize;
    let header: Header = serde_json::from_slice(cur.take(hlen)?)
        .map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;
    let mut bundle = ModelBundle::new(header.encoder, header.aug_descriptors, 0)?;
    let count = cur.u32()? as usize;
    if count != bundle.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {count} arrays, configuration expects {}",
            bundle.params.len()
        )));
    }
    for _ in 0..count {
        let nlen = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(nlen)?)
            .map_err(|_| Error::Checkpoint("non-utf8 array name".into()))?
            .to_string();
        let _trainable = cur.take(1)?[0];
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let id = bundle
            .params
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected array {name}")))?;
        if bundle.params.get(id).shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "array {name} has shape {shape:?}, expected {:?}",
                bundle.params.get(id).shape()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4)?;
        let dst = bundle.params.get_mut(id).data_mut();
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            *d = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    if cur.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after the last array".into()));
    }
    if !bundle.params.all_finite() {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    Ok((bundle, header.meta))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    Ok(load_checkpoint_with(path)?.0)
}

pub fn load_checkpoint_with(path: &Path) -> Result<(ModelBundle, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{enumerate_strong, AugKind, StrongBase};
    use rand::Rng as _;

    fn bundle() -> ModelBundle {
        let descs = enumerate_strong(AugKind::Rotation, 4, &StrongBase::default(), 64).unwrap();
        ModelBundle::new(EncoderConfig::default(), descs, 1).unwrap()
    }

    fn random_images(n: usize, c: usize, s: usize, seed: u64) -> Vec<Image> {
        let mut rng = rng_from(seed, &[]);
        (0..n).map(|_| Image::new(c, s, s, (0..c * s * s).map(|_| rng.random::<f32>()).collect())).collect()
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let m = bundle();
        let mut ims = random_images(3, 3, 64, 2);
        ims.push(ims[0].clone());
        let z = m.encode(&ims.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(z.values.shape(), &[4, 128]);
        for i in 0..4 {
            let n: f32 = z.values.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        assert_eq!(z.values.row(0), z.values.row(3));
        let bad = random_images(1, 3, 32, 3);
        assert!(matches!(m.encode(&[&bad[0]]), Err(Error::Shape(_))));
    }

    #[test]
    fn decoder_shape_and_range() {
        let m = bundle();
        let ims = random_images(2, 3, 64, 4);
        let rec = m.reconstruct(&ims.iter().collect::<Vec<_>>()).unwrap();
        assert!(rec.iter().all(|r| r.same_shape(&ims[0]) && r.data().iter().all(|&v| v > 0.0 && v < 1.0)));
    }

    #[test]
    fn heads_have_expected_arity() {
        let m = bundle();
        let ims = random_images(3, 3, 64, 5);
        let z = m.encode(&ims.iter().collect::<Vec<_>>()).unwrap();
        let p = m.classify_augmentation(&z).unwrap();
        assert_eq!(p.shape(), &[3, 4]);
        for i in 0..3 {
            assert!((p.row(i).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let zb = EmbeddingBatch { values: Tensor::concat(&[&z.values.slice_rows(1, 3), &z.values.slice_rows(0, 1)]), provenance: vec![None; 3] };
        let ab = m.classify_position(&z, &zb).unwrap();
        let ba = m.classify_position(&zb, &z).unwrap();
        assert_eq!(ab.shape(), &[3, 8]);
        assert!(ab.max_abs_diff(&ba) > 0.0);
        let mut zero = m.clone();
        for name in ["nrm.fc0.w", "nrm.fc0.b", "nrm.fc1.w", "nrm.fc1.b"] {
            let id = zero.params.find(name).unwrap();
            zero.params.get_mut(id).data_mut().fill(0.0);
        }
        assert!(zero.classify_normal(&z).unwrap().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn parameter_counts_are_fixed() {
        let m = bundle();
        // Bias-free convs 387_936 with batch norm 960; projection
        // 256*256+256 + 256*128+128 with hidden batch norm 512.
        assert_eq!(m.count_params("enc."), 387_936 + 960 + 65_792 + 32_896 + 512);
        assert_eq!(m.count_params("aug."), 128 * 4 + 4);
        assert_eq!(m.count_params("pos."), 256 * 128 + 128 + 128 * 8 + 8);
        assert_eq!(m.count_params("nrm."), 128 * 128 + 128 + 128 + 1);
    }

    #[test]
    fn resnet18_backbone_matches_reference_size() {
        let descs = enumerate_strong(AugKind::Rotation, 4, &StrongBase::default(), 256).unwrap();
        let cfg = EncoderConfig { backbone: Backbone::StandardResnet18, input_size: 256, ..Default::default() };
        let m = ModelBundle::new(cfg, descs, 0).unwrap();
        let projection = 512 * 512 + 512 + 512 * 128 + 128 + 2 * 512;
        assert_eq!(m.count_params("enc.") - projection, 11_176_512);
        let ims = random_images(2, 3, 256, 1);
        let z = m.encode(&ims.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(z.values.shape(), &[2, 128]);
        assert_eq!(m.decode(&z).unwrap()[0].height(), 256);
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let m = bundle();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let meta = serde_json::json!({"note": 1});
        save_checkpoint_with(&m, &meta, &p).unwrap();
        let (back, meta_back) = load_checkpoint_with(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta_back, meta);
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] ^= 0xff;
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::Checkpoint(_))));
        bytes[0] ^= 0xff;
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn small_inputs_require_small_cnn() {
        let descs = enumerate_strong(AugKind::Rotation, 4, &StrongBase::default(), 64).unwrap();
        let cfg = EncoderConfig { backbone: Backbone::StandardResnet18, ..Default::default() };
        assert!(ModelBundle::new(cfg, descs.clone(), 0).is_err());
        let cfg = EncoderConfig { embed_dim: 4, ..Default::default() };
        assert!(ModelBundle::new(cfg, descs, 0).is_err());
    }
}

#[cfg(test)]
mod grad_tests {
    use super::*;
    use crate::augment::{enumerate_strong, AugKind, StrongBase};
    use crate::losses::cross_entropy_logits;
    use rand::Rng as _;

    fn loss(m: &ModelBundle, x: &Tensor, labels: &[usize]) -> (f64, Vec<Option<Tensor>>) {
        let mut g = Graph::new(&m.params);
        let xv = g.input(x.clone());
        let z = m.encoder_graph(&mut g, xv, &mut Pass::train());
        let l = m.aug_head_graph(&mut g, z);
        let logits: Vec<f64> = g.value(l).data().iter().map(|&v| v as f64).collect();
        let (loss, d) = cross_entropy_logits(&logits, m.n_aug_classes(), labels).unwrap();
        let seed = Tensor::new(g.value(l).shape().to_vec(), d.iter().map(|&v| v as f32).collect());
        (loss, g.backward(vec![(l, seed)]).into_params())
    }

    #[test]
    fn encoder_and_head_gradients_match_finite_differences() {
        let descs = enumerate_strong(AugKind::Rotation, 4, &StrongBase::default(), 32).unwrap();
        let mut m = ModelBundle::new(EncoderConfig { input_size: 32, ..Default::default() }, descs, 3).unwrap();
        let mut rng = rng_from(1, &[]);
        let x = Tensor::new(vec![4, 3, 32, 32], (0..4 * 3 * 32 * 32).map(|_| rng.random::<f32>()).collect());
        let labels = [0, 1, 2, 3];
        let (_, grads) = loss(&m, &x, &labels);
        let mut checked = 0;
        for name in ["enc.conv0.w", "enc.conv2.w", "enc.bn3.gamma", "enc.proj0.w", "enc.proj1.w", "aug.fc.w", "aug.fc.b"] {
            let id = m.params.find(name).unwrap();
            let g = grads[id.index()].as_ref().unwrap().clone();
            let idx = (0..g.len()).max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs())).unwrap();
            let h = 1e-2f32;
            let orig = m.params.get(id).data()[idx];
            m.params.get_mut(id).data_mut()[idx] = orig + h;
            let lp = loss(&m, &x, &labels).0;
            m.params.get_mut(id).data_mut()[idx] = orig - h;
            let lm = loss(&m, &x, &labels).0;
            m.params.get_mut(id).data_mut()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h as f64);
            let an = g.data()[idx] as f64;
            assert!((fd - an).abs() <= 0.05 * an.abs().max(1e-4), "{name}[{idx}]: fd {fd} analytic {an}");
            checked += 1;
        }
        assert_eq!(checked, 7);
    }
}
