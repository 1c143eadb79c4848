//! Loss terms of the CCD objective, evaluated in `f64` with closed-form
//! gradients. Embedding matrices are row-major `[rows, dim]` slices.

use crate::error::{Error, Result};

/// Tolerance on `|‖z‖ - 1|` accepted for embeddings entering the contrastive loss.
pub const UNIT_NORM_TOL: f64 = 1e-3;

/// Value and gradients of [`contrastive_distribution_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrad {
    pub loss: f64,
    pub d_anchor: Vec<f64>,
    pub d_positive: Vec<f64>,
    /// Same layout as the negatives input: `[n_anchors, n_negatives, dim]`.
    pub d_negative: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_unit_rows(name: &str, rows: &[f64], dim: usize) -> Result<()> {
    for (i, r) in rows.chunks(dim).enumerate() {
        let norm = dot(r, r).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Data(format!("{name} row {i} has norm {norm:.6}, expected unit length")));
        }
    }
    Ok(())
}

/// Contrastive distribution loss.
///
/// For anchor `a`, positive `p` and negatives `n_i`:
/// `-log(exp(a·p/τ) / (exp(a·p/τ) + Σ_i exp(a·n_i/τ)))`, averaged over anchors.
/// `negatives` is `[n_anchors, m, dim]` with `m ≥ 1`.
pub fn contrastive_distribution_loss(
    anchors: &[f64],
    positives: &[f64],
    negatives: &[f64],
    dim: usize,
    tau: f64,
) -> Result<ContrastiveGrad> {
    if dim == 0 || anchors.is_empty() || !anchors.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!("anchors of length {} with dim {dim}", anchors.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let n = anchors.len() / dim;
    if positives.len() != anchors.len() {
        return Err(Error::Shape(format!(
            "{} anchors but {} positives",
            n,
            positives.len() / dim.max(1)
        )));
    }
    if negatives.is_empty() {
        return Err(Error::Data("contrastive loss needs at least one negative".into()));
    }
    if !negatives.len().is_multiple_of(n * dim) {
        return Err(Error::Shape(format!("negatives of length {} for {n} anchors of dim {dim}", negatives.len())));
    }
    let m = negatives.len() / (n * dim);
    check_unit_rows("anchor", anchors, dim)?;
    check_unit_rows("positive", positives, dim)?;
    check_unit_rows("negative", negatives, dim)?;

    let mut loss = 0.0;
    let mut d_anchor = vec![0.0; anchors.len()];
    let mut d_positive = vec![0.0; positives.len()];
    let mut d_negative = vec![0.0; negatives.len()];
    let mut logits = vec![0.0; m + 1];
    for k in 0..n {
        let a = &anchors[k * dim..(k + 1) * dim];
        let p = &positives[k * dim..(k + 1) * dim];
        let negs = &negatives[k * m * dim..(k + 1) * m * dim];
        logits[0] = dot(a, p) / tau;
        for (i, nv) in negs.chunks(dim).enumerate() {
            logits[i + 1] = dot(a, nv) / tau;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - logits[0];

        // d loss_k / d logit_i = softmax_i - [i == 0]
        let scale = 1.0 / (n as f64 * tau);
        let w0 = ((logits[0] - lse).exp() - 1.0) * scale;
        let da = &mut d_anchor[k * dim..(k + 1) * dim];
        for t in 0..dim {
            da[t] += w0 * p[t];
            d_positive[k * dim + t] += w0 * a[t];
        }
        for (i, nv) in negs.chunks(dim).enumerate() {
            let wi = (logits[i + 1] - lse).exp() * scale;
            let dn = &mut d_negative[(k * m + i) * dim..(k * m + i + 1) * dim];
            for t in 0..dim {
                da[t] += wi * nv[t];
                dn[t] += wi * a[t];
            }
        }
    }
    Ok(ContrastiveGrad { loss: loss / n as f64, d_anchor, d_positive, d_negative })
}

/// Contrastive loss with in-batch negatives: anchor `k` is contrasted against
/// the positives of every other row (`M = B - 1`). Returns the loss and the
/// gradients with respect to anchors and positives.
pub fn in_batch_contrastive_loss(
    anchors: &[f64],
    positives: &[f64],
    dim: usize,
    tau: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = anchors.len() / dim.max(1);
    if n < 2 {
        return Err(Error::Data(format!("in-batch negatives need at least 2 rows, got {n}")));
    }
    let mut negatives = Vec::with_capacity(n * (n - 1) * dim);
    for k in 0..n {
        for i in (0..n).filter(|&i| i != k) {
            negatives.extend_from_slice(&positives[i * dim..(i + 1) * dim]);
        }
    }
    let g = contrastive_distribution_loss(anchors, positives, &negatives, dim, tau)?;
    let mut d_positive = g.d_positive;
    for k in 0..n {
        for (slot, i) in (0..n).filter(|&i| i != k).enumerate() {
            let src = &g.d_negative[(k * (n - 1) + slot) * dim..(k * (n - 1) + slot + 1) * dim];
            for t in 0..dim {
                d_positive[i * dim + t] += src[t];
            }
        }
    }
    Ok((g.loss, g.d_anchor, d_positive))
}

/// Mean cross-entropy `-E[log p[label]]` over probability rows, with its
/// gradient with respect to the probabilities.
pub fn cross_entropy_probs(probs: &[f64], classes: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    if classes == 0 || probs.len() != labels.len() * classes {
        return Err(Error::Arity { expected: labels.len() * classes, got: probs.len() });
    }
    if labels.is_empty() {
        return Err(Error::Data("cross-entropy over an empty batch".into()));
    }
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Arity { expected: classes, got: y + 1 });
        }
        let row = &probs[i * classes..(i + 1) * classes];
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!("row {i} is not a probability vector (sum {sum})")));
        }
        let p = row[y].max(f64::MIN_POSITIVE);
        loss -= p.ln();
        grad[i * classes + y] = -1.0 / (n * p);
    }
    Ok((loss / n, grad))
}

/// Cross-entropy of softmax(logits), with gradient `(softmax - onehot) / n`.
pub fn cross_entropy_logits(logits: &[f64], classes: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    if classes == 0 || logits.len() != labels.len() * classes {
        return Err(Error::Arity { expected: labels.len() * classes, got: logits.len() });
    }
    if labels.is_empty() {
        return Err(Error::Data("cross-entropy over an empty batch".into()));
    }
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = softmax_rows(logits, classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Arity { expected: classes, got: y + 1 });
        }
        let row = &mut grad[i * classes..(i + 1) * classes];
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
        row[y] -= 1.0;
        for g in row.iter_mut() {
            *g /= n;
        }
    }
    Ok((loss / n, grad))
}

/// Strong-augmentation classification loss over `[n, k]` probability rows.
pub fn augmentation_classification_loss(probs: &[f64], n_classes: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    cross_entropy_probs(probs, n_classes, labels)
}

/// Relative patch position loss over `[n, 8]` probability rows.
pub fn position_prediction_loss(probs: &[f64], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    if probs.len() != labels.len() * 8 {
        return Err(Error::Arity { expected: 8, got: probs.len() / labels.len().max(1) });
    }
    cross_entropy_probs(probs, 8, labels)
}

/// Binary cross-entropy on logits with targets in `[0, 1]`; gradient with
/// respect to the logits.
pub fn binary_cross_entropy_logits(logits: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::Shape(format!("{} logits, {} targets", logits.len(), targets.len())));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.iter().zip(targets) {
        // log(1 + e^z) - t z, stable for either sign
        loss += z.max(0.0) - t * z + (-z.abs()).exp().ln_1p();
        grad.push((sigmoid(z) - t) / n);
    }
    Ok((loss / n, grad))
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(classes) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Weighted sum of the three CCD terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub l_con: f64,
    pub l_cla: f64,
    pub l_pos: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub con: f64,
    pub cla: f64,
    pub pos: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { con: 1.0, cla: 1.0, pos: 1.0 }
    }
}

impl LossBreakdown {
    pub fn combine(l_con: f64, l_cla: f64, l_pos: f64, w: &LossWeights) -> Self {
        Self { l_con, l_cla, l_pos, total: w.con * l_con + w.cla * l_cla + w.pos * l_pos }
    }

    pub fn is_finite(&self) -> bool {
        self.l_con.is_finite() && self.l_cla.is_finite() && self.l_pos.is_finite() && self.total.is_finite()
    }
}
