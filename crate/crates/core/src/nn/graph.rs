//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every op eagerly. Loss terms are evaluated outside the
//! graph (see [`crate::losses`]); their gradients are fed back as seeds to
//! [`Graph::backward`].

use std::borrow::Cow;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Affine { x: Var, scale: f32 },
    GlobalAvgPool(Var),
    Upsample2x(Var),
    L2Normalize { x: Var, norms: Vec<f32> },
    ConcatCols(Var, Var),
    Add(Var, Var),
    Reshape(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f32>, inv_std: Vec<f32>, batch_stats: bool },
    MaxPool { x: Var, argmax: Vec<u32> },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.index()].as_ref()
    }

    /// Gradient reaching a leaf (or any node) of the graph.
    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                self.needs_grad(*x) || self.needs_grad(*w) || self.needs_grad(*b)
            }
            Op::BatchNorm { x, gamma, beta, .. } => {
                self.needs_grad(*x) || self.needs_grad(*gamma) || self.needs_grad(*beta)
            }
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Affine { x, .. }
            | Op::GlobalAvgPool(x)
            | Op::Upsample2x(x)
            | Op::Reshape(x)
            | Op::L2Normalize { x, .. }
            | Op::MaxPool { x, .. } => self.needs_grad(*x),
            Op::ConcatCols(a, b) | Op::Add(a, b) => self.needs_grad(*a) || self.needs_grad(*b),
        };
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// An input whose gradient is reported by [`Gradients::var`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(self.params.get(id)),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (oc, ic, k, k2) = self.value(w).dims4();
        assert_eq!(c, ic, "conv2d: input has {c} channels, weight expects {ic}");
        assert_eq!(k, k2);
        let geom = ConvGeom { in_ch: c, out_ch: oc, kernel: k, stride, pad, in_h: h, in_w: wd };
        let y = kernels::conv2d_forward(
            &geom,
            n,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let shape = vec![n, oc, geom.out_h(), geom.out_w()];
        self.push(Tensor::new(shape, y), Op::Conv2d { x, w, b, geom })
    }

    /// `x [N, in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, fin) = self.value(x).dims2();
        let (fout, win) = self.value(w).dims2();
        assert_eq!(fin, win, "linear: input width {fin}, weight expects {win}");
        let mut y = vec![0.0; n * fout];
        for row in y.chunks_mut(fout) {
            row.copy_from_slice(self.value(b).data());
        }
        kernels::gemm(n, fin, fout, self.value(x).data(), false, self.value(w).data(), true, 1.0, &mut y);
        self.push(Tensor::new(vec![n, fout], y), Op::Linear { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(y, Op::Sigmoid(x))
    }

    /// `scale * x + shift` with constant scalars.
    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Var {
        let y = self.value(x).map(|v| scale * v + shift);
        self.push(y, Op::Affine { x, scale })
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = (h * w) as f32;
        let data: Vec<f32> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().sum::<f32>() / hw)
            .collect();
        self.push(Tensor::new(vec![n, c], data), Op::GlobalAvgPool(x))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * h * w * 4];
        for (p, plane) in src.chunks(h * w).enumerate() {
            let dst = &mut out[p * h * w * 4..(p + 1) * h * w * 4];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        self.push(Tensor::new(vec![n, c, 2 * h, 2 * w], out), Op::Upsample2x(x))
    }

    /// Row-wise L2 normalisation of a `[N, D]` matrix.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let (_, d) = self.value(x).dims2();
        let mut norms = Vec::new();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        self.push(out, Op::L2Normalize { x, norms })
    }

    /// `[N, A] ++ [N, B] -> [N, A + B]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (n, da) = self.value(a).dims2();
        let (nb, db) = self.value(b).dims2();
        assert_eq!(n, nb, "concat_cols: row counts differ ({n} vs {nb})");
        let mut out = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        self.push(Tensor::new(vec![n, da + db], out), Op::ConcatCols(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(y, Op::Add(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let y = self.value(x).clone().reshape(shape);
        self.push(y, Op::Reshape(x))
    }

    /// Batch normalisation over `(N, H, W)`. With `running = None` the batch
    /// statistics are used and returned; otherwise the supplied running
    /// `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f32], &[f32])>,
        eps: f32,
    ) -> (Var, Option<BatchStats>) {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let m = (n * hw) as f32;
        let xs = self.value(x).data();
        let (mean, var, batch_stats) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), false),
            None => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for s_i in 0..n {
                        s += xs[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut sq = 0.0f64;
                    for s_i in 0..n {
                        sq += xs[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw]
                            .iter()
                            .map(|&v| (v as f64 - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = mu as f32;
                    var[ch] = (sq / m as f64) as f32;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0f32; xs.len()];
        for s_i in 0..n {
            for ch in 0..c {
                let off = (s_i * c + ch) * hw;
                let scale = g[ch] * inv_std[ch];
                let shift = b[ch] - mean[ch] * scale;
                for k in 0..hw {
                    out[off + k] = xs[off + k] * scale + shift;
                }
            }
        }
        let stats = batch_stats.then(|| BatchStats { mean: mean.clone(), var });
        let v = self.push(
            Tensor::new(vec![n, c, h, w], out),
            Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats },
        );
        (v, stats)
    }

    /// 3x3 max pooling, stride 2, padding 1.
    pub fn max_pool3x3s2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let oh = (h + 2 - 3) / 2 + 1;
        let ow = (w + 2 - 3) / 2 + 1;
        let xs = self.value(x).data();
        let mut out = vec![0.0f32; n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for p in 0..n * c {
            let plane = &xs[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_i = idx;
                            }
                        }
                    }
                    let o = p * oh * ow + oy * ow + ox;
                    out[o] = best;
                    argmax[o] = (p * h * w + best_i) as u32;
                }
            }
        }
        self.push(Tensor::new(vec![n, c, oh, ow], out), Op::MaxPool { x, argmax })
    }

    /// Reverse pass from the given `(node, d loss / d node)` seeds.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(v).shape(), "seed gradient shape mismatch");
            accumulate(&mut grads, v, g);
        }
        let mut param_grads: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Param(id) => {
                    match &mut param_grads[id.index()] {
                        Some(acc) => acc.add_assign(&dy),
                        slot => *slot = Some(dy.clone()),
                    }
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Conv2d { x, w, b, geom } => {
                    let n = self.value(*x).dim(0);
                    let (dx, dw, db) = kernels::conv2d_backward(
                        geom,
                        n,
                        self.value(*x).data(),
                        self.value(*w).data(),
                        dy.data(),
                        self.needs_grad(*x),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx));
                    }
                    accumulate(&mut grads, *w, Tensor::new(self.value(*w).shape().to_vec(), dw));
                    accumulate(&mut grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db));
                }
                Op::Linear { x, w, b } => {
                    let (n, fin) = self.value(*x).dims2();
                    let fout = self.value(*w).dim(0);
                    if self.needs_grad(*x) {
                        let mut dx = vec![0.0; n * fin];
                        kernels::gemm(n, fout, fin, dy.data(), false, self.value(*w).data(), false, 0.0, &mut dx);
                        accumulate(&mut grads, *x, Tensor::new(vec![n, fin], dx));
                    }
                    let mut dw = vec![0.0; fout * fin];
                    kernels::gemm(fout, n, fin, dy.data(), true, self.value(*x).data(), false, 0.0, &mut dw);
                    accumulate(&mut grads, *w, Tensor::new(vec![fout, fin], dw));
                    let mut db = vec![0.0; fout];
                    for row in dy.data().chunks(fout) {
                        for (a, g) in db.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    accumulate(&mut grads, *b, Tensor::new(vec![fout], db));
                }
                Op::Relu(x) => {
                    let mut dx = dy;
                    for (g, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if *y <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = dy;
                    for (g, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *g *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Affine { x, scale } => {
                    let dx = dy.map(|g| g * scale);
                    accumulate(&mut grads, *x, dx);
                }
                Op::GlobalAvgPool(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    let hw = shape[2] * shape[3];
                    let mut dx = Vec::with_capacity(self.value(*x).len());
                    for &g in dy.data() {
                        dx.extend(std::iter::repeat_n(g / hw as f32, hw));
                    }
                    accumulate(&mut grads, *x, Tensor::new(shape, dx));
                }
                Op::Upsample2x(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    let (h, w) = (shape[2], shape[3]);
                    let mut dx = vec![0.0f32; self.value(*x).len()];
                    for (p, plane) in dy.data().chunks(h * w * 4).enumerate() {
                        let dst = &mut dx[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(y / 2) * w + xx / 2] += plane[y * 2 * w + xx];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(shape, dx));
                }
                Op::L2Normalize { x, norms } => {
                    let d = node.value.dim(1);
                    let mut dx = dy;
                    for ((g, y), norm) in dx.data_mut().chunks_mut(d).zip(node.value.data().chunks(d)).zip(norms) {
                        let dot: f32 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                        for (gi, yi) in g.iter_mut().zip(y) {
                            *gi = (*gi - yi * dot) / norm;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(a, b) => {
                    let (n, da) = self.value(*a).dims2();
                    let db_ = self.value(*b).dim(1);
                    let mut ga = Vec::with_capacity(n * da);
                    let mut gb = Vec::with_capacity(n * db_);
                    for row in dy.data().chunks(da + db_) {
                        ga.extend_from_slice(&row[..da]);
                        gb.extend_from_slice(&row[da..]);
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![n, da], ga));
                    accumulate(&mut grads, *b, Tensor::new(vec![n, db_], gb));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, dy.reshape(shape));
                }
                Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let hw = h * w;
                    let m = (n * hw) as f32;
                    let xs = self.value(*x).data();
                    let gm = self.value(*gamma).data();
                    let dys = dy.data();
                    let mut dgamma = vec![0.0f32; c];
                    let mut dbeta = vec![0.0f32; c];
                    for s_i in 0..n {
                        for ch in 0..c {
                            let off = (s_i * c + ch) * hw;
                            for k in 0..hw {
                                let xhat = (xs[off + k] - mean[ch]) * inv_std[ch];
                                dgamma[ch] += dys[off + k] * xhat;
                                dbeta[ch] += dys[off + k];
                            }
                        }
                    }
                    if self.needs_grad(*x) {
                        let mut dx = vec![0.0f32; xs.len()];
                        for s_i in 0..n {
                            for ch in 0..c {
                                let off = (s_i * c + ch) * hw;
                                let k_scale = gm[ch] * inv_std[ch];
                                for k in 0..hw {
                                    dx[off + k] = if *batch_stats {
                                        let xhat = (xs[off + k] - mean[ch]) * inv_std[ch];
                                        k_scale / m * (m * dys[off + k] - dbeta[ch] - xhat * dgamma[ch])
                                    } else {
                                        k_scale * dys[off + k]
                                    };
                                }
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::new(vec![n, c, h, w], dx));
                    }
                    accumulate(&mut grads, *gamma, Tensor::new(vec![c], dgamma));
                    accumulate(&mut grads, *beta, Tensor::new(vec![c], dbeta));
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![0.0f32; self.value(*x).len()];
                    for (g, &src) in dy.data().iter().zip(argmax) {
                        dx[src as usize] += g;
                    }
                    accumulate(&mut grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx));
                }
            }
        }
        Gradients { params: param_grads, nodes: grads }
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}
