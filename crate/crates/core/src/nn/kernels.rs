//! Raw numeric kernels behind the graph ops. Everything here is single-threaded
//! and iterates in a fixed order, so results are bitwise reproducible.

/// `c = alpha * a * b + beta * c` for row-major `a (m x k)`, `b (k x n)`, `c (m x n)`,
/// with optional transposition of either operand.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length assertions above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn cols_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + k - pad` is in bounds.
fn valid_range(g: &ConvGeom, k: usize, ow: usize) -> (usize, usize) {
    let off = k as isize - g.pad as isize;
    let s = g.stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let hi = ((g.in_w as isize - off + s - 1) / s).clamp(0, ow as isize) as usize;
    (lo.min(hi), hi)
}

fn im2col(g: &ConvGeom, x: &[f32], cols: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.in_ch {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(g, kx, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    let start = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (v, ix) in out_row[lo..hi].iter_mut().zip((start..).step_by(g.stride)) {
                            *v = src[ix];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f32], dx: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(g, kx, ow);
                if lo >= hi {
                    continue;
                }
                let start = lo * g.stride + kx - g.pad;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let s_row = &src[oy * ow + lo..oy * ow + hi];
                    if g.stride == 1 {
                        for (d, v) in dst[start..start + hi - lo].iter_mut().zip(s_row) {
                            *d += v;
                        }
                    } else {
                        for (v, ix) in s_row.iter().zip((start..).step_by(g.stride)) {
                            dst[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution over a batch. `w` is `[out, in, k, k]`.
pub fn conv2d_forward(g: &ConvGeom, batch: usize, x: &[f32], w: &[f32], b: &[f32]) -> Vec<f32> {
    let p = g.out_h() * g.out_w();
    let kk = g.cols_rows();
    let in_sz = g.in_ch * g.in_h * g.in_w;
    let out_sz = g.out_ch * p;
    let mut y = vec![0.0f32; batch * out_sz];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; kk * p] };
    for n in 0..batch {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        let yn = &mut y[n * out_sz..(n + 1) * out_sz];
        for (o, chunk) in yn.chunks_mut(p).enumerate() {
            chunk.fill(b[o]);
        }
        let src: &[f32] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        gemm(g.out_ch, kk, p, w, false, src, false, 1.0, yn);
    }
    y
}

/// Gradients of a convolution with respect to input, weight and bias.
pub fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    need_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let p = g.out_h() * g.out_w();
    let kk = g.cols_rows();
    let in_sz = g.in_ch * g.in_h * g.in_w;
    let out_sz = g.out_ch * p;
    let mut dw = vec![0.0f32; g.out_ch * kk];
    let mut db = vec![0.0f32; g.out_ch];
    let mut dx = need_dx.then(|| vec![0.0f32; batch * in_sz]);
    let mut cols = vec![0.0f32; kk * p];
    let mut dcols = vec![0.0f32; kk * p];
    for n in 0..batch {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        let dyn_ = &dy[n * out_sz..(n + 1) * out_sz];
        for (o, chunk) in dyn_.chunks(p).enumerate() {
            db[o] += chunk.iter().sum::<f32>();
        }
        let src: &[f32] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        gemm(g.out_ch, p, kk, dyn_, false, src, true, 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_sz..(n + 1) * in_sz];
            if g.is_pointwise() {
                gemm(kk, g.out_ch, p, w, true, dyn_, false, 1.0, dxn);
            } else {
                gemm(kk, g.out_ch, p, w, true, dyn_, false, 0.0, &mut dcols);
                col2im(g, &dcols, dxn);
            }
        }
    }
    (dx, dw, db)
}
