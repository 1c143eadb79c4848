//! Multi-scale structural similarity with an analytic gradient.
//!
//! Per scale the images are filtered with a normalised Gaussian window
//! (valid region only); the contrast-structure term is averaged over
//! positions and channels, and the coarsest scale also includes luminance.
//! Scales are separated by 2x2 average pooling. Negative per-scale terms are
//! clamped to zero before exponentiation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Per-scale exponents of the original five-scale MS-SSIM.
pub const STANDARD_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsSsimConfig {
    /// One exponent per scale, finest first; sums to one.
    pub weights: Vec<f64>,
    pub window_size: usize,
    pub sigma: f64,
    pub data_range: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        Self::with_scales(5)
    }
}

impl MsSsimConfig {
    /// The first `n` standard weights, renormalised to sum to one.
    pub fn with_scales(n: usize) -> Self {
        let n = n.clamp(1, STANDARD_WEIGHTS.len());
        let sum: f64 = STANDARD_WEIGHTS[..n].iter().sum();
        Self {
            weights: STANDARD_WEIGHTS[..n].iter().map(|w| w / sum).collect(),
            window_size: 11,
            sigma: 1.5,
            data_range: 1.0,
            k1: 0.01,
            k2: 0.03,
        }
    }

    /// Most scales (at most five) that an image of `min_dim` pixels supports.
    /// Below the 11-pixel window a single scale with the largest odd window
    /// that fits (sigma shrunk in proportion) is used.
    pub fn for_size(min_dim: usize) -> Result<Self> {
        let d = Self::default();
        if min_dim >= d.window_size || min_dim < 3 {
            return d.reduced_to_fit(min_dim);
        }
        let window_size = if min_dim % 2 == 1 { min_dim } else { min_dim - 1 };
        let sigma = d.sigma * window_size as f64 / d.window_size as f64;
        Ok(Self { window_size, sigma, ..Self::with_scales(1) })
    }

    pub fn n_scales(&self) -> usize {
        self.weights.len()
    }

    /// Smallest image side compatible with this configuration.
    pub fn min_size(&self) -> usize {
        self.window_size << (self.n_scales().saturating_sub(1))
    }

    /// Drops the coarsest scales (renormalising the remaining weights) until
    /// an image of `min_dim` pixels fits.
    pub fn reduced_to_fit(&self, min_dim: usize) -> Result<Self> {
        let mut n = self.n_scales();
        while n > 0 && (self.window_size << (n - 1)) > min_dim {
            n -= 1;
        }
        if n == 0 {
            return Err(Error::Shape(format!(
                "{min_dim}-pixel images are smaller than the {}-pixel window",
                self.window_size
            )));
        }
        if n == self.n_scales() {
            return Ok(self.clone());
        }
        let sum: f64 = self.weights[..n].iter().sum();
        Ok(Self { weights: self.weights[..n].iter().map(|w| w / sum).collect(), ..self.clone() })
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::Config("ms-ssim needs at least one scale".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || self.weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Config(format!("ms-ssim weights must be non-negative and sum to 1, got {sum}")));
        }
        if self.window_size.is_multiple_of(2) || self.window_size == 0 {
            return Err(Error::Config("ms-ssim window size must be odd".into()));
        }
        if !(self.sigma > 0.0 && self.data_range > 0.0) {
            return Err(Error::Config("ms-ssim sigma and data range must be positive".into()));
        }
        Ok(())
    }

    fn kernel(&self) -> Vec<f64> {
        let r = (self.window_size / 2) as f64;
        let mut g: Vec<f64> = (0..self.window_size)
            .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= s);
        g
    }
}

/// Planar `f64` image view.
#[derive(Debug, Clone, Copy)]
pub struct Dims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn of(im: &Image) -> Self {
        Self { channels: im.channels(), height: im.height(), width: im.width() }
    }

    fn len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = g.iter().zip(&row[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (i, gi) in g.iter().enumerate() {
            let src_row = &tmp[(y + i) * ow..(y + i + 1) * ow];
            let dst = &mut out[y * ow..(y + 1) * ow];
            for x in 0..ow {
                dst[x] += gi * src_row[x];
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads an `oh x ow` gradient back to `h x w`.
fn filter_valid_adjoint(grad: &[f64], h: usize, w: usize, g: &[f64], out: &mut [f64]) {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..oh {
        let src = &grad[y * ow..(y + 1) * ow];
        for (i, gi) in g.iter().enumerate() {
            let dst = &mut tmp[(y + i) * ow..(y + i + 1) * ow];
            for x in 0..ow {
                dst[x] += gi * src[x];
            }
        }
    }
    for y in 0..h {
        let row = &tmp[y * ow..(y + 1) * ow];
        let dst = &mut out[y * w..(y + 1) * w];
        for x in 0..ow {
            for (i, gi) in g.iter().enumerate() {
                dst[x + i] += gi * row[x];
            }
        }
    }
}

fn avg_pool2(src: &[f64], d: Dims) -> (Vec<f64>, Dims) {
    let nd = Dims { channels: d.channels, height: d.height / 2, width: d.width / 2 };
    let mut out = vec![0.0; nd.len()];
    for c in 0..d.channels {
        for y in 0..nd.height {
            for x in 0..nd.width {
                let base = (c * d.height + 2 * y) * d.width + 2 * x;
                out[(c * nd.height + y) * nd.width + x] =
                    0.25 * (src[base] + src[base + 1] + src[base + d.width] + src[base + d.width + 1]);
            }
        }
    }
    (out, nd)
}

fn avg_pool2_adjoint(grad: &[f64], fine: Dims, out: &mut [f64]) {
    let (ch, cw) = (fine.height / 2, fine.width / 2);
    for c in 0..fine.channels {
        for y in 0..ch {
            for x in 0..cw {
                let g = 0.25 * grad[(c * ch + y) * cw + x];
                let base = (c * fine.height + 2 * y) * fine.width + 2 * x;
                out[base] += g;
                out[base + 1] += g;
                out[base + fine.width] += g;
                out[base + fine.width + 1] += g;
            }
        }
    }
}

/// Filtered moments of one channel at one scale.
struct Moments {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

struct Scale {
    x: Vec<f64>,
    y: Vec<f64>,
    dims: Dims,
    moments: Vec<Moments>,
    /// Mean contrast-structure term, or mean full SSIM at the coarsest scale.
    value: f64,
}

/// MS-SSIM of `x` against `y`, optionally with the gradient with respect to `y`.
pub fn ms_ssim_f64(x: &[f64], y: &[f64], dims: Dims, cfg: &MsSsimConfig, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    cfg.validate()?;
    if x.len() != dims.len() || y.len() != dims.len() {
        return Err(Error::Shape(format!("ms-ssim inputs of {} and {} values for {:?}", x.len(), y.len(), dims)));
    }
    if dims.height.min(dims.width) < cfg.min_size() {
        return Err(Error::Shape(format!(
            "{}x{} image too small for {} scales with window {} (needs {})",
            dims.height,
            dims.width,
            cfg.n_scales(),
            cfg.window_size,
            cfg.min_size()
        )));
    }
    let g = cfg.kernel();
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let m = cfg.n_scales();

    let mut scales: Vec<Scale> = Vec::with_capacity(m);
    let (mut xs, mut ys, mut d) = (x.to_vec(), y.to_vec(), dims);
    for j in 0..m {
        if j > 0 {
            let (nx, nd) = avg_pool2(&xs, d);
            let (ny, _) = avg_pool2(&ys, d);
            xs = nx;
            ys = ny;
            d = nd;
        }
        let plane = d.height * d.width;
        let last = j + 1 == m;
        let mut moments = Vec::with_capacity(d.channels);
        let mut acc = 0.0;
        let mut count = 0usize;
        for c in 0..d.channels {
            let px = &xs[c * plane..(c + 1) * plane];
            let py = &ys[c * plane..(c + 1) * plane];
            let sq_x: Vec<f64> = px.iter().map(|v| v * v).collect();
            let sq_y: Vec<f64> = py.iter().map(|v| v * v).collect();
            let prod: Vec<f64> = px.iter().zip(py).map(|(a, b)| a * b).collect();
            let mo = Moments {
                mu_x: filter_valid(px, d.height, d.width, &g),
                mu_y: filter_valid(py, d.height, d.width, &g),
                exx: filter_valid(&sq_x, d.height, d.width, &g),
                eyy: filter_valid(&sq_y, d.height, d.width, &g),
                exy: filter_valid(&prod, d.height, d.width, &g),
            };
            for i in 0..mo.mu_x.len() {
                let (mx, my) = (mo.mu_x[i], mo.mu_y[i]);
                let sxx = mo.exx[i] - mx * mx;
                let syy = mo.eyy[i] - my * my;
                let sxy = mo.exy[i] - mx * my;
                let cs = (2.0 * sxy + c2) / (sxx + syy + c2);
                acc += if last {
                    cs * (2.0 * mx * my + c1) / (mx * mx + my * my + c1)
                } else {
                    cs
                };
            }
            count += mo.mu_x.len();
            moments.push(mo);
        }
        scales.push(Scale { x: xs.clone(), y: ys.clone(), dims: d, moments, value: acc / count as f64 });
    }

    let clamped: Vec<f64> = scales.iter().map(|s| s.value.max(0.0)).collect();
    let value: f64 = clamped.iter().zip(&cfg.weights).map(|(v, w)| v.powf(*w)).product();
    if !want_grad {
        return Ok((value, None));
    }

    // d value / d scale_j = value * w_j / s_j  (zero where clamped)
    let mut grads_per_scale: Vec<Vec<f64>> = Vec::with_capacity(m);
    for (j, s) in scales.iter().enumerate() {
        let d = s.dims;
        let plane = d.height * d.width;
        let mut gy = vec![0.0; d.len()];
        let outer = if clamped[j] > 0.0 && value > 0.0 { value * cfg.weights[j] / clamped[j] } else { 0.0 };
        if outer != 0.0 {
            let last = j + 1 == m;
            let n_terms = (s.moments[0].mu_x.len() * d.channels) as f64;
            let gscale = outer / n_terms;
            for c in 0..d.channels {
                let mo = &s.moments[c];
                let k = mo.mu_x.len();
                let mut g_mu = vec![0.0; k];
                let mut g_eyy = vec![0.0; k];
                let mut g_exy = vec![0.0; k];
                for i in 0..k {
                    let (mx, my) = (mo.mu_x[i], mo.mu_y[i]);
                    let sxx = mo.exx[i] - mx * mx;
                    let syy = mo.eyy[i] - my * my;
                    let sxy = mo.exy[i] - mx * my;
                    let a = 2.0 * sxy + c2;
                    let b = sxx + syy + c2;
                    let cs = a / b;
                    // partials of cs with respect to sxy and syy
                    let dcs_dsxy = 2.0 / b;
                    let dcs_dsyy = -a / (b * b);
                    let (w_cs, dl_dmy) = if last {
                        let p = 2.0 * mx * my + c1;
                        let q = mx * mx + my * my + c1;
                        let l = p / q;
                        (l, cs * (2.0 * mx / q - p * 2.0 * my / (q * q)))
                    } else {
                        (1.0, 0.0)
                    };
                    let gs = gscale * w_cs;
                    g_exy[i] = gs * dcs_dsxy;
                    g_eyy[i] = gs * dcs_dsyy;
                    g_mu[i] = gs * (dcs_dsxy * (-mx) + dcs_dsyy * (-2.0 * my)) + gscale * dl_dmy;
                }
                let mut a_mu = vec![0.0; plane];
                let mut a_eyy = vec![0.0; plane];
                let mut a_exy = vec![0.0; plane];
                filter_valid_adjoint(&g_mu, d.height, d.width, &g, &mut a_mu);
                filter_valid_adjoint(&g_eyy, d.height, d.width, &g, &mut a_eyy);
                filter_valid_adjoint(&g_exy, d.height, d.width, &g, &mut a_exy);
                let px = &s.x[c * plane..(c + 1) * plane];
                let py = &s.y[c * plane..(c + 1) * plane];
                let dst = &mut gy[c * plane..(c + 1) * plane];
                for i in 0..plane {
                    dst[i] = a_mu[i] + 2.0 * py[i] * a_eyy[i] + px[i] * a_exy[i];
                }
            }
        }
        grads_per_scale.push(gy);
    }
    let mut acc = grads_per_scale.pop().expect("at least one scale");
    for j in (0..m - 1).rev() {
        let mut fine = std::mem::take(&mut grads_per_scale[j]);
        avg_pool2_adjoint(&acc, scales[j].dims, &mut fine);
        acc = fine;
    }
    Ok((value, Some(acc)))
}

/// MS-SSIM between two images of equal shape, in `[0, 1]`.
pub fn ms_ssim(x: &Image, y: &Image, cfg: &MsSsimConfig) -> Result<f64> {
    check_pair(x, y)?;
    Ok(ms_ssim_f64(&x.to_f64(), &y.to_f64(), Dims::of(x), cfg, false)?.0)
}

/// MS-SSIM and its gradient with respect to `y` (planar layout).
pub fn ms_ssim_grad(x: &Image, y: &Image, cfg: &MsSsimConfig) -> Result<(f64, Vec<f64>)> {
    check_pair(x, y)?;
    let (v, g) = ms_ssim_f64(&x.to_f64(), &y.to_f64(), Dims::of(x), cfg, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn check_pair(x: &Image, y: &Image) -> Result<()> {
    if !x.same_shape(y) {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            x.channels(),
            x.height(),
            x.width(),
            y.channels(),
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

/// Mean MS-SSIM over the non-overlapping `patch x patch` grid, with the scale
/// count reduced so that one patch fits. Optionally returns the gradient with
/// respect to `y`.
pub fn local_ms_ssim_f64(
    x: &[f64],
    y: &[f64],
    dims: Dims,
    patch: usize,
    cfg: &MsSsimConfig,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if patch == 0 || !dims.height.is_multiple_of(patch) || !dims.width.is_multiple_of(patch) {
        return Err(Error::Shape(format!(
            "patch size {patch} does not tile a {}x{} image",
            dims.height, dims.width
        )));
    }
    let cfg = cfg.reduced_to_fit(patch)?;
    let (ty, tx) = (dims.height / patch, dims.width / patch);
    let pd = Dims { channels: dims.channels, height: patch, width: patch };
    let n_tiles = (ty * tx) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; dims.len()]);
    let mut px = vec![0.0; pd.len()];
    let mut py = vec![0.0; pd.len()];
    for by in 0..ty {
        for bx in 0..tx {
            for c in 0..dims.channels {
                for yy in 0..patch {
                    let src = (c * dims.height + by * patch + yy) * dims.width + bx * patch;
                    let dst = (c * patch + yy) * patch;
                    px[dst..dst + patch].copy_from_slice(&x[src..src + patch]);
                    py[dst..dst + patch].copy_from_slice(&y[src..src + patch]);
                }
            }
            let (v, g) = ms_ssim_f64(&px, &py, pd, &cfg, want_grad)?;
            total += v;
            if let (Some(grad), Some(g)) = (grad.as_mut(), g) {
                for c in 0..dims.channels {
                    for yy in 0..patch {
                        let dst = (c * dims.height + by * patch + yy) * dims.width + bx * patch;
                        let src = (c * patch + yy) * patch;
                        for k in 0..patch {
                            grad[dst + k] += g[src + k] / n_tiles;
                        }
                    }
                }
            }
        }
    }
    Ok((total / n_tiles, grad))
}

pub fn local_ms_ssim(x: &Image, y: &Image, patch: usize, cfg: &MsSsimConfig) -> Result<f64> {
    check_pair(x, y)?;
    Ok(local_ms_ssim_f64(&x.to_f64(), &y.to_f64(), Dims::of(x), patch, cfg, false)?.0)
}
