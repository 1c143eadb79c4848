//! Brute-force reference implementations shared by the integration tests.
//! None of these reuse library code.

#![allow(dead_code)]

use ccd_core::image::Mask;

/// AUROC by comparing every positive against every negative.
pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

pub fn pixel_iou(a: &Mask, b: &Mask) -> f64 {
    let mut inter = 0;
    let mut union = 0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(y, x), b.get(y, x));
            if p && q {
                inter += 1;
            }
            if p || q {
                union += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn flood(mask: &Mask, label: &mut [usize], y: usize, x: usize, id: usize, out: &mut Vec<(usize, usize)>) {
    let w = mask.width();
    if label[y * w + x] != 0 || !mask.get(y, x) {
        return;
    }
    label[y * w + x] = id;
    out.push((y, x));
    for dy in [-1i32, 0, 1] {
        for dx in [-1i32, 0, 1] {
            let (ny, nx) = (y as i32 + dy, x as i32 + dx);
            if ny >= 0 && nx >= 0 && (ny as usize) < mask.height() && (nx as usize) < w {
                flood(mask, label, ny as usize, nx as usize, id, out);
            }
        }
    }
}

/// Recursive 8-connected flood fill. Returns the mask of retained pixels and
/// `(area, (y0, x0, y1, x1))` of each retained component in raster order of
/// first pixel.
pub fn flood_fill_components(mask: &Mask, min_area: usize) -> (Mask, Vec<(usize, (usize, usize, usize, usize))>) {
    let (h, w) = (mask.height(), mask.width());
    let mut label = vec![0; h * w];
    let mut out = Mask::empty(h, w);
    let mut comps = Vec::new();
    let mut next = 1;
    for y in 0..h {
        for x in 0..w {
            if label[y * w + x] != 0 || !mask.get(y, x) {
                continue;
            }
            let mut pixels = Vec::new();
            flood(mask, &mut label, y, x, next, &mut pixels);
            next += 1;
            if pixels.len() >= min_area {
                let y0 = pixels.iter().map(|p| p.0).min().unwrap();
                let x0 = pixels.iter().map(|p| p.1).min().unwrap();
                let y1 = pixels.iter().map(|p| p.0).max().unwrap();
                let x1 = pixels.iter().map(|p| p.1).max().unwrap();
                for &(py, px) in &pixels {
                    out.set(py, px, true);
                }
                comps.push((pixels.len(), (y0, x0, y1, x1)));
            }
        }
    }
    (out, comps)
}

/// Single-channel-at-a-time MS-SSIM evaluated straight from the definition:
/// a 2-D Gaussian window applied at every valid position, 2x2 mean pooling
/// between scales, contrast-structure at the fine scales and full SSIM at the
/// coarsest one, each averaged over positions and channels and clamped at zero.
pub fn reference_ms_ssim(x: &[f64], y: &[f64], c: usize, h: usize, w: usize, weights: &[f64]) -> f64 {
    let k = 11usize;
    let sigma = 1.5f64;
    let mut win = vec![0.0; k * k];
    let r = (k / 2) as f64;
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            let v = (-((i as f64 - r).powi(2) + (j as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp();
            win[i * k + j] = v;
            total += v;
        }
    }
    win.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    let (mut hh, mut ww) = (h, w);
    let mut result = 1.0;
    for (s, &weight) in weights.iter().enumerate() {
        let last = s + 1 == weights.len();
        let mut acc = 0.0;
        let mut count = 0usize;
        for ch in 0..c {
            let at = |img: &[f64], yy: usize, xx: usize| img[(ch * hh + yy) * ww + xx];
            for oy in 0..=hh - k {
                for ox in 0..=ww - k {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let g = win[i * k + j];
                            let a = at(&xs, oy + i, ox + j);
                            let b = at(&ys, oy + i, ox + j);
                            mx += g * a;
                            my += g * b;
                            sxx += g * a * a;
                            syy += g * b * b;
                            sxy += g * a * b;
                        }
                    }
                    let vx = sxx - mx * mx;
                    let vy = syy - my * my;
                    let cov = sxy - mx * my;
                    let cs = (2.0 * cov + c2) / (vx + vy + c2);
                    let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                    acc += if last { l * cs } else { cs };
                    count += 1;
                }
            }
        }
        result *= (acc / count as f64).max(0.0).powf(weight);
        if !last {
            let (nh, nw) = (hh / 2, ww / 2);
            let pool = |img: &[f64]| {
                let mut out = vec![0.0; c * nh * nw];
                for ch in 0..c {
                    for yy in 0..nh {
                        for xx in 0..nw {
                            let p = |dy: usize, dx: usize| img[(ch * hh + 2 * yy + dy) * ww + 2 * xx + dx];
                            out[(ch * nh + yy) * nw + xx] = (p(0, 0) + p(0, 1) + p(1, 0) + p(1, 1)) / 4.0;
                        }
                    }
                }
                out
            };
            xs = pool(&xs);
            ys = pool(&ys);
            hh = nh;
            ww = nw;
        }
    }
    result
}

/// Largest relative error between an analytic gradient and central finite
/// differences of `f` at `coords`. Coordinates where both are below `floor`
/// count as agreeing.
pub fn max_fd_error(f: &dyn Fn(&[f64]) -> f64, point: &[f64], analytic: &[f64], coords: &[usize], h: f64, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut p = point.to_vec();
    for &i in coords {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let down = f(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs());
        if scale < floor {
            continue;
        }
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}
