//! Sliding-window anomaly heatmaps, global/local fusion, binarisation and
//! connected-component filtering.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::io::write_colormap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapScale {
    Global,
    Local,
    Fused,
}

/// Per-pixel anomaly scores, row-major `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub source_scale: MapScale,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, values: Vec<f32>, source_scale: MapScale) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} heatmap", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("heatmap holds non-finite values".into()));
        }
        Ok(Self { height, width, values, source_scale })
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Row-major index of the first maximum.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// Min-max normalised copy; a constant map becomes all zeros.
    pub fn normalized(&self) -> Heatmap {
        let lo = self.values.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = self.values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        let values = if span > 0.0 {
            self.values.iter().map(|v| (v - lo) / span).collect()
        } else {
            vec![0.0; self.values.len()]
        };
        Heatmap { values, ..self.clone() }
    }
}

/// Window origins along an axis of length `len`: multiples of `stride`,
/// plus a final window flush with the far edge when the grid falls short.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|s| s + window <= len).collect();
    match out.last() {
        Some(&last) if last + window < len => out.push(len - window),
        None => out.push(0),
        _ => {}
    }
    out
}

/// Every `(y, x)` window origin for an `h x w` image.
pub fn window_grid(h: usize, w: usize, window: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if window == 0 || window > h.min(w) {
        return Err(Error::Config(format!("window {window} does not fit a {h}x{w} image")));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    let ys = window_starts(h, window, stride);
    let xs = window_starts(w, window, stride);
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect())
}

/// Spreads each window's score over the pixels it covers and divides by the
/// per-pixel coverage count.
pub fn accumulate_windows(
    h: usize,
    w: usize,
    window: usize,
    origins: &[(usize, usize)],
    scores: &[f64],
    scale: MapScale,
) -> Result<Heatmap> {
    if origins.len() != scores.len() {
        return Err(Error::Arity { expected: origins.len(), got: scores.len() });
    }
    let mut sum = vec![0.0f64; h * w];
    let mut count = vec![0u32; h * w];
    for (&(y0, x0), &s) in origins.iter().zip(scores) {
        for y in y0..y0 + window {
            for x in x0..x0 + window {
                sum[y * w + x] += s;
                count[y * w + x] += 1;
            }
        }
    }
    if count.contains(&0) {
        return Err(Error::Config("windows leave pixels uncovered".into()));
    }
    Heatmap::new(h, w, sum.iter().zip(&count).map(|(s, c)| (s / *c as f64) as f32).collect(), scale)
}

/// Heatmap of `image` from a scorer called on every window crop with its
/// origin `(y, x)`.
pub fn heatmap(
    image: &Image,
    window: usize,
    stride: usize,
    scale: MapScale,
    mut scorer: impl FnMut(&Image, usize, usize) -> Result<f64>,
) -> Result<Heatmap> {
    let (h, w) = (image.height(), image.width());
    let origins = window_grid(h, w, window, stride)?;
    let scores = origins.iter().map(|&(y, x)| scorer(&image.crop(y, x, window, window), y, x)).collect::<Result<Vec<_>>>()?;
    accumulate_windows(h, w, window, &origins, &scores, scale)
}

/// Sum of the two maps after min-max normalising each to `[0, 1]`.
pub fn combine_maps(global: &Heatmap, local: &Heatmap) -> Result<Heatmap> {
    if global.height != local.height || global.width != local.width {
        return Err(Error::Shape(format!(
            "{}x{} global map vs {}x{} local map",
            global.height, global.width, local.height, local.width
        )));
    }
    let (a, b) = (global.normalized(), local.normalized());
    Heatmap::new(global.height, global.width, a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect(), MapScale::Fused)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", content = "value", rename_all = "lowercase")]
pub enum Binarize {
    /// Keeps the top `1 - q` fraction of pixels.
    Quantile(f64),
    /// Keeps pixels strictly above the threshold.
    Fixed(f64),
}

impl Default for Binarize {
    fn default() -> Self {
        Self::Quantile(0.95)
    }
}

impl Binarize {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Quantile(q) if !(0.0..=1.0).contains(&q) => {
                Err(Error::Config(format!("binarisation quantile {q} outside [0, 1]")))
            }
            Self::Fixed(t) if !t.is_finite() => Err(Error::Config("binarisation threshold must be finite".into())),
            _ => Ok(()),
        }
    }
}

pub fn binarize(map: &Heatmap, policy: Binarize) -> Mask {
    let mut mask = Mask::empty(map.height, map.width);
    match policy {
        Binarize::Fixed(t) => {
            for (i, &v) in map.values.iter().enumerate() {
                if v as f64 > t {
                    mask.set(i / map.width, i % map.width, true);
                }
            }
        }
        Binarize::Quantile(q) => {
            let lo = map.values.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = map.values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            if !(hi > lo) {
                log::warn!("quantile binarisation of a constant heatmap yields an empty mask");
                return mask;
            }
            let n = map.values.len();
            let keep = (((1.0 - q) * n as f64).round() as usize).min(n);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| map.values[b].total_cmp(&map.values[a]).then(a.cmp(&b)));
            for &i in &order[..keep] {
                mask.set(i / map.width, i % map.width, true);
            }
        }
    }
    mask
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    /// 1-based, in raster order of each component's first pixel.
    pub label: u32,
    pub area: usize,
    /// `(y0, x0, y1, x1)`, inclusive.
    pub bbox: (usize, usize, usize, usize),
}

/// 8-connected components of `mask`; those smaller than `min_area` are
/// removed from the returned mask and the list.
pub fn connected_components(mask: &Mask, min_area: usize) -> (Mask, Vec<Component>) {
    let (h, w) = (mask.height(), mask.width());
    let mut seen = vec![false; h * w];
    let mut out = Mask::empty(h, w);
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] || mask.data()[start] == 0 {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            pixels.push(i);
            let (y, x) = (i / w, i % w);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !seen[j] && mask.data()[j] != 0 {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        if pixels.len() < min_area {
            continue;
        }
        let mut bbox = (h, w, 0, 0);
        for &i in &pixels {
            let (y, x) = (i / w, i % w);
            out.set(y, x, true);
            bbox = (bbox.0.min(y), bbox.1.min(x), bbox.2.max(y), bbox.3.max(x));
        }
        comps.push(Component { label: comps.len() as u32 + 1, area: pixels.len(), bbox });
    }
    (out, comps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapHeader {
    pub height: usize,
    pub width: usize,
    pub scale: MapScale,
    pub dtype: String,
    pub byte_order: String,
}

/// Writes `<stem>.f32` (raw little-endian), `<stem>.json` (shape and scale)
/// and `<stem>.png` (colour-mapped preview) into `dir`.
pub fn write_heatmap(dir: &Path, stem: &str, map: &Heatmap) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let raw: Vec<u8> = map.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let raw_path = dir.join(format!("{stem}.f32"));
    fs::write(&raw_path, raw).map_err(|e| Error::io(&raw_path, e))?;
    let header = HeatmapHeader {
        height: map.height,
        width: map.width,
        scale: map.source_scale,
        dtype: "float32".into(),
        byte_order: "little".into(),
    };
    let json_path = dir.join(format!("{stem}.json"));
    fs::write(&json_path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&json_path, e))?;
    write_colormap(&dir.join(format!("{stem}.png")), &map.values, map.height, map.width)
}

pub fn read_heatmap(dir: &Path, stem: &str) -> Result<Heatmap> {
    let json_path = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: HeatmapHeader = serde_json::from_str(&text)?;
    let raw_path = dir.join(format!("{stem}.f32"));
    let raw = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    if raw.len() != 4 * header.height * header.width {
        return Err(Error::Shape(format!(
            "{} holds {} bytes, header promises {}x{} float32",
            raw_path.display(),
            raw.len(),
            header.height,
            header.width
        )));
    }
    let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Heatmap::new(header.height, header.width, values, header.scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: Vec<f32>) -> Heatmap {
        Heatmap::new(h, w, v, MapScale::Global).unwrap()
    }

    #[test]
    fn windows_cover_the_border() {
        assert_eq!(window_starts(10, 4, 4), vec![0, 4, 6]);
        assert_eq!(window_starts(8, 4, 4), vec![0, 4]);
        assert_eq!(window_starts(64, 32, 4).last(), Some(&32));
        assert!(window_grid(8, 8, 9, 1).is_err());
        assert!(window_grid(8, 8, 4, 0).is_err());
    }

    #[test]
    fn constant_scorer_gives_constant_map() {
        let im = Image::filled(3, 13, 11, 0.5);
        let m = heatmap(&im, 5, 3, MapScale::Global, |_, _, _| Ok(0.7)).unwrap();
        assert!(m.values.iter().all(|v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn disjoint_windows_are_piecewise_constant() {
        let im = Image::filled(1, 8, 8, 0.0);
        let m = heatmap(&im, 4, 4, MapScale::Local, |_, y, x| Ok((y * 8 + x) as f64)).unwrap();
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(3, 7), 4.0);
        assert_eq!(m.get(7, 0), 32.0);
        assert_eq!(m.get(5, 5), 36.0);
    }

    #[test]
    fn fusion_cases() {
        let g = map(1, 4, vec![0.0, 2.0, 4.0, 1.0]);
        let zero = map(1, 4, vec![0.0; 4]);
        let f = combine_maps(&g, &zero).unwrap();
        assert_eq!(f.values, vec![0.0, 0.5, 1.0, 0.25]);
        assert_eq!(f.source_scale, MapScale::Fused);
        let f2 = combine_maps(&g, &g).unwrap();
        assert_eq!(f2.values, vec![0.0, 1.0, 2.0, 0.5]);
        assert_eq!(f2.argmax(), g.argmax());
        let a = map(1, 4, vec![1.0, 0.0, 0.0, 0.0]);
        let b = map(1, 4, vec![0.0, 0.0, 0.0, 3.0]);
        let f3 = combine_maps(&a, &b).unwrap();
        assert!(f3.values[0] >= 1.0 && f3.values[3] >= 1.0);
        assert!(combine_maps(&g, &map(2, 2, vec![0.0; 4])).is_err());
    }

    #[test]
    fn binarize_policies() {
        let m = map(1, 2, vec![0.2, 0.8]);
        assert_eq!(binarize(&m, Binarize::Fixed(0.5)).data(), &[0, 1]);
        let v: Vec<f32> = (0..100).map(|i| ((i * 37) % 100) as f32).collect();
        let q = binarize(&map(10, 10, v), Binarize::Quantile(0.95));
        assert_eq!(q.count(), 5);
        let flat = binarize(&map(10, 10, vec![1.0; 100]), Binarize::Quantile(0.95));
        assert_eq!(flat.count(), 0);
    }

    #[test]
    fn quantile_ties_break_by_index() {
        let q = binarize(&map(1, 4, vec![1.0, 2.0, 2.0, 2.0]), Binarize::Quantile(0.5));
        assert_eq!(q.data(), &[0, 1, 1, 0]);
    }

    #[test]
    fn components() {
        let mut m = Mask::empty(7, 3);
        for y in 0..3 {
            for x in 0..3 {
                m.set(y, x, true);
                m.set(y + 4, x, true);
            }
        }
        let (out, comps) = connected_components(&m, 5);
        assert_eq!(out, m);
        assert_eq!(comps.iter().map(|c| c.label).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(comps[1].bbox, (4, 0, 6, 2));
        let (empty, none) = connected_components(&m, 10);
        assert_eq!(empty.count(), 0);
        assert!(none.is_empty());

        let diag = Mask::new(2, 2, vec![1, 0, 0, 1]);
        assert_eq!(connected_components(&diag, 1).1.len(), 1);
    }

    #[test]
    fn heatmap_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Heatmap::new(2, 3, vec![0.0, 1.5, -2.0, 3.25, 4.0, 5.0], MapScale::Fused).unwrap();
        write_heatmap(dir.path(), "a", &m).unwrap();
        assert!(dir.path().join("a.png").exists());
        assert_eq!(read_heatmap(dir.path(), "a").unwrap(), m);
    }
}
