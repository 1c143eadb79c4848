//! Detection and localisation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask;

/// Exact area under the ROC curve: the Mann-Whitney statistic
/// `P(s_pos > s_neg) + P(s_pos = s_neg) / 2`, via mid-ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Arity { expected: scores.len(), got: labels.len() });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("auroc scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass { n_pos, n_neg });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the mid-rank sum keeps everything integral.
    let mut rank2_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u64;
        rank2_pos += twice_mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        i = j + 1;
    }
    let twice_u = rank2_pos - (n_pos * (n_pos + 1)) as u64;
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// `|pred ∩ gt| / |pred ∪ gt|`, or 1 when both masks are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Shape(format!(
            "{}x{} prediction vs {}x{} ground truth",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        inter += (a != 0 && b != 0) as usize;
        union += (a != 0 || b != 0) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedIou {
    /// Mean IoU of groups `0..=max_group`, in order.
    pub per_group: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation across groups.
    pub std: f64,
}

/// Per-group mean IoU and the mean/std of those group means. Group ids must
/// cover `0..=max` without gaps.
pub fn grouped_mean_iou(ious: &[f64], groups: &[u32]) -> Result<GroupedIou> {
    if ious.len() != groups.len() {
        return Err(Error::Arity { expected: ious.len(), got: groups.len() });
    }
    let Some(&max) = groups.iter().max() else {
        return Err(Error::Data("no samples to group".into()));
    };
    let mut sums = vec![0.0; max as usize + 1];
    let mut counts = vec![0usize; max as usize + 1];
    for (&v, &g) in ious.iter().zip(groups) {
        sums[g as usize] += v;
        counts[g as usize] += 1;
    }
    if let Some(g) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("group {g} has no samples")));
    }
    let per_group: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let k = per_group.len() as f64;
    let mean = per_group.iter().sum::<f64>() / k;
    let std = (per_group.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k).sqrt();
    Ok(GroupedIou { per_group, mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub per_group_iou: Vec<f64>,
    pub mean_iou: Option<f64>,
    pub std_iou: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub config: serde_json::Value,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.7, 0.6, 0.1], &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.4; 6], &[true, false, true, false, true, true]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass { n_pos: 2, n_neg: 0 })));
    }

    #[test]
    fn iou_examples() {
        let mut a = Mask::empty(4, 4);
        let mut b = Mask::empty(4, 4);
        for y in 0..2 {
            for x in 0..2 {
                a.set(y, x, true);
                b.set(y + 1, x + 1, true);
            }
        }
        assert!((iou(&a, &b).unwrap() - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&Mask::empty(4, 4), &Mask::empty(4, 4)).unwrap(), 1.0);
        assert!(iou(&a, &Mask::empty(3, 4)).is_err());
    }

    #[test]
    fn grouped_examples() {
        let r = grouped_mean_iou(&[1.0, 0.0, 1.0, 1.0], &[0, 0, 1, 1]).unwrap();
        assert_eq!(r.per_group, vec![0.5, 1.0]);
        assert_eq!(r.mean, 0.75);
        let one = grouped_mean_iou(&[0.2, 0.4], &[0, 0]).unwrap();
        assert!((one.mean - 0.3).abs() < 1e-12);
        assert_eq!(one.std, 0.0);
        assert!(grouped_mean_iou(&[0.2, 0.4], &[0, 2]).is_err());
    }
}
