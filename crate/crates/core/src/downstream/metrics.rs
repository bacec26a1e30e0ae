//! Segmentation and classification evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

fn check_binary(name: &str, v: &Volume) -> Result<()> {
    if v.data().iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::Param(format!("{name} volume is not binary")));
    }
    Ok(())
}

/// Overlap score `2|A n B| / (|A| + |B|)`; defined as 1.0 when both sets are
/// empty.
pub fn dice_score(pred: &Volume, target: &Volume) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "pred dims {} != target dims {}",
            pred.dims(),
            target.dims()
        )));
    }
    check_binary("pred", pred)?;
    check_binary("target", target)?;
    let mut inter = 0u64;
    let mut a = 0u64;
    let mut b = 0u64;
    for (p, t) in pred.data().iter().zip(target.data()) {
        a += (*p == 1.0) as u64;
        b += (*t == 1.0) as u64;
        inter += (*p == 1.0 && *t == 1.0) as u64;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Surface voxels of a binary volume: set voxels with at least one
/// face-adjacent background neighbor; the volume border counts as background.
fn surface_voxels(v: &Volume) -> Vec<(i64, i64, i64)> {
    let dims = v.dims();
    let inside = |d: i64, h: i64, w: i64| -> bool {
        d >= 0
            && h >= 0
            && w >= 0
            && (d as usize) < dims.d
            && (h as usize) < dims.h
            && (w as usize) < dims.w
            && v.get(d as usize, h as usize, w as usize) == 1.0
    };
    let mut out = Vec::new();
    for d in 0..dims.d as i64 {
        for h in 0..dims.h as i64 {
            for w in 0..dims.w as i64 {
                if !inside(d, h, w) {
                    continue;
                }
                let exposed = !inside(d - 1, h, w)
                    || !inside(d + 1, h, w)
                    || !inside(d, h - 1, w)
                    || !inside(d, h + 1, w)
                    || !inside(d, h, w - 1)
                    || !inside(d, h, w + 1);
                if exposed {
                    out.push((d, h, w));
                }
            }
        }
    }
    out
}

/// Nearest-rank 95th percentile of the directed surface distances from `from`
/// to `to`.
fn directed_p95(from: &[(i64, i64, i64)], to: &[(i64, i64, i64)]) -> f64 {
    let mut dists: Vec<f64> = from
        .iter()
        .map(|&(d, h, w)| {
            to.iter()
                .map(|&(td, th, tw)| {
                    let dd = (d - td) as f64;
                    let dh = (h - th) as f64;
                    let dw = (w - tw) as f64;
                    (dd * dd + dh * dh + dw * dw).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((0.95 * dists.len() as f64).ceil() as usize).clamp(1, dists.len());
    dists[rank - 1]
}

/// Symmetric 95th-percentile surface distance in voxel units. Returns None
/// when either volume has no foreground (the +infinity sentinel case).
pub fn hd95(pred: &Volume, target: &Volume) -> Result<Option<f64>> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "pred dims {} != target dims {}",
            pred.dims(),
            target.dims()
        )));
    }
    check_binary("pred", pred)?;
    check_binary("target", target)?;
    let sa = surface_voxels(pred);
    let sb = surface_voxels(target);
    if sa.is_empty() || sb.is_empty() {
        return Ok(None);
    }
    Ok(Some(directed_p95(&sa, &sb).max(directed_p95(&sb, &sa))))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsMetrics {
    pub acc: f64,
    pub auc: f64,
    pub f1: f64,
}

/// Accuracy at threshold 0.5, rank-statistic AUC with tie correction, and F1
/// of the positive class. A single-class sample set yields AUC 0.5.
pub fn cls_metrics(scores: &[(f64, u32)]) -> Result<ClsMetrics> {
    if scores.is_empty() {
        return Err(Error::Param("no samples to score".into()));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut tn = 0u64;
    let mut fneg = 0u64;
    for &(score, label) in scores {
        let pred_pos = score >= 0.5;
        match (pred_pos, label != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let n = scores.len() as f64;
    let acc = (tp + tn) as f64 / n;
    let f1 = if 2 * tp + fp + fneg == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    };

    // Rank statistic with average ranks for ties (equivalent to all-pairs
    // counting with ties worth 1/2).
    let n_pos = scores.iter().filter(|(_, l)| *l != 0).count();
    let n_neg = scores.len() - n_pos;
    let auc = if n_pos == 0 || n_neg == 0 {
        0.5
    } else {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&i, &j| scores[i].0.partial_cmp(&scores[j].0).unwrap());
        let mut ranks = vec![0.0f64; scores.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && scores[order[j + 1]].0 == scores[order[i]].0 {
                j += 1;
            }
            let avg_rank = (i + j) as f64 / 2.0 + 1.0;
            for &k in &order[i..=j] {
                ranks[k] = avg_rank;
            }
            i = j + 1;
        }
        let rank_sum_pos: f64 = scores
            .iter()
            .zip(&ranks)
            .filter(|((_, l), _)| *l != 0)
            .map(|(_, r)| r)
            .sum();
        (rank_sum_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0)
            / (n_pos as f64 * n_neg as f64)
    };
    Ok(ClsMetrics { acc, auc, f1 })
}

/// Evaluation results for one model on one dataset split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub sample_count: usize,
    /// Mean Dice over evaluated studies (segmentation).
    pub dice_mean: Option<f64>,
    /// Mean HD95 over studies where it is defined, with the count of
    /// studies it was missing for.
    pub hd95_mean: Option<f64>,
    pub hd95_missing: usize,
    pub acc: Option<f64>,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dice", self.dice_mean),
            ("acc", self.acc),
            ("auc", self.auc),
            ("f1", self.f1),
        ] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Param(format!("{name} = {v} outside [0,1]")));
                }
            }
        }
        if let Some(h) = self.hd95_mean {
            if h < 0.0 {
                return Err(Error::Param(format!("hd95 = {h} negative")));
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "-".into());
        format!(
            "task\tsamples\tdice\thd95\thd95_missing\tacc\tauc\tf1\n{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            self.task,
            self.sample_count,
            fmt(self.dice_mean),
            fmt(self.hd95_mean),
            self.hd95_missing,
            fmt(self.acc),
            fmt(self.auc),
            fmt(self.f1),
        )
    }
}
