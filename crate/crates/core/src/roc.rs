//! ROC analysis: rank-based (Mann-Whitney) AUC with midranks for ties, an
//! exhaustive pair-counting oracle, and confusion-matrix metrics.

use serde::{Deserialize, Serialize};

use crate::cdis::CdisVolume;
use crate::error::{Error, Result};
use crate::volume::{MaskVolume, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub auc: f64,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<(f64, f64)>,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl RocResult {
    /// Trapezoidal area under `points`.
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5)
            .sum()
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::contract(format!("score {i} is not finite ({})", scores[i])));
    }
    if let Some(i) = labels.iter().position(|&l| l > 1) {
        return Err(Error::contract(format!("label {i} is {} (expected 0 or 1)", labels[i])));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc {
            n_pos,
            n_neg,
            context: None,
        });
    }
    Ok((n_pos, n_neg))
}

/// AUC from the positive-class rank sum, `(R_pos - n_pos(n_pos+1)/2) / (n_pos n_neg)`,
/// with tied scores sharing their mean rank. ROC points come from sweeping
/// the threshold down through the distinct scores.
pub fn auc_rank(scores: &[f64], labels: &[u8]) -> Result<RocResult> {
    let (n_pos, n_neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Tie groups in ascending score order.
    let mut groups: Vec<(usize, usize)> = Vec::new(); // (positives, negatives)
    let mut rank_sum_pos = 0.0f64;
    let mut start = 0;
    while start < order.len() {
        let s = scores[order[start]];
        let mut end = start;
        while end < order.len() && scores[order[end]] == s {
            end += 1;
        }
        let pos = order[start..end].iter().filter(|&&i| labels[i] == 1).count();
        // ranks start + 1 ..= end share the midrank
        let midrank = (start + 1 + end) as f64 * 0.5;
        rank_sum_pos += midrank * pos as f64;
        groups.push((pos, end - start - pos));
        start = end;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let auc = (rank_sum_pos - p * (p + 1.0) * 0.5) / (p * n);

    let mut points = Vec::with_capacity(groups.len() + 1);
    points.push((0.0, 0.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(gp, gn) in groups.iter().rev() {
        tp += gp;
        fp += gn;
        points.push((fp as f64 / n, tp as f64 / p));
    }
    Ok(RocResult {
        auc,
        points,
        n_pos,
        n_neg,
    })
}

/// Exhaustive O(n²) pair count: 1 per correctly ordered positive/negative
/// pair, 0.5 per tie.
pub fn auc_oracle(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (n_pos, n_neg) = check_inputs(scores, labels)?;
    let mut credit = 0.0f64;
    for (sp, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 1) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 0) {
            if sp > sn {
                credit += 1.0;
            } else if sp == sn {
                credit += 0.5;
            }
        }
    }
    Ok(credit / (n_pos as f64 * n_neg as f64))
}

/// AUC of voxel intensities against a mask.
pub fn volume_auc(scores: &Volume3D, mask: &MaskVolume) -> Result<RocResult> {
    if scores.dims() != mask.dims() {
        return Err(Error::contract(format!(
            "score dims {:?} do not match mask dims {:?}",
            scores.dims(),
            mask.dims()
        )));
    }
    auc_rank(scores.data(), mask.data())
}

pub fn delineation_auc(cdis: &CdisVolume, mask: &MaskVolume) -> Result<RocResult> {
    volume_auc(&cdis.signal, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    /// `None` when there are no positives.
    pub sensitivity: Option<f64>,
    /// `None` when there are no negatives.
    pub specificity: Option<f64>,
}

impl ClassificationReport {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Result<Self> {
        let total = tp + fp + tn + fn_;
        if total == 0 {
            return Err(Error::contract("classification report over zero samples"));
        }
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        Ok(Self {
            tp,
            fp,
            tn,
            fn_,
            accuracy: (tp + tn) as f64 / total as f64,
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
        })
    }
}

/// Confusion counts with `positive_class` (0 or 1) taken as positive.
pub fn classify_report(predictions: &[u8], labels: &[u8], positive_class: u8) -> Result<ClassificationReport> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::contract(format!(
            "need equal, non-empty lengths (got {} predictions, {} labels)",
            predictions.len(),
            labels.len()
        )));
    }
    if positive_class > 1 || predictions.iter().chain(labels).any(|&v| v > 1) {
        return Err(Error::contract("classes must be 0 or 1"));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == positive_class, l == positive_class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    ClassificationReport::from_counts(tp, fp, tn, fn_)
}
