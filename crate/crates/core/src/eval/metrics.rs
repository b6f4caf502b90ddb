use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary confusion counts. Merging is associative and commutative, so counts
/// from shards can be combined in any order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_predictions(predicted: &[bool], truth: &[bool]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::contract("predictions and ground truth differ in length"));
        }
        let mut c = Self::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a ratio had a zero denominator and was defined as 0.
    pub degenerate: bool,
}

/// Precision `TP/(TP+FP)`, recall `TP/(TP+FN)` and their harmonic mean.
/// A ratio with an empty denominator is 0 and the result is flagged.
pub fn f1_score(c: &ConfusionCounts) -> F1Score {
    let mut degenerate = false;
    let mut ratio = |num: u64, den: u64| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    F1Score {
        precision,
        recall,
        f1,
        degenerate,
    }
}

/// Area under the step-wise precision-recall curve for one class, without
/// interpolation: `Σ_k (r_k − r_{k−1})·p_k` over tie-group ends.
/// Tied scores enter the ranking together. `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::contract("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("NaN score"));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // (recall, precision) at the end of every tie group
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / seen as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(r, p) in &points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Ok(Some(ap))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapScore {
    pub map: f64,
    /// `None` for classes without positives; they are excluded from the mean.
    pub per_class: Vec<Option<f64>>,
}

/// Mean of per-class average precision over classes with at least one positive.
pub fn map_score(classes: &[(Vec<f64>, Vec<bool>)]) -> Result<MapScore> {
    if classes.is_empty() {
        return Err(Error::contract("mAP needs at least one class"));
    }
    let per_class = classes
        .iter()
        .map(|(s, l)| average_precision(s, l))
        .collect::<Result<Vec<_>>>()?;
    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    for (k, ap) in per_class.iter().enumerate() {
        if ap.is_none() {
            log::warn!("class {k} has no positive samples; excluded from mAP");
        }
    }
    if included.is_empty() {
        return Err(Error::contract("no class has a positive sample"));
    }
    Ok(MapScore {
        map: included.iter().sum::<f64>() / included.len() as f64,
        per_class,
    })
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::contract("accuracy needs equal-length nonempty label lists"));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// `m[truth][predicted]` counts.
pub fn confusion_matrix(predicted: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if predicted.len() != truth.len() {
        return Err(Error::contract("predictions and ground truth differ in length"));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::contract(format!("label outside 0..{classes}")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}
