//! Accuracy, ROC AUC and equal error rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores with binary labels (`true` = positive / fake).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet<'a> {
    pub scores: &'a [f64],
    pub labels: &'a [bool],
}

impl<'a> ScoreSet<'a> {
    pub fn new(scores: &'a [f64], labels: &'a [bool]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidArgument("scores contain NaN".into()));
        }
        Ok(ScoreSet { scores, labels })
    }

    fn counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|l| **l).count();
        (pos, self.labels.len() - pos)
    }

    fn require_both(&self, metric: &'static str) -> Result<(usize, usize)> {
        let (pos, neg) = self.counts();
        if pos == 0 {
            return Err(Error::SingleClass { metric, missing: "positive" });
        }
        if neg == 0 {
            return Err(Error::SingleClass { metric, missing: "negative" });
        }
        Ok((pos, neg))
    }
}

/// Fraction of samples where `[score ≥ threshold]` equals the label.
pub fn accuracy(set: &ScoreSet, threshold: f64) -> Result<f64> {
    if set.scores.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let correct = set
        .scores
        .iter()
        .zip(set.labels)
        .filter(|(s, l)| (**s >= threshold) == **l)
        .count();
    Ok(correct as f64 / set.scores.len() as f64)
}

/// Mann-Whitney AUC with half credit for ties, from mid-ranks.
///
/// Twice every mid-rank is an integer, so the rank sum is accumulated exactly
/// in integers and the result is a single division.
pub fn auc(set: &ScoreSet) -> Result<f64> {
    let (pos, neg) = set.require_both("auc")?;
    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the mid-rank (i + j + 2) / 2
        let twice_mid = (i + j + 2) as u128;
        for &k in &order[i..=j] {
            if set.labels[k] {
                twice_rank_sum += twice_mid;
            }
        }
        i = j + 1;
    }
    let twice_u = twice_rank_sum - (pos as u128) * (pos as u128 + 1);
    Ok(twice_u as f64 / (2.0 * pos as f64 * neg as f64))
}

/// `(fpr, fnr, threshold)` for "predict positive when score ≥ threshold", from
/// the strictest threshold (+∞) down to the loosest (the minimum score).
pub fn roc_points(set: &ScoreSet) -> Result<Vec<(f64, f64, f64)>> {
    let (pos, neg) = set.require_both("roc")?;
    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));
    let mut points = vec![(0.0, 1.0, f64::INFINITY)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = set.scores[order[i]];
        while i < order.len() && set.scores[order[i]] == t {
            if set.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, 1.0 - tp as f64 / pos as f64, t));
    }
    Ok(points)
}

/// Equal error rate and its threshold. When no ROC point has FPR = FNR the
/// value is interpolated linearly between the two bracketing points.
pub fn eer(set: &ScoreSet) -> Result<(f64, f64)> {
    let points = roc_points(set)?;
    for w in points.windows(2) {
        let (f1, n1, t1) = w[0];
        let (f2, n2, t2) = w[1];
        let d1 = f1 - n1;
        let d2 = f2 - n2;
        if d1 == 0.0 {
            return Ok((f1, t1));
        }
        if d1 < 0.0 && d2 >= 0.0 {
            let a = d1 / (d1 - d2);
            let rate = f1 + a * (f2 - f1);
            let threshold = if t1.is_finite() { t1 + a * (t2 - t1) } else { t2 };
            return Ok((rate, threshold));
        }
    }
    // FPR − FNR runs from −1 to +1, so a bracket always exists.
    let (f, n, t) = *points.last().unwrap();
    Ok(((f + n) / 2.0, t))
}

/// One row of a metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub split: String,
    pub domain: String,
    pub unseen: bool,
    pub acc: f64,
    pub auc: f64,
    pub eer: f64,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub acc: f64,
    pub auc: f64,
    pub eer: f64,
}

/// ACC at 0.5 plus AUC and EER; AUC/EER are NaN when a class is missing.
pub fn summarize(scores: &[f64], labels: &[bool]) -> Result<Summary> {
    let set = ScoreSet::new(scores, labels)?;
    let acc = accuracy(&set, 0.5)?;
    let auc = auc(&set).unwrap_or(f64::NAN);
    let eer = eer(&set).map(|e| e.0).unwrap_or(f64::NAN);
    Ok(Summary { acc, auc, eer })
}
