//! AUROC and average precision.
//!
//! Tied scores are always processed as a group, so neither metric depends on
//! input order.

use std::cmp::Ordering;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredLabels {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() || scores.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Data("NaN score".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }

    /// `(positives, negatives)` per distinct score, highest score first.
    fn groups(&self) -> Vec<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].partial_cmp(&self.scores[a]).unwrap_or(Ordering::Equal));
        let mut out: Vec<(usize, usize)> = Vec::new();
        let mut prev: Option<f64> = None;
        for i in idx {
            if prev != Some(self.scores[i]) {
                out.push((0, 0));
                prev = Some(self.scores[i]);
            }
            let g = out.last_mut().expect("group pushed above");
            if self.labels[i] {
                g.0 += 1;
            } else {
                g.1 += 1;
            }
        }
        out
    }
}

/// Probability that a random positive outscores a random negative; ties count 1/2.
pub fn auroc(data: &ScoredLabels) -> Result<f64> {
    let (p, n) = (data.positives(), data.negatives());
    if p == 0 || n == 0 {
        return Err(Error::SingleClass { metric: "auroc" });
    }
    // ascending scores; every positive beats the negatives below and ties its own group
    let mut neg_below = 0usize;
    let mut twice_u = 0u128;
    for (gp, gn) in data.groups().into_iter().rev() {
        twice_u += (gp as u128) * (2 * neg_below as u128 + gn as u128);
        neg_below += gn;
    }
    Ok(twice_u as f64 / (2.0 * p as f64 * n as f64))
}

/// Step-wise average precision: `Σ ΔRecall · Precision` over distinct descending thresholds.
pub fn auprc(data: &ScoredLabels) -> Result<f64> {
    let p = data.positives();
    if p == 0 {
        return Err(Error::NoPositives);
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for (gp, gn) in data.groups() {
        tp += gp;
        fp += gn;
        if gp > 0 {
            ap += (gp as f64 / p as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

pub fn auroc_of(scores: &[f64], labels: &[bool]) -> Result<f64> {
    auroc(&ScoredLabels::new(scores.to_vec(), labels.to_vec())?)
}

pub fn auprc_of(scores: &[f64], labels: &[bool]) -> Result<f64> {
    auprc(&ScoredLabels::new(scores.to_vec(), labels.to_vec())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Auroc,
    Auprc,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::Auroc, Metric::Auprc];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Auroc => "auroc",
            Metric::Auprc => "auprc",
        }
    }

    pub fn compute(self, data: &ScoredLabels) -> Result<f64> {
        match self {
            Metric::Auroc => auroc(data),
            Metric::Auprc => auprc(data),
        }
    }
}

/// Metric for categorical labels from per-class score rows.
///
/// Two classes use the class-1 column directly. More classes are averaged
/// one-vs-rest over the classes that occur in `labels`.
pub fn multiclass_metric(metric: Metric, scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let k = scores.first().map(Vec::len).unwrap_or(0);
    if k < 2 || scores.iter().any(|r| r.len() != k) {
        return Err(Error::ShapeMismatch(
            "score rows need one column per class, at least two".into(),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} outside {k} classes")));
    }
    let column = |c: usize| -> Result<f64> {
        let data = ScoredLabels::new(
            scores.iter().map(|r| r[c]).collect(),
            labels.iter().map(|&l| l == c).collect(),
        )?;
        metric.compute(&data)
    };
    if k == 2 {
        return column(1);
    }
    let present: Vec<usize> = (0..k).filter(|c| labels.contains(c)).collect();
    let mut sum = 0.0;
    for &c in &present {
        sum += column(c)?;
    }
    Ok(sum / present.len() as f64)
}
