//! Offline ranking and calibration metrics.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Pair counts behind an AUC: `2·#(pos > neg) + #(pos == neg)` over
/// `2·|P|·|N|`, kept as integers so equal inputs give equal bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AucCounts {
    pub numerator: u128,
    pub positives: u64,
    pub negatives: u64,
}

impl AucCounts {
    pub fn value(&self) -> Result<f64> {
        if self.positives == 0 || self.negatives == 0 {
            return Err(Error::UndefinedMetric(format!(
                "AUC needs both classes, got {} positives and {} negatives",
                self.positives, self.negatives
            )));
        }
        Ok(self.numerator as f64 / (2 * self.positives as u128 * self.negatives as u128) as f64)
    }
}

/// Rank-based pair counting in `O(n log n)`; tied scores count one half.
pub fn auc_counts(scores: &[f64], labels: &[bool]) -> Result<AucCounts> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut numerator: u128 = 0;
    let mut neg_below: u128 = 0;
    let (mut pos, mut neg) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        numerator += 2 * p * neg_below + p * n;
        neg_below += n;
        pos += p as u64;
        neg += n as u64;
        i = j;
    }
    Ok(AucCounts {
        numerator,
        positives: pos,
        negatives: neg,
    })
}

/// Probability that a random positive outscores a random negative.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    auc_counts(scores, labels)?.value()
}

/// Per-group AUC and impression count for every group with both classes.
pub fn group_aucs(scores: &[f64], labels: &[bool], groups: &[u32]) -> Result<BTreeMap<u32, (f64, usize)>> {
    if scores.len() != labels.len() || groups.len() != labels.len() {
        return Err(Error::Shape("scores, labels and groups differ in length".into()));
    }
    let mut by: BTreeMap<u32, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for ((&s, &y), &g) in scores.iter().zip(labels).zip(groups) {
        let e = by.entry(g).or_default();
        e.0.push(s);
        e.1.push(y);
    }
    let mut out = BTreeMap::new();
    for (g, (s, y)) in by {
        let c = auc_counts(&s, &y)?;
        if c.positives > 0 && c.negatives > 0 {
            out.insert(g, (c.value()?, s.len()));
        }
    }
    Ok(out)
}

/// Impression-weighted mean of per-user AUC. Users with a single class are
/// left out of both the sum and the weights.
pub fn gauc(scores: &[f64], labels: &[bool], users: &[u32]) -> Result<f64> {
    let per = group_aucs(scores, labels, users)?;
    if per.is_empty() {
        return Err(Error::UndefinedMetric("GAUC has no user with both classes".into()));
    }
    let (num, den) = per
        .values()
        .fold((0.0, 0.0), |(n, d), &(a, w)| (n + a * w as f64, d + w as f64));
    Ok(num / den)
}

/// Relative improvement in percent, measured above the 0.5 floor.
pub fn relaimpr(measured: f64, base: f64) -> Result<f64> {
    if !(base > 0.5) {
        return Err(Error::UndefinedMetric(format!("RelaImpr base {base} is not above 0.5")));
    }
    Ok(((measured - 0.5) / (base - 0.5) - 1.0) * 100.0)
}

/// Mean prediction over mean label.
pub fn pcoc(predictions: &[f64], labels: &[bool]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape("predictions and labels differ in length".into()));
    }
    let clicks = labels.iter().filter(|&&y| y).count();
    if clicks == 0 {
        return Err(Error::UndefinedMetric("PCOC needs at least one click".into()));
    }
    Ok(predictions.iter().sum::<f64>() / clicks as f64)
}

/// Mean share of true-rsl-1 items among the first `k` of each ranked list.
/// Lists shorter than `k` are measured over their full length.
pub fn irrelevant_rate_at(lists: &[Vec<u8>], k: usize) -> Result<f64> {
    let lists: Vec<&Vec<u8>> = lists.iter().filter(|l| !l.is_empty()).collect();
    if lists.is_empty() || k == 0 {
        return Err(Error::UndefinedMetric("irrelevant rate over no ranked items".into()));
    }
    let short = lists.iter().filter(|l| l.len() < k).count();
    if short > 0 {
        log::warn!("{short} ranked lists hold fewer than {k} items; measured at their length");
    }
    let total: f64 = lists
        .iter()
        .map(|l| {
            let top = &l[..l.len().min(k)];
            top.iter().filter(|&&r| r == 1).count() as f64 / top.len() as f64
        })
        .sum();
    Ok(total / lists.len() as f64)
}

pub fn irrelevant_rate_at_10(lists: &[Vec<u8>]) -> Result<f64> {
    irrelevant_rate_at(lists, 10)
}
