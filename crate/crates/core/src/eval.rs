//! Ranking and calibration metrics, long-tail slicing, and similarity.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use crate::data::{Catalog, SampleWindow};
use crate::error::{Error, Result};
use crate::numerics::nn::PROB_CLIP;

/// Area under the ROC curve via average ranks, so tied scores count half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimMismatch {
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::InvalidLabel(bad as f64));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auc"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives, doubled to stay integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += twice_avg * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Mean binary cross-entropy with scores clipped to `[1e-7, 1 − 1e-7]`.
pub fn logloss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimMismatch {
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput("scores"));
    }
    let mut total = 0.0;
    for (&s, &y) in scores.iter().zip(labels) {
        total -= match y {
            1 => s.clamp(PROB_CLIP, 1.0 - PROB_CLIP).ln(),
            0 => (1.0 - s).clamp(PROB_CLIP, 1.0 - PROB_CLIP).ln(),
            _ => return Err(Error::InvalidLabel(y as f64)),
        };
    }
    Ok(total / scores.len() as f64)
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Target-item counts over the training samples, with every catalog item
/// present (unseen items count 0).
pub fn item_frequencies(train: &[SampleWindow], catalog: &Catalog) -> BTreeMap<String, usize> {
    let mut freq: BTreeMap<String, usize> = catalog
        .items()
        .iter()
        .map(|it| (it.item_key.clone(), 0))
        .collect();
    for s in train {
        *freq.entry(s.target.item_key.clone()).or_default() += 1;
    }
    freq
}

/// The `⌊0.1·N⌋` least frequent items, ties broken by key.
pub fn long_tail_items(freq: &BTreeMap<String, usize>) -> Result<HashSet<String>> {
    if freq.is_empty() {
        return Err(Error::EmptyInput("item frequency table"));
    }
    let mut items: Vec<(&String, usize)> = freq.iter().map(|(k, &c)| (k, c)).collect();
    items.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let cut = freq.len() / 10;
    Ok(items[..cut].iter().map(|(k, _)| (*k).clone()).collect())
}

/// Indices of samples whose candidate item is long-tail.
pub fn long_tail_slice(
    samples: &[SampleWindow],
    freq: &BTreeMap<String, usize>,
) -> Result<Vec<usize>> {
    let tail = long_tail_items(freq)?;
    Ok(samples
        .iter()
        .enumerate()
        .filter(|(_, s)| tail.contains(&s.target.item_key))
        .map(|(i, _)| i)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub logloss: f64,
    pub count: usize,
    pub slices: Vec<(String, EvalReport)>,
}

impl EvalReport {
    pub fn compute(scores: &[f64], labels: &[u8]) -> Result<Self> {
        Ok(EvalReport {
            auc: auc(scores, labels)?,
            logloss: logloss(scores, labels)?,
            count: scores.len(),
            slices: Vec::new(),
        })
    }

    fn write_prefixed(&self, f: &mut fmt::Formatter<'_>, prefix: &str) -> fmt::Result {
        writeln!(f, "{prefix}auc: {:.6}", self.auc)?;
        writeln!(f, "{prefix}logloss: {:.6}", self.logloss)?;
        writeln!(f, "{prefix}count: {}", self.count)?;
        for (name, sub) in &self.slices {
            sub.write_prefixed(f, &format!("{prefix}{name}."))?;
        }
        Ok(())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write_prefixed(f, "")
    }
}
