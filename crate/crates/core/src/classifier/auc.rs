//! ROC AUC and per-class evaluation reports.

use super::Classifier;
use crate::data::{Corpus, ImageSample, Split};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};

/// Mann-Whitney AUC with midranks for ties. `None` unless both classes occur.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// `P(s+ > s-) + P(s+ = s-) / 2` over all positive-negative pairs.
pub fn auc_pairwise(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj == 1 {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub split: String,
    pub class_names: Vec<String>,
    /// `None` where a class lacks positives or negatives.
    pub per_class: Vec<Option<f64>>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub macro_auc: Option<f64>,
}

impl AucReport {
    /// One-vs-rest AUC per class of `probs` against the label vectors.
    pub fn from_scores(split: &str, class_names: &[String], probs: &[Vec<f64>], labels: &[&[u8]]) -> Self {
        let c = class_names.len();
        let mut per_class = Vec::with_capacity(c);
        let mut positives = Vec::with_capacity(c);
        let mut negatives = Vec::with_capacity(c);
        for k in 0..c {
            let s: Vec<f64> = probs.iter().map(|p| p[k]).collect();
            let l: Vec<u8> = labels.iter().map(|l| l[k]).collect();
            let pos = l.iter().filter(|&&b| b == 1).count();
            positives.push(pos);
            negatives.push(l.len() - pos);
            per_class.push(auc(&s, &l));
        }
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        AucReport {
            split: split.to_string(),
            class_names: class_names.to_vec(),
            per_class,
            positives,
            negatives,
            macro_auc,
        }
    }

    /// `class,auc,positives,negatives` rows with the macro average last; undefined
    /// values are written as `undef`.
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or("undef".to_string(), |x| format!("{x:.6}"));
        let mut s = String::from("class,auc,positives,negatives\n");
        for k in 0..self.class_names.len() {
            s += &format!(
                "{},{},{},{}\n",
                self.class_names[k],
                f(self.per_class[k]),
                self.positives[k],
                self.negatives[k]
            );
        }
        s += &format!("macro,{},,\n", f(self.macro_auc));
        s
    }
}

/// Whitelist of splits a phase may evaluate on, with read counters.
#[derive(Debug)]
pub struct SplitGuard {
    allowed: Vec<Split>,
    reads: [AtomicUsize; 3],
}

impl SplitGuard {
    pub fn new(allowed: &[Split]) -> Self {
        SplitGuard {
            allowed: allowed.to_vec(),
            reads: Default::default(),
        }
    }

    /// Guard for the selection loop: validation only.
    pub fn selection() -> Self {
        Self::new(&[Split::Val])
    }

    pub fn check(&self, split: Split) -> Result<()> {
        if !self.allowed.contains(&split) {
            return Err(Error::Guard(format!("phase may not read the {} split", split.name())));
        }
        self.reads[split as usize].fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn reads(&self, split: Split) -> usize {
        self.reads[split as usize].load(Ordering::Relaxed)
    }
}

/// Per-class AUC of `clf` on one split of `corpus`.
pub fn evaluate(clf: &Classifier, corpus: &Corpus, split: Split, guard: &SplitGuard) -> Result<AucReport> {
    guard.check(split)?;
    let samples = corpus.split_samples(split);
    evaluate_samples(clf, &samples, split.name(), &corpus.manifest.class_names)
}

/// Per-class AUC of `clf` on an explicit sample list.
pub fn evaluate_samples(
    clf: &Classifier,
    samples: &[&ImageSample],
    name: &str,
    class_names: &[String],
) -> Result<AucReport> {
    if samples.is_empty() {
        return Err(Error::Domain(format!("evaluation set `{name}` is empty")));
    }
    let probs = clf.predict_proba(samples)?;
    let labels: Vec<&[u8]> = samples.iter().map(|s| s.labels.as_slice()).collect();
    Ok(AucReport::from_scores(name, class_names, &probs, &labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_and_reversed() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [0, 0, 1, 1];
        assert_eq!(auc(&s, &l), Some(1.0));
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        assert_eq!(auc(&neg, &l), Some(0.0));
        assert_eq!(auc(&s, &[1, 1, 1, 1]), None);
    }

    #[test]
    fn ties_count_half() {
        assert_eq!(auc(&[0.5, 0.5], &[0, 1]), Some(0.5));
        assert_eq!(auc_pairwise(&[0.5, 0.5], &[0, 1]), Some(0.5));
    }

    #[test]
    fn guard_blocks_test_split() {
        let g = SplitGuard::selection();
        assert!(g.check(Split::Val).is_ok());
        assert!(matches!(g.check(Split::Test), Err(Error::Guard(_))));
        assert_eq!(g.reads(Split::Val), 1);
        assert_eq!(g.reads(Split::Test), 0);
    }
}
