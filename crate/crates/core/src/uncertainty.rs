//! Monte-Carlo informativeness scores and ranking.

use crate::classifier::Classifier;
use crate::config::{LabelMode, Reduction, UncertaintyConfig};
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::util::{id_stream, rng_for};
use cagan_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Per-pass probabilities and predicted variances of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct McDraws {
    pub preds: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyEstimate {
    pub sample_id: String,
    pub draws: McDraws,
    pub var: Vec<f64>,
    pub score: f64,
}

/// Variance of the class probabilities induced by Gaussian logit noise of
/// log-variance `logvar`, to first order: `J diag(sigma^2) J^T` on the diagonal.
fn probability_variance(p: &[f64], logvar: &[f64], mode: LabelMode) -> Vec<f64> {
    let s2: Vec<f64> = logvar.iter().map(|&l| l.exp()).collect();
    match mode {
        LabelMode::Multilabel => p.iter().zip(&s2).map(|(&q, &v)| (q * (1.0 - q)).powi(2) * v).collect(),
        LabelMode::Exclusive => (0..p.len())
            .map(|c| {
                (0..p.len())
                    .map(|k| {
                        let j = if c == k { p[c] * (1.0 - p[c]) } else { -p[c] * p[k] };
                        j * j * s2[k]
                    })
                    .sum()
            })
            .collect(),
    }
}

/// `t` stochastic passes per sample with the pooled-feature mask active. The
/// backbone is deterministic, so it runs once and only the masked heads repeat.
/// Each sample draws from its own stream keyed by `(seed, id)`.
pub fn mc_predict(
    clf: &Classifier,
    samples: &[&ImageSample],
    t: usize,
    rate: f64,
    seed: u64,
    epistemic_only: bool,
) -> Result<Vec<McDraws>> {
    if t < 2 {
        return Err(Error::Domain(format!("need at least 2 stochastic passes, got {t}")));
    }
    if !clf.has_variance_head() && !epistemic_only {
        return Err(Error::Capability(
            "classifier has no variance head; enable uncertainty.epistemic_only to score without it".into(),
        ));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Domain(format!("mask rate {rate} outside [0, 1)")));
    }
    let feats = clf.pooled_features(samples)?;
    let fd = clf.backbone.feature_dim();
    let keep = 1.0 / (1.0 - rate);
    let mut out = Vec::with_capacity(samples.len());
    for (s, f) in samples.iter().zip(&feats) {
        let mut rng = rng_for(seed, "mc-dropout", id_stream(&s.id));
        let data: Vec<f32> = (0..t)
            .flat_map(|_| {
                f.iter()
                    .map(|&v| {
                        if rate > 0.0 && rng.random::<f64>() < rate {
                            0.0
                        } else {
                            v * keep as f32
                        }
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let h = clf.head_outputs(&Tensor::new([t, fd], data));
        let preds: Vec<Vec<f64>> = h.logits.iter().map(|l| clf.probabilities(l)).collect();
        let vars = preds
            .iter()
            .zip(&h.logvar)
            .map(|(p, lv)| {
                if epistemic_only || !clf.has_variance_head() {
                    vec![0.0; p.len()]
                } else {
                    probability_variance(p, lv, clf.spec.label_mode)
                }
            })
            .collect();
        out.push(McDraws { preds, vars });
    }
    Ok(out)
}

/// `mean(y_t^2) - mean(y_t)^2 + mean(sigma_t^2)` per class.
pub fn combine_variance(preds: &[Vec<f64>], vars: &[Vec<f64>]) -> Result<Vec<f64>> {
    if preds.len() != vars.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} variances",
            preds.len(),
            vars.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Shape("no passes".into()));
    }
    let c = preds[0].len();
    if preds.iter().chain(vars).any(|r| r.len() != c) {
        return Err(Error::Shape("ragged per-pass vectors".into()));
    }
    if preds.iter().chain(vars).flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            head: "uncertainty".into(),
            reason: "non-finite pass output".into(),
        });
    }
    let t = preds.len() as f64;
    Ok((0..c)
        .map(|k| {
            let m1: f64 = preds.iter().map(|p| p[k]).sum::<f64>() / t;
            let m2: f64 = preds.iter().map(|p| p[k] * p[k]).sum::<f64>() / t;
            let a: f64 = vars.iter().map(|v| v[k]).sum::<f64>() / t;
            m2 - m1 * m1 + a
        })
        .collect())
}

pub fn reduce(var: &[f64], r: Reduction) -> f64 {
    let s = match r {
        Reduction::Mean => var.iter().sum::<f64>() / var.len() as f64,
        Reduction::Max => var.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    s.max(0.0)
}

/// Monte-Carlo estimates for `samples` under `cfg`.
pub fn estimate(
    clf: &Classifier,
    samples: &[&ImageSample],
    cfg: &UncertaintyConfig,
    seed: u64,
) -> Result<Vec<UncertaintyEstimate>> {
    let draws = mc_predict(clf, samples, cfg.mc_samples, cfg.mask_rate, seed, cfg.epistemic_only)?;
    samples
        .iter()
        .zip(draws)
        .map(|(s, d)| {
            let var = combine_variance(&d.preds, &d.vars)?;
            let score = reduce(&var, cfg.reduction);
            Ok(UncertaintyEstimate {
                sample_id: s.id.clone(),
                draws: d,
                var,
                score,
            })
        })
        .collect()
}

/// Shannon entropy in nats of a class distribution, or the mean binary entropy of
/// independent per-class probabilities.
pub fn entropy_score(p: &[f64], mode: LabelMode) -> Result<f64> {
    if p.iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
        return Err(Error::Domain("probabilities outside [0, 1]".into()));
    }
    let h = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
    Ok(match mode {
        LabelMode::Exclusive => p.iter().map(|&q| h(q.clamp(0.0, 1.0))).sum(),
        LabelMode::Multilabel => {
            p.iter()
                .map(|&q| {
                    let q = q.clamp(0.0, 1.0);
                    h(q) + h(1.0 - q)
                })
                .sum::<f64>()
                / p.len() as f64
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub cutoff: usize,
    pub truncated: bool,
    pub tie_seed: u64,
}

/// Highest `n_inf` scores first. Equal scores are ordered by a seeded shuffle.
pub fn rank_by_informativeness(scored: &[(String, f64)], n_inf: usize, tie_seed: u64) -> Result<SelectionResult> {
    if scored.is_empty() {
        return Err(Error::Domain("no estimates to rank".into()));
    }
    if n_inf == 0 {
        return Err(Error::Domain("selection size must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..scored.len()).collect();
    idx.sort_by(|&a, &b| scored[a].0.cmp(&scored[b].0));
    idx.shuffle(&mut rng_for(tie_seed, "rank-ties", 0));
    idx.sort_by(|&a, &b| scored[b].1.total_cmp(&scored[a].1));
    let cutoff = n_inf.min(scored.len());
    idx.truncate(cutoff);
    Ok(SelectionResult {
        ids: idx.iter().map(|&i| scored[i].0.clone()).collect(),
        scores: idx.iter().map(|&i| scored[i].1).collect(),
        cutoff,
        truncated: n_inf > scored.len(),
        tie_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        let v = combine_variance(&[vec![0.0], vec![2.0]], &[vec![0.0], vec![0.0]]).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12);
        let v = combine_variance(&vec![vec![0.7]; 5], &vec![vec![0.0]; 5]).unwrap();
        assert!(v[0].abs() < 1e-12);
        assert!(matches!(combine_variance(&[vec![0.0]], &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn ranking_forced_order() {
        let s = vec![("a".to_string(), 0.9), ("b".to_string(), 0.1), ("c".to_string(), 0.5)];
        let r = rank_by_informativeness(&s, 2, 0).unwrap();
        assert_eq!(r.ids, ["a", "c"]);
        let r = rank_by_informativeness(&s, 10, 0).unwrap();
        assert!(r.truncated);
        assert_eq!(r.ids.len(), 3);
    }

    #[test]
    fn entropy_closed_forms() {
        assert_eq!(entropy_score(&[0.0, 1.0, 0.0], LabelMode::Exclusive).unwrap(), 0.0);
        let u = entropy_score(&[0.25; 4], LabelMode::Exclusive).unwrap();
        assert!((u - 4f64.ln()).abs() < 1e-12);
        let m = entropy_score(&[0.5; 4], LabelMode::Multilabel).unwrap();
        assert!((m - 2f64.ln()).abs() < 1e-12);
        assert!(entropy_score(&[1.5], LabelMode::Exclusive).is_err());
    }

    #[test]
    fn delta_method_variance_matches_sampling() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let logits = [0.3, -0.5, 1.0];
        let logvar = [-6.0, -5.0, -7.0];
        let soft = |l: &[f64]| {
            let e: Vec<f64> = l.iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let p = soft(&logits);
        let approx = probability_variance(&p, &logvar, LabelMode::Exclusive);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mut m1 = [0.0; 3];
        let mut m2 = [0.0; 3];
        for _ in 0..n {
            let l: Vec<f64> = logits
                .iter()
                .zip(&logvar)
                .map(|(&a, &v)| a + (0.5f64 * v).exp() * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            let q = soft(&l);
            for c in 0..3 {
                m1[c] += q[c] / n as f64;
                m2[c] += q[c] * q[c] / n as f64;
            }
        }
        for c in 0..3 {
            let empirical = m2[c] - m1[c] * m1[c];
            assert!(
                (empirical - approx[c]).abs() < 0.05 * approx[c],
                "{c}: {empirical} vs {}",
                approx[c]
            );
        }
    }
}
