//! Loss terms of the class-aware GAN, as plain functions and as graph builders.

use super::nets::Critic;
use crate::config::{CaganConfig, LabelMode};
use crate::error::{Error, Result};
use cagan_tensor::{lit, log_sigmoid, log_softmax_row, Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_content: f64,
    pub lambda_gp: f64,
    pub w_perc: f64,
    pub w_mse: f64,
    pub w_nmi: f64,
    pub nmi_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::from(&CaganConfig::default())
    }
}

impl From<&CaganConfig> for LossWeights {
    fn from(c: &CaganConfig) -> Self {
        LossWeights {
            lambda_cls: c.lambda_cls,
            lambda_content: c.lambda_content,
            lambda_gp: c.lambda_gp,
            w_perc: c.w_perc,
            w_mse: c.w_mse,
            w_nmi: c.w_nmi,
            nmi_eps: c.nmi_eps,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda_cls", self.lambda_cls),
            ("lambda_content", self.lambda_content),
            ("lambda_gp", self.lambda_gp),
            ("w_perc", self.w_perc),
            ("w_mse", self.w_mse),
            ("w_nmi", self.w_nmi),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("cagan.{name}"), "must be finite and nonnegative"));
            }
        }
        if !(self.nmi_eps > 0.0) {
            return Err(Error::config("cagan.nmi_eps", "must be positive"));
        }
        Ok(())
    }
}

fn check_finite(head: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            head: head.into(),
            reason: "non-finite value".into(),
        })
    }
}

/// `mean(real) - mean(fake) - lambda_gp * gp_term` over two patch maps.
pub fn adv_loss_wgan_gp(d_src_real: &[f64], d_src_fake: &[f64], gp_term: f64, w: &LossWeights) -> Result<f64> {
    if d_src_real.len() != d_src_fake.len() || d_src_real.is_empty() {
        return Err(Error::Shape(format!(
            "patch maps differ: {} vs {} values",
            d_src_real.len(),
            d_src_fake.len()
        )));
    }
    check_finite("d_src_real", d_src_real)?;
    check_finite("d_src_fake", d_src_fake)?;
    check_finite("gradient_penalty", &[gp_term])?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(mean(d_src_real) - mean(d_src_fake) - w.lambda_gp * gp_term)
}

/// Mean over samples of `(||g_i|| - 1)^2`.
pub fn gp_term(input_grads: &[Vec<f64>]) -> f64 {
    if input_grads.is_empty() {
        return 0.0;
    }
    let s: f64 = input_grads
        .iter()
        .map(|g| (g.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).powi(2))
        .sum();
    s / input_grads.len() as f64
}

/// Gradients of each sample's critic value with respect to its own input.
/// Assumes the critic treats samples independently.
pub fn critic_input_grads<T: Scalar>(
    critic: &impl Critic<T>,
    frozen: &[&cagan_tensor::ParamStore<T>],
    x: Tensor<T>,
) -> Vec<Vec<f64>> {
    let n = x.dim(0);
    let mut g = Graph::new();
    for s in frozen {
        g.freeze(s);
    }
    let xv = g.input_with_grad(x);
    let d = critic.score(&mut g, xv);
    let total = g.sum_all(d);
    let grads = g.backward(total);
    let gx = grads.get(xv).expect("input gradient");
    (0..n)
        .map(|i| gx.sample(i).iter().map(|v| v.as_f64()).collect())
        .collect()
}

/// Interpolates `eps_i * real_i + (1 - eps_i) * fake_i`.
pub fn interpolate<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>, eps: &[f64]) -> Tensor<T> {
    assert_eq!(real.shape(), fake.shape());
    let n = real.dim(0);
    let per = real.numel() / n;
    Tensor::from_fn(real.shape().to_vec(), |k| {
        let e = eps[k / per];
        lit(e * real.data()[k].as_f64() + (1.0 - e) * fake.data()[k].as_f64())
    })
}

/// Classification loss of logits against label vectors: softmax negative
/// log-likelihood in exclusive mode, mean per-class binary cross-entropy otherwise.
pub fn cls_loss(logits: &Tensor<f64>, labels: &[Vec<u8>], mode: LabelMode) -> Result<f64> {
    if logits.ndim() != 2 || logits.dim(0) != labels.len() {
        return Err(Error::Shape(format!(
            "logits {:?} for {} label vectors",
            logits.shape(),
            labels.len()
        )));
    }
    let c = logits.dim(1);
    if let Some(bad) = labels.iter().find(|l| l.len() != c) {
        return Err(Error::Shape(format!("label width {} vs logits width {c}", bad.len())));
    }
    check_finite("d_cls", logits.data())?;
    let n = labels.len();
    let mut total = 0.0;
    for (i, l) in labels.iter().enumerate() {
        let row = logits.sample(i);
        total += match mode {
            LabelMode::Exclusive => {
                let lp = log_softmax_row(row);
                let t: f64 = l.iter().map(|&b| b as f64).sum();
                if t == 0.0 {
                    return Err(Error::Domain("exclusive label vector has no class".into()));
                }
                -lp.iter().zip(l).map(|(a, &b)| a * b as f64).sum::<f64>() / t
            }
            LabelMode::Multilabel => {
                row.iter()
                    .zip(l)
                    .map(|(&x, &b)| if b == 1 { -log_sigmoid(x) } else { -log_sigmoid(-x) })
                    .sum::<f64>()
                    / c as f64
            }
        };
    }
    Ok(total / n as f64)
}

/// Class loss of the critic on real images with their true labels.
pub fn cls_loss_real(d_cls_logits: &Tensor<f64>, labels: &[Vec<u8>], mode: LabelMode) -> Result<f64> {
    cls_loss(d_cls_logits, labels, mode)
}

/// Class loss of the critic on generated images with the requested targets.
pub fn cls_loss_fake(d_cls_logits: &Tensor<f64>, targets: &[Vec<u8>], mode: LabelMode) -> Result<f64> {
    cls_loss(d_cls_logits, targets, mode)
}

/// Graph form of [`cls_loss`]; `row_weights` scales each sample's term before the
/// mean over all rows.
pub fn cls_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[Vec<u8>],
    mode: LabelMode,
    row_weights: Option<&[f64]>,
) -> Var {
    let s = g.shape(logits).to_vec();
    let (n, c) = (s[0], s[1]);
    let rw = |i: usize| row_weights.map_or(1.0, |w| w[i]);
    match mode {
        LabelMode::Exclusive => {
            let target = Tensor::from_fn([n, c], |k| {
                let l = &labels[k / c];
                let t: f64 = l.iter().map(|&b| b as f64).sum::<f64>().max(1.0);
                lit(l[k % c] as f64 / t)
            });
            let w = (0..n).map(|i| lit(rw(i))).collect();
            g.softmax_cross_entropy(logits, target, Some(w))
        }
        LabelMode::Multilabel => {
            let target = Tensor::from_fn([n, c], |k| lit(labels[k / c][k % c] as f64));
            let w = Tensor::from_fn([n, c], |k| lit(rw(k / c)));
            g.bce_with_logits(logits, target, Some(w))
        }
    }
}

/// Frozen feature extractor behind the perceptual term.
pub trait PerceptualExtractor<T: Scalar> {
    /// `x: [N, 1, S, S] -> [N, ...]`, differentiable in `x`, parameters frozen.
    fn features(&self, g: &mut Graph<T>, x: Var) -> Var;
}

pub fn quantize(v: f64, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

fn entropy_of(counts: &[f64], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            -p * p.ln()
        })
        .sum()
}

/// Normalised mutual information `(H(x) + H(y)) / H(x, y)` from the joint
/// histogram of intensities quantised to `bins` levels. Ranges over `[1, 2]` and
/// equals 2 for identical non-constant images; returns 0 when the joint entropy
/// vanishes (both images constant).
pub fn nmi(x: &[f32], y: &[f32], bins: usize) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape(format!("nmi of {} vs {} pixels", x.len(), y.len())));
    }
    if bins < 2 {
        return Err(Error::Domain("nmi needs at least 2 bins".into()));
    }
    let mut joint = vec![0.0; bins * bins];
    let mut px = vec![0.0; bins];
    let mut py = vec![0.0; bins];
    for (&a, &b) in x.iter().zip(y) {
        let (i, j) = (quantize(a as f64, bins), quantize(b as f64, bins));
        joint[i * bins + j] += 1.0;
        px[i] += 1.0;
        py[j] += 1.0;
    }
    let n = x.len() as f64;
    let hxy = entropy_of(&joint, n);
    if hxy <= 0.0 {
        return Ok(0.0);
    }
    Ok((entropy_of(&px, n) + entropy_of(&py, n)) / hxy)
}

/// Parts of the content loss, averaged over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ContentTerms {
    pub perc: f64,
    pub mse: f64,
    pub inv_nmi: f64,
    pub total: f64,
}

/// `w_perc * ||feat(x) - feat(y)||^2 / dim + w_mse * mse + w_nmi / (nmi + eps)` for one
/// pair of images, with the histogram NMI.
pub fn content_loss(
    x: &[f32],
    y: &[f32],
    side: usize,
    feat: Option<&dyn PerceptualExtractor<f32>>,
    w: &LossWeights,
    bins: usize,
) -> Result<ContentTerms> {
    if x.len() != side * side || y.len() != side * side {
        return Err(Error::Shape(format!(
            "content loss on {} and {} pixels at side {side}",
            x.len(),
            y.len()
        )));
    }
    let mse = x.iter().zip(y).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>() / x.len() as f64;
    let n = nmi(x, y, bins)?;
    let perc = match feat {
        Some(f) if w.w_perc > 0.0 => {
            let mut g = Graph::new();
            let input = crate::util::images_tensor(&[x, y], side);
            let v = g.input(input);
            let fv = f.features(&mut g, v);
            let t = g.value(fv);
            let (a, b) = (t.sample(0), t.sample(1));
            a.iter().zip(b).map(|(&p, &q)| ((p - q) as f64).powi(2)).sum::<f64>() / a.len() as f64
        }
        _ => 0.0,
    };
    let inv_nmi = 1.0 / (n + w.nmi_eps);
    Ok(ContentTerms {
        perc,
        mse,
        inv_nmi,
        total: w.w_perc * perc + w.w_mse * mse + w.w_nmi * inv_nmi,
    })
}

/// Differentiable content loss of generated `y` against constant inputs `x`,
/// averaged over the batch. The NMI term uses Parzen-smoothed histograms.
#[allow(clippy::too_many_arguments)]
pub fn content_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    y: Var,
    feat: Option<&dyn PerceptualExtractor<T>>,
    w: &LossWeights,
    soft_bins: usize,
    soft_sigma: f64,
) -> (Var, ContentTerms) {
    let d = g.sub(y, x);
    let d2 = g.square(d);
    let mse = g.mean_all(d2);
    let mut total = g.scale(mse, w.w_mse);
    let mut terms = ContentTerms {
        mse: g.value(mse).item().as_f64(),
        ..Default::default()
    };
    if w.w_nmi > 0.0 {
        let n = g.soft_nmi(x, y, soft_bins, soft_sigma);
        let ne = g.add_scalar(n, w.nmi_eps);
        let ln = g.log(ne);
        let neg = g.scale(ln, -1.0);
        let inv = g.exp(neg);
        let inv_mean = g.mean_all(inv);
        terms.inv_nmi = g.value(inv_mean).item().as_f64();
        let t = g.scale(inv_mean, w.w_nmi);
        total = g.add(total, t);
    }
    if let (Some(f), true) = (feat, w.w_perc > 0.0) {
        let fx = f.features(g, x);
        let fy = f.features(g, y);
        let df = g.sub(fy, fx);
        let df2 = g.square(df);
        let perc = g.mean_all(df2);
        terms.perc = g.value(perc).item().as_f64();
        let t = g.scale(perc, w.w_perc);
        total = g.add(total, t);
    }
    terms.total = g.value(total).item().as_f64();
    (total, terms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adv_cancels_on_equal_maps() {
        let w = LossWeights::default();
        let m = [0.3, -1.2, 4.0];
        assert_eq!(adv_loss_wgan_gp(&m, &m, 0.0, &w).unwrap(), 0.0);
        let bad = [f64::NAN, 0.0, 0.0];
        match adv_loss_wgan_gp(&bad, &m, 0.0, &w) {
            Err(Error::Numeric { head, .. }) => assert_eq!(head, "d_src_real"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cls_uniform_cases() {
        let logits = Tensor::<f64>::zeros([3, 4]);
        let labels = vec![vec![1, 0, 0, 0], vec![0, 0, 1, 0], vec![0, 0, 0, 1]];
        let e = cls_loss_real(&logits, &labels, LabelMode::Exclusive).unwrap();
        assert!((e - 4f64.ln()).abs() < 1e-12);
        let m = cls_loss_fake(&logits, &labels, LabelMode::Multilabel).unwrap();
        assert!((m - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(
            cls_loss_real(&Tensor::zeros([3, 5]), &labels, LabelMode::Exclusive),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn nmi_identity_and_constant() {
        let x: Vec<f32> = (0..64).map(|i| (i % 7) as f32 / 7.0).collect();
        assert!((nmi(&x, &x, 64).unwrap() - 2.0).abs() < 1e-12);
        let c = vec![0.5f32; 64];
        assert_eq!(nmi(&c, &c, 64).unwrap(), 0.0);
        let w = LossWeights::default();
        let t = content_loss(&c, &c, 8, None, &w, 64).unwrap();
        assert!(t.total.is_finite());
    }
}
