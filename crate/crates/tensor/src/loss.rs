//! Fused loss operations.

use crate::graph::{sigmoid, Graph, Op, Var};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// `log softmax` of one row, computed in f64.
pub fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v.as_f64() - lse).collect()
}

/// `log(sigmoid(x))` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl<T: Scalar> Graph<T> {
    /// Weighted mean softmax cross-entropy: `mean_n w_n * -sum_c t_nc log p_nc`.
    /// `target` rows are probability vectors.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: Tensor<T>, weights: Option<Vec<T>>) -> Var {
        let s = self.shape(logits).to_vec();
        assert_eq!(s.len(), 2, "logits must be [N, C]");
        assert_eq!(target.shape(), &s[..], "target shape must match logits");
        let n = s[0];
        let weights = weights.unwrap_or_else(|| vec![T::one(); n]);
        assert_eq!(weights.len(), n, "one weight per sample");
        let l = self.value(logits);
        let mut total = 0.0;
        for k in 0..n {
            let lp = log_softmax_row(l.sample(k));
            let ce: f64 = -lp
                .iter()
                .zip(target.sample(k))
                .map(|(a, t)| a * t.as_f64())
                .sum::<f64>();
            total += weights[k].as_f64() * ce;
        }
        let value = Tensor::scalar(lit(total / n as f64));
        self.push_op(
            value,
            Op::SoftmaxCe {
                logits,
                target,
                weights,
            },
            &[logits],
        )
    }

    /// Mean binary cross-entropy with logits, elementwise weights of shape `[N, C]`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Tensor<T>, weights: Option<Tensor<T>>) -> Var {
        let s = self.shape(logits).to_vec();
        assert_eq!(target.shape(), &s[..], "target shape must match logits");
        let weights = weights.unwrap_or_else(|| Tensor::full(s.clone(), T::one()));
        assert_eq!(weights.shape(), &s[..], "weights shape must match logits");
        let l = self.value(logits).data();
        let mut total = 0.0;
        for ((&x, &t), &w) in l.iter().zip(target.data()).zip(weights.data()) {
            let (x, t) = (x.as_f64(), t.as_f64());
            total += w.as_f64() * -(t * log_sigmoid(x) + (1.0 - t) * log_sigmoid(-x));
        }
        let value = Tensor::scalar(lit(total / l.len() as f64));
        self.push_op(
            value,
            Op::BceLogits {
                logits,
                target,
                weights,
            },
            &[logits],
        )
    }

    /// Heteroscedastic classification likelihood: logits are corrupted by Gaussian
    /// noise with per-class log-variance `logvar` and the likelihood of the target is
    /// averaged over the `K` supplied noise draws (`noise: [K, N, C]`).
    /// `exclusive` selects softmax over classes, otherwise independent sigmoids.
    pub fn heteroscedastic_nll(
        &mut self,
        logits: Var,
        logvar: Var,
        noise: Tensor<T>,
        target: Tensor<T>,
        weights: Option<Vec<T>>,
        exclusive: bool,
    ) -> Var {
        let s = self.shape(logits).to_vec();
        assert_eq!(self.shape(logvar), &s[..], "logvar must match logits");
        assert_eq!(target.shape(), &s[..], "target must match logits");
        assert_eq!(noise.ndim(), 3, "noise must be [K, N, C]");
        assert_eq!(&noise.shape()[1..], &s[..], "noise must be [K, N, C]");
        let (n, c) = (s[0], s[1]);
        let weights = weights.unwrap_or_else(|| vec![T::one(); n]);
        let (total, _) = hetero_forward(
            self.value(logits).data(),
            self.value(logvar).data(),
            &noise,
            &target,
            &weights,
            exclusive,
            n,
            c,
            false,
        );
        let value = Tensor::scalar(lit(total));
        self.push_op(
            value,
            Op::HeteroNll {
                logits,
                logvar,
                noise,
                target,
                weights,
                exclusive,
            },
            &[logits, logvar],
        )
    }

    pub(crate) fn backward_loss(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gv = g.item().as_f64();
        match &self.nodes[i].op {
            Op::SoftmaxCe {
                logits,
                target,
                weights,
            } => {
                let s = self.shape(*logits).to_vec();
                let n = s[0];
                let l = self.value(*logits);
                let mut d = Vec::with_capacity(l.numel());
                for k in 0..n {
                    let lp = log_softmax_row(l.sample(k));
                    let tsum: f64 = target.sample(k).iter().map(|t| t.as_f64()).sum();
                    let scale = gv * weights[k].as_f64() / n as f64;
                    for (a, t) in lp.iter().zip(target.sample(k)) {
                        d.push(lit(scale * (a.exp() * tsum - t.as_f64())));
                    }
                }
                self.acc(grads, *logits, Tensor::new(s, d));
            }
            Op::BceLogits {
                logits,
                target,
                weights,
            } => {
                let l = self.value(*logits);
                let m = l.numel() as f64;
                let d = l
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(weights.data())
                    .map(|((&x, &t), &w)| lit(gv * w.as_f64() * (sigmoid(x).as_f64() - t.as_f64()) / m))
                    .collect();
                self.acc(grads, *logits, Tensor::new(l.shape().to_vec(), d));
            }
            Op::HeteroNll {
                logits,
                logvar,
                noise,
                target,
                weights,
                exclusive,
            } => {
                let s = self.shape(*logits).to_vec();
                let (n, c) = (s[0], s[1]);
                let (_, grad) = hetero_forward(
                    self.value(*logits).data(),
                    self.value(*logvar).data(),
                    noise,
                    target,
                    weights,
                    *exclusive,
                    n,
                    c,
                    true,
                );
                let (dl, dv) = grad.expect("gradients requested");
                self.acc(
                    grads,
                    *logits,
                    Tensor::new(s.clone(), dl.iter().map(|v| lit(v * gv)).collect()),
                );
                self.acc(grads, *logvar, Tensor::new(s, dv.iter().map(|v| lit(v * gv)).collect()));
            }
            _ => unreachable!("backward_loss called for a non-loss op"),
        }
    }
}

type HeteroGrad = Option<(Vec<f64>, Vec<f64>)>;

#[allow(clippy::too_many_arguments)]
fn hetero_forward<T: Scalar>(
    logits: &[T],
    logvar: &[T],
    noise: &Tensor<T>,
    target: &Tensor<T>,
    weights: &[T],
    exclusive: bool,
    n: usize,
    c: usize,
    want_grad: bool,
) -> (f64, HeteroGrad) {
    let kdraws = noise.dim(0);
    let log_k = (kdraws as f64).ln();
    let mut total = 0.0;
    let mut dl = if want_grad { vec![0.0; n * c] } else { Vec::new() };
    let mut dv = if want_grad { vec![0.0; n * c] } else { Vec::new() };
    let nd = noise.data();
    let td = target.data();
    if exclusive {
        for s in 0..n {
            let w = weights[s].as_f64();
            let row = s * c..(s + 1) * c;
            let sd: Vec<f64> = logvar[row.clone()].iter().map(|v| (0.5 * v.as_f64()).exp()).collect();
            let mut ell = Vec::with_capacity(kdraws);
            let mut probs = Vec::with_capacity(kdraws);
            for k in 0..kdraws {
                let eps = &nd[(k * n + s) * c..(k * n + s + 1) * c];
                let a: Vec<f64> = (0..c)
                    .map(|j| logits[s * c + j].as_f64() + sd[j] * eps[j].as_f64())
                    .collect();
                let lp = log_softmax_row(&a);
                ell.push((0..c).map(|j| td[s * c + j].as_f64() * lp[j]).sum::<f64>());
                if want_grad {
                    probs.push((a, lp));
                }
            }
            let lse = logsumexp(&ell);
            total += w * (log_k - lse);
            if want_grad {
                let scale = w / n as f64;
                let tsum: f64 = (0..c).map(|j| td[s * c + j].as_f64()).sum();
                for (k, (_, lp)) in probs.iter().enumerate() {
                    let r = (ell[k] - lse).exp();
                    let eps = &nd[(k * n + s) * c..(k * n + s + 1) * c];
                    for j in 0..c {
                        let da = scale * r * (lp[j].exp() * tsum - td[s * c + j].as_f64());
                        dl[s * c + j] += da;
                        dv[s * c + j] += da * eps[j].as_f64() * 0.5 * sd[j];
                    }
                }
            }
        }
        (total / n as f64, want_grad.then_some((dl, dv)))
    } else {
        let m = (n * c) as f64;
        for s in 0..n {
            let w = weights[s].as_f64();
            for j in 0..c {
                let idx = s * c + j;
                let sd = (0.5 * logvar[idx].as_f64()).exp();
                let t = td[idx].as_f64();
                let mut ell = Vec::with_capacity(kdraws);
                let mut acts = Vec::with_capacity(kdraws);
                for k in 0..kdraws {
                    let eps = nd[k * n * c + idx].as_f64();
                    let a = logits[idx].as_f64() + sd * eps;
                    ell.push(t * log_sigmoid(a) + (1.0 - t) * log_sigmoid(-a));
                    acts.push((a, eps));
                }
                let lse = logsumexp(&ell);
                total += w * (log_k - lse);
                if want_grad {
                    for (k, &(a, eps)) in acts.iter().enumerate() {
                        let r = (ell[k] - lse).exp();
                        let da = w / m * r * (1.0 / (1.0 + (-a).exp()) - t);
                        dl[idx] += da;
                        dv[idx] += da * eps * 0.5 * sd;
                    }
                }
            }
        }
        (total / m, want_grad.then_some((dl, dv)))
    }
}
