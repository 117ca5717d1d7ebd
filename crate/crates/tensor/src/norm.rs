//! Instance and batch normalisation.

use crate::graph::{Graph, Op, Var};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Per-channel batch statistics returned by [`Graph::batch_norm`] so the caller
/// can maintain running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl<T: Scalar> Graph<T> {
    /// Normalises each `(sample, channel)` plane of `x: [N, C, H, W]`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let src = self.value(x).data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = Vec::with_capacity(n * c);
        for (plane, dst) in src.chunks(hw).zip(xhat.chunks_mut(hw)) {
            let (mean, var) = moments(plane.iter().copied());
            let r = 1.0 / (var + eps).sqrt();
            for (d, &v) in dst.iter_mut().zip(plane) {
                *d = lit((v.as_f64() - mean) * r);
            }
            rstd.push(lit(r));
        }
        let value = affine(&xhat, self.value(gamma).data(), self.value(beta).data(), c, hw);
        let xhat = Tensor::new(s.clone(), xhat);
        self.push_op(
            Tensor::new(s, value),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                per_instance: true,
            },
            &[x, gamma, beta],
        )
    }

    /// Training-mode batch normalisation over `(N, H, W)` per channel.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let s = self.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2..].iter().product::<usize>());
        let src = self.value(x).data();
        let mut stats = BatchStats {
            mean: vec![0.0; c],
            var: vec![0.0; c],
        };
        let mut rstd = Vec::with_capacity(c);
        let mut xhat = vec![T::zero(); src.len()];
        for ch in 0..c {
            let it = (0..n).flat_map(|k| src[(k * c + ch) * hw..(k * c + ch + 1) * hw].iter().copied());
            let (mean, var) = moments(it);
            let r = 1.0 / (var + eps).sqrt();
            for k in 0..n {
                let base = (k * c + ch) * hw;
                for j in base..base + hw {
                    xhat[j] = lit((src[j].as_f64() - mean) * r);
                }
            }
            stats.mean[ch] = mean;
            stats.var[ch] = var;
            rstd.push(lit(r));
        }
        let value = affine(&xhat, self.value(gamma).data(), self.value(beta).data(), c, hw);
        let xhat = Tensor::new(s.clone(), xhat);
        let v = self.push_op(
            Tensor::new(s, value),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                per_instance: false,
            },
            &[x, gamma, beta],
        );
        (v, stats)
    }

    /// Normalisation with externally supplied per-channel statistics (inference-mode
    /// batch norm).
    pub fn fixed_norm(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Var {
        let s = self.shape(x).to_vec();
        let (c, hw) = (s[1], s[2..].iter().product::<usize>());
        let rstd: Vec<T> = var.iter().map(|&v| lit(1.0 / (v.as_f64() + eps).sqrt())).collect();
        let src = self.value(x).data();
        let xhat: Vec<T> = src
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let ch = (j / hw) % c;
                (v - mean[ch]) * rstd[ch]
            })
            .collect();
        let value = affine(&xhat, self.value(gamma).data(), self.value(beta).data(), c, hw);
        let xhat = Tensor::new(s.clone(), xhat);
        self.push_op(
            Tensor::new(s, value),
            Op::FixedNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub(crate) fn backward_norm(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[i].op {
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                per_instance,
            } => {
                let s = self.shape(*x).to_vec();
                let (n, c, hw) = (s[0], s[1], s[2..].iter().product::<usize>());
                let gam = self.value(*gamma).data();
                let (dgamma, dbeta) = affine_grads(g.data(), xhat.data(), c, hw);
                if self.needs_grad(*gamma) {
                    self.acc(grads, *gamma, Tensor::new([c], dgamma));
                }
                if self.needs_grad(*beta) {
                    self.acc(grads, *beta, Tensor::new([c], dbeta));
                }
                if !self.needs_grad(*x) {
                    return;
                }
                let gd = g.data();
                let xh = xhat.data();
                let mut dx = vec![T::zero(); gd.len()];
                if *per_instance {
                    for k in 0..n * c {
                        let ch = k % c;
                        let range = k * hw..(k + 1) * hw;
                        norm_group_backward(range.clone().map(|j| (j, gd[j] * gam[ch], xh[j])), rstd[k], hw, &mut dx);
                    }
                } else {
                    for ch in 0..c {
                        let idx = (0..n).flat_map(|k| (k * c + ch) * hw..(k * c + ch + 1) * hw);
                        norm_group_backward(idx.map(|j| (j, gd[j] * gam[ch], xh[j])), rstd[ch], n * hw, &mut dx);
                    }
                }
                self.acc(grads, *x, Tensor::new(s, dx));
            }
            Op::FixedNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let s = self.shape(*x).to_vec();
                let (c, hw) = (s[1], s[2..].iter().product::<usize>());
                let (dgamma, dbeta) = affine_grads(g.data(), xhat.data(), c, hw);
                if self.needs_grad(*gamma) {
                    self.acc(grads, *gamma, Tensor::new([c], dgamma));
                }
                if self.needs_grad(*beta) {
                    self.acc(grads, *beta, Tensor::new([c], dbeta));
                }
                if self.needs_grad(*x) {
                    let gam = self.value(*gamma).data();
                    let dx = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| {
                            let ch = (j / hw) % c;
                            gv * gam[ch] * rstd[ch]
                        })
                        .collect();
                    self.acc(grads, *x, Tensor::new(s, dx));
                }
            }
            _ => unreachable!("backward_norm called for a non-norm op"),
        }
    }
}

fn moments<T: Scalar>(it: impl Iterator<Item = T> + Clone) -> (f64, f64) {
    let mut count = 0usize;
    let mut sum = 0.0;
    for v in it.clone() {
        sum += v.as_f64();
        count += 1;
    }
    let mean = sum / count as f64;
    let var = it.map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / count as f64;
    (mean, var)
}

fn affine<T: Scalar>(xhat: &[T], gamma: &[T], beta: &[T], c: usize, hw: usize) -> Vec<T> {
    xhat.iter()
        .enumerate()
        .map(|(j, &v)| {
            let ch = (j / hw) % c;
            v * gamma[ch] + beta[ch]
        })
        .collect()
}

fn affine_grads<T: Scalar>(g: &[T], xhat: &[T], c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (j, (&gv, &xv)) in g.iter().zip(xhat).enumerate() {
        let ch = (j / hw) % c;
        dgamma[ch] += gv * xv;
        dbeta[ch] += gv;
    }
    (dgamma, dbeta)
}

/// `dx = rstd / m * (m * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))` over one group.
fn norm_group_backward<T: Scalar>(items: impl Iterator<Item = (usize, T, T)> + Clone, rstd: T, m: usize, dx: &mut [T]) {
    let mut sum_d = 0.0;
    let mut sum_dx = 0.0;
    for (_, d, xh) in items.clone() {
        sum_d += d.as_f64();
        sum_dx += (d * xh).as_f64();
    }
    let mf = m as f64;
    let r = rstd.as_f64();
    for (j, d, xh) in items {
        dx[j] = lit(r / mf * (mf * d.as_f64() - sum_d - xh.as_f64() * sum_dx));
    }
}
