//! Differentiable normalised mutual information between image pairs.
//!
//! Each pixel value in `[0, 1]` contributes a Gaussian-weighted, normalised vote to
//! `bins` histogram bins; the joint histogram of a pair is the mean outer product of
//! the votes. `NMI = (H(x) + H(y)) / H(x, y)`, which lies in `[1, 2]` whenever the
//! joint entropy is positive and is defined as `0` when it is not.

use crate::graph::{Graph, Op, Var};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

const TINY: f64 = 1e-300;

struct PairStats {
    nmi: f64,
    /// `d NMI / d P` for the joint histogram.
    dp: Vec<f64>,
}

fn votes(vals: &[f64], bins: usize, sigma: f64) -> (Vec<f64>, Vec<f64>) {
    // Returns normalised weights and the unnormalised Gaussian values.
    let b = bins as f64;
    let mut w = vec![0.0; vals.len() * bins];
    let mut raw = vec![0.0; vals.len() * bins];
    for (i, &v) in vals.iter().enumerate() {
        let u = v.clamp(0.0, 1.0) * b;
        let row = &mut raw[i * bins..(i + 1) * bins];
        let mut s = 0.0;
        for (k, r) in row.iter_mut().enumerate() {
            let d = (u - (k as f64 + 0.5)) / sigma;
            *r = (-0.5 * d * d).exp();
            s += *r;
        }
        let s = s.max(TINY);
        for k in 0..bins {
            w[i * bins + k] = raw[i * bins + k] / s;
        }
    }
    (w, raw)
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

fn pair_stats(wx: &[f64], wy: &[f64], npix: usize, bins: usize, want_grad: bool) -> PairStats {
    let mut p = vec![0.0; bins * bins];
    f64::gemm(bins, bins, npix, 1.0 / npix as f64, wx, true, wy, false, 0.0, &mut p);
    let mut px = vec![0.0; bins];
    let mut py = vec![0.0; bins];
    for a in 0..bins {
        for b in 0..bins {
            px[a] += p[a * bins + b];
            py[b] += p[a * bins + b];
        }
    }
    let (hx, hy, hxy) = (entropy(&px), entropy(&py), entropy(&p));
    if hxy <= 0.0 {
        return PairStats {
            nmi: 0.0,
            dp: vec![0.0; if want_grad { bins * bins } else { 0 }],
        };
    }
    let nmi = (hx + hy) / hxy;
    let mut dp = Vec::new();
    if want_grad {
        dp = vec![0.0; bins * bins];
        let lnp = |v: f64| v.max(TINY).ln() + 1.0;
        for a in 0..bins {
            for b in 0..bins {
                dp[a * bins + b] = -(lnp(px[a]) + lnp(py[b])) / hxy + (hx + hy) * lnp(p[a * bins + b]) / (hxy * hxy);
            }
        }
    }
    PairStats { nmi, dp }
}

impl<T: Scalar> Graph<T> {
    /// Per-sample soft NMI between `x` and `y` (`[N, ...]`, values in `[0, 1]`).
    /// `sigma` is the Parzen bandwidth measured in bins.
    pub fn soft_nmi(&mut self, x: Var, y: Var, bins: usize, sigma: f64) -> Var {
        assert_eq!(self.shape(x), self.shape(y), "soft_nmi: shapes differ");
        assert!(bins >= 2 && sigma > 0.0, "soft_nmi: need bins >= 2 and sigma > 0");
        let n = self.shape(x)[0];
        let out: Vec<T> = (0..n)
            .map(|k| {
                let xs: Vec<f64> = self.value(x).sample(k).iter().map(|v| v.as_f64()).collect();
                let ys: Vec<f64> = self.value(y).sample(k).iter().map(|v| v.as_f64()).collect();
                let (wx, _) = votes(&xs, bins, sigma);
                let (wy, _) = votes(&ys, bins, sigma);
                lit(pair_stats(&wx, &wy, xs.len(), bins, false).nmi)
            })
            .collect();
        self.push_op(Tensor::new([n], out), Op::SoftNmi { x, y, bins, sigma }, &[x, y])
    }

    pub(crate) fn backward_nmi(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let Op::SoftNmi { x, y, bins, sigma } = &self.nodes[i].op else {
            unreachable!("backward_nmi called for a non-nmi op")
        };
        let (bins, sigma) = (*bins, *sigma);
        let shape = self.shape(*x).to_vec();
        let n = shape[0];
        let mut dx_all = Vec::with_capacity(self.value(*x).numel());
        let mut dy_all = Vec::with_capacity(self.value(*y).numel());
        for k in 0..n {
            let xs: Vec<f64> = self.value(*x).sample(k).iter().map(|v| v.as_f64()).collect();
            let ys: Vec<f64> = self.value(*y).sample(k).iter().map(|v| v.as_f64()).collect();
            let npix = xs.len();
            let (wx, rx) = votes(&xs, bins, sigma);
            let (wy, ry) = votes(&ys, bins, sigma);
            let st = pair_stats(&wx, &wy, npix, bins, true);
            let gk = g.data()[k].as_f64() / npix as f64;
            // dW_x = W_y dP^T, dW_y = W_x dP, both scaled by the pixel mean.
            let mut dwx = vec![0.0; npix * bins];
            let mut dwy = vec![0.0; npix * bins];
            f64::gemm(npix, bins, bins, gk, &wy, false, &st.dp, true, 0.0, &mut dwx);
            f64::gemm(npix, bins, bins, gk, &wx, false, &st.dp, false, 0.0, &mut dwy);
            dx_all.extend(
                vote_backward(&xs, &wx, &rx, &dwx, bins, sigma)
                    .into_iter()
                    .map(lit::<T>),
            );
            dy_all.extend(
                vote_backward(&ys, &wy, &ry, &dwy, bins, sigma)
                    .into_iter()
                    .map(lit::<T>),
            );
        }
        self.acc(grads, *x, Tensor::new(shape.clone(), dx_all));
        self.acc(grads, *y, Tensor::new(shape, dy_all));
    }
}

fn vote_backward(vals: &[f64], w: &[f64], raw: &[f64], dw: &[f64], bins: usize, sigma: f64) -> Vec<f64> {
    let b = bins as f64;
    vals.iter()
        .enumerate()
        .map(|(i, &v)| {
            if !(0.0..=1.0).contains(&v) {
                return 0.0;
            }
            let row = i * bins..(i + 1) * bins;
            let s: f64 = raw[row.clone()].iter().sum::<f64>().max(TINY);
            let dot: f64 = row.clone().map(|j| dw[j] * w[j]).sum();
            let u = v * b;
            row.enumerate()
                .map(|(k, j)| {
                    let du = (dw[j] - dot) / s;
                    let d = (u - (k as f64 + 0.5)) / sigma;
                    du * raw[j] * (-d) * b / sigma
                })
                .sum()
        })
        .collect()
}
