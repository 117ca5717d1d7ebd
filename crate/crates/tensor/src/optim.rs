//! Adam optimiser.

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::io;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam state for one [`ParamStore`]. Moments are kept in f64.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let sizes: Vec<usize> = store.entries().iter().map(|e| e.value.numel()).collect();
        Adam {
            cfg,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Entries with `None` gradients, buffers and
    /// non-trainable entries are left untouched.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        assert_eq!(self.m.len(), store.len(), "optimiser built for a different store");
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = crate::params::ParamId(i);
            let e = store.entry(id);
            if e.buffer || !e.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).data_mut();
            for (j, (pv, gv)) in p.iter_mut().zip(g.data()).enumerate() {
                let gr = gv.as_f64() + c.weight_decay * pv.as_f64();
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gr;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gr * gr;
                let upd = c.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *pv = T::from_f64_lossy(pv.as_f64() - upd);
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        self.to_store().save(path)
    }

    pub fn load(path: impl AsRef<Path>, cfg: AdamConfig) -> io::Result<Self> {
        let s: ParamStore<f64> = ParamStore::load(path)?;
        let bad = || io::Error::new(io::ErrorKind::InvalidData, "malformed optimiser state");
        let (first, rest) = s.entries().split_first().ok_or_else(bad)?;
        if first.name != "step" || rest.len() % 2 != 0 {
            return Err(bad());
        }
        let half = rest.len() / 2;
        Ok(Adam {
            cfg,
            step: first.value.item() as u64,
            m: rest[..half].iter().map(|e| e.value.data().to_vec()).collect(),
            v: rest[half..].iter().map(|e| e.value.data().to_vec()).collect(),
        })
    }

    fn to_store(&self) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("step", Tensor::scalar(self.step as f64));
        for (i, m) in self.m.iter().enumerate() {
            s.add(format!("m{i}"), Tensor::new([m.len()], m.clone()));
        }
        for (i, v) in self.v.iter().enumerate() {
            s.add(format!("v{i}"), Tensor::new([v.len()], v.clone()));
        }
        s
    }
}

/// Rescales gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::new([3], vec![1.0, -2.0, 0.5]));
        let mut opt = Adam::new(
            &s,
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
        );
        opt.step(&mut s, &[Some(Tensor::new([3], vec![3.0, -0.5, 0.0]))]);
        let w = s.get(crate::params::ParamId(0)).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-6);
        assert!((w[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn minimises_quadratic() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::new([2], vec![3.0, -4.0]));
        let mut opt = Adam::new(
            &s,
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
        );
        for _ in 0..2000 {
            let g = s.get(crate::params::ParamId(0)).map(|v| 2.0 * v);
            opt.step(&mut s, &[Some(g)]);
        }
        assert!(s.get(crate::params::ParamId(0)).max_abs() < 1e-3);
    }

    #[test]
    fn clip_bounds_norm() {
        let mut g = vec![Some(Tensor::new([2], vec![3.0f64, 4.0])), None];
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        let d = g[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
    }
}
