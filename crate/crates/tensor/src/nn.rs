//! Parameterised layers built on [`Graph`] operations.

use crate::graph::{Graph, Var};
use crate::norm::BatchStats;
use crate::params::{ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// He-normal initialisation for a weight with the given fan-in.
pub fn kaiming<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| lit(dist.sample(rng)))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), kaiming(&[cout, cin, k, k], cin * k * k, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros([cout])));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * k * k / (stride * stride).max(1);
        let w = store.add(format!("{name}.w"), kaiming(&[cin, cout, k, k], fan_in, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros([cout])));
        ConvTranspose2d {
            w,
            b,
            stride,
            pad,
            out_pad,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.conv_transpose2d(x, w, b, self.stride, self.pad, self.out_pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fin: usize,
        fout: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), kaiming(&[fout, fin], fin, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros([fout])));
        Linear { w, b }
    }

    /// Same as [`Linear::new`] but with weights scaled by `gain`, for output heads.
    pub fn with_gain<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fin: usize,
        fout: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let t: Tensor<T> = kaiming(&[fout, fin], fin, rng);
        let w = store.add(format!("{name}.w"), t.scale(lit(gain)));
        let b = Some(store.add(format!("{name}.b"), Tensor::zeros([fout])));
        Linear { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

/// Affine normalisation layer: per-instance, or batch statistics with running
/// estimates kept as store buffers.
#[derive(Clone, Debug)]
pub struct Norm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: Option<(ParamId, ParamId)>,
    pub eps: f64,
    pub momentum: f64,
}

impl Norm2d {
    pub fn instance<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Norm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([c], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([c])),
            running: None,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn batch<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        let mut n = Self::instance(store, name, c);
        let mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([c]));
        let var = store.add_buffer(format!("{name}.running_var"), Tensor::full([c], T::one()));
        n.running = Some((mean, var));
        n
    }

    pub fn is_batch(&self) -> bool {
        self.running.is_some()
    }

    /// Applies the layer. Batch layers use batch statistics when `train` is set and
    /// return them so [`Norm2d::update_running`] can fold them in afterwards.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        train: bool,
    ) -> (Var, Option<BatchStats>) {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match self.running {
            None => (g.instance_norm(x, gamma, beta, self.eps), None),
            Some(_) if train => {
                let (v, s) = g.batch_norm(x, gamma, beta, self.eps);
                (v, Some(s))
            }
            Some((m, v)) => {
                let mean = store.get(m).data().to_vec();
                let var = store.get(v).data().to_vec();
                (g.fixed_norm(x, gamma, beta, &mean, &var, self.eps), None)
            }
        }
    }

    pub fn update_running<T: Scalar>(&self, store: &mut ParamStore<T>, stats: &BatchStats) {
        let Some((m, v)) = self.running else { return };
        let mom = self.momentum;
        for (r, &s) in store.get_mut(m).data_mut().iter_mut().zip(&stats.mean) {
            *r = lit((1.0 - mom) * r.as_f64() + mom * s);
        }
        for (r, &s) in store.get_mut(v).data_mut().iter_mut().zip(&stats.var) {
            *r = lit((1.0 - mom) * r.as_f64() + mom * s);
        }
    }
}
