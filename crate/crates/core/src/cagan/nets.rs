//! Generator and discriminator networks.

use crate::config::NormKind;
use crate::error::{Error, Result};
use cagan_tensor::nn::{kaiming, Conv2d, ConvTranspose2d, Linear, Norm2d};
use cagan_tensor::{lit, BatchStats, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Shapes shared by both networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub side: usize,
    pub num_classes: usize,
    pub latent_dim: usize,
    pub g_base: usize,
    pub d_base: usize,
    pub res_blocks: usize,
    pub g_norm: NormKind,
    pub d_norm: NormKind,
}

impl NetSpec {
    pub fn check(&self) -> Result<()> {
        if self.side < 8 || self.side % 8 != 0 {
            return Err(Error::Shape(format!(
                "generator side {} must be a multiple of 8",
                self.side
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Shape("class-aware networks need at least 2 classes".into()));
        }
        if self.d_norm == NormKind::Batch {
            return Err(Error::config(
                "cagan.d_norm",
                "batch statistics couple critic outputs across samples, which the per-sample gradient penalty forbids",
            ));
        }
        Ok(())
    }

    /// Channel widths of the six critic layers.
    pub fn d_widths(&self) -> [usize; 6] {
        [1, 2, 4, 8, 16, 16].map(|m| m * self.d_base)
    }
}

fn make_norm<T: Scalar>(store: &mut ParamStore<T>, kind: NormKind, name: &str, c: usize) -> Option<Norm2d> {
    match kind {
        NormKind::None => None,
        NormKind::Instance => Some(Norm2d::instance(store, name, c)),
        NormKind::Batch => Some(Norm2d::batch(store, name, c)),
    }
}

/// Collected batch statistics of one forward pass, applied after the optimizer step.
#[derive(Default)]
pub struct NormStats(Vec<(usize, BatchStats)>);

fn apply_norm<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    norms: &[Option<Norm2d>],
    idx: usize,
    x: Var,
    train: bool,
    stats: &mut NormStats,
) -> Var {
    match &norms[idx] {
        None => x,
        Some(n) => {
            let (y, s) = n.forward(g, store, x, train);
            if let Some(s) = s {
                stats.0.push((idx, s));
            }
            y
        }
    }
}

/// `G(x, z, c)`: three stride-2 convolutions, residual blocks, three stride-2
/// transposed convolutions and a final convolution. The latent and the one-hot
/// class are replicated over the grid and enter the first convolution. The output
/// is `sigmoid(h + logit(x))`, so the network refines its input.
pub struct Generator<T: Scalar> {
    pub spec: NetSpec,
    pub store: ParamStore<T>,
    first_x: Conv2d,
    first_cond: ParamId,
    down: Vec<Conv2d>,
    res: Vec<(Conv2d, Conv2d)>,
    up: Vec<ConvTranspose2d>,
    last: Conv2d,
    norms: Vec<Option<Norm2d>>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(spec: &NetSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.check()?;
        let mut store = ParamStore::new();
        let b = spec.g_base;
        let cond = spec.latent_dim + spec.num_classes;
        let first_x = Conv2d::new(&mut store, "g.down0.x", 1, b, 4, 2, 1, true, rng);
        let first_cond = store.add("g.down0.cond", kaiming(&[b, cond, 4, 4], 16 * (cond + 1), rng));
        let down = vec![
            Conv2d::new(&mut store, "g.down1", b, 2 * b, 4, 2, 1, false, rng),
            Conv2d::new(&mut store, "g.down2", 2 * b, 4 * b, 4, 2, 1, false, rng),
        ];
        let mut norms = vec![
            make_norm(&mut store, spec.g_norm, "g.down0.norm", b),
            make_norm(&mut store, spec.g_norm, "g.down1.norm", 2 * b),
            make_norm(&mut store, spec.g_norm, "g.down2.norm", 4 * b),
        ];
        let mut res = Vec::new();
        for r in 0..spec.res_blocks {
            norms.push(make_norm(&mut store, spec.g_norm, &format!("g.res{r}.norm0"), 4 * b));
            let c0 = Conv2d::new(
                &mut store,
                &format!("g.res{r}.conv0"),
                4 * b,
                4 * b,
                3,
                1,
                1,
                false,
                rng,
            );
            norms.push(make_norm(&mut store, spec.g_norm, &format!("g.res{r}.norm1"), 4 * b));
            let c1 = Conv2d::new(
                &mut store,
                &format!("g.res{r}.conv1"),
                4 * b,
                4 * b,
                3,
                1,
                1,
                false,
                rng,
            );
            let w = store.get_mut(c1.w);
            *w = w.scale(lit(0.1));
            res.push((c0, c1));
        }
        let widths = [(4 * b, 2 * b), (2 * b, b), (b, b)];
        let mut up = Vec::new();
        for (i, &(ci, co)) in widths.iter().enumerate() {
            norms.push(make_norm(&mut store, spec.g_norm, &format!("g.res_out.norm{i}"), ci));
            up.push(ConvTranspose2d::new(
                &mut store,
                &format!("g.up{i}"),
                ci,
                co,
                4,
                2,
                1,
                0,
                false,
                rng,
            ));
        }
        norms.push(make_norm(&mut store, spec.g_norm, "g.last.norm", b));
        let last = Conv2d::new(&mut store, "g.last", b, 1, 3, 1, 1, true, rng);
        let w = store.get_mut(last.w);
        *w = w.scale(lit(0.1));
        Ok(Generator {
            spec: spec.clone(),
            store,
            first_x,
            first_cond,
            down,
            res,
            up,
            last,
            norms,
        })
    }

    /// `x: [N, 1, S, S]` images in `[0, 1]`, `cond: [N, Z + C]` latent followed by
    /// the one-hot target. Returns the generated images.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, cond: Var, train: bool) -> (Var, NormStats) {
        let st = &self.store;
        let mut stats = NormStats::default();
        let s = self.spec.side;
        let wc = g.param(st, self.first_cond);
        let hc = g.broadcast_conv(cond, wc, s, s, 2, 1);
        let hx = self.first_x.forward(g, st, x);
        let mut h = g.add(hx, hc);
        h = apply_norm(g, st, &self.norms, 0, h, train, &mut stats);
        h = g.relu(h);
        for (i, conv) in self.down.iter().enumerate() {
            h = conv.forward(g, st, h);
            h = apply_norm(g, st, &self.norms, i + 1, h, train, &mut stats);
            h = g.relu(h);
        }
        let mut ni = 3;
        for (c0, c1) in &self.res {
            let mut r = apply_norm(g, st, &self.norms, ni, h, train, &mut stats);
            r = g.relu(r);
            r = c0.forward(g, st, r);
            r = apply_norm(g, st, &self.norms, ni + 1, r, train, &mut stats);
            r = g.relu(r);
            r = c1.forward(g, st, r);
            h = g.add(h, r);
            ni += 2;
        }
        for up in &self.up {
            h = apply_norm(g, st, &self.norms, ni, h, train, &mut stats);
            h = g.relu(h);
            h = up.forward(g, st, h);
            ni += 1;
        }
        h = apply_norm(g, st, &self.norms, ni, h, train, &mut stats);
        h = g.relu(h);
        h = self.last.forward(g, st, h);
        let skip = g.value(x).map(|v| {
            let p = v.as_f64().clamp(1e-3, 1.0 - 1e-3);
            lit((p / (1.0 - p)).ln())
        });
        let skip = g.input(skip);
        let h = g.add(h, skip);
        (g.sigmoid(h), stats)
    }

    pub fn update_running(&mut self, stats: &NormStats) {
        for (idx, s) in &stats.0 {
            if let Some(n) = &self.norms[*idx] {
                n.update_running(&mut self.store, s);
            }
        }
    }
}

/// Critic with a patch-wise source head and a dense class head.
pub struct Discriminator<T: Scalar> {
    pub spec: NetSpec,
    pub store: ParamStore<T>,
    convs: Vec<Conv2d>,
    norms: Vec<Option<Norm2d>>,
    src: Conv2d,
    cls: Linear,
    out_side: usize,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(spec: &NetSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.check()?;
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut side = spec.side;
        let mut cin = 1;
        for (i, &w) in spec.d_widths().iter().enumerate() {
            let conv = if side > 4 {
                side /= 2;
                Conv2d::new(&mut store, &format!("d.conv{i}"), cin, w, 4, 2, 1, true, rng)
            } else {
                Conv2d::new(&mut store, &format!("d.conv{i}"), cin, w, 3, 1, 1, true, rng)
            };
            convs.push(conv);
            norms.push(if i > 0 && side >= 4 {
                make_norm(&mut store, spec.d_norm, &format!("d.norm{i}"), w)
            } else {
                None
            });
            cin = w;
        }
        let src = Conv2d::new(&mut store, "d.src", cin, 1, 3, 1, 1, true, rng);
        let cls = Linear::new(&mut store, "d.cls", cin * side * side, spec.num_classes, true, rng);
        Ok(Discriminator {
            spec: spec.clone(),
            store,
            convs,
            norms,
            src,
            cls,
            out_side: side,
        })
    }

    /// Side of the patch map.
    pub fn patch_side(&self) -> usize {
        self.out_side
    }

    fn trunk(&self, g: &mut Graph<T>, x: Var) -> Var {
        let st = &self.store;
        let mut stats = NormStats::default();
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, st, h);
            h = apply_norm(g, st, &self.norms, i, h, false, &mut stats);
            h = g.leaky_relu(h, 0.2);
        }
        h
    }

    /// Returns the patch map `[N, 1, P, P]` and class logits `[N, C]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> (Var, Var) {
        let h = self.trunk(g, x);
        let src = self.src.forward(g, &self.store, h);
        let n = g.shape(h)[0];
        let flat: usize = g.shape(h)[1..].iter().product();
        let f = g.reshape(h, &[n, flat]);
        let cls = self.cls.forward(g, &self.store, f);
        (src, cls)
    }

    /// Patch map only.
    pub fn src(&self, g: &mut Graph<T>, x: Var) -> Var {
        let h = self.trunk(g, x);
        self.src.forward(g, &self.store, h)
    }

    /// Class logits of real images, evaluated in chunks.
    pub fn classify(&self, images: &Tensor<T>) -> Tensor<T> {
        let n = images.dim(0);
        let mut out = Vec::new();
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(64) {
            let mut g = Graph::new();
            g.freeze(&self.store);
            let x = g.input(images.select(chunk));
            let (_, cls) = self.forward(&mut g, x);
            out.extend_from_slice(g.value(cls).data());
        }
        Tensor::new([n, self.spec.num_classes], out)
    }
}

/// Per-sample critic value: the mean of the patch map.
pub trait Critic<T: Scalar> {
    fn score(&self, g: &mut Graph<T>, x: Var) -> Var;
}

impl<T: Scalar> Critic<T> for Discriminator<T> {
    fn score(&self, g: &mut Graph<T>, x: Var) -> Var {
        let s = self.src(g, x);
        g.mean_per_sample(s)
    }
}
