//! Central finite-difference checks of the GAN gradients on small random
//! networks in double precision. Each function returns the largest relative
//! error over its cases, measured as the ∞-norm gap scaled by the ∞-norm of the
//! numeric gradient.

use crate::cagan::loss::{critic_input_grads, gp_term, interpolate, PerceptualExtractor};
use crate::cagan::{
    adv_loss_wgan_gp, cls_loss_real, critic_step, generator_objective, Discriminator, Generator, LossWeights, NetSpec,
};
use crate::config::{LabelMode, NormKind};
use crate::data::one_hot;
use cagan_tensor::{Graph, ParamId, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 16;
const C: usize = 3;
const Z: usize = 4;

fn spec() -> NetSpec {
    NetSpec {
        side: SIDE,
        num_classes: C,
        latent_dim: Z,
        g_base: 2,
        d_base: 2,
        res_blocks: 1,
        g_norm: NormKind::Instance,
        d_norm: NormKind::Instance,
    }
}

fn images(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(vec![n, 1, SIDE, SIDE], |_| rng.random_range(0.05..0.95))
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let d = a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let s = n.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-8);
    d / s
}

fn src_score(d: &Discriminator<f64>, x: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let s = d.src(&mut g, v);
    let m = g.mean_all(s);
    g.value(m).item()
}

/// Input gradient of the mean critic patch score, one random image per case.
pub fn critic_source_error(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Discriminator::<f64>::new(&spec(), &mut rng).expect("valid spec");
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let x = images(1, &mut rng);
        let mut g = Graph::new();
        let v = g.input_with_grad(x.clone());
        let s = d.src(&mut g, v);
        let m = g.mean_all(s);
        let analytic = g.backward(m).get(v).expect("input gradient").data().to_vec();
        let h = 1e-6;
        let numeric: Vec<f64> = (0..x.numel())
            .map(|j| {
                let mut p = x.clone();
                p.data_mut()[j] += h;
                let mut q = x.clone();
                q.data_mut()[j] -= h;
                (src_score(&d, &p) - src_score(&d, &q)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Frozen critic activations standing in for the perceptual feature network.
struct CriticFeatures(Discriminator<f64>);

impl PerceptualExtractor<f64> for CriticFeatures {
    fn features(&self, g: &mut Graph<f64>, x: Var) -> Var {
        g.freeze(&self.0.store);
        self.0.src(g, x)
    }
}

struct GenCase {
    x: Tensor<f64>,
    cond: Tensor<f64>,
    targets: Vec<Vec<u8>>,
}

fn gen_loss(
    gen: &Generator<f64>,
    disc: &Discriminator<f64>,
    feat: &CriticFeatures,
    case: &GenCase,
    w: &LossWeights,
) -> (Graph<f64>, Var) {
    let mut g = Graph::new();
    let x = g.input(case.x.clone());
    let cond = g.input(case.cond.clone());
    let (total, _, _, _) = generator_objective(
        &mut g,
        gen,
        disc,
        Some(feat),
        x,
        cond,
        &case.targets,
        LabelMode::Exclusive,
        w,
        16,
        0.5,
        true,
    );
    (g, total)
}

/// Parameter gradient of the full generator objective (adversarial, class and
/// content terms), two random coordinates per parameter tensor and case.
pub fn generator_objective_error(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = Generator::<f64>::new(&spec(), &mut rng).expect("valid spec");
    let disc = Discriminator::<f64>::new(&spec(), &mut rng).expect("valid spec");
    let feat = CriticFeatures(Discriminator::<f64>::new(&spec(), &mut rng).expect("valid spec"));
    let w = LossWeights::default();
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let case = GenCase {
            x: images(2, &mut rng),
            cond: Tensor::from_fn(vec![2, Z + C], |i| {
                if i % (Z + C) < Z {
                    rng.random_range(-1.0..1.0)
                } else {
                    0.0
                }
            }),
            targets: (0..2).map(|_| one_hot(rng.random_range(0..C), C)).collect(),
        };
        let (g, total) = gen_loss(&gen, &disc, &feat, &case, &w);
        let grads = g.backward(total).for_store(&gen.store);
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        let h = 1e-6;
        for (i, gi) in grads.iter().enumerate() {
            let Some(gi) = gi else { continue };
            for _ in 0..2 {
                let j = rng.random_range(0..gi.numel());
                let orig = gen.store.entries()[i].value.data()[j];
                let mut eval = |v: f64| {
                    gen.store.get_mut(ParamId(i)).data_mut()[j] = v;
                    let (g, t) = gen_loss(&gen, &disc, &feat, &case, &w);
                    g.value(t).item()
                };
                let fp = eval(orig + h);
                let fm = eval(orig - h);
                gen.store.get_mut(ParamId(i)).data_mut()[j] = orig;
                analytic.push(gi.data()[j]);
                numeric.push((fp - fm) / (2.0 * h));
            }
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Critic loss recomputed from scratch with the exact input-gradient penalty.
pub fn critic_objective(
    disc: &Discriminator<f64>,
    real: &Tensor<f64>,
    fake: &Tensor<f64>,
    labels: &[Vec<u8>],
    eps: &[f64],
    w: &LossWeights,
) -> f64 {
    let gp = gp_term(&critic_input_grads(disc, &[&disc.store], interpolate(real, fake, eps)));
    let mut g = Graph::new();
    let r = g.input(real.clone());
    let f = g.input(fake.clone());
    let sr = disc.src(&mut g, r);
    let sf = disc.src(&mut g, f);
    let mr = g.mean_per_sample(sr);
    let mf = g.mean_per_sample(sf);
    let adv = adv_loss_wgan_gp(g.value(mr).data(), g.value(mf).data(), gp, w).expect("finite scores");
    let cls = cls_loss_real(&disc.classify(real), labels, LabelMode::Exclusive).expect("valid labels");
    -adv + w.lambda_cls * cls
}

/// Parameter gradient of the critic loss including the gradient penalty, one
/// random coordinate per parameter tensor and case. Also fails (returns
/// infinity) when the logged critic loss does not replay.
pub fn critic_penalty_error(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut disc = Discriminator::<f64>::new(&spec(), &mut rng).expect("valid spec");
    let w = LossWeights::default();
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let real = images(3, &mut rng);
        let fake = images(3, &mut rng);
        let labels: Vec<Vec<u8>> = (0..3).map(|k| one_hot(k, C)).collect();
        let eps: Vec<f64> = (0..3).map(|_| rng.random()).collect();
        let (grads, terms) = critic_step(&disc, &real, &fake, &labels, &eps, LabelMode::Exclusive, &w, 1e-5);
        let replay = critic_objective(&disc, &real, &fake, &labels, &eps, &w);
        if (terms.l_d - replay).abs() > 1e-9 * replay.abs().max(1.0) {
            return f64::INFINITY;
        }
        let grads = grads.for_store(&disc.store);
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        let h = 1e-5;
        for (i, gi) in grads.iter().enumerate() {
            let Some(gi) = gi else { continue };
            let j = rng.random_range(0..gi.numel());
            let orig = disc.store.entries()[i].value.data()[j];
            disc.store.get_mut(ParamId(i)).data_mut()[j] = orig + h;
            let fp = critic_objective(&disc, &real, &fake, &labels, &eps, &w);
            disc.store.get_mut(ParamId(i)).data_mut()[j] = orig - h;
            let fm = critic_objective(&disc, &real, &fake, &labels, &eps, &w);
            disc.store.get_mut(ParamId(i)).data_mut()[j] = orig;
            analytic.push(gi.data()[j]);
            numeric.push((fp - fm) / (2.0 * h));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}
