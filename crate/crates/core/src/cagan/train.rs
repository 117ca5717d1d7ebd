//! Alternating critic/generator optimisation.

use super::loss::{
    cls_loss_graph, content_loss_graph, critic_input_grads, gp_term, interpolate, ContentTerms, LossWeights,
    PerceptualExtractor,
};
use super::nets::{Discriminator, Generator, NetSpec, NormStats};
use super::{CaganCheckpoint, HistoryRow};
use crate::config::{CaganConfig, LabelMode};
use crate::data::{one_hot, ImageSample};
use crate::error::{Error, Result};
use crate::util::{images_tensor, rng_for};
use cagan_tensor::{lit, Adam, AdamConfig, Gradients, Graph, Scalar, Tensor, Var};
use rand::Rng;
use std::path::Path;

/// Latent codes per training image; the first entry belongs to the image's own mask.
pub struct CaganData<'a> {
    pub images: Vec<&'a ImageSample>,
    pub latents: Vec<Vec<Vec<f32>>>,
}

/// Values of the critic objective for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticTerms {
    pub l_d: f64,
    pub l_adv: f64,
    pub l_cls_r: f64,
    pub gp: f64,
}

/// Critic loss `-L_adv + lambda_cls * L_cls_real` and its parameter gradients.
///
/// The penalty gradient needs the derivative of `||grad_x D(x_hat)||`, which is the
/// directional derivative of `grad_x D` along `u = grad / ||grad||`. It is taken by
/// a central difference of the critic at `x_hat +- h u`, so all terms share one
/// first-order backward pass over `[real, fake, x_hat + h u, x_hat - h u]`.
#[allow(clippy::too_many_arguments)]
pub fn critic_step<T: Scalar>(
    disc: &Discriminator<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    labels: &[Vec<u8>],
    interp: &[f64],
    mode: LabelMode,
    w: &LossWeights,
    fd_step: f64,
) -> (Gradients<T>, CriticTerms) {
    let b = real.dim(0);
    let xhat = interpolate(real, fake, interp);
    let grads = critic_input_grads(disc, &[&disc.store], xhat.clone());
    let gp = gp_term(&grads);
    let per = xhat.numel() / b;
    let mut plus = xhat.clone();
    let mut minus = xhat;
    let mut coef = vec![0.0; b];
    for (i, gi) in grads.iter().enumerate() {
        let norm = gi.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 {
            continue;
        }
        coef[i] = w.lambda_gp * 2.0 * (norm - 1.0) / b as f64 / (2.0 * fd_step);
        for k in 0..per {
            let d = fd_step * gi[k] / norm;
            let p = &mut plus.data_mut()[i * per + k];
            *p = lit(p.as_f64() + d);
            let m = &mut minus.data_mut()[i * per + k];
            *m = lit(m.as_f64() - d);
        }
    }
    let all = Tensor::stack(&[real, fake, &plus, &minus]);
    let mut g = Graph::new();
    let x = g.input(all);
    let (src, cls) = disc.forward(&mut g, x);
    let scores = g.mean_per_sample(src);
    let mut sw = Vec::with_capacity(4 * b);
    sw.extend(std::iter::repeat_n(-1.0 / b as f64, b));
    sw.extend(std::iter::repeat_n(1.0 / b as f64, b));
    sw.extend(coef.iter().copied());
    sw.extend(coef.iter().map(|c| -c));
    let swv = g.input(Tensor::new([4 * b], sw.iter().map(|&v| lit(v)).collect()));
    let weighted = g.mul(scores, swv);
    let adv_part = g.sum_all(weighted);
    let all_labels: Vec<Vec<u8>> = (0..4).flat_map(|_| labels.iter().cloned()).collect();
    let mut rw = vec![0.0; 4 * b];
    rw[..b].iter_mut().for_each(|v| *v = 4.0);
    let cls_l = cls_loss_graph(&mut g, cls, &all_labels, mode, Some(&rw));
    let cls_w = g.scale(cls_l, w.lambda_cls);
    let total = g.add(adv_part, cls_w);
    let sv = g.value(scores).data();
    let mean_r = sv[..b].iter().map(|v| v.as_f64()).sum::<f64>() / b as f64;
    let mean_f = sv[b..2 * b].iter().map(|v| v.as_f64()).sum::<f64>() / b as f64;
    let l_adv = mean_r - mean_f - w.lambda_gp * gp;
    let l_cls_r = g.value(cls_l).item().as_f64();
    let terms = CriticTerms {
        l_d: -l_adv + w.lambda_cls * l_cls_r,
        l_adv,
        l_cls_r,
        gp,
    };
    (g.backward(total), terms)
}

/// Generator-side values for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorTerms {
    pub mean_fake: f64,
    pub l_cls_f: f64,
    pub content: ContentTerms,
}

/// Builds `-mean D_src(G(x)) + lambda_cls * L_cls_fake + lambda_content * L_content`
/// in `g`. Critic parameters are frozen; `x` and `cond` are constants.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective<T: Scalar>(
    g: &mut Graph<T>,
    gen: &Generator<T>,
    disc: &Discriminator<T>,
    feat: Option<&dyn PerceptualExtractor<T>>,
    x: Var,
    cond: Var,
    targets: &[Vec<u8>],
    mode: LabelMode,
    w: &LossWeights,
    soft_bins: usize,
    soft_sigma: f64,
    train: bool,
) -> (Var, Var, NormStats, GeneratorTerms) {
    g.freeze(&disc.store);
    let (fake, stats) = gen.forward(g, x, cond, train);
    let (src, cls) = disc.forward(g, fake);
    let sm = g.mean_all(src);
    let adv = g.scale(sm, -1.0);
    let lc = cls_loss_graph(g, cls, targets, mode, None);
    let (content, cterms) = content_loss_graph(g, x, fake, feat, w, soft_bins, soft_sigma);
    let a = g.scale(lc, w.lambda_cls);
    let b = g.scale(content, w.lambda_content);
    let t = g.add(adv, a);
    let total = g.add(t, b);
    let terms = GeneratorTerms {
        mean_fake: g.value(sm).item().as_f64(),
        l_cls_f: g.value(lc).item().as_f64(),
        content: cterms,
    };
    (total, fake, stats, terms)
}

/// Concatenated `[z, one_hot(c)]` rows.
pub fn condition(latents: &[&[f32]], classes: &[usize], num_classes: usize) -> Tensor<f32> {
    let zd = latents[0].len();
    let mut data = Vec::with_capacity(latents.len() * (zd + num_classes));
    for (z, &c) in latents.iter().zip(classes) {
        data.extend_from_slice(z);
        data.extend((0..num_classes).map(|k| (k == c) as u8 as f32));
    }
    Tensor::new([latents.len(), zd + num_classes], data)
}

fn adam_cfg(cfg: &CaganConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        ..Default::default()
    }
}

fn present_classes(images: &[&ImageSample]) -> usize {
    let c = images.first().map_or(0, |s| s.labels.len());
    (0..c).filter(|&k| images.iter().any(|s| s.labels[k] == 1)).count()
}

/// Trains the class-aware GAN for `cfg.iters` critic updates, updating the
/// generator on every `n_critic`-th one. When `resume` is given training continues
/// from its iteration counter and optimiser state.
#[allow(clippy::too_many_arguments)]
pub fn train_cagan(
    data: &CaganData<'_>,
    num_classes: usize,
    mode: LabelMode,
    feat: Option<&dyn PerceptualExtractor<f32>>,
    cfg: &CaganConfig,
    seed: u64,
    out: Option<&Path>,
    resume: Option<CaganCheckpoint>,
) -> Result<CaganCheckpoint> {
    let w = LossWeights::from(cfg);
    w.validate()?;
    if data.images.is_empty() || data.images.len() != data.latents.len() {
        return Err(Error::Training("no training images with latents".into()));
    }
    if present_classes(&data.images) < 2 {
        return Err(Error::Training(
            "class head needs at least two classes in the training data".into(),
        ));
    }
    let side = data.images[0].side;
    let latent_dim = data.latents[0][0].len();
    let spec = NetSpec {
        side,
        num_classes,
        latent_dim,
        g_base: cfg.g_base,
        d_base: cfg.d_base,
        res_blocks: cfg.res_blocks,
        g_norm: cfg.g_norm,
        d_norm: cfg.d_norm,
    };
    let mut ck = match resume {
        Some(ck) => {
            if ck.gen.spec != spec {
                return Err(Error::Shape(
                    "checkpoint network shapes differ from the configuration".into(),
                ));
            }
            ck
        }
        None => {
            let mut rng = rng_for(seed, "cagan-init", 0);
            let gen = Generator::new(&spec, &mut rng)?;
            let disc = Discriminator::new(&spec, &mut rng)?;
            CaganCheckpoint {
                gen,
                disc,
                weights: w.clone(),
                label_mode: mode,
                iter: 0,
                seed,
                history: Vec::new(),
                g_opt: None,
                d_opt: None,
            }
        }
    };
    let mut g_opt = ck
        .g_opt
        .take()
        .unwrap_or_else(|| Adam::new(&ck.gen.store, adam_cfg(cfg)));
    let mut d_opt = ck
        .d_opt
        .take()
        .unwrap_or_else(|| Adam::new(&ck.disc.store, adam_cfg(cfg)));
    let n_critic = cfg.n_critic.max(1);
    let batch = cfg.batch.max(1);
    let mut last_saved = ck.iter;
    while ck.iter < cfg.iters {
        let t = ck.iter;
        let mut rng = rng_for(seed, "cagan-iter", t as u64);
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..data.images.len())).collect();
        let targets: Vec<usize> = (0..batch).map(|_| rng.random_range(0..num_classes)).collect();
        let interp: Vec<f64> = (0..batch).map(|_| rng.random::<f64>()).collect();
        let zs: Vec<&[f32]> = idx
            .iter()
            .map(|&i| {
                let l = &data.latents[i];
                l[rng.random_range(0..l.len())].as_slice()
            })
            .collect();
        let xs: Vec<&[f32]> = idx.iter().map(|&i| data.images[i].pixels.as_slice()).collect();
        let labels: Vec<Vec<u8>> = idx.iter().map(|&i| data.images[i].labels.clone()).collect();
        let target_vecs: Vec<Vec<u8>> = targets.iter().map(|&c| one_hot(c, num_classes)).collect();
        let real = images_tensor(&xs, side);
        let cond = condition(&zs, &targets, num_classes);
        let g_update = t % n_critic == n_critic - 1;

        let mut gg = Graph::new();
        let xv = gg.input(real.clone());
        let cv = gg.input(cond);
        let mut g_part = None;
        let fake_t = if g_update {
            let (total, fake, stats, terms) = generator_objective(
                &mut gg,
                &ck.gen,
                &ck.disc,
                feat,
                xv,
                cv,
                &target_vecs,
                mode,
                &w,
                cfg.soft_nmi_bins,
                cfg.soft_nmi_sigma,
                true,
            );
            let v = gg.value(fake).clone();
            g_part = Some((total, stats, terms));
            v
        } else {
            gg.freeze(&ck.gen.store);
            let (fake, _) = ck.gen.forward(&mut gg, xv, cv, true);
            gg.value(fake).clone()
        };
        let (d_grads, dterms) = critic_step(&ck.disc, &real, &fake_t, &labels, &interp, mode, &w, cfg.gp_fd_step);
        let mut row = HistoryRow {
            iter: t,
            l_d: dterms.l_d,
            l_g: None,
            l_adv: dterms.l_adv,
            l_cls_r: dterms.l_cls_r,
            l_cls_f: None,
            l_content: None,
            gp: dterms.gp,
        };
        let mut g_step = None;
        if let Some((total, stats, gterms)) = g_part {
            row.l_cls_f = Some(gterms.l_cls_f);
            row.l_content = Some(gterms.content.total);
            row.l_g = Some(dterms.l_adv + w.lambda_cls * gterms.l_cls_f + w.lambda_content * gterms.content.total);
            g_step = Some((gg.backward(total).for_store(&ck.gen.store), stats));
        }
        let finite = [Some(row.l_d), row.l_g, Some(row.gp)]
            .iter()
            .flatten()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Training(format!(
                "non-finite loss at iteration {t}; last good checkpoint is iteration {last_saved}"
            )));
        }
        let dg = d_grads.for_store(&ck.disc.store);
        d_opt.step(&mut ck.disc.store, &dg);
        if let Some((gr, stats)) = g_step {
            g_opt.step(&mut ck.gen.store, &gr);
            ck.gen.update_running(&stats);
        }
        if !ck.gen.store.is_finite() || !ck.disc.store.is_finite() {
            return Err(Error::Training(format!(
                "parameters diverged at iteration {t}; last good checkpoint is iteration {last_saved}"
            )));
        }
        ck.history.push(row);
        ck.iter += 1;
        if t % 100 == 0 {
            log::debug!(
                "cagan iter {t}: L_D {:.4} adv {:.4} gp {:.4} cls_r {:.4}",
                row.l_d,
                row.l_adv,
                row.gp,
                row.l_cls_r
            );
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && ck.iter % cfg.checkpoint_every == 0 {
                ck.save_with(dir, &g_opt, &d_opt)?;
                last_saved = ck.iter;
            }
        }
    }
    if let Some(dir) = out {
        ck.save_with(dir, &g_opt, &d_opt)?;
    }
    ck.g_opt = Some(g_opt);
    ck.d_opt = Some(d_opt);
    Ok(ck)
}
