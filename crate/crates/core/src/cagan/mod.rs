//! Class-aware GAN: a generator that rewrites an image towards a requested class
//! under a mask-latent condition, and a critic with source and class heads.

pub mod loss;
pub mod nets;
pub mod train;

pub use loss::{
    adv_loss_wgan_gp, cls_loss, cls_loss_fake, cls_loss_real, content_loss, gp_term, nmi, ContentTerms, LossWeights,
    PerceptualExtractor,
};
pub use nets::{Critic, Discriminator, Generator, NetSpec};
pub use train::{condition, critic_step, generator_objective, train_cagan, CaganData, CriticTerms, GeneratorTerms};

use crate::config::LabelMode;
use crate::data::{one_hot, ImageSample, Mask, Provenance};
use crate::error::{Error, Result};
use crate::segmenter::{perturb_mask, Segmenter};
use crate::util::{images_tensor, read_json, write_json};
use cagan_tensor::{Adam, AdamConfig, Graph, ParamStore};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One logged critic update. Generator columns are filled on iterations that also
/// updated the generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    #[serde(rename = "L_D")]
    pub l_d: f64,
    #[serde(rename = "L_G")]
    pub l_g: Option<f64>,
    #[serde(rename = "L_adv")]
    pub l_adv: f64,
    #[serde(rename = "L_cls_r")]
    pub l_cls_r: f64,
    #[serde(rename = "L_cls_f")]
    pub l_cls_f: Option<f64>,
    #[serde(rename = "L_content")]
    pub l_content: Option<f64>,
    pub gp: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    spec: NetSpec,
    weights: LossWeights,
    label_mode: LabelMode,
    iter: usize,
    seed: u64,
}

pub struct CaganCheckpoint {
    pub gen: Generator<f32>,
    pub disc: Discriminator<f32>,
    pub weights: LossWeights,
    pub label_mode: LabelMode,
    pub iter: usize,
    pub seed: u64,
    pub history: Vec<HistoryRow>,
    pub g_opt: Option<Adam>,
    pub d_opt: Option<Adam>,
}

fn save_store(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    store.save(path).map_err(|e| Error::io(path, e))
}

impl CaganCheckpoint {
    pub fn num_classes(&self) -> usize {
        self.gen.spec.num_classes
    }

    pub fn side(&self) -> usize {
        self.gen.spec.side
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_store(&self.gen.store, &dir.join("G.bin"))?;
        save_store(&self.disc.store, &dir.join("D.bin"))?;
        write_json(
            dir.join("weights.json"),
            &CheckpointMeta {
                spec: self.gen.spec.clone(),
                weights: self.weights.clone(),
                label_mode: self.label_mode,
                iter: self.iter,
                seed: self.seed,
            },
        )?;
        let path = dir.join("history.csv");
        let mut wr = csv::Writer::from_path(&path)?;
        for r in &self.history {
            wr.serialize(r)?;
        }
        wr.flush().map_err(|e| Error::io(&path, e))?;
        for (name, opt) in [("G.adam", &self.g_opt), ("D.adam", &self.d_opt)] {
            if let Some(o) = opt {
                o.save(dir.join(name)).map_err(|e| Error::io(dir.join(name), e))?;
            }
        }
        Ok(())
    }

    pub(crate) fn save_with(&mut self, dir: &Path, g_opt: &Adam, d_opt: &Adam) -> Result<()> {
        self.g_opt = Some(g_opt.clone());
        self.d_opt = Some(d_opt.clone());
        let r = self.save(dir);
        self.g_opt = None;
        self.d_opt = None;
        r
    }

    /// Loads a checkpoint; optimiser state is restored when present and `opt` is given.
    pub fn load(dir: impl AsRef<Path>, opt: Option<AdamConfig>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: CheckpointMeta = read_json(dir.join("weights.json"))?;
        let mut rng = crate::util::rng_for(meta.seed, "cagan-init", 0);
        let mut gen = Generator::new(&meta.spec, &mut rng)?;
        let mut disc = Discriminator::new(&meta.spec, &mut rng)?;
        gen.store
            .load_values(dir.join("G.bin"))
            .map_err(|e| Error::io(dir.join("G.bin"), e))?;
        disc.store
            .load_values(dir.join("D.bin"))
            .map_err(|e| Error::io(dir.join("D.bin"), e))?;
        let mut history = Vec::new();
        let hp = dir.join("history.csv");
        if hp.exists() {
            let mut rd = csv::Reader::from_path(&hp)?;
            for r in rd.deserialize() {
                history.push(r?);
            }
        }
        let (mut g_opt, mut d_opt) = (None, None);
        if let Some(cfg) = opt {
            for (name, slot) in [("G.adam", &mut g_opt), ("D.adam", &mut d_opt)] {
                let p = dir.join(name);
                if p.exists() {
                    *slot = Some(Adam::load(&p, cfg).map_err(|e| Error::io(&p, e))?);
                }
            }
        }
        Ok(CaganCheckpoint {
            gen,
            disc,
            weights: meta.weights,
            label_mode: meta.label_mode,
            iter: meta.iter,
            seed: meta.seed,
            history,
            g_opt,
            d_opt,
        })
    }
}

/// One generation request: base image, conditioning latent (with its mask id) and
/// target class.
pub struct GenRequest<'a> {
    pub base: &'a ImageSample,
    pub mask_id: &'a str,
    pub z: &'a [f32],
    pub target: usize,
}

/// Generates one synthetic sample per request.
pub fn generate_batch(ck: &CaganCheckpoint, reqs: &[GenRequest<'_>]) -> Result<Vec<ImageSample>> {
    let c = ck.num_classes();
    let side = ck.side();
    for r in reqs {
        if r.target >= c {
            return Err(Error::Domain(format!("target class {} out of range 0..{c}", r.target)));
        }
        if r.base.side != side {
            return Err(Error::Shape(format!(
                "image side {} vs generator side {side}",
                r.base.side
            )));
        }
        if r.z.len() != ck.gen.spec.latent_dim {
            return Err(Error::Shape(format!(
                "latent width {} vs {}",
                r.z.len(),
                ck.gen.spec.latent_dim
            )));
        }
    }
    let mut out = Vec::with_capacity(reqs.len());
    for chunk in reqs.chunks(32) {
        let xs: Vec<&[f32]> = chunk.iter().map(|r| r.base.pixels.as_slice()).collect();
        let zs: Vec<&[f32]> = chunk.iter().map(|r| r.z).collect();
        let ts: Vec<usize> = chunk.iter().map(|r| r.target).collect();
        let mut g = Graph::new();
        g.freeze(&ck.gen.store);
        let x = g.input(images_tensor(&xs, side));
        let cond = g.input(condition(&zs, &ts, c));
        let (y, _) = ck.gen.forward(&mut g, x, cond, false);
        let y = g.value(y);
        for (i, r) in chunk.iter().enumerate() {
            out.push(ImageSample {
                id: format!("syn-{}-{}-c{}", r.base.id, r.mask_id, r.target),
                side,
                pixels: y.sample(i).iter().map(|v| v.clamp(0.0, 1.0)).collect(),
                labels: one_hot(r.target, c),
                patient_id: r.base.patient_id.clone(),
                provenance: Provenance::Synthetic,
                base_id: Some(r.base.id.clone()),
                mask_id: Some(r.mask_id.to_string()),
            });
        }
    }
    Ok(out)
}

/// Synthetic image of class `target` from `x` under the latent of `mask`.
pub fn generate(
    ck: &CaganCheckpoint,
    x: &ImageSample,
    mask: &crate::segmenter::MaskLatent,
    target: usize,
) -> Result<ImageSample> {
    let r = GenRequest {
        base: x,
        mask_id: &mask.id,
        z: &mask.z,
        target,
    };
    Ok(generate_batch(ck, &[r])?.pop().unwrap())
}

/// Latents for GAN training: each image's own mask followed by `perturbed`
/// deformations of it.
pub fn latent_pool<'a>(
    seg: &Segmenter,
    items: &[(&'a ImageSample, &'a Mask)],
    perturbed: usize,
    magnitude: f64,
    control_points: usize,
    seed: u64,
) -> Result<CaganData<'a>> {
    let masks: Vec<&Mask> = items.iter().map(|(_, m)| *m).collect();
    let own = seg.latents_of_masks(&masks)?;
    let mut latents = Vec::with_capacity(items.len());
    for (k, ((s, _), z)) in items.iter().zip(own).enumerate() {
        let mut l = vec![z];
        if perturbed > 0 {
            let parent = seg.latent_of_mask(&s.id, items[k].1, crate::segmenter::LatentSource::GroundTruth, None)?;
            let sk = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k as u64);
            for p in perturb_mask(seg, &parent, magnitude, perturbed, control_points, sk)? {
                l.push(p.z);
            }
        }
        latents.push(l);
    }
    Ok(CaganData {
        images: items.iter().map(|(s, _)| *s).collect(),
        latents,
    })
}

/// Fraction of `samples` whose highest critic class score is one of their labels.
pub fn d_cls_accuracy(ck: &CaganCheckpoint, samples: &[&ImageSample]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let xs: Vec<&[f32]> = samples.iter().map(|s| s.pixels.as_slice()).collect();
    let logits = ck.disc.classify(&images_tensor(&xs, ck.side()));
    let mut hits = 0;
    for (i, s) in samples.iter().enumerate() {
        let row = logits.sample(i);
        let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        hits += (s.labels[best] == 1) as usize;
    }
    hits as f64 / samples.len() as f64
}
