//! U-Net lung segmenter whose bottleneck activation is the shape latent `z`.

pub mod perturb;

use crate::config::SegmenterConfig;
use crate::data::{ImageSample, Mask};
use crate::error::{Error, Result};
use crate::util::{images_tensor, rng_for, write_json};
use cagan_tensor::nn::{Conv2d, Linear};
use cagan_tensor::{Adam, AdamConfig, Graph, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    GroundTruth,
    Predicted,
    Perturbed,
}

/// Binary mask together with its latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLatent {
    pub id: String,
    pub mask: Mask,
    pub z: Vec<f32>,
    pub source: LatentSource,
    pub parent_mask_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmenterSpec {
    pub side: usize,
    pub filters: usize,
    pub latent_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub kernel: usize,
}

impl SegmenterSpec {
    pub fn new(side: usize, filters: usize, latent_dim: usize) -> Self {
        SegmenterSpec {
            side,
            filters,
            latent_dim,
            encoder_layers: 4,
            decoder_layers: 4,
            kernel: 3,
        }
    }

    fn bottleneck_side(&self) -> usize {
        self.side >> self.encoder_layers
    }
}

pub struct Segmenter {
    pub spec: SegmenterSpec,
    pub store: ParamStore<f32>,
    pub trained: bool,
    enc: Vec<Conv2d>,
    down: Linear,
    up: Linear,
    dec: Vec<Conv2d>,
    head: Conv2d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmenterMetrics {
    pub epochs: usize,
    pub loss_trace: Vec<f64>,
    pub val_dice: f64,
    pub initial_val_dice: f64,
}

impl Segmenter {
    pub fn new(spec: SegmenterSpec, seed: u64) -> Result<Self> {
        if spec.side % (1 << spec.encoder_layers) != 0 || spec.bottleneck_side() == 0 {
            return Err(Error::Shape(format!(
                "side {} not divisible by {}",
                spec.side,
                1 << spec.encoder_layers
            )));
        }
        let mut rng = rng_for(seed, "segmenter-init", 0);
        let mut store = ParamStore::new();
        let f = spec.filters;
        let k = spec.kernel;
        let enc = (0..spec.encoder_layers)
            .map(|i| {
                Conv2d::new(
                    &mut store,
                    &format!("enc{i}"),
                    if i == 0 { 1 } else { f },
                    f,
                    k,
                    1,
                    k / 2,
                    true,
                    &mut rng,
                )
            })
            .collect();
        let flat = f * spec.bottleneck_side().pow(2);
        let down = Linear::new(&mut store, "bottleneck_down", flat, spec.latent_dim, true, &mut rng);
        let up = Linear::new(&mut store, "bottleneck_up", spec.latent_dim, flat, true, &mut rng);
        let dec = (0..spec.decoder_layers)
            .map(|i| Conv2d::new(&mut store, &format!("dec{i}"), 2 * f, f, k, 1, k / 2, true, &mut rng))
            .collect();
        let head = Conv2d::new(&mut store, "head", f, 1, 1, 1, 0, true, &mut rng);
        Ok(Segmenter {
            spec,
            store,
            trained: false,
            enc,
            down,
            up,
            dec,
            head,
        })
    }

    /// Returns `(z, logits)` for `x: [N, 1, S, S]`.
    pub fn forward(&self, g: &mut Graph<f32>, x: Var) -> (Var, Var) {
        let n = g.shape(x)[0];
        let mut skips = Vec::new();
        let mut h = x;
        for conv in &self.enc {
            h = conv.forward(g, &self.store, h);
            h = g.relu(h);
            skips.push(h);
            h = g.max_pool2(h);
        }
        let bs = self.spec.bottleneck_side();
        let flat = g.reshape(h, &[n, self.spec.filters * bs * bs]);
        let z = self.down.forward(g, &self.store, flat);
        let z = g.tanh(z);
        let b = self.up.forward(g, &self.store, z);
        let b = g.relu(b);
        let mut h = g.reshape(b, &[n, self.spec.filters, bs, bs]);
        for (conv, skip) in self.dec.iter().zip(skips.iter().rev()) {
            let u = g.upsample2(h);
            let c = g.concat(&[u, *skip]);
            h = conv.forward(g, &self.store, c);
            h = g.relu(h);
        }
        let logits = self.head.forward(g, &self.store, h);
        (z, logits)
    }

    fn check_side(&self, side: usize) -> Result<()> {
        if side != self.spec.side {
            return Err(Error::Shape(format!(
                "input side {side} but segmenter expects {}",
                self.spec.side
            )));
        }
        Ok(())
    }

    /// Latents and probability maps for a batch of `[N, S*S]` inputs.
    fn infer(&self, inputs: &[&[f32]]) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
        let mut zs = Vec::with_capacity(inputs.len());
        let mut probs = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(64) {
            let mut g = Graph::new();
            g.freeze(&self.store);
            let x = g.input(images_tensor(chunk, self.spec.side));
            let (z, logits) = self.forward(&mut g, x);
            let p = g.sigmoid(logits);
            for k in 0..chunk.len() {
                zs.push(g.value(z).sample(k).to_vec());
                probs.push(g.value(p).sample(k).to_vec());
            }
        }
        (zs, probs)
    }

    /// Predicted probability map of an image.
    pub fn predict(&self, pixels: &[f32]) -> Vec<f32> {
        self.infer(&[pixels]).1.pop().unwrap()
    }

    /// Latent of an image; the returned mask is the thresholded prediction.
    pub fn latent_of_image(&self, sample: &ImageSample) -> Result<MaskLatent> {
        self.check_side(sample.side)?;
        let (mut z, mut p) = self.infer(&[&sample.pixels]);
        let prob = p.pop().unwrap();
        let mask = Mask::new(self.spec.side, prob.iter().map(|&v| (v >= 0.5) as u8).collect());
        Ok(MaskLatent {
            id: format!("{}_pred", sample.id),
            mask,
            z: z.pop().unwrap(),
            source: LatentSource::Predicted,
            parent_mask_id: None,
        })
    }

    /// Latents of masks fed directly to the network; masks are returned unchanged.
    pub fn latents_of_masks(&self, masks: &[&Mask]) -> Result<Vec<Vec<f32>>> {
        for m in masks {
            self.check_side(m.side)?;
        }
        let f: Vec<Vec<f32>> = masks.iter().map(|m| m.to_f32()).collect();
        let refs: Vec<&[f32]> = f.iter().map(|v| v.as_slice()).collect();
        Ok(self.infer(&refs).0)
    }

    pub fn latent_of_mask(
        &self,
        id: &str,
        mask: &Mask,
        source: LatentSource,
        parent: Option<String>,
    ) -> Result<MaskLatent> {
        let z = self.latents_of_masks(&[mask])?.pop().unwrap();
        Ok(MaskLatent {
            id: id.to_string(),
            mask: mask.clone(),
            z,
            source,
            parent_mask_id: parent,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>, metrics: &SegmenterMetrics) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store
            .save(dir.join("weights.bin"))
            .map_err(|e| Error::io(dir.join("weights.bin"), e))?;
        write_json(dir.join("spec.json"), &self.spec)?;
        write_json(dir.join("metrics.json"), metrics)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let spec: SegmenterSpec = crate::util::read_json(dir.join("spec.json"))?;
        let mut seg = Segmenter::new(spec, 0)?;
        seg.store
            .load_values(dir.join("weights.bin"))
            .map_err(|e| Error::io(dir.join("weights.bin"), e))?;
        seg.trained = true;
        Ok(seg)
    }
}

/// Extracts the latent of an image (mask predicted) or of a mask (mask kept).
pub enum LatentInput<'a> {
    Image(&'a ImageSample),
    Mask { id: &'a str, mask: &'a Mask },
}

pub fn extract_latent(seg: &Segmenter, input: LatentInput<'_>) -> Result<MaskLatent> {
    match input {
        LatentInput::Image(s) => seg.latent_of_image(s),
        LatentInput::Mask { id, mask } => seg.latent_of_mask(id, mask, LatentSource::GroundTruth, None),
    }
}

/// Deformed copies of `parent` with their latents recomputed.
pub fn perturb_mask(
    seg: &Segmenter,
    parent: &MaskLatent,
    magnitude: f64,
    count: usize,
    control_points: usize,
    seed: u64,
) -> Result<Vec<MaskLatent>> {
    let count = if count > 200 {
        log::warn!("perturbation count {count} clamped to 200");
        200
    } else {
        count
    };
    let masks = perturb::perturb_masks(&parent.mask, magnitude, count, control_points, seed)?;
    let refs: Vec<&Mask> = masks.iter().collect();
    let zs = seg.latents_of_masks(&refs)?;
    Ok(masks
        .into_iter()
        .zip(zs)
        .enumerate()
        .map(|(i, (mask, z))| MaskLatent {
            id: format!("{}_p{i}", parent.id),
            mask,
            z,
            source: LatentSource::Perturbed,
            parent_mask_id: Some(parent.id.clone()),
        })
        .collect())
}

/// Mean Dice of thresholded predictions against ground truth.
pub fn mean_dice(seg: &Segmenter, items: &[(&ImageSample, &Mask)]) -> f64 {
    if items.is_empty() {
        return f64::NAN;
    }
    let inputs: Vec<&[f32]> = items.iter().map(|(s, _)| s.pixels.as_slice()).collect();
    let (_, probs) = seg.infer(&inputs);
    let mut total = 0.0;
    for (p, (_, m)) in probs.iter().zip(items) {
        let pred = Mask::new(m.side, p.iter().map(|&v| (v >= 0.5) as u8).collect());
        total += pred.dice(m);
    }
    total / items.len() as f64
}

/// Trains the segmenter with per-pixel binary cross-entropy. A fraction of each
/// batch maps ground-truth masks onto themselves so that mask latents are
/// meaningful for conditioning.
pub fn train_segmenter(
    train: &[(&ImageSample, &Mask)],
    val: &[(&ImageSample, &Mask)],
    cfg: &SegmenterConfig,
    seed: u64,
) -> Result<(Segmenter, SegmenterMetrics)> {
    let Some((first, _)) = train.first() else {
        return Err(Error::Data {
            reason: "no training samples with masks".into(),
            ids: vec![],
        });
    };
    let side = first.side;
    let mut seg = Segmenter::new(SegmenterSpec::new(side, cfg.filters, cfg.latent_dim), seed)?;
    let initial_val_dice = mean_dice(&seg, val);
    let mut opt = Adam::new(
        &seg.store,
        AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            ..Default::default()
        },
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::new();
    let masks_f: Vec<Vec<f32>> = train.iter().map(|(_, m)| m.to_f32()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(seed, "segmenter-epoch", epoch as u64);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut xs: Vec<&[f32]> = Vec::with_capacity(chunk.len());
            let mut ys: Vec<&[f32]> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                ys.push(&masks_f[i]);
                if rng.random_bool(cfg.mask_pair_fraction.clamp(0.0, 1.0)) {
                    xs.push(&masks_f[i]);
                } else {
                    xs.push(&train[i].0.pixels);
                }
            }
            let mut g = Graph::new();
            let x = g.input(images_tensor(&xs, side));
            let (_, logits) = seg.forward(&mut g, x);
            let target = images_tensor(&ys, side);
            let loss = g.bce_with_logits(logits, target, None);
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::Numeric {
                    head: "segmenter".into(),
                    reason: format!("non-finite loss at epoch {epoch}"),
                });
            }
            sum += lv;
            batches += 1;
            let grads = g.backward(loss).for_store(&seg.store);
            opt.step(&mut seg.store, &grads);
        }
        trace.push(sum / batches.max(1) as f64);
    }
    seg.trained = true;
    let val_dice = mean_dice(&seg, val);
    log::info!("segmenter: val dice {val_dice:.4} (untrained {initial_val_dice:.4})");
    Ok((
        seg,
        SegmenterMetrics {
            epochs: cfg.epochs,
            loss_trace: trace,
            val_dice,
            initial_val_dice,
        },
    ))
}

/// Collects `(sample, mask)` pairs, failing with the ids of samples lacking a mask.
pub fn with_masks<'a>(
    corpus: &'a crate::data::Corpus,
    samples: &[&'a ImageSample],
) -> Result<Vec<(&'a ImageSample, &'a Mask)>> {
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        match corpus.mask_of(s) {
            Some(m) => out.push((*s, m)),
            None => missing.push(s.id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data {
            reason: "samples without ground-truth mask".into(),
            ids: missing,
        });
    }
    Ok(out)
}
