//! Task classifier: a pluggable convolutional backbone with a logit head and a
//! per-class log-variance head.

mod auc;

pub use auc::{auc, auc_pairwise, evaluate, evaluate_samples, AucReport, SplitGuard};

use crate::cagan::PerceptualExtractor;
use crate::config::{ClassWeighting, ClassifierConfig, LabelMode};
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::util::{images_tensor, read_json, rng_for, write_json};
use cagan_tensor::nn::{Conv2d, Linear};
use cagan_tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Feature extractor behind the heads. Implementations own their parameters.
pub trait Backbone: Send + Sync {
    fn name(&self) -> &str;
    fn store(&self) -> &ParamStore<f32>;
    fn store_mut(&mut self) -> &mut ParamStore<f32>;
    fn feature_dim(&self) -> usize;
    /// Pooled features `[N, F]` of `x: [N, 1, S, S]`.
    fn features(&self, g: &mut Graph<f32>, x: Var) -> Var;
    /// Activations after block `block` (0-based).
    fn block_output(&self, g: &mut Graph<f32>, x: Var, block: usize) -> Var;
    /// Marks the first `depth` blocks as frozen.
    fn freeze_blocks(&mut self, depth: usize);
}

/// Convolution blocks of 3x3 convolution, ReLU and 2x2 max pooling, followed by
/// global average pooling.
pub struct ToyCnn {
    store: ParamStore<f32>,
    convs: Vec<Conv2d>,
    width: usize,
}

impl ToyCnn {
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let mut cin = 1;
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(&mut store, &format!("block{i}.conv"), cin, w, 3, 1, 1, true, rng);
                cin = w;
                c
            })
            .collect();
        ToyCnn {
            store,
            convs,
            width: cin,
        }
    }
}

impl Backbone for ToyCnn {
    fn name(&self) -> &str {
        "toy_cnn"
    }

    fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn feature_dim(&self) -> usize {
        self.width
    }

    fn features(&self, g: &mut Graph<f32>, x: Var) -> Var {
        let h = self.block_output(g, x, self.convs.len() - 1);
        g.global_avg_pool(h)
    }

    fn block_output(&self, g: &mut Graph<f32>, x: Var, block: usize) -> Var {
        let mut h = x;
        for conv in &self.convs[..=block.min(self.convs.len() - 1)] {
            h = conv.forward(g, &self.store, h);
            h = g.relu(h);
            h = g.max_pool2(h);
        }
        h
    }

    fn freeze_blocks(&mut self, depth: usize) {
        self.store.set_trainable(|name| {
            let b: usize = name
                .strip_prefix("block")
                .and_then(|r| r.split('.').next())
                .and_then(|n| n.parse().ok())
                .unwrap_or(usize::MAX);
            b >= depth
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub backbone: String,
    pub side: usize,
    pub num_classes: usize,
    pub widths: Vec<usize>,
    pub label_mode: LabelMode,
    pub mask_rate: f64,
    pub variance_head: bool,
}

pub struct Classifier {
    pub spec: ClassifierSpec,
    pub backbone: Box<dyn Backbone>,
    pub heads: ParamStore<f32>,
    logits: Linear,
    logvar: Option<Linear>,
    /// AL round that produced these weights, `None` before any round.
    pub round: Option<usize>,
}

/// Logits and per-class log-variances of already pooled features.
pub struct HeadOutput {
    pub logits: Vec<Vec<f64>>,
    pub logvar: Vec<Vec<f64>>,
}

impl Classifier {
    pub fn new(spec: ClassifierSpec, seed: u64) -> Result<Self> {
        if spec.backbone != "toy_cnn" {
            return Err(Error::Capability(format!(
                "backbone `{}` is not built in; construct it with Classifier::with_backbone",
                spec.backbone
            )));
        }
        if spec.side >> spec.widths.len() == 0 || spec.widths.is_empty() {
            return Err(Error::Shape(format!(
                "side {} too small for {} pooling blocks",
                spec.side,
                spec.widths.len()
            )));
        }
        let mut rng = rng_for(seed, "classifier-init", 0);
        let bb = ToyCnn::new(&spec.widths, &mut rng);
        Ok(Self::with_backbone(spec, Box::new(bb), &mut rng))
    }

    /// Wraps any backbone with freshly initialised heads.
    pub fn with_backbone(spec: ClassifierSpec, backbone: Box<dyn Backbone>, rng: &mut impl Rng) -> Self {
        let mut heads = ParamStore::new();
        let f = backbone.feature_dim();
        let logits = Linear::new(&mut heads, "head.logits", f, spec.num_classes, true, rng);
        let logvar = spec.variance_head.then(|| {
            let l = Linear::with_gain(&mut heads, "head.logvar", f, spec.num_classes, 0.1, rng);
            if let Some(b) = l.b {
                *heads.get_mut(b) = Tensor::full([spec.num_classes], -3.0);
            }
            l
        });
        Classifier {
            spec,
            backbone,
            heads,
            logits,
            logvar,
            round: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn has_variance_head(&self) -> bool {
        self.logvar.is_some()
    }

    fn check(&self, samples: &[&ImageSample]) -> Result<()> {
        for s in samples {
            if s.side != self.spec.side {
                return Err(Error::Shape(format!(
                    "sample {} has side {}, classifier expects {}",
                    s.id, s.side, self.spec.side
                )));
            }
            if s.labels.len() != self.spec.num_classes {
                return Err(Error::Shape(format!(
                    "sample {} has {} labels, classifier expects {}",
                    s.id,
                    s.labels.len(),
                    self.spec.num_classes
                )));
            }
        }
        Ok(())
    }

    fn heads_forward(&self, g: &mut Graph<f32>, f: Var) -> (Var, Option<Var>) {
        let l = self.logits.forward(g, &self.heads, f);
        let v = self.logvar.as_ref().map(|h| h.forward(g, &self.heads, f));
        (l, v)
    }

    /// Pooled backbone features, no masking.
    pub fn pooled_features(&self, samples: &[&ImageSample]) -> Result<Vec<Vec<f32>>> {
        self.check(samples)?;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(128) {
            let mut g = Graph::new();
            g.freeze(self.backbone.store());
            let xs: Vec<&[f32]> = chunk.iter().map(|s| s.pixels.as_slice()).collect();
            let x = g.input(images_tensor(&xs, self.spec.side));
            let f = self.backbone.features(&mut g, x);
            let t = g.value(f);
            out.extend((0..chunk.len()).map(|i| t.sample(i).to_vec()));
        }
        Ok(out)
    }

    /// Applies the heads to feature rows; log-variances are `-inf` without a
    /// variance head.
    pub fn head_outputs(&self, features: &Tensor<f32>) -> HeadOutput {
        let mut g = Graph::new();
        g.freeze(&self.heads);
        let f = g.input(features.clone());
        let (l, v) = self.heads_forward(&mut g, f);
        let n = features.dim(0);
        let rows = |t: &Tensor<f32>| {
            (0..n)
                .map(|i| t.sample(i).iter().map(|&x| x as f64).collect())
                .collect()
        };
        let logits: Vec<Vec<f64>> = rows(g.value(l));
        let logvar = match v {
            Some(v) => rows(g.value(v)),
            None => vec![vec![f64::NEG_INFINITY; self.spec.num_classes]; n],
        };
        HeadOutput { logits, logvar }
    }

    /// Class probabilities from logits for the configured label mode.
    pub fn probabilities(&self, logits: &[f64]) -> Vec<f64> {
        match self.spec.label_mode {
            LabelMode::Exclusive => {
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            }
            LabelMode::Multilabel => logits.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
        }
    }

    /// Deterministic class probabilities (no masking).
    pub fn predict_proba(&self, samples: &[&ImageSample]) -> Result<Vec<Vec<f64>>> {
        let feats = self.pooled_features(samples)?;
        if feats.is_empty() {
            return Ok(Vec::new());
        }
        let f = feats.iter().flatten().copied().collect();
        let t = Tensor::new([feats.len(), self.backbone.feature_dim()], f);
        let h = self.head_outputs(&t);
        Ok(h.logits.iter().map(|l| self.probabilities(l)).collect())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("backbone.bin");
        self.backbone.store().save(&p).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("heads.bin");
        self.heads.save(&p).map_err(|e| Error::io(&p, e))?;
        write_json(
            dir.join("spec.json"),
            &SavedSpec {
                spec: self.spec.clone(),
                round: self.round,
            },
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let saved: SavedSpec = read_json(dir.join("spec.json"))?;
        let mut c = Classifier::new(saved.spec, 0)?;
        let p = dir.join("backbone.bin");
        c.backbone.store_mut().load_values(&p).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("heads.bin");
        c.heads.load_values(&p).map_err(|e| Error::io(&p, e))?;
        c.round = saved.round;
        Ok(c)
    }

    pub fn try_clone(&self) -> Result<Self> {
        let mut c = Classifier::new(self.spec.clone(), 0)?;
        c.backbone.store_mut().copy_values_from(self.backbone.store());
        c.heads.copy_values_from(&self.heads);
        c.round = self.round;
        Ok(c)
    }
}

#[derive(Serialize, Deserialize)]
struct SavedSpec {
    spec: ClassifierSpec,
    round: Option<usize>,
}

/// Frozen activations of one backbone block, used as the perceptual feature map.
pub struct BlockFeatures<'a> {
    pub classifier: &'a Classifier,
    pub block: usize,
}

impl PerceptualExtractor<f32> for BlockFeatures<'_> {
    fn features(&self, g: &mut Graph<f32>, x: Var) -> Var {
        g.freeze(self.classifier.backbone.store());
        self.classifier.backbone.block_output(g, x, self.block)
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneHyper {
    pub lr: f64,
    pub beta1: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub class_weights: ClassWeighting,
    pub hetero_samples: usize,
    pub freeze_depth: usize,
    pub train_masking: bool,
}

impl FinetuneHyper {
    pub fn from_config(c: &ClassifierConfig, epochs: usize) -> Self {
        FinetuneHyper {
            lr: c.lr,
            beta1: c.beta1,
            weight_decay: c.weight_decay,
            epochs,
            batch: c.batch,
            class_weights: c.class_weights,
            hetero_samples: c.hetero_samples,
            freeze_depth: c.freeze_depth,
            train_masking: c.train_masking,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub loss_trace: Vec<f64>,
    pub no_progress: bool,
}

/// Per-class weights `n / (C * n_c)` normalised to a sample mean of one; classes
/// absent from the pool get weight zero.
pub fn inverse_class_weights(samples: &[&ImageSample], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for s in samples {
        for (c, &b) in s.labels.iter().enumerate() {
            counts[c] += b as usize;
        }
    }
    let n = samples.len() as f64;
    let raw: Vec<f64> = counts
        .iter()
        .map(|&k| {
            if k == 0 {
                0.0
            } else {
                n / (num_classes as f64 * k as f64)
            }
        })
        .collect();
    let mean: f64 = samples.iter().map(|s| sample_weight(&raw, &s.labels)).sum::<f64>() / n.max(1.0);
    if mean > 0.0 {
        raw.iter().map(|w| w / mean).collect()
    } else {
        raw
    }
}

fn sample_weight(class_w: &[f64], labels: &[u8]) -> f64 {
    let pos: Vec<f64> = labels
        .iter()
        .zip(class_w)
        .filter(|(&b, _)| b == 1)
        .map(|(_, &w)| w)
        .collect();
    if pos.is_empty() {
        1.0
    } else {
        pos.iter().sum::<f64>() / pos.len() as f64
    }
}

/// Continues training `clf` on `samples` with the heteroscedastic likelihood,
/// optionally masking pooled features as at inference.
pub fn finetune(
    clf: &mut Classifier,
    samples: &[&ImageSample],
    hyper: &FinetuneHyper,
    seed: u64,
) -> Result<FinetuneReport> {
    if samples.is_empty() {
        return Err(Error::Training("empty training pool".into()));
    }
    clf.check(samples)?;
    let c = clf.num_classes();
    let mode = clf.spec.label_mode;
    if mode == LabelMode::Exclusive {
        let first = samples[0].primary_class();
        if samples.iter().all(|s| s.primary_class() == first) {
            return Err(Error::Training("exclusive-mode pool holds a single class".into()));
        }
    }
    let report = FinetuneReport::default();
    if hyper.epochs == 0 {
        return Ok(report);
    }
    clf.backbone.freeze_blocks(hyper.freeze_depth);
    let acfg = AdamConfig {
        lr: hyper.lr,
        beta1: hyper.beta1,
        weight_decay: hyper.weight_decay,
        ..Default::default()
    };
    let mut opt_b = Adam::new(clf.backbone.store(), acfg);
    let mut opt_h = Adam::new(&clf.heads, acfg);
    let cw = match hyper.class_weights {
        ClassWeighting::None => vec![1.0; c],
        ClassWeighting::Inverse => inverse_class_weights(samples, c),
    };
    let weights: Vec<f32> = samples.iter().map(|s| sample_weight(&cw, &s.labels) as f32).collect();
    let rate = clf.spec.mask_rate;
    let k = hyper.hetero_samples.max(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut rng = rng_for(seed, "finetune-epoch", epoch as u64);
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(hyper.batch.max(1)) {
            let n = chunk.len();
            let xs: Vec<&[f32]> = chunk.iter().map(|&i| samples[i].pixels.as_slice()).collect();
            let mut g = Graph::new();
            let x = g.input(images_tensor(&xs, clf.spec.side));
            let mut f = clf.backbone.features(&mut g, x);
            if hyper.train_masking && rate > 0.0 {
                let fd = g.shape(f)[1];
                let keep = 1.0 / (1.0 - rate);
                let m = Tensor::from_fn([n, fd], |_| if rng.random::<f64>() < rate { 0.0 } else { keep as f32 });
                let mv = g.input(m);
                f = g.mul(f, mv);
            }
            let (logits, logvar) = clf.heads_forward(&mut g, f);
            let target = Tensor::from_fn([n, c], |j| samples[chunk[j / c]].labels[j % c] as f32);
            let w: Vec<f32> = chunk.iter().map(|&i| weights[i]).collect();
            let loss = match logvar {
                Some(lv) => {
                    let noise = Tensor::from_fn([k, n, c], |_| StandardNormal.sample(&mut rng));
                    g.heteroscedastic_nll(logits, lv, noise, target, Some(w), mode == LabelMode::Exclusive)
                }
                None => match mode {
                    LabelMode::Exclusive => g.softmax_cross_entropy(logits, target, Some(w)),
                    LabelMode::Multilabel => {
                        let wt = Tensor::from_fn([n, c], |j| w[j / c]);
                        g.bce_with_logits(logits, target, Some(wt))
                    }
                },
            };
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::Numeric {
                    head: "classifier".into(),
                    reason: format!("non-finite loss in epoch {epoch}"),
                });
            }
            sum += lv * n as f64;
            count += n;
            let grads = g.backward(loss);
            let gb = grads.for_store(clf.backbone.store());
            let gh = grads.for_store(&clf.heads);
            opt_b.step(clf.backbone.store_mut(), &gb);
            opt_h.step(&mut clf.heads, &gh);
        }
        trace.push(sum / count as f64);
    }
    clf.backbone.freeze_blocks(0);
    let no_progress = trace.len() >= 2 && trace.last() >= trace.first();
    if no_progress {
        log::warn!(
            "fine-tuning made no progress: loss {:.4} -> {:.4}",
            trace[0],
            trace[trace.len() - 1]
        );
    }
    Ok(FinetuneReport {
        loss_trace: trace,
        no_progress,
    })
}

/// Fresh classifier trained from scratch for `hyper.epochs`, as in the fully
/// supervised baselines.
pub fn train_classifier(
    spec: ClassifierSpec,
    samples: &[&ImageSample],
    hyper: &FinetuneHyper,
    seed: u64,
) -> Result<(Classifier, FinetuneReport)> {
    let mut clf = Classifier::new(spec, seed)?;
    let rep = finetune(&mut clf, samples, hyper, seed)?;
    Ok((clf, rep))
}
