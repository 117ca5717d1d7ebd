//! Run configuration.
//!
//! The on-disk form is a flat list of `section.key = value` lines where every value
//! is JSON (bare words are read as strings). The same syntax is accepted for
//! command-line overrides. Unknown keys are rejected.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Multilabel,
    Exclusive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    None,
    Instance,
    Batch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Cagan,
    StandardDa,
    PlainGan,
    NoBnnEntropy,
    RandomSelect,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Cagan => "cagan",
            StrategyKind::StandardDa => "standard_da",
            StrategyKind::PlainGan => "plain_gan",
            StrategyKind::NoBnnEntropy => "no_bnn_entropy",
            StrategyKind::RandomSelect => "random_select",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(Value::String(s.to_string())).ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticMode {
    Accumulate,
    Replace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    None,
    Inverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_classes: usize,
    pub num_patients: usize,
    pub images_per_patient: usize,
    pub imbalance_ratios: Vec<f64>,
    pub side: usize,
    pub label_mode: LabelMode,
    pub allow_normal: bool,
    /// Multilabel mode: probability that the most frequent class is present.
    pub multilabel_rate: f64,
    pub pixel_noise: f64,
    /// Lower end of the uniform lesion-severity draw; 1.0 makes every lesion full strength.
    pub min_severity: f64,
    pub split_fractions: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_classes: 6,
            num_patients: 600,
            images_per_patient: 5,
            imbalance_ratios: vec![10.0, 6.0, 4.0, 2.5, 1.5, 1.0],
            side: 64,
            label_mode: LabelMode::Multilabel,
            allow_normal: false,
            multilabel_rate: 0.35,
            pixel_noise: 0.03,
            min_severity: 0.3,
            split_fractions: vec![0.7, 0.1, 0.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterConfig {
    pub filters: usize,
    pub latent_dim: usize,
    pub lr: f64,
    pub beta1: f64,
    pub epochs: usize,
    pub batch: usize,
    /// At most this many training images are used (0 = all).
    pub train_images: usize,
    /// Fraction of each batch fed as mask -> mask pairs so that latents of masks are informative.
    pub mask_pair_fraction: f64,
    pub control_points: usize,
    pub perturb_magnitude: f64,
    pub max_masks: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            filters: 64,
            latent_dim: 256,
            lr: 1e-3,
            beta1: 0.9,
            epochs: 20,
            batch: 16,
            train_images: 500,
            mask_pair_fraction: 0.25,
            control_points: 12,
            perturb_magnitude: 0.1,
            max_masks: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaganConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Critic updates; the generator is updated on every `n_critic`-th one.
    pub iters: usize,
    pub batch: usize,
    pub n_critic: usize,
    pub g_base: usize,
    pub d_base: usize,
    pub res_blocks: usize,
    pub g_norm: NormKind,
    pub d_norm: NormKind,
    pub lambda_cls: f64,
    pub lambda_content: f64,
    pub lambda_gp: f64,
    pub w_perc: f64,
    pub w_mse: f64,
    pub w_nmi: f64,
    pub nmi_eps: f64,
    /// Histogram bins of the reported NMI.
    pub nmi_bins: usize,
    /// Bins and Parzen width (in bins) of the differentiable NMI used while training.
    pub soft_nmi_bins: usize,
    pub soft_nmi_sigma: f64,
    /// Step of the finite-difference Hessian-vector product in the penalty gradient.
    pub gp_fd_step: f64,
    pub checkpoint_every: usize,
    /// Which split trains the GAN: `train` or `initial_pool`.
    pub train_pool: String,
    /// Index of the classifier block whose activations feed the perceptual term.
    pub perceptual_block: usize,
}

impl Default for CaganConfig {
    fn default() -> Self {
        CaganConfig {
            lr: 1e-3,
            beta1: 0.93,
            beta2: 0.999,
            iters: 100_000,
            batch: 16,
            n_critic: 5,
            g_base: 64,
            d_base: 64,
            res_blocks: 3,
            g_norm: NormKind::Batch,
            d_norm: NormKind::Instance,
            lambda_cls: 1.0,
            lambda_content: 10.0,
            lambda_gp: 10.0,
            w_perc: 1.0,
            w_mse: 1.0,
            w_nmi: 1.0,
            nmi_eps: 1e-4,
            nmi_bins: 64,
            soft_nmi_bins: 32,
            soft_nmi_sigma: 0.6,
            gp_fd_step: 1e-2,
            checkpoint_every: 1000,
            train_pool: "train".into(),
            perceptual_block: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UncertaintyConfig {
    pub mc_samples: usize,
    pub mask_rate: f64,
    pub reduction: Reduction,
    pub epistemic_only: bool,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            mc_samples: 20,
            mask_rate: 0.2,
            reduction: Reduction::Mean,
            epistemic_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub backbone: String,
    pub widths: Vec<usize>,
    pub lr: f64,
    pub beta1: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub batch: usize,
    pub class_weights: ClassWeighting,
    /// Noise draws of the heteroscedastic likelihood.
    pub hetero_samples: usize,
    /// Number of leading convolution blocks kept frozen while fine-tuning.
    pub freeze_depth: usize,
    /// Apply the stochastic feature mask during training as well as at inference.
    pub train_masking: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            backbone: "toy_cnn".into(),
            widths: vec![32, 64, 128, 128],
            lr: 1e-3,
            beta1: 0.93,
            weight_decay: 0.0,
            epochs: 15,
            finetune_epochs: 3,
            batch: 32,
            class_weights: ClassWeighting::Inverse,
            hetero_samples: 10,
            freeze_depth: 0,
            train_masking: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub strategy: StrategyKind,
    pub initial_pool_fraction: f64,
    pub top_k_real: usize,
    pub gen_per_class: usize,
    pub keep_per_class: usize,
    pub stop_window: usize,
    /// Absolute AUC change regarded as "no change" by the stopping rule.
    pub stop_epsilon: f64,
    /// Optional minimum validation gain for a round to count as an improvement.
    pub gain_threshold: Option<f64>,
    pub max_rounds: usize,
    /// Stop once this fraction of the training split is labelled (1.0 = no cap).
    pub label_budget: f64,
    pub synthetic_mode: SyntheticMode,
    pub synthetic_cap: usize,
    /// Copies per picked sample for the standard-augmentation strategy (0 = match the CAGAN count).
    pub da_per_sample: usize,
    /// Budgets (fractions of the training split) at which the test split is evaluated.
    pub report_budgets: Vec<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            strategy: StrategyKind::Cagan,
            initial_pool_fraction: 0.03,
            top_k_real: 32,
            gen_per_class: 250,
            keep_per_class: 150,
            stop_window: 3,
            stop_epsilon: 0.001,
            gain_threshold: None,
            max_rounds: 50,
            label_budget: 1.0,
            synthetic_mode: SyntheticMode::Accumulate,
            synthetic_cap: 5000,
            da_per_sample: 0,
            report_budgets: vec![0.05, 0.10, 0.15, 0.25, 0.30, 0.35, 0.50, 0.75],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub budgets: Vec<f64>,
    pub methods: Vec<String>,
    pub growth_initial_per_class: usize,
    pub growth_step_per_class: usize,
    pub growth_steps: usize,
    /// Synthetic candidates generated per class per growth step before selection.
    pub growth_candidates_per_class: usize,
    /// Synthetic images generated per real image for the Real/Syn/Mix matrix.
    pub mix_syn_per_real: usize,
    /// Training epochs of every from-scratch classifier in the experiments.
    pub epochs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0, 1, 2, 3, 4],
            budgets: vec![0.05, 0.10, 0.15, 0.25, 0.30, 0.35, 0.50, 0.75],
            methods: vec!["cagan".into(), "fsl_random".into()],
            growth_initial_per_class: 10,
            growth_step_per_class: 5,
            growth_steps: 10,
            growth_candidates_per_class: 20,
            mix_syn_per_real: 1,
            epochs: 15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_root: String,
    pub data: DataConfig,
    pub segmenter: SegmenterConfig,
    pub cagan: CaganConfig,
    pub uncertainty: UncertaintyConfig,
    pub classifier: ClassifierConfig,
    pub schedule: ScheduleConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_root: std::env::var("CAGAN_AL_HOME").unwrap_or_else(|_| "cagan-al-out".into()),
            data: DataConfig::default(),
            segmenter: SegmenterConfig::default(),
            cagan: CaganConfig::default(),
            uncertainty: UncertaintyConfig::default(),
            classifier: ClassifierConfig::default(),
            schedule: ScheduleConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

/// One-line descriptions shown by `--help`.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("seed", "master seed; every random stream is derived from it"),
    ("output_root", "root directory for data, checkpoints, runs and reports"),
    ("data.num_classes", "number of finding classes C"),
    ("data.num_patients", "patients in the toy corpus"),
    ("data.images_per_patient", "images per patient"),
    ("data.imbalance_ratios", "relative class frequencies"),
    ("data.side", "image side S in pixels"),
    ("data.label_mode", "multilabel | exclusive"),
    ("data.allow_normal", "allow all-zero (no finding) label vectors"),
    ("data.split_fractions", "train/val/test fractions at patient level"),
    ("segmenter.filters", "filters per segmenter convolution"),
    ("segmenter.latent_dim", "width Z of the bottleneck latent"),
    ("segmenter.control_points", "spline control points per contour"),
    (
        "segmenter.perturb_magnitude",
        "radial displacement relative to local radius",
    ),
    ("segmenter.max_masks", "cap on perturbed masks per call"),
    ("cagan.lr", "Adam learning rate"),
    ("cagan.beta1", "Adam beta1"),
    ("cagan.iters", "critic updates (generator every n_critic)"),
    ("cagan.n_critic", "critic updates per generator update"),
    ("cagan.lambda_cls", "class-loss weight"),
    ("cagan.lambda_content", "content-loss weight"),
    ("cagan.lambda_gp", "gradient-penalty weight"),
    ("cagan.w_perc", "perceptual sub-weight of the content loss"),
    ("cagan.w_mse", "MSE sub-weight of the content loss"),
    ("cagan.w_nmi", "inverse-NMI sub-weight of the content loss"),
    ("cagan.nmi_eps", "additive guard in 1/(NMI + eps)"),
    ("cagan.nmi_bins", "histogram bins of NMI"),
    ("cagan.d_norm", "critic normalisation: none | instance | batch"),
    ("uncertainty.mc_samples", "stochastic forward passes T"),
    ("uncertainty.mask_rate", "feature masking probability"),
    ("uncertainty.reduction", "per-class variance reduction: mean | max"),
    ("uncertainty.epistemic_only", "ignore the variance head"),
    ("classifier.class_weights", "none | inverse class frequency"),
    ("classifier.freeze_depth", "frozen leading blocks while fine-tuning"),
    (
        "schedule.strategy",
        "cagan | standard_da | plain_gan | no_bnn_entropy | random_select",
    ),
    (
        "schedule.initial_pool_fraction",
        "initially labelled fraction of the training split",
    ),
    ("schedule.top_k_real", "real samples labelled per round"),
    ("schedule.gen_per_class", "synthetic candidates per class per round"),
    ("schedule.keep_per_class", "synthetic samples kept per class per round"),
    ("schedule.stop_window", "consecutive flat rounds before stopping"),
    ("schedule.stop_epsilon", "AUC change regarded as flat (absolute)"),
    ("schedule.gain_threshold", "optional minimum validation gain per round"),
    ("schedule.label_budget", "stop at this labelled fraction"),
    ("schedule.synthetic_mode", "accumulate | replace"),
    ("experiment.seeds", "seeds per condition"),
    ("experiment.budgets", "label budgets of the sweep"),
    (
        "experiment.methods",
        "AL strategies and fsl_random compared by the sweep",
    ),
    (
        "experiment.growth_initial_per_class",
        "real images per class before synthetic growth",
    ),
    (
        "experiment.growth_step_per_class",
        "synthetic images added per class per growth step",
    ),
    ("experiment.growth_steps", "growth steps"),
    (
        "experiment.growth_candidates_per_class",
        "candidates per class per growth step",
    ),
    (
        "experiment.mix_syn_per_real",
        "synthetic images per real image in the Real/Syn/Mix matrix",
    ),
    (
        "experiment.epochs",
        "epochs of every from-scratch classifier in the experiments",
    ),
];

impl RunConfig {
    /// Defaults with `overrides` (`section.key=value`) applied.
    pub fn from_overrides<S: AsRef<str>>(overrides: &[S]) -> Result<Self> {
        let mut tree = serde_json::to_value(RunConfig::default())?;
        for o in overrides {
            let (k, v) = split_assignment(o.as_ref())?;
            set_key(&mut tree, &k, &v)?;
        }
        Self::from_tree(tree)
    }

    /// Reads a flat `key = value` file or a JSON object, then applies `overrides`.
    pub fn load<S: AsRef<str>>(path: impl AsRef<Path>, overrides: &[S]) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        let mut tree = serde_json::to_value(RunConfig::default())?;
        if text.trim_start().starts_with('{') {
            let given: Value = serde_json::from_str(&text).map_err(|e| Error::config("config", e.to_string()))?;
            let mut flat = Vec::new();
            flatten_into("", &given, &mut flat);
            for (k, v) in flat {
                let v: Value = serde_json::from_str(&v)?;
                set_key(&mut tree, &k, &v)?;
            }
        } else {
            for line in text.lines() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = split_assignment(line)?;
                set_key(&mut tree, &k, &v)?;
            }
        }
        for o in overrides {
            let (k, v) = split_assignment(o.as_ref())?;
            set_key(&mut tree, &k, &v)?;
        }
        Self::from_tree(tree)
    }

    fn from_tree(tree: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `(key, json value)` pairs in file order.
    pub fn flatten(&self) -> Vec<(String, String)> {
        let tree = serde_json::to_value(self).expect("config serialises");
        let mut out = Vec::new();
        flatten_into("", &tree, &mut out);
        out
    }

    pub fn to_flat_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.flatten() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_flat_string()).map_err(|e| Error::io(path.as_ref(), e))
    }

    /// Hex SHA-256 of the flat form, embedded in every report.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_flat_string().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.num_classes < 2 && !(d.num_classes == 1 && d.allow_normal) {
            return Err(Error::config(
                "data.num_classes",
                "need at least 2 classes (or 1 with data.allow_normal)",
            ));
        }
        if d.imbalance_ratios.len() != d.num_classes {
            return Err(Error::config(
                "data.imbalance_ratios",
                "length must equal data.num_classes",
            ));
        }
        if d.imbalance_ratios.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::config(
                "data.imbalance_ratios",
                "ratios must be strictly positive",
            ));
        }
        if d.side < 32 || d.side % 16 != 0 {
            return Err(Error::config("data.side", "side must be >= 32 and a multiple of 16"));
        }
        if d.num_patients < 3 || d.images_per_patient == 0 {
            return Err(Error::config(
                "data.num_patients",
                "need at least 3 patients with one image each",
            ));
        }
        check_fractions(&d.split_fractions)?;
        if !(0.0..=1.0).contains(&d.min_severity) {
            return Err(Error::config("data.min_severity", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&d.multilabel_rate) {
            return Err(Error::config("data.multilabel_rate", "must lie in [0, 1]"));
        }
        let s = &self.segmenter;
        if s.filters == 0 || s.latent_dim == 0 {
            return Err(Error::config(
                "segmenter.filters",
                "filters and latent_dim must be positive",
            ));
        }
        if s.control_points < 4 {
            return Err(Error::config(
                "segmenter.control_points",
                "need at least 4 control points",
            ));
        }
        if !(0.0..=1.0).contains(&s.perturb_magnitude) {
            return Err(Error::config("segmenter.perturb_magnitude", "must lie in [0, 1]"));
        }
        let c = &self.cagan;
        for (name, v) in [
            ("cagan.lambda_cls", c.lambda_cls),
            ("cagan.lambda_content", c.lambda_content),
            ("cagan.lambda_gp", c.lambda_gp),
            ("cagan.w_perc", c.w_perc),
            ("cagan.w_mse", c.w_mse),
            ("cagan.w_nmi", c.w_nmi),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "loss weights must be nonnegative"));
            }
        }
        if !(c.nmi_eps > 0.0) {
            return Err(Error::config("cagan.nmi_eps", "must be positive"));
        }
        if c.n_critic == 0 || c.batch == 0 {
            return Err(Error::config("cagan.n_critic", "n_critic and batch must be positive"));
        }
        if c.train_pool != "train" && c.train_pool != "initial_pool" {
            return Err(Error::config("cagan.train_pool", "must be `train` or `initial_pool`"));
        }
        if self.uncertainty.mc_samples < 2 {
            return Err(Error::config("uncertainty.mc_samples", "need T >= 2"));
        }
        if !(0.0..1.0).contains(&self.uncertainty.mask_rate) {
            return Err(Error::config("uncertainty.mask_rate", "must lie in [0, 1)"));
        }
        if self.classifier.backbone != "toy_cnn" {
            return Err(Error::config("classifier.backbone", "only `toy_cnn` is built in"));
        }
        if self.classifier.widths.is_empty() {
            return Err(Error::config("classifier.widths", "need at least one block"));
        }
        let sc = &self.schedule;
        if sc.keep_per_class > sc.gen_per_class {
            return Err(Error::config(
                "schedule.keep_per_class",
                "must not exceed gen_per_class",
            ));
        }
        if !(sc.initial_pool_fraction > 0.0 && sc.initial_pool_fraction <= 1.0) {
            return Err(Error::config("schedule.initial_pool_fraction", "must lie in (0, 1]"));
        }
        if !(sc.label_budget > 0.0 && sc.label_budget <= 1.0) {
            return Err(Error::config("schedule.label_budget", "must lie in (0, 1]"));
        }
        if sc.stop_window == 0 {
            return Err(Error::config("schedule.stop_window", "must be >= 1"));
        }
        if sc.top_k_real == 0 {
            return Err(Error::config("schedule.top_k_real", "must be >= 1"));
        }
        if self.experiment.seeds.is_empty() {
            return Err(Error::config("experiment.seeds", "need at least one seed"));
        }
        if self.experiment.budgets.iter().any(|&b| !(b > 0.0 && b <= 1.0)) {
            return Err(Error::config("experiment.budgets", "budgets must lie in (0, 1]"));
        }
        if self.experiment.growth_step_per_class == 0 {
            return Err(Error::config("experiment.growth_step_per_class", "must be >= 1"));
        }
        Ok(())
    }
}

fn check_fractions(f: &[f64]) -> Result<()> {
    if f.len() != 3 || f.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            "data.split_fractions",
            "need three fractions in [0, 1] summing to 1",
        ));
    }
    Ok(())
}

fn split_assignment(s: &str) -> Result<(String, Value)> {
    let Some((k, v)) = s.split_once('=') else {
        return Err(Error::config(s, "expected `section.key=value`"));
    };
    let (k, v) = (k.trim(), v.trim());
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

fn set_key(tree: &mut Value, key: &str, value: &Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(|| Error::config(key, "unknown key"))?;
        let Some(child) = map.get_mut(*p) else {
            return Err(Error::config(key, "unknown key"));
        };
        if i + 1 == parts.len() {
            if child.is_object() {
                return Err(Error::config(key, "is a section, not a key"));
            }
            *child = value.clone();
            return Ok(());
        }
        node = child;
    }
    Err(Error::config(key, "empty key"))
}

fn flatten_into(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            let map: &Map<String, Value> = map;
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_form_round_trips() {
        let cfg = RunConfig::from_overrides(&["cagan.lambda_gp=5", "data.label_mode=exclusive"]).unwrap();
        assert_eq!(cfg.cagan.lambda_gp, 5.0);
        assert_eq!(cfg.data.label_mode, LabelMode::Exclusive);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("config.txt");
        cfg.save(&p).unwrap();
        let none: [&str; 0] = [];
        assert_eq!(RunConfig::load(&p, &none).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_rejected_with_its_name() {
        let err = RunConfig::from_overrides(&["cagan.lambda_foo=1"]).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "cagan.lambda_foo"));
    }

    #[test]
    fn single_class_without_normals_is_a_config_error() {
        let err = RunConfig::from_overrides(&["data.num_classes=1", "data.imbalance_ratios=[1]"]).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "data.num_classes"));
    }

    #[test]
    fn json_form_loads() {
        let cfg = RunConfig::from_overrides(&["schedule.top_k_real=7"]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("config.json");
        std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        assert_eq!(RunConfig::load(&p, &["seed=3"]).unwrap(), RunConfig { seed: 3, ..cfg });
    }

    #[test]
    fn every_documented_key_exists() {
        let keys: Vec<String> = RunConfig::default().flatten().into_iter().map(|(k, _)| k).collect();
        for (k, _) in KEY_DOCS {
            assert!(keys.iter().any(|x| x == k), "{k}");
        }
    }
}
