//! Desk-scale experiments: label-budget sweeps, the real/synthetic/mixed
//! train-test matrix and the synthetic growth curve.

use crate::al::{gan_candidates, run_al, AlResources, AlSettings};
use crate::cagan::CaganCheckpoint;
use crate::classifier::{evaluate_samples, finetune, AucReport, Classifier, FinetuneHyper};
use crate::config::StrategyKind;
use crate::data::{Corpus, ImageSample, Provenance, Split};
use crate::error::{Error, Result};
use crate::segmenter::Segmenter;
use crate::uncertainty::estimate;
use crate::util::{id_stream, median, quantile, rng_for, write_json};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

/// Shared inputs of every experiment.
pub struct ExperimentContext<'a> {
    pub corpus: &'a Corpus,
    pub segmenter: Option<&'a Segmenter>,
    pub cagan: Option<&'a CaganCheckpoint>,
    pub settings: AlSettings,
    /// Epochs of every classifier trained from scratch.
    pub epochs: usize,
    pub config_hash: String,
    tested: RefCell<HashSet<String>>,
}

impl<'a> ExperimentContext<'a> {
    pub fn new(
        corpus: &'a Corpus,
        segmenter: Option<&'a Segmenter>,
        cagan: Option<&'a CaganCheckpoint>,
        settings: AlSettings,
        epochs: usize,
        config_hash: String,
    ) -> Self {
        ExperimentContext {
            corpus,
            segmenter,
            cagan,
            settings,
            epochs,
            config_hash,
            tested: RefCell::new(HashSet::new()),
        }
    }

    fn resources(&self) -> AlResources<'a> {
        AlResources {
            corpus: self.corpus,
            segmenter: self.segmenter,
            cagan: self.cagan,
        }
    }

    fn class_names(&self) -> &[String] {
        &self.corpus.manifest.class_names
    }

    /// Evaluates a trained model on a test set; each `(model, set)` pair may be read once.
    fn test_once(&self, model: &str, set: &str, clf: &Classifier, samples: &[&ImageSample]) -> Result<AucReport> {
        let key = format!("{model}@{set}");
        if !self.tested.borrow_mut().insert(key.clone()) {
            return Err(Error::Guard(format!("{key} read the test split twice")));
        }
        evaluate_samples(clf, samples, set, self.class_names())
    }

    /// Number of distinct `(model, test set)` evaluations so far.
    pub fn test_reads(&self) -> usize {
        self.tested.borrow().len()
    }

    /// Classifier trained from scratch on `samples` for `self.epochs`.
    pub fn train_fresh(&self, samples: &[&ImageSample], seed: u64) -> Result<Classifier> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Training("empty training set".into()))?;
        let spec = self
            .settings
            .classifier_spec(first.side, self.corpus.manifest.num_classes());
        let mut clf = Classifier::new(spec, seed)?;
        let hyper = FinetuneHyper::from_config(&self.settings.classifier, self.epochs);
        finetune(&mut clf, samples, &hyper, seed)?;
        Ok(clf)
    }

    /// Random subset of the training split of size `floor(fraction * n)`, kept in
    /// corpus order so that the full fraction is the plain training split.
    pub fn random_budget(&self, fraction: f64, seed: u64) -> Vec<&'a ImageSample> {
        let train = self.corpus.split_samples(Split::Train);
        let n = ((fraction * train.len() as f64) + 1e-9).floor() as usize;
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut rng_for(seed, "fsl-random", 0));
        idx.truncate(n);
        idx.sort_unstable();
        idx.into_iter().map(|i| train[i]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    LabelBudgetSweep,
    RealSynMixMatrix,
    SyntheticGrowthCurve,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::LabelBudgetSweep => "sweep",
            ExperimentKind::RealSynMixMatrix => "mix-matrix",
            ExperimentKind::SyntheticGrowthCurve => "growth-curve",
        }
    }
}

/// One trained-and-tested condition, or the reason it was skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: String,
    pub x: f64,
    pub seed: u64,
    /// Real labels used for training.
    pub labels: usize,
    pub report: Option<AucReport>,
    pub skipped: Option<String>,
}

impl ConditionResult {
    pub fn macro_auc(&self) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.macro_auc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub x: f64,
    pub seeds: usize,
    pub median: Option<f64>,
    pub q25: Option<f64>,
    pub q75: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub axis: Vec<f64>,
    pub seeds: Vec<u64>,
    pub results: Vec<ConditionResult>,
    pub summary: Vec<ConditionSummary>,
    pub extras: serde_json::Value,
    pub config_hash: String,
    pub code_version: String,
}

impl ExperimentReport {
    fn assemble(
        kind: ExperimentKind,
        ctx: &ExperimentContext<'_>,
        seeds: &[u64],
        results: Vec<ConditionResult>,
        extras: serde_json::Value,
    ) -> Self {
        let mut axis: Vec<f64> = results.iter().map(|r| r.x).collect();
        axis.sort_by(|a, b| a.total_cmp(b));
        axis.dedup();
        let mut groups: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
        let mut order: Vec<(String, u64)> = Vec::new();
        for r in &results {
            let key = (r.condition.clone(), r.x.to_bits());
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            let g = groups.entry(key).or_default();
            if let Some(v) = r.macro_auc() {
                g.push(v);
            }
        }
        let summary = order
            .into_iter()
            .map(|k| {
                let v = &groups[&k];
                let some = |f: f64| (!v.is_empty()).then_some(f);
                ConditionSummary {
                    condition: k.0,
                    x: f64::from_bits(k.1),
                    seeds: v.len(),
                    median: some(median(v)),
                    q25: some(quantile(v, 0.25)),
                    q75: some(quantile(v, 0.75)),
                }
            })
            .collect();
        ExperimentReport {
            kind,
            axis,
            seeds: seeds.to_vec(),
            results,
            summary,
            extras,
            config_hash: ctx.config_hash.clone(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn median_of(&self, condition: &str, x: f64) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.condition == condition && (s.x - x).abs() < 1e-12)
            .and_then(|s| s.median)
    }

    /// Per-seed macro AUCs of one condition, in seed order.
    pub fn values_of(&self, condition: &str, x: f64) -> Vec<(u64, f64)> {
        self.results
            .iter()
            .filter(|r| r.condition == condition && (r.x - x).abs() < 1e-12)
            .filter_map(|r| r.macro_auc().map(|v| (r.seed, v)))
            .collect()
    }

    /// Condition-by-axis table of median macro AUCs; skipped cells carry their reason.
    pub fn table_csv(&self) -> String {
        let mut conds: Vec<&str> = Vec::new();
        for s in &self.summary {
            if !conds.contains(&s.condition.as_str()) {
                conds.push(&s.condition);
            }
        }
        let mut out = String::from("condition");
        for x in &self.axis {
            out += &format!(",{x}");
        }
        out.push('\n');
        for c in conds {
            out += c;
            for &x in &self.axis {
                let cell = match self.median_of(c, x) {
                    Some(v) => format!("{v:.6}"),
                    None => match self.results.iter().find(|r| r.condition == c && r.x == x) {
                        Some(r) => match &r.skipped {
                            Some(reason) => format!("\"skipped: {}\"", reason.replace('"', "'")),
                            None => "undef".into(),
                        },
                        None => String::new(),
                    },
                };
                out += &format!(",{cell}");
            }
            out.push('\n');
        }
        out
    }

    /// `x_count,mode,seed,macro_auc` rows of every condition.
    pub fn curve_csv(&self, train_size: usize, initial_size: usize) -> String {
        let mut out = String::from("x_count,mode,seed,macro_auc,x_frac_train,x_frac_initial\n");
        let mut rows: Vec<&ConditionResult> = self.results.iter().collect();
        rows.sort_by(|a, b| {
            a.condition
                .cmp(&b.condition)
                .then(a.seed.cmp(&b.seed))
                .then(a.x.total_cmp(&b.x))
        });
        for r in rows {
            let auc = r.macro_auc().map_or("undef".to_string(), |v| format!("{v:.6}"));
            out += &format!(
                "{},{},{},{auc},{:.6},{:.6}\n",
                r.x,
                r.condition,
                r.seed,
                r.x / train_size.max(1) as f64,
                r.x / initial_size.max(1) as f64
            );
        }
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>, train_size: usize, initial_size: usize) -> Result<()> {
        let dir = dir.as_ref();
        write_json(dir.join("summary.json"), self)?;
        for (name, body) in [
            ("table.csv", self.table_csv()),
            ("curve.csv", self.curve_csv(train_size, initial_size)),
        ] {
            std::fs::write(dir.join(name), body).map_err(|e| Error::io(dir.join(name), e))?;
        }
        Ok(())
    }
}

pub const FSL_RANDOM: &str = "fsl_random";

/// Test macro AUC of each method under each label budget and seed. AL methods
/// run once per seed up to the largest budget and are read at every budget.
pub fn label_budget_sweep(
    ctx: &ExperimentContext<'_>,
    budgets: &[f64],
    methods: &[String],
    seeds: &[u64],
) -> Result<ExperimentReport> {
    if seeds.is_empty() {
        return Err(Error::config("experiment.seeds", "need at least one seed"));
    }
    if budgets.is_empty() || budgets.iter().any(|&b| !(b > 0.0 && b <= 1.0)) {
        return Err(Error::config("experiment.budgets", "budgets must lie in (0, 1]"));
    }
    let mut budgets = budgets.to_vec();
    budgets.sort_by(|a, b| a.total_cmp(b));
    budgets.dedup();
    let test = ctx.corpus.split_samples(Split::Test);
    let mut results = Vec::new();
    for m in methods {
        if m == FSL_RANDOM {
            for &seed in seeds {
                for &b in &budgets {
                    let pool = ctx.random_budget(b, seed);
                    let r = match ctx.train_fresh(&pool, seed) {
                        Ok(clf) => ConditionResult {
                            condition: m.clone(),
                            x: b,
                            seed,
                            labels: pool.len(),
                            report: Some(ctx.test_once(&format!("{m}/{b}/{seed}"), "test", &clf, &test)?),
                            skipped: None,
                        },
                        Err(Error::Training(reason)) => ConditionResult {
                            condition: m.clone(),
                            x: b,
                            seed,
                            labels: pool.len(),
                            report: None,
                            skipped: Some(reason),
                        },
                        Err(e) => return Err(e),
                    };
                    results.push(r);
                }
            }
            continue;
        }
        let strategy = StrategyKind::parse(m)
            .ok_or_else(|| Error::config("experiment.methods", format!("unknown method `{m}`")))?;
        for &seed in seeds {
            let mut settings = ctx.settings.clone();
            settings.schedule.strategy = strategy;
            settings.schedule.label_budget = *budgets.last().unwrap();
            settings.schedule.report_budgets = budgets.clone();
            let out = run_al(&ctx.resources(), None, &settings, seed, None)?;
            crate::al::check_trail(&out.trail, settings.per_class_synthetic())?;
            // Budgets sharing one round's model share its single test read.
            let mut by_round: HashMap<usize, AucReport> = HashMap::new();
            for snap in out.snapshots {
                let b = snap.budget;
                let Some((round, labels, clf)) = snap.state else {
                    results.push(ConditionResult {
                        condition: m.clone(),
                        x: b,
                        seed,
                        labels: 0,
                        report: None,
                        skipped: Some(format!(
                            "budget below the initial pool fraction {}",
                            settings.schedule.initial_pool_fraction
                        )),
                    });
                    continue;
                };
                let rep = match by_round.get(&round) {
                    Some(r) => r.clone(),
                    None => {
                        let r = ctx.test_once(&format!("{m}/{seed}/round{round}"), "test", &clf, &test)?;
                        by_round.insert(round, r.clone());
                        r
                    }
                };
                results.push(ConditionResult {
                    condition: m.clone(),
                    x: b,
                    seed,
                    labels,
                    report: Some(rep),
                    skipped: None,
                });
            }
        }
    }
    let headline = headline(&results, methods);
    Ok(ExperimentReport::assemble(
        ExperimentKind::LabelBudgetSweep,
        ctx,
        seeds,
        results,
        headline,
    ))
}

/// AL at the 35% budget against random full-data training.
fn headline(results: &[ConditionResult], methods: &[String]) -> serde_json::Value {
    let med = |c: &str, x: f64| {
        let v: Vec<f64> = results
            .iter()
            .filter(|r| r.condition == c && (r.x - x).abs() < 1e-12)
            .filter_map(|r| r.macro_auc())
            .collect();
        (!v.is_empty()).then(|| median(&v))
    };
    let al: Vec<serde_json::Value> = methods
        .iter()
        .filter(|m| m.as_str() != FSL_RANDOM)
        .map(|m| serde_json::json!({ "method": m, "budget": 0.35, "median_macro_auc": med(m, 0.35) }))
        .collect();
    serde_json::json!({
        "al_at_35": al,
        "fsl_random_at_35": med(FSL_RANDOM, 0.35),
        "fsl_random_at_100": med(FSL_RANDOM, 1.0),
    })
}

/// Synthetic counterparts of `reals`: `per_real` images each, with target
/// classes drawn from the class frequencies of `reals`.
pub fn synthesize_fold(
    ctx: &ExperimentContext<'_>,
    reals: &[&ImageSample],
    per_real: usize,
    seed: u64,
    tag: &str,
) -> Result<Vec<ImageSample>> {
    let c = ctx.corpus.manifest.num_classes();
    let prior: Vec<usize> = reals.iter().filter_map(|s| s.primary_class()).collect();
    if prior.is_empty() {
        return Err(Error::Domain("fold has no labelled images to imitate".into()));
    }
    // Group requests by target so each class is generated in one call.
    let mut by_target: Vec<Vec<&ImageSample>> = vec![Vec::new(); c];
    for s in reals {
        let mut rng = rng_for(seed, "mix-targets", id_stream(&s.id));
        for _ in 0..per_real {
            by_target[prior[rng.random_range(0..prior.len())]].push(*s);
        }
    }
    let res = ctx.resources();
    let mut out = Vec::new();
    for (t, bases) in by_target.iter().enumerate() {
        for (j, base) in bases.iter().enumerate() {
            let mut v = gan_candidates(&res, &[*base], 1, &[t], &ctx.settings, seed ^ j as u64, tag)?;
            out.append(&mut v[0]);
        }
    }
    let mut seen = HashMap::new();
    for s in &mut out {
        let n = seen.entry(s.id.clone()).or_insert(0usize);
        if *n > 0 {
            s.id = format!("{}-{n}", s.id);
        }
        *n += 1;
    }
    Ok(out)
}

/// Fails when a synthetic sample's base image or patient lies in another fold.
pub fn check_fold_leakage(
    folds: &[(&str, &[&ImageSample])],
    synthetic: &[(&str, &[ImageSample])],
    corpus: &Corpus,
) -> Result<()> {
    let idx = corpus.index();
    let mut patient_fold: HashMap<&str, &str> = HashMap::new();
    for (name, reals) in folds {
        for s in reals.iter() {
            if let Some(prev) = patient_fold.insert(&s.patient_id, name) {
                if prev != *name {
                    return Err(Error::Split(format!(
                        "patient {} appears in folds {prev} and {name}",
                        s.patient_id
                    )));
                }
            }
        }
    }
    for (name, syn) in synthetic {
        for s in syn.iter() {
            let base = s
                .base_id
                .as_deref()
                .ok_or_else(|| Error::Split(format!("synthetic sample {} has no base image", s.id)))?;
            let bi = *idx
                .get(base)
                .ok_or_else(|| Error::Split(format!("base {base} of {} is not in the corpus", s.id)))?;
            let bp = corpus.samples[bi].patient_id.as_str();
            if s.patient_id != bp {
                return Err(Error::Split(format!(
                    "synthetic sample {} carries patient {} but its base belongs to {bp}",
                    s.id, s.patient_id
                )));
            }
            match patient_fold.get(bp) {
                Some(f) if f == name => {}
                Some(f) => {
                    return Err(Error::Split(format!(
                        "patient leakage: synthetic {} in fold {name} is based on patient {bp} of fold {f}",
                        s.id
                    )))
                }
                None => return Err(Error::Split(format!("base patient {bp} of {} is in no fold", s.id))),
            }
        }
    }
    Ok(())
}

/// Half real, half synthetic, with as many images as the real fold.
fn mixed_fold(reals: &[&ImageSample], syn: &[ImageSample], seed: u64, purpose: &str) -> Vec<ImageSample> {
    let mut rng = rng_for(seed, purpose, 0);
    let n = reals.len();
    let mut ri: Vec<usize> = (0..n).collect();
    ri.shuffle(&mut rng);
    ri.truncate(n.div_ceil(2));
    let mut si: Vec<usize> = (0..syn.len()).collect();
    si.shuffle(&mut rng);
    si.truncate(n / 2);
    let mut out: Vec<ImageSample> = ri
        .iter()
        .map(|&i| reals[i].clone())
        .chain(si.iter().map(|&i| syn[i].clone()))
        .collect();
    out.shuffle(&mut rng);
    out
}

/// Train/test over every combination of real, synthetic and mixed folds. The
/// synthetic fold of a split is generated from that split's real images, so every
/// patient stays in one fold. Mixed folds draw half of their images from each.
pub fn real_syn_mix_matrix(ctx: &ExperimentContext<'_>, per_real: usize, seeds: &[u64]) -> Result<ExperimentReport> {
    if seeds.is_empty() {
        return Err(Error::config("experiment.seeds", "need at least one seed"));
    }
    if per_real == 0 {
        return Err(Error::config("experiment.mix_syn_per_real", "must be >= 1"));
    }
    if ctx.cagan.is_none() {
        return Err(Error::Capability(
            "the real/synthetic matrix needs a trained CAGAN checkpoint".into(),
        ));
    }
    let real_train = ctx.corpus.split_samples(Split::Train);
    let real_test = ctx.corpus.split_samples(Split::Test);
    let mut results = Vec::new();
    let mut gaps = Vec::new();
    for &seed in seeds {
        let syn_train = synthesize_fold(ctx, &real_train, per_real, seed, "mtr")?;
        let syn_test = synthesize_fold(ctx, &real_test, per_real, seed, "mte")?;
        check_fold_leakage(
            &[("train", &real_train), ("test", &real_test)],
            &[("train", &syn_train), ("test", &syn_test)],
            ctx.corpus,
        )?;
        let mix_train = mixed_fold(&real_train, &syn_train, seed, "mix-train");
        let mix_test = mixed_fold(&real_test, &syn_test, seed, "mix-test");
        let trains: [(&str, Vec<&ImageSample>); 3] = [
            ("Real", real_train.clone()),
            ("Syn", syn_train.iter().collect()),
            ("Mix", mix_train.iter().collect()),
        ];
        let tests: [(&str, Vec<&ImageSample>); 3] = [
            ("Real", real_test.clone()),
            ("Syn", syn_test.iter().collect()),
            ("Mix", mix_test.iter().collect()),
        ];
        let mut rr = None;
        let mut row = BTreeMap::new();
        for (tn, tr) in &trains {
            let clf = ctx.train_fresh(tr, seed)?;
            let labels = tr.iter().filter(|s| s.provenance == Provenance::Real).count();
            for (en, te) in &tests {
                let rep = ctx.test_once(&format!("mix/{tn}/{seed}"), en, &clf, te)?;
                let cond = format!("{tn}-{en}");
                if cond == "Real-Real" {
                    rr = rep.macro_auc;
                }
                row.insert(cond.clone(), rep.macro_auc);
                results.push(ConditionResult {
                    condition: cond,
                    x: 0.0,
                    seed,
                    labels,
                    report: Some(rep),
                    skipped: None,
                });
            }
        }
        if let (Some(rr), Some(Some(sr)), Some(Some(mm))) = (rr, row.get("Syn-Real"), row.get("Mix-Mix")) {
            gaps.push((rr - sr, rr - mm));
        }
    }
    let d1: Vec<f64> = gaps.iter().map(|g| g.0).collect();
    let d2: Vec<f64> = gaps.iter().map(|g| g.1).collect();
    let extras = serde_json::json!({
        "real_real_minus_syn_real": { "median": median(&d1), "q25": quantile(&d1, 0.25), "q75": quantile(&d1, 0.75) },
        "real_real_minus_mix_mix": { "median": median(&d2), "q25": quantile(&d2, 0.25), "q75": quantile(&d2, 0.75) },
        "real_real_is_fsl_baseline": true,
    });
    Ok(ExperimentReport::assemble(
        ExperimentKind::RealSynMixMatrix,
        ctx,
        seeds,
        results,
        extras,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthMode {
    Informative,
    Random,
}

impl GrowthMode {
    pub fn name(self) -> &'static str {
        match self {
            GrowthMode::Informative => "informative",
            GrowthMode::Random => "random",
        }
    }
}

/// Parameters of the synthetic growth curve.
#[derive(Clone, Debug, PartialEq)]
pub struct GrowthSpec {
    pub initial_per_class: usize,
    pub step_per_class: usize,
    pub steps: usize,
    /// Candidates generated per class and step before choosing `step_per_class`.
    pub candidates_per_class: usize,
}

/// Fixed real pool of `per_class` images of each class (fewer when a class is short).
pub fn class_stratified_pool<'a>(corpus: &'a Corpus, per_class: usize, seed: u64) -> Vec<&'a ImageSample> {
    let mut train = corpus.split_samples(Split::Train);
    train.shuffle(&mut rng_for(seed, "growth-pool", 0));
    let mut counts = vec![0usize; corpus.manifest.num_classes()];
    let mut pool = Vec::new();
    for s in train {
        if let Some(k) = s.primary_class() {
            if counts[k] < per_class {
                counts[k] += 1;
                pool.push(s);
            }
        }
    }
    pool.sort_by(|a, b| a.id.cmp(&b.id));
    pool
}

/// Test AUC after each step of adding only synthetic images to a fixed small
/// real pool, for every mode and seed, plus the full-data reference.
pub fn synthetic_growth_curve(
    ctx: &ExperimentContext<'_>,
    spec: &GrowthSpec,
    modes: &[GrowthMode],
    seeds: &[u64],
) -> Result<ExperimentReport> {
    if spec.step_per_class == 0 {
        return Err(Error::config("experiment.growth_step_per_class", "must be >= 1"));
    }
    if spec.candidates_per_class < spec.step_per_class {
        return Err(Error::config(
            "experiment.growth_candidates_per_class",
            "must be at least growth_step_per_class",
        ));
    }
    if spec.steps > 0 && (ctx.cagan.is_none() || ctx.segmenter.is_none()) {
        return Err(Error::Capability(
            "the growth curve needs a trained segmenter and CAGAN checkpoint".into(),
        ));
    }
    let c = ctx.corpus.manifest.num_classes();
    let test = ctx.corpus.split_samples(Split::Test);
    let res = ctx.resources();
    let mut results = Vec::new();
    let mut initial_size = 0;
    for &seed in seeds {
        let pool = class_stratified_pool(ctx.corpus, spec.initial_per_class, seed);
        initial_size = pool.len();
        let base = ctx.train_fresh(&pool, seed)?;
        let rep0 = ctx.test_once(&format!("growth/base/{seed}"), "test", &base, &test)?;
        for &mode in modes {
            let mut clf = base.try_clone()?;
            let mut synthetic: Vec<ImageSample> = Vec::new();
            results.push(ConditionResult {
                condition: mode.name().into(),
                x: 0.0,
                seed,
                labels: pool.len(),
                report: Some(rep0.clone()),
                skipped: None,
            });
            for step in 1..=spec.steps {
                let ss: u64 = rng_for(seed, "growth-step", step as u64).random();
                let targets: Vec<usize> = (0..c).collect();
                let cands = gan_candidates(
                    &res,
                    &pool,
                    spec.candidates_per_class,
                    &targets,
                    &ctx.settings,
                    ss,
                    &format!("g{step}"),
                )?;
                for set in cands {
                    let mut chosen = match mode {
                        GrowthMode::Informative => {
                            let refs: Vec<&ImageSample> = set.iter().collect();
                            let est = estimate(&clf, &refs, &ctx.settings.uncertainty, ss)?;
                            let scored: Vec<(String, f64)> =
                                est.iter().map(|e| (e.sample_id.clone(), e.score)).collect();
                            let sel = crate::uncertainty::rank_by_informativeness(&scored, spec.step_per_class, ss)?;
                            let keep: HashSet<&String> = sel.ids.iter().collect();
                            set.into_iter().filter(|s| keep.contains(&s.id)).collect::<Vec<_>>()
                        }
                        GrowthMode::Random => {
                            let mut s = set;
                            s.shuffle(&mut rng_for(ss, "growth-random", 0));
                            s.truncate(spec.step_per_class);
                            s
                        }
                    };
                    synthetic.append(&mut chosen);
                }
                let mut train: Vec<&ImageSample> = pool.clone();
                train.extend(synthetic.iter());
                let hyper =
                    FinetuneHyper::from_config(&ctx.settings.classifier, ctx.settings.classifier.finetune_epochs);
                finetune(&mut clf, &train, &hyper, ss)?;
                let rep = ctx.test_once(&format!("growth/{}/{seed}/{step}", mode.name()), "test", &clf, &test)?;
                results.push(ConditionResult {
                    condition: mode.name().into(),
                    x: synthetic.len() as f64,
                    seed,
                    labels: pool.len(),
                    report: Some(rep),
                    skipped: None,
                });
            }
        }
    }
    // Horizontal reference: the full training split.
    let mut refs = Vec::new();
    for &seed in seeds {
        let full = ctx.random_budget(1.0, seed);
        let clf = ctx.train_fresh(&full, seed)?;
        let rep = ctx.test_once(&format!("growth/fsl_full/{seed}"), "test", &clf, &test)?;
        refs.push(rep.macro_auc.unwrap_or(f64::NAN));
        results.push(ConditionResult {
            condition: "fsl_full".into(),
            x: 0.0,
            seed,
            labels: full.len(),
            report: Some(rep),
            skipped: None,
        });
    }
    let extras = serde_json::json!({
        "initial_pool_size": initial_size,
        "train_size": ctx.corpus.split_samples(Split::Train).len(),
        "fsl_full_median": median(&refs),
    });
    Ok(ExperimentReport::assemble(
        ExperimentKind::SyntheticGrowthCurve,
        ctx,
        seeds,
        results,
        extras,
    ))
}

/// Spearman rank correlation with midranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Centred moving average; the ends average over the available neighbours.
pub fn moving_average(v: &[f64], window: usize) -> Vec<f64> {
    let h = window / 2;
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h + 1).min(v.len());
            v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(moving_average(&[0.0, 3.0, 6.0], 3), vec![1.5, 3.0, 4.5]);
    }
}
