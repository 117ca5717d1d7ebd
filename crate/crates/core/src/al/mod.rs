//! Closed-loop active learning: score the unlabelled pool, label the most
//! informative samples, add synthetic images, fine-tune, validate, repeat.

pub mod augment;

pub use augment::{apply_transform, augment_standard, RigidTransform};

use crate::cagan::{generate_batch, CaganCheckpoint, GenRequest};
use crate::classifier::{evaluate_samples, finetune, Classifier, ClassifierSpec, FinetuneHyper, SplitGuard};
use crate::config::{
    ClassifierConfig, LabelMode, RunConfig, ScheduleConfig, StrategyKind, SyntheticMode, UncertaintyConfig,
};
use crate::data::{read_png, write_png, Corpus, ImageSample, Provenance, Split};
use crate::error::{Error, Result};
use crate::segmenter::{perturb_mask, MaskLatent, Segmenter};
use crate::uncertainty::{entropy_score, estimate, rank_by_informativeness};
use crate::util::{id_stream, read_json, rng_for, write_json};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet, VecDeque};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// True iff the last `w` successive absolute differences of `history` are all
/// at most `eps`. Shorter histories are never flat.
pub fn stopping_check(history: &[f64], eps: f64, w: usize) -> bool {
    if history.len() < w + 1 {
        return false;
    }
    history[history.len() - w - 1..]
        .windows(2)
        .all(|p| (p[1] - p[0]).abs() <= eps + 1e-12)
}

/// Everything the loop reads besides the corpus and the models.
#[derive(Clone, Debug)]
pub struct AlSettings {
    pub schedule: ScheduleConfig,
    pub uncertainty: UncertaintyConfig,
    pub classifier: ClassifierConfig,
    pub label_mode: LabelMode,
    pub perturb_magnitude: f64,
    pub control_points: usize,
}

impl AlSettings {
    pub fn from_run(cfg: &RunConfig) -> Self {
        AlSettings {
            schedule: cfg.schedule.clone(),
            uncertainty: cfg.uncertainty.clone(),
            classifier: cfg.classifier.clone(),
            label_mode: cfg.data.label_mode,
            perturb_magnitude: cfg.segmenter.perturb_magnitude,
            control_points: cfg.segmenter.control_points,
        }
    }

    /// Whether augmentation keeps `keep_per_class` synthetic images of every class.
    pub fn per_class_synthetic(&self) -> bool {
        matches!(
            self.schedule.strategy,
            StrategyKind::Cagan | StrategyKind::NoBnnEntropy | StrategyKind::RandomSelect
        )
    }

    /// Classifier trained from the initial pool when none is supplied.
    pub fn classifier_spec(&self, side: usize, num_classes: usize) -> ClassifierSpec {
        ClassifierSpec {
            backbone: self.classifier.backbone.clone(),
            side,
            num_classes,
            widths: self.classifier.widths.clone(),
            label_mode: self.label_mode,
            mask_rate: self.uncertainty.mask_rate,
            variance_head: !self.uncertainty.epistemic_only,
        }
    }
}

pub struct AlResources<'a> {
    pub corpus: &'a Corpus,
    pub segmenter: Option<&'a Segmenter>,
    pub cagan: Option<&'a CaganCheckpoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlRoundRecord {
    pub round: usize,
    pub selected_ids: Vec<String>,
    pub selected_scores: Vec<f64>,
    /// Synthetic ids kept this round, by class.
    pub synthetic_kept: Vec<Vec<String>>,
    /// Size of the synthetic training set after this round.
    pub synthetic_total: usize,
    pub val_auc_before: f64,
    pub val_auc_after: f64,
    pub labels_consumed: usize,
    pub pool_remaining: usize,
    pub wall_time_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxRounds,
    Plateau,
    GainBelowThreshold,
    LabelBudget,
    PoolExhausted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlTrail {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub train_size: usize,
    pub top_k_real: usize,
    pub keep_per_class: usize,
    pub stop_epsilon: f64,
    /// How `stop_epsilon` is to be read; recorded because the source rule is ambiguous.
    pub stop_epsilon_units: String,
    pub initial_ids: Vec<String>,
    pub initial_val_auc: f64,
    pub rounds: Vec<AlRoundRecord>,
    pub stop_reason: Option<StopReason>,
}

impl AlTrail {
    pub fn selected_sequence(&self) -> Vec<Vec<String>> {
        self.rounds.iter().map(|r| r.selected_ids.clone()).collect()
    }

    pub fn labels_consumed(&self) -> usize {
        self.rounds.last().map_or(self.initial_ids.len(), |r| r.labels_consumed)
    }

    pub fn val_history(&self) -> Vec<f64> {
        std::iter::once(self.initial_val_auc)
            .chain(self.rounds.iter().map(|r| r.val_auc_after))
            .collect()
    }
}

/// Checks the label and synthetic accounting of a trail: labels consumed equal
/// the initial pool plus every round's picks, picks are disjoint, full rounds take
/// exactly `top_k_real`, and every class keeps `keep_per_class` synthetic samples
/// when `per_class_synthetic` is set.
pub fn check_trail(trail: &AlTrail, per_class_synthetic: bool) -> Result<()> {
    let mut seen: HashSet<&str> = trail.initial_ids.iter().map(|s| s.as_str()).collect();
    if seen.len() != trail.initial_ids.len() {
        return Err(Error::Guard("duplicate id in the initial pool".into()));
    }
    let mut consumed = trail.initial_ids.len();
    let last = trail.rounds.len().saturating_sub(1);
    for (i, r) in trail.rounds.iter().enumerate() {
        if r.round != i + 1 {
            return Err(Error::Guard(format!("round numbering broken at {}", r.round)));
        }
        for id in &r.selected_ids {
            if !seen.insert(id) {
                return Err(Error::Guard(format!("round {} relabels {id}", r.round)));
            }
        }
        if i < last && r.selected_ids.len() != trail.top_k_real {
            return Err(Error::Guard(format!(
                "round {} picked {} instead of {}",
                r.round,
                r.selected_ids.len(),
                trail.top_k_real
            )));
        }
        consumed += r.selected_ids.len();
        if r.labels_consumed != consumed {
            return Err(Error::Guard(format!(
                "round {} reports {} labels, accounting gives {consumed}",
                r.round, r.labels_consumed
            )));
        }
        if per_class_synthetic && r.synthetic_kept.iter().any(|k| k.len() != trail.keep_per_class) {
            let counts: Vec<usize> = r.synthetic_kept.iter().map(|k| k.len()).collect();
            return Err(Error::Guard(format!(
                "round {} kept {counts:?} synthetic samples per class, expected {}",
                r.round, trail.keep_per_class
            )));
        }
    }
    Ok(())
}

/// Classifier state at the largest label count within a budget.
pub struct BudgetSnapshot {
    pub budget: f64,
    /// `None` when the budget lies below the initial pool.
    pub state: Option<(usize, usize, Classifier)>,
}

pub struct AlOutcome {
    pub classifier: Classifier,
    pub trail: AlTrail,
    /// One entry per `schedule.report_budgets` value: `(round, labels, classifier)`.
    pub snapshots: Vec<BudgetSnapshot>,
}

/// Output directory handling of a run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
    pub resume: bool,
}

fn val_macro(clf: &Classifier, val: &[&ImageSample], names: &[String]) -> Result<f64> {
    evaluate_samples(clf, val, "val", names)?
        .macro_auc
        .ok_or_else(|| Error::Domain("validation split has no class with both positives and negatives".into()))
}

/// Runs the loop, validating on the corpus validation split behind a guard that
/// rejects any other split.
/// Ids of the initially labelled pool: `round(fraction * n)` training ids (at
/// least one) drawn by a seeded shuffle of the sorted ids.
pub fn initial_pool_ids(train: &[&ImageSample], fraction: f64, seed: u64) -> Vec<String> {
    let mut ids: Vec<String> = train.iter().map(|s| s.id.clone()).collect();
    ids.sort();
    ids.shuffle(&mut rng_for(seed, "al-initial", 0));
    let n0 = ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len().max(1));
    ids.truncate(n0);
    ids
}

pub fn run_al(
    res: &AlResources<'_>,
    init: Option<Classifier>,
    settings: &AlSettings,
    seed: u64,
    out: Option<&RunDir>,
) -> Result<AlOutcome> {
    let guard = SplitGuard::selection();
    let val = res.corpus.split_samples(Split::Val);
    let names = res.corpus.manifest.class_names.clone();
    let mut eval = |c: &Classifier| {
        guard.check(Split::Val)?;
        val_macro(c, &val, &names)
    };
    run_al_with(res, init, settings, seed, out, &mut eval)
}

fn round_seed(seed: u64, round: usize) -> u64 {
    rng_for(seed, "al-round", round as u64).random()
}

struct LoopState {
    labelled: Vec<String>,
    synthetic: VecDeque<ImageSample>,
    history: Vec<f64>,
}

/// [`run_al`] with an explicit validation evaluator.
pub fn run_al_with(
    res: &AlResources<'_>,
    init: Option<Classifier>,
    settings: &AlSettings,
    seed: u64,
    out: Option<&RunDir>,
    eval: &mut dyn FnMut(&Classifier) -> Result<f64>,
) -> Result<AlOutcome> {
    let sc = &settings.schedule;
    let corpus = res.corpus;
    let c = corpus.manifest.num_classes();
    if sc.keep_per_class > sc.gen_per_class {
        return Err(Error::config(
            "schedule.keep_per_class",
            "must not exceed gen_per_class",
        ));
    }
    if sc.top_k_real == 0 || sc.stop_window == 0 {
        return Err(Error::config(
            "schedule.top_k_real",
            "top_k_real and stop_window must be >= 1",
        ));
    }
    let needs_gan = matches!(
        sc.strategy,
        StrategyKind::Cagan | StrategyKind::PlainGan | StrategyKind::NoBnnEntropy | StrategyKind::RandomSelect
    );
    if needs_gan && sc.max_rounds > 0 {
        if res.cagan.is_none() {
            return Err(Error::Capability(format!(
                "strategy {} needs a trained CAGAN checkpoint; run train-cagan first",
                sc.strategy.name()
            )));
        }
        if res.segmenter.is_none() {
            return Err(Error::Capability(format!(
                "strategy {} needs a trained segmenter",
                sc.strategy.name()
            )));
        }
    }
    let train = corpus.split_samples(Split::Train);
    if train.is_empty() {
        return Err(Error::Schedule("training split is empty".into()));
    }
    let by_id: HashMap<&str, &ImageSample> = train.iter().map(|s| (s.id.as_str(), *s)).collect();
    let n_train = train.len();
    let cap = ((sc.label_budget * n_train as f64) + 1e-9).floor() as usize;
    let budget_caps: Vec<usize> = sc
        .report_budgets
        .iter()
        .map(|b| ((b * n_train as f64) + 1e-9).floor() as usize)
        .collect();

    let existing = out.map(|d| d.path.join("trail.json")).filter(|p| p.exists());
    if let (Some(p), Some(d)) = (&existing, out) {
        if !d.resume {
            return Err(Error::Exists(d.path.display().to_string()));
        }
        log::info!("resuming from {}", p.display());
    }

    let (mut trail, mut clf, mut st) = match existing {
        Some(p) => resume_state(&p, out.unwrap(), c, sc)?,
        None => {
            let ids = initial_pool_ids(&train, sc.initial_pool_fraction, seed);
            let mut clf = match init {
                Some(c) => c,
                None => {
                    let pool: Vec<&ImageSample> = ids.iter().map(|i| by_id[i.as_str()]).collect();
                    let spec = settings.classifier_spec(pool[0].side, c);
                    let mut clf = Classifier::new(spec, round_seed(seed, 0))?;
                    let hyper = FinetuneHyper::from_config(&settings.classifier, settings.classifier.epochs);
                    finetune(&mut clf, &pool, &hyper, round_seed(seed, 0))?;
                    clf
                }
            };
            clf.round = Some(0);
            let auc0 = eval(&clf)?;
            let trail = AlTrail {
                strategy: sc.strategy,
                seed,
                train_size: n_train,
                top_k_real: sc.top_k_real,
                keep_per_class: sc.keep_per_class,
                stop_epsilon: sc.stop_epsilon,
                stop_epsilon_units: "absolute AUC (0.001 = 0.1 AUC percentage points)".into(),
                initial_ids: ids.clone(),
                initial_val_auc: auc0,
                rounds: Vec::new(),
                stop_reason: None,
            };
            if let Some(d) = out {
                let r0 = d.path.join("round_0");
                clf.save(r0.join("checkpoint"))?;
                write_json(r0.join("auc.json"), &serde_json::json!({ "val_macro_auc": auc0 }))?;
                write_json(d.path.join("trail.json"), &trail)?;
            }
            let st = LoopState {
                labelled: ids,
                synthetic: VecDeque::new(),
                history: vec![auc0],
            };
            (trail, clf, st)
        }
    };

    // Budget snapshots: the latest state whose label count stays within each cap.
    let mut snap: Vec<Option<(usize, usize)>> = vec![None; budget_caps.len()];
    let mut cache: HashMap<usize, Classifier> = HashMap::new();
    let mut note_state =
        |round: usize, labels: usize, clf: Option<&Classifier>, snap: &mut Vec<Option<(usize, usize)>>| -> Result<()> {
            let mut used = false;
            for (k, &b) in budget_caps.iter().enumerate() {
                if labels <= b {
                    snap[k] = Some((round, labels));
                    used = true;
                }
            }
            if used {
                if let Some(c) = clf {
                    cache.insert(round, c.try_clone()?);
                }
            }
            let live: HashSet<usize> = snap.iter().flatten().map(|s| s.0).collect();
            cache.retain(|r, _| live.contains(r));
            Ok(())
        };
    note_state(
        0,
        trail.initial_ids.len(),
        (trail.rounds.is_empty()).then_some(&clf),
        &mut snap,
    )?;
    for r in &trail.rounds {
        let cur = (r.round == trail.rounds.len()).then_some(&clf);
        note_state(r.round, r.labels_consumed, cur, &mut snap)?;
    }

    let mut labelled_set: HashSet<String> = st.labelled.iter().cloned().collect();
    let mut pool: Vec<&ImageSample> = train
        .iter()
        .copied()
        .filter(|s| !labelled_set.contains(&s.id))
        .collect();
    pool.sort_by(|a, b| a.id.cmp(&b.id));

    if trail.stop_reason.is_none() && sc.max_rounds == 0 {
        trail.stop_reason = Some(StopReason::MaxRounds);
    }
    if trail.stop_reason.is_none() && trail.rounds.is_empty() && pool.is_empty() {
        return Err(Error::Schedule(
            "unlabelled pool is empty before the first round".into(),
        ));
    }

    if trail.stop_reason.is_none() && st.labelled.len() >= cap {
        trail.stop_reason = Some(StopReason::LabelBudget);
    }

    while trail.stop_reason.is_none() {
        let round = trail.rounds.len() + 1;
        let t0 = Instant::now();
        let rs = round_seed(seed, round);
        let take = sc.top_k_real.min(pool.len()).min(cap.saturating_sub(st.labelled.len()));
        let before = *st.history.last().unwrap();

        // (1) score the pool and (2) pick the top samples, irrespective of class.
        let scores = score_samples(&clf, &pool, sc.strategy, settings, rs, "pool")?;
        let scored: Vec<(String, f64)> = pool.iter().map(|s| s.id.clone()).zip(scores.iter().copied()).collect();
        let sel = rank_by_informativeness(&scored, take.max(1), rs)?;
        let picked: Vec<&ImageSample> = sel.ids.iter().map(|i| by_id[i.as_str()]).collect();

        // (3) augment, scoring candidates with the pre-round classifier.
        let kept = augment_round(res, &clf, &picked, settings, rs, round)?;
        let mut kept_ids = vec![Vec::new(); c];
        for s in &kept {
            if let Some(k) = s.primary_class() {
                kept_ids[k].push(s.id.clone());
            }
        }
        if sc.synthetic_mode == SyntheticMode::Replace {
            st.synthetic.clear();
        }
        st.synthetic.extend(kept.iter().cloned());
        while st.synthetic.len() > sc.synthetic_cap {
            st.synthetic.pop_front();
        }

        // (6) move the picks to the labelled set.
        for id in &sel.ids {
            labelled_set.insert(id.clone());
            st.labelled.push(id.clone());
        }
        pool.retain(|s| !labelled_set.contains(&s.id));

        // (4) fine-tune on labelled reals plus synthetic samples.
        let mut train_set: Vec<&ImageSample> = st.labelled.iter().map(|i| by_id[i.as_str()]).collect();
        train_set.extend(st.synthetic.iter());
        let hyper = FinetuneHyper::from_config(&settings.classifier, settings.classifier.finetune_epochs);
        finetune(&mut clf, &train_set, &hyper, rs)?;
        clf.round = Some(round);

        // (5) validate.
        let after = eval(&clf)?;
        st.history.push(after);
        let rec = AlRoundRecord {
            round,
            selected_ids: sel.ids.clone(),
            selected_scores: sel.scores.clone(),
            synthetic_kept: kept_ids,
            synthetic_total: st.synthetic.len(),
            val_auc_before: before,
            val_auc_after: after,
            labels_consumed: st.labelled.len(),
            pool_remaining: pool.len(),
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "round {round}: labels {} synthetic {} val AUC {before:.4} -> {after:.4}",
            rec.labels_consumed,
            rec.synthetic_total
        );

        // (7) stopping rules.
        trail.stop_reason = if sc.gain_threshold.is_some_and(|g| after - before < g) {
            Some(StopReason::GainBelowThreshold)
        } else if stopping_check(&st.history, sc.stop_epsilon, sc.stop_window) {
            Some(StopReason::Plateau)
        } else if pool.is_empty() {
            Some(StopReason::PoolExhausted)
        } else if st.labelled.len() >= cap {
            Some(StopReason::LabelBudget)
        } else if round >= sc.max_rounds {
            Some(StopReason::MaxRounds)
        } else {
            None
        };
        if let Some(d) = out {
            persist_round(&d.path, &rec, &scored, &kept, &clf)?;
        }
        trail.rounds.push(rec);
        note_state(round, st.labelled.len(), Some(&clf), &mut snap)?;
        if let Some(d) = out {
            write_json(d.path.join("trail.json"), &trail)?;
        }
    }

    let mut snapshots = Vec::with_capacity(snap.len());
    for (k, s) in snap.iter().enumerate() {
        let state = match s {
            None => None,
            Some((round, labels)) => {
                let m = match cache.get(round) {
                    Some(m) => m.try_clone()?,
                    None if *round == trail.rounds.len() => clf.try_clone()?,
                    None => match out {
                        Some(d) => Classifier::load(d.path.join(format!("round_{round}")).join("checkpoint"))?,
                        None => return Err(Error::Training(format!("snapshot of round {round} is missing"))),
                    },
                };
                Some((*round, *labels, m))
            }
        };
        snapshots.push(BudgetSnapshot {
            budget: sc.report_budgets[k],
            state,
        });
    }
    Ok(AlOutcome {
        classifier: clf,
        trail,
        snapshots,
    })
}

/// Informativeness of `samples` under the strategy's scoring rule.
fn score_samples(
    clf: &Classifier,
    samples: &[&ImageSample],
    strategy: StrategyKind,
    settings: &AlSettings,
    seed: u64,
    purpose: &str,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    match strategy {
        StrategyKind::Cagan | StrategyKind::StandardDa | StrategyKind::PlainGan => {
            Ok(estimate(clf, samples, &settings.uncertainty, seed)?
                .into_iter()
                .map(|e| e.score)
                .collect())
        }
        StrategyKind::NoBnnEntropy => clf
            .predict_proba(samples)?
            .iter()
            .map(|p| entropy_score(p, settings.label_mode))
            .collect(),
        StrategyKind::RandomSelect => {
            let tag = format!("al-random-{purpose}");
            Ok(samples
                .iter()
                .map(|s| rng_for(seed, &tag, id_stream(&s.id)).random::<f64>())
                .collect())
        }
    }
}

/// Top `n` candidates by score.
fn keep_top(cands: Vec<ImageSample>, scores: &[f64], n: usize, seed: u64) -> Result<Vec<ImageSample>> {
    if cands.is_empty() || n == 0 {
        return Ok(Vec::new());
    }
    let scored: Vec<(String, f64)> = cands.iter().map(|s| s.id.clone()).zip(scores.iter().copied()).collect();
    let sel = rank_by_informativeness(&scored, n, seed)?;
    let mut slot: HashMap<String, ImageSample> = cands.into_iter().map(|s| (s.id.clone(), s)).collect();
    Ok(sel.ids.iter().filter_map(|i| slot.remove(i)).collect())
}

/// Latents for each picked sample: its predicted mask followed by deformations.
fn base_latents(
    seg: &Segmenter,
    base: &ImageSample,
    count: usize,
    settings: &AlSettings,
    seed: u64,
) -> Result<Vec<MaskLatent>> {
    let own = seg.latent_of_image(base)?;
    let mut out = vec![own];
    if count > 1 {
        let s = seed ^ id_stream(&base.id);
        match perturb_mask(
            seg,
            &out[0],
            settings.perturb_magnitude,
            count - 1,
            settings.control_points,
            s,
        ) {
            Ok(p) => out.extend(p),
            Err(e) => log::warn!("no mask perturbations for {}: {e}", base.id),
        }
    }
    Ok(out)
}

fn augment_round(
    res: &AlResources<'_>,
    clf: &Classifier,
    picked: &[&ImageSample],
    settings: &AlSettings,
    seed: u64,
    round: usize,
) -> Result<Vec<ImageSample>> {
    let sc = &settings.schedule;
    let c = res.corpus.manifest.num_classes();
    if picked.is_empty() || sc.keep_per_class == 0 {
        return Ok(Vec::new());
    }
    let k = picked.len();
    let total = c * sc.gen_per_class;
    match sc.strategy {
        StrategyKind::StandardDa => {
            let per = if sc.da_per_sample > 0 {
                sc.da_per_sample
            } else {
                total.div_ceil(k)
            };
            let cands = augment_standard(picked, per, seed)?;
            let cands = rename(cands, &format!("r{round}"));
            let scores = score_samples(
                clf,
                &cands.iter().collect::<Vec<_>>(),
                sc.strategy,
                settings,
                seed,
                "candidates",
            )?;
            keep_top(cands, &scores, c * sc.keep_per_class, seed)
        }
        StrategyKind::PlainGan => {
            let bases: Vec<(&ImageSample, usize)> = picked
                .iter()
                .filter_map(|s| s.primary_class().map(|t| (*s, t)))
                .collect();
            if bases.is_empty() {
                return Ok(Vec::new());
            }
            let per = total.div_ceil(bases.len());
            let lat: Vec<Vec<MaskLatent>> = bases
                .iter()
                .map(|(b, _)| base_latents(res.segmenter.unwrap(), b, per, settings, seed))
                .collect::<Result<_>>()?;
            let reqs: Vec<GenRequest<'_>> = (0..total)
                .map(|i| {
                    let b = i % bases.len();
                    let l = &lat[b][(i / bases.len()) % lat[b].len()];
                    GenRequest {
                        base: bases[b].0,
                        mask_id: &l.id,
                        z: &l.z,
                        target: bases[b].1,
                    }
                })
                .collect();
            let cands = rename(generate_batch(res.cagan.unwrap(), &reqs)?, &format!("r{round}"));
            let scores = score_samples(
                clf,
                &cands.iter().collect::<Vec<_>>(),
                sc.strategy,
                settings,
                seed,
                "candidates",
            )?;
            keep_top(cands, &scores, c * sc.keep_per_class, seed)
        }
        StrategyKind::Cagan | StrategyKind::NoBnnEntropy | StrategyKind::RandomSelect => {
            let targets: Vec<usize> = (0..c).collect();
            let per_class = gan_candidates(
                res,
                picked,
                sc.gen_per_class,
                &targets,
                settings,
                seed,
                &format!("r{round}"),
            )?;
            let mut kept = Vec::with_capacity(c * sc.keep_per_class);
            for cands in per_class {
                let scores = score_samples(
                    clf,
                    &cands.iter().collect::<Vec<_>>(),
                    sc.strategy,
                    settings,
                    seed,
                    "candidates",
                )?;
                kept.extend(keep_top(cands, &scores, sc.keep_per_class, seed)?);
            }
            Ok(kept)
        }
    }
}

/// `per_class` generated candidates for every class in `targets`, cycling over
/// `bases` and over each base's own and perturbed mask latents. Ids are
/// prefixed with `tag`.
pub fn gan_candidates(
    res: &AlResources<'_>,
    bases: &[&ImageSample],
    per_class: usize,
    targets: &[usize],
    settings: &AlSettings,
    seed: u64,
    tag: &str,
) -> Result<Vec<Vec<ImageSample>>> {
    let (Some(seg), Some(ck)) = (res.segmenter, res.cagan) else {
        return Err(Error::Capability(
            "synthetic candidates need a segmenter and a CAGAN checkpoint".into(),
        ));
    };
    if bases.is_empty() {
        return Ok(vec![Vec::new(); targets.len()]);
    }
    let k = bases.len();
    let per = per_class.div_ceil(k);
    let lat: Vec<Vec<MaskLatent>> = bases
        .iter()
        .map(|b| base_latents(seg, b, per, settings, seed))
        .collect::<Result<_>>()?;
    targets
        .iter()
        .map(|&t| {
            let reqs: Vec<GenRequest<'_>> = (0..per_class)
                .map(|i| {
                    let b = i % k;
                    let l = &lat[b][(i / k) % lat[b].len()];
                    GenRequest {
                        base: bases[b],
                        mask_id: &l.id,
                        z: &l.z,
                        target: t,
                    }
                })
                .collect();
            Ok(rename(generate_batch(ck, &reqs)?, tag))
        })
        .collect()
}

/// Tag-qualified unique ids; repeated latents get an ordinal suffix.
fn rename(mut cands: Vec<ImageSample>, tag: &str) -> Vec<ImageSample> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    for s in &mut cands {
        let n = seen.entry(s.id.clone()).or_insert(0);
        s.id = if *n == 0 {
            format!("{tag}-{}", s.id)
        } else {
            format!("{tag}-{}-{n}", s.id)
        };
        *n += 1;
    }
    cands
}

#[derive(Serialize, Deserialize)]
struct SyntheticRow {
    id: String,
    base_id: String,
    mask_id: String,
    patient_id: String,
    labels: String,
}

fn labels_str(l: &[u8]) -> String {
    l.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(";")
}

fn persist_round(
    dir: &Path,
    rec: &AlRoundRecord,
    scored: &[(String, f64)],
    kept: &[ImageSample],
    clf: &Classifier,
) -> Result<()> {
    let rd = dir.join(format!("round_{}", rec.round));
    std::fs::create_dir_all(rd.join("synthetic")).map_err(|e| Error::io(&rd, e))?;
    let mut w = csv::Writer::from_path(rd.join("selected.csv"))?;
    w.write_record(["id", "score"])?;
    for (id, s) in rec.selected_ids.iter().zip(&rec.selected_scores) {
        w.write_record([id.clone(), format!("{s:.9e}")])?;
    }
    w.flush().map_err(|e| Error::io(&rd, e))?;
    let mut w = csv::Writer::from_path(rd.join("scores.csv"))?;
    w.write_record(["id", "score"])?;
    for (id, s) in scored {
        w.write_record([id.clone(), format!("{s:.9e}")])?;
    }
    w.flush().map_err(|e| Error::io(&rd, e))?;
    let mut w = csv::Writer::from_path(rd.join("synthetic_manifest.csv"))?;
    for s in kept {
        w.serialize(SyntheticRow {
            id: s.id.clone(),
            base_id: s.base_id.clone().unwrap_or_default(),
            mask_id: s.mask_id.clone().unwrap_or_default(),
            patient_id: s.patient_id.clone(),
            labels: labels_str(&s.labels),
        })?;
        write_png(rd.join("synthetic").join(format!("{}.png", s.id)), s.side, &s.pixels)?;
    }
    w.flush().map_err(|e| Error::io(&rd, e))?;
    write_json(
        rd.join("auc.json"),
        &serde_json::json!({ "val_macro_auc_before": rec.val_auc_before, "val_macro_auc_after": rec.val_auc_after }),
    )?;
    clf.save(rd.join("checkpoint"))
}

fn load_synthetic(rd: &Path) -> Result<Vec<ImageSample>> {
    let path = rd.join("synthetic_manifest.csv");
    let mut out = Vec::new();
    if !path.exists() {
        return Ok(out);
    }
    let mut r = csv::Reader::from_path(&path)?;
    for row in r.deserialize() {
        let row: SyntheticRow = row?;
        let (side, pixels) = read_png(rd.join("synthetic").join(format!("{}.png", row.id)))?;
        let labels = row
            .labels
            .split(';')
            .map(|v| v.parse::<u8>().map_err(|e| Error::Format(format!("label `{v}`: {e}"))))
            .collect::<Result<Vec<u8>>>()?;
        out.push(ImageSample {
            id: row.id,
            side,
            pixels,
            labels,
            patient_id: row.patient_id,
            provenance: Provenance::Synthetic,
            base_id: Some(row.base_id).filter(|s| !s.is_empty()),
            mask_id: Some(row.mask_id).filter(|s| !s.is_empty()),
        });
    }
    Ok(out)
}

fn resume_state(
    trail_path: &Path,
    d: &RunDir,
    c: usize,
    sc: &ScheduleConfig,
) -> Result<(AlTrail, Classifier, LoopState)> {
    let trail: AlTrail = read_json(trail_path)?;
    if trail.strategy != sc.strategy || trail.top_k_real != sc.top_k_real || trail.keep_per_class != sc.keep_per_class {
        return Err(Error::config(
            "schedule",
            format!(
                "run directory {} was started with a different schedule",
                d.path.display()
            ),
        ));
    }
    let last = trail.rounds.len();
    let clf = Classifier::load(d.path.join(format!("round_{last}")).join("checkpoint"))?;
    if clf.num_classes() != c {
        return Err(Error::Shape(format!(
            "checkpoint has {} classes, corpus {c}",
            clf.num_classes()
        )));
    }
    let mut synthetic = VecDeque::new();
    for r in &trail.rounds {
        if sc.synthetic_mode == SyntheticMode::Replace {
            synthetic.clear();
        }
        synthetic.extend(load_synthetic(&d.path.join(format!("round_{}", r.round)))?);
        while synthetic.len() > sc.synthetic_cap {
            synthetic.pop_front();
        }
    }
    let mut labelled = trail.initial_ids.clone();
    for r in &trail.rounds {
        labelled.extend(r.selected_ids.iter().cloned());
    }
    let st = LoopState {
        labelled,
        synthetic,
        history: trail.val_history(),
    };
    Ok((trail, clf, st))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopping_rule_cases() {
        assert!(stopping_check(&[0.70, 0.70, 0.70, 0.70], 0.001, 3));
        assert!(!stopping_check(&[0.70, 0.75, 0.76, 0.761], 0.001, 3));
        assert!(!stopping_check(&[0.70, 0.70, 0.70], 0.001, 3));
        assert!(stopping_check(&[0.5, 0.9, 0.9005, 0.9, 0.9009], 0.001, 3));
    }
}
