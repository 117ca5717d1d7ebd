//! Closed-form example suite run by the `selftest` command. Every check is
//! cheap: no network in here is trained for more than a few steps.

use crate::al::{
    apply_transform, augment_standard, run_al_with, stopping_check, AlResources, AlSettings, RigidTransform,
};
use crate::cagan::loss::quantize;
use crate::cagan::loss::{critic_input_grads, interpolate};
use crate::cagan::{adv_loss_wgan_gp, cls_loss_fake, cls_loss_real, content_loss, gp_term, nmi, Critic, LossWeights};
use crate::classifier::{auc, auc_pairwise, finetune, AucReport, Classifier, ClassifierSpec, FinetuneHyper};
use crate::config::{
    ClassifierConfig, DataConfig, LabelMode, RunConfig, ScheduleConfig, StrategyKind, UncertaintyConfig,
};
use crate::data::toy::generate_toy_corpus;
use crate::data::{class_distribution, split_by_patient, DatasetManifest, ImageSample, ManifestEntry, Mask, Split};
use crate::error::Error;
use crate::experiments::{synthetic_growth_curve, ExperimentContext, GrowthMode, GrowthSpec};
use crate::segmenter::{perturb_mask, LatentSource, Segmenter, SegmenterSpec};
use crate::uncertainty::{combine_variance, entropy_score, mc_predict, rank_by_informativeness};
use cagan_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn e<T: std::fmt::Display>(x: T) -> String {
    x.to_string()
}

fn small_corpus(seed: u64, patients: usize, per: usize) -> crate::data::Corpus {
    let cfg = DataConfig {
        side: 32,
        label_mode: LabelMode::Exclusive,
        num_patients: patients,
        images_per_patient: per,
        ..Default::default()
    };
    let mut c = generate_toy_corpus(&cfg, seed).expect("toy corpus");
    c.manifest = split_by_patient(&c.manifest, [0.6, 0.2, 0.2], seed).expect("split");
    c
}

fn tiny_spec(mode: LabelMode, c: usize) -> ClassifierSpec {
    ClassifierSpec {
        backbone: "toy_cnn".into(),
        side: 32,
        num_classes: c,
        widths: vec![4, 8],
        label_mode: mode,
        mask_rate: 0.2,
        variance_head: true,
    }
}

fn data_determinism() -> Result<(), String> {
    let a = small_corpus(7, 6, 2);
    let b = small_corpus(7, 6, 2);
    ensure!(a.hash() == b.hash(), "corpus hashes differ");
    ensure!(
        a.samples.iter().zip(&b.samples).all(|(x, y)| x.pixels == y.pixels),
        "pixels differ"
    );
    Ok(())
}

fn data_imbalance_counts() -> Result<(), String> {
    let cfg = DataConfig {
        num_classes: 2,
        imbalance_ratios: vec![10.0, 1.0],
        side: 32,
        label_mode: LabelMode::Exclusive,
        num_patients: 220,
        images_per_patient: 5,
        ..Default::default()
    };
    let c = generate_toy_corpus(&cfg, 3).map_err(e)?;
    let d = class_distribution(c.manifest.entries.iter().map(|m| m.labels.as_slice())).map_err(e)?;
    ensure!(
        (d.counts[0] as f64 - 1000.0).abs() <= 30.0 && (d.counts[1] as f64 - 100.0).abs() <= 3.0,
        "counts {:?}",
        d.counts
    );
    Ok(())
}

fn config_single_class() -> Result<(), String> {
    let err = RunConfig::from_overrides(&["data.num_classes=1", "data.imbalance_ratios=[1]"]).unwrap_err();
    ensure!(matches!(err, Error::Config { .. }), "got {err}");
    Ok(())
}

fn manifest(patients: usize, per: usize) -> DatasetManifest {
    let mut m = DatasetManifest {
        class_names: vec!["a".into(), "b".into()],
        ..Default::default()
    };
    for p in 0..patients {
        for i in 0..per {
            m.entries.push(ManifestEntry {
                id: format!("p{p}i{i}"),
                path: String::new(),
                patient_id: format!("p{p}"),
                labels: vec![1, 0],
                mask_path: None,
            });
        }
    }
    m
}

fn split_forced() -> Result<(), String> {
    let s = split_by_patient(&manifest(3, 4), [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 0).map_err(e)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let ids = s.ids_in(split);
        let pats: std::collections::HashSet<&str> = ids
            .iter()
            .map(|i| s.entries.iter().find(|x| &x.id == i).unwrap().patient_id.as_str())
            .collect();
        ensure!(pats.len() == 1, "{} has {} patients", split.name(), pats.len());
    }
    Ok(())
}

fn split_determinism() -> Result<(), String> {
    let m = manifest(100, 10);
    let a = split_by_patient(&m, [0.7, 0.1, 0.2], 5).map_err(e)?;
    let b = split_by_patient(&m, [0.7, 0.1, 0.2], 5).map_err(e)?;
    ensure!(a.split_assignment == b.split_assignment, "assignments differ");
    a.check_patient_disjoint().map_err(e)
}

fn class_distribution_hand() -> Result<(), String> {
    let a = [1u8, 0];
    let ab = [1u8, 1];
    let d = class_distribution([&a[..], &ab[..]]).map_err(e)?;
    ensure!(d.counts == [2, 1] && d.fractions == [1.0, 0.5], "{d:?}");
    let d = class_distribution([&a[..], &a[..]]).map_err(e)?;
    ensure!(d.fractions == [1.0, 0.0], "{d:?}");
    Ok(())
}

fn segmenter_latents() -> Result<(), String> {
    let seg = Segmenter::new(SegmenterSpec::new(32, 4, 8), 0).map_err(e)?;
    let c = small_corpus(1, 3, 1);
    let s = &c.samples[0];
    let a = seg.latent_of_image(s).map_err(e)?;
    let b = seg.latent_of_image(s).map_err(e)?;
    ensure!(a.z == b.z, "latent not deterministic");
    let zero = ImageSample {
        pixels: vec![0.0; 32 * 32],
        ..s.clone()
    };
    let z = seg.latent_of_image(&zero).map_err(e)?;
    ensure!(z.z.iter().all(|v| v.is_finite()), "non-finite latent");
    ensure!(z.mask.data.iter().all(|&v| v <= 1), "mask not binary");
    let mut m1 = Mask::new(32, vec![0; 1024]);
    let mut m2 = Mask::new(32, vec![0; 1024]);
    for y in 4..12 {
        for x in 4..12 {
            m1.data[y * 32 + x] = 1;
            m2.data[(y + 16) * 32 + x + 16] = 1;
        }
    }
    let zs = seg.latents_of_masks(&[&m1, &m2]).map_err(e)?;
    let d: f32 = zs[0].iter().zip(&zs[1]).map(|(a, b)| (a - b).powi(2)).sum();
    ensure!(d > 0.0, "disjoint masks share a latent");
    Ok(())
}

fn perturb_cases() -> Result<(), String> {
    let seg = Segmenter::new(SegmenterSpec::new(32, 4, 8), 0).map_err(e)?;
    let mut m = Mask::new(32, vec![0; 1024]);
    for y in 8..24 {
        for x in 6..14 {
            m.data[y * 32 + x] = 1;
        }
    }
    let parent = seg
        .latent_of_mask("m", &m, LatentSource::GroundTruth, None)
        .map_err(e)?;
    let same = perturb_mask(&seg, &parent, 0.0, 3, 12, 0).map_err(e)?;
    ensure!(same.iter().all(|p| p.mask == m), "zero magnitude changed the mask");
    let empty = seg
        .latent_of_mask("e", &Mask::new(32, vec![0; 1024]), LatentSource::GroundTruth, None)
        .map_err(e)?;
    ensure!(
        matches!(perturb_mask(&seg, &empty, 0.1, 3, 12, 0), Err(Error::Domain(_))),
        "empty mask accepted"
    );
    Ok(())
}

/// `D(x) = a * sum(x)` for inputs of any width.
struct LinearCritic(f64);

impl Critic<f64> for LinearCritic {
    fn score(&self, g: &mut Graph<f64>, x: Var) -> Var {
        let n = g.shape(x)[0];
        let per: usize = g.shape(x)[1..].iter().product();
        let m = g.mean_per_sample(x);
        let s = g.scale(m, self.0 * per as f64);
        g.reshape(s, &[n])
    }
}

fn adversarial_cases() -> Result<(), String> {
    let w = LossWeights::default();
    let v = adv_loss_wgan_gp(&[0.3, -0.2], &[0.3, -0.2], 0.0, &w).map_err(e)?;
    ensure!(v == 0.0, "equal maps give {v}");
    // Unit-norm gradient: D(x) = sum(x) / sqrt(4) over 4 pixels.
    let x = Tensor::new([3, 1, 2, 2], (0..12).map(|v| v as f64 * 0.1).collect());
    let g = critic_input_grads(&LinearCritic(0.5), &[], x);
    ensure!(gp_term(&g).abs() < 1e-6, "unit-norm penalty {}", gp_term(&g));
    // D(x) = 2x in one dimension, real 1, fake 0.
    let real = Tensor::new([1, 1, 1, 1], vec![1.0]);
    let fake = Tensor::new([1, 1, 1, 1], vec![0.0]);
    let xh = interpolate(&real, &fake, &[0.37]);
    let gp = gp_term(&critic_input_grads(&LinearCritic(2.0), &[], xh));
    let adv = adv_loss_wgan_gp(&[2.0], &[0.0], gp, &LossWeights { lambda_gp: 10.0, ..w }).map_err(e)?;
    ensure!(close(adv, -8.0, 1e-9), "adv {adv}");
    Ok(())
}

fn class_loss_cases() -> Result<(), String> {
    let sure = Tensor::new([1, 3], vec![60.0, -60.0, -60.0]);
    let v = cls_loss_real(&sure, &[vec![1, 0, 0]], LabelMode::Exclusive).map_err(e)?;
    ensure!(v.abs() < 1e-12, "confident correct loss {v}");
    let u = Tensor::new([2, 4], vec![0.0; 8]);
    let labels = vec![vec![0, 0, 1, 0], vec![1, 0, 0, 0]];
    let v = cls_loss_real(&u, &labels, LabelMode::Exclusive).map_err(e)?;
    ensure!(close(v, 4f64.ln(), 1e-12), "uniform exclusive {v}");
    let f = cls_loss_fake(&u, &labels, LabelMode::Exclusive).map_err(e)?;
    ensure!(f == v, "real and fake kernels differ");
    let m = cls_loss_real(&u, &[vec![1, 0, 1, 0], vec![0, 0, 0, 1]], LabelMode::Multilabel).map_err(e)?;
    ensure!(close(m, 2f64.ln(), 1e-12), "multilabel {m}");
    let g = cls_loss_fake(&sure, &[vec![1, 0, 0]], LabelMode::Exclusive).map_err(e)?;
    ensure!(g.abs() < 1e-12, "confident generated loss {g}");
    Ok(())
}

fn content_cases() -> Result<(), String> {
    let x: Vec<f32> = (0..32 * 32).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
    let w = LossWeights::default();
    let t = content_loss(&x, &x, 32, None, &w, 64).map_err(e)?;
    ensure!(t.perc == 0.0 && t.mse == 0.0, "{t:?}");
    ensure!(close(t.total, 1.0 / (2.0 + 1e-4), 1e-12), "identity total {}", t.total);
    let k = vec![0.4f32; 32 * 32];
    let t = content_loss(&k, &k, 32, None, &w, 64).map_err(e)?;
    ensure!(t.total.is_finite() && t.mse == 0.0, "constant case {t:?}");
    Ok(())
}

/// Entropies from counts of every (a, b) bin pair, found by scanning all pixels per pair.
fn nmi_oracle(x: &[f32], y: &[f32], bins: usize) -> f64 {
    let n = x.len() as f64;
    let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    let (mut hx, mut hy, mut hxy) = (0.0, 0.0, 0.0);
    for a in 0..bins {
        let cx = x.iter().filter(|&&v| quantize(v as f64, bins) == a).count() as f64;
        let cy = y.iter().filter(|&&v| quantize(v as f64, bins) == a).count() as f64;
        hx += h(cx / n);
        hy += h(cy / n);
        for b in 0..bins {
            let c = x
                .iter()
                .zip(y)
                .filter(|(&u, &v)| quantize(u as f64, bins) == a && quantize(v as f64, bins) == b)
                .count() as f64;
            hxy += h(c / n);
        }
    }
    if hxy <= 0.0 {
        0.0
    } else {
        (hx + hy) / hxy
    }
}

fn nmi_oracle_check() -> Result<(), String> {
    let x = [
        0.1f32, 0.2, 0.7, 0.9, 0.1, 0.6, 0.6, 0.2, 0.8, 0.3, 0.3, 0.9, 0.4, 0.1, 0.7, 0.5,
    ];
    let y = [
        0.9f32, 0.2, 0.7, 0.1, 0.1, 0.6, 0.4, 0.2, 0.8, 0.3, 0.7, 0.9, 0.4, 0.6, 0.2, 0.5,
    ];
    let a = nmi(&x, &y, 2).map_err(e)?;
    let b = nmi_oracle(&x, &y, 2);
    ensure!(close(a, b, 1e-12), "{a} vs oracle {b}");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let x: Vec<f32> = (0..36).map(|_| rng.random()).collect();
        let y: Vec<f32> = (0..36).map(|_| rng.random()).collect();
        let a = nmi(&x, &y, 4).map_err(e)?;
        ensure!(close(a, nmi_oracle(&x, &y, 4), 1e-12), "random case {a}");
    }
    Ok(())
}

fn variance_cases() -> Result<(), String> {
    let v = combine_variance(&[vec![0.0], vec![2.0]], &[vec![0.0], vec![0.0]]).map_err(e)?;
    ensure!(close(v[0], 1.0, 1e-12), "hand case {}", v[0]);
    let v = combine_variance(&vec![vec![0.7]; 6], &vec![vec![0.0]; 6]).map_err(e)?;
    ensure!(v[0].abs() < 1e-12, "zero spread {}", v[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let t = rng.random_range(2..12);
        let p: Vec<Vec<f64>> = (0..t).map(|_| vec![rng.random(), rng.random()]).collect();
        let s: Vec<Vec<f64>> = (0..t)
            .map(|_| vec![rng.random::<f64>() * 0.1, rng.random::<f64>() * 0.1])
            .collect();
        let v = combine_variance(&p, &s).map_err(e)?;
        for k in 0..2 {
            let m = p.iter().map(|r| r[k]).sum::<f64>() / t as f64;
            let pop = p.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / t as f64;
            let a = s.iter().map(|r| r[k]).sum::<f64>() / t as f64;
            ensure!(close(v[k], pop + a, 1e-12), "oracle mismatch {} vs {}", v[k], pop + a);
        }
    }
    Ok(())
}

fn ranking_cases() -> Result<(), String> {
    let s = vec![("a".to_string(), 0.9), ("b".to_string(), 0.1), ("c".to_string(), 0.5)];
    let r = rank_by_informativeness(&s, 2, 0).map_err(e)?;
    ensure!(r.ids == ["a", "c"], "{:?}", r.ids);
    let eq: Vec<(String, f64)> = (0..10).map(|i| (format!("s{i}"), 0.3)).collect();
    let a = rank_by_informativeness(&eq, 4, 9).map_err(e)?;
    let b = rank_by_informativeness(&eq, 4, 9).map_err(e)?;
    ensure!(a.ids == b.ids, "tie order changed");
    let t = rank_by_informativeness(&s, 5, 0).map_err(e)?;
    ensure!(t.truncated && t.ids.len() == 3, "truncation flag");
    Ok(())
}

fn entropy_cases() -> Result<(), String> {
    ensure!(
        entropy_score(&[0.0, 1.0, 0.0, 0.0], LabelMode::Exclusive).map_err(e)? == 0.0,
        "one-hot"
    );
    ensure!(
        close(
            entropy_score(&[0.25; 4], LabelMode::Exclusive).map_err(e)?,
            4f64.ln(),
            1e-12
        ),
        "uniform"
    );
    ensure!(
        close(
            entropy_score(&[0.5; 4], LabelMode::Multilabel).map_err(e)?,
            2f64.ln(),
            1e-12
        ),
        "binary"
    );
    Ok(())
}

fn mc_cases() -> Result<(), String> {
    let c = small_corpus(2, 4, 2);
    let clf = Classifier::new(tiny_spec(LabelMode::Exclusive, 6), 0).map_err(e)?;
    let s: Vec<&ImageSample> = c.samples.iter().take(3).collect();
    let d = mc_predict(&clf, &s, 5, 0.0, 1, true).map_err(e)?;
    ensure!(
        d.iter().all(|m| m.preds.windows(2).all(|w| w[0] == w[1])),
        "passes differ at rate 0"
    );
    let a = mc_predict(&clf, &s, 5, 0.3, 1, false).map_err(e)?;
    let b = mc_predict(&clf, &s, 5, 0.3, 1, false).map_err(e)?;
    ensure!(a == b, "pass sequence not reproducible");
    Ok(())
}

fn classifier_cases() -> Result<(), String> {
    let c = small_corpus(3, 6, 2);
    let mut clf = Classifier::new(tiny_spec(LabelMode::Exclusive, 6), 4).map_err(e)?;
    let before = clf.try_clone().map_err(e)?;
    let s: Vec<&ImageSample> = c.samples.iter().collect();
    let hyper = FinetuneHyper::from_config(&ClassifierConfig::default(), 0);
    finetune(&mut clf, &s, &hyper, 0).map_err(e)?;
    ensure!(
        clf.predict_proba(&s).map_err(e)? == before.predict_proba(&s).map_err(e)?,
        "zero epochs changed the model"
    );
    let dup = vec![s[0], s[0], s[1]];
    let p = clf.predict_proba(&dup).map_err(e)?;
    ensure!(p[0] == p[1], "duplicate rows differ");
    ensure!(
        p.iter().all(|r| close(r.iter().sum::<f64>(), 1.0, 1e-6)),
        "rows do not sum to one"
    );
    Ok(())
}

fn auc_cases() -> Result<(), String> {
    ensure!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]) == Some(1.0), "separated");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let n = rng.random_range(2..60);
        let s: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
        let l: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        ensure!(auc(&s, &l) == auc_pairwise(&s, &l), "rank AUC differs from pairwise");
        let s2: Vec<f64> = s.iter().chain(&s).copied().collect();
        let l2: Vec<u8> = l.iter().chain(&l).copied().collect();
        ensure!(auc(&s2, &l2) == auc(&s, &l), "duplication changed the AUC");
    }
    let names = vec!["a".to_string(), "b".to_string()];
    let probs = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4]];
    let labels: Vec<&[u8]> = vec![&[1, 0], &[1, 0], &[1, 0]];
    let r = AucReport::from_scores("x", &names, &probs, &labels);
    ensure!(
        r.per_class == [None, None] && r.macro_auc.is_none(),
        "absent class not flagged"
    );
    let labels: Vec<&[u8]> = vec![&[1, 0], &[0, 1], &[1, 0]];
    let r = AucReport::from_scores("x", &names, &probs, &labels);
    let back: AucReport = serde_json::from_str(&serde_json::to_string(&r).map_err(e)?).map_err(e)?;
    ensure!(back == r, "report does not round-trip");
    Ok(())
}

fn augment_cases() -> Result<(), String> {
    let c = small_corpus(4, 16, 2);
    let s: Vec<&ImageSample> = c.samples.iter().take(32).collect();
    ensure!(
        apply_transform(&s[0].pixels, 32, RigidTransform::IDENTITY) == s[0].pixels,
        "identity transform changed pixels"
    );
    let out = augment_standard(&s, 5, 1).map_err(e)?;
    ensure!(out.len() == 160, "{} outputs", out.len());
    for o in &out {
        let b = s
            .iter()
            .find(|x| Some(&x.id) == o.base_id.as_ref())
            .ok_or("missing base")?;
        ensure!(o.labels == b.labels, "labels changed for {}", o.id);
    }
    Ok(())
}

fn stopping_cases() -> Result<(), String> {
    ensure!(stopping_check(&[0.70, 0.70, 0.70, 0.70], 0.001, 3), "flat history");
    ensure!(!stopping_check(&[0.70, 0.75, 0.76, 0.761], 0.001, 3), "rising history");
    ensure!(!stopping_check(&[0.70, 0.70], 0.001, 3), "short history");
    Ok(())
}

fn al_settings(strategy: StrategyKind, max_rounds: usize) -> AlSettings {
    AlSettings {
        schedule: ScheduleConfig {
            strategy,
            initial_pool_fraction: 0.3,
            top_k_real: 3,
            gen_per_class: 2,
            keep_per_class: 1,
            max_rounds,
            report_budgets: vec![],
            ..Default::default()
        },
        uncertainty: UncertaintyConfig {
            mc_samples: 4,
            ..Default::default()
        },
        classifier: ClassifierConfig {
            widths: vec![4, 8],
            epochs: 1,
            finetune_epochs: 1,
            ..Default::default()
        },
        label_mode: LabelMode::Exclusive,
        perturb_magnitude: 0.1,
        control_points: 12,
    }
}

fn al_cases() -> Result<(), String> {
    let c = small_corpus(5, 12, 3);
    let res = AlResources {
        corpus: &c,
        segmenter: None,
        cagan: None,
    };
    let init = Classifier::new(tiny_spec(LabelMode::Exclusive, 6), 0).map_err(e)?;
    let probe: Vec<&ImageSample> = c.samples.iter().take(4).collect();
    let p0 = init.predict_proba(&probe).map_err(e)?;
    let mut flat = |_: &Classifier| Ok(0.7);
    let out = run_al_with(
        &res,
        Some(init),
        &al_settings(StrategyKind::StandardDa, 0),
        0,
        None,
        &mut flat,
    )
    .map_err(e)?;
    ensure!(out.trail.rounds.is_empty(), "rounds ran with max_rounds 0");
    ensure!(
        out.classifier.predict_proba(&probe).map_err(e)? == p0,
        "initial classifier changed"
    );
    let settings = al_settings(StrategyKind::StandardDa, 20);
    let w = settings.schedule.stop_window;
    let out = run_al_with(&res, None, &settings, 0, None, &mut flat).map_err(e)?;
    ensure!(
        out.trail.rounds.len() == w,
        "stopped after {} rounds, window {w}",
        out.trail.rounds.len()
    );
    let err = run_al_with(&res, None, &al_settings(StrategyKind::Cagan, 3), 0, None, &mut flat);
    ensure!(matches!(err, Err(Error::Capability(_))), "missing CAGAN accepted");
    Ok(())
}

fn growth_zero_steps() -> Result<(), String> {
    let c = small_corpus(6, 30, 3);
    let ctx = ExperimentContext::new(&c, None, None, al_settings(StrategyKind::Cagan, 1), 1, String::new());
    let spec = GrowthSpec {
        initial_per_class: 2,
        step_per_class: 1,
        steps: 0,
        candidates_per_class: 1,
    };
    let r = synthetic_growth_curve(&ctx, &spec, &[GrowthMode::Informative], &[0]).map_err(e)?;
    let pts = r.values_of("informative", 0.0);
    ensure!(
        r.results.iter().filter(|x| x.condition == "informative").count() == 1,
        "more than one point"
    );
    let pool = crate::experiments::class_stratified_pool(&c, 2, 0);
    let base = ctx.train_fresh(&pool, 0).map_err(e)?;
    let test = c.split_samples(Split::Test);
    let b = crate::classifier::evaluate_samples(&base, &test, "test", &c.manifest.class_names).map_err(e)?;
    ensure!(
        pts.first().map(|p| p.1) == b.macro_auc,
        "point differs from the small-pool baseline"
    );
    Ok(())
}

const CHECKS: &[(&str, Check)] = &[
    ("corpus generation is deterministic", data_determinism),
    ("10:1 class counts", data_imbalance_counts),
    ("single class without normals is rejected", config_single_class),
    ("three patients fill three splits", split_forced),
    ("patient split is deterministic and disjoint", split_determinism),
    ("class distribution hand counts", class_distribution_hand),
    ("segmenter latents", segmenter_latents),
    ("mask perturbation edge cases", perturb_cases),
    ("adversarial loss and gradient penalty", adversarial_cases),
    ("class loss closed forms", class_loss_cases),
    ("content loss identity and constant cases", content_cases),
    ("NMI against brute-force oracle", nmi_oracle_check),
    ("predictive variance", variance_cases),
    ("informativeness ranking", ranking_cases),
    ("entropy closed forms", entropy_cases),
    ("Monte-Carlo passes", mc_cases),
    ("classifier contracts", classifier_cases),
    ("AUC oracle and report", auc_cases),
    ("standard augmentation", augment_cases),
    ("stopping rule", stopping_cases),
    ("active learning loop mechanics", al_cases),
    ("growth curve with zero steps", growth_zero_steps),
];

/// Runs every check; panics inside a check count as failures.
pub fn run_selftest() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, f)| {
            let t0 = Instant::now();
            let r = std::panic::catch_unwind(f).unwrap_or_else(|p| {
                Err(p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into()))
            });
            CheckResult {
                name,
                passed: r.is_ok(),
                detail: match r {
                    Ok(()) => format!("{:.2}s", t0.elapsed().as_secs_f64()),
                    Err(m) => m,
                },
            }
        })
        .collect()
}
