//! Behaviour of trained models on small toy corpora. One segmenter and one GAN are
//! trained per test binary and shared.

use cagan_al::al::{check_trail, run_al, AlResources, AlSettings};
use cagan_al::cagan::{content_loss, d_cls_accuracy, generate, CaganCheckpoint, LossWeights};
use cagan_al::classifier::{auc, evaluate_samples, train_classifier, Classifier, FinetuneHyper};
use cagan_al::config::{ClassWeighting, DataConfig, LabelMode, RunConfig};
use cagan_al::data::toy::generate_toy_corpus;
use cagan_al::data::{split_by_patient, Corpus, ImageSample, Split};
use cagan_al::experiments::{check_fold_leakage, synthesize_fold, ExperimentContext};
use cagan_al::pipeline::{build_corpus, fit_cagan, fit_segmenter};
use cagan_al::segmenter::{perturb_mask, LatentSource, Segmenter, SegmenterMetrics};
use cagan_al::uncertainty::mc_predict;
use cagan_al::util::median;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::sync::OnceLock;

struct Trained {
    cfg: RunConfig,
    corpus: Corpus,
    seg: Segmenter,
    seg_metrics: SegmenterMetrics,
    gan: CaganCheckpoint,
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let cfg = RunConfig::from_overrides(&[
            "seed=3",
            "data.side=32",
            "data.num_patients=240",
            "data.images_per_patient=5",
            "segmenter.filters=16",
            "segmenter.epochs=5",
            "segmenter.train_images=500",
            "cagan.iters=400",
            "cagan.g_base=16",
            "cagan.d_base=8",
            "cagan.batch=16",
            "cagan.w_perc=0",
            "classifier.widths=[8,16,32]",
            "classifier.epochs=3",
            "classifier.finetune_epochs=1",
        ])
        .unwrap();
        let corpus = build_corpus(&cfg).unwrap();
        let (seg, seg_metrics) = fit_segmenter(&cfg, &corpus).unwrap();
        let (gan, _) = fit_cagan(&cfg, &corpus, &seg, None, None, None).unwrap();
        Trained {
            cfg,
            corpus,
            seg,
            seg_metrics,
            gan,
        }
    })
}

fn own_latent(t: &Trained, s: &ImageSample) -> cagan_al::segmenter::MaskLatent {
    let mask = t.corpus.mask_of(s).unwrap();
    t.seg
        .latent_of_mask(&s.id, mask, LatentSource::GroundTruth, None)
        .unwrap()
}

#[test]
fn segmenter_reaches_validation_dice() {
    let t = trained();
    assert!(t.seg_metrics.val_dice >= 0.90, "val dice {}", t.seg_metrics.val_dice);
    assert!(t.seg_metrics.val_dice > t.seg_metrics.initial_val_dice);
}

#[test]
fn perturbed_masks_are_distinct_and_close_to_their_parent() {
    let t = trained();
    let s = t.corpus.split_samples(Split::Val)[0];
    let parent = own_latent(t, s);
    let kids = perturb_mask(&t.seg, &parent, 0.1, 200, t.cfg.segmenter.control_points, 5).unwrap();
    assert_eq!(kids.len(), 200);
    let distinct: HashSet<&Vec<u8>> = kids.iter().map(|k| &k.mask.data).collect();
    assert_eq!(distinct.len(), 200);
    for k in &kids {
        let iou = k.mask.iou(&parent.mask);
        assert!((0.80..=0.999).contains(&iou), "iou {iou}");
        assert_eq!(k.parent_mask_id.as_deref(), Some(parent.id.as_str()));
    }
    let a = t.seg.latents_of_masks(&[&kids[0].mask, &kids[1].mask]).unwrap();
    assert_ne!(a[0], a[1]);
}

#[test]
fn critic_classifies_held_out_images() {
    let t = trained();
    let val = t.corpus.split_samples(Split::Val);
    let c = t.corpus.manifest.num_classes() as f64;
    let acc = d_cls_accuracy(&t.gan, &val);
    assert!(acc > 1.5 / c, "accuracy {acc}");
}

#[test]
fn same_class_generation_stays_closer_than_class_transfer() {
    let t = trained();
    let c = t.corpus.manifest.num_classes();
    let w = LossWeights {
        w_perc: 0.0,
        ..LossWeights::from(&t.cfg.cagan)
    };
    let (mut same, mut cross) = (Vec::new(), Vec::new());
    for s in t.corpus.split_samples(Split::Val).into_iter().take(40) {
        let z = own_latent(t, s);
        let own = s.primary_class().unwrap();
        for k in 0..c {
            let y = generate(&t.gan, s, &z, k).unwrap();
            let l = content_loss(&s.pixels, &y.pixels, s.side, None, &w, 64).unwrap().total;
            if k == own {
                same.push(l);
            } else {
                cross.push(l);
            }
        }
    }
    assert!(
        median(&same) < median(&cross),
        "same {} cross {}",
        median(&same),
        median(&cross)
    );
}

fn fitted_classifier(t: &Trained) -> Classifier {
    let settings = AlSettings::from_run(&t.cfg);
    let train = t.corpus.split_samples(Split::Train);
    let spec = settings.classifier_spec(32, t.corpus.manifest.num_classes());
    let hyper = FinetuneHyper::from_config(&t.cfg.classifier, 3);
    train_classifier(spec, &train, &hyper, 0).unwrap().0
}

#[test]
fn masked_passes_differ_on_a_trained_net() {
    let t = trained();
    let clf = fitted_classifier(t);
    let s: Vec<&ImageSample> = t.corpus.split_samples(Split::Val).into_iter().take(10).collect();
    for d in mc_predict(&clf, &s, 8, 0.5, 0, false).unwrap() {
        assert!(d.preds.windows(2).any(|p| p[0] != p[1]));
    }
}

fn toy(ratios: Vec<f64>, patients: usize, seed: u64) -> Corpus {
    let cfg = DataConfig {
        num_classes: ratios.len(),
        imbalance_ratios: ratios,
        side: 32,
        label_mode: LabelMode::Exclusive,
        num_patients: patients,
        images_per_patient: 5,
        ..Default::default()
    };
    let mut c = generate_toy_corpus(&cfg, seed).unwrap();
    c.manifest = split_by_patient(&c.manifest, [0.6, 0.2, 0.2], seed).unwrap();
    c
}

fn minority_recall(clf: &Classifier, test: &[&ImageSample], k: usize) -> f64 {
    let p = clf.predict_proba(test).unwrap();
    let (mut hit, mut n) = (0, 0);
    for (s, row) in test.iter().zip(&p) {
        if s.labels[k] == 1 {
            n += 1;
            let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            hit += (arg == k) as usize;
        }
    }
    hit as f64 / n as f64
}

#[test]
fn inverse_class_weights_raise_minority_recall() {
    let c = toy(vec![10.0, 1.0], 220, 8);
    let train = c.split_samples(Split::Train);
    let test = c.split_samples(Split::Test);
    let settings = AlSettings::from_run(&RunConfig::from_overrides(&["classifier.widths=[8,16,32]"]).unwrap());
    let recall = |weights: ClassWeighting| -> f64 {
        let v: Vec<f64> = (0..5)
            .map(|seed| {
                let mut hyper = FinetuneHyper::from_config(&settings.classifier, 6);
                hyper.class_weights = weights;
                let clf = train_classifier(settings.classifier_spec(32, 2), &train, &hyper, seed)
                    .unwrap()
                    .0;
                minority_recall(&clf, &test, 1)
            })
            .collect();
        median(&v)
    };
    let (w, u) = (recall(ClassWeighting::Inverse), recall(ClassWeighting::None));
    assert!(w > u, "weighted {w} unweighted {u}");
}

#[test]
fn untrained_net_is_at_chance_on_balanced_data() {
    let c = toy(vec![1.0; 6], 400, 9);
    let spec = AlSettings::from_run(&RunConfig::default()).classifier_spec(32, 6);
    let clf = Classifier::new(spec, 1).unwrap();
    let all: Vec<&ImageSample> = c.samples.iter().collect();
    let r = evaluate_samples(&clf, &all, "all", &c.manifest.class_names).unwrap();
    let m = r.macro_auc.unwrap();
    assert!((m - 0.5).abs() <= 0.08, "macro AUC {m}");
}

#[test]
fn shuffled_scores_are_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let labels: Vec<u8> = (0..1000).map(|i| (i % 2) as u8).collect();
    let scores: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
    let a = auc(&scores, &labels).unwrap();
    assert!((a - 0.5).abs() <= 0.05, "auc {a}");
}

#[test]
fn cagan_rounds_keep_the_configured_synthetic_and_label_counts() {
    let t = trained();
    let cfg = RunConfig::from_overrides(&[
        "schedule.strategy=\"cagan\"",
        "schedule.top_k_real=16",
        "schedule.gen_per_class=4",
        "schedule.keep_per_class=2",
        "schedule.max_rounds=2",
        "schedule.report_budgets=[]",
        "uncertainty.mc_samples=4",
        "classifier.widths=[8,16]",
        "classifier.epochs=1",
        "classifier.finetune_epochs=1",
    ])
    .unwrap();
    let settings = AlSettings::from_run(&cfg);
    let res = AlResources {
        corpus: &t.corpus,
        segmenter: Some(&t.seg),
        cagan: Some(&t.gan),
    };
    let out = run_al(&res, None, &settings, 0, None).unwrap();
    let trail = &out.trail;
    assert_eq!(trail.rounds.len(), 2);
    check_trail(trail, true).unwrap();
    let c = t.corpus.manifest.num_classes();
    for (r, round) in trail.rounds.iter().enumerate() {
        assert_eq!(round.synthetic_kept.len(), c);
        assert_eq!(round.synthetic_kept.iter().map(Vec::len).sum::<usize>(), c * 2);
        assert_eq!(round.labels_consumed, trail.initial_ids.len() + (r + 1) * 16);
    }
}

#[test]
fn synthetic_folds_stay_with_their_split() {
    let t = trained();
    let ctx = ExperimentContext::new(
        &t.corpus,
        Some(&t.seg),
        Some(&t.gan),
        AlSettings::from_run(&t.cfg),
        1,
        String::new(),
    );
    let train: Vec<&ImageSample> = t.corpus.split_samples(Split::Train).into_iter().take(12).collect();
    let test: Vec<&ImageSample> = t.corpus.split_samples(Split::Test).into_iter().take(12).collect();
    let syn_train = synthesize_fold(&ctx, &train, 2, 0, "tr").unwrap();
    let syn_test = synthesize_fold(&ctx, &test, 1, 0, "te").unwrap();
    assert_eq!(syn_train.len(), 24);
    assert_eq!(syn_test.len(), 12);
    let ids: HashSet<&str> = syn_train.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids.len(), 24);
    let folds = [("train", train.as_slice()), ("test", test.as_slice())];
    check_fold_leakage(&folds, &[("train", &syn_train), ("test", &syn_test)], &t.corpus).unwrap();
    assert!(check_fold_leakage(&folds, &[("test", &syn_train)], &t.corpus).is_err());
}

#[test]
fn full_budget_baseline_is_plain_training() {
    let t = trained();
    let settings = AlSettings::from_run(&t.cfg);
    let ctx = ExperimentContext::new(&t.corpus, None, None, settings.clone(), 2, String::new());
    let train = t.corpus.split_samples(Split::Train);
    let full = ctx.random_budget(1.0, 4);
    assert_eq!(
        full.iter().map(|s| &s.id).collect::<Vec<_>>(),
        train.iter().map(|s| &s.id).collect::<Vec<_>>()
    );
    let a = ctx.train_fresh(&full, 4).unwrap();
    let hyper = FinetuneHyper::from_config(&settings.classifier, 2);
    let b = train_classifier(settings.classifier_spec(32, 6), &train, &hyper, 4)
        .unwrap()
        .0;
    let probe: Vec<&ImageSample> = t.corpus.split_samples(Split::Val).into_iter().take(20).collect();
    assert_eq!(a.predict_proba(&probe).unwrap(), b.predict_proba(&probe).unwrap());
}
