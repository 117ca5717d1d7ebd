use cagan_al::cagan::loss::quantize;
use cagan_al::cagan::nmi;
use cagan_al::classifier::{auc, AucReport};
use cagan_al::config::{DataConfig, LabelMode, RunConfig};
use cagan_al::data::toy::generate_toy_corpus;
use cagan_al::data::{
    load_corpus, read_manifest, save_corpus, split_by_patient, write_manifest, DatasetManifest, ManifestEntry, Split,
};
use proptest::prelude::*;

fn manifest(sizes: &[usize]) -> DatasetManifest {
    let mut m = DatasetManifest {
        class_names: vec!["a".into(), "b".into()],
        ..Default::default()
    };
    for (p, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            m.entries.push(ManifestEntry {
                id: format!("p{p}-{i}"),
                path: format!("images/p{p}-{i}.png"),
                patient_id: format!("p{p}"),
                labels: vec![(i % 2) as u8, 1 - (i % 2) as u8],
                mask_path: None,
            });
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn patient_split_is_disjoint_and_complete(
        sizes in prop::collection::vec(1usize..6, 3..40),
        seed in any::<u64>(),
    ) {
        let m = manifest(&sizes);
        let s = split_by_patient(&m, [0.7, 0.1, 0.2], seed).unwrap();
        s.check_patient_disjoint().unwrap();
        prop_assert_eq!(s.split_assignment.len(), m.entries.len());
        for split in [Split::Train, Split::Val, Split::Test] {
            prop_assert!(!s.ids_in(split).is_empty());
        }
    }
}

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..80).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..20).prop_map(|v| v as f64 / 20.0), n),
            prop::collection::vec(0u8..2, n),
        )
    })
}

proptest! {
    #[test]
    fn auc_is_invariant_under_monotone_maps((s, l) in scores_and_labels()) {
        let base = auc(&s, &l);
        let mapped: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() + 7.0).collect();
        prop_assert_eq!(auc(&mapped, &l), base);
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        match base {
            Some(a) => prop_assert!((auc(&neg, &l).unwrap() - (1.0 - a)).abs() < 1e-12),
            None => prop_assert!(auc(&neg, &l).is_none()),
        }
    }

    #[test]
    fn nmi_is_symmetric_and_ignores_bin_relabelling(
        x in prop::collection::vec(0usize..4, 4..64),
        y in prop::collection::vec(0usize..4, 64),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let y = &y[..x.len()];
        let level = |b: usize| (b as f32 + 0.5) / 4.0;
        let xf: Vec<f32> = x.iter().map(|&b| level(b)).collect();
        let yf: Vec<f32> = y.iter().map(|&b| level(b)).collect();
        let a = nmi(&xf, &yf, 4).unwrap();
        prop_assert!((a - nmi(&yf, &xf, 4).unwrap()).abs() < 1e-12);
        let xp: Vec<f32> = x.iter().map(|&b| level(perm[b])).collect();
        prop_assert!((a - nmi(&xp, &yf, 4).unwrap()).abs() < 1e-12);
        prop_assert!(xf.iter().zip(&x).all(|(&v, &b)| quantize(v as f64, 4) == b));
    }

    #[test]
    fn manifest_round_trips(sizes in prop::collection::vec(1usize..4, 1..10)) {
        let m = split_by_patient(&manifest(&sizes), [0.7, 0.1, 0.2], 0)
            .unwrap_or_else(|_| manifest(&sizes));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.csv");
        write_manifest(&m, &p).unwrap();
        prop_assert_eq!(read_manifest(&p).unwrap(), m);
    }
}

#[test]
fn multilabel_frequencies_pass_a_chi_square_test() {
    let cfg = DataConfig {
        side: 32,
        label_mode: LabelMode::Multilabel,
        allow_normal: true,
        num_patients: 300,
        images_per_patient: 5,
        ..Default::default()
    };
    let c = generate_toy_corpus(&cfg, 11).unwrap();
    let n = c.samples.len() as f64;
    let max = cfg.imbalance_ratios.iter().copied().fold(0.0, f64::max);
    let mut chi2 = 0.0;
    for (k, r) in cfg.imbalance_ratios.iter().enumerate() {
        let p = cfg.multilabel_rate * r / max;
        let observed = c.samples.iter().filter(|s| s.labels[k] == 1).count() as f64;
        chi2 += (observed - n * p).powi(2) / (n * p * (1.0 - p));
    }
    // 99.9% quantile of chi-square with 6 degrees of freedom.
    assert!(chi2 < 22.46, "chi2 {chi2}");
}

#[test]
fn corpus_round_trips_through_png() {
    let cfg = DataConfig {
        side: 32,
        num_patients: 12,
        images_per_patient: 2,
        ..Default::default()
    };
    let mut c = generate_toy_corpus(&cfg, 3).unwrap();
    c.manifest = split_by_patient(&c.manifest, [0.5, 0.25, 0.25], 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_corpus(&c, dir.path()).unwrap();
    let back = load_corpus(dir.path()).unwrap();
    assert_eq!(back.manifest, c.manifest);
    assert_eq!(back.samples, c.samples);
    assert_eq!(back.masks, c.masks);
    assert_eq!(back.hash(), c.hash());
}

#[test]
fn config_and_report_round_trip() {
    let cfg = RunConfig::from_overrides(&["schedule.top_k_real=7", "classifier.widths=[8,16]"]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.cfg");
    cfg.save(&p).unwrap();
    assert_eq!(RunConfig::load(&p, &[] as &[&str]).unwrap(), cfg);
    let names = vec!["a".to_string(), "b".to_string()];
    let probs = vec![vec![0.9, 0.1], vec![0.3, 0.7], vec![0.6, 0.4]];
    let labels: Vec<&[u8]> = vec![&[1, 0], &[0, 1], &[0, 1]];
    let r = AucReport::from_scores("test", &names, &probs, &labels);
    let back: AucReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
}
