//! Procedural stand-in for chest radiographs.
//!
//! Every image shows a smooth background, a spine, a heart shadow and two dark
//! elliptical lung fields (the ground-truth mask). Each class adds one kind of
//! finding whose strength is drawn uniformly from `[min_severity, 1]`:
//!
//! | kind | finding |
//! |------|---------|
//! | 0 | patchy infiltrate texture inside both lungs |
//! | 1 | effusion haze rising from the lung bases |
//! | 2 | one to three small bright nodules |
//! | 3 | enlarged heart shadow |
//! | 4 | darkened apex of one lung |
//! | 5 | one large mass |
//!
//! Classes beyond six reuse the kinds restricted to one lung.

use super::{Corpus, DatasetManifest, ImageSample, ManifestEntry, Mask, Provenance};
use crate::config::{DataConfig, LabelMode};
use crate::error::{Error, Result};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

pub const DEFAULT_CLASS_NAMES: [&str; 6] = [
    "infiltration",
    "effusion",
    "nodule",
    "cardiomegaly",
    "pneumothorax",
    "mass",
];

pub fn class_names(c: usize) -> Vec<String> {
    (0..c)
        .map(|i| match DEFAULT_CLASS_NAMES.get(i) {
            Some(n) if i < 6 => n.to_string(),
            _ => format!("class{i}"),
        })
        .collect()
}

#[derive(Clone, Debug)]
struct Anatomy {
    sep: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    base: f64,
    dark: f64,
    heart: (f64, f64, f64, f64),
    phases: [f64; 6],
}

impl Anatomy {
    fn draw(rng: &mut impl Rng) -> Self {
        Anatomy {
            sep: rng.random_range(0.18..0.21),
            cy: rng.random_range(0.45..0.50),
            rx: rng.random_range(0.11..0.14),
            ry: rng.random_range(0.25..0.30),
            base: rng.random_range(0.58..0.70),
            dark: rng.random_range(0.26..0.34),
            heart: (
                rng.random_range(0.03..0.06),
                rng.random_range(0.13..0.17),
                rng.random_range(0.09..0.11),
                rng.random_range(0.07..0.09),
            ),
            phases: std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU)),
        }
    }
}

fn soft(e: f64) -> f64 {
    1.0 / (1.0 + (-(1.0 - e) * 10.0).exp())
}

fn blob(u: f64, v: f64, cu: f64, cv: f64, sigma: f64) -> f64 {
    let d2 = (u - cu).powi(2) + (v - cv).powi(2);
    (-0.5 * d2 / (sigma * sigma)).exp()
}

/// A point inside lung `side` (0 left, 1 right) at normalised elliptical radius <= `r`.
fn point_in_lung(rng: &mut impl Rng, a: &Anatomy, cx: [f64; 2], side: usize, r: f64) -> (f64, f64) {
    let t = rng.random_range(0.0..std::f64::consts::TAU);
    let rr = r * rng.random::<f64>().sqrt();
    (cx[side] + a.rx * rr * t.cos(), a.cy + a.ry * rr * t.sin())
}

struct Finding {
    kind: usize,
    severity: f64,
    lung: Option<usize>,
}

fn render(a: &Anatomy, findings: &[Finding], side: usize, noise: f64, rng: &mut impl Rng) -> (Vec<f32>, Mask) {
    let jitter_u = rng.random_range(-0.01..0.01);
    let jitter_v = rng.random_range(-0.01..0.01);
    let gain = rng.random_range(-0.03..0.03);
    let cx = [0.5 - a.sep + jitter_u, 0.5 + a.sep + jitter_u];
    let cy = a.cy + jitter_v;
    let a = Anatomy { cy, ..a.clone() };
    let mut heart_scale = 1.0;
    // Precomputed lesion geometry.
    let mut blobs: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut effusion: Vec<(usize, f64, f64)> = Vec::new();
    let mut ptx: Vec<(usize, f64)> = Vec::new();
    for f in findings {
        let lungs: Vec<usize> = match f.lung {
            Some(l) => vec![l],
            None => vec![0, 1],
        };
        let s = f.severity;
        match f.kind {
            0 => {
                let n = rng.random_range(10..16);
                for _ in 0..n {
                    let l = *lungs.choose(rng).unwrap();
                    let (u, v) = point_in_lung(rng, &a, cx, l, 0.85);
                    blobs.push((u, v, 0.022, 0.10 * s));
                }
            }
            1 => {
                for &l in &lungs {
                    effusion.push((l, cy + a.ry * (0.75 - 0.55 * s), 0.22 * s));
                }
            }
            2 => {
                let n = rng.random_range(1..4);
                for _ in 0..n {
                    let l = *lungs.choose(rng).unwrap();
                    let (u, v) = point_in_lung(rng, &a, cx, l, 0.7);
                    blobs.push((u, v, 0.016, 0.28 * s));
                }
            }
            3 => heart_scale = 1.0 + 0.45 * s,
            4 => {
                let l = match f.lung {
                    Some(l) => l,
                    None => rng.random_range(0..2),
                };
                ptx.push((l, 0.16 * s));
            }
            _ => {
                let l = *lungs.choose(rng).unwrap();
                let (u, v) = point_in_lung(rng, &a, cx, l, 0.55);
                blobs.push((u, v, 0.045, 0.22 * s));
            }
        }
    }
    let (hdx, hdy, hrx, hry) = a.heart;
    let (hcx, hcy) = (0.5 + hdx + jitter_u, cy + hdy);
    let (hrx, hry) = (hrx * heart_scale, hry * heart_scale);
    let dist = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut pixels = Vec::with_capacity(side * side);
    let mut mask = Vec::with_capacity(side * side);
    let ph = a.phases;
    for y in 0..side {
        for x in 0..side {
            let u = (x as f64 + 0.5) / side as f64;
            let v = (y as f64 + 0.5) / side as f64;
            let tex = 0.025 * ((6.0 * u + ph[0]).cos() + (5.0 * v + ph[1]).cos() + (4.0 * (u + v) + ph[2]).cos());
            let mut val = a.base + gain + tex - 0.08 * v;
            let e: [f64; 2] = std::array::from_fn(|l| ((u - cx[l]) / a.rx).powi(2) + ((v - cy) / a.ry).powi(2));
            let lung_soft = [soft(e[0]), soft(e[1])];
            let in_lung = lung_soft[0].max(lung_soft[1]);
            val -= a.dark * in_lung;
            val += 0.12 * (-0.5 * ((u - 0.5 - jitter_u) / 0.025).powi(2)).exp();
            let he = ((u - hcx) / hrx).powi(2) + ((v - hcy) / hry).powi(2);
            val += 0.22 * soft(he);
            for &(bu, bv, sg, amp) in &blobs {
                val += amp * blob(u, v, bu, bv, sg) * in_lung.max(0.3);
            }
            for &(l, level, amp) in &effusion {
                let rise = 1.0 / (1.0 + (-(v - level) / 0.025).exp());
                val += amp * rise * lung_soft[l];
            }
            for &(l, amp) in &ptx {
                let lateral = if l == 0 { cx[0] - u } else { u - cx[1] };
                let apex = 1.0 / (1.0 + (-((cy - a.ry * 0.1) - v) / 0.03).exp());
                let lat = 1.0 / (1.0 + (-(lateral + 0.02) / 0.02).exp());
                val -= amp * apex * lat * lung_soft[l];
            }
            val += dist.sample(rng);
            let q = (val.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            pixels.push(q as f32);
            mask.push((e[0] < 1.0 || e[1] < 1.0) as u8);
        }
    }
    (pixels, Mask::new(side, mask))
}

/// Exclusive labels: exact largest-remainder quotas over `n` images, shuffled.
fn exclusive_labels(n: usize, ratios: &[f64], rng: &mut impl Rng) -> Vec<usize> {
    let total: f64 = ratios.iter().sum();
    let raw: Vec<f64> = ratios.iter().map(|r| n as f64 * r / total).collect();
    let mut counts: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let mut rem: Vec<(usize, f64)> = raw.iter().enumerate().map(|(i, v)| (i, v - v.floor())).collect();
    rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let missing = n - counts.iter().sum::<usize>();
    for &(i, _) in rem.iter().take(missing) {
        counts[i] += 1;
    }
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect();
    labels.shuffle(rng);
    labels
}

fn multilabel(ratios: &[f64], rate: f64, allow_normal: bool, rng: &mut impl Rng) -> Vec<u8> {
    let max = ratios.iter().cloned().fold(f64::MIN, f64::max);
    loop {
        let v: Vec<u8> = ratios
            .iter()
            .map(|r| rng.random_bool((rate * r / max).min(1.0)) as u8)
            .collect();
        if allow_normal || v.iter().any(|&b| b == 1) {
            return v;
        }
    }
}

/// Generates a labelled corpus with ground-truth lung masks. Deterministic under
/// `seed`; patient `p` draws from its own random stream.
pub fn generate_toy_corpus(cfg: &DataConfig, seed: u64) -> Result<Corpus> {
    if cfg.num_classes < 2 && !(cfg.num_classes == 1 && cfg.allow_normal) {
        return Err(Error::config(
            "data.num_classes",
            "need at least 2 classes (or 1 with data.allow_normal)",
        ));
    }
    if cfg.imbalance_ratios.len() != cfg.num_classes || cfg.imbalance_ratios.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::config(
            "data.imbalance_ratios",
            "need one strictly positive ratio per class",
        ));
    }
    if cfg.side < 32 {
        return Err(Error::config("data.side", "side must be at least 32"));
    }
    if cfg.num_patients == 0 || cfg.images_per_patient == 0 {
        return Err(Error::config("data.num_patients", "need at least one image"));
    }
    let n = cfg.num_patients * cfg.images_per_patient;
    let mut label_rng = ChaCha8Rng::seed_from_u64(seed);
    label_rng.set_stream(u64::MAX);
    let labels: Vec<Vec<u8>> = match cfg.label_mode {
        LabelMode::Exclusive => exclusive_labels(n, &cfg.imbalance_ratios, &mut label_rng)
            .into_iter()
            .map(|c| super::one_hot(c, cfg.num_classes))
            .collect(),
        LabelMode::Multilabel => (0..n)
            .map(|_| {
                multilabel(
                    &cfg.imbalance_ratios,
                    cfg.multilabel_rate,
                    cfg.allow_normal,
                    &mut label_rng,
                )
            })
            .collect(),
    };
    let names = class_names(cfg.num_classes);
    let mut manifest = DatasetManifest {
        class_names: names,
        ..Default::default()
    };
    let mut samples = Vec::with_capacity(n);
    let mut masks = BTreeMap::new();
    let mut k = 0;
    for p in 0..cfg.num_patients {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        let anatomy = Anatomy::draw(&mut rng);
        let patient_id = format!("pat{p:05}");
        for _ in 0..cfg.images_per_patient {
            let lab = &labels[k];
            let findings: Vec<Finding> = lab
                .iter()
                .enumerate()
                .filter(|(_, &b)| b == 1)
                .map(|(c, _)| Finding {
                    kind: c % 6,
                    severity: rng.random_range(cfg.min_severity..=1.0),
                    lung: (c >= 6).then_some((c / 6) % 2),
                })
                .collect();
            let (pixels, mask) = render(&anatomy, &findings, cfg.side, cfg.pixel_noise, &mut rng);
            let id = format!("img{k:06}");
            let mask_id = format!("{id}_mask");
            manifest.entries.push(ManifestEntry {
                id: id.clone(),
                path: format!("images/{id}.png"),
                patient_id: patient_id.clone(),
                labels: lab.clone(),
                mask_path: Some(format!("masks/{id}.png")),
            });
            masks.insert(mask_id.clone(), mask);
            samples.push(ImageSample {
                id,
                side: cfg.side,
                pixels,
                labels: lab.clone(),
                patient_id: patient_id.clone(),
                provenance: Provenance::Real,
                base_id: None,
                mask_id: Some(mask_id),
            });
            k += 1;
        }
    }
    Ok(Corpus {
        manifest,
        samples,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: LabelMode) -> DataConfig {
        DataConfig {
            num_patients: 20,
            images_per_patient: 3,
            side: 32,
            label_mode: mode,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_toy_corpus(&small(LabelMode::Multilabel), 7).unwrap();
        let b = generate_toy_corpus(&small(LabelMode::Multilabel), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        let c = generate_toy_corpus(&small(LabelMode::Multilabel), 8).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn exclusive_quota_counts() {
        let cfg = DataConfig {
            num_classes: 2,
            imbalance_ratios: vec![10.0, 1.0],
            num_patients: 110,
            images_per_patient: 10,
            side: 32,
            label_mode: LabelMode::Exclusive,
            ..Default::default()
        };
        let c = generate_toy_corpus(&cfg, 3).unwrap();
        let d = super::super::class_distribution(c.samples.iter().map(|s| &s.labels[..])).unwrap();
        assert!((d.counts[0] as f64 - 1000.0).abs() <= 30.0, "{:?}", d.counts);
        assert!((d.counts[1] as f64 - 100.0).abs() <= 3.0, "{:?}", d.counts);
    }

    #[test]
    fn samples_are_valid_and_masks_two_lungs() {
        let c = generate_toy_corpus(&small(LabelMode::Exclusive), 1).unwrap();
        for s in &c.samples {
            s.validate(6, false).unwrap();
            let m = c.mask_of(s).unwrap();
            assert_eq!(crate::segmenter::perturb::components(m).len(), 2);
        }
    }

    #[test]
    fn one_class_without_normals_rejected() {
        let cfg = DataConfig {
            num_classes: 1,
            imbalance_ratios: vec![1.0],
            ..small(LabelMode::Multilabel)
        };
        assert!(matches!(generate_toy_corpus(&cfg, 0), Err(Error::Config { .. })));
    }
}
