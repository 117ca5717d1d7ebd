//! Stage orchestration shared by the command line and the end-to-end tests.
//!
//! Directory layout under the output root:
//! `data/`, `segmenter/`, `cagan/` (with `perceptual/`), `runs/<name>/`, `reports/<experiment>/`.

use crate::al::{initial_pool_ids, AlSettings};
use crate::cagan::{latent_pool, train_cagan, CaganCheckpoint};
use crate::classifier::{train_classifier, BlockFeatures, Classifier, FinetuneHyper};
use crate::config::RunConfig;
use crate::data::toy::generate_toy_corpus;
use crate::data::{load_corpus, save_corpus, split_by_patient, Corpus, ImageSample, Split};
use crate::error::{Error, Result};
use crate::segmenter::{train_segmenter, with_masks, Segmenter, SegmenterMetrics};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        Layout::new(&cfg.output_root)
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn segmenter(&self) -> PathBuf {
        self.root.join("segmenter")
    }

    pub fn cagan(&self) -> PathBuf {
        self.root.join("cagan")
    }

    pub fn perceptual(&self) -> PathBuf {
        self.cagan().join("perceptual")
    }

    pub fn run(&self, name: &str) -> PathBuf {
        self.root.join("runs").join(name)
    }

    pub fn report(&self, experiment: &str) -> PathBuf {
        self.root.join("reports").join(experiment)
    }
}

/// Refuses to reuse a populated stage directory unless `resume` or `overwrite` is
/// set; `overwrite` clears it.
pub fn prepare_dir(dir: &Path, marker: &str, resume: bool, overwrite: bool) -> Result<()> {
    if dir.join(marker).exists() {
        if overwrite {
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        } else if !resume {
            return Err(Error::Exists(dir.display().to_string()));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Toy corpus with its patient-level split.
pub fn build_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let f = &cfg.data.split_fractions;
    if f.len() != 3 {
        return Err(Error::config(
            "data.split_fractions",
            "need train, val and test fractions",
        ));
    }
    let mut c = generate_toy_corpus(&cfg.data, cfg.seed)?;
    c.manifest = split_by_patient(&c.manifest, [f[0], f[1], f[2]], cfg.seed)?;
    Ok(c)
}

pub fn gen_data(cfg: &RunConfig, layout: &Layout, overwrite: bool) -> Result<Corpus> {
    prepare_dir(&layout.data(), "manifest.csv", false, overwrite)?;
    let c = build_corpus(cfg)?;
    save_corpus(&c, layout.data())?;
    Ok(c)
}

pub fn open_corpus(layout: &Layout) -> Result<Corpus> {
    if !layout.data().join("manifest.csv").exists() {
        return Err(Error::Capability(format!(
            "no corpus under {}; run gen-data first",
            layout.data().display()
        )));
    }
    load_corpus(layout.data())
}

/// Segmenter trained on masked training images, validated on the validation split.
pub fn fit_segmenter(cfg: &RunConfig, corpus: &Corpus) -> Result<(Segmenter, SegmenterMetrics)> {
    let mut train = corpus.split_samples(Split::Train);
    if cfg.segmenter.train_images > 0 {
        train.truncate(cfg.segmenter.train_images);
    }
    let val = corpus.split_samples(Split::Val);
    train_segmenter(
        &with_masks(corpus, &train)?,
        &with_masks(corpus, &val)?,
        &cfg.segmenter,
        cfg.seed,
    )
}

pub fn open_segmenter(layout: &Layout) -> Result<Segmenter> {
    if !layout.segmenter().exists() {
        return Err(Error::Capability(format!(
            "no segmenter under {}; run train-seg first",
            layout.segmenter().display()
        )));
    }
    Segmenter::load(layout.segmenter())
}

/// Open the CAGAN checkpoint if one has been written.
pub fn try_open_cagan(layout: &Layout) -> Result<Option<CaganCheckpoint>> {
    if layout.cagan().join("weights.json").exists() {
        Ok(Some(CaganCheckpoint::load(layout.cagan(), None)?))
    } else {
        Ok(None)
    }
}

/// Images the GAN is trained on: the whole training split or only the initial AL pool.
pub fn gan_training_images<'a>(cfg: &RunConfig, corpus: &'a Corpus) -> Result<Vec<&'a ImageSample>> {
    let train = corpus.split_samples(Split::Train);
    match cfg.cagan.train_pool.as_str() {
        "train" => Ok(train),
        "initial_pool" => {
            let ids: HashSet<String> = initial_pool_ids(&train, cfg.schedule.initial_pool_fraction, cfg.seed)
                .into_iter()
                .collect();
            Ok(train.into_iter().filter(|s| ids.contains(&s.id)).collect())
        }
        other => Err(Error::config("cagan.train_pool", format!("unknown pool {other:?}"))),
    }
}

/// Classifier whose frozen block activations drive the perceptual term.
pub fn fit_perceptual_net(cfg: &RunConfig, images: &[&ImageSample], num_classes: usize) -> Result<Classifier> {
    let settings = AlSettings::from_run(cfg);
    let spec = settings.classifier_spec(images[0].side, num_classes);
    if cfg.cagan.perceptual_block >= spec.widths.len() {
        return Err(Error::config("cagan.perceptual_block", "beyond the classifier depth"));
    }
    let hyper = FinetuneHyper::from_config(&cfg.classifier, cfg.classifier.epochs);
    Ok(train_classifier(
        spec,
        images,
        &hyper,
        rand::Rng::random(&mut crate::util::rng_for(cfg.seed, "perceptual", 0)),
    )?
    .0)
}

/// Trains the CAGAN on latents of the chosen pool. With a positive perceptual weight
/// the feature network is trained first (or reused from `perceptual`).
pub fn fit_cagan(
    cfg: &RunConfig,
    corpus: &Corpus,
    seg: &Segmenter,
    perceptual: Option<Classifier>,
    out: Option<&Path>,
    resume: Option<CaganCheckpoint>,
) -> Result<(CaganCheckpoint, Option<Classifier>)> {
    let images = gan_training_images(cfg, corpus)?;
    if images.is_empty() {
        return Err(Error::Training("empty GAN training pool".into()));
    }
    let c = corpus.manifest.num_classes();
    let items = with_masks(corpus, &images)?;
    let data = latent_pool(
        seg,
        &items,
        3,
        cfg.segmenter.perturb_magnitude,
        cfg.segmenter.control_points,
        cfg.seed,
    )?;
    let feat_net = match perceptual {
        Some(n) => Some(n),
        None if cfg.cagan.w_perc > 0.0 => Some(fit_perceptual_net(cfg, &images, c)?),
        None => None,
    };
    let feats = feat_net.as_ref().map(|classifier| BlockFeatures {
        classifier,
        block: cfg.cagan.perceptual_block,
    });
    let ck = train_cagan(
        &data,
        c,
        cfg.data.label_mode,
        feats.as_ref().map(|f| f as _),
        &cfg.cagan,
        cfg.seed,
        out,
        resume,
    )?;
    Ok((ck, feat_net))
}
