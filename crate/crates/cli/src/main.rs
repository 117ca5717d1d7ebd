use cagan_al::al::{check_trail, run_al, AlResources, AlSettings, RunDir};
use cagan_al::classifier::{evaluate, Classifier, SplitGuard};
use cagan_al::config::{RunConfig, StrategyKind, KEY_DOCS};
use cagan_al::data::Split;
use cagan_al::experiments::{
    label_budget_sweep, real_syn_mix_matrix, synthetic_growth_curve, ExperimentContext, ExperimentKind,
    ExperimentReport, GrowthMode, GrowthSpec,
};
use cagan_al::pipeline::{self, Layout};
use cagan_al::selftest::run_selftest;
use cagan_al::util::{read_json, write_json};
use cagan_al::{Error, Result};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::OnceLock;

#[derive(Parser, Debug)]
#[command(
    name = "cagan-al",
    version,
    about = "Class-aware GAN augmentation inside an active learning loop"
)]
#[command(after_long_help = key_help(), after_help = "Run with --help to list every configuration key.")]
struct Cli {
    /// Flat `key = value` config file (or a frozen config.json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set schedule.top_k_real=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Continue from the last checkpoint in an existing output directory.
    #[arg(long, global = true, conflicts_with = "overwrite")]
    resume: bool,
    /// Replace existing results.
    #[arg(long, global = true)]
    overwrite: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the toy corpus with its patient-level split; prints the corpus hash.
    GenData,
    /// Train the segmenter.
    TrainSeg,
    /// Train the class-aware GAN (and the perceptual feature network if used).
    TrainCagan,
    /// Run the active learning loop under `schedule.strategy`.
    RunAl {
        /// Run name under runs/; defaults to `<strategy>-seed<seed>`.
        #[arg(long)]
        name: Option<String>,
    },
    /// Evaluate the final classifier of a run on one split.
    Eval {
        #[arg(long)]
        name: String,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Test macro AUC of each method under each label budget.
    Sweep,
    /// Train/test matrix over real, synthetic and mixed folds.
    MixMatrix,
    /// Test AUC while only synthetic images are added to a small real pool.
    GrowthCurve,
    /// Print the summary tables of finished experiments.
    Report {
        #[arg(long)]
        experiment: Option<String>,
    },
    /// Run the closed-form example suite.
    Selftest,
}

fn key_help() -> &'static str {
    static HELP: OnceLock<String> = OnceLock::new();
    HELP.get_or_init(|| {
        let mut s = String::from("Configuration keys (default, description):\n");
        for (k, v) in RunConfig::default().flatten() {
            let doc = KEY_DOCS
                .iter()
                .find(|(key, _)| *key == k)
                .map(|(_, d)| *d)
                .unwrap_or("");
            s.push_str(&format!("  {k} = {v}"));
            if !doc.is_empty() {
                s.push_str(&format!("    {doc}"));
            }
            s.push('\n');
        }
        s
    })
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    match &cli.config {
        Some(p) => RunConfig::load(p, &overrides),
        None => RunConfig::from_overrides(&overrides),
    }
}

fn train_seg(cfg: &RunConfig, layout: &Layout, cli: &Cli) -> Result<()> {
    if layout.segmenter().exists() && !cli.overwrite {
        return Err(Error::Exists(layout.segmenter().display().to_string()));
    }
    let corpus = pipeline::open_corpus(layout)?;
    let (seg, metrics) = pipeline::fit_segmenter(cfg, &corpus)?;
    if layout.segmenter().exists() {
        std::fs::remove_dir_all(layout.segmenter()).map_err(|e| Error::io(layout.segmenter(), e))?;
    }
    seg.save(layout.segmenter(), &metrics)?;
    println!("segmenter val dice {:.4}", metrics.val_dice);
    Ok(())
}

fn train_cagan(cfg: &RunConfig, layout: &Layout, cli: &Cli) -> Result<()> {
    let dir = layout.cagan();
    pipeline::prepare_dir(&dir, "weights.json", cli.resume, cli.overwrite)?;
    let corpus = pipeline::open_corpus(layout)?;
    let seg = pipeline::open_segmenter(layout)?;
    let resume = if cli.resume && dir.join("weights.json").exists() {
        let adam = cagan_tensor::AdamConfig {
            lr: cfg.cagan.lr,
            beta1: cfg.cagan.beta1,
            beta2: cfg.cagan.beta2,
            ..Default::default()
        };
        Some(cagan_al::cagan::CaganCheckpoint::load(&dir, Some(adam))?)
    } else {
        None
    };
    let perceptual = if layout.perceptual().join("spec.json").exists() {
        Some(Classifier::load(layout.perceptual())?)
    } else {
        None
    };
    let (ck, feat) = pipeline::fit_cagan(cfg, &corpus, &seg, perceptual, Some(&dir), resume)?;
    ck.save(&dir)?;
    if let Some(f) = feat {
        f.save(layout.perceptual())?;
    }
    cfg.save(dir.join("config.txt"))?;
    if let Some(last) = ck.history.last() {
        println!("cagan trained to iteration {}: {:?}", ck.iter, last);
    }
    Ok(())
}

fn run_name(cfg: &RunConfig, name: &Option<String>) -> String {
    name.clone()
        .unwrap_or_else(|| format!("{}-seed{}", cfg.schedule.strategy.name(), cfg.seed))
}

fn run_al_cmd(cfg: &RunConfig, layout: &Layout, cli: &Cli, name: &Option<String>) -> Result<()> {
    let corpus = pipeline::open_corpus(layout)?;
    let needs_gan = !matches!(cfg.schedule.strategy, StrategyKind::StandardDa);
    let ck = pipeline::try_open_cagan(layout)?;
    if needs_gan && ck.is_none() {
        return Err(Error::Capability(format!(
            "strategy {} needs a CAGAN checkpoint under {}; run train-cagan first",
            cfg.schedule.strategy.name(),
            layout.cagan().display()
        )));
    }
    let seg = if needs_gan {
        Some(pipeline::open_segmenter(layout)?)
    } else {
        None
    };
    let dir = layout.run(&run_name(cfg, name));
    pipeline::prepare_dir(&dir, "trail.json", cli.resume, cli.overwrite)?;
    write_json(dir.join("config.json"), cfg)?;
    let res = AlResources {
        corpus: &corpus,
        segmenter: seg.as_ref(),
        cagan: ck.as_ref(),
    };
    let settings = AlSettings::from_run(cfg);
    let run_dir = RunDir {
        path: dir.clone(),
        resume: cli.resume,
    };
    let out = run_al(&res, None, &settings, cfg.seed, Some(&run_dir))?;
    check_trail(&out.trail, settings.per_class_synthetic())?;
    out.classifier.save(dir.join("final"))?;
    println!(
        "{} rounds, {} labels, stop {:?}, val macro AUC {:.4}",
        out.trail.rounds.len(),
        out.trail.labels_consumed(),
        out.trail.stop_reason,
        out.trail.val_history().last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn eval_cmd(layout: &Layout, cli: &Cli, name: &str, split: &str) -> Result<()> {
    let split = match split {
        "val" => Split::Val,
        "test" => Split::Test,
        other => return Err(Error::config("split", format!("expected val or test, got {other:?}"))),
    };
    let dir = layout.run(name);
    let out = dir.join(format!("eval_{}.json", split.name()));
    if out.exists() && !cli.overwrite {
        return Err(Error::Exists(out.display().to_string()));
    }
    let corpus = pipeline::open_corpus(layout)?;
    let clf = Classifier::load(dir.join("final"))?;
    let report = evaluate(&clf, &corpus, split, &SplitGuard::new(&[Split::Val, Split::Test]))?;
    write_json(&out, &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn experiment(cfg: &RunConfig, layout: &Layout, cli: &Cli, kind: ExperimentKind) -> Result<()> {
    let dir = layout.report(kind.name());
    pipeline::prepare_dir(&dir, "summary.json", false, cli.overwrite)?;
    let corpus = pipeline::open_corpus(layout)?;
    let ck = pipeline::try_open_cagan(layout)?;
    let seg = if layout.segmenter().exists() {
        Some(pipeline::open_segmenter(layout)?)
    } else {
        None
    };
    let settings = AlSettings::from_run(cfg);
    let ctx = ExperimentContext::new(
        &corpus,
        seg.as_ref(),
        ck.as_ref(),
        settings,
        cfg.experiment.epochs,
        cfg.hash(),
    );
    let ex = &cfg.experiment;
    let n_train = corpus.split_samples(Split::Train).len();
    let (report, initial) = match kind {
        ExperimentKind::LabelBudgetSweep => (
            label_budget_sweep(&ctx, &ex.budgets, &ex.methods, &ex.seeds)?,
            ((cfg.schedule.initial_pool_fraction * n_train as f64).round() as usize).max(1),
        ),
        ExperimentKind::RealSynMixMatrix => (real_syn_mix_matrix(&ctx, ex.mix_syn_per_real, &ex.seeds)?, n_train),
        ExperimentKind::SyntheticGrowthCurve => {
            let spec = GrowthSpec {
                initial_per_class: ex.growth_initial_per_class,
                step_per_class: ex.growth_step_per_class,
                steps: ex.growth_steps,
                candidates_per_class: ex.growth_candidates_per_class,
            };
            let r = synthetic_growth_curve(&ctx, &spec, &[GrowthMode::Informative, GrowthMode::Random], &ex.seeds)?;
            (r, ex.growth_initial_per_class * corpus.manifest.num_classes())
        }
    };
    report.write(&dir, n_train, initial)?;
    cfg.save(dir.join("config.txt"))?;
    print_report(&report);
    Ok(())
}

fn print_report(r: &ExperimentReport) {
    println!(
        "{} (config {})",
        r.kind.name(),
        &r.config_hash[..12.min(r.config_hash.len())]
    );
    println!(
        "{:<28} {:>8} {:>6} {:>8} {:>8} {:>8}",
        "condition", "x", "seeds", "median", "q25", "q75"
    );
    let f = |v: Option<f64>| v.map_or("undef".to_string(), |v| format!("{v:.4}"));
    for s in &r.summary {
        println!(
            "{:<28} {:>8.3} {:>6} {:>8} {:>8} {:>8}",
            s.condition,
            s.x,
            s.seeds,
            f(s.median),
            f(s.q25),
            f(s.q75)
        );
    }
    if !r.extras.is_null() {
        println!("{}", serde_json::to_string_pretty(&r.extras).unwrap_or_default());
    }
}

fn report_cmd(layout: &Layout, experiment: &Option<String>) -> Result<()> {
    let kinds = [
        ExperimentKind::LabelBudgetSweep,
        ExperimentKind::RealSynMixMatrix,
        ExperimentKind::SyntheticGrowthCurve,
    ];
    let mut found = false;
    for k in kinds {
        if experiment.as_deref().is_some_and(|e| e != k.name()) {
            continue;
        }
        let p = layout.report(k.name()).join("summary.json");
        if p.exists() {
            let r: ExperimentReport = read_json(&p)?;
            print_report(&r);
            println!();
            found = true;
        }
    }
    if !found {
        return Err(Error::Capability(format!(
            "no finished experiments under {}",
            layout.root.join("reports").display()
        )));
    }
    Ok(())
}

fn selftest() -> Result<()> {
    let results = run_selftest();
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        println!("{} {} ({})", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    println!("{} of {} checks passed", results.len() - failed, results.len());
    if failed > 0 {
        return Err(Error::Guard(format!("{failed} self-test checks failed")));
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    if let Command::Selftest = cli.command {
        return selftest();
    }
    let cfg = load_config(cli)?;
    let layout = Layout::from_config(&cfg);
    match &cli.command {
        Command::GenData => {
            let c = pipeline::gen_data(&cfg, &layout, cli.overwrite)?;
            println!("{}", c.hash());
        }
        Command::TrainSeg => train_seg(&cfg, &layout, cli)?,
        Command::TrainCagan => train_cagan(&cfg, &layout, cli)?,
        Command::RunAl { name } => run_al_cmd(&cfg, &layout, cli, name)?,
        Command::Eval { name, split } => eval_cmd(&layout, cli, name, split)?,
        Command::Sweep => experiment(&cfg, &layout, cli, ExperimentKind::LabelBudgetSweep)?,
        Command::MixMatrix => experiment(&cfg, &layout, cli, ExperimentKind::RealSynMixMatrix)?,
        Command::GrowthCurve => experiment(&cfg, &layout, cli, ExperimentKind::SyntheticGrowthCurve)?,
        Command::Report { experiment } => report_cmd(&layout, experiment)?,
        Command::Selftest => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if matches!(cli.command, Command::Selftest) {
        "warn"
    } else {
        "info"
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
