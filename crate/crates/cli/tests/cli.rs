use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "data.num_patients=60",
    "data.side=32",
    "segmenter.filters=8",
    "segmenter.latent_dim=32",
    "segmenter.epochs=1",
    "classifier.widths=[4,8]",
    "classifier.epochs=1",
    "classifier.finetune_epochs=1",
    "schedule.top_k_real=8",
    "schedule.max_rounds=1",
    "uncertainty.mc_samples=4",
];

fn run(home: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cagan-al"));
    cmd.env("CAGAN_AL_HOME", home).env("RUST_LOG", "warn");
    for s in TINY {
        cmd.args(["--set", s]);
    }
    cmd.args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn gen_data_is_reproducible_and_refuses_to_overwrite() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ha = run(a.path(), &["gen-data", "--seed", "7"]);
    let hb = run(b.path(), &["gen-data", "--seed", "7"]);
    assert!(ha.status.success() && hb.status.success());
    assert_eq!(stdout(&ha), stdout(&hb));
    let again = run(a.path(), &["gen-data", "--seed", "7"]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--overwrite"));
    let forced = run(a.path(), &["gen-data", "--seed", "7", "--overwrite"]);
    assert!(forced.status.success());
    assert_eq!(stdout(&forced), stdout(&ha));
    let other = run(b.path(), &["gen-data", "--seed", "8", "--overwrite"]);
    assert_ne!(stdout(&other), stdout(&ha));
}

#[test]
fn gan_strategies_need_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["gen-data"]).status.success());
    assert!(run(dir.path(), &["train-seg"]).status.success());
    let o = run(dir.path(), &["run-al", "--set", "schedule.strategy=\"cagan\""]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(
        dir.path(),
        &["run-al", "--set", "schedule.strategy=\"standard_da\"", "--name", "da"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("runs/da/trail.json").exists());
    let e = run(dir.path(), &["eval", "--name", "da"]);
    assert!(e.status.success());
    let again = run(dir.path(), &["eval", "--name", "da"]);
    assert_eq!(again.status.code(), Some(1));
}

#[test]
fn bad_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["selftest", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(
        run(dir.path(), &["gen-data", "--set", "data.num_classes=0"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(run(dir.path(), &["train-seg"]).status.code(), Some(1));
}

#[test]
fn help_lists_every_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for (key, _) in cagan_al::config::RunConfig::default().flatten() {
        assert!(text.contains(&key), "--help does not mention {key}");
    }
}
