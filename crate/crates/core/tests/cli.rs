use std::path::Path;
use std::process::{Command, Output};

use spankey::data::Dataset;
use spankey::harness::Checkpoint;

const SMALL: [&str; 8] = [
    "--set",
    "epochs=2",
    "--set",
    "dataset.synthetic.n=300",
    "--set",
    "network.hidden=[12]",
    "--set",
    "run_id=\"cli\"",
];

fn spankey(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spankey"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn with_small<'a>(cmd: &'a str) -> Vec<&'a str> {
    let mut v = vec![cmd, "--preset", "synthetic_mul"];
    v.extend_from_slice(&SMALL);
    v
}

#[test]
fn gen_data_writes_loadable_splits() {
    let dir = tempfile::tempdir().unwrap();
    ok(&spankey(&with_small("gen-data"), dir.path()));
    let train = Dataset::load(&dir.path().join("train.bin")).unwrap();
    let test = Dataset::load(&dir.path().join("test.bin")).unwrap();
    assert_eq!((train.len(), test.len()), (240, 60));
}

#[test]
fn train_then_eval_reproduces_the_test_rows() {
    let dir = tempfile::tempdir().unwrap();
    ok(&spankey(&with_small("train"), dir.path()));
    for f in ["checkpoint.json", "epochs.csv", "eval.csv", "config.toml", "basis_site0.bin"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let trained = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    let header = trained.lines().next().unwrap();
    assert!(header.starts_with("run_id,protocol,top1,semantic_acc,reject_mass,mean_entropy,aux_reject_mean,seed"));
    let test_rows: Vec<&str> = trained.lines().filter(|l| l.contains(",test,")).collect();
    assert_eq!(test_rows.len(), 3);

    let eval_dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("checkpoint.json");
    let stdout = ok(&spankey(&["eval", "--preset", "synthetic_mul", "--checkpoint", ck.to_str().unwrap()], eval_dir.path()));
    let again: Vec<&str> = stdout.lines().skip(1).collect();
    assert_eq!(again, test_rows);
    assert_eq!(Checkpoint::load(&ck).unwrap().epochs_done, 2);
}

#[test]
fn config_file_and_overrides_compose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    let text = spankey::harness::ExperimentConfig::preset("synthetic_add").unwrap().to_toml_string().unwrap();
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("run");
    let args = ["gen-data", "--config", cfg.to_str().unwrap(), "--set", "dataset.synthetic.n=100"];
    ok(&spankey(&args, &out));
    let written = std::fs::read_to_string(out.join("config.toml")).unwrap();
    let back = spankey::harness::ExperimentConfig::from_toml_str(&written).unwrap();
    assert_eq!(back.dataset.synthetic.n, 100);
    assert_eq!(back.injection.gamma, 2.0);
}

#[test]
fn verify_theory_passes_and_writes_one_csv_per_check() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&spankey(
        &["verify-theory", "--set", "theory.flip_draws=200000", "--set", "theory.sandwich_instances=9"],
        dir.path(),
    ));
    assert!(!stdout.contains("FAIL"));
    let csvs = std::fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "csv")).count();
    assert_eq!(csvs, 6);
}

#[test]
fn verify_theory_exits_nonzero_on_a_failed_check() {
    let dir = tempfile::tempdir().unwrap();
    let o = spankey(&["verify-theory", "--set", "theory.beta_draws=3"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn bad_override_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = spankey(&["train", "--preset", "synthetic_add", "--set", "optim.no_such_field=1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = spankey(&["train", "--preset", "no_such_preset"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
