use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use spankey::data::SplitTag;
use spankey::harness::attack::{attack_table, run_attack_suite, BLACKBOX_FOOTER};
use spankey::harness::report::{eval_table, fmt6, write_text};
use spankey::harness::sweep::{run_sweep, sweep_table, SweepCache, SweepSpec};
use spankey::harness::train::{eval_rows, evaluate_protocols, write_run};
use spankey::harness::verify::{run_all, write_checks};
use spankey::harness::{run_training_on, Checkpoint, ExperimentConfig};

#[derive(Parser)]
#[command(name = "spankey", about = "Subspace-key gated networks: training, evaluation, probes and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in config used when `--config` is absent.
    #[arg(long, default_value = "mnist_baseline")]
    preset: String,
    /// Override one field, e.g. `--set optim.lr=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (default: `<output_dir>/<run_id>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::preset(&self.preset)?,
        };
        let cfg = base.with_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| cfg.output_dir.join(&cfg.run_id));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its checkpoint, logs and basis files.
    Train(Common),
    /// Re-evaluate a checkpoint under the three protocols.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default: `<out>/checkpoint.json`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// One-factor-at-a-time sweep over m, injection sites and gamma.
    Sweep(Common),
    /// Probe a trained gate (trains first when no checkpoint is given).
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Monte Carlo and numerical checks of the closed forms; fails on any miss.
    VerifyTheory(Common),
    /// Export the configured train/test splits in the binary dataset format.
    GenData(Common),
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train(c) => train(&c),
        Command::Eval { common, checkpoint } => eval(&common, checkpoint),
        Command::Sweep(c) => sweep(&c),
        Command::Attack { common, checkpoint } => attack(&common, checkpoint),
        Command::VerifyTheory(c) => verify(&c),
        Command::GenData(c) => gen_data(&c),
    }
}

fn train(c: &Common) -> anyhow::Result<ExitCode> {
    let cfg = c.config()?;
    let dir = c.out_dir(&cfg)?;
    let (train, test) = cfg.load_data()?;
    let out = run_training_on(&cfg, &train, &test)?;
    write_run(&out, &dir)?;
    for r in &out.checkpoint.metrics {
        println!(
            "{} top1={} semantic_acc={} reject_mass={}",
            r.protocol.name(),
            fmt6(r.top1),
            fmt6(r.semantic_acc),
            fmt6(r.reject_mass)
        );
    }
    println!("config_hash={} wrote {}", out.checkpoint.config_hash, dir.display());
    Ok(ExitCode::SUCCESS)
}

fn load_checkpoint(c: &Common, path: Option<PathBuf>) -> anyhow::Result<(Checkpoint, ExperimentConfig, PathBuf)> {
    let cfg = c.config()?;
    let dir = c.out_dir(&cfg)?;
    let path = path.unwrap_or_else(|| dir.join("checkpoint.json"));
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = ck.config.with_overrides(&c.overrides)?;
    Ok((ck, cfg, dir))
}

fn eval(c: &Common, checkpoint: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let (ck, cfg, dir) = load_checkpoint(c, checkpoint)?;
    let net = ck.network()?;
    let bank = ck.config.key_bank()?;
    let (_, test) = cfg.load_data()?;
    let reports = evaluate_protocols(&cfg, &net, &bank, &test, ck.epochs_done)?;
    let table = eval_table(&eval_rows(&cfg, SplitTag::Test, &reports)?)?;
    table.write(&dir.join("eval.csv"))?;
    print!("{}", table.to_csv()?);
    Ok(ExitCode::SUCCESS)
}

fn sweep(c: &Common) -> anyhow::Result<ExitCode> {
    let cfg = c.config()?;
    let dir = c.out_dir(&cfg)?;
    let (train, test) = cfg.load_data()?;
    let mut cache = SweepCache::default();
    let mut rows = Vec::new();
    for spec in SweepSpec::from_config(&cfg) {
        rows.extend(run_sweep(&spec, &train, &test, &mut cache)?);
    }
    let table = sweep_table(&rows)?;
    table.write(&dir.join("sweep.csv"))?;
    print!("{}", table.to_csv()?);
    Ok(ExitCode::SUCCESS)
}

fn attack(c: &Common, checkpoint: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let (cfg, net, bank, dir) = match checkpoint {
        Some(p) => {
            let (ck, cfg, dir) = load_checkpoint(c, Some(p))?;
            (cfg, ck.network()?, ck.config.key_bank()?, dir)
        }
        None => {
            let cfg = c.config()?;
            let dir = c.out_dir(&cfg)?;
            let (train, test) = cfg.load_data()?;
            let out = run_training_on(&cfg, &train, &test)?;
            write_run(&out, &dir)?;
            (cfg, out.network, out.bank, dir)
        }
    };
    let (train, test) = cfg.load_data()?;
    let results = run_attack_suite(&net, &cfg.injection, &bank, &train, &test, &cfg.attack, cfg.sub_seed("attack", 0)?)?;
    let table = attack_table(&results, &cfg.hash())?;
    table.write(&dir.join("attack.csv"))?;
    print!("{}", table.to_csv()?);
    println!("# {BLACKBOX_FOOTER}");
    Ok(ExitCode::SUCCESS)
}

fn verify(c: &Common) -> anyhow::Result<ExitCode> {
    let cfg = c.config()?;
    let dir = c.out_dir(&cfg)?;
    let sets = run_all(&cfg.theory, cfg.sub_seed("theory", 0)?)?;
    write_checks(&sets, &dir)?;
    let mut failed = 0;
    for s in &sets {
        for r in &s.rows {
            println!(
                "{} {} [{}] theoretical={:.6e} empirical={:.6e} tolerance={:.6e}",
                if r.pass { "PASS" } else { "FAIL" },
                r.check,
                r.params,
                r.theoretical,
                r.empirical,
                r.tolerance
            );
            failed += usize::from(!r.pass);
        }
    }
    println!("config_hash={} wrote {}", cfg.hash(), dir.display());
    if failed > 0 {
        eprintln!("{failed} theory check(s) failed");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn gen_data(c: &Common) -> anyhow::Result<ExitCode> {
    let cfg = c.config()?;
    let dir = c.out_dir(&cfg)?;
    let (train, test) = cfg.load_data()?;
    for (name, ds) in [("train.bin", &train), ("test.bin", &test)] {
        let p = dir.join(name);
        ds.save(&p)?;
        println!("{} rows={} dim={} classes={}", p.display(), ds.len(), ds.dim(), ds.num_classes());
    }
    write_config(&dir, &cfg)?;
    Ok(ExitCode::SUCCESS)
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    write_text(&dir.join("config.toml"), &cfg.to_toml_string()?)?;
    Ok(())
}
