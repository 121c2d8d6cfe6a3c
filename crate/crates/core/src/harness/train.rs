use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::report::{eval_table, fmt6, write_json, EvalRow, Table};
use crate::data::{Dataset, SplitTag};
use crate::deny::{evaluate, total_loss, EvalReport, Protocol};
use crate::injection::KeyBank;
use crate::nn::{sgd_step, HeadKind, Network, OptimState};
use crate::rng::{derived, SpanRng};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "spankey-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub lambda_eff: f64,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_deny: f64,
    /// Empty on epochs that were not evaluated.
    pub reports: Vec<(SplitTag, EvalReport)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub layer_dims: Vec<usize>,
    pub head: HeadKind,
    /// Row-major parameters in `Network::param_slices` order.
    pub params: Vec<f64>,
    pub optim: OptimState,
    pub rng: SpanRng,
    pub epochs_done: usize,
    /// Final test-split reports for the three protocols.
    pub metrics: Vec<EvalReport>,
}

impl Checkpoint {
    pub fn network(&self) -> Result<Network> {
        let net = Network::from_flat(self.config.network.clone(), &self.params)?;
        if net.layer_dims() != self.layer_dims || net.head() != self.head {
            return Err(Error::Format("checkpoint layer_dims / head disagree with its config".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a checkpoint: format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", ck.version)));
        }
        if ck.config.hash() != ck.config_hash {
            return Err(Error::Format("checkpoint config hash mismatch".into()));
        }
        Ok(ck)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub bank: KeyBank,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn final_report(&self, protocol: Protocol) -> &EvalReport {
        self.checkpoint.metrics.iter().find(|r| r.protocol == protocol).expect("all protocols evaluated")
    }
}

fn split_name(s: SplitTag) -> &'static str {
    match s {
        SplitTag::Train => "train",
        SplitTag::Test => "test",
    }
}

/// Three-protocol evaluation with streams derived from the config seed,
/// so re-evaluating a checkpoint reproduces its metrics exactly.
pub fn evaluate_protocols(
    cfg: &ExperimentConfig,
    net: &Network,
    bank: &KeyBank,
    data: &Dataset,
    epoch: usize,
) -> Result<Vec<EvalReport>> {
    let limited;
    let data = match (data.split(), cfg.train_eval_batches) {
        (SplitTag::Train, Some(b)) => {
            limited = data.head(b * cfg.eval_batch_size)?;
            &limited
        }
        _ => data,
    };
    Protocol::ALL
        .iter()
        .map(|&p| {
            let label = format!("eval-{}-{}", split_name(data.split()), p.name());
            let mut rng = derived(cfg.seed()?, &label, epoch as u64);
            evaluate(net, &cfg.injection, bank, data, p, cfg.eval_batch_size, &mut rng)
        })
        .collect()
}

/// Trains per the config and evaluates the three protocols on both splits.
pub fn run_training(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let (train, test) = cfg.load_data()?;
    run_training_on(cfg, &train, &test)
}

pub fn run_training_on(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    let mut init_rng = derived(seed, "init", 0);
    let mut net = Network::new(cfg.network.clone(), &mut init_rng)?;
    let bank = cfg.key_bank()?;
    let mut opt = OptimState::new(&net, cfg.optim.clone());
    let mut rng = derived(seed, "train", 0);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last_test = None;

    for epoch in 0..cfg.epochs {
        opt.epoch = epoch;
        order.shuffle(&mut rng);
        let (mut loss, mut ce, mut deny, mut lambda_eff) = (0.0, 0.0, 0.0, 0.0);
        let batches = order.chunks(cfg.batch_size).collect::<Vec<_>>();
        for (step, idx) in batches.iter().enumerate() {
            let (x, y) = train.gather(idx);
            let out = total_loss(&net, &cfg.injection, &bank, &cfg.deny, x.view(), &y, epoch, &mut rng)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: out.loss });
            }
            sgd_step(&mut net, &out.grads, &mut opt).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, step, loss: out.loss },
                other => other,
            })?;
            loss += out.loss;
            ce += out.ce;
            deny += out.deny;
            lambda_eff = out.lambda_eff;
        }
        let nb = batches.len().max(1) as f64;
        let evaluate_now = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let mut reports = Vec::new();
        if evaluate_now {
            for r in evaluate_protocols(cfg, &net, &bank, train, epoch + 1)? {
                reports.push((SplitTag::Train, r));
            }
            let t = evaluate_protocols(cfg, &net, &bank, test, epoch + 1)?;
            for r in &t {
                reports.push((SplitTag::Test, r.clone()));
            }
            last_test = Some(t);
        }
        log.push(EpochLog {
            epoch: epoch + 1,
            lr: opt.lr(),
            lambda_eff,
            train_loss: loss / nb,
            train_ce: ce / nb,
            train_deny: deny / nb,
            reports,
        });
    }
    opt.epoch = cfg.epochs;
    let metrics = match last_test {
        Some(m) => m,
        None => evaluate_protocols(cfg, &net, &bank, test, cfg.epochs)?,
    };
    let checkpoint = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        config_hash: cfg.hash(),
        layer_dims: net.layer_dims(),
        head: net.head(),
        params: net.flat_params(),
        optim: opt,
        rng,
        epochs_done: cfg.epochs,
        metrics,
    };
    Ok(TrainOutcome { network: net, bank, checkpoint, log })
}

/// Per-epoch log: losses and the three-protocol metrics on both splits.
pub fn epoch_table(log: &[EpochLog], config_hash: &str) -> Result<Table> {
    let mut header: Vec<String> = ["epoch", "lr", "lambda_eff", "train_loss", "train_ce", "train_deny"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for split in ["train", "test"] {
        for p in Protocol::ALL {
            for m in ["top1", "semantic_acc", "reject_mass"] {
                header.push(format!("{split}_{}_{m}", p.name()));
            }
        }
    }
    header.push("config_hash".into());
    let mut t = Table { header, rows: Vec::new() };
    for e in log {
        let mut row = vec![e.epoch.to_string(), fmt6(e.lr), fmt6(e.lambda_eff), fmt6(e.train_loss), fmt6(e.train_ce), fmt6(e.train_deny)];
        for split in [SplitTag::Train, SplitTag::Test] {
            for p in Protocol::ALL {
                match e.reports.iter().find(|(s, r)| *s == split && r.protocol == p) {
                    Some((_, r)) => row.extend([fmt6(r.top1), fmt6(r.semantic_acc), fmt6(r.reject_mass)]),
                    None => row.extend([String::new(), String::new(), String::new()]),
                }
            }
        }
        row.push(config_hash.to_string());
        t.push(row)?;
    }
    Ok(t)
}

pub fn eval_rows(cfg: &ExperimentConfig, split: SplitTag, reports: &[EvalReport]) -> Result<Vec<EvalRow>> {
    let seed = cfg.seed()?;
    let hash = cfg.hash();
    Ok(reports
        .iter()
        .map(|r| EvalRow {
            run_id: cfg.run_id.clone(),
            split: split_name(split).into(),
            seed,
            config_hash: hash.clone(),
            report: r.clone(),
        })
        .collect())
}

/// Writes `checkpoint.json`, `epochs.csv`, `eval.csv`, `config.toml` and one
/// basis file per injection site into `dir`.
pub fn write_run(outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    let cfg = &outcome.checkpoint.config;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    outcome.checkpoint.save(&dir.join("checkpoint.json"))?;
    epoch_table(&outcome.log, &outcome.checkpoint.config_hash)?.write(&dir.join("epochs.csv"))?;
    let mut rows = Vec::new();
    if let Some(last) = outcome.log.last() {
        for split in [SplitTag::Train, SplitTag::Test] {
            let reps: Vec<EvalReport> = last.reports.iter().filter(|(s, _)| *s == split).map(|(_, r)| r.clone()).collect();
            rows.extend(eval_rows(cfg, split, &reps)?);
        }
    } else {
        rows.extend(eval_rows(cfg, SplitTag::Test, &outcome.checkpoint.metrics)?);
    }
    eval_table(&rows)?.write(&dir.join("eval.csv"))?;
    super::report::write_text(&dir.join("config.toml"), &cfg.to_toml_string()?)?;
    for (site, basis) in outcome.bank.sites().iter().zip(outcome.bank.bases()) {
        let p = dir.join(format!("basis_site{site}.bin"));
        std::fs::write(&p, basis.to_bytes()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
