use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::losses::{log_softmax, sigmoid};
use crate::data::Dataset;
use crate::injection::{InjectionPlan, KeyBank};
use crate::keyspace::DynamicKey;
use crate::nn::{ForwardTrace, HeadKind, Network};
use crate::rng::derived;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    NoKey,
    Correct,
    Wrong,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::NoKey, Protocol::Correct, Protocol::Wrong];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::NoKey => "no_key",
            Protocol::Correct => "correct",
            Protocol::Wrong => "wrong",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub n: usize,
    /// Argmax over the semantic logits.
    pub top1: f64,
    /// Argmax over all outputs; a reject argmax counts as wrong.
    pub semantic_acc: f64,
    pub reject_mass: f64,
    pub mean_entropy: f64,
    pub aux_reject_mean: Option<f64>,
}

/// Order-independent sums over evaluated rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalAccumulator {
    pub n: usize,
    pub top1: usize,
    pub semantic: usize,
    pub rejected: usize,
    pub entropy_sum: f64,
    pub aux_sum: Option<f64>,
}

fn argmax(row: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

impl EvalAccumulator {
    pub fn add(&mut self, trace: &ForwardTrace, y: &[usize], head: HeadKind, classes: usize) {
        self.add_logits(&trace.logits, trace.reject_logit.as_ref(), y, head, classes);
    }

    pub fn add_logits(&mut self, z: &Array2<f64>, reject: Option<&Array1<f64>>, y: &[usize], head: HeadKind, classes: usize) {
        let logp = log_softmax(z.slice(ndarray::s![.., ..classes]));
        for (i, &label) in y.iter().enumerate() {
            let row = z.row(i);
            let top = argmax(row.iter().take(classes).copied());
            let full = argmax(row.iter().copied());
            let rejected = match head {
                HeadKind::Plain => false,
                HeadKind::Reject => full == classes,
                HeadKind::AuxReject => reject.is_some_and(|r| r[i] > 0.0),
            };
            self.top1 += usize::from(top == label);
            self.semantic += usize::from(!rejected && full == label);
            self.rejected += usize::from(rejected);
            self.entropy_sum -= logp.row(i).iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() * l }).sum::<f64>();
        }
        if let Some(r) = reject {
            *self.aux_sum.get_or_insert(0.0) += r.iter().map(|&v| sigmoid(v)).sum::<f64>();
        }
        self.n += y.len();
    }

    pub fn merge(&mut self, other: &EvalAccumulator) {
        self.n += other.n;
        self.top1 += other.top1;
        self.semantic += other.semantic;
        self.rejected += other.rejected;
        self.entropy_sum += other.entropy_sum;
        if let Some(a) = other.aux_sum {
            *self.aux_sum.get_or_insert(0.0) += a;
        }
    }

    pub fn finish(&self, protocol: Protocol) -> EvalReport {
        let n = self.n.max(1) as f64;
        EvalReport {
            protocol,
            n: self.n,
            top1: self.top1 as f64 / n,
            semantic_acc: self.semantic as f64 / n,
            reject_mass: self.rejected as f64 / n,
            mean_entropy: self.entropy_sum / n,
            aux_reject_mean: self.aux_sum.map(|a| a / n),
        }
    }
}

fn protocol_keys<R: Rng + ?Sized>(bank: &KeyBank, protocol: Protocol, rng: &mut R) -> Result<Option<Vec<DynamicKey>>> {
    Ok(match protocol {
        Protocol::NoKey => None,
        Protocol::Correct => Some(bank.sample_correct(rng)),
        Protocol::Wrong => Some(bank.sample_wrong(rng)?),
    })
}

/// Evaluates a protocol over the dataset in canonical batch order, drawing
/// fresh keys for every batch from a seed derived per batch index.
pub fn evaluate<R: Rng + ?Sized>(
    net: &Network,
    plan: &InjectionPlan,
    bank: &KeyBank,
    data: &Dataset,
    protocol: Protocol,
    batch_size: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let base: u64 = rng.random();
    let mut acc = EvalAccumulator::default();
    for b in 0..data.num_batches(batch_size) {
        let mut batch_rng = derived(base, "eval-batch", b as u64);
        let keys = protocol_keys(bank, protocol, &mut batch_rng)?;
        let (x, y) = data.batch(batch_size, b);
        let trace = net.forward(x, plan, keys.as_deref())?;
        acc.add(&trace, y, net.head(), net.num_classes());
    }
    Ok(acc.finish(protocol))
}

/// Evaluates one fixed key (or none) on the first `max_batches` batches.
/// Returns the accumulator so callers can count forwards.
pub fn evaluate_with_keys(
    net: &Network,
    plan: &InjectionPlan,
    data: &Dataset,
    keys: Option<&[DynamicKey]>,
    batch_size: usize,
    max_batches: Option<usize>,
) -> Result<(EvalAccumulator, usize)> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let total = data.num_batches(batch_size);
    let batches = max_batches.map_or(total, |m| m.min(total));
    let mut acc = EvalAccumulator::default();
    for b in 0..batches {
        let (x, y) = data.batch(batch_size, b);
        let trace = net.forward(x, plan, keys)?;
        acc.add(&trace, y, net.head(), net.num_classes());
    }
    Ok((acc, batches))
}
