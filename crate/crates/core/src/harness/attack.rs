//! White-box probes against a trained gate: random in-span search, a
//! forward-only variant, and gradient descent on the coefficients.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::AttackConfig;
use super::report::{fmt6, Table};
use crate::data::Dataset;
use crate::deny::{cross_entropy, EvalAccumulator, Protocol};
use crate::injection::{InjectionPlan, KeyBank};
use crate::keyspace::DynamicKey;
use crate::nn::{Adam, HeadKind, Network};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Adaptive,
    Blackbox,
    Gradient,
    /// Reference rows: a single random key or none.
    NoKey,
    InSpan,
    OutOfSpan,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Adaptive => "adaptive",
            AttackKind::Blackbox => "blackbox",
            AttackKind::Gradient => "gradient",
            AttackKind::NoKey => "no_key",
            AttackKind::InSpan => "single_in_span",
            AttackKind::OutOfSpan => "single_out_of_span",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub attack: AttackKind,
    /// Winning coefficients per injection site (empty for key-free rows).
    pub best_alpha: Vec<Vec<f64>>,
    pub screening_score: Option<f64>,
    pub semantic_acc: f64,
    pub reject_mass: f64,
    pub top1: f64,
    /// Forward passes (batches) spent, screening and full-test together.
    pub forwards: usize,
    pub budget: usize,
}

/// Forward-only access: logits for a key, nothing else, with every call counted.
pub trait ForwardOracle {
    fn query(&mut self, x: ArrayView2<f64>, keys: &[DynamicKey]) -> Result<(Array2<f64>, Option<Array1<f64>>)>;
    fn queries(&self) -> usize;
}

pub struct CountingOracle<'a> {
    net: &'a Network,
    plan: &'a InjectionPlan,
    count: usize,
}

impl<'a> CountingOracle<'a> {
    pub fn new(net: &'a Network, plan: &'a InjectionPlan) -> Self {
        CountingOracle { net, plan, count: 0 }
    }
}

impl ForwardOracle for CountingOracle<'_> {
    fn query(&mut self, x: ArrayView2<f64>, keys: &[DynamicKey]) -> Result<(Array2<f64>, Option<Array1<f64>>)> {
        self.count += 1;
        let t = self.net.forward(x, self.plan, Some(keys))?;
        Ok((t.logits, t.reject_logit))
    }

    fn queries(&self) -> usize {
        self.count
    }
}

/// What a probe needs to know about the head to score logits.
#[derive(Debug, Clone, Copy)]
pub struct HeadInfo {
    pub head: HeadKind,
    pub num_classes: usize,
}

impl HeadInfo {
    pub fn of(net: &Network) -> Self {
        HeadInfo { head: net.head(), num_classes: net.num_classes() }
    }
}

fn score_oracle<O: ForwardOracle>(
    oracle: &mut O,
    info: HeadInfo,
    data: &Dataset,
    keys: &[DynamicKey],
    batch_size: usize,
    max_batches: Option<usize>,
) -> Result<EvalAccumulator> {
    let total = data.num_batches(batch_size);
    let n = max_batches.map_or(total, |m| m.min(total));
    let mut acc = EvalAccumulator::default();
    for b in 0..n {
        let (x, y) = data.batch(batch_size, b);
        let (logits, reject) = oracle.query(x, keys)?;
        acc.add_logits(&logits, reject.as_ref(), y, info.head, info.num_classes);
    }
    Ok(acc)
}

fn alphas_of(keys: &[DynamicKey]) -> Vec<Vec<f64>> {
    keys.iter().filter_map(|k| k.alpha.as_ref().map(|a| a.to_vec())).collect()
}

fn check_budget(cfg: &AttackConfig) -> Result<()> {
    if cfg.budget == 0 {
        return Err(Error::Config("attack budget must be positive".into()));
    }
    if cfg.screen_batches == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("screen_batches and batch_size must be positive".into()));
    }
    Ok(())
}

/// Random in-span search through a forward-only oracle: `budget` coefficient
/// draws, each screened on the first `screen_batches` test batches; the first
/// best candidate is re-scored on the full test split.
pub fn random_search<O: ForwardOracle, R: Rng + ?Sized>(
    oracle: &mut O,
    info: HeadInfo,
    bank: &KeyBank,
    test: &Dataset,
    cfg: &AttackConfig,
    kind: AttackKind,
    rng: &mut R,
) -> Result<AttackResult> {
    check_budget(cfg)?;
    let mut best: Option<(f64, Vec<DynamicKey>)> = None;
    for _ in 0..cfg.budget {
        let keys = bank.keys_from_alphas(&bank.sample_alphas(rng))?;
        let acc = score_oracle(oracle, info, test, &keys, cfg.batch_size, Some(cfg.screen_batches))?;
        let score = acc.finish(Protocol::Correct).semantic_acc;
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, keys));
        }
    }
    let (score, keys) = best.expect("budget is positive");
    let full = score_oracle(oracle, info, test, &keys, cfg.batch_size, None)?.finish(Protocol::Correct);
    Ok(AttackResult {
        attack: kind,
        best_alpha: alphas_of(&keys),
        screening_score: Some(score),
        semantic_acc: full.semantic_acc,
        reject_mass: full.reject_mass,
        top1: full.top1,
        forwards: oracle.queries(),
        budget: cfg.budget,
    })
}

/// White-box search: the attacker holds the network, `B`, `γ` and the sites.
pub fn attack_adaptive<R: Rng + ?Sized>(
    net: &Network,
    plan: &InjectionPlan,
    bank: &KeyBank,
    test: &Dataset,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AttackResult> {
    let mut oracle = CountingOracle::new(net, plan);
    random_search(&mut oracle, HeadInfo::of(net), bank, test, cfg, AttackKind::Adaptive, rng)
}

/// The same search restricted to forward queries; it never sees the network.
pub fn attack_blackbox<O: ForwardOracle, R: Rng + ?Sized>(
    oracle: &mut O,
    info: HeadInfo,
    bank: &KeyBank,
    test: &Dataset,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AttackResult> {
    random_search(oracle, info, bank, test, cfg, AttackKind::Blackbox, rng)
}

/// Cross-entropy of the full output against the labels and its gradient
/// with respect to each site's coefficients, through `k = αᵀB`.
pub fn coefficient_loss_and_grad(
    net: &Network,
    plan: &InjectionPlan,
    bank: &KeyBank,
    alphas: &[Array1<f64>],
    x: ArrayView2<f64>,
    y: &[usize],
) -> Result<(f64, Vec<Array1<f64>>)> {
    let keys = bank.raw_keys_from_alphas(alphas)?;
    let trace = net.forward(x, plan, Some(&keys))?;
    let ce = cross_entropy(trace.logits.view(), y)?;
    let g = net.backward(&trace, ce.grad.view(), None)?;
    let grads = bank.bases().iter().zip(&g.keys).map(|(b, gk)| b.rows().dot(gk)).collect();
    Ok((ce.value, grads))
}

/// Adam on the coefficients for `steps` steps over the first `n_images`
/// training rows, starting from a scale-matched random draw.
pub fn attack_gradient<R: Rng + ?Sized>(
    net: &Network,
    plan: &InjectionPlan,
    bank: &KeyBank,
    train: &Dataset,
    test: &Dataset,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AttackResult> {
    if cfg.n_images == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("gradient attack needs n_images > 0 and lr > 0".into()));
    }
    let init = bank.keys_from_alphas(&bank.sample_alphas(rng))?;
    let mut alphas: Vec<Array1<f64>> = init.iter().map(|k| k.alpha.clone().expect("correct keys carry alpha")).collect();
    let (x, y) = train.batch(cfg.n_images, 0);
    let m = bank.m();
    let mut adam = Adam::new(m * alphas.len(), cfg.lr);
    let mut flat: Vec<f64> = alphas.iter().flat_map(|a| a.iter().copied()).collect();
    let mut forwards = 0;
    for _ in 0..cfg.steps {
        let (_, grads) = coefficient_loss_and_grad(net, plan, bank, &alphas, x, y)?;
        forwards += 1;
        let g: Vec<f64> = grads.iter().flat_map(|a| a.iter().copied()).collect();
        adam.step(&mut flat, &g);
        alphas = flat.chunks(m).map(|c| Array1::from(c.to_vec())).collect();
    }
    let keys = bank.raw_keys_from_alphas(&alphas)?;
    let mut oracle = CountingOracle::new(net, plan);
    let full = score_oracle(&mut oracle, HeadInfo::of(net), test, &keys, cfg.batch_size, None)?.finish(Protocol::Correct);
    Ok(AttackResult {
        attack: AttackKind::Gradient,
        best_alpha: alphas.iter().map(|a| a.to_vec()).collect(),
        screening_score: None,
        semantic_acc: full.semantic_acc,
        reject_mass: full.reject_mass,
        top1: full.top1,
        forwards: forwards + oracle.queries(),
        budget: cfg.steps,
    })
}

/// Full-test metrics of one random in-span key, one wrong key, or no key.
pub fn single_key_probe<R: Rng + ?Sized>(
    net: &Network,
    plan: &InjectionPlan,
    bank: &KeyBank,
    test: &Dataset,
    kind: AttackKind,
    batch_size: usize,
    rng: &mut R,
) -> Result<AttackResult> {
    let keys = match kind {
        AttackKind::InSpan => Some(bank.keys_from_alphas(&bank.sample_alphas(rng))?),
        AttackKind::OutOfSpan => Some(bank.sample_wrong(rng)?),
        AttackKind::NoKey => None,
        other => return Err(Error::Config(format!("{} is not a single-key probe", other.name()))),
    };
    let batches = test.num_batches(batch_size);
    let (acc, _) = crate::deny::evaluate_with_keys(net, plan, test, keys.as_deref(), batch_size, None)?;
    let r = acc.finish(Protocol::Correct);
    Ok(AttackResult {
        attack: kind,
        best_alpha: keys.as_deref().map(alphas_of).unwrap_or_default(),
        screening_score: None,
        semantic_acc: r.semantic_acc,
        reject_mass: r.reject_mass,
        top1: r.top1,
        forwards: batches,
        budget: 1,
    })
}

/// Every probe in a fixed order, each with its own derived stream.
pub fn run_attack_suite(
    net: &Network,
    plan: &InjectionPlan,
    bank: &KeyBank,
    train: &Dataset,
    test: &Dataset,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Vec<AttackResult>> {
    let rng = |label: &str| crate::rng::derived(seed, label, 0);
    let mut out = vec![attack_adaptive(net, plan, bank, test, cfg, &mut rng("attack-adaptive"))?];
    let mut oracle = CountingOracle::new(net, plan);
    out.push(attack_blackbox(&mut oracle, HeadInfo::of(net), bank, test, cfg, &mut rng("attack-blackbox"))?);
    out.push(attack_gradient(net, plan, bank, train, test, cfg, &mut rng("attack-gradient"))?);
    for kind in [AttackKind::NoKey, AttackKind::InSpan, AttackKind::OutOfSpan] {
        out.push(single_key_probe(net, plan, bank, test, kind, cfg.batch_size, &mut rng(kind.name()))?);
    }
    Ok(out)
}

pub const ATTACK_COLUMNS: [&str; 8] =
    ["attack", "screening_score", "semantic_acc", "reject_mass", "top1", "forwards", "budget", "config_hash"];

pub const BLACKBOX_FOOTER: &str =
    "blackbox: forward queries only, but the search still knows B, gamma and the injection sites";

pub fn attack_table(rows: &[AttackResult], config_hash: &str) -> Result<Table> {
    let mut t = Table::new(&ATTACK_COLUMNS);
    for r in rows {
        t.push(vec![
            r.attack.name().into(),
            r.screening_score.map(fmt6).unwrap_or_default(),
            fmt6(r.semantic_acc),
            fmt6(r.reject_mass),
            fmt6(r.top1),
            r.forwards.to_string(),
            r.budget.to_string(),
            config_hash.into(),
        ])?;
    }
    Ok(t)
}
