//! Training objectives and evaluation protocols.
//!
//! The authorized forward always uses a fresh correct key. Invalid forwards
//! (wrong key, no key) feed the deny term selected by [`DenyMode`].

mod eval;
pub mod losses;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::injection::{InjectionPlan, KeyBank};
use crate::nn::{ForwardTrace, Gradients, HeadKind, Network};
use crate::{Error, Result};

pub use eval::{evaluate, evaluate_with_keys, EvalAccumulator, EvalReport, Protocol};
pub use losses::{
    cross_entropy, entropy, loss_a, loss_a_soft, loss_ac, loss_b, loss_b_aux, loss_c, loss_cplus, LossGrad,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DenyMode {
    #[default]
    None,
    A,
    ASoft,
    B,
    BAux,
    C,
    Cplus,
    Ac,
}

impl DenyMode {
    pub const ALL: [DenyMode; 8] = [
        DenyMode::None,
        DenyMode::A,
        DenyMode::ASoft,
        DenyMode::B,
        DenyMode::BAux,
        DenyMode::C,
        DenyMode::Cplus,
        DenyMode::Ac,
    ];

    pub fn required_head(self) -> Option<HeadKind> {
        match self {
            DenyMode::B => Some(HeadKind::Reject),
            DenyMode::BAux => Some(HeadKind::AuxReject),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DenyMode::None => "none",
            DenyMode::A => "a",
            DenyMode::ASoft => "a_soft",
            DenyMode::B => "b",
            DenyMode::BAux => "b_aux",
            DenyMode::C => "c",
            DenyMode::Cplus => "cplus",
            DenyMode::Ac => "ac",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidPath {
    WrongKey,
    NoKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenyConfig {
    pub mode: DenyMode,
    pub lambda: f64,
    pub deny_on: Vec<InvalidPath>,
    pub margin: f64,
    pub entropy_gap: f64,
    /// Length of the linear λ ramp in epochs (0 disables it).
    pub warmup_epochs: usize,
}

impl Default for DenyConfig {
    fn default() -> Self {
        DenyConfig {
            mode: DenyMode::None,
            lambda: 0.1,
            deny_on: vec![InvalidPath::WrongKey],
            margin: 1.0,
            entropy_gap: 0.5,
            warmup_epochs: 0,
        }
    }
}

impl DenyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.mode == DenyMode::None {
            return Ok(());
        }
        if self.lambda <= 0.0 {
            return Err(Error::Config(format!("deny mode {} needs lambda > 0", self.mode.name())));
        }
        if self.deny_on.is_empty() {
            return Err(Error::Config("deny_on must name at least one invalid path".into()));
        }
        let mut paths = self.deny_on.clone();
        paths.sort();
        paths.dedup();
        if paths.len() != self.deny_on.len() {
            return Err(Error::Config("deny_on lists a path twice".into()));
        }
        if matches!(self.mode, DenyMode::C | DenyMode::Cplus | DenyMode::Ac) && !(self.margin > 0.0) {
            return Err(Error::Config("margin must be > 0".into()));
        }
        if matches!(self.mode, DenyMode::ASoft | DenyMode::Ac) && !(self.entropy_gap > 0.0) {
            return Err(Error::Config("entropy_gap must be > 0".into()));
        }
        Ok(())
    }

    /// `λ · min(1, epoch / warmup_epochs)`.
    pub fn effective_lambda(&self, epoch: usize) -> f64 {
        if self.warmup_epochs == 0 {
            self.lambda
        } else {
            self.lambda * (epoch as f64 / self.warmup_epochs as f64).min(1.0)
        }
    }

    pub fn check_head(&self, head: HeadKind) -> Result<()> {
        match self.mode.required_head() {
            Some(h) if h != head => Err(Error::Config(format!(
                "deny mode {} requires a {:?} head, network has {:?}",
                self.mode.name(),
                h,
                head
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub ce: f64,
    /// Deny term averaged over invalid paths, before λ.
    pub deny: f64,
    pub lambda_eff: f64,
    pub grads: Gradients,
}

/// A prepared batch of invalid forwards with the deny value and logit-level
/// gradients it induces.
struct PathTerm {
    trace: ForwardTrace,
    value: f64,
    d_logits: Array2<f64>,
    d_reject: Option<Array1<f64>>,
    d_ok_logits: Option<Array2<f64>>,
    d_ok_reject: Option<Array1<f64>>,
}

fn semantic(z: &Array2<f64>, c: usize) -> ArrayView2<'_, f64> {
    z.slice(s![.., ..c])
}

fn widen(g: Array2<f64>, cols: usize) -> Array2<f64> {
    if g.ncols() == cols {
        return g;
    }
    let mut out = Array2::zeros((g.nrows(), cols));
    out.slice_mut(s![.., ..g.ncols()]).assign(&g);
    out
}

fn path_term(cfg: &DenyConfig, ok: &ForwardTrace, inv: ForwardTrace, y: &[usize], classes: usize) -> Result<PathTerm> {
    let cols = inv.logits.ncols();
    let z_inv = semantic(&inv.logits, classes);
    let z_ok = semantic(&ok.logits, classes);
    let (value, d_logits, d_reject, d_ok_logits, d_ok_reject) = match cfg.mode {
        DenyMode::None => unreachable!("no deny term in baseline mode"),
        DenyMode::A => {
            let l = loss_a(z_inv)?;
            (l.value, widen(l.grad, cols), None, None, None)
        }
        DenyMode::ASoft => {
            let l = loss_a_soft(z_inv, cfg.entropy_gap)?;
            (l.value, widen(l.grad, cols), None, None, None)
        }
        DenyMode::B => {
            let l = loss_b(inv.logits.view())?;
            (l.value, l.grad, None, None, None)
        }
        DenyMode::BAux => {
            let (r_inv, r_ok) = match (&inv.reject_logit, &ok.reject_logit) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::Config("b_aux needs an auxiliary reject head".into())),
            };
            let l = loss_b_aux(r_inv.view(), r_ok.view())?;
            (l.value, Array2::zeros(inv.logits.raw_dim()), Some(l.grad_invalid), None, Some(l.grad_authorized))
        }
        DenyMode::C => {
            let l = loss_c(z_ok, z_inv, y, cfg.margin)?;
            (l.value, widen(l.grad_invalid, cols), None, Some(widen(l.grad_ok, cols)), None)
        }
        DenyMode::Cplus => {
            let l = loss_cplus(z_ok, z_inv, y, cfg.margin, classes)?;
            (l.value, widen(l.grad_invalid, cols), None, Some(widen(l.grad_ok, cols)), None)
        }
        DenyMode::Ac => {
            let l = loss_ac(z_inv, z_ok, z_inv, y, cfg.margin, cfg.entropy_gap)?;
            (l.value, widen(l.grad_invalid, cols), None, Some(widen(l.grad_ok, cols)), None)
        }
    };
    Ok(PathTerm { trace: inv, value, d_logits, d_reject, d_ok_logits, d_ok_reject })
}

/// `CE(z_ok, y) + λ_eff · L_deny` with exact parameter gradients.
///
/// Random draws happen in a fixed order: the correct key, then one wrong key
/// per `wrong_key` entry of `deny_on`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<R: Rng + ?Sized>(
    net: &Network,
    plan: &InjectionPlan,
    bank: &KeyBank,
    cfg: &DenyConfig,
    x: ArrayView2<f64>,
    y: &[usize],
    epoch: usize,
    rng: &mut R,
) -> Result<StepOutput> {
    cfg.check_head(net.head())?;
    let ok_keys = bank.sample_correct(rng);
    let ok = net.forward(x, plan, Some(&ok_keys))?;
    let ce = cross_entropy(ok.logits.view(), y)?;
    if cfg.mode == DenyMode::None {
        let grads = net.backward(&ok, ce.grad.view(), None)?;
        return Ok(StepOutput { loss: ce.value, ce: ce.value, deny: 0.0, lambda_eff: 0.0, grads });
    }

    let classes = net.num_classes();
    let mut terms = Vec::with_capacity(cfg.deny_on.len());
    for path in &cfg.deny_on {
        let inv = match path {
            InvalidPath::WrongKey => {
                let keys = bank.sample_wrong(rng)?;
                net.forward(x, plan, Some(&keys))?
            }
            InvalidPath::NoKey => net.forward(x, plan, None)?,
        };
        terms.push(path_term(cfg, &ok, inv, y, classes)?);
    }
    let paths = terms.len() as f64;
    let deny = terms.iter().map(|t| t.value).sum::<f64>() / paths;
    let lambda_eff = cfg.effective_lambda(epoch);
    let w = lambda_eff / paths;

    let mut d_ok = ce.grad;
    let mut d_ok_r: Option<Array1<f64>> = None;
    for t in &terms {
        if let Some(g) = &t.d_ok_logits {
            d_ok.scaled_add(w, g);
        }
        if let Some(g) = &t.d_ok_reject {
            let acc = d_ok_r.get_or_insert_with(|| Array1::zeros(g.len()));
            acc.scaled_add(w, g);
        }
    }
    let mut grads = net.backward(&ok, d_ok.view(), d_ok_r.as_ref().map(|g| g.view()))?;
    if w > 0.0 {
        for t in &terms {
            let d_r = t.d_reject.as_ref().map(|g| g * w);
            let g = net.backward(&t.trace, (&t.d_logits * w).view(), d_r.as_ref().map(|g| g.view()))?;
            grads.add_params(&g);
        }
    }
    Ok(StepOutput { loss: ce.value + lambda_eff * deny, ce: ce.value, deny, lambda_eff, grads })
}
