//! Key injectors and the multi-site injection plan.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array1, ArrayView1, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::keyspace::{
    correct_key_from_alpha, make_basis, sample_alpha, sample_correct_key, sample_wrong_key,
    BasisMatrix, DynamicKey, KeySamplerConfig,
};
use crate::rng::derive_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectorKind {
    /// `h + γk`
    Add,
    /// `h ⊙ (1 + γ tanh k)`
    Mul,
}

/// Where a hidden-layer site intercepts its activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionPoint {
    #[default]
    PostActivation,
    PreActivation,
}

fn check_dims(h: usize, k: usize) -> Result<()> {
    if h != k {
        return Err(Error::Dimension(format!(
            "activation has {h} entries, key has {k}"
        )));
    }
    Ok(())
}

pub fn inject_add(h: ArrayView1<f64>, k: ArrayView1<f64>, gamma: f64) -> Result<Array1<f64>> {
    check_dims(h.len(), k.len())?;
    Ok(Zip::from(&h).and(&k).map_collect(|&h, &k| h + gamma * k))
}

pub fn inject_mul(h: ArrayView1<f64>, k: ArrayView1<f64>, gamma: f64) -> Result<Array1<f64>> {
    check_dims(h.len(), k.len())?;
    Ok(Zip::from(&h)
        .and(&k)
        .map_collect(|&h, &k| h * (1.0 + gamma * k.tanh())))
}

/// First-order surrogate `δ = γ (h ⊙ k)` of `inject_mul(h, k, γ) − h` for small keys.
pub fn effective_increment_mul(h: ArrayView1<f64>, k: ArrayView1<f64>, gamma: f64) -> Array1<f64> {
    Zip::from(&h).and(&k).map_collect(|&h, &k| gamma * h * k)
}

impl InjectorKind {
    pub fn apply(self, h: ArrayView1<f64>, k: ArrayView1<f64>, gamma: f64) -> Result<Array1<f64>> {
        match self {
            InjectorKind::Add => inject_add(h, k, gamma),
            InjectorKind::Mul => inject_mul(h, k, gamma),
        }
    }

    /// Applies the injector to every row of a batch in place.
    pub(crate) fn apply_rows(self, mut h: ArrayViewMut2<f64>, k: ArrayView1<f64>, gamma: f64) {
        match self {
            InjectorKind::Add => {
                let shift = k.mapv(|k| gamma * k);
                for mut row in h.axis_iter_mut(Axis(0)) {
                    row += &shift;
                }
            }
            InjectorKind::Mul => {
                let scale = self.row_scale(k, gamma);
                for mut row in h.axis_iter_mut(Axis(0)) {
                    row *= &scale;
                }
            }
        }
    }

    /// `∂ Inject / ∂h` as an elementwise factor (all ones for `Add`).
    pub(crate) fn row_scale(self, k: ArrayView1<f64>, gamma: f64) -> Array1<f64> {
        match self {
            InjectorKind::Add => Array1::ones(k.len()),
            InjectorKind::Mul => k.mapv(|k| 1.0 + gamma * k.tanh()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionPlan {
    /// Site indices: 0 is the input, `i ≥ 1` is hidden layer `i`.
    pub sites: Vec<usize>,
    pub kind: InjectorKind,
    pub gamma: f64,
    pub point: InjectionPoint,
}

impl Default for InjectionPlan {
    fn default() -> Self {
        InjectionPlan {
            sites: vec![0, 2],
            kind: InjectorKind::Mul,
            gamma: 0.5,
            point: InjectionPoint::PostActivation,
        }
    }
}

impl InjectionPlan {
    /// `num_sites` is the number of interception points (hidden layers + 1).
    pub fn validate(&self, num_sites: usize) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "gamma must be finite and >= 0, got {}",
                self.gamma
            )));
        }
        if self.sites.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "injection sites must be strictly increasing: {:?}",
                self.sites
            )));
        }
        if let Some(&s) = self.sites.iter().find(|&&s| s >= num_sites) {
            return Err(Error::SiteOutOfRange {
                site: s,
                depth: num_sites,
            });
        }
        Ok(())
    }

    pub fn position(&self, site: usize) -> Option<usize> {
        self.sites.iter().position(|&s| s == site)
    }
}

/// Secret bases for every planned site plus the sampler settings.
///
/// With `per_layer_basis = false`, sites of equal width share one basis;
/// sites of different widths necessarily get their own.
#[derive(Debug, Clone)]
pub struct KeyBank {
    sites: Vec<usize>,
    bases: Vec<Arc<BasisMatrix>>,
    cfg: KeySamplerConfig,
}

impl KeyBank {
    pub fn new(
        plan: &InjectionPlan,
        site_widths: &[usize],
        m: usize,
        cfg: KeySamplerConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        plan.validate(site_widths.len())?;
        let mut shared: BTreeMap<usize, Arc<BasisMatrix>> = BTreeMap::new();
        let mut bases = Vec::with_capacity(plan.sites.len());
        for &site in &plan.sites {
            let d = site_widths[site];
            let basis = if cfg.per_layer_basis {
                Arc::new(make_basis(d, m, derive_seed(seed, "site-basis", site as u64))?)
            } else if let Some(b) = shared.get(&d) {
                Arc::clone(b)
            } else {
                let b = Arc::new(make_basis(d, m, derive_seed(seed, "width-basis", d as u64))?);
                shared.insert(d, Arc::clone(&b));
                b
            };
            bases.push(basis);
        }
        Ok(KeyBank {
            sites: plan.sites.clone(),
            bases,
            cfg,
        })
    }

    pub fn sites(&self) -> &[usize] {
        &self.sites
    }

    pub fn bases(&self) -> &[Arc<BasisMatrix>] {
        &self.bases
    }

    pub fn config(&self) -> &KeySamplerConfig {
        &self.cfg
    }

    pub fn m(&self) -> usize {
        self.bases.first().map(|b| b.m()).unwrap_or(0)
    }

    /// One correct key per site, with shared or per-site coefficients.
    pub fn sample_correct<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<DynamicKey> {
        if self.cfg.per_layer_alpha {
            self.sites
                .iter()
                .zip(&self.bases)
                .map(|(&site, b)| sample_correct_key(b, &self.cfg, rng, site))
                .collect()
        } else {
            loop {
                let alpha = sample_alpha(self.m(), &self.cfg, rng);
                if let Ok(keys) = self.keys_from_alphas(&vec![alpha; self.sites.len()]) {
                    return keys;
                }
            }
        }
    }

    pub fn sample_wrong<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<DynamicKey>> {
        self.sites
            .iter()
            .zip(&self.bases)
            .map(|(&site, b)| sample_wrong_key(b, &self.cfg, rng, site))
            .collect()
    }

    /// Fresh per-site coefficient vectors (before scale matching).
    pub fn sample_alphas<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Array1<f64>> {
        if self.cfg.per_layer_alpha {
            self.bases
                .iter()
                .map(|b| sample_alpha(b.m(), &self.cfg, rng))
                .collect()
        } else {
            let a = sample_alpha(self.m(), &self.cfg, rng);
            vec![a; self.sites.len()]
        }
    }

    /// Scale-matched correct keys for explicit coefficients.
    pub fn keys_from_alphas(&self, alphas: &[Array1<f64>]) -> Result<Vec<DynamicKey>> {
        if alphas.len() != self.sites.len() {
            return Err(Error::Dimension(format!(
                "{} coefficient vectors for {} sites",
                alphas.len(),
                self.sites.len()
            )));
        }
        self.sites
            .iter()
            .zip(&self.bases)
            .zip(alphas)
            .map(|((&site, b), a)| correct_key_from_alpha(b, a.clone(), &self.cfg, site))
            .collect()
    }

    /// Keys `αᵀB` for explicit coefficients, without scale matching.
    pub fn raw_keys_from_alphas(&self, alphas: &[Array1<f64>]) -> Result<Vec<DynamicKey>> {
        if alphas.len() != self.sites.len() {
            return Err(Error::Dimension(format!(
                "{} coefficient vectors for {} sites",
                alphas.len(),
                self.sites.len()
            )));
        }
        self.sites
            .iter()
            .zip(&self.bases)
            .zip(alphas)
            .map(|((&site, b), a)| DynamicKey::from_alpha(b, a.clone(), site))
            .collect()
    }
}
