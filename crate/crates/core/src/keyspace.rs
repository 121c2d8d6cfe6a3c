//! Secret key subspaces and key samplers.
//!
//! A [`BasisMatrix`] holds `m` orthonormal rows in `ℝ^d`; its row span is the
//! set of valid keys. Correct keys are `k = αᵀB` with Gaussian coefficients,
//! rescaled to a target per-entry standard deviation. Wrong keys are isotropic
//! Gaussian draws rescaled the same way and rejected unless most of their
//! squared energy lies outside the span.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::seeded;
use crate::{Error, Result};

/// Minimum out-of-span energy fraction accepted for a wrong key.
pub const WRONG_KEY_MIN_ETA: f64 = 0.5;

const MAX_ROW_RETRIES: usize = 16;
const MAX_KEY_RETRIES: usize = 10_000;
const BASIS_MAGIC: &[u8; 8] = b"SKBASIS\0";
const BASIS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisMatrix {
    d: usize,
    m: usize,
    seed: u64,
    /// `m × d`, rows orthonormal.
    rows: Array2<f64>,
}

impl BasisMatrix {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    /// Builds a basis from explicit rows. Rows must already be orthonormal.
    pub fn from_rows(rows: Array2<f64>, seed: u64) -> Result<Self> {
        let (m, d) = rows.dim();
        if m == 0 || m >= d {
            return Err(Error::Config(format!(
                "basis needs 1 <= m < d, got m = {m}, d = {d}"
            )));
        }
        let basis = BasisMatrix { d, m, seed, rows };
        let err = basis.orthonormality_error();
        if err > 1e-10 {
            return Err(Error::Numerical(format!(
                "rows are not orthonormal (max |BBᵀ - I| = {err:e})"
            )));
        }
        Ok(basis)
    }

    /// `max |B Bᵀ − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.rows.dot(&self.rows.t());
        let mut worst = 0.0f64;
        for ((i, j), v) in g.indexed_iter() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((v - target).abs());
        }
        worst
    }

    /// Dense projector `P = BᵀB` (`d × d`).
    pub fn projector(&self) -> Array2<f64> {
        self.rows.t().dot(&self.rows)
    }

    /// Coordinates `Bk ∈ ℝ^m`.
    pub fn coefficients(&self, k: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_dim(k.len())?;
        Ok(self.rows.dot(&k))
    }

    /// `Pk = Bᵀ(Bk)`.
    pub fn project(&self, k: ArrayView1<f64>) -> Result<Array1<f64>> {
        let c = self.coefficients(k)?;
        Ok(self.rows.t().dot(&c))
    }

    /// `αᵀB`.
    pub fn compose(&self, alpha: ArrayView1<f64>) -> Result<Array1<f64>> {
        if alpha.len() != self.m {
            return Err(Error::Dimension(format!(
                "alpha has {} entries, basis has m = {}",
                alpha.len(),
                self.m
            )));
        }
        Ok(self.rows.t().dot(&alpha))
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.d {
            return Err(Error::Dimension(format!(
                "key has {len} entries, basis ambient dimension is {}",
                self.d
            )));
        }
        Ok(())
    }

    /// Versioned little-endian binary: magic, version, d, m, seed, row-major entries.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(36 + 8 * self.d * self.m);
        out.extend_from_slice(BASIS_MAGIC);
        out.extend_from_slice(&BASIS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d as u64).to_le_bytes());
        out.extend_from_slice(&(self.m as u64).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for v in self.rows.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = 8 + 4 + 8 + 8 + 8;
        if bytes.len() < header {
            return Err(Error::Format("basis file shorter than header".into()));
        }
        if &bytes[..8] != BASIS_MAGIC {
            return Err(Error::Format("bad basis magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != BASIS_VERSION {
            return Err(Error::Format(format!("unsupported basis version {version}")));
        }
        let read_u64 = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        let d = read_u64(12) as usize;
        let m = read_u64(20) as usize;
        let seed = read_u64(28);
        let n = d
            .checked_mul(m)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format("basis dimensions overflow".into()))?;
        if bytes.len() != header + n {
            return Err(Error::Format(format!(
                "basis payload has {} bytes, expected {n}",
                bytes.len() - header
            )));
        }
        let entries: Vec<f64> = bytes[header..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let rows = Array2::from_shape_vec((m, d), entries)
            .map_err(|e| Error::Format(e.to_string()))?;
        BasisMatrix::from_rows(rows, seed)
    }
}

/// Orthonormalizes `m` i.i.d. Gaussian vectors in `ℝ^d` (modified Gram–Schmidt
/// with a second re-orthogonalization pass). Deterministic per seed.
pub fn make_basis(d: usize, m: usize, seed: u64) -> Result<BasisMatrix> {
    if m == 0 || m >= d {
        return Err(Error::Config(format!(
            "basis needs 1 <= m < d, got m = {m}, d = {d}"
        )));
    }
    let mut rng = seeded(seed);
    let mut rows = Array2::<f64>::zeros((m, d));
    for i in 0..m {
        let mut accepted = false;
        for _ in 0..MAX_ROW_RETRIES {
            let mut v: Array1<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let original = v.dot(&v).sqrt();
            for _pass in 0..2 {
                for j in 0..i {
                    let r = rows.row(j);
                    let c = r.dot(&v);
                    v.scaled_add(-c, &r);
                }
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-8 * original && norm.is_finite() {
                v /= norm;
                rows.row_mut(i).assign(&v);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::Numerical(format!(
                "row {i} stayed rank deficient after {MAX_ROW_RETRIES} draws"
            )));
        }
    }
    Ok(BasisMatrix { d, m, seed, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyKind {
    Correct,
    Wrong,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicKey {
    pub site: usize,
    pub kind: KeyKind,
    /// Empty for [`KeyKind::None`].
    pub values: Array1<f64>,
    /// Present iff `kind == Correct`.
    pub alpha: Option<Array1<f64>>,
}

impl DynamicKey {
    pub fn none(site: usize) -> Self {
        DynamicKey {
            site,
            kind: KeyKind::None,
            values: Array1::zeros(0),
            alpha: None,
        }
    }

    /// `k = αᵀB` for an explicit coefficient vector, without rescaling.
    pub fn from_alpha(basis: &BasisMatrix, alpha: Array1<f64>, site: usize) -> Result<Self> {
        let values = basis.compose(alpha.view())?;
        Ok(DynamicKey {
            site,
            kind: KeyKind::Correct,
            values,
            alpha: Some(alpha),
        })
    }

    pub fn is_absent(&self) -> bool {
        self.kind == KeyKind::None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeySamplerConfig {
    /// Per-coordinate std of α before scale matching.
    pub alpha_std: f64,
    /// Target std of key entries after scale matching.
    pub target_key_std: f64,
    pub per_layer_alpha: bool,
    pub per_layer_basis: bool,
}

impl Default for KeySamplerConfig {
    fn default() -> Self {
        KeySamplerConfig {
            alpha_std: 1.0,
            target_key_std: 1.0,
            per_layer_alpha: true,
            per_layer_basis: false,
        }
    }
}

impl KeySamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_std > 0.0 && self.alpha_std.is_finite()) {
            return Err(Error::Config(format!(
                "alpha_std must be positive, got {}",
                self.alpha_std
            )));
        }
        if !(self.target_key_std > 0.0 && self.target_key_std.is_finite()) {
            return Err(Error::Config(format!(
                "target_key_std must be positive, got {}",
                self.target_key_std
            )));
        }
        Ok(())
    }
}

/// Sample standard deviation (n − 1 denominator) of the entries of `v`.
pub fn entry_std(v: ArrayView1<f64>) -> f64 {
    let n = v.len();
    if n < 2 {
        return v.iter().map(|x| x.abs()).sum();
    }
    let mean = v.sum() / n as f64;
    let ss: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Draws `α ~ N(0, σ_α² I_m)` (resampling all-zero draws).
pub fn sample_alpha<R: Rng + ?Sized>(m: usize, cfg: &KeySamplerConfig, rng: &mut R) -> Array1<f64> {
    loop {
        let a: Array1<f64> = (0..m)
            .map(|_| cfg.alpha_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if a.iter().any(|x| *x != 0.0) {
            return a;
        }
    }
}

/// Scale-matches an explicit α so that `αᵀB` has the target entry std.
pub fn correct_key_from_alpha(
    basis: &BasisMatrix,
    alpha: Array1<f64>,
    cfg: &KeySamplerConfig,
    site: usize,
) -> Result<DynamicKey> {
    let raw = basis.compose(alpha.view())?;
    let std = entry_std(raw.view());
    if !(std > 0.0) {
        return Err(Error::Numerical("in-span key has zero spread".into()));
    }
    let alpha = alpha * (cfg.target_key_std / std);
    DynamicKey::from_alpha(basis, alpha, site)
}

pub fn sample_correct_key<R: Rng + ?Sized>(
    basis: &BasisMatrix,
    cfg: &KeySamplerConfig,
    rng: &mut R,
    site: usize,
) -> DynamicKey {
    loop {
        let alpha = sample_alpha(basis.m(), cfg, rng);
        if let Ok(k) = correct_key_from_alpha(basis, alpha, cfg, site) {
            return k;
        }
    }
}

/// One isotropic draw rescaled to the target std, with no validity check.
pub fn sample_isotropic_key<R: Rng + ?Sized>(
    d: usize,
    cfg: &KeySamplerConfig,
    rng: &mut R,
) -> Array1<f64> {
    loop {
        let k: Array1<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let std = entry_std(k.view());
        if std > 0.0 {
            return k * (cfg.target_key_std / std);
        }
    }
}

/// Isotropic wrong key. Draws with out-of-span fraction `η ≤ 0.5` are rejected.
pub fn sample_wrong_key<R: Rng + ?Sized>(
    basis: &BasisMatrix,
    cfg: &KeySamplerConfig,
    rng: &mut R,
    site: usize,
) -> Result<DynamicKey> {
    for _ in 0..MAX_KEY_RETRIES {
        let k = sample_isotropic_key(basis.d(), cfg, rng);
        let split = energy_split(basis, k.view())?;
        if split.eta > WRONG_KEY_MIN_ETA {
            return Ok(DynamicKey {
                site,
                kind: KeyKind::Wrong,
                values: k,
                alpha: None,
            });
        }
    }
    Err(Error::Numerical(format!(
        "no wrong key with eta > {WRONG_KEY_MIN_ETA} in {MAX_KEY_RETRIES} draws (d = {}, m = {})",
        basis.d(),
        basis.m()
    )))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergySplit {
    /// `‖Pk‖²`
    pub in_energy: f64,
    /// `‖(I−P)k‖²`
    pub out_energy: f64,
    /// `out_energy / ‖k‖²`
    pub eta: f64,
}

pub fn energy_split(basis: &BasisMatrix, k: ArrayView1<f64>) -> Result<EnergySplit> {
    let pk = basis.project(k)?;
    let total = k.dot(&k);
    if total == 0.0 {
        return Err(Error::Numerical("energy split of a zero key".into()));
    }
    let in_energy = pk.dot(&pk);
    let out_energy: f64 = k.iter().zip(pk.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    let eta = (out_energy / total).clamp(0.0, 1.0);
    Ok(EnergySplit {
        in_energy,
        out_energy,
        eta,
    })
}
