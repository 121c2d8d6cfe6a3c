use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{default_mnist_dir, gen_synthetic_from, load_mnist, Dataset, SplitTag, SyntheticConfig};
use crate::deny::{DenyConfig, DenyMode};
use crate::injection::{InjectionPlan, InjectorKind, KeyBank};
use crate::keyspace::KeySamplerConfig;
use crate::nn::{HeadKind, NetworkSpec, OptimConfig};
use crate::rng::derive_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Mnist,
    Synthetic,
    /// Previously exported `train.bin` / `test.bin` pair.
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub mnist_dir: Option<PathBuf>,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// Keep only the first rows of each split.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub synthetic: SyntheticConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Mnist,
            mnist_dir: None,
            train_path: None,
            test_path: None,
            train_limit: None,
            test_limit: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    pub m: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig { m: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub budget: usize,
    pub screen_batches: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub n_images: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { budget: 300, screen_batches: 12, batch_size: 128, steps: 300, lr: 0.15, n_images: 256 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepFactor {
    M,
    Layers,
    Gamma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub factors: Vec<SweepFactor>,
    pub m: Vec<usize>,
    pub layers: Vec<Vec<usize>>,
    pub gamma: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            factors: vec![SweepFactor::M, SweepFactor::Layers, SweepFactor::Gamma],
            m: vec![4, 8, 16, 32],
            layers: vec![vec![0], vec![1], vec![2], vec![0, 1], vec![0, 2], vec![0, 1, 2]],
            gamma: vec![0.25, 0.5, 1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub beta_d: usize,
    pub beta_m: usize,
    pub beta_draws: usize,
    pub chebyshev_t: Vec<f64>,
    pub flip_ratios: Vec<f64>,
    pub flip_draws: usize,
    pub flip_dim: usize,
    pub sandwich_instances: usize,
    pub sandwich_classes: Vec<usize>,
    pub sandwich_draws: usize,
    pub sandwich_dim: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            beta_d: 64,
            beta_m: 8,
            beta_draws: 100_000,
            chebyshev_t: vec![0.01, 0.02, 0.05],
            flip_ratios: vec![0.5, 1.0, 2.0, 3.0],
            flip_draws: 1_000_000,
            flip_dim: 16,
            sandwich_instances: 100,
            sandwich_classes: vec![3, 5, 10],
            sandwich_draws: 20_000,
            sandwich_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    /// Mandatory; every random stream is derived from it.
    pub seed: Option<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// Limit on train-split evaluation batches (test is always full).
    pub train_eval_batches: Option<usize>,
    /// Evaluate every this many epochs (the last epoch is always evaluated).
    pub eval_every: usize,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub network: NetworkSpec,
    pub injection: InjectionPlan,
    pub basis: BasisConfig,
    pub keys: KeySamplerConfig,
    pub deny: DenyConfig,
    pub optim: OptimConfig,
    pub attack: AttackConfig,
    pub sweep: SweepConfig,
    pub theory: TheoryConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run_id: "run".into(),
            seed: None,
            epochs: 10,
            batch_size: 128,
            eval_batch_size: 1000,
            train_eval_batches: None,
            eval_every: 1,
            output_dir: PathBuf::from("runs"),
            dataset: DatasetConfig::default(),
            network: NetworkSpec::default(),
            injection: InjectionPlan::default(),
            basis: BasisConfig::default(),
            keys: KeySamplerConfig::default(),
            deny: DenyConfig::default(),
            optim: OptimConfig::default(),
            attack: AttackConfig::default(),
            sweep: SweepConfig::default(),
            theory: TheoryConfig::default(),
        }
    }
}

/// Built-in starting points, selectable by name from the CLI.
pub const PRESETS: [&str; 4] = ["mnist_baseline", "mnist_mode_b", "synthetic_add", "synthetic_mul"];

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig { run_id: name.into(), seed: Some(42), ..Default::default() };
        match name {
            "mnist_baseline" => cfg.train_eval_batches = Some(10),
            "mnist_mode_b" => {
                cfg.train_eval_batches = Some(10);
                cfg.network.head = HeadKind::Reject;
                cfg.deny.mode = DenyMode::B;
                cfg.injection.kind = InjectorKind::Add;
                cfg.injection.sites = vec![0];
                cfg.optim.lr = 0.01;
            }
            "synthetic_add" | "synthetic_mul" => {
                cfg.dataset.kind = DatasetKind::Synthetic;
                cfg.network.input_dim = cfg.dataset.synthetic.d;
                cfg.network.num_classes = cfg.dataset.synthetic.num_classes;
                cfg.network.hidden = vec![64, 64];
                cfg.injection.sites = vec![0];
                cfg.basis.m = 4;
                cfg.epochs = 30;
                cfg.batch_size = 64;
                cfg.optim.lr = 0.05;
                cfg.optim.milestones = vec![15, 25];
                if name == "synthetic_add" {
                    cfg.injection.kind = InjectorKind::Add;
                    cfg.injection.gamma = 2.0;
                    cfg.optim.lr = 0.01;
                }
            }
            other => return Err(Error::Config(format!("unknown preset {other:?}; known: {PRESETS:?}"))),
        }
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `section.key=value` overrides; values are parsed as TOML
    /// literals and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (path, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {raw:?} is not key=value")))?;
            set_path(&mut root, path.trim(), parse_literal(value.trim()))?;
        }
        root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("seed is required".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        self.network.validate()?;
        self.injection.validate(self.network.site_widths().len())?;
        self.keys.validate()?;
        self.deny.validate()?;
        self.deny.check_head(self.network.head)?;
        self.optim.validate()?;
        let widths = self.network.site_widths();
        for &s in &self.injection.sites {
            if self.basis.m == 0 || self.basis.m >= widths[s] {
                return Err(Error::Config(format!("m = {} must lie in [1, {}) at site {s}", self.basis.m, widths[s])));
            }
        }
        if self.dataset.kind == DatasetKind::Synthetic {
            let s = &self.dataset.synthetic;
            if s.d != self.network.input_dim || s.num_classes != self.network.num_classes {
                return Err(Error::Config("synthetic d / num_classes disagree with the network".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form; the first 16 hex digits.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn sub_seed(&self, label: &str, index: u64) -> Result<u64> {
        Ok(derive_seed(self.seed()?, label, index))
    }

    pub fn key_bank(&self) -> Result<KeyBank> {
        KeyBank::new(
            &self.injection,
            &self.network.site_widths(),
            self.basis.m,
            self.keys.clone(),
            self.sub_seed("basis", 0)?,
        )
    }

    /// Train and test splits as configured.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.dataset.kind {
            DatasetKind::Mnist => {
                let dir = self.dataset.mnist_dir.clone().unwrap_or_else(default_mnist_dir);
                (load_mnist(&dir, SplitTag::Train)?, load_mnist(&dir, SplitTag::Test)?)
            }
            DatasetKind::Synthetic => gen_synthetic_from(&self.dataset.synthetic, self.sub_seed("data", 0)?)?,
            DatasetKind::Files => {
                let need = |p: &Option<PathBuf>, what: &str| {
                    p.clone().ok_or_else(|| Error::Config(format!("dataset.{what} is required for kind = files")))
                };
                (Dataset::load(&need(&self.dataset.train_path, "train_path")?)?, Dataset::load(&need(&self.dataset.test_path, "test_path")?)?)
            }
        };
        let train = match self.dataset.train_limit {
            Some(n) => train.head(n)?,
            None => train,
        };
        let test = match self.dataset.test_limit {
            Some(n) => test.head(n)?,
            None => test,
        };
        if train.dim() != self.network.input_dim || test.dim() != self.network.input_dim {
            return Err(Error::Config(format!("data has {} features, network expects {}", train.dim(), self.network.input_dim)));
        }
        if train.num_classes() > self.network.num_classes {
            return Err(Error::Config("data has more classes than the network".into()));
        }
        Ok((train, test))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty override key {path:?}")))?;
    let mut node = root;
    for p in parts {
        node = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{path}: {p} is not a section")))?
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("{path}: parent is not a section")))?
        .insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deny::InvalidPath;

    #[test]
    fn defaults_carry_the_anchor_settings() {
        let base = ExperimentConfig::preset("mnist_baseline").unwrap();
        assert_eq!(base.basis.m, 8);
        assert_eq!(base.injection.sites, vec![0, 2]);
        assert_eq!(base.injection.gamma, 0.5);
        assert_eq!(base.injection.kind, InjectorKind::Mul);
        assert_eq!(base.optim.milestones, vec![50, 75]);
        let cfg = ExperimentConfig::preset("mnist_mode_b").unwrap();
        assert_eq!((cfg.deny.mode, cfg.deny.lambda), (DenyMode::B, 0.1));
        assert_eq!(cfg.deny.deny_on, vec![InvalidPath::WrongKey]);
        assert_eq!((cfg.injection.kind, cfg.injection.sites.clone(), cfg.injection.gamma), (InjectorKind::Add, vec![0], 0.5));
        assert_eq!(cfg.network.head, HeadKind::Reject);
        for p in PRESETS {
            ExperimentConfig::preset(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn toml_round_trip_and_hash_stability() {
        let cfg = ExperimentConfig::preset("synthetic_add").unwrap();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
        let other = cfg.with_overrides(&["injection.gamma=2.5"]).unwrap();
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn sections_and_overrides() {
        let text = "seed = 3\nepochs = 2\n[deny]\nmode = \"b\"\nlambda = 0.2\n[network]\nhead = \"reject\"\n";
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.deny.mode, DenyMode::B);
        assert_eq!(cfg.network.hidden, vec![256, 128, 64]);
        let o = cfg
            .with_overrides(&["deny.deny_on=[\"wrong_key\", \"no_key\"]", "injection.sites=[1]", "run_id=abc", "epochs=5"])
            .unwrap();
        assert_eq!(o.deny.deny_on.len(), 2);
        assert_eq!(o.injection.sites, vec![1]);
        assert_eq!(o.run_id, "abc");
        assert_eq!(o.epochs, 5);
        assert!(cfg.with_overrides(&["deny.nonsense=1"]).is_err());
        assert!(cfg.with_overrides(&["no_equals_sign"]).is_err());
    }

    #[test]
    fn validation_catches_inconsistencies() {
        assert!(ExperimentConfig::default().validate().is_err());
        let base = ExperimentConfig::preset("mnist_baseline").unwrap();
        assert!(base.with_overrides(&["deny.mode=\"b\""]).unwrap().validate().is_err());
        assert!(base.with_overrides(&["basis.m=784"]).unwrap().validate().is_err());
        assert!(base.with_overrides(&["injection.sites=[2, 0]"]).unwrap().validate().is_err());
        assert!(ExperimentConfig::preset("nope").is_err());
    }
}
