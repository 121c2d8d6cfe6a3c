use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, SweepFactor};
use super::report::{fmt6, Table};
use super::train::{run_training_on, TrainOutcome};
use crate::data::Dataset;
use crate::deny::Protocol;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SweepValue {
    M(usize),
    Layers(Vec<usize>),
    Gamma(f64),
}

impl SweepValue {
    pub fn factor(&self) -> SweepFactor {
        match self {
            SweepValue::M(_) => SweepFactor::M,
            SweepValue::Layers(_) => SweepFactor::Layers,
            SweepValue::Gamma(_) => SweepFactor::Gamma,
        }
    }

    pub fn label(&self) -> String {
        match self {
            SweepValue::M(m) => m.to_string(),
            SweepValue::Layers(l) => format!("{{{}}}", l.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")),
            SweepValue::Gamma(g) => format!("{g}"),
        }
    }

    /// The anchor with exactly this factor replaced.
    pub fn apply(&self, anchor: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = anchor.clone();
        match self {
            SweepValue::M(m) => cfg.basis.m = *m,
            SweepValue::Layers(l) => cfg.injection.sites = l.clone(),
            SweepValue::Gamma(g) => cfg.injection.gamma = *g,
        }
        cfg.run_id = format!("{}-{}{}", anchor.run_id, factor_name(self.factor()), self.label());
        cfg
    }
}

pub fn factor_name(f: SweepFactor) -> &'static str {
    match f {
        SweepFactor::M => "m",
        SweepFactor::Layers => "layers",
        SweepFactor::Gamma => "gamma",
    }
}

/// One factor and its values around an anchor configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub factor: SweepFactor,
    pub values: Vec<SweepValue>,
    pub anchor: ExperimentConfig,
}

impl SweepSpec {
    /// Specs for every factor listed in the anchor's `[sweep]` section.
    pub fn from_config(anchor: &ExperimentConfig) -> Vec<SweepSpec> {
        anchor
            .sweep
            .factors
            .iter()
            .map(|&factor| SweepSpec {
                factor,
                values: match factor {
                    SweepFactor::M => anchor.sweep.m.iter().map(|&m| SweepValue::M(m)).collect(),
                    SweepFactor::Layers => anchor.sweep.layers.iter().cloned().map(SweepValue::Layers).collect(),
                    SweepFactor::Gamma => anchor.sweep.gamma.iter().map(|&g| SweepValue::Gamma(g)).collect(),
                },
                anchor: anchor.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub factor: SweepFactor,
    pub value: String,
    pub correct_semantic: f64,
    pub no_key_semantic: f64,
    pub wrong_reject: f64,
    pub wrong_semantic: f64,
    pub config_hash: String,
}

impl SweepRow {
    pub fn from_outcome(value: &SweepValue, out: &TrainOutcome) -> SweepRow {
        SweepRow {
            factor: value.factor(),
            value: value.label(),
            correct_semantic: out.final_report(Protocol::Correct).semantic_acc,
            no_key_semantic: out.final_report(Protocol::NoKey).semantic_acc,
            wrong_reject: out.final_report(Protocol::Wrong).reject_mass,
            wrong_semantic: out.final_report(Protocol::Wrong).semantic_acc,
            config_hash: out.checkpoint.config_hash.clone(),
        }
    }
}

/// Trains one run per value. Each row depends only on its own config, so the
/// order of values does not affect any row; identical configs are trained once.
pub fn run_sweep(spec: &SweepSpec, train: &Dataset, test: &Dataset, cache: &mut SweepCache) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(spec.values.len());
    for v in &spec.values {
        if v.factor() != spec.factor {
            return Err(crate::Error::Config("sweep values must all vary the declared factor".into()));
        }
        let cfg = v.apply(&spec.anchor);
        let row = cache.run(&cfg, v, train, test)?;
        rows.push(row);
    }
    Ok(rows)
}

/// Results keyed by the training-relevant part of the config.
#[derive(Debug, Default)]
pub struct SweepCache {
    done: Vec<(String, SweepRow)>,
}

impl SweepCache {
    /// Registers an already trained run so a sweep value equal to it is not retrained.
    pub fn insert(&mut self, cfg: &ExperimentConfig, out: &TrainOutcome) {
        let mut key_cfg = cfg.clone();
        key_cfg.run_id = String::new();
        let mut row = SweepRow::from_outcome(&SweepValue::M(cfg.basis.m), out);
        row.config_hash = cfg.hash();
        self.done.push((key_cfg.hash(), row));
    }

    fn run(&mut self, cfg: &ExperimentConfig, v: &SweepValue, train: &Dataset, test: &Dataset) -> Result<SweepRow> {
        let mut key_cfg = cfg.clone();
        key_cfg.run_id = String::new();
        let key = key_cfg.hash();
        if let Some((_, r)) = self.done.iter().find(|(k, _)| *k == key) {
            return Ok(SweepRow { factor: v.factor(), value: v.label(), ..r.clone() });
        }
        let out = run_training_on(&key_cfg, train, test)?;
        let mut row = SweepRow::from_outcome(v, &out);
        row.config_hash = cfg.hash();
        self.done.push((key, row.clone()));
        Ok(row)
    }
}

pub const SWEEP_COLUMNS: [&str; 7] =
    ["factor", "value", "correct_semantic", "no_key_semantic", "wrong_reject", "wrong_semantic", "config_hash"];

pub fn sweep_table(rows: &[SweepRow]) -> Result<Table> {
    let mut t = Table::new(&SWEEP_COLUMNS);
    for r in rows {
        t.push(vec![
            factor_name(r.factor).into(),
            r.value.clone(),
            fmt6(r.correct_semantic),
            fmt6(r.no_key_semantic),
            fmt6(r.wrong_reject),
            fmt6(r.wrong_semantic),
            r.config_hash.clone(),
        ])?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::train::run_training_on;

    fn anchor() -> ExperimentConfig {
        ExperimentConfig::preset("synthetic_add")
            .unwrap()
            .with_overrides(&["epochs=1", "dataset.synthetic.n=300", "network.hidden=[12, 10]"])
            .unwrap()
    }

    #[test]
    fn single_value_sweep_equals_a_training_run() {
        let a = anchor();
        let (train, test) = a.load_data().unwrap();
        let spec = SweepSpec { factor: SweepFactor::Gamma, values: vec![SweepValue::Gamma(1.5)], anchor: a.clone() };
        let rows = run_sweep(&spec, &train, &test, &mut SweepCache::default()).unwrap();
        let cfg = SweepValue::Gamma(1.5).apply(&a);
        let mut run_cfg = cfg.clone();
        run_cfg.run_id = String::new();
        let direct = run_training_on(&run_cfg, &train, &test).unwrap();
        let expected = SweepRow { config_hash: cfg.hash(), ..SweepRow::from_outcome(&SweepValue::Gamma(1.5), &direct) };
        assert_eq!(rows, vec![expected]);
    }

    #[test]
    fn rows_do_not_depend_on_order() {
        let a = anchor();
        let (train, test) = a.load_data().unwrap();
        let vals = vec![SweepValue::M(2), SweepValue::M(4), SweepValue::M(6)];
        let fwd = SweepSpec { factor: SweepFactor::M, values: vals.clone(), anchor: a.clone() };
        let rev = SweepSpec { factor: SweepFactor::M, values: vals.into_iter().rev().collect(), anchor: a };
        let r1 = run_sweep(&fwd, &train, &test, &mut SweepCache::default()).unwrap();
        let mut r2 = run_sweep(&rev, &train, &test, &mut SweepCache::default()).unwrap();
        r2.reverse();
        assert_eq!(r1, r2);
    }

    #[test]
    fn mixed_factors_are_rejected() {
        let a = anchor();
        let (train, test) = a.load_data().unwrap();
        let spec = SweepSpec { factor: SweepFactor::M, values: vec![SweepValue::Gamma(1.0)], anchor: a };
        assert!(run_sweep(&spec, &train, &test, &mut SweepCache::default()).is_err());
    }

    #[test]
    fn default_specs_follow_the_three_factors() {
        let specs = SweepSpec::from_config(&anchor());
        assert_eq!(specs.iter().map(|s| s.values.len()).collect::<Vec<_>>(), vec![4, 6, 4]);
        assert_eq!(SweepValue::Layers(vec![0, 2]).label(), "{0,2}");
    }
}
