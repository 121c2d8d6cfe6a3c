//! The `verify-theory` suite: each check produces rows of
//! (check, params, theoretical, empirical, tolerance, pass).

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::config::TheoryConfig;
use super::report::{check_table, CheckRow};
use crate::injection::{effective_increment_mul, inject_mul, InjectionPlan, InjectorKind};
use crate::keyspace::{DynamicKey, KeyKind};
use crate::nn::{Activation, HeadKind, Network, NetworkSpec};
use crate::rng::derived;
use crate::theory::{
    binomial_se, flip_probability, flip_tail_bound, mc_beta_energy, mc_flip_rate, mc_multiclass_error, normal_quantile,
    sandwich_bounds, MarginInstance,
};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckSet {
    pub name: &'static str,
    pub rows: Vec<CheckRow>,
}

impl CheckSet {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

fn row(check: &str, params: String, theoretical: f64, empirical: f64, tolerance: f64, pass: bool) -> CheckRow {
    CheckRow { check: check.into(), params, theoretical, empirical, tolerance, pass }
}

/// Mean/variance of the out-of-span fraction, Chebyshev tails, and the
/// in/out energy split, all on one set of draws.
pub fn beta_checks(cfg: &TheoryConfig, seed: u64) -> Result<Vec<CheckSet>> {
    let (d, m, n) = (cfg.beta_d, cfg.beta_m, cfg.beta_draws);
    let rep = mc_beta_energy(d, m, n, &cfg.chebyshev_t, &mut derived(seed, "verify-beta", 0))?;
    let p = format!("d={d};m={m};n={n}");
    let moments = vec![
        row("beta_mean", p.clone(), rep.theory_mean, rep.mean, rep.mean_tolerance(), rep.mean_ok()),
        row(
            "beta_variance",
            p.clone(),
            rep.theory_variance,
            rep.variance,
            0.05 * rep.theory_variance,
            rep.variance_rel_error() <= 0.05,
        ),
    ];
    let tails = rep
        .tails
        .iter()
        .map(|t| row("beta_chebyshev", format!("{p};t={}", t.t), t.bound, t.empirical, 3.0 * t.se, t.holds()))
        .collect();
    let (mf, dmf) = (m as f64, (d - m) as f64);
    let in_tol = 3.0 * (2.0 * mf / n as f64).sqrt();
    let out_tol = 3.0 * (2.0 * dmf / n as f64).sqrt();
    let corr_tol = 3.0 * rep.corr_se();
    let split = vec![
        row("in_energy_mean", p.clone(), mf, rep.in_energy_mean, in_tol, (rep.in_energy_mean - mf).abs() <= in_tol),
        row("out_energy_mean", p.clone(), dmf, rep.out_energy_mean, out_tol, (rep.out_energy_mean - dmf).abs() <= out_tol),
        row("energy_correlation", p, 0.0, rep.energy_corr, corr_tol, rep.energy_corr.abs() <= corr_tol),
    ];
    Ok(vec![
        CheckSet { name: "beta_moments", rows: moments },
        CheckSet { name: "beta_chebyshev", rows: tails },
        CheckSet { name: "energy_split", rows: split },
    ])
}

/// Monte Carlo flip rate against `Φ(−M/(γσ))` and tail-bound dominance
/// on a grid of ratios.
pub fn margin_tail_checks(cfg: &TheoryConfig, seed: u64) -> Result<CheckSet> {
    let mut rows = Vec::new();
    let mut rng = derived(seed, "verify-flip", 0);
    for (i, &ratio) in cfg.flip_ratios.iter().enumerate() {
        let u = Array1::from_shape_fn(cfg.flip_dim, |_| rng.sample::<f64, _>(StandardNormal));
        let sigma = u.dot(&u).sqrt();
        let gamma = 0.5;
        let inst = MarginInstance::new(ratio * gamma * sigma, gamma, u)?;
        let p = flip_probability(&inst);
        let emp = mc_flip_rate(&inst, cfg.flip_draws, &mut derived(seed, "verify-flip-mc", i as u64));
        let tol = 3.0 * binomial_se(p, cfg.flip_draws);
        let params = format!("ratio={ratio};n={};dim={}", cfg.flip_draws, cfg.flip_dim);
        rows.push(row("flip_rate", params.clone(), p, emp, tol, (emp - p).abs() <= tol));
        let bound = flip_tail_bound(&inst);
        rows.push(row("tail_bound", params, bound, p, 0.0, bound >= p));
    }
    Ok(CheckSet { name: "margin_tail", rows })
}

/// One random multiclass instance: `C − 1` competitors with Gaussian
/// directions, norms in [0.5, 2] and per-competitor flip probabilities in
/// [0.01, 0.3].
pub fn random_multiclass_instance<R: Rng + ?Sized>(classes: usize, dim: usize, gamma: f64, rng: &mut R) -> (Vec<f64>, Vec<Array1<f64>>) {
    let mut margins = Vec::with_capacity(classes - 1);
    let mut us = Vec::with_capacity(classes - 1);
    for _ in 1..classes {
        let dir = Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
        let sigma = rng.random_range(0.5..2.0);
        let u = &dir * (sigma / dir.dot(&dir).sqrt());
        let p: f64 = rng.random_range(0.01..0.3);
        margins.push(-normal_quantile(p) * gamma * sigma);
        us.push(u);
    }
    (margins, us)
}

pub fn sandwich_checks(cfg: &TheoryConfig, seed: u64) -> Result<CheckSet> {
    let mut rows = Vec::with_capacity(cfg.sandwich_instances);
    let mut rng = derived(seed, "verify-sandwich", 0);
    let gamma = 0.5;
    for i in 0..cfg.sandwich_instances {
        let classes = cfg.sandwich_classes[i % cfg.sandwich_classes.len()];
        let (margins, us) = random_multiclass_instance(classes, cfg.sandwich_dim, gamma, &mut rng);
        let (lo, hi) = sandwich_bounds(&margins, &us, gamma)?;
        let n = cfg.sandwich_draws;
        let emp = mc_multiclass_error(&margins, &us, gamma, n, &mut derived(seed, "verify-sandwich-mc", i as u64))?;
        let se = binomial_se(emp.clamp(lo, hi).max(1.0 / n as f64), n);
        let pass = emp >= lo - 3.0 * se && emp <= hi + 3.0 * se;
        rows.push(row("multiclass_sandwich", format!("instance={i};C={classes};lower={lo:.6}"), hi, emp, 3.0 * se, pass));
    }
    Ok(CheckSet { name: "multiclass_sandwich", rows })
}

fn random_net<R: Rng + ?Sized>(act: Activation, dims: &[usize], rng: &mut R) -> Result<Network> {
    let spec = NetworkSpec {
        input_dim: dims[0],
        hidden: dims[1..dims.len() - 1].to_vec(),
        num_classes: dims[dims.len() - 1],
        activation: act,
        head: HeadKind::Plain,
    };
    Network::new(spec, rng)
}

fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    diff / b.mapv(|v| v * v).sum().sqrt().max(1e-300)
}

fn wrong_key(site: usize, values: Array1<f64>) -> DynamicKey {
    DynamicKey { site, kind: KeyKind::Wrong, values, alpha: None }
}

/// Exact linear shift, JVP against finite differences at frozen gates, and
/// the multiplicative first-order increment.
pub fn linearization_checks(seed: u64) -> Result<CheckSet> {
    let mut rng = derived(seed, "verify-linear", 0);
    let mut rows = Vec::new();

    // Linear network, additive key at a hidden site: Δz = γ W_eff k.
    let net = random_net(Activation::Identity, &[10, 16, 12, 8, 5], &mut rng)?;
    let site = 1;
    let gamma = 0.7;
    let plan = InjectionPlan { sites: vec![site], kind: InjectorKind::Add, gamma, ..Default::default() };
    let x = Array2::from_shape_fn((4, 10), |_| rng.sample::<f64, _>(StandardNormal));
    let k = Array1::from_shape_fn(16, |_| rng.sample::<f64, _>(StandardNormal));
    let base = net.forward(x.view(), &plan, None)?;
    let keyed = net.forward(x.view(), &plan, Some(&[wrong_key(site, k.clone())]))?;
    let shift = &keyed.logits - &base.logits;
    let v = (&k * gamma).insert_axis(ndarray::Axis(0));
    let predicted = net.logit_jvp(&base, site, v.view())?;
    let e = rel_err(&shift, &predicted);
    rows.push(row("linear_shift", "net=10-16-12-8-5;site=1;gamma=0.7".into(), 0.0, e, 1e-9, e <= 1e-9));

    // ReLU network: JVP of h_L against central differences, step 1e-6.
    let dims = [8, 24, 20, 16, 4];
    let mut worst: f64 = 0.0;
    let mut trials = 0;
    while trials < 10 {
        let net = random_net(Activation::Relu, &dims, &mut rng)?;
        let x = Array2::from_shape_fn((1, 8), |_| rng.sample::<f64, _>(StandardNormal));
        let site = rng.random_range(0..=2);
        let plan = InjectionPlan { sites: vec![site], kind: InjectorKind::Add, gamma: 1.0, ..Default::default() };
        let trace = net.forward(x.view(), &plan, None)?;
        if trace.gate_in.iter().any(|g| g.iter().any(|v| v.abs() < 1e-4)) {
            continue;
        }
        trials += 1;
        let width = net.site_widths()[site];
        let v = Array1::from_shape_fn(width, |_| rng.sample::<f64, _>(StandardNormal));
        let h = 1e-6;
        let plus = net.forward(x.view(), &plan, Some(&[wrong_key(site, &v * h)]))?;
        let minus = net.forward(x.view(), &plan, Some(&[wrong_key(site, &v * -h)]))?;
        let depth = net.hidden_layers();
        let fd = (&plus.acts[depth] - &minus.acts[depth]) / (2.0 * h);
        let jvp = net.jvp(&trace, site, v.insert_axis(ndarray::Axis(0)).view())?;
        worst = worst.max(rel_err(&jvp, &fd));
    }
    rows.push(row("relu_jvp", "net=8-24-20-16-4;trials=10;step=1e-6".into(), 0.0, worst, 1e-5, worst < 1e-5));

    // Multiplicative injector: (inject_mul − h) against δ = γ (h ⊙ k) at ‖k‖ = 1e-4.
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let h = Array1::from_shape_fn(32, |_| rng.sample::<f64, _>(StandardNormal));
        let dir = Array1::from_shape_fn(32, |_| rng.sample::<f64, _>(StandardNormal));
        let k = &dir * (1e-4 / dir.dot(&dir).sqrt());
        let g = rng.random_range(0.1..2.0);
        let out = inject_mul(h.view(), k.view(), g)?;
        let delta = effective_increment_mul(h.view(), k.view(), g);
        let r = (&(&out - &h) - &delta).mapv(|v| v * v).sum().sqrt() / delta.dot(&delta).sqrt();
        worst = worst.max(r);
    }
    rows.push(row("mul_increment", "dim=32;norm_k=1e-4;draws=20".into(), 0.0, worst, 1e-7, worst < 1e-7));
    Ok(CheckSet { name: "linearization", rows })
}

pub fn run_all(cfg: &TheoryConfig, seed: u64) -> Result<Vec<CheckSet>> {
    let mut sets = beta_checks(cfg, seed)?;
    sets.push(margin_tail_checks(cfg, seed)?);
    sets.push(sandwich_checks(cfg, seed)?);
    sets.push(linearization_checks(seed)?);
    Ok(sets)
}

/// One CSV per check set, named `<check>.csv`.
pub fn write_checks(sets: &[CheckSet], dir: &Path) -> Result<()> {
    for s in sets {
        check_table(&s.rows)?.write(&dir.join(format!("{}.csv", s.name)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> TheoryConfig {
        TheoryConfig {
            beta_draws: 20_000,
            flip_draws: 50_000,
            sandwich_instances: 12,
            sandwich_draws: 5_000,
            ..Default::default()
        }
    }

    #[test]
    fn quick_suite_passes_and_writes_one_file_per_check() {
        let sets = run_all(&quick(), 7).unwrap();
        for s in &sets {
            assert!(s.passed(), "{}: {:?}", s.name, s.rows);
        }
        let dir = tempfile::tempdir().unwrap();
        write_checks(&sets, dir.path()).unwrap();
        let names: Vec<_> = sets.iter().map(|s| s.name).collect();
        for n in names {
            let text = std::fs::read_to_string(dir.path().join(format!("{n}.csv"))).unwrap();
            assert!(text.starts_with("check,params,theoretical,empirical,tolerance,pass"));
        }
    }

    #[test]
    fn instances_hit_their_probability_range() {
        let mut rng = crate::rng::seeded(1);
        let (margins, us) = random_multiclass_instance(5, 8, 0.5, &mut rng);
        assert_eq!(margins.len(), 4);
        for (m, u) in margins.iter().zip(&us) {
            let p = flip_probability(&MarginInstance::new(*m, 0.5, u.clone()).unwrap());
            assert!((0.01..0.3).contains(&(p + 1e-12)));
        }
    }
}
