//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Every pass condition is recomputed here from raw measurements; library
//! verdicts are not trusted.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use spankey::deny::{total_loss, DenyConfig, DenyMode, InvalidPath, Protocol};
use spankey::harness::attack::{run_attack_suite, AttackKind, AttackResult};
use spankey::harness::config::SweepFactor;
use spankey::harness::sweep::{run_sweep, SweepCache, SweepRow, SweepSpec};
use spankey::harness::verify::{linearization_checks, random_multiclass_instance};
use spankey::harness::{run_training_on, ExperimentConfig, TrainOutcome};
use spankey::injection::{InjectionPlan, InjectorKind, KeyBank};
use spankey::keyspace::KeySamplerConfig;
use spankey::nn::{Activation, HeadKind, Network, NetworkSpec};
use spankey::rng::{derived, seeded};
use spankey::theory::{flip_probability, flip_tail_bound, mc_beta_energy, mc_flip_rate, mc_multiclass_error, sandwich_bounds, MarginInstance};

const SEED: u64 = 20_240_601;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> anyhow::Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

fn beta_moments() -> anyhow::Result<Verdict> {
    let t0 = Instant::now();
    let (d, m, n) = (64usize, 8usize, 100_000usize);
    let r = mc_beta_energy(d, m, n, &[], &mut derived(SEED, "acc-beta", 0))?;
    let (df, mf) = (d as f64, m as f64);
    let mean = (df - mf) / df;
    let var = 2.0 * mf * (df - mf) / (df * df * (df + 2.0));
    let mean_tol = 3.0 * (var / n as f64).sqrt();
    let rel = (r.variance - var).abs() / var;
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        (r.mean - mean).abs() <= mean_tol && rel <= 0.05 && (mean - 0.875).abs() < 1e-15 && (var - 3.314e-3).abs() < 5e-7 && secs < 10.0,
        format!("mean {:.6} vs {mean:.6} (tol {mean_tol:.2e}), var {:.4e} vs {var:.4e} (rel {rel:.4}), {secs:.2}s", r.mean, r.variance),
    )
}

fn beta_chebyshev() -> anyhow::Result<Verdict> {
    let ts = [0.01, 0.02, 0.05];
    let (d, m, n) = (64usize, 8usize, 100_000usize);
    let r = mc_beta_energy(d, m, n, &ts, &mut derived(SEED, "acc-beta", 0))?;
    let (df, mf) = (d as f64, m as f64);
    let var = 2.0 * mf * (df - mf) / (df * df * (df + 2.0));
    let mut pass = r.tails.len() == ts.len();
    let mut parts = Vec::new();
    for (tail, &t) in r.tails.iter().zip(&ts) {
        let bound = (var / (t * t)).min(1.0);
        let se = binomial_se(tail.empirical, n);
        pass &= tail.t == t && tail.empirical <= bound + 3.0 * se;
        parts.push(format!("t={t}: {:.4} <= {bound:.4}", tail.empirical));
    }
    verdict(pass, parts.join(", "))
}

fn margin_tail() -> anyhow::Result<Verdict> {
    let t0 = Instant::now();
    // Φ(−r) to ten digits from standard normal tables.
    let grid = [(0.5, 0.308_537_538_7), (1.0, 0.158_655_253_9), (2.0, 0.022_750_131_9), (3.0, 0.001_349_898_0)];
    let n = 1_000_000;
    let mut rng = derived(SEED, "acc-flip", 0);
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, &(ratio, phi)) in grid.iter().enumerate() {
        let u = ndarray::Array1::from_shape_fn(16, |_| rng.sample::<f64, _>(StandardNormal));
        let sigma = u.dot(&u).sqrt();
        let gamma = 0.8;
        let inst = MarginInstance::new(ratio * gamma * sigma, gamma, u)?;
        let p = flip_probability(&inst);
        let emp = mc_flip_rate(&inst, n, &mut derived(SEED, "acc-flip-mc", i as u64));
        let se = binomial_se(phi, n);
        pass &= (p - phi).abs() < 1e-9 && (emp - phi).abs() <= 3.0 * se && flip_tail_bound(&inst) >= phi;
        parts.push(format!("r={ratio}: {emp:.5} vs {phi:.5}"));
    }
    let secs = t0.elapsed().as_secs_f64();
    pass &= secs < 30.0;
    verdict(pass, format!("{}, {secs:.2}s", parts.join(", ")))
}

fn multiclass_sandwich() -> anyhow::Result<Verdict> {
    let gamma = 0.6;
    let n = 20_000;
    let mut rng = derived(SEED, "acc-sandwich", 0);
    let mut misses = 0;
    let mut oracle_err: f64 = 0.0;
    for i in 0..100 {
        let classes = [3, 5, 10][i % 3];
        let (margins, us) = random_multiclass_instance(classes, 16, gamma, &mut rng);
        let ps: Vec<f64> = margins
            .iter()
            .zip(&us)
            .map(|(&m, u)| flip_probability(&MarginInstance::new(m, gamma, u.clone()).unwrap()))
            .collect();
        let lower = ps.iter().copied().fold(0.0, f64::max);
        let upper = ps.iter().sum::<f64>().min(1.0);
        let (lo, hi) = sandwich_bounds(&margins, &us, gamma)?;
        oracle_err = oracle_err.max((lo - lower).abs()).max((hi - upper).abs());
        let emp = mc_multiclass_error(&margins, &us, gamma, n, &mut derived(SEED, "acc-sandwich-mc", i as u64))?;
        let se = binomial_se(emp, n).max(1.0 / n as f64);
        if emp < lower - 3.0 * se || emp > upper + 3.0 * se {
            misses += 1;
        }
    }
    verdict(misses == 0 && oracle_err < 1e-12, format!("{misses}/100 instances outside [lower - 3se, upper + 3se]"))
}

fn linearization() -> anyhow::Result<Verdict> {
    let set = linearization_checks(SEED)?;
    let get = |name: &str| set.rows.iter().find(|r| r.check == name).map(|r| r.empirical).unwrap_or(f64::INFINITY);
    let (lin, jvp, mul) = (get("linear_shift"), get("relu_jvp"), get("mul_increment"));
    verdict(
        lin <= 1e-9 && jvp < 1e-5 && mul < 1e-7,
        format!("linear {lin:.2e}, relu jvp {jvp:.2e}, mul increment {mul:.2e}"),
    )
}

fn gradient_suite() -> anyhow::Result<Verdict> {
    let mut worst: f64 = 0.0;
    let mut modes = 0;
    for (mi, mode) in DenyMode::ALL.into_iter().enumerate() {
        let spec = NetworkSpec {
            input_dim: 5,
            hidden: vec![7, 6],
            num_classes: 4,
            activation: Activation::Tanh,
            head: mode.required_head().unwrap_or(HeadKind::Plain),
        };
        let mut rng = derived(SEED, "acc-grad", mi as u64);
        let net = Network::new(spec.clone(), &mut rng)?;
        let plan = InjectionPlan { sites: vec![0, 1], kind: InjectorKind::Mul, gamma: 0.6, ..Default::default() };
        let bank = KeyBank::new(&plan, &spec.site_widths(), 2, KeySamplerConfig::default(), rng.random())?;
        let x = Array2::from_shape_fn((6, 5), |_| rng.sample::<f64, _>(StandardNormal));
        let y: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
        let cfg = DenyConfig {
            mode,
            lambda: 0.7,
            deny_on: vec![InvalidPath::WrongKey, InvalidPath::NoKey],
            margin: 2.0,
            entropy_gap: 0.1,
            warmup_epochs: 0,
        };
        let stream = rng.random::<u64>();
        let loss = |n: &Network| total_loss(n, &plan, &bank, &cfg, x.view(), &y, 1, &mut seeded(stream)).map(|o| o.loss);
        let analytic = total_loss(&net, &plan, &bank, &cfg, x.view(), &y, 1, &mut seeded(stream))?.grads.flat_params();
        let theta = net.flat_params();
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            tp[i] += h;
            let mut tm = theta.clone();
            tm[i] -= h;
            let fd = (loss(&Network::from_flat(spec.clone(), &tp)?)? - loss(&Network::from_flat(spec.clone(), &tm)?)?) / (2.0 * h);
            let a = analytic[i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
        modes += 1;
    }
    verdict(worst < 1e-4 && modes == 8, format!("baseline + 7 deny losses, worst elementwise rel error {worst:.2e}"))
}

fn train(preset: &str) -> anyhow::Result<(ExperimentConfig, TrainOutcome, Duration)> {
    let cfg = ExperimentConfig::preset(preset)?;
    let (train, test) = cfg.load_data()?;
    let t0 = Instant::now();
    let out = run_training_on(&cfg, &train, &test)?;
    Ok((cfg, out, t0.elapsed()))
}

fn absorption() -> anyhow::Result<Verdict> {
    let (_, out, dt) = train("mnist_baseline")?;
    let c = out.final_report(Protocol::Correct).top1;
    let w = out.final_report(Protocol::Wrong).top1;
    let secs = dt.as_secs_f64();
    verdict(
        (w - c).abs() <= 0.02 && c >= 0.93 && w >= 0.93 && secs < 600.0,
        format!("correct {c:.4}, wrong {w:.4}, {secs:.0}s"),
    )
}

fn synthetic_separation() -> anyhow::Result<Verdict> {
    let (_, out, dt) = train("synthetic_add")?;
    let c = out.final_report(Protocol::Correct).top1;
    let w = out.final_report(Protocol::Wrong).top1;
    let secs = dt.as_secs_f64();
    verdict(c - w >= 0.10 && secs < 60.0, format!("correct {c:.4}, wrong {w:.4}, {secs:.1}s"))
}

fn mode_b(run: &(ExperimentConfig, TrainOutcome, Duration)) -> anyhow::Result<Verdict> {
    let out = &run.1;
    let c = out.final_report(Protocol::Correct).semantic_acc;
    let wr = out.final_report(Protocol::Wrong).reject_mass;
    let ws = out.final_report(Protocol::Wrong).semantic_acc;
    let secs = run.2.as_secs_f64();
    verdict(
        c >= 0.95 && wr >= 0.95 && ws <= 0.02 && secs < 900.0,
        format!("correct semantic {c:.4}, wrong reject {wr:.4}, wrong semantic {ws:.4}, {secs:.0}s"),
    )
}

fn attack_probes(run: &(ExperimentConfig, TrainOutcome, Duration)) -> anyhow::Result<Verdict> {
    let (cfg, out, _) = run;
    let (train, test) = cfg.load_data()?;
    let rows = run_attack_suite(&out.network, &cfg.injection, &out.bank, &train, &test, &cfg.attack, derived(SEED, "acc-attack", 0).random())?;
    let find = |k: AttackKind| rows.iter().find(|r| r.attack == k).cloned();
    let need = |k: AttackKind| find(k).ok_or_else(|| anyhow::anyhow!("missing {}", k.name()));
    let reference = need(AttackKind::InSpan)?;
    let out_span = need(AttackKind::OutOfSpan)?;
    let budgets_ok = cfg.attack.budget == 300 && cfg.attack.steps == 300;
    let mut pass = budgets_ok && out_span.semantic_acc <= 0.02 && out_span.reject_mass >= 0.95;
    let mut parts = vec![format!("in-span {:.4}", reference.semantic_acc)];
    for k in [AttackKind::Adaptive, AttackKind::Blackbox, AttackKind::Gradient] {
        let r: AttackResult = need(k)?;
        pass &= (r.semantic_acc - reference.semantic_acc).abs() <= 0.02 && r.reject_mass <= 0.02;
        parts.push(format!("{} {:.4}/{:.4}", k.name(), r.semantic_acc, r.reject_mass));
    }
    parts.push(format!("out-of-span {:.4}/{:.4}", out_span.semantic_acc, out_span.reject_mass));
    verdict(pass, parts.join(", "))
}

fn sweep(run: &(ExperimentConfig, TrainOutcome, Duration)) -> anyhow::Result<Verdict> {
    let (anchor, out, _) = run;
    let (train, test) = anchor.load_data()?;
    let mut cache = SweepCache::default();
    cache.insert(anchor, out);
    let mut rows = Vec::new();
    let mut failing = Vec::new();
    for spec in SweepSpec::from_config(anchor) {
        for (v, row) in spec.values.clone().iter().zip(run_sweep(&spec, &train, &test, &mut cache)?) {
            let gamma = v.apply(anchor).injection.gamma;
            if gamma <= 1.0 && row.wrong_reject < 0.9 {
                failing.push(format!("{:?}={} reject {:.4}", row.factor, row.value, row.wrong_reject));
            }
            rows.push(row);
        }
    }
    let gamma2 = rows.iter().find(|r| r.value == "2" && factor_is_gamma(r));
    let min_reject = rows
        .iter()
        .filter(|r| !(r.value == "2" && factor_is_gamma(r)))
        .map(|r| r.wrong_reject)
        .fold(1.0, f64::min);
    verdict(
        failing.is_empty() && rows.len() == 14 && gamma2.is_some(),
        if failing.is_empty() {
            let g2 = gamma2.map(|r| format!("gamma=2 reject {:.4}, no-key semantic {:.4}", r.wrong_reject, r.no_key_semantic));
            format!("{} rows, min wrong reject with gamma <= 1: {min_reject:.4}; {}", rows.len(), g2.unwrap_or_default())
        } else {
            failing.join("; ")
        },
    )
}

fn factor_is_gamma(r: &SweepRow) -> bool {
    r.factor == SweepFactor::Gamma
}

fn report(id: usize, name: &str, r: anyhow::Result<Verdict>) -> bool {
    match r {
        Ok(v) => {
            println!("{} [{id:>2}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
            v.pass
        }
        Err(e) => {
            println!("FAIL [{id:>2}] {name}: error: {e:#}");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= report(1, "beta energy moments", beta_moments());
    ok &= report(2, "beta chebyshev tails", beta_chebyshev());
    ok &= report(3, "margin flip tail", margin_tail());
    ok &= report(4, "multiclass sandwich", multiclass_sandwich());
    ok &= report(5, "linearization", linearization());
    ok &= report(6, "gradient suite", gradient_suite());
    ok &= report(7, "absorption pattern (mnist baseline)", absorption());
    ok &= report(8, "synthetic separation (add)", synthetic_separation());
    match train("mnist_mode_b") {
        Ok(run) => {
            ok &= report(9, "mode b gating (mnist)", mode_b(&run));
            ok &= report(10, "attack probes", attack_probes(&run));
            ok &= report(11, "sweep harness", sweep(&run));
        }
        Err(e) => {
            for (id, name) in [(9, "mode b gating (mnist)"), (10, "attack probes"), (11, "sweep harness")] {
                ok &= report(id, name, Err(anyhow::anyhow!("training failed: {e:#}")));
            }
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
