//! Browser bindings. Every export returns a JSON string the page plots.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use spankey::deny::Protocol;
use spankey::harness::{run_training, ExperimentConfig};
use spankey::keyspace::{energy_split, make_basis, sample_isotropic_key, KeySamplerConfig};
use spankey::rng::derived;
use spankey::theory::{beta_energy_mean, beta_energy_variance, flip_probability, flip_tail_bound, mc_flip_rate, MarginInstance};

fn to_js(r: Result<Value, String>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Flip probability `Φ(−M/(γσ))`, its Gaussian tail bound and a Monte Carlo
/// estimate, on `points` ratios evenly spaced in `[0, max_ratio]`.
pub fn flip_curve_value(max_ratio: f64, points: usize, draws: usize, seed: u64) -> Result<Value, String> {
    if !(max_ratio > 0.0) || points < 2 || draws == 0 {
        return Err("need max_ratio > 0, points >= 2 and draws > 0".into());
    }
    let mut rows = Vec::with_capacity(points);
    for i in 0..points {
        let ratio = max_ratio * i as f64 / (points - 1) as f64;
        let inst = MarginInstance::with_ratio(ratio, 1.0, 1.0, 4).map_err(err)?;
        let mc = mc_flip_rate(&inst, draws, &mut derived(seed, "web-flip", i as u64));
        rows.push(json!({
            "ratio": ratio,
            "phi": flip_probability(&inst),
            "bound": flip_tail_bound(&inst),
            "mc": mc,
        }));
    }
    Ok(json!({ "draws": draws, "rows": rows }))
}

#[wasm_bindgen]
pub fn flip_curve(max_ratio: f64, points: usize, draws: usize, seed: u32) -> Result<String, JsError> {
    to_js(flip_curve_value(max_ratio, points, draws, seed as u64))
}

fn beta_pdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    let ln_b = libm::lgamma(a) + libm::lgamma(b) - libm::lgamma(a + b);
    ((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_b).exp()
}

/// Histogram of the out-of-span energy fraction of isotropic keys against
/// the `Beta((d−m)/2, m/2)` density.
pub fn energy_histogram_value(d: usize, m: usize, draws: usize, bins: usize, seed: u64) -> Result<Value, String> {
    if bins == 0 {
        return Err("need at least one bin".into());
    }
    let basis = make_basis(d, m, seed).map_err(err)?;
    let cfg = KeySamplerConfig::default();
    let mut rng = derived(seed, "web-beta", 0);
    let etas = (0..draws.max(2))
        .map(|_| energy_split(&basis, sample_isotropic_key(d, &cfg, &mut rng).view()).map(|s| s.eta))
        .collect::<Result<Vec<f64>, _>>()
        .map_err(err)?;
    let n = etas.len() as f64;
    let mean = etas.iter().sum::<f64>() / n;
    let variance = etas.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1.0);
    let (theory_mean, theory_variance) = (beta_energy_mean(d, m), beta_energy_variance(d, m));
    let (a, b) = ((d - m) as f64 / 2.0, m as f64 / 2.0);
    // Window: mean ± 5 sd, clipped to [0, 1].
    let sd = theory_variance.sqrt();
    let lo = (theory_mean - 5.0 * sd).max(0.0);
    let hi = (theory_mean + 5.0 * sd).min(1.0);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &e in &etas {
        if e >= lo && e < hi {
            counts[(((e - lo) / width) as usize).min(bins - 1)] += 1;
        }
    }
    let rows: Vec<Value> = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let mid = lo + (i as f64 + 0.5) * width;
            json!({ "x": mid, "density": c as f64 / (n * width), "beta": beta_pdf(mid, a, b) })
        })
        .collect();
    Ok(json!({
        "d": d, "m": m, "draws": etas.len(),
        "mean": mean, "theory_mean": theory_mean,
        "variance": variance, "theory_variance": theory_variance,
        "rows": rows,
    }))
}

#[wasm_bindgen]
pub fn energy_histogram(d: usize, m: usize, draws: usize, bins: usize, seed: u32) -> Result<String, JsError> {
    to_js(energy_histogram_value(d, m, draws, bins, seed as u64))
}

/// Trains a small synthetic model and reports the three key protocols.
pub fn synthetic_protocols_value(injector: &str, gamma: f64, m: usize, epochs: usize, seed: u64) -> Result<Value, String> {
    let preset = match injector {
        "add" => "synthetic_add",
        "mul" => "synthetic_mul",
        other => return Err(format!("injector must be add or mul, got {other:?}")),
    };
    let cfg = ExperimentConfig::preset(preset)
        .and_then(|c| {
            c.with_overrides(&[
                format!("injection.gamma={gamma:?}"),
                format!("basis.m={m}"),
                format!("epochs={epochs}"),
                format!("seed={seed}"),
                "dataset.synthetic.n=1500".into(),
            ])
        })
        .map_err(err)?;
    cfg.validate().map_err(err)?;
    let out = run_training(&cfg).map_err(err)?;
    let rows: Vec<Value> = Protocol::ALL
        .iter()
        .map(|&p| {
            let r = out.final_report(p);
            json!({ "protocol": p.name(), "top1": r.top1, "semantic_acc": r.semantic_acc, "mean_entropy": r.mean_entropy })
        })
        .collect();
    let curve: Vec<Value> = out
        .log
        .iter()
        .map(|e| {
            let get = |p: Protocol| {
                e.reports
                    .iter()
                    .find(|(s, r)| *s == spankey::data::SplitTag::Test && r.protocol == p)
                    .map(|(_, r)| r.top1)
            };
            json!({ "epoch": e.epoch, "no_key": get(Protocol::NoKey), "correct": get(Protocol::Correct), "wrong": get(Protocol::Wrong) })
        })
        .collect();
    Ok(json!({ "config_hash": out.checkpoint.config_hash, "final": rows, "curve": curve }))
}

#[wasm_bindgen]
pub fn synthetic_protocols(injector: &str, gamma: f64, m: usize, epochs: usize, seed: u32) -> Result<String, JsError> {
    to_js(synthetic_protocols_value(injector, gamma, m, epochs, seed as u64))
}
