//! Monte Carlo and closed-form checks for wrong-key margin flips and
//! out-of-span energy statistics, plus the effective-sensitivity diagnostic.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::injection::{InjectionPlan, KeyBank};
use crate::keyspace::{energy_split, make_basis};
use crate::nn::{ForwardTrace, Network};
use crate::rng::derived;
use crate::{Error, Result};

/// Draws per Monte Carlo shard; each shard uses its own derived seed.
pub const MC_SHARD: usize = 1 << 16;

/// Standard normal CDF through `erfc` (libm, error near 1 ulp).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `Φ⁻¹(p)` by bisection on [`normal_cdf`], for `p ∈ (0, 1)`.
pub fn normal_quantile(p: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `√(p(1−p)/n)`.
pub fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// A margin `M ≥ 0`, strength `γ > 0` and sensitivity `u` with `σ = ‖u‖ > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginInstance {
    margin: f64,
    gamma: f64,
    u: Array1<f64>,
    sigma: f64,
}

impl MarginInstance {
    pub fn new(margin: f64, gamma: f64, u: Array1<f64>) -> Result<Self> {
        if !(margin >= 0.0 && margin.is_finite()) {
            return Err(Error::Config(format!("margin must be finite and >= 0, got {margin}")));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
        }
        let sigma = u.dot(&u).sqrt();
        if !(sigma > 0.0) {
            return Err(Error::Numerical("sensitivity vector is zero".into()));
        }
        Ok(MarginInstance { margin, gamma, u, sigma })
    }

    /// Instance with `u = σ e₁` in `dim` dimensions and the given ratio `M/(γσ)`.
    pub fn with_ratio(ratio: f64, gamma: f64, sigma: f64, dim: usize) -> Result<Self> {
        let mut u = Array1::zeros(dim.max(1));
        u[0] = sigma;
        MarginInstance::new(ratio * gamma * sigma, gamma, u)
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn u(&self) -> &Array1<f64> {
        &self.u
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn ratio(&self) -> f64 {
        self.margin / (self.gamma * self.sigma)
    }
}

/// `Φ(−M/(γσ))`.
pub fn flip_probability(inst: &MarginInstance) -> f64 {
    normal_cdf(-inst.ratio())
}

/// `exp(−M²/(2γ²σ²))`.
pub fn flip_tail_bound(inst: &MarginInstance) -> f64 {
    let r = inst.ratio();
    (-0.5 * r * r).exp()
}

fn shards(n: usize) -> impl Iterator<Item = (u64, usize)> {
    (0..n.div_ceil(MC_SHARD)).map(move |s| (s as u64, MC_SHARD.min(n - s * MC_SHARD)))
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| rng.sample(StandardNormal))
}

/// Fraction of `n` isotropic draws `k` with `M + γ uᵀk < 0`.
pub fn mc_flip_rate<R: Rng + ?Sized>(inst: &MarginInstance, n: usize, rng: &mut R) -> f64 {
    let base: u64 = rng.random();
    let mut flips = 0usize;
    for (s, len) in shards(n) {
        let mut r = derived(base, "mc-flip", s);
        for _ in 0..len {
            let t = inst.u.iter().map(|&ui| ui * r.sample::<f64, _>(StandardNormal)).sum::<f64>();
            flips += usize::from(inst.margin + inst.gamma * t < 0.0);
        }
    }
    flips as f64 / n.max(1) as f64
}

fn check_competitors(margins: &[f64], us: &[Array1<f64>]) -> Result<usize> {
    if margins.is_empty() || margins.len() != us.len() {
        return Err(Error::Dimension(format!("{} margins for {} sensitivity vectors", margins.len(), us.len())));
    }
    let d = us[0].len();
    if us.iter().any(|u| u.len() != d) {
        return Err(Error::Dimension("sensitivity vectors differ in length".into()));
    }
    Ok(d)
}

/// `(max_c p_c, min(1, Σ_c p_c))` for the per-competitor flip probabilities.
pub fn sandwich_bounds(margins: &[f64], us: &[Array1<f64>], gamma: f64) -> Result<(f64, f64)> {
    check_competitors(margins, us)?;
    let ps = margins
        .iter()
        .zip(us)
        .map(|(&m, u)| MarginInstance::new(m, gamma, u.clone()).map(|i| flip_probability(&i)))
        .collect::<Result<Vec<_>>>()?;
    let lower = ps.iter().copied().fold(0.0, f64::max);
    let upper = ps.iter().sum::<f64>().min(1.0);
    Ok((lower, upper))
}

/// Fraction of shared isotropic draws where some competitor flips.
pub fn mc_multiclass_error<R: Rng + ?Sized>(
    margins: &[f64],
    us: &[Array1<f64>],
    gamma: f64,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    let d = check_competitors(margins, us)?;
    let mut u_mat = Array2::zeros((us.len(), d));
    for (mut row, u) in u_mat.rows_mut().into_iter().zip(us) {
        row.assign(u);
    }
    let base: u64 = rng.random();
    let mut errors = 0usize;
    for (s, len) in shards(n) {
        let mut r = derived(base, "mc-multiclass", s);
        for _ in 0..len {
            let k = gaussian_vec(&mut r, d);
            let t = u_mat.dot(&k);
            errors += usize::from(margins.iter().zip(t.iter()).any(|(&m, &ti)| m + gamma * ti < 0.0));
        }
    }
    Ok(errors as f64 / n.max(1) as f64)
}

/// `(d − m)/d`.
pub fn beta_energy_mean(d: usize, m: usize) -> f64 {
    (d - m) as f64 / d as f64
}

/// `2m(d − m)/(d²(d + 2))`.
pub fn beta_energy_variance(d: usize, m: usize) -> f64 {
    let (d, m) = (d as f64, m as f64);
    2.0 * m * (d - m) / (d * d * (d + 2.0))
}

/// `min(1, Var[η]/t²)`.
pub fn chebyshev_bound(d: usize, m: usize, t: f64) -> f64 {
    (beta_energy_variance(d, m) / (t * t)).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailCheck {
    pub t: f64,
    pub empirical: f64,
    pub bound: f64,
    pub se: f64,
}

impl TailCheck {
    pub fn holds(&self) -> bool {
        self.empirical <= self.bound + 3.0 * self.se
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaEnergyReport {
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub theory_mean: f64,
    pub theory_variance: f64,
    pub tails: Vec<TailCheck>,
    pub in_energy_mean: f64,
    pub out_energy_mean: f64,
    pub in_energy_var: f64,
    pub out_energy_var: f64,
    /// Sample covariance of `‖Pk‖²` and `‖(I−P)k‖²`.
    pub energy_cov: f64,
    pub energy_corr: f64,
}

impl BetaEnergyReport {
    /// `3·√(Var/N)` with the theoretical variance.
    pub fn mean_tolerance(&self) -> f64 {
        3.0 * (self.theory_variance / self.n as f64).sqrt()
    }

    pub fn mean_ok(&self) -> bool {
        (self.mean - self.theory_mean).abs() <= self.mean_tolerance()
    }

    pub fn variance_rel_error(&self) -> f64 {
        (self.variance - self.theory_variance).abs() / self.theory_variance
    }

    /// Standard error of a sample correlation near zero, `1/√N`.
    pub fn corr_se(&self) -> f64 {
        1.0 / (self.n as f64).sqrt()
    }
}

/// Out-of-span energy fraction of `n` isotropic draws against a random
/// rank-`m` basis in `ℝ^d`, with Chebyshev tail checks at each `t`.
pub fn mc_beta_energy<R: Rng + ?Sized>(d: usize, m: usize, n: usize, t_grid: &[f64], rng: &mut R) -> Result<BetaEnergyReport> {
    if n < 2 {
        return Err(Error::Config("need at least two draws".into()));
    }
    let base: u64 = rng.random();
    let basis = make_basis(d, m, derived(base, "mc-beta-basis", 0).random())?;
    let mut etas = Vec::with_capacity(n);
    let mut ins = Vec::with_capacity(n);
    let mut outs = Vec::with_capacity(n);
    for (s, len) in shards(n) {
        let mut r = derived(base, "mc-beta", s);
        for _ in 0..len {
            let k = gaussian_vec(&mut r, d);
            let e = energy_split(&basis, k.view())?;
            etas.push(e.eta);
            ins.push(e.in_energy);
            outs.push(e.out_energy);
        }
    }
    let (mean, variance) = mean_var(&etas);
    let (in_mean, in_var) = mean_var(&ins);
    let (out_mean, out_var) = mean_var(&outs);
    let cov = ins.iter().zip(&outs).map(|(a, b)| (a - in_mean) * (b - out_mean)).sum::<f64>() / (n - 1) as f64;
    let theory_mean = beta_energy_mean(d, m);
    let tails = t_grid
        .iter()
        .map(|&t| {
            let hits = etas.iter().filter(|&&e| (e - theory_mean).abs() >= t).count();
            let p = hits as f64 / n as f64;
            TailCheck { t, empirical: p, bound: chebyshev_bound(d, m, t), se: binomial_se(p, n) }
        })
        .collect();
    Ok(BetaEnergyReport {
        d,
        m,
        n,
        mean,
        variance,
        theory_mean,
        theory_variance: beta_energy_variance(d, m),
        tails,
        in_energy_mean: in_mean,
        out_energy_mean: out_mean,
        in_energy_var: in_var,
        out_energy_var: out_var,
        energy_cov: cov,
        energy_corr: cov / (in_var * out_var).sqrt(),
    })
}

/// Sample mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// `u_{y,c} = J_siteᵀ (w_y − w_c)` at row `row` of the trace, and `‖u‖`.
pub fn effective_sensitivity(
    net: &Network,
    trace: &ForwardTrace,
    site: usize,
    row: usize,
    y: usize,
    c: usize,
) -> Result<(Array1<f64>, f64)> {
    let classes = net.num_classes();
    if y >= classes || c >= classes {
        return Err(Error::Dimension(format!("classes ({y}, {c}) outside {classes}")));
    }
    let w = &net.readout().weight;
    let diff = &w.row(y) - &w.row(c);
    let u = net.vjp(trace, site, row, diff.view())?;
    let sigma = u.dot(&u).sqrt();
    Ok((u, sigma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSummary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl SigmaSummary {
    pub fn from_values(values: &[f64]) -> SigmaSummary {
        if values.is_empty() {
            return SigmaSummary { count: 0, mean: 0.0, min: 0.0, q25: 0.0, median: 0.0, q75: 0.0, max: 0.0 };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        SigmaSummary {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            q25: q(0.25),
            median: q(0.5),
            q75: q(0.75),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteAbsorption {
    pub site: usize,
    pub overall: SigmaSummary,
    /// Mean σ for each competing class `c` over inputs with `y ≠ c`.
    pub per_class_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionReport {
    pub n_inputs: usize,
    pub sites: Vec<SiteAbsorption>,
}

/// σ statistics at every injection site over the first `n_inputs` rows,
/// linearized at the correct-key forward (one fresh key for the batch).
pub fn absorption_report<R: Rng + ?Sized>(
    net: &Network,
    plan: &InjectionPlan,
    bank: &KeyBank,
    data: &Dataset,
    n_inputs: usize,
    rng: &mut R,
) -> Result<AbsorptionReport> {
    let n = n_inputs.min(data.len());
    if n == 0 {
        return Err(Error::Config("absorption report needs at least one input".into()));
    }
    let (x, y) = data.batch(n, 0);
    let keys = bank.sample_correct(rng);
    let trace = net.forward(x, plan, Some(&keys))?;
    let classes = net.num_classes();
    let mut sites = Vec::with_capacity(plan.sites.len());
    for &site in &plan.sites {
        let mut all = Vec::with_capacity(n * (classes - 1));
        let mut per_class = vec![(0.0, 0usize); classes];
        for (row, &label) in y.iter().enumerate() {
            for c in (0..classes).filter(|&c| c != label) {
                let (_, sigma) = effective_sensitivity(net, &trace, site, row, label, c)?;
                all.push(sigma);
                per_class[c].0 += sigma;
                per_class[c].1 += 1;
            }
        }
        sites.push(SiteAbsorption {
            site,
            overall: SigmaSummary::from_values(&all),
            per_class_mean: per_class.iter().map(|&(s, k)| if k == 0 { 0.0 } else { s / k as f64 }).collect(),
        });
    }
    Ok(AbsorptionReport { n_inputs: n, sites })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SplitTag;
    use crate::injection::InjectorKind;
    use crate::keyspace::KeySamplerConfig;
    use crate::nn::{Activation, HeadKind, NetworkSpec};
    use crate::rng::seeded;
    use ndarray::array;

    /// Φ by midpoint-rule integration of the density, an oracle independent of erfc.
    fn phi_by_quadrature(x: f64) -> f64 {
        let lo = -12.0;
        let steps = 400_000;
        let h = (x - lo) / steps as f64;
        let c = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        (0..steps).map(|i| lo + (i as f64 + 0.5) * h).map(|t| c * (-0.5 * t * t).exp() * h).sum()
    }

    #[test]
    fn normal_cdf_against_quadrature() {
        for x in [-3.0, -2.0, -1.0, -0.5, 0.0, 0.7, 2.5] {
            assert!((normal_cdf(x) - phi_by_quadrature(x)).abs() < 1e-10, "x = {x}");
        }
    }

    #[test]
    fn flip_probability_examples() {
        let at = |r: f64| flip_probability(&MarginInstance::with_ratio(r, 0.5, 2.0, 3).unwrap());
        assert_eq!(at(0.0), 0.5);
        assert!((at(2.0) - 0.0227501).abs() < 1e-7);
        assert!((at(1.0) - 0.158655).abs() < 1e-6);
        let tiny = MarginInstance::new(1.0, 1e-3, array![1.0]).unwrap();
        assert!(flip_probability(&tiny) < 1e-300);
        assert!(MarginInstance::new(1.0, 1.0, array![0.0, 0.0]).is_err());
        assert!(MarginInstance::new(1.0, 0.0, array![1.0]).is_err());
    }

    #[test]
    fn tail_bound_examples() {
        let inst = MarginInstance::with_ratio(2.0, 1.0, 1.0, 1).unwrap();
        assert!((flip_tail_bound(&inst) - (-2f64).exp()).abs() < 1e-15);
        assert!(flip_tail_bound(&inst) >= flip_probability(&inst));
        let zero = MarginInstance::with_ratio(0.0, 1.0, 1.0, 1).unwrap();
        assert_eq!(flip_tail_bound(&zero), 1.0);
    }

    #[test]
    fn bound_dominates_and_probability_is_monotone() {
        let mut rng = seeded(4);
        for _ in 0..10_000 {
            let m = rng.random_range(0.0..5.0);
            let g = rng.random_range(0.01..3.0);
            let s = rng.random_range(0.01..3.0);
            let inst = MarginInstance::with_ratio(m / (g * s), g, s, 1).unwrap();
            assert!(flip_tail_bound(&inst) >= flip_probability(&inst));
        }
        let p = |m: f64, g: f64, s: f64| flip_probability(&MarginInstance::new(m, g, array![s]).unwrap());
        assert!(p(1.0, 0.6, 1.0) > p(1.0, 0.5, 1.0));
        assert!(p(1.0, 0.5, 1.1) > p(1.0, 0.5, 1.0));
        assert!(p(0.9, 0.5, 1.0) > p(1.0, 0.5, 1.0));
    }

    #[test]
    fn mc_flip_matches_phi() {
        let inst = MarginInstance::new(1.0, 0.5, array![1.2, -0.9, 0.5]).unwrap();
        let n = 200_000;
        let emp = mc_flip_rate(&inst, n, &mut seeded(8));
        let p = flip_probability(&inst);
        assert!((emp - p).abs() <= 3.0 * binomial_se(p, n), "{emp} vs {p}");
        let huge = MarginInstance::new(1e6, 0.5, array![1.0]).unwrap();
        assert_eq!(mc_flip_rate(&huge, 1000, &mut seeded(1)), 0.0);
    }

    #[test]
    fn sandwich_examples() {
        // Two orthogonal directions with p = 0.1 each.
        let r = -normal_quantile(0.1);
        let us = vec![array![1.0, 0.0], array![0.0, 1.0]];
        let (lo, hi) = sandwich_bounds(&[r, r], &us, 1.0).unwrap();
        assert!((lo - 0.1).abs() < 1e-9 && (hi - 0.2).abs() < 1e-9);
        let n = 200_000;
        let emp = mc_multiclass_error(&[r, r], &us, 1.0, n, &mut seeded(2)).unwrap();
        let indep = 1.0 - 0.9 * 0.9;
        assert!((emp - indep).abs() < 3.0 * binomial_se(indep, n));
        assert!(emp >= lo && emp <= hi);

        let (lo, hi) = sandwich_bounds(&[0.7], &[array![1.0, 1.0]], 0.5).unwrap();
        assert_eq!(lo, hi);
        let (lo, hi) = sandwich_bounds(&[1e6, 1e6], &us, 1.0).unwrap();
        assert!(lo < 1e-300 && hi < 1e-300);
        assert!(sandwich_bounds(&[1.0], &us, 1.0).is_err());
    }

    #[test]
    fn quantile_inverts_the_cdf() {
        for p in [1e-6, 0.01, 0.1, 0.5, 0.9] {
            assert!((normal_cdf(normal_quantile(p)) - p).abs() < 1e-12 * p.max(1e-3));
        }
        assert!((normal_quantile(0.975) - 1.959964).abs() < 1e-6);
    }

    #[test]
    fn beta_moment_arithmetic() {
        assert_eq!(beta_energy_mean(64, 8), 0.875);
        assert!((beta_energy_variance(64, 8) - 3.314e-3).abs() < 1e-6);
        assert_eq!(beta_energy_mean(2, 1), 0.5);
        assert_eq!(chebyshev_bound(64, 8, 1e-6), 1.0);
    }

    #[test]
    fn beta_energy_small_run() {
        let rep = mc_beta_energy(16, 4, 40_000, &[0.05, 0.1], &mut seeded(3)).unwrap();
        assert!(rep.mean_ok(), "{rep:?}");
        assert!(rep.variance_rel_error() < 0.05);
        assert!(rep.tails.iter().all(TailCheck::holds));
        assert!((rep.in_energy_mean - 4.0).abs() < 3.0 * (8.0f64 / 40_000.0).sqrt());
        assert!(rep.energy_corr.abs() < 3.0 * rep.corr_se());
        let sym = mc_beta_energy(2, 1, 40_000, &[], &mut seeded(5)).unwrap();
        assert!((sym.mean - 0.5).abs() < 3.0 * (0.125f64 / 40_000.0).sqrt());
    }

    fn small_net(act: Activation, seed: u64) -> Network {
        let spec = NetworkSpec { input_dim: 5, hidden: vec![7, 6], num_classes: 3, activation: act, head: HeadKind::Plain };
        Network::new(spec, &mut seeded(seed)).unwrap()
    }

    #[test]
    fn sensitivity_on_a_linear_net_is_the_transposed_product() {
        let net = small_net(Activation::Identity, 1);
        let plan = InjectionPlan { sites: vec![1], kind: InjectorKind::Add, gamma: 0.0, ..Default::default() };
        let x = Array2::from_elem((1, 5), 0.3);
        let trace = net.forward(x.view(), &plan, None).unwrap();
        let (u, sigma) = effective_sensitivity(&net, &trace, 1, 0, 0, 2).unwrap();
        let w = &net.readout().weight;
        let expected = net.layers()[1].weight.t().dot(&(&w.row(0) - &w.row(2)));
        assert!((&u - &expected).iter().all(|v| v.abs() < 1e-12));
        assert!((sigma - expected.dot(&expected).sqrt()).abs() < 1e-12);
        let (u0, s0) = effective_sensitivity(&net, &trace, 1, 0, 1, 1).unwrap();
        assert!(u0.iter().all(|&v| v == 0.0) && s0 == 0.0);
    }

    #[test]
    fn sensitivity_matches_margin_directional_derivative() {
        let net = small_net(Activation::Tanh, 2);
        let plan = InjectionPlan { sites: vec![1], kind: InjectorKind::Add, gamma: 1.0, ..Default::default() };
        let x = Array2::from_shape_fn((1, 5), |(_, j)| 0.2 * j as f64 - 0.3);
        let trace = net.forward(x.view(), &plan, None).unwrap();
        let (u, _) = effective_sensitivity(&net, &trace, 1, 0, 0, 1).unwrap();
        let v = Array1::from_shape_fn(7, |i| ((i * 7 % 5) as f64 - 2.0) / 3.0);
        let margin = |eps: f64| {
            let key = crate::keyspace::DynamicKey {
                site: 1,
                kind: crate::keyspace::KeyKind::Wrong,
                values: &v * eps,
                alpha: None,
            };
            let t = net.forward(x.view(), &plan, Some(std::slice::from_ref(&key))).unwrap();
            t.logits[[0, 0]] - t.logits[[0, 1]]
        };
        let h = 1e-5;
        let fd = (margin(h) - margin(-h)) / (2.0 * h);
        let an = u.dot(&v);
        assert!((fd - an).abs() / an.abs().max(1e-8) < 1e-5, "{fd} vs {an}");
    }

    #[test]
    fn absorption_reports_share_shape() {
        let spec = NetworkSpec { input_dim: 8, hidden: vec![12, 10], num_classes: 3, activation: Activation::Relu, head: HeadKind::Plain };
        let plan = InjectionPlan { sites: vec![0, 2], kind: InjectorKind::Mul, gamma: 0.5, ..Default::default() };
        let bank = KeyBank::new(&plan, &spec.site_widths(), 2, KeySamplerConfig::default(), 1).unwrap();
        let (train, _) = crate::data::gen_synthetic(100, 8, 3, 3.0, 1).unwrap();
        assert_eq!(train.split(), SplitTag::Train);
        let a = absorption_report(&Network::new(spec.clone(), &mut seeded(1)).unwrap(), &plan, &bank, &train, 20, &mut seeded(0)).unwrap();
        let b = absorption_report(&Network::new(spec, &mut seeded(2)).unwrap(), &plan, &bank, &train, 20, &mut seeded(0)).unwrap();
        assert_eq!(a.sites.len(), b.sites.len());
        for (sa, sb) in a.sites.iter().zip(&b.sites) {
            assert_eq!(sa.site, sb.site);
            assert_eq!(sa.overall.count, sb.overall.count);
            assert_eq!(sa.per_class_mean.len(), sb.per_class_mean.len());
            assert!(sa.overall.min >= 0.0);
        }
    }
}
