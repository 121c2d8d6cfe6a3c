use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::{Activation, Network};
use crate::injection::{InjectionPlan, InjectionPoint, InjectorKind};
use crate::keyspace::DynamicKey;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AppliedKey {
    pub site: usize,
    pub values: Array1<f64>,
}

/// Everything recorded by one batched forward pass.
///
/// Rows are samples. For a network with `L` hidden layers:
/// `acts[i]` (`i = 0..=L`) is the post-injection value at site `i`,
/// `gate_in[i]` is the argument of hidden layer `i + 1`'s nonlinearity,
/// `pre[i]` is the affine output of layer `i` (the last is the logits).
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Array2<f64>,
    pub acts: Vec<Array2<f64>>,
    pub gate_in: Vec<Array2<f64>>,
    pub pre: Vec<Array2<f64>>,
    /// Pre-injection value at each injected site.
    pub raw: Vec<Option<Array2<f64>>>,
    pub applied: Vec<AppliedKey>,
    pub kind: InjectorKind,
    pub gamma: f64,
    pub point: InjectionPoint,
    pub activation: Activation,
    pub logits: Array2<f64>,
    pub reject_logit: Option<Array1<f64>>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }

    /// Number of affine layers recorded.
    pub fn depth(&self) -> usize {
        self.pre.len()
    }

    fn applied_at(&self, site: usize) -> Option<&AppliedKey> {
        self.applied.iter().find(|a| a.site == site)
    }

    /// Key objects equivalent to the ones applied, for replaying this trace.
    pub fn replay_keys(&self) -> Vec<DynamicKey> {
        self.applied
            .iter()
            .map(|a| DynamicKey {
                site: a.site,
                kind: crate::keyspace::KeyKind::Wrong,
                values: a.values.clone(),
                alpha: None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseGrad>,
    pub aux: Option<(Array1<f64>, f64)>,
    /// `∂L/∂k` for each applied key, in trace order.
    pub keys: Vec<Array1<f64>>,
    /// `∂L/∂x` per row.
    pub input: Array2<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .layers()
                .iter()
                .map(|l| DenseGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
            aux: net.aux().map(|a| (Array1::zeros(a.weight.len()), 0.0)),
            keys: Vec::new(),
            input: Array2::zeros((0, net.spec().input_dim)),
        }
    }

    /// Accumulates parameter gradients (key and input gradients are not merged).
    pub fn add_params(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
        if let (Some(a), Some(b)) = (self.aux.as_mut(), other.aux.as_ref()) {
            a.0 += &b.0;
            a.1 += b.1;
        }
    }

    pub fn param_slices(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.weight"), l.weight.as_slice().expect("standard layout")));
            out.push((format!("layers.{i}.bias"), l.bias.as_slice().expect("standard layout")));
        }
        if let Some(a) = self.aux.as_ref() {
            out.push(("aux.weight".into(), a.0.as_slice().expect("standard layout")));
            out.push(("aux.bias".into(), std::slice::from_ref(&a.1)));
        }
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.param_slices()
            .into_iter()
            .flat_map(|(_, s)| s.iter().copied())
            .collect()
    }
}

fn affine(a: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = a.dot(&w.t());
    out += b;
    out
}

impl Network {
    fn resolve_keys<'k>(
        &self,
        plan: &InjectionPlan,
        keys: Option<&'k [DynamicKey]>,
    ) -> Result<Vec<Option<&'k DynamicKey>>> {
        let n_sites = self.num_sites();
        plan.validate(n_sites)?;
        let widths = self.site_widths();
        let mut per_site: Vec<Option<&DynamicKey>> = vec![None; n_sites];
        let Some(keys) = keys else {
            return Ok(per_site);
        };
        if keys.len() != plan.sites.len() {
            return Err(Error::Dimension(format!(
                "{} keys for {} planned sites",
                keys.len(),
                plan.sites.len()
            )));
        }
        for (key, &site) in keys.iter().zip(&plan.sites) {
            if key.site != site {
                return Err(Error::Config(format!(
                    "key tagged for site {} supplied for planned site {site}",
                    key.site
                )));
            }
            if key.is_absent() {
                continue;
            }
            if key.values.len() != widths[site] {
                return Err(Error::Dimension(format!(
                    "key for site {site} has {} entries, site width is {}",
                    key.values.len(),
                    widths[site]
                )));
            }
            per_site[site] = Some(key);
        }
        Ok(per_site)
    }

    /// Batched forward pass. `keys = None` runs the uninjected network.
    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        plan: &InjectionPlan,
        keys: Option<&[DynamicKey]>,
    ) -> Result<ForwardTrace> {
        if x.ncols() != self.spec().input_dim {
            return Err(Error::Dimension(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.spec().input_dim
            )));
        }
        let per_site = self.resolve_keys(plan, keys)?;
        let act = self.spec().activation;
        let hidden = self.hidden_layers();
        let (kind, gamma, point) = (plan.kind, plan.gamma, plan.point);

        let mut acts = Vec::with_capacity(hidden + 1);
        let mut gate_in = Vec::with_capacity(hidden);
        let mut pre = Vec::with_capacity(hidden + 1);
        let mut raw: Vec<Option<Array2<f64>>> = vec![None; hidden + 1];
        let mut applied = Vec::new();

        let mut h0 = x.to_owned();
        if let Some(k) = per_site[0] {
            raw[0] = Some(h0.clone());
            kind.apply_rows(h0.view_mut(), k.values.view(), gamma);
            applied.push(AppliedKey { site: 0, values: k.values.clone() });
        }
        acts.push(h0);

        for i in 0..hidden {
            let layer = &self.layers()[i];
            let z = affine(&acts[i], &layer.weight, &layer.bias);
            let site = i + 1;
            let key = per_site[site];
            let (g, a) = match (key, point) {
                (Some(k), InjectionPoint::PreActivation) => {
                    raw[site] = Some(z.clone());
                    let mut g = z.clone();
                    kind.apply_rows(g.view_mut(), k.values.view(), gamma);
                    let a = g.mapv(|v| act.apply(v));
                    (g, a)
                }
                (Some(k), InjectionPoint::PostActivation) => {
                    let mut a = z.mapv(|v| act.apply(v));
                    raw[site] = Some(a.clone());
                    kind.apply_rows(a.view_mut(), k.values.view(), gamma);
                    (z.clone(), a)
                }
                (None, _) => {
                    let a = z.mapv(|v| act.apply(v));
                    (z.clone(), a)
                }
            };
            if let Some(k) = key {
                applied.push(AppliedKey { site, values: k.values.clone() });
            }
            pre.push(z);
            gate_in.push(g);
            acts.push(a);
        }

        let readout = self.readout();
        let logits = affine(&acts[hidden], &readout.weight, &readout.bias);
        pre.push(logits.clone());
        let reject_logit = self.aux().map(|aux| {
            let mut r = acts[hidden].dot(&aux.weight);
            r += aux.bias;
            r
        });
        Ok(ForwardTrace {
            input: x.to_owned(),
            acts,
            gate_in,
            pre,
            raw,
            applied,
            kind,
            gamma,
            point,
            activation: act,
            logits,
            reject_logit,
        })
    }

    /// Single-sample forward: returns the logit vector and the trace.
    pub fn forward_one(
        &self,
        x: ArrayView1<f64>,
        plan: &InjectionPlan,
        keys: Option<&[DynamicKey]>,
    ) -> Result<(Array1<f64>, ForwardTrace)> {
        let x2 = x.to_owned().insert_axis(Axis(0));
        let trace = self.forward(x2.view(), plan, keys)?;
        Ok((trace.logits.row(0).to_owned(), trace))
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        let widths = self.site_widths();
        let ok = trace.depth() == self.layers().len()
            && trace.acts.len() == widths.len()
            && trace.acts.iter().zip(&widths).all(|(a, &w)| a.ncols() == w)
            && trace.logits.ncols() == self.readout().bias.len()
            && trace.reject_logit.is_some() == self.aux().is_some();
        if !ok {
            return Err(Error::Dimension(
                "trace does not match this network (stale or foreign trace)".into(),
            ));
        }
        Ok(())
    }

    /// Reverse mode. `d_logits` is `∂L/∂z` per row, `d_reject` is `∂L/∂r`
    /// for the auxiliary head (ignored when the network has none).
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_logits: ArrayView2<f64>,
        d_reject: Option<ArrayView1<f64>>,
    ) -> Result<Gradients> {
        self.check_trace(trace)?;
        if d_logits.dim() != trace.logits.dim() {
            return Err(Error::Dimension(format!(
                "upstream gradient {:?} vs logits {:?}",
                d_logits.dim(),
                trace.logits.dim()
            )));
        }
        let hidden = self.hidden_layers();
        let act = trace.activation;
        let mut grads = Gradients::zeros_like(self);
        let mut key_grads: Vec<Option<Array1<f64>>> = vec![None; hidden + 1];
        let mut g = d_logits.to_owned();
        let mut input_grad = None;

        for i in (0..=hidden).rev() {
            let layer = &self.layers()[i];
            grads.layers[i].weight = g.t().dot(&trace.acts[i]);
            grads.layers[i].bias = g.sum_axis(Axis(0));
            let mut ga = g.dot(&layer.weight);

            if i == hidden {
                if let (Some(aux), Some(grad_aux)) = (self.aux(), grads.aux.as_mut()) {
                    let dr = match d_reject {
                        Some(dr) => dr.to_owned(),
                        None => Array1::zeros(trace.batch_size()),
                    };
                    if dr.len() != trace.batch_size() {
                        return Err(Error::Dimension("reject gradient length".into()));
                    }
                    grad_aux.0 = trace.acts[hidden].t().dot(&dr);
                    grad_aux.1 = dr.sum();
                    for (mut row, &d) in ga.axis_iter_mut(Axis(0)).zip(dr.iter()) {
                        row.scaled_add(d, &aux.weight);
                    }
                }
            }

            // ga = ∂L/∂acts[i]; walk back through injection and nonlinearity.
            let key = trace.applied_at(i);
            if i == 0 {
                let g0 = match key {
                    Some(k) => {
                        key_grads[0] = Some(key_grad(trace, 0, k, &ga));
                        undo_injection(trace.kind, &ga, k, trace.gamma)
                    }
                    None => ga,
                };
                input_grad = Some(g0);
            } else {
                let gate = &trace.gate_in[i - 1];
                g = match (key, trace.point) {
                    (Some(k), InjectionPoint::PostActivation) => {
                        key_grads[i] = Some(key_grad(trace, i, k, &ga));
                        let graw = undo_injection(trace.kind, &ga, k, trace.gamma);
                        mul_derivative(graw, gate, act)
                    }
                    (Some(k), InjectionPoint::PreActivation) => {
                        let gg = mul_derivative(ga, gate, act);
                        key_grads[i] = Some(key_grad(trace, i, k, &gg));
                        undo_injection(trace.kind, &gg, k, trace.gamma)
                    }
                    (None, _) => mul_derivative(ga, gate, act),
                };
            }
        }

        grads.keys = trace
            .applied
            .iter()
            .map(|a| key_grads[a.site].take().expect("key gradient per applied key"))
            .collect();
        grads.input = input_grad.expect("input gradient");
        Ok(grads)
    }

    /// Exact directional derivative of `h_L` along `v` w.r.t. the
    /// post-injection tensor at `site`, with gates frozen at the trace.
    /// `v` has one row per trace row (or one row, broadcast).
    pub fn jvp(&self, trace: &ForwardTrace, site: usize, v: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_trace(trace)?;
        let hidden = self.hidden_layers();
        if site > hidden {
            return Err(Error::SiteOutOfRange { site, depth: hidden + 1 });
        }
        let widths = self.site_widths();
        if v.ncols() != widths[site] {
            return Err(Error::Dimension(format!(
                "direction has {} entries, site {site} width is {}",
                v.ncols(),
                widths[site]
            )));
        }
        let n = trace.batch_size();
        let mut t = if v.nrows() == n {
            v.to_owned()
        } else if v.nrows() == 1 {
            v.broadcast((n, v.ncols())).expect("broadcast row").to_owned()
        } else {
            return Err(Error::Dimension("direction rows must match batch or be 1".into()));
        };
        let act = trace.activation;
        // With pre-activation injection the injected tensor sits before the
        // nonlinearity of its own layer.
        if site > 0 && trace.point == InjectionPoint::PreActivation && trace.applied_at(site).is_some() {
            t = mul_derivative(t, &trace.gate_in[site - 1], act);
        }
        for i in site..hidden {
            let w = &self.layers()[i].weight;
            let lin = t.dot(&w.t());
            let next = i + 1;
            let scale = trace
                .applied_at(next)
                .map(|k| trace.kind.row_scale(k.values.view(), trace.gamma));
            t = match (trace.point, scale) {
                (InjectionPoint::PostActivation, Some(s)) => mul_derivative(lin, &trace.gate_in[i], act) * &s,
                (InjectionPoint::PreActivation, Some(s)) => mul_derivative(lin * &s, &trace.gate_in[i], act),
                (_, None) => mul_derivative(lin, &trace.gate_in[i], act),
            };
        }
        Ok(t)
    }

    /// `W · jvp`: the logit shift `W_eff v` to first order.
    pub fn logit_jvp(&self, trace: &ForwardTrace, site: usize, v: ArrayView2<f64>) -> Result<Array2<f64>> {
        let t = self.jvp(trace, site, v)?;
        Ok(t.dot(&self.readout().weight.t()))
    }

    /// Transposed Jacobian `J_siteᵀ w` for one row `w` of `∂/∂h_L`, applied
    /// at row `row` of the trace.
    pub fn vjp(&self, trace: &ForwardTrace, site: usize, row: usize, w: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_trace(trace)?;
        let hidden = self.hidden_layers();
        if site > hidden {
            return Err(Error::SiteOutOfRange { site, depth: hidden + 1 });
        }
        if row >= trace.batch_size() {
            return Err(Error::Dimension(format!("row {row} outside batch")));
        }
        if w.len() != self.site_widths()[hidden] {
            return Err(Error::Dimension("vjp seed must live in h_L".into()));
        }
        let act = trace.activation;
        let mut g = w.to_owned();
        for i in (site..hidden).rev() {
            let gate = trace.gate_in[i].row(row);
            let scale = trace
                .applied_at(i + 1)
                .map(|k| trace.kind.row_scale(k.values.view(), trace.gamma));
            let dact = gate.mapv(|x| act.derivative(x));
            g = match (trace.point, scale) {
                (InjectionPoint::PostActivation, Some(s)) => g * &s * &dact,
                (InjectionPoint::PreActivation, Some(s)) => g * &dact * &s,
                (_, None) => g * &dact,
            };
            g = self.layers()[i].weight.t().dot(&g);
        }
        if site > 0 && trace.point == InjectionPoint::PreActivation && trace.applied_at(site).is_some() {
            let dact = trace.gate_in[site - 1].row(row).mapv(|x| act.derivative(x));
            g *= &dact;
        }
        Ok(g)
    }
}

fn mul_derivative(g: Array2<f64>, gate: &Array2<f64>, act: Activation) -> Array2<f64> {
    if act == Activation::Identity {
        return g;
    }
    let mut g = g;
    Zip::from(&mut g).and(gate).for_each(|g, &x| *g *= act.derivative(x));
    g
}

fn undo_injection(kind: InjectorKind, g: &Array2<f64>, key: &AppliedKey, gamma: f64) -> Array2<f64> {
    match kind {
        InjectorKind::Add => g.clone(),
        InjectorKind::Mul => g * &kind.row_scale(key.values.view(), gamma),
    }
}

/// `∂L/∂k` given `∂L/∂(injected output)` at the site.
fn key_grad(trace: &ForwardTrace, site: usize, key: &AppliedKey, g_out: &Array2<f64>) -> Array1<f64> {
    let gamma = trace.gamma;
    match trace.kind {
        InjectorKind::Add => g_out.sum_axis(Axis(0)) * gamma,
        InjectorKind::Mul => {
            let raw = trace.raw[site].as_ref().expect("raw activation at injected site");
            let s = (g_out * raw).sum_axis(Axis(0));
            Zip::from(&s)
                .and(&key.values)
                .map_collect(|&s, &k| {
                    let t = k.tanh();
                    gamma * (1.0 - t * t) * s
                })
        }
    }
}
