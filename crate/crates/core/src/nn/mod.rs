//! Dense feed-forward networks with exact reverse mode.
//!
//! Interception points ("sites") are numbered `0..=L` for a network with `L`
//! hidden layers: site 0 is the input vector and site `i` is the output of
//! hidden layer `i`. Site `L` is the penultimate representation `h_L` read by
//! the linear readout `z = W h_L + b`.

mod forward;
mod optim;

pub use forward::{AppliedKey, ForwardTrace, Gradients};
pub use optim::{lr_at, sgd_step, Adam, OptimConfig, OptimState};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative at `x`. ReLU uses 0 at exactly 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// `C` semantic logits.
    #[default]
    Plain,
    /// `C + 1` logits, the last one is the reject class.
    Reject,
    /// `C` semantic logits plus a scalar reject logit `r = aᵀh_L + c`.
    AuxReject,
}

impl HeadKind {
    pub fn output_dim(self, num_classes: usize) -> usize {
        match self {
            HeadKind::Reject => num_classes + 1,
            _ => num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
    pub head: HeadKind,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            input_dim: 784,
            hidden: vec![256, 128, 64],
            num_classes: 10,
            activation: Activation::Relu,
            head: HeadKind::Plain,
        }
    }
}

impl NetworkSpec {
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.head.output_dim(self.num_classes));
        dims
    }

    /// Widths of the interception points `0..=L`.
    pub fn site_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend_from_slice(&self.hidden);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least two classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxHead {
    pub weight: Array1<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Dense>,
    aux: Option<AuxHead>,
}

impl Network {
    /// Kaiming-uniform initialization: hidden weights `U(±√(6/fan_in))`, readout
    /// and biases `U(±1/√fan_in)`.
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let inv = 1.0 / (fan_in as f64).sqrt();
            let w_bound = if i + 1 < n { (6.0 / fan_in as f64).sqrt() } else { inv };
            let wd = Uniform::new_inclusive(-w_bound, w_bound).expect("finite bound");
            let bd = Uniform::new_inclusive(-inv, inv).expect("finite bound");
            let weight = Array2::from_shape_fn((fan_out, fan_in), |_| wd.sample(rng));
            let bias = Array1::from_shape_fn(fan_out, |_| bd.sample(rng));
            layers.push(Dense { weight, bias });
        }
        let aux = if spec.head == HeadKind::AuxReject {
            let d = dims[n - 1];
            let inv = 1.0 / (d as f64).sqrt();
            let ud = Uniform::new_inclusive(-inv, inv).expect("finite bound");
            Some(AuxHead {
                weight: Array1::from_shape_fn(d, |_| ud.sample(rng)),
                bias: 0.0,
            })
        } else {
            None
        };
        Ok(Network { spec, layers, aux })
    }

    /// Builds a network from explicit parameters (checked against the spec).
    pub fn from_parts(spec: NetworkSpec, layers: Vec<Dense>, aux: Option<AuxHead>) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        if layers.len() != dims.len() - 1 {
            return Err(Error::Dimension(format!(
                "{} layers for layer_dims {:?}",
                layers.len(),
                dims
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.dim() != (dims[i + 1], dims[i]) || l.bias.len() != dims[i + 1] {
                return Err(Error::Dimension(format!(
                    "layer {i} has weight {:?} / bias {}, expected ({}, {})",
                    l.weight.dim(),
                    l.bias.len(),
                    dims[i + 1],
                    dims[i]
                )));
            }
        }
        match (spec.head, &aux) {
            (HeadKind::AuxReject, Some(a)) if a.weight.len() == dims[dims.len() - 2] => {}
            (HeadKind::AuxReject, _) => {
                return Err(Error::Dimension("aux reject head missing or misshaped".into()))
            }
            (_, Some(_)) => {
                return Err(Error::Config("aux parameters on a non-aux head".into()))
            }
            _ => {}
        }
        let net = Network { spec, layers, aux };
        net.check_finite()?;
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn aux(&self) -> Option<&AuxHead> {
        self.aux.as_ref()
    }

    pub fn aux_mut(&mut self) -> Option<&mut AuxHead> {
        self.aux.as_mut()
    }

    pub fn head(&self) -> HeadKind {
        self.spec.head
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn hidden_layers(&self) -> usize {
        self.spec.hidden.len()
    }

    pub fn num_sites(&self) -> usize {
        self.spec.hidden.len() + 1
    }

    pub fn site_widths(&self) -> Vec<usize> {
        self.spec.site_widths()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.spec.layer_dims()
    }

    /// Readout matrix `W` (`out × d_L`).
    pub fn readout(&self) -> &Dense {
        self.layers.last().expect("at least one layer")
    }

    /// Named mutable parameter slices in a fixed order.
    pub fn param_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((
                format!("layers.{i}.weight"),
                l.weight.as_slice_mut().expect("standard layout"),
            ));
            out.push((
                format!("layers.{i}.bias"),
                l.bias.as_slice_mut().expect("standard layout"),
            ));
        }
        if let Some(a) = self.aux.as_mut() {
            out.push(("aux.weight".into(), a.weight.as_slice_mut().expect("standard layout")));
            out.push(("aux.bias".into(), std::slice::from_mut(&mut a.bias)));
        }
        out
    }

    pub fn param_slices(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.weight"), l.weight.as_slice().expect("standard layout")));
            out.push((format!("layers.{i}.bias"), l.bias.as_slice().expect("standard layout")));
        }
        if let Some(a) = self.aux.as_ref() {
            out.push(("aux.weight".into(), a.weight.as_slice().expect("standard layout")));
            out.push(("aux.bias".into(), std::slice::from_ref(&a.bias)));
        }
        out
    }

    /// All parameters, row-major, in [`Network::param_slices`] order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.param_slices()
            .into_iter()
            .flat_map(|(_, s)| s.iter().copied())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn from_flat(spec: NetworkSpec, flat: &[f64]) -> Result<Self> {
        let mut rng = crate::rng::seeded(0);
        let mut net = Network::new(spec, &mut rng)?;
        let expected = net.num_params();
        if flat.len() != expected {
            return Err(Error::Dimension(format!(
                "{} flat parameters, network needs {expected}",
                flat.len()
            )));
        }
        let mut at = 0;
        for (_, s) in net.param_slices_mut() {
            s.copy_from_slice(&flat[at..at + s.len()]);
            at += s.len();
        }
        net.check_finite()?;
        Ok(net)
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, s) in self.param_slices() {
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn spec(head: HeadKind) -> NetworkSpec {
        NetworkSpec {
            input_dim: 6,
            hidden: vec![5, 4],
            num_classes: 3,
            activation: Activation::Relu,
            head,
        }
    }

    #[test]
    fn layer_dims_follow_head_kind() {
        assert_eq!(spec(HeadKind::Plain).layer_dims(), vec![6, 5, 4, 3]);
        assert_eq!(spec(HeadKind::Reject).layer_dims(), vec![6, 5, 4, 4]);
        let net = Network::new(spec(HeadKind::AuxReject), &mut seeded(0)).unwrap();
        assert_eq!(net.layer_dims(), vec![6, 5, 4, 3]);
        assert_eq!(net.aux().unwrap().weight.len(), 4);
    }

    #[test]
    fn weight_shapes_chain() {
        let net = Network::new(spec(HeadKind::Reject), &mut seeded(1)).unwrap();
        let dims = net.layer_dims();
        for (i, l) in net.layers().iter().enumerate() {
            assert_eq!(l.weight.dim(), (dims[i + 1], dims[i]));
        }
    }

    #[test]
    fn flat_round_trip() {
        let net = Network::new(spec(HeadKind::AuxReject), &mut seeded(2)).unwrap();
        let flat = net.flat_params();
        assert_eq!(flat.len(), net.num_params());
        let back = Network::from_flat(net.spec().clone(), &flat).unwrap();
        assert_eq!(back, net);
        assert!(Network::from_flat(net.spec().clone(), &flat[1..]).is_err());
        let mut bad = flat.clone();
        bad[3] = f64::NAN;
        assert!(matches!(
            Network::from_flat(net.spec().clone(), &bad),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn init_is_seeded() {
        let a = Network::new(spec(HeadKind::Plain), &mut seeded(3)).unwrap();
        let b = Network::new(spec(HeadKind::Plain), &mut seeded(3)).unwrap();
        let c = Network::new(spec(HeadKind::Plain), &mut seeded(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
