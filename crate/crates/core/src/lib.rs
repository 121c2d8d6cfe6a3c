//! Subspace-key-conditioned inference for small dense networks.
//!
//! A secret basis `B` (m orthonormal rows in the width of an injection site)
//! defines the set of valid keys `k = αᵀB`. Keys are injected into
//! intermediate activations additively or multiplicatively, networks are
//! trained with correct keys only or with an additional deny objective on
//! invalid forwards, and the resulting models are evaluated under the
//! no-key / correct-key / wrong-key protocols and a set of white-box probes.
//!
//! Module map:
//!
//! - [`nn`]: dense network, exact reverse mode, JVP/VJP at frozen gates,
//!   SGD with momentum and the multi-step schedule.
//! - [`keyspace`]: basis construction, key samplers, energy decomposition.
//! - [`injection`]: the two injectors and the injection plan.
//! - [`deny`]: training objectives and evaluation protocols.
//! - [`theory`]: closed forms and Monte Carlo estimators for the energy and
//!   margin-flip laws, plus the effective-sensitivity diagnostic.
//! - [`data`]: synthetic blobs and IDX (MNIST) ingestion.
//! - [`harness`]: configs, training runs, sweeps, attack probes, reports.

pub mod data;
pub mod deny;
pub mod error;
pub mod harness;
pub mod injection;
pub mod keyspace;
pub mod nn;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
