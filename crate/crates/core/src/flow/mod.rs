//! Conditional continuous normalizing flow over speaker embeddings.
//!
//! A sample `s` at time `t1` is transported to a latent `z` at `t0` by
//! integrating `dz/dt = g(z, t, a)`; the log-density follows the
//! instantaneous change of variables with a standard normal base.
//! Manipulation encodes under the original attributes and decodes under
//! edited ones.

mod model;
mod net;
mod solver;
mod train;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use model::{AttrStats, FlowModel};
pub use net::{Dense, Dynamics, DynamicsNet, LinearDynamics, ProbeSet};
pub use solver::{rk4, rk45, solve, SolverConfig, SolverMethod, DEFAULT_STEPS, MIN_STEPS};
pub use train::{batch_nll, batch_nll_grad, train, TrainHyper, TrainOutcome};

/// Number of conditioning attributes.
pub const ATTR_DIM: usize = 6;
/// Position of the creak attribute in an [`AttributeVector`].
pub const CREAK_INDEX: usize = 5;
pub const ATTR_NAMES: [&str; ATTR_DIM] = ["breathiness", "roughness", "resonance", "weight", "mean_pitch_norm", "creak"];

/// How `tr(dg/dz)` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TraceMethod {
    Exact,
    /// Stochastic estimate averaged over `probes` Rademacher vectors.
    Hutchinson { probes: usize },
}

/// Voice-quality strengths conditioning the flow, in canonical order.
/// `creak` is a probability before any shift.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector {
    pub breathiness: f64,
    pub roughness: f64,
    pub resonance: f64,
    pub weight: f64,
    pub mean_pitch_norm: f64,
    pub creak: f64,
}

impl AttributeVector {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.breathiness,
            self.roughness,
            self.resonance,
            self.weight,
            self.mean_pitch_norm,
            self.creak,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match *v {
            [breathiness, roughness, resonance, weight, mean_pitch_norm, creak] => Ok(Self {
                breathiness,
                roughness,
                resonance,
                weight,
                mean_pitch_norm,
                creak,
            }),
            _ => Err(Error::DimMismatch {
                expected: ATTR_DIM,
                got: v.len(),
            }),
        }
    }

    /// Creak-only conditioning: every other attribute is zero.
    pub fn creak_only(creak: f64) -> Self {
        Self { creak, ..Self::default() }
    }

    /// Adds `beta` to the creak attribute. No clamping is applied.
    pub fn shift_creak(mut self, beta: f64) -> Self {
        self.creak += beta;
        self
    }
}

pub(crate) fn log_normal<'a>(z: impl Iterator<Item = &'a f64>) -> f64 {
    let mut sq = 0.0;
    let mut d = 0usize;
    for v in z {
        sq += v * v;
        d += 1;
    }
    -0.5 * sq - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Transports a batch of states from `from` to `to`.
pub fn integrate(
    f: &dyn Dynamics,
    z: &DMatrix<f64>,
    attrs: &DMatrix<f64>,
    from: f64,
    to: f64,
    method: SolverMethod,
) -> Result<DMatrix<f64>> {
    check_batch(f, z, attrs)?;
    solve(|t, y| f.eval(y, t, attrs), z.clone(), from, to, method)
}

/// Per-row `log p(s | a)`, integrating the augmented state `[z | ℓ]` from
/// `t1` to `t0`.
pub fn log_likelihood(
    f: &dyn Dynamics,
    s: &DMatrix<f64>,
    attrs: &DMatrix<f64>,
    cfg: &SolverConfig,
    probes: &ProbeSet,
) -> Result<DVector<f64>> {
    check_batch(f, s, attrs)?;
    let (b, d) = (s.nrows(), s.ncols());
    let mut y0 = DMatrix::zeros(b, d + 1);
    y0.columns_mut(0, d).copy_from(s);
    let rhs = |t: f64, y: &DMatrix<f64>| {
        let z = y.columns(0, d).into_owned();
        let (g, tr) = f.eval_trace(&z, t, attrs, probes);
        let mut out = DMatrix::zeros(b, d + 1);
        out.columns_mut(0, d).copy_from(&g);
        out.column_mut(d).copy_from(&tr);
        out
    };
    let y = solve(rhs, y0, cfg.t1, cfg.t0, cfg.method)?;
    Ok(DVector::from_fn(b, |r, _| {
        log_normal(y.view((r, 0), (1, d)).iter()) + y[(r, d)]
    }))
}

fn check_batch(f: &dyn Dynamics, z: &DMatrix<f64>, attrs: &DMatrix<f64>) -> Result<()> {
    if z.ncols() != f.dim() {
        return Err(Error::DimMismatch {
            expected: f.dim(),
            got: z.ncols(),
        });
    }
    if attrs.ncols() != f.attr_dim() {
        return Err(Error::DimMismatch {
            expected: f.attr_dim(),
            got: attrs.ncols(),
        });
    }
    if attrs.nrows() != z.nrows() {
        return Err(Error::DimMismatch {
            expected: z.nrows(),
            got: attrs.nrows(),
        });
    }
    Ok(())
}
