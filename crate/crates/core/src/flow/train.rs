//! Maximum-likelihood training by backpropagation through fixed-step RK4.

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{AttrStats, FlowModel};
use super::net::{Dense, Dynamics, DynamicsNet, ProbeSet};
use super::solver::{SolverConfig, SolverMethod};
use super::{log_normal, TraceMethod};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub trace: TraceMethod,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            batch_size: 200,
            learning_rate: 1e-4,
            epochs: 100,
            seed: 0,
            hidden: 64,
            hidden_layers: 2,
            trace: TraceMethod::Exact,
        }
    }
}

/// Trained model plus the mean training NLL of every epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FlowModel,
    pub epoch_nll: Vec<f64>,
}

struct Trajectory {
    states: Vec<DMatrix<f64>>,
    loss: f64,
}

fn forward(
    net: &DynamicsNet,
    s: &DMatrix<f64>,
    attrs: &DMatrix<f64>,
    cfg: &SolverConfig,
    steps: usize,
    probes: &ProbeSet,
) -> Result<Trajectory> {
    let h = (cfg.t0 - cfg.t1) / steps as f64;
    let b = s.nrows();
    let mut z = s.clone();
    let mut ell = DVector::zeros(b);
    let mut states = Vec::with_capacity(steps + 1);
    states.push(z.clone());
    for n in 0..steps {
        let t = cfg.t1 + n as f64 * h;
        let (k1, tr1) = net.eval_trace(&z, t, attrs, probes);
        let (k2, tr2) = net.eval_trace(&(&z + &k1 * (0.5 * h)), t + 0.5 * h, attrs, probes);
        let (k3, tr3) = net.eval_trace(&(&z + &k2 * (0.5 * h)), t + 0.5 * h, attrs, probes);
        let (k4, tr4) = net.eval_trace(&(&z + &k3 * h), t + h, attrs, probes);
        z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        ell += (tr1 + tr2 * 2.0 + tr3 * 2.0 + tr4) * (h / 6.0);
        if z.iter().chain(ell.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite state at t = {}", t + h)));
        }
        states.push(z.clone());
    }
    let loss = -(0..b).map(|r| log_normal(z.row(r).iter()) + ell[r]).sum::<f64>() / b as f64;
    Ok(Trajectory { states, loss })
}

/// Mean negative log-likelihood of a batch under fixed-step RK4.
pub fn batch_nll(
    net: &DynamicsNet,
    s: &DMatrix<f64>,
    attrs: &DMatrix<f64>,
    cfg: &SolverConfig,
    probes: &ProbeSet,
) -> Result<f64> {
    let steps = fixed_steps(cfg)?;
    Ok(forward(net, s, attrs, cfg, steps, probes)?.loss)
}

/// [`batch_nll`] and its gradient with respect to the flat parameters.
pub fn batch_nll_grad(
    net: &DynamicsNet,
    s: &DMatrix<f64>,
    attrs: &DMatrix<f64>,
    cfg: &SolverConfig,
    probes: &ProbeSet,
) -> Result<(f64, Vec<f64>)> {
    let steps = fixed_steps(cfg)?;
    let traj = forward(net, s, attrs, cfg, steps, probes)?;
    let b = s.nrows() as f64;
    let h = (cfg.t0 - cfg.t1) / steps as f64;
    let mut grad = net.zero_grad();
    let mut z_bar = traj.states[steps].clone() / b;
    let ell_bar = DVector::from_element(s.nrows(), -1.0 / b);
    let weights = [1.0 / 6.0, 2.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0];
    let tr_bars: Vec<DVector<f64>> = weights.iter().map(|w| &ell_bar * (h * w)).collect();

    for n in (0..steps).rev() {
        let z = &traj.states[n];
        let t = cfg.t1 + n as f64 * h;
        let (k1, _, c1) = net.forward_cached(z, t, attrs, probes);
        let (k2, _, c2) = net.forward_cached(&(z + &k1 * (0.5 * h)), t + 0.5 * h, attrs, probes);
        let (k3, _, c3) = net.forward_cached(&(z + &k2 * (0.5 * h)), t + 0.5 * h, attrs, probes);
        let (_, _, c4) = net.forward_cached(&(z + &k3 * h), t + h, attrs, probes);

        let k4_bar = &z_bar * (h * weights[3]);
        let mut k3_bar = &z_bar * (h * weights[2]);
        let mut k2_bar = &z_bar * (h * weights[1]);
        let mut k1_bar = &z_bar * (h * weights[0]);

        let z4_bar = net.backward(&c4, &k4_bar, &tr_bars[3], probes, &mut grad);
        k3_bar += &z4_bar * h;
        z_bar += z4_bar;
        let z3_bar = net.backward(&c3, &k3_bar, &tr_bars[2], probes, &mut grad);
        k2_bar += &z3_bar * (0.5 * h);
        z_bar += z3_bar;
        let z2_bar = net.backward(&c2, &k2_bar, &tr_bars[1], probes, &mut grad);
        k1_bar += &z2_bar * (0.5 * h);
        z_bar += z2_bar;
        z_bar += net.backward(&c1, &k1_bar, &tr_bars[0], probes, &mut grad);
    }
    Ok((traj.loss, flatten(&grad)))
}

fn fixed_steps(cfg: &SolverConfig) -> Result<usize> {
    cfg.validate()?;
    match cfg.method {
        SolverMethod::FixedRk4 { steps } => Ok(steps),
        SolverMethod::AdaptiveRk45 { .. } => Err(Error::invalid("training requires the fixed-step RK4 solver")),
    }
}

fn flatten(grad: &[Dense]) -> Vec<f64> {
    grad.iter().flat_map(|l| l.w.iter().chain(l.b.iter()).copied()).collect()
}

/// Adaptive moment estimation.
struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

pub(crate) fn rows_to_matrix(rows: &[&[f64]], cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c])
}

/// Fits a conditional flow to `(embedding, attributes)` pairs.
pub fn train(dataset: &[(Vec<f64>, Vec<f64>)], hyper: &TrainHyper, cfg: &SolverConfig) -> Result<TrainOutcome> {
    fixed_steps(cfg)?;
    let (first_s, first_a) = dataset.first().ok_or_else(|| Error::invalid("empty training set"))?;
    let (d, m) = (first_s.len(), first_a.len());
    if d == 0 {
        return Err(Error::invalid("embeddings must have at least one dimension"));
    }
    for (s, a) in dataset {
        if s.len() != d {
            return Err(Error::DimMismatch { expected: d, got: s.len() });
        }
        if a.len() != m {
            return Err(Error::DimMismatch { expected: m, got: a.len() });
        }
        if s.iter().chain(a).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite training sample"));
        }
    }
    if dataset.len() < 10 * d {
        return Err(Error::invalid(format!(
            "need at least {} samples for d = {d}, got {}",
            10 * d,
            dataset.len()
        )));
    }
    if hyper.batch_size == 0 || hyper.hidden == 0 || !(hyper.learning_rate > 0.0) {
        return Err(Error::invalid("batch size, hidden width and learning rate must be positive"));
    }

    let stats = AttrStats::fit(dataset.iter().map(|(_, a)| a.as_slice()), m);
    let normed: Vec<Vec<f64>> = dataset.iter().map(|(_, a)| stats.normalize(a)).collect();
    let mut net = DynamicsNet::init(d, m, hyper.hidden, hyper.hidden_layers, hyper.seed);
    let mut params = net.params();
    let mut adam = Adam::new(params.len(), hyper.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let n = dataset.len();
    let batch = hyper.batch_size;
    let exact = ProbeSet::exact(batch, d);
    let mut epoch_nll = Vec::with_capacity(hyper.epochs);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let n_batches = n.div_ceil(batch);
        let mut total = 0.0;
        for bi in 0..n_batches {
            let idx: Vec<usize> = (0..batch).map(|j| order[(bi * batch + j) % n]).collect();
            let s_rows: Vec<&[f64]> = idx.iter().map(|&i| dataset[i].0.as_slice()).collect();
            let a_rows: Vec<&[f64]> = idx.iter().map(|&i| normed[i].as_slice()).collect();
            let s = rows_to_matrix(&s_rows, d);
            let a = rows_to_matrix(&a_rows, m);
            let probes = match hyper.trace {
                TraceMethod::Exact => exact.clone(),
                TraceMethod::Hutchinson { probes } => ProbeSet::rademacher(batch, d, probes, &mut rng),
            };
            let (loss, grad) = batch_nll_grad(&net, &s, &a, cfg, &probes).map_err(|e| {
                Error::Divergence(format!("epoch {epoch}, batch {bi}: {e}"))
            })?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!(
                    "epoch {epoch}, batch {bi}: NLL {loss}, learning rate {}",
                    hyper.learning_rate
                )));
            }
            adam.step(&mut params, &grad);
            net.set_params(&params)?;
            total += loss;
        }
        let mean = total / n_batches as f64;
        debug!("epoch {epoch}: nll {mean:.6}");
        epoch_nll.push(mean);
    }

    let mut model = FlowModel::new(net, *cfg, stats, hyper.trace, hyper.seed, f64::NAN)?;
    let lls = model.log_likelihood_batch(
        &dataset.iter().map(|(s, _)| s.clone()).collect::<Vec<_>>(),
        &dataset.iter().map(|(_, a)| a.clone()).collect::<Vec<_>>(),
    )?;
    let final_nll = -lls.iter().sum::<f64>() / lls.len() as f64;
    if !final_nll.is_finite() {
        return Err(Error::Divergence(format!("final NLL {final_nll}")));
    }
    model.set_final_nll(final_nll);
    info!("trained flow: {} epochs, final nll {final_nll:.6}", hyper.epochs);
    Ok(TrainOutcome { model, epoch_nll })
}
