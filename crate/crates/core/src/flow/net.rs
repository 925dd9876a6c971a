//! Dynamics functions `g(z, t, a)`.
//!
//! Traces of `dg/dz` are computed by pushing tangent seeds through the
//! network alongside the primal pass: exact traces use the `d` unit vectors,
//! Hutchinson estimates use Rademacher probes.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Vector field of a flow, evaluated on a batch of row states.
pub trait Dynamics: Sync {
    fn dim(&self) -> usize;

    fn attr_dim(&self) -> usize;

    /// `g` for each row of `z`. `attrs` has one row per state.
    fn eval(&self, z: &DMatrix<f64>, t: f64, attrs: &DMatrix<f64>) -> DMatrix<f64>;

    /// `g` together with the per-row trace of `dg/dz` read out through
    /// `probes`.
    fn eval_trace(
        &self,
        z: &DMatrix<f64>,
        t: f64,
        attrs: &DMatrix<f64>,
        probes: &ProbeSet,
    ) -> (DMatrix<f64>, DVector<f64>);
}

/// Tangent seeds for trace readout: `tr ≈ weight · Σ_k r_kᵀ J r_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub seeds: Vec<DMatrix<f64>>,
    pub weight: f64,
}

impl ProbeSet {
    /// Unit vectors: the readout is the exact trace.
    pub fn exact(batch: usize, dim: usize) -> Self {
        Self {
            seeds: (0..dim)
                .map(|i| DMatrix::from_fn(batch, dim, |_, j| if i == j { 1.0 } else { 0.0 }))
                .collect(),
            weight: 1.0,
        }
    }

    /// `count` Rademacher probes per row.
    pub fn rademacher(batch: usize, dim: usize, count: usize, rng: &mut impl Rng) -> Self {
        let count = count.max(1);
        Self {
            seeds: (0..count)
                .map(|_| DMatrix::from_fn(batch, dim, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 }))
                .collect(),
            weight: 1.0 / count as f64,
        }
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    fn batch(&self) -> usize {
        self.seeds.first().map_or(0, |s| s.nrows())
    }

    fn readout(&self, tangent_out: &DMatrix<f64>) -> DVector<f64> {
        let b = self.batch();
        DVector::from_fn(b, |r, _| {
            let mut acc = 0.0;
            for (k, seed) in self.seeds.iter().enumerate() {
                for i in 0..seed.ncols() {
                    acc += tangent_out[(k * b + r, i)] * seed[(r, i)];
                }
            }
            self.weight * acc
        })
    }
}

/// Linear vector field `g(z) = A z`, independent of time and attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    pub a: DMatrix<f64>,
    pub attr_dim: usize,
}

impl LinearDynamics {
    pub fn new(a: DMatrix<f64>, attr_dim: usize) -> Result<Self> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(Error::invalid("linear dynamics need a non-empty square matrix"));
        }
        Ok(Self { a, attr_dim })
    }
}

impl Dynamics for LinearDynamics {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    fn eval(&self, z: &DMatrix<f64>, _t: f64, _attrs: &DMatrix<f64>) -> DMatrix<f64> {
        z * self.a.transpose()
    }

    fn eval_trace(
        &self,
        z: &DMatrix<f64>,
        t: f64,
        attrs: &DMatrix<f64>,
        probes: &ProbeSet,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let stacked = stack(&probes.seeds);
        let tangent = stacked * self.a.transpose();
        (self.eval(z, t, attrs), probes.readout(&tangent))
    }
}

/// Affine layer stored as `w: in × out` so that a batch maps as `x·w + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: DMatrix::zeros(inputs, outputs),
            b: DVector::zeros(outputs),
        }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.w;
        for mut row in y.row_iter_mut() {
            row += self.b.transpose();
        }
        y
    }
}

/// Fully connected tanh network on `[z, t, a]` with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsNet {
    dim: usize,
    attr_dim: usize,
    hidden: usize,
    /// Hidden layers followed by the output layer.
    layers: Vec<Dense>,
}

impl DynamicsNet {
    /// All-zero parameters: `g ≡ 0`.
    pub fn zeros(dim: usize, attr_dim: usize, hidden: usize, hidden_layers: usize) -> Self {
        let widths = Self::widths(dim, attr_dim, hidden, hidden_layers);
        Self {
            dim,
            attr_dim,
            hidden,
            layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    /// Training initialisation: hidden weights `N(0, 1/fan_in)`, zero
    /// biases and a zero output layer, so the initial flow is the identity.
    pub fn init(dim: usize, attr_dim: usize, hidden: usize, hidden_layers: usize, seed: u64) -> Self {
        let mut net = Self::zeros(dim, attr_dim, hidden, hidden_layers);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_hidden = net.layers.len() - 1;
        for layer in &mut net.layers[..n_hidden] {
            let std = (1.0 / layer.w.nrows() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            layer.w.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        net
    }

    /// Every weight `N(0, scale²/fan_in)` and every bias `N(0, (scale/10)²)`.
    pub fn random(
        dim: usize,
        attr_dim: usize,
        hidden: usize,
        hidden_layers: usize,
        scale: f64,
        seed: u64,
    ) -> Self {
        let mut net = Self::zeros(dim, attr_dim, hidden, hidden_layers);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let normal = Normal::new(0.0, scale / (layer.w.nrows() as f64).sqrt()).expect("finite std");
            layer.w.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            let bias = Normal::new(0.0, 0.1 * scale).expect("finite std");
            layer.b.iter_mut().for_each(|v| *v = bias.sample(&mut rng));
        }
        net
    }

    fn widths(dim: usize, attr_dim: usize, hidden: usize, hidden_layers: usize) -> Vec<usize> {
        let mut w = vec![dim + 1 + attr_dim];
        w.extend(std::iter::repeat_n(hidden, hidden_layers));
        w.push(dim);
        w
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Flat parameters: per layer, weights in `(input, output)` column-major
    /// order, then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::DimMismatch {
                expected: self.n_params(),
                got: params.len(),
            });
        }
        let mut it = params.iter();
        for l in &mut self.layers {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|v| *v = *it.next().expect("length checked"));
        }
        Ok(())
    }

    pub(crate) fn zero_grad(&self) -> Vec<Dense> {
        self.layers.iter().map(|l| Dense::zeros(l.w.nrows(), l.w.ncols())).collect()
    }

    fn input(&self, z: &DMatrix<f64>, t: f64, attrs: &DMatrix<f64>) -> DMatrix<f64> {
        let (b, d, m) = (z.nrows(), self.dim, self.attr_dim);
        DMatrix::from_fn(b, d + 1 + m, |r, c| {
            if c < d {
                z[(r, c)]
            } else if c == d {
                t
            } else {
                attrs[(r, c - d - 1)]
            }
        })
    }

    /// Forward pass with tangents, keeping what the backward pass needs.
    pub(crate) fn forward_cached(
        &self,
        z: &DMatrix<f64>,
        t: f64,
        attrs: &DMatrix<f64>,
        probes: &ProbeSet,
    ) -> (DMatrix<f64>, DVector<f64>, NetCache) {
        let b = z.nrows();
        let k = probes.len();
        let x = self.input(z, t, attrs);
        let mut dx = DMatrix::zeros(k * b, x.ncols());
        for (j, seed) in probes.seeds.iter().enumerate() {
            dx.view_mut((j * b, 0), (b, self.dim)).copy_from(seed);
        }
        let mut hs = vec![x];
        let mut dhs = vec![dx];
        let mut dus = vec![DMatrix::zeros(0, 0)];
        let n_hidden = self.layers.len() - 1;
        for layer in &self.layers[..n_hidden] {
            let mut h = layer.apply(hs.last().expect("non-empty"));
            h.iter_mut().for_each(|v| *v = v.tanh());
            let du = dhs.last().expect("non-empty") * &layer.w;
            let mut dh = du.clone();
            for j in 0..k {
                let mut block = dh.view_mut((j * b, 0), (b, h.ncols()));
                block.zip_apply(&h, |v, hv| *v *= 1.0 - hv * hv);
            }
            hs.push(h);
            dhs.push(dh);
            dus.push(du);
        }
        let out = &self.layers[n_hidden];
        let g = out.apply(hs.last().expect("non-empty"));
        let dg = dhs.last().expect("non-empty") * &out.w;
        let tr = probes.readout(&dg);
        (g, tr, NetCache { hs, dhs, dus })
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂z`,
    /// given `∂L/∂g` and `∂L/∂tr` for the cached evaluation.
    pub(crate) fn backward(
        &self,
        cache: &NetCache,
        g_bar: &DMatrix<f64>,
        tr_bar: &DVector<f64>,
        probes: &ProbeSet,
        grad: &mut [Dense],
    ) -> DMatrix<f64> {
        let b = g_bar.nrows();
        let k = probes.len();
        let n_hidden = self.layers.len() - 1;

        let mut dg_bar = DMatrix::<f64>::zeros(k * b, self.dim);
        for (j, seed) in probes.seeds.iter().enumerate() {
            for r in 0..b {
                let scale = probes.weight * tr_bar[r];
                for i in 0..self.dim {
                    dg_bar[(j * b + r, i)] = scale * seed[(r, i)];
                }
            }
        }

        let out = &self.layers[n_hidden];
        grad[n_hidden].w.gemm_tr(1.0, &cache.hs[n_hidden], g_bar, 1.0);
        grad[n_hidden].w.gemm_tr(1.0, &cache.dhs[n_hidden], &dg_bar, 1.0);
        grad[n_hidden].b += g_bar.row_sum().transpose();
        let wt = out.w.transpose();
        let mut h_bar = g_bar * &wt;
        let mut dh_bar = &dg_bar * &wt;

        for l in (0..n_hidden).rev() {
            let h = &cache.hs[l + 1];
            let du = &cache.dus[l + 1];
            let s = h.map(|v| 1.0 - v * v);
            let mut du_bar = dh_bar.clone();
            let mut s_bar = DMatrix::<f64>::zeros(b, h.ncols());
            for j in 0..k {
                let rows = j * b;
                for c in 0..h.ncols() {
                    for r in 0..b {
                        let idx = (rows + r, c);
                        s_bar[(r, c)] += du[idx] * dh_bar[idx];
                        du_bar[idx] *= s[(r, c)];
                    }
                }
            }
            let mut u_bar = h_bar;
            for c in 0..h.ncols() {
                for r in 0..b {
                    let (hv, sv) = (h[(r, c)], s[(r, c)]);
                    u_bar[(r, c)] = u_bar[(r, c)] * sv - 2.0 * s_bar[(r, c)] * hv * sv;
                }
            }
            grad[l].w.gemm_tr(1.0, &cache.hs[l], &u_bar, 1.0);
            grad[l].w.gemm_tr(1.0, &cache.dhs[l], &du_bar, 1.0);
            grad[l].b += u_bar.row_sum().transpose();
            let wt = self.layers[l].w.transpose();
            h_bar = &u_bar * &wt;
            if l > 0 {
                dh_bar = &du_bar * &wt;
            }
        }
        h_bar.columns(0, self.dim).into_owned()
    }
}

/// Activations of one cached evaluation.
pub(crate) struct NetCache {
    hs: Vec<DMatrix<f64>>,
    dhs: Vec<DMatrix<f64>>,
    dus: Vec<DMatrix<f64>>,
}

impl Dynamics for DynamicsNet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    fn eval(&self, z: &DMatrix<f64>, t: f64, attrs: &DMatrix<f64>) -> DMatrix<f64> {
        let n_hidden = self.layers.len() - 1;
        let mut h = self.input(z, t, attrs);
        for layer in &self.layers[..n_hidden] {
            h = layer.apply(&h);
            h.iter_mut().for_each(|v| *v = v.tanh());
        }
        self.layers[n_hidden].apply(&h)
    }

    fn eval_trace(
        &self,
        z: &DMatrix<f64>,
        t: f64,
        attrs: &DMatrix<f64>,
        probes: &ProbeSet,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let (g, tr, _) = self.forward_cached(z, t, attrs, probes);
        (g, tr)
    }
}

fn stack(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        out.view_mut((at, 0), (b.nrows(), cols)).copy_from(b);
        at += b.nrows();
    }
    out
}
