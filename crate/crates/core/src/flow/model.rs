use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::net::{Dynamics, DynamicsNet, ProbeSet};
use super::solver::{SolverConfig, SolverMethod};
use super::train::rows_to_matrix;
use super::{integrate, log_likelihood, TraceMethod};
use crate::error::{Error, Result};

const MODEL_HEADER: &str = "creakbench-flow v1";
const HEADER_END: &str = "end\n";
/// Rows per batched solve. Fixed so results never depend on thread count.
const CHUNK: usize = 256;

/// Per-attribute z-score statistics. Constant attributes get unit spread.
#[derive(Debug, Clone, PartialEq)]
pub struct AttrStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl AttrStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Self {
        let rows: Vec<&[f64]> = rows.collect();
        let n = rows.len().max(1) as f64;
        let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..dim)
            .map(|j| {
                let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var.sqrt() > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// A trained conditional flow: dynamics, solver, attribute statistics and
/// trace settings. Parameters are held at single precision so that the
/// file format round-trips exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    net: DynamicsNet,
    solver: SolverConfig,
    stats: AttrStats,
    trace: TraceMethod,
    seed: u64,
    final_nll: f64,
}

impl FlowModel {
    pub fn new(
        mut net: DynamicsNet,
        solver: SolverConfig,
        stats: AttrStats,
        trace: TraceMethod,
        seed: u64,
        final_nll: f64,
    ) -> Result<Self> {
        solver.validate()?;
        if stats.dim() != net.attr_dim() {
            return Err(Error::DimMismatch {
                expected: net.attr_dim(),
                got: stats.dim(),
            });
        }
        let rounded: Vec<f64> = net.params().iter().map(|&p| p as f32 as f64).collect();
        if rounded.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("non-finite model parameter"));
        }
        net.set_params(&rounded)?;
        Ok(Self {
            net,
            solver,
            stats,
            trace,
            seed,
            final_nll,
        })
    }

    pub fn dim(&self) -> usize {
        self.net.dim()
    }

    pub fn attr_dim(&self) -> usize {
        self.net.attr_dim()
    }

    pub fn net(&self) -> &DynamicsNet {
        &self.net
    }

    pub fn solver(&self) -> &SolverConfig {
        &self.solver
    }

    pub fn stats(&self) -> &AttrStats {
        &self.stats
    }

    pub fn trace(&self) -> TraceMethod {
        self.trace
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Mean negative log-likelihood of the training set under the stored
    /// parameters.
    pub fn final_nll(&self) -> f64 {
        self.final_nll
    }

    pub(crate) fn set_final_nll(&mut self, nll: f64) {
        self.final_nll = nll;
    }

    pub fn with_solver(mut self, solver: SolverConfig) -> Result<Self> {
        solver.validate()?;
        self.solver = solver;
        Ok(self)
    }

    fn check(&self, s: &[Vec<f64>], a: &[Vec<f64>]) -> Result<()> {
        if s.len() != a.len() {
            return Err(Error::DimMismatch {
                expected: s.len(),
                got: a.len(),
            });
        }
        for v in s {
            if v.len() != self.dim() {
                return Err(Error::DimMismatch {
                    expected: self.dim(),
                    got: v.len(),
                });
            }
        }
        for v in a {
            if v.len() != self.attr_dim() {
                return Err(Error::DimMismatch {
                    expected: self.attr_dim(),
                    got: v.len(),
                });
            }
        }
        Ok(())
    }

    /// Applies `op` to fixed-size chunks in parallel and concatenates the
    /// rows in order.
    fn chunked<T, F>(&self, s: &[Vec<f64>], a: &[Vec<f64>], op: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize, DMatrix<f64>, DMatrix<f64>) -> Result<Vec<T>> + Sync,
    {
        self.check(s, a)?;
        let results: Vec<Result<Vec<T>>> = s
            .par_chunks(CHUNK)
            .zip(a.par_chunks(CHUNK))
            .enumerate()
            .map(|(i, (sc, ac))| {
                let srows: Vec<&[f64]> = sc.iter().map(Vec::as_slice).collect();
                let normed: Vec<Vec<f64>> = ac.iter().map(|v| self.stats.normalize(v)).collect();
                let arows: Vec<&[f64]> = normed.iter().map(Vec::as_slice).collect();
                op(i, rows_to_matrix(&srows, self.dim()), rows_to_matrix(&arows, self.attr_dim()))
            })
            .collect();
        let mut out = Vec::with_capacity(s.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }

    fn transport(&self, s: &[Vec<f64>], a: &[Vec<f64>], from: f64, to: f64) -> Result<Vec<Vec<f64>>> {
        self.chunked(s, a, |_, z, attrs| {
            let out = integrate(&self.net, &z, &attrs, from, to, self.solver.method)?;
            Ok(out.row_iter().map(|r| r.iter().copied().collect()).collect())
        })
    }

    /// Data to latent: integrates from `t1` to `t0` under `a`.
    pub fn encode_batch(&self, s: &[Vec<f64>], a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.transport(s, a, self.solver.t1, self.solver.t0)
    }

    /// Latent to data: integrates from `t0` to `t1` under `a`.
    pub fn decode_batch(&self, z: &[Vec<f64>], a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.transport(z, a, self.solver.t0, self.solver.t1)
    }

    pub fn encode(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&[s.to_vec()], &[a.to_vec()])?.remove(0))
    }

    pub fn decode(&self, z: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode_batch(&[z.to_vec()], &[a.to_vec()])?.remove(0))
    }

    /// Encodes under `a` and decodes under `a_tilde`.
    pub fn manipulate_batch(&self, s: &[Vec<f64>], a: &[Vec<f64>], a_tilde: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let z = self.encode_batch(s, a)?;
        self.decode_batch(&z, a_tilde)
    }

    pub fn manipulate(&self, s: &[f64], a: &[f64], a_tilde: &[f64]) -> Result<Vec<f64>> {
        let z = self.encode(s, a)?;
        self.decode(&z, a_tilde)
    }

    pub fn log_likelihood_batch(&self, s: &[Vec<f64>], a: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.chunked(s, a, |chunk, z, attrs| {
            let probes = match self.trace {
                TraceMethod::Exact => ProbeSet::exact(z.nrows(), self.dim()),
                TraceMethod::Hutchinson { probes } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (chunk as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
                    ProbeSet::rademacher(z.nrows(), self.dim(), probes, &mut rng)
                }
            };
            Ok(log_likelihood(&self.net, &z, &attrs, &self.solver, &probes)?.iter().copied().collect())
        })
    }

    pub fn log_likelihood(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        Ok(self.log_likelihood_batch(&[s.to_vec()], &[a.to_vec()])?[0])
    }

    /// Text header followed by the little-endian `f32` parameter blob.
    pub fn to_bytes(&self) -> Vec<u8> {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
        let mut h = String::new();
        let _ = writeln!(h, "{MODEL_HEADER}");
        let _ = writeln!(h, "dim = {}", self.dim());
        let _ = writeln!(h, "attr_dim = {}", self.attr_dim());
        let _ = writeln!(h, "hidden = {}", self.net.hidden());
        let _ = writeln!(h, "hidden_layers = {}", self.net.hidden_layers());
        let _ = match self.solver.method {
            SolverMethod::FixedRk4 { steps } => writeln!(h, "solver = rk4 {steps}"),
            SolverMethod::AdaptiveRk45 { rtol, atol } => writeln!(h, "solver = rk45 {rtol} {atol}"),
        };
        let _ = writeln!(h, "t0 = {}", self.solver.t0);
        let _ = writeln!(h, "t1 = {}", self.solver.t1);
        let _ = match self.trace {
            TraceMethod::Exact => writeln!(h, "trace = exact"),
            TraceMethod::Hutchinson { probes } => writeln!(h, "trace = hutchinson {probes}"),
        };
        let _ = writeln!(h, "seed = {}", self.seed);
        let _ = writeln!(h, "final_nll = {}", self.final_nll);
        let _ = writeln!(h, "attr_mean = {}", join(&self.stats.mean));
        let _ = writeln!(h, "attr_std = {}", join(&self.stats.std));
        let params = self.net.params();
        let _ = writeln!(h, "params = {}", params.len());
        h.push_str(HEADER_END);
        let mut bytes = h.into_bytes();
        for p in params {
            bytes.extend_from_slice(&(p as f32).to_le_bytes());
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::ModelFormat(msg.to_string());
        let marker = format!("\n{HEADER_END}");
        let end = bytes
            .windows(marker.len())
            .position(|w| w == marker.as_bytes())
            .ok_or_else(|| bad("missing header terminator"))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
        let blob = &bytes[end + marker.len()..];
        let mut lines = header.lines();
        if lines.next() != Some(MODEL_HEADER) {
            return Err(bad("unrecognised header or version"));
        }
        let mut fields = std::collections::HashMap::new();
        for line in lines {
            let (k, v) = line.split_once('=').ok_or_else(|| bad("malformed header line"))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| fields.get(k).map(String::as_str).ok_or_else(|| Error::ModelFormat(format!("missing {k}")));
        fn num<T: std::str::FromStr>(s: &str, key: &str) -> Result<T> {
            s.parse().map_err(|_| Error::ModelFormat(format!("bad value for {key}: '{s}'")))
        }
        let floats = |k: &str| -> Result<Vec<f64>> {
            let s = get(k)?;
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split_whitespace().map(|v| num(v, k)).collect()
        };
        let dim: usize = num(get("dim")?, "dim")?;
        let attr_dim: usize = num(get("attr_dim")?, "attr_dim")?;
        let hidden: usize = num(get("hidden")?, "hidden")?;
        let hidden_layers: usize = num(get("hidden_layers")?, "hidden_layers")?;
        let solver_parts: Vec<&str> = get("solver")?.split_whitespace().collect();
        let method = match solver_parts.as_slice() {
            ["rk4", steps] => SolverMethod::FixedRk4 { steps: num(steps, "solver")? },
            ["rk45", rtol, atol] => SolverMethod::AdaptiveRk45 {
                rtol: num(rtol, "solver")?,
                atol: num(atol, "solver")?,
            },
            _ => return Err(bad("unknown solver")),
        };
        let solver = SolverConfig {
            method,
            t0: num(get("t0")?, "t0")?,
            t1: num(get("t1")?, "t1")?,
        };
        let trace = match get("trace")?.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["exact"] => TraceMethod::Exact,
            ["hutchinson", k] => TraceMethod::Hutchinson { probes: num(k, "trace")? },
            _ => return Err(bad("unknown trace method")),
        };
        let stats = AttrStats {
            mean: floats("attr_mean")?,
            std: floats("attr_std")?,
        };
        if stats.mean.len() != attr_dim || stats.std.len() != attr_dim {
            return Err(bad("attribute statistics do not match attr_dim"));
        }
        let n_params: usize = num(get("params")?, "params")?;
        let mut net = DynamicsNet::zeros(dim, attr_dim, hidden, hidden_layers);
        if n_params != net.n_params() || blob.len() != 4 * n_params {
            return Err(bad("parameter blob size mismatch"));
        }
        let params: Vec<f64> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        net.set_params(&params)?;
        Self::new(
            net,
            solver,
            stats,
            trace,
            num(get("seed")?, "seed")?,
            num(get("final_nll")?, "final_nll")?,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(seed: u64) -> FlowModel {
        let net = DynamicsNet::random(3, 2, 8, 2, 1.0, seed);
        let stats = AttrStats {
            mean: vec![0.5, -1.25],
            std: vec![0.1, 3.0],
        };
        FlowModel::new(net, SolverConfig::rk4(12), stats, TraceMethod::Hutchinson { probes: 4 }, seed, -1.5).unwrap()
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let m = model(3);
        let bytes = m.to_bytes();
        let back = FlowModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let m = model(4).with_solver(SolverConfig::rk45(1e-5, 1e-7)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flow.bin");
        m.save(&path).unwrap();
        assert_eq!(FlowModel::load(&path).unwrap(), m);
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = model(5).to_bytes();
        assert!(FlowModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(FlowModel::from_bytes(b"creakbench-flow v2\nend\n").is_err());
        assert!(FlowModel::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn constant_attributes_get_unit_spread() {
        let rows = [vec![1.0, 2.0], vec![1.0, 4.0]];
        let s = AttrStats::fit(rows.iter().map(Vec::as_slice), 2);
        assert_eq!(s.std, vec![1.0, 1.0]);
        assert_eq!(s.normalize(&[1.0, 3.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = model(6);
        assert!(m.encode(&[0.0; 2], &[0.0; 2]).is_err());
        assert!(m.log_likelihood(&[0.0; 3], &[0.0; 3]).is_err());
    }
}
