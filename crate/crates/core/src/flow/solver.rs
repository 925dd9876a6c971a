use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 20;
pub const MIN_STEPS: usize = 4;
const MAX_ADAPTIVE_STEPS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SolverMethod {
    FixedRk4 { steps: usize },
    /// Dormand-Prince 5(4) with step-size control. Inference only.
    AdaptiveRk45 { rtol: f64, atol: f64 },
}

/// Integration scheme and the time interval: data at `t1`, latent at `t0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub t0: f64,
    pub t1: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::rk4(DEFAULT_STEPS)
    }
}

impl SolverConfig {
    pub fn rk4(steps: usize) -> Self {
        Self {
            method: SolverMethod::FixedRk4 { steps },
            t0: 0.0,
            t1: 1.0,
        }
    }

    pub fn rk45(rtol: f64, atol: f64) -> Self {
        Self {
            method: SolverMethod::AdaptiveRk45 { rtol, atol },
            t0: 0.0,
            t1: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            SolverMethod::FixedRk4 { steps } if steps < MIN_STEPS => {
                Err(Error::invalid(format!("need at least {MIN_STEPS} RK4 steps, got {steps}")))
            }
            SolverMethod::AdaptiveRk45 { rtol, atol } if !(rtol > 0.0 && atol > 0.0) => {
                Err(Error::invalid("solver tolerances must be positive"))
            }
            _ if !(self.t0.is_finite() && self.t1.is_finite()) || self.t0 == self.t1 => {
                Err(Error::invalid("integration interval must be finite and non-empty"))
            }
            _ => Ok(()),
        }
    }
}

fn check_finite(y: &DMatrix<f64>, t: f64) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence(format!("non-finite state at t = {t}")))
    }
}

/// Integrates `dy/dt = f(t, y)` from `from` to `to` with `method`.
pub fn solve<F>(f: F, y0: DMatrix<f64>, from: f64, to: f64, method: SolverMethod) -> Result<DMatrix<f64>>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    match method {
        SolverMethod::FixedRk4 { steps } => rk4(f, y0, from, to, steps),
        SolverMethod::AdaptiveRk45 { rtol, atol } => rk45(f, y0, from, to, rtol, atol),
    }
}

/// Classical fourth-order Runge-Kutta with `steps` equal steps.
pub fn rk4<F>(f: F, mut y: DMatrix<f64>, from: f64, to: f64, steps: usize) -> Result<DMatrix<f64>>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let steps = steps.max(1);
    let h = (to - from) / steps as f64;
    for n in 0..steps {
        let t = from + n as f64 * h;
        let k1 = f(t, &y);
        let k2 = f(t + 0.5 * h, &(&y + &k1 * (0.5 * h)));
        let k3 = f(t + 0.5 * h, &(&y + &k2 * (0.5 * h)));
        let k4 = f(t + h, &(&y + &k3 * h));
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        check_finite(&y, t + h)?;
    }
    Ok(y)
}

const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_B_LOW: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Dormand-Prince 5(4) with a mixed relative/absolute RMS error norm.
pub fn rk45<F>(f: F, mut y: DMatrix<f64>, from: f64, to: f64, rtol: f64, atol: f64) -> Result<DMatrix<f64>>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let span = to - from;
    let dir = span.signum();
    let mut t = from;
    let mut h = span / 20.0;
    for _ in 0..MAX_ADAPTIVE_STEPS {
        if (to - t) * dir <= 1e-14 * span.abs() {
            return Ok(y);
        }
        if (t + h - to) * dir > 0.0 {
            h = to - t;
        }
        let mut k: Vec<DMatrix<f64>> = Vec::with_capacity(7);
        for (s, (&c, a)) in DP_C.iter().zip(&DP_A).enumerate() {
            let mut stage = y.clone();
            for (kj, &aj) in k.iter().zip(&a[..s]) {
                if aj != 0.0 {
                    stage += kj * (h * aj);
                }
            }
            k.push(f(t + c * h, &stage));
        }
        let mut high = y.clone();
        let mut err = DMatrix::zeros(y.nrows(), y.ncols());
        for (kj, (&b, &bl)) in k.iter().zip(DP_B.iter().zip(&DP_B_LOW)) {
            high += kj * (h * b);
            err += kj * (h * (b - bl));
        }
        let norm = (err
            .iter()
            .zip(y.iter().zip(high.iter()))
            .map(|(e, (a, b))| (e / (atol + rtol * a.abs().max(b.abs()))).powi(2))
            .sum::<f64>()
            / err.len().max(1) as f64)
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence(format!("non-finite error estimate at t = {t}")));
        }
        if norm <= 1.0 {
            t += h;
            y = high;
            check_finite(&y, t)?;
        }
        let factor = if norm == 0.0 { 5.0 } else { (0.9 * norm.powf(-0.2)).clamp(0.2, 5.0) };
        h *= factor;
        if h.abs() < 1e-12 * span.abs() {
            return Err(Error::Divergence(format!("step size underflow at t = {t}")));
        }
    }
    Err(Error::Divergence(format!("no convergence in {MAX_ADAPTIVE_STEPS} steps")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(rate: f64) -> impl Fn(f64, &DMatrix<f64>) -> DMatrix<f64> {
        move |_, y| y * rate
    }

    #[test]
    fn rk4_exponential() {
        let y0 = DMatrix::from_element(1, 1, 1.0);
        let y = rk4(decay(2f64.ln()), y0, 1.0, 0.0, 20).unwrap();
        assert!((y[(0, 0)] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn rk4_global_error_is_fourth_order() {
        let errs: Vec<f64> = [10, 20, 40]
            .iter()
            .map(|&n| {
                let y = rk4(decay(-3.0), DMatrix::from_element(1, 1, 1.0), 0.0, 1.0, n).unwrap();
                (y[(0, 0)] - (-3f64).exp()).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((12.0..20.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn rk45_meets_tolerance() {
        let y0 = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        // harmonic oscillator
        let f = |_t: f64, y: &DMatrix<f64>| DMatrix::from_row_slice(1, 2, &[y[(0, 1)], -y[(0, 0)]]);
        let y = rk45(f, y0, 0.0, 3.0, 1e-8, 1e-10).unwrap();
        assert!((y[(0, 0)] - 3f64.cos()).abs() < 1e-6);
        assert!((y[(0, 1)] + 3f64.sin()).abs() < 1e-6);
    }

    #[test]
    fn divergence_is_reported() {
        let f = |_t: f64, y: &DMatrix<f64>| y.map(|v| v * v * 1e6);
        let y0 = DMatrix::from_element(1, 1, 1e200);
        assert!(matches!(rk4(f, y0, 0.0, 1.0, 4), Err(Error::Divergence(_))));
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::rk4(3).validate().is_err());
        assert!(SolverConfig::rk4(4).validate().is_ok());
        assert!(SolverConfig::rk45(0.0, 1e-7).validate().is_err());
        assert!(SolverConfig::default().validate().is_ok());
    }
}
