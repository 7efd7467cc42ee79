//! Analytic-versus-finite-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A scalar loss of a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn num_params(&self) -> usize;
    fn value(&self, params: &[f64]) -> Result<f64>;
    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates sampled (all of them when the model is smaller).
    pub samples: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator; keeps near-zero
    /// gradients from amplifying round-off.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, samples: 50, seed: 0, abs_floor: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub loss: f64,
    pub max_rel_error: f64,
    pub coords: Vec<CoordCheck>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what: what.into(), iteration: 0 })
    }
}

pub fn grad_check<O: Objective + ?Sized>(
    objective: &O,
    params: &[f64],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let n = objective.num_params();
    if params.len() != n {
        return Err(Error::Shape(format!("objective has {n} parameters, got {}", params.len())));
    }
    let (loss, grad) = objective.value_and_grad(params)?;
    finite(loss, "loss")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut indices = sample(&mut rng, n, cfg.samples.min(n)).into_vec();
    indices.sort_unstable();
    let mut probe = params.to_vec();
    let mut coords = Vec::with_capacity(indices.len());
    for index in indices {
        let orig = probe[index];
        probe[index] = orig + cfg.eps;
        let up = finite(objective.value(&probe)?, "loss")?;
        probe[index] = orig - cfg.eps;
        let down = finite(objective.value(&probe)?, "loss")?;
        probe[index] = orig;
        let numeric = (up - down) / (2.0 * cfg.eps);
        let analytic = grad[index];
        coords.push(CoordCheck { index, analytic, numeric, rel_error: relative_error(analytic, numeric, cfg.abs_floor) });
    }
    let max_rel_error = coords.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { loss, max_rel_error, coords })
}
