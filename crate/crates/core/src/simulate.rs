//! Euler–Maruyama and Milstein discretizations, seeded replicate streams,
//! and the path functionals shared by all estimators.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::invariant::InvariantLaw;
use crate::model::{DiffusionModel, Path};

pub const MAX_DT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Stationary,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    EulerMaruyama,
    Milstein,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub init: Init,
    pub seed: u64,
    pub scheme: Scheme,
}

impl SimConfig {
    pub fn new(horizon: f64) -> Self {
        SimConfig {
            dt: 0.01,
            horizon,
            init: Init::Stationary,
            seed: 0,
            scheme: Scheme::EulerMaruyama,
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    /// Number of steps `T/dt`, rounded (with a warning) when not integral.
    pub fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0 && self.dt <= MAX_DT) {
            return Err(Error::InvalidConfig(format!(
                "dt = {} must lie in (0, {MAX_DT}]",
                self.dt
            )));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "horizon {} must be positive",
                self.horizon
            )));
        }
        let ratio = self.horizon / self.dt;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-9 * ratio {
            warn!(
                "T/dt = {ratio} is not an integer; using {n} steps (T = {})",
                n * self.dt
            );
        }
        Ok((n as usize).max(1))
    }
}

/// Generator for replicate `index` of stream family `family` under a master seed.
/// Distinct `(family, index)` pairs select distinct ChaCha streams of the same key.
pub fn stream_rng(master_seed: u64, family: u32, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((family as u64) << 32) | index as u64);
    rng
}

/// Simulates one path. `law` supplies stationary initial draws and the
/// blow-up guard `10·domain.hi`; without it only `Fixed` starts are possible
/// and the guard only catches non-finite values.
pub fn simulate_path<R: Rng + ?Sized>(
    model: &DiffusionModel,
    cfg: &SimConfig,
    law: Option<&InvariantLaw>,
    rng: &mut R,
) -> Result<Path> {
    let n = cfg.steps()?;
    let x0 = match (cfg.init, law) {
        (Init::Fixed(x), _) => x,
        (Init::Stationary, Some(law)) => law.sample(rng),
        (Init::Stationary, None) => {
            return Err(Error::InvalidConfig(
                "stationary start needs the invariant law".into(),
            ))
        }
    };
    let guard = law.map_or(f64::INFINITY, |l| 10.0 * l.domain().hi);
    let dt = cfg.dt;
    let sdt = dt.sqrt();
    let sigma_prime = |x: f64| match &model.diffusion_prime {
        Some(sp) => sp.eval(x),
        None => {
            let h = 1e-6 * (1.0 + x.abs());
            (model.sigma(x + h) - model.sigma(x - h)) / (2.0 * h)
        }
    };
    let mut values = Vec::with_capacity(n + 1);
    values.push(x0);
    let mut x = x0;
    for step in 1..=n {
        let z: f64 = rng.sample(StandardNormal);
        let dw = sdt * z;
        let s = model.sigma(x);
        let mut next = x + model.drift(x) * dt + s * dw;
        if cfg.scheme == Scheme::Milstein {
            next += 0.5 * s * sigma_prime(x) * (dw * dw - dt);
        }
        if !(next.abs() <= guard) {
            return Err(Error::BlowUp { step, value: next });
        }
        x = next;
        values.push(x);
    }
    Ok(Path::new(dt, values)?.with_seed(cfg.seed))
}

/// Euler path driven by given Brownian increments, so that paths at step
/// sizes `dt` and `k·dt` can share one Brownian motion.
pub fn simulate_from_increments(model: &DiffusionModel, x0: f64, dt: f64, dw: &[f64]) -> Result<Path> {
    let mut values = Vec::with_capacity(dw.len() + 1);
    let mut x = x0;
    values.push(x);
    for (i, d) in dw.iter().enumerate() {
        x += model.drift(x) * dt + model.sigma(x) * d;
        if !x.is_finite() {
            return Err(Error::BlowUp { step: i + 1, value: x });
        }
        values.push(x);
    }
    Path::new(dt, values)
}

/// Sums consecutive blocks of `k` increments.
pub fn coarsen_increments(dw: &[f64], k: usize) -> Vec<f64> {
    dw.chunks_exact(k).map(|c| c.iter().sum()).collect()
}

/// `∫₀ᵀ g(X_t) dt` by the trapezoid rule on the path grid.
pub fn time_integral_fn<G: Fn(f64) -> f64>(path: &Path, g: G) -> f64 {
    let v = path.values();
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let inner: f64 = v[1..n - 1].iter().map(|x| g(*x)).sum();
    path.dt() * (inner + 0.5 * (g(v[0]) + g(v[n - 1])))
}

pub fn time_integral(path: &Path, g: &ScalarField) -> f64 {
    time_integral_fn(path, |x| g.eval(x))
}

/// Brownian increments recovered from the path under `model`.
pub fn brownian_increments(path: &Path, model: &DiffusionModel) -> Result<Vec<f64>> {
    let dt = path.dt();
    path.values()
        .windows(2)
        .map(|w| {
            let s = model.sigma(w[0]);
            if !(s > 0.0) {
                return Err(Error::NonPositiveSigma { x: w[0] });
            }
            Ok((w[1] - w[0] - model.drift(w[0]) * dt) / s)
        })
        .collect()
}

/// Left-point Itô sum `Σ g(X_i)·ΔW_i`.
pub fn ito_integral_fn<G: Fn(f64) -> f64>(path: &Path, model: &DiffusionModel, g: G) -> Result<f64> {
    let dt = path.dt();
    let mut total = 0.0;
    for w in path.values().windows(2) {
        let s = model.sigma(w[0]);
        if !(s > 0.0) {
            return Err(Error::NonPositiveSigma { x: w[0] });
        }
        total += g(w[0]) * (w[1] - w[0] - model.drift(w[0]) * dt) / s;
    }
    Ok(total)
}

pub fn ito_integral(path: &Path, model: &DiffusionModel, g: &ScalarField) -> Result<f64> {
    ito_integral_fn(path, model, |x| g.eval(x))
}
