//! Diffusion models, parametric drift families and discretized paths.

use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{GrowthBound, ScalarField};

/// `dX = S(X) dt + σ(X) dW` with σ known.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub name: String,
    pub drift: ScalarField,
    pub diffusion: ScalarField,
    /// σ′, needed by the Milstein scheme.
    pub diffusion_prime: Option<ScalarField>,
}

impl DiffusionModel {
    pub fn new(name: impl Into<String>, drift: ScalarField, diffusion: ScalarField) -> Self {
        DiffusionModel {
            name: name.into(),
            drift,
            diffusion,
            diffusion_prime: None,
        }
    }

    pub fn with_diffusion_prime(mut self, sp: ScalarField) -> Self {
        self.diffusion_prime = Some(sp);
        self
    }

    #[inline]
    pub fn drift(&self, x: f64) -> f64 {
        self.drift.eval(x)
    }

    #[inline]
    pub fn sigma(&self, x: f64) -> f64 {
        self.diffusion.eval(x)
    }

    /// Ornstein–Uhlenbeck model `dX = −γX dt + dW`.
    pub fn ornstein_uhlenbeck(gamma: f64) -> Self {
        make_ou_family().model_at(gamma)
    }
}

type GammaFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// A drift family `S(γ, x)`, γ ∈ (α, β), with its analytic derivatives.
#[derive(Clone)]
pub struct ParametricFamily {
    pub name: String,
    pub gamma_range: (f64, f64),
    s: GammaFn,
    s_dot: GammaFn,
    s_ddot: GammaFn,
    s_dot_prime: GammaFn,
    pub sigma: ScalarField,
    pub sigma_prime: ScalarField,
    drift_growth: GrowthBound,
}

impl fmt::Debug for ParametricFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParametricFamily")
            .field("name", &self.name)
            .field("gamma_range", &self.gamma_range)
            .finish()
    }
}

pub struct FamilyBuilder {
    pub name: String,
    pub gamma_range: (f64, f64),
    pub drift_growth: GrowthBound,
    pub sigma: ScalarField,
    pub sigma_prime: ScalarField,
}

impl FamilyBuilder {
    pub fn build<A, B, C, D>(self, s: A, s_dot: B, s_ddot: C, s_dot_prime: D) -> ParametricFamily
    where
        A: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        B: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        C: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        ParametricFamily {
            name: self.name,
            gamma_range: self.gamma_range,
            s: Arc::new(s),
            s_dot: Arc::new(s_dot),
            s_ddot: Arc::new(s_ddot),
            s_dot_prime: Arc::new(s_dot_prime),
            sigma: self.sigma,
            sigma_prime: self.sigma_prime,
            drift_growth: self.drift_growth,
        }
    }
}

impl ParametricFamily {
    #[inline]
    pub fn drift(&self, gamma: f64, x: f64) -> f64 {
        (self.s)(gamma, x)
    }

    /// ∂_γ S
    #[inline]
    pub fn drift_dot(&self, gamma: f64, x: f64) -> f64 {
        (self.s_dot)(gamma, x)
    }

    /// ∂²_γ S
    #[inline]
    pub fn drift_ddot(&self, gamma: f64, x: f64) -> f64 {
        (self.s_ddot)(gamma, x)
    }

    /// ∂_x ∂_γ S
    #[inline]
    pub fn drift_dot_prime(&self, gamma: f64, x: f64) -> f64 {
        (self.s_dot_prime)(gamma, x)
    }

    #[inline]
    pub fn sigma(&self, x: f64) -> f64 {
        self.sigma.eval(x)
    }

    #[inline]
    pub fn sigma_prime(&self, x: f64) -> f64 {
        self.sigma_prime.eval(x)
    }

    pub fn contains(&self, gamma: f64) -> bool {
        gamma > self.gamma_range.0 && gamma < self.gamma_range.1
    }

    pub fn check_gamma(&self, gamma: f64) -> Result<()> {
        if self.contains(gamma) {
            Ok(())
        } else {
            Err(Error::GammaOutOfRange {
                gamma,
                lo: self.gamma_range.0,
                hi: self.gamma_range.1,
            })
        }
    }

    pub fn model_at(&self, gamma: f64) -> DiffusionModel {
        let s = self.s.clone();
        let drift = ScalarField::new(
            format!("{}-drift({gamma})", self.name),
            self.drift_growth,
            move |x| s(gamma, x),
        );
        DiffusionModel::new(format!("{}({gamma})", self.name), drift, self.sigma.clone())
            .with_diffusion_prime(self.sigma_prime.clone())
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name.trim() {
            "ou" => Ok(make_ou_family()),
            "nonlinear" => Ok(make_nonlinear_family()),
            other => Err(Error::UnknownFamily(other.to_string())),
        }
    }

    /// Grid check of the drift class 𝐒(ρ, A, L) at `γ` over `[−outer, outer]`.
    pub fn drift_class(&self, gamma: f64, a: f64, outer: f64) -> DriftClass {
        let n = 2000;
        let inner: Vec<f64> = (0..=n).map(|i| -a + 2.0 * a * i as f64 / n as f64).collect();
        let lipschitz = inner
            .windows(2)
            .map(|w| ((self.drift(gamma, w[1]) - self.drift(gamma, w[0])) / (w[1] - w[0])).abs())
            .fold(0.0, f64::max);
        let rho = (0..=n)
            .flat_map(|i| {
                let y = a + (outer - a) * i as f64 / n as f64;
                [-self.drift(gamma, y), self.drift(gamma, -y)]
            })
            .fold(f64::INFINITY, f64::min);
        DriftClass { rho, a, lipschitz }
    }

    /// Compares the analytic derivatives with central differences at the given
    /// `(γ, x)` pairs; returns a description of the first mismatch.
    pub fn derivative_mismatch(
        &self,
        pairs: impl IntoIterator<Item = (f64, f64)>,
        tol: f64,
    ) -> Option<String> {
        let step = 1e-5;
        for (g, x) in pairs {
            let fd_gamma = (self.drift(g + step, x) - self.drift(g - step, x)) / (2.0 * step);
            let fd_gamma2 = (self.drift_dot(g + step, x) - self.drift_dot(g - step, x)) / (2.0 * step);
            let fd_x = (self.drift_dot(g, x + step) - self.drift_dot(g, x - step)) / (2.0 * step);
            let fd_sigma = (self.sigma(x + step) - self.sigma(x - step)) / (2.0 * step);
            let checks = [
                ("S_dot", self.drift_dot(g, x), fd_gamma),
                ("S_ddot", self.drift_ddot(g, x), fd_gamma2),
                ("S_dot_prime", self.drift_dot_prime(g, x), fd_x),
                ("sigma_prime", self.sigma_prime(x), fd_sigma),
            ];
            for (what, analytic, fd) in checks {
                if (analytic - fd).abs() > tol * (1.0 + analytic.abs()) {
                    return Some(format!(
                        "{what} at (γ={g}, x={x}): analytic {analytic}, finite difference {fd}"
                    ));
                }
            }
        }
        None
    }
}

/// Measured constants of 𝐒(ρ, A, L): `|S(y) − S(z)| ≤ L|y − z|` on
/// `[−A, A]` and `sgn(y)S(y) ≤ −ρ` beyond. Membership needs `ρ > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftClass {
    pub rho: f64,
    pub a: f64,
    pub lipschitz: f64,
}

/// Ornstein–Uhlenbeck family `S(γ, x) = −γx`, σ ≡ 1, on Γ = (0.1, 10).
pub fn make_ou_family() -> ParametricFamily {
    FamilyBuilder {
        name: "ou".into(),
        gamma_range: (0.1, 10.0),
        drift_growth: GrowthBound::new(10.0, 1.0),
        sigma: ScalarField::constant(1.0),
        sigma_prime: ScalarField::constant(0.0),
    }
    .build(
        |g, x| -g * x,
        |_, x| -x,
        |_, _| 0.0,
        |_, _| -1.0,
    )
}

/// `S(γ, x) = −γx − x³/(1 + x²)`, `σ(x) = √(1 + 0.5/(1 + x²))`, on Γ = (0.1, 10).
pub fn make_nonlinear_family() -> ParametricFamily {
    let sigma = ScalarField::new("nonlinear-sigma", GrowthBound::new(1.3, 0.0), |x: f64| {
        (1.0 + 0.5 / (1.0 + x * x)).sqrt()
    });
    let sigma_prime = ScalarField::new("nonlinear-sigma-prime", GrowthBound::new(1.0, 0.0), |x: f64| {
        let r = 1.0 + x * x;
        let s = (1.0 + 0.5 / r).sqrt();
        -0.5 * x / (r * r * s)
    });
    FamilyBuilder {
        name: "nonlinear".into(),
        gamma_range: (0.1, 10.0),
        drift_growth: GrowthBound::new(11.0, 1.0),
        sigma,
        sigma_prime,
    }
    .build(
        |g, x| -g * x - x * x * x / (1.0 + x * x),
        |_, x| -x,
        |_, _| 0.0,
        |_, _| -1.0,
    )
}

/// Uniformly sampled trajectory `X_{t_i}`, `t_i = i·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    dt: f64,
    values: Vec<f64>,
    seed: Option<u64>,
}

impl Path {
    pub fn new(dt: f64, values: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::MalformedPath(format!("step {dt} must be positive")));
        }
        if values.is_empty() {
            return Err(Error::MalformedPath("path has no values".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::MalformedPath(format!("non-finite value {v}")));
        }
        Ok(Path {
            dt,
            values,
            seed: None,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    /// Horizon `T = N·dt`.
    pub fn horizon(&self) -> f64 {
        self.steps() as f64 * self.dt
    }

    pub fn first(&self) -> f64 {
        self.values[0]
    }

    pub fn last(&self) -> f64 {
        *self.values.last().expect("nonempty")
    }

    /// Writes the path as text: the step `dt` on the first line, then one
    /// value per line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.dt)?;
        for v in &self.values {
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    /// Reads the format produced by [`Path::write_csv`]. The header may also be
    /// written as `dt,<value>` or `dt=<value>`.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r
            .lines()
            .map(|l| l.map(|s| s.trim().to_string()))
            .filter(|l| !matches!(l, Ok(s) if s.is_empty()));
        let header = lines
            .next()
            .ok_or_else(|| Error::MalformedPath("empty input".into()))??;
        let dt_text = header
            .strip_prefix("dt")
            .map(|rest| rest.trim_start_matches([',', '=', ' ', ':']))
            .unwrap_or(&header);
        let dt: f64 = dt_text
            .parse()
            .map_err(|_| Error::MalformedPath(format!("bad header `{header}`")))?;
        let mut values = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let v: f64 = line
                .parse()
                .map_err(|_| Error::MalformedPath(format!("bad value `{line}` on data line {}", i + 1)))?;
            values.push(v);
        }
        Path::new(dt, values)
    }
}
