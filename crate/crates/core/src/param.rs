//! Parametric machinery for a drift family `S(γ, ·)`: the moment curve
//! `ϑ(γ)`, its derivative and inverse, Fisher information, the likelihood
//! ratio and its maximizer, the smooth score `Δ_T` and the one-step
//! estimators built on it.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::invariant::{InvariantLaw, Primitive};
use crate::model::{ParametricFamily, Path};
use crate::nonparam::empirical_moment;
use crate::quadrature;
use crate::simulate::time_integral_fn;

pub const TABLE_POINTS: usize = 256;
/// Relative margin (in units of `|Γ|`) kept between estimates and `∂Γ`.
pub const CLAMP_MARGIN: f64 = 1e-6;
const INVERSION_TOL: f64 = 1e-10;
const FD_STEP: f64 = 1e-4;
const FD_REL_TOL: f64 = 1e-4;
const FD_ABS_TOL: f64 = 1e-9;
const COARSE_POINTS: usize = 64;
const GOLDEN_TOL: f64 = 1e-8;
const BOUNDARY_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flag {
    /// `ϑ*` fell outside `ϑ(Γ)` and `γ*` was clamped.
    Clamped,
    /// The likelihood maximum sits within `1e-4` of `∂Γ`.
    BoundaryMaximum,
    /// `ϑ̇` vanishes, so `ϑ` does not identify `γ`.
    NonIdentifiable,
}

/// Law of the family at `γ`, with the tails of `fields` certified.
pub fn law_at(family: &ParametricFamily, gamma: f64, fields: &[&ScalarField]) -> Result<InvariantLaw> {
    family.check_gamma(gamma)?;
    InvariantLaw::build_certified(&family.model_at(gamma), fields)
}

/// `ϑ̇(γ) = 2(E[F A] − E[F] E[A])` with `A(x) = ∫₀ˣ Ṡ(γ,v)/σ(v)² dv`.
pub fn theta_dot_covariance(family: &ParametricFamily, f: &ScalarField, law: &InvariantLaw, gamma: f64) -> Result<f64> {
    let a = score_primitive(family, law, gamma);
    let ea = law.expect_tabulated(a.at_points());
    let ef = law.expect(f)?;
    let efa = law.expect_product(f, a.at_points(), |x| a.at(x))?;
    Ok(2.0 * (efa - ef * ea))
}

fn score_primitive(family: &ParametricFamily, law: &InvariantLaw, gamma: f64) -> Primitive {
    let grid = law.grid().clone();
    let vals = grid.sample(|x| {
        let s = family.sigma(x);
        family.drift_dot(gamma, x) / (s * s)
    });
    Primitive::new(grid, law.zero_node(), vals)
}

/// `I(γ) = E[(Ṡ(γ,ξ)/σ(ξ))²]`.
pub fn fisher_info_at(family: &ParametricFamily, law: &InvariantLaw, gamma: f64) -> f64 {
    let vals = law.grid().sample(|x| {
        let r = family.drift_dot(gamma, x) / family.sigma(x);
        r * r
    });
    law.expect_tabulated(&vals)
}

/// Piecewise cubic Hermite interpolant on increasing nodes.
#[derive(Debug, Clone)]
struct Cubic {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Cubic {
    /// Slopes limited so the interpolant is monotone wherever the data are.
    fn monotone(x: Vec<f64>, y: Vec<f64>, mut d: Vec<f64>) -> Self {
        for j in 0..x.len() - 1 {
            let delta = (y[j + 1] - y[j]) / (x[j + 1] - x[j]);
            if delta == 0.0 {
                d[j] = 0.0;
                d[j + 1] = 0.0;
                continue;
            }
            for k in [j, j + 1] {
                if d[k] * delta < 0.0 {
                    d[k] = 0.0;
                }
            }
            let a = d[j] / delta;
            let b = d[j + 1] / delta;
            let r = a * a + b * b;
            if r > 9.0 {
                let tau = 3.0 / r.sqrt();
                d[j] = tau * a * delta;
                d[j + 1] = tau * b * delta;
            }
        }
        Cubic { x, y, d }
    }

    /// Slopes from three-point differences on the non-uniform nodes.
    fn from_values(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        let mut d = vec![0.0; n];
        for i in 0..n {
            let (a, b, c) = if i == 0 {
                (0, 1, 2)
            } else if i == n - 1 {
                (n - 3, n - 2, n - 1)
            } else {
                (i - 1, i, i + 1)
            };
            // derivative at x[i] of the parabola through a, b, c
            let (xa, xb, xc) = (x[a], x[b], x[c]);
            let t = x[i];
            d[i] = y[a] * (2.0 * t - xb - xc) / ((xa - xb) * (xa - xc))
                + y[b] * (2.0 * t - xa - xc) / ((xb - xa) * (xb - xc))
                + y[c] * (2.0 * t - xa - xb) / ((xc - xa) * (xc - xb));
        }
        Cubic { x, y, d }
    }

    fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        let t = t.clamp(self.x[0], self.x[n - 1]);
        let j = self.x.partition_point(|v| *v <= t).clamp(1, n - 1) - 1;
        let h = self.x[j + 1] - self.x[j];
        let s = (t - self.x[j]) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        (2.0 * s3 - 3.0 * s2 + 1.0) * self.y[j]
            + (s3 - 2.0 * s2 + s) * h * self.d[j]
            + (-2.0 * s3 + 3.0 * s2) * self.y[j + 1]
            + (s3 - s2) * h * self.d[j + 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContextDiagnostics {
    /// `min |ϑ̇|` over the table.
    pub eps_dot: f64,
    /// `min I` over the table.
    pub eps_info: f64,
    pub identifiable: bool,
    /// Smallest `ρ` of the drift class 𝐒(ρ, 1, L) over the table, measured
    /// out to `|y| = 10`; positive when every tabulated drift is in the class.
    pub drift_rho: f64,
}

/// `ϑ(γ)`, `ϑ̇(γ)` and `I(γ)` tabulated over Γ for one `(family, F)` pair.
#[derive(Debug, Clone)]
pub struct ParamContext {
    family: ParametricFamily,
    f: ScalarField,
    gammas: Vec<f64>,
    thetas: Vec<f64>,
    theta_dots: Vec<f64>,
    infos: Vec<f64>,
    theta_curve: Cubic,
    theta_dot_curve: Cubic,
    info_curve: Cubic,
    diagnostics: ContextDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Inversion {
    pub gamma: f64,
    pub clamped: bool,
}

impl ParamContext {
    pub fn build(family: &ParametricFamily, f: &ScalarField) -> Result<Self> {
        let (lo, hi) = family.gamma_range;
        let margin = CLAMP_MARGIN * (hi - lo);
        let (a, b) = (lo + margin, hi - margin);
        let n = TABLE_POINTS;
        let gammas: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / (n - 1) as f64;
                if a > 0.0 {
                    a * (b / a).powf(t)
                } else {
                    a + (b - a) * t
                }
            })
            .collect();
        let mut thetas = Vec::with_capacity(n);
        let mut theta_dots = Vec::with_capacity(n);
        let mut infos = Vec::with_capacity(n);
        for &g in &gammas {
            let law = law_at(family, g, &[f])?;
            thetas.push(law.expect(f)?);
            theta_dots.push(theta_dot_covariance(family, f, &law, g)?);
            infos.push(fisher_info_at(family, &law, g));
        }
        let scale = thetas.iter().fold(0.0f64, |m, t| m.max(t.abs()));
        let eps_dot = theta_dots.iter().fold(f64::INFINITY, |m, d| m.min(d.abs()));
        let eps_info = infos.iter().cloned().fold(f64::INFINITY, f64::min);
        let increasing = theta_dots.iter().all(|d| *d > 0.0);
        let decreasing = theta_dots.iter().all(|d| *d < 0.0);
        let identifiable = eps_dot > 1e-9 * (1.0 + scale) && (increasing || decreasing);
        let drift_rho = gammas
            .iter()
            .map(|g| family.drift_class(*g, 1.0, 10.0).rho)
            .fold(f64::INFINITY, f64::min);
        if !(drift_rho > 0.0) {
            log::warn!("drift of `{}` leaves the class S(ρ, A, L) on the γ table (ρ = {drift_rho})", family.name);
        }
        let theta_curve = Cubic::monotone(gammas.clone(), thetas.clone(), theta_dots.clone());
        let theta_dot_curve = Cubic::from_values(gammas.clone(), theta_dots.clone());
        let info_curve = Cubic::from_values(gammas.clone(), infos.clone());
        Ok(ParamContext {
            family: family.clone(),
            f: f.clone(),
            gammas,
            thetas,
            theta_dots,
            infos,
            theta_curve,
            theta_dot_curve,
            info_curve,
            diagnostics: ContextDiagnostics {
                eps_dot,
                eps_info,
                identifiable,
                drift_rho,
            },
        })
    }

    pub fn family(&self) -> &ParametricFamily {
        &self.family
    }

    pub fn moment_function(&self) -> &ScalarField {
        &self.f
    }

    pub fn diagnostics(&self) -> ContextDiagnostics {
        self.diagnostics
    }

    /// Tabulation nodes `(γ, ϑ, ϑ̇, I)`.
    pub fn table(&self) -> impl Iterator<Item = (f64, f64, f64, f64)> + '_ {
        (0..self.gammas.len()).map(|i| (self.gammas[i], self.thetas[i], self.theta_dots[i], self.infos[i]))
    }

    pub fn gamma_bounds(&self) -> (f64, f64) {
        (self.gammas[0], *self.gammas.last().expect("nonempty"))
    }

    pub fn theta_of(&self, gamma: f64) -> f64 {
        self.theta_curve.eval(gamma)
    }

    pub fn theta_dot_of(&self, gamma: f64) -> f64 {
        self.theta_dot_curve.eval(gamma)
    }

    pub fn info_of(&self, gamma: f64) -> f64 {
        self.info_curve.eval(gamma)
    }

    /// Parametric bound `ϑ̇²/I` on the asymptotic variance of `√T(ϑ̃ − ϑ)`.
    pub fn param_avar(&self, gamma: f64) -> f64 {
        let d = self.theta_dot_of(gamma);
        d * d / self.info_of(gamma)
    }

    /// Solves `ϑ(γ) = theta` by bisection on the monotone tabulation,
    /// clamping to the margin-shrunk range when there is no solution.
    pub fn gamma_of_theta(&self, theta: f64) -> Inversion {
        let (a, b) = self.gamma_bounds();
        let (ta, tb) = (self.thetas[0], *self.thetas.last().expect("nonempty"));
        let increasing = tb > ta;
        let (tmin, tmax) = if increasing { (ta, tb) } else { (tb, ta) };
        if !(theta >= tmin) {
            let gamma = if increasing { a } else { b };
            return Inversion { gamma, clamped: true };
        }
        if theta > tmax {
            let gamma = if increasing { b } else { a };
            return Inversion { gamma, clamped: true };
        }
        let (mut lo, mut hi) = (a, b);
        while hi - lo > INVERSION_TOL * 0.1 {
            let mid = 0.5 * (lo + hi);
            let above = self.theta_of(mid) > theta;
            if above == increasing {
                hi = mid;
            } else {
                lo = mid;
            }
            if mid == lo && mid == hi {
                break;
            }
        }
        Inversion {
            gamma: 0.5 * (lo + hi),
            clamped: false,
        }
    }
}

/// `ϑ̇(γ)` by the covariance form, checked against a central difference of
/// `ϑ` with step `1e-4`.
pub fn theta_dot(ctx: &ParamContext, gamma: f64) -> Result<f64> {
    let family = &ctx.family;
    let f = &ctx.f;
    let law = law_at(family, gamma, &[f])?;
    let cov = theta_dot_covariance(family, f, &law, gamma)?;
    let (lo, hi) = family.gamma_range;
    let h = FD_STEP.min(0.5 * (gamma - lo)).min(0.5 * (hi - gamma));
    let plus = law_at(family, gamma + h, &[f])?.expect(f)?;
    let minus = law_at(family, gamma - h, &[f])?.expect(f)?;
    let fd = (plus - minus) / (2.0 * h);
    if (cov - fd).abs() > FD_REL_TOL * fd.abs() + FD_ABS_TOL {
        return Err(Error::DerivativeMismatch {
            gamma,
            covariance: cov,
            finite_difference: fd,
        });
    }
    Ok(cov)
}

pub fn fisher_info(family: &ParametricFamily, gamma: f64) -> Result<f64> {
    let law = law_at(family, gamma, &[])?;
    Ok(fisher_info_at(family, &law, gamma))
}

/// Path quantities reused across likelihood evaluations.
#[derive(Debug, Clone)]
pub struct LikelihoodPath<'a> {
    family: &'a ParametricFamily,
    x: &'a [f64],
    inv_var: Vec<f64>,
    dx: Vec<f64>,
    dt: f64,
}

impl<'a> LikelihoodPath<'a> {
    pub fn new(path: &'a Path, family: &'a ParametricFamily) -> Self {
        let x = path.values();
        let inv_var = x
            .iter()
            .map(|v| {
                let s = family.sigma(*v);
                1.0 / (s * s)
            })
            .collect();
        let dx = x.windows(2).map(|w| w[1] - w[0]).collect();
        LikelihoodPath {
            family,
            x,
            inv_var,
            dx,
            dt: path.dt(),
        }
    }

    fn drifts(&self, gamma: f64) -> Vec<f64> {
        self.x.iter().map(|v| self.family.drift(gamma, *v)).collect()
    }

    /// `ln L(γ, γ₁)` given the drift values at both parameters.
    fn llr_from(&self, s: &[f64], s1: &[f64]) -> f64 {
        let n = self.x.len();
        let mut ito = 0.0;
        for i in 0..n - 1 {
            ito += (s[i] - s1[i]) * self.inv_var[i] * self.dx[i];
        }
        let q = |i: usize| (s[i] * s[i] - s1[i] * s1[i]) * self.inv_var[i];
        let mut lebesgue = 0.0;
        if n > 1 {
            for i in 1..n - 1 {
                lebesgue += q(i);
            }
            lebesgue += 0.5 * (q(0) + q(n - 1));
        }
        ito - 0.5 * self.dt * lebesgue
    }

    pub fn llr(&self, gamma: f64, gamma1: f64) -> f64 {
        self.llr_from(&self.drifts(gamma), &self.drifts(gamma1))
    }
}

/// Log-likelihood ratio `ln L(γ, γ₁; Xᵀ)` with the stochastic integral as a
/// left-point sum over the raw increments.
pub fn log_likelihood_ratio(path: &Path, family: &ParametricFamily, gamma: f64, gamma1: f64) -> f64 {
    LikelihoodPath::new(path, family).llr(gamma, gamma1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MleResult {
    pub gamma: f64,
    pub boundary: bool,
}

/// Maximizer of `γ ↦ ln L(γ, γ₁)` over Γ, `γ₁` the midpoint of Γ: a
/// 64-point scan followed by golden-section refinement.
pub fn mle(path: &Path, family: &ParametricFamily) -> MleResult {
    let lp = LikelihoodPath::new(path, family);
    let (lo, hi) = family.gamma_range;
    let margin = CLAMP_MARGIN * (hi - lo);
    let (a, b) = (lo + margin, hi - margin);
    let s1 = lp.drifts(0.5 * (lo + hi));
    let objective = |g: f64| lp.llr_from(&lp.drifts(g), &s1);
    let grid: Vec<f64> = (0..COARSE_POINTS)
        .map(|i| a + (b - a) * i as f64 / (COARSE_POINTS - 1) as f64)
        .collect();
    let values: Vec<f64> = grid.iter().map(|g| objective(*g)).collect();
    let best = (0..COARSE_POINTS)
        .max_by(|&i, &j| values[i].total_cmp(&values[j]))
        .expect("nonempty grid");
    let mut lo_b = grid[best.saturating_sub(1)];
    let mut hi_b = grid[(best + 1).min(COARSE_POINTS - 1)];
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = hi_b - ratio * (hi_b - lo_b);
    let mut d = lo_b + ratio * (hi_b - lo_b);
    let mut fc = objective(c);
    let mut fd = objective(d);
    while hi_b - lo_b > GOLDEN_TOL {
        if fc >= fd {
            hi_b = d;
            d = c;
            fd = fc;
            c = hi_b - ratio * (hi_b - lo_b);
            fc = objective(c);
        } else {
            lo_b = c;
            c = d;
            fc = fd;
            d = lo_b + ratio * (hi_b - lo_b);
            fd = objective(d);
        }
    }
    let mut gamma = 0.5 * (lo_b + hi_b);
    // keep a coarse node that beats the refined point
    if values[best] > objective(gamma) {
        gamma = grid[best];
    }
    let boundary = gamma - lo < BOUNDARY_TOL || hi - gamma < BOUNDARY_TOL;
    MleResult { gamma, boundary }
}

/// Integrand of the smooth score, `(Ṡσ′σ − ṠS − ½Ṡ′σ²)/σ²`.
pub fn score_integrand(family: &ParametricFamily, gamma: f64, x: f64) -> f64 {
    let sd = family.drift_dot(gamma, x);
    let s = family.sigma(x);
    (sd * family.sigma_prime(x) * s - sd * family.drift(gamma, x) - 0.5 * family.drift_dot_prime(gamma, x) * s * s)
        / (s * s)
}

/// Smooth score `Δ_T(γ)`: the trapezoid integral of [`score_integrand`]
/// along the path, divided by `√T`.
pub fn delta_t(path: &Path, family: &ParametricFamily, gamma: f64) -> f64 {
    time_integral_fn(path, |x| score_integrand(family, gamma, x)) / path.horizon().sqrt()
}

/// Score written with the stochastic integral,
/// `Δ̄_T = (1/√T) Σ Ṡ(γ,X_i)/σ²(X_i)·(ΔX_i − S(γ,X_i)Δ)`.
pub fn score_ito(path: &Path, family: &ParametricFamily, gamma: f64) -> f64 {
    let dt = path.dt();
    let total: f64 = path
        .values()
        .windows(2)
        .map(|w| {
            let s = family.sigma(w[0]);
            family.drift_dot(gamma, w[0]) / (s * s) * (w[1] - w[0] - family.drift(gamma, w[0]) * dt)
        })
        .sum();
    total / path.horizon().sqrt()
}

/// `p(x, γ) = ∫₀ˣ Ṡ(γ,v)/σ(v)² dv`.
pub fn score_potential(family: &ParametricFamily, gamma: f64, x: f64) -> Result<f64> {
    quadrature::integrate(
        |v| {
            let s = family.sigma(v);
            family.drift_dot(gamma, v) / (s * s)
        },
        0.0,
        x,
        1e-13,
        1e-12,
    )
}

/// `|Δ̄_T − Δ_T − (p(X_T) − p(X_0))/√T|`.
pub fn score_identity_residual(path: &Path, family: &ParametricFamily, gamma: f64) -> Result<f64> {
    let boundary = (score_potential(family, gamma, path.last())? - score_potential(family, gamma, path.first())?)
        / path.horizon().sqrt();
    Ok((score_ito(path, family, gamma) - delta_t(path, family, gamma) - boundary).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OneStep {
    pub theta_star: f64,
    pub gamma_star: f64,
    pub gamma_tilde: f64,
    pub theta_tilde: f64,
    pub flags: Vec<Flag>,
}

/// One-step estimators started from the empirical moment:
/// `γ̃ = γ* + Δ_T(γ*)/(I(γ*)√T)`, `ϑ̃ = ϑ* + ϑ̇(γ*)Δ_T(γ*)/(I(γ*)√T)`.
pub fn one_step(path: &Path, ctx: &ParamContext) -> OneStep {
    let theta_star = empirical_moment(path, &ctx.f);
    one_step_from(path, ctx, theta_star)
}

fn one_step_from(path: &Path, ctx: &ParamContext, theta_star: f64) -> OneStep {
    if !ctx.diagnostics.identifiable {
        return OneStep {
            theta_star,
            gamma_star: f64::NAN,
            gamma_tilde: f64::NAN,
            theta_tilde: theta_star,
            flags: vec![Flag::NonIdentifiable],
        };
    }
    let inv = ctx.gamma_of_theta(theta_star);
    let g = inv.gamma;
    let step = delta_t(path, &ctx.family, g) / (ctx.info_of(g) * path.horizon().sqrt());
    OneStep {
        theta_star,
        gamma_star: g,
        gamma_tilde: g + step,
        theta_tilde: theta_star + ctx.theta_dot_of(g) * step,
        flags: if inv.clamped { vec![Flag::Clamped] } else { Vec::new() },
    }
}

/// One-step estimate of the invariant distribution function at `x`. The
/// context must be built for `F = χ{· < x}`; `theta_star` is then `D̂_T(x)`
/// and `theta_tilde` is `D̃_T(x)`.
pub fn one_step_distribution_function(path: &Path, ctx: &ParamContext, x: f64) -> Result<OneStep> {
    let expected = ScalarField::indicator_below(x);
    if ctx.f.label() != expected.label() {
        return Err(Error::InvalidConfig(format!(
            "context built for `{}`, not `{}`",
            ctx.f.label(),
            expected.label()
        )));
    }
    Ok(one_step(path, ctx))
}

/// Shared, immutable handle to a context.
pub type SharedContext = Arc<ParamContext>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_nonlinear_family, make_ou_family};
    use crate::simulate::{simulate_path, stream_rng, SimConfig};
    use std::sync::OnceLock;

    fn ou_x2() -> &'static ParamContext {
        static CTX: OnceLock<ParamContext> = OnceLock::new();
        CTX.get_or_init(|| ParamContext::build(&make_ou_family(), &ScalarField::power(2)).unwrap())
    }

    fn ou_path(seed: u32, t: f64, dt: f64) -> Path {
        let m = make_ou_family().model_at(1.0);
        let law = InvariantLaw::build(&m).unwrap();
        simulate_path(&m, &SimConfig::new(t).with_dt(dt), Some(&law), &mut stream_rng(31, 0, seed)).unwrap()
    }

    #[test]
    fn ou_moment_curve() {
        let ctx = ou_x2();
        for g in [0.2, 1.0, 2.5, 7.0] {
            assert!((ctx.theta_of(g) - 0.5 / g).abs() < 1e-7 * (0.5 / g));
            let rel = (ctx.theta_dot_of(g) + 0.5 / (g * g)).abs() / (0.5 / (g * g));
            assert!(rel < 1e-5, "{g} {rel:e}");
            assert!((ctx.info_of(g) - 0.5 / g).abs() < 1e-6 * (0.5 / g));
        }
        let d = ctx.diagnostics();
        assert!(d.identifiable && d.eps_dot > 0.0 && d.eps_info > 0.0);
    }

    #[test]
    fn inversion_round_trip_and_clamping() {
        let ctx = ou_x2();
        let inv = ctx.gamma_of_theta(0.5);
        assert!((inv.gamma - 1.0).abs() < 1e-7 && !inv.clamped);
        for (g, _, _, _) in ctx.table().step_by(17) {
            let back = ctx.gamma_of_theta(ctx.theta_of(g)).gamma;
            assert!((back - g).abs() < 1e-8 * (1.0 + g), "{g} {back}");
        }
        let g = ctx.gamma_of_theta(ctx.theta_of(2.5)).gamma;
        assert!((g - 2.5).abs() < 1e-8);
        let high = ctx.gamma_of_theta(100.0);
        assert!(high.clamped);
        assert!((high.gamma - (0.1 + 1e-6 * 9.9)).abs() < 1e-12);
        let low = ctx.gamma_of_theta(1e-6);
        assert!(low.clamped && (low.gamma - (10.0 - 1e-6 * 9.9)).abs() < 1e-12);
    }

    #[test]
    fn theta_dot_closed_forms() {
        let ctx = ou_x2();
        assert!((theta_dot(ctx, 1.0).unwrap() + 0.5).abs() < 1e-9);
        let x4 = ParamContext::build(&make_ou_family(), &ScalarField::power(4)).unwrap();
        assert!((theta_dot(&x4, 1.0).unwrap() + 1.5).abs() < 1e-8);
        // param bound for x⁴: (3/2)² / (1/2) = 4.5
        assert!((x4.param_avar(1.0) - 4.5).abs() < 1e-5);
        let family = make_ou_family();
        let law = law_at(&family, 1.0, &[]).unwrap();
        let c = theta_dot_covariance(&family, &ScalarField::constant(3.0), &law, 1.0).unwrap();
        assert!(c.abs() < 1e-12);
    }

    #[test]
    fn theta_dot_on_nonlinear_family() {
        let ctx = ParamContext::build(&make_nonlinear_family(), &ScalarField::power(2)).unwrap();
        for g in [0.3, 1.0, 4.0] {
            let v = theta_dot(&ctx, g).unwrap();
            assert!(v < 0.0);
            assert!((ctx.theta_dot_of(g) - v).abs() < 1e-5 * v.abs());
        }
    }

    #[test]
    fn wrong_derivative_is_caught() {
        let ou = make_ou_family();
        let bad = crate::model::FamilyBuilder {
            name: "bad".into(),
            gamma_range: ou.gamma_range,
            drift_growth: crate::field::GrowthBound::new(10.0, 1.0),
            sigma: ScalarField::constant(1.0),
            sigma_prime: ScalarField::constant(0.0),
        }
        .build(|g, x| -g * x, |_, x| -2.0 * x, |_, _| 0.0, |_, _| -2.0);
        let law = law_at(&bad, 1.0, &[]).unwrap();
        let cov = theta_dot_covariance(&bad, &ScalarField::power(2), &law, 1.0).unwrap();
        assert!((cov + 1.0).abs() < 1e-9);
        let ctx = ParamContext::build(&bad, &ScalarField::power(2)).unwrap();
        assert!(matches!(theta_dot(&ctx, 1.0), Err(Error::DerivativeMismatch { .. })));
    }

    #[test]
    fn fisher_information_closed_form() {
        let f = make_ou_family();
        assert!((fisher_info(&f, 1.0).unwrap() - 0.5).abs() < 1e-9);
        assert!((fisher_info(&f, 2.0).unwrap() - 0.25).abs() < 1e-9);
        assert!(ou_x2().table().all(|(_, _, _, i)| i > 0.0));
    }

    #[test]
    fn llr_identities() {
        let p = ou_path(0, 20.0, 0.01);
        let fam = make_ou_family();
        assert_eq!(log_likelihood_ratio(&p, &fam, 1.3, 1.3), 0.0);
        let a = log_likelihood_ratio(&p, &fam, 1.2, 0.7);
        let b = log_likelihood_ratio(&p, &fam, 0.7, 1.2);
        assert_eq!(a, -b);
    }

    #[test]
    fn ou_mle_matches_closed_form() {
        let p = ou_path(1, 100.0, 0.01);
        let fam = make_ou_family();
        let m = mle(&p, &fam);
        let x = p.values();
        let num: f64 = x.windows(2).map(|w| w[0] * (w[1] - w[0])).sum();
        let den = time_integral_fn(&p, |v| v * v);
        let closed = -num / den;
        assert!((m.gamma - closed).abs() < 1e-6, "{} {closed}", m.gamma);
        assert!((m.gamma - 1.0).abs() < 0.42);
        assert!(!m.boundary);
    }

    #[test]
    fn score_identity_and_degenerate_terms() {
        let fam = make_ou_family();
        let p = ou_path(2, 50.0, 0.01);
        let r = score_identity_residual(&p, &fam, 1.0).unwrap();
        assert!(r < 0.1, "{r}");
        // OU has σ′ ≡ 0: the integrand reduces to −γx² + ½ exactly
        for x in [-2.0, 0.0, 0.7] {
            assert_eq!(score_integrand(&fam, 1.5, x), -1.5 * x * x + 0.5);
        }
    }

    #[test]
    fn one_step_fixed_point_and_flags() {
        let ctx = ou_x2();
        let p = ou_path(3, 100.0, 0.01);
        let est = one_step(&p, ctx);
        // For OU with F = x² the score vanishes at γ* = 1/(2ϑ*).
        assert!((est.gamma_star - 0.5 / est.theta_star).abs() < 1e-7);
        assert!((est.gamma_tilde - est.gamma_star).abs() < 1e-6);
        assert!(est.flags.is_empty());
        let constant = Path::new(0.01, vec![0.0; 1001]).unwrap();
        let clamped = one_step(&constant, ctx);
        assert_eq!(clamped.flags, vec![Flag::Clamped]);
    }

    #[test]
    fn distribution_function_at_symmetry_point_is_not_identifiable() {
        let ctx = ParamContext::build(&make_ou_family(), &ScalarField::indicator_below(0.0)).unwrap();
        assert!(!ctx.diagnostics().identifiable);
        let p = ou_path(4, 20.0, 0.01);
        let est = one_step_distribution_function(&p, &ctx, 0.0).unwrap();
        assert_eq!(est.flags, vec![Flag::NonIdentifiable]);
        assert_eq!(est.theta_tilde, est.theta_star);
        assert!(one_step_distribution_function(&p, &ctx, 0.5).is_err());
    }

    #[test]
    fn distribution_function_round_trip() {
        let ctx = ParamContext::build(&make_ou_family(), &ScalarField::indicator_below(0.5)).unwrap();
        assert!(ctx.diagnostics().identifiable);
        let p = ou_path(5, 100.0, 0.01);
        let est = one_step_distribution_function(&p, &ctx, 0.5).unwrap();
        assert!((ctx.theta_of(est.gamma_star) - est.theta_star).abs() < 1e-9);
        // Ḋ(γ, x) for OU: ∂γ Φ(x√(2γ)) = φ(x√(2γ))·x/√(2γ)
        let g: f64 = 1.0;
        let exact = (-(0.25 * g)).exp() / (2.0 * std::f64::consts::PI).sqrt() * 0.5 / (2.0 * g).sqrt();
        assert!((theta_dot(&ctx, g).unwrap() - exact).abs() < 1e-8);
    }
}
