//! The empirical moment estimator and its efficiency bound.
//!
//! With `q = F − ϑ`, the bound is built from
//! `M(y) = ∫_{−∞}^y q f`, `Q = 2M/(σf)` and `H(y) = ∫₀^y Q/σ`;
//! the asymptotic variance of `√T(ϑ*_T − ϑ)` is `E[Q(ξ)²]`.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::invariant::{self, InvariantLaw, Primitive, RunningMass};
use crate::model::{DiffusionModel, Path};
use crate::quadrature::NPTS;
use crate::simulate::{brownian_increments, time_integral};

/// Power `p*` of the standing moment check on `H` and `Q`.
pub const MOMENT_POWER: i32 = 4;
const MOMENT_TAIL_SHARE: f64 = 1e-6;
const DEGENERATE_VARIANCE: f64 = 1e-24;

/// `ϑ*_T = (1/T)∫₀ᵀ F(X_t) dt`.
pub fn empirical_moment(path: &Path, f: &ScalarField) -> f64 {
    time_integral(path, f) / path.horizon()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentCheck {
    pub e_h: f64,
    pub e_q: f64,
}

#[derive(Debug, Clone)]
pub struct NonparamBound {
    law: Arc<InvariantLaw>,
    f: ScalarField,
    theta: f64,
    mass: Option<RunningMass>,
    q_pts: Vec<[f64; NPTS]>,
    h: Primitive,
    avar: f64,
    moments: MomentCheck,
}

impl NonparamBound {
    pub fn law(&self) -> &Arc<InvariantLaw> {
        &self.law
    }

    pub fn moment_function(&self) -> &ScalarField {
        &self.f
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// `I(S)`; infinite for a degenerate `F`.
    pub fn info(&self) -> f64 {
        1.0 / self.avar
    }

    /// `I(S)⁻¹ = E[Q²]`.
    pub fn avar(&self) -> f64 {
        self.avar
    }

    /// `F` is constant under the invariant law, so `q ≡ 0`.
    pub fn is_degenerate(&self) -> bool {
        self.mass.is_none()
    }

    pub fn moment_check(&self) -> MomentCheck {
        self.moments
    }

    pub fn m(&self, x: f64) -> Result<f64> {
        match &self.mass {
            Some(m) => m.at(x),
            None => Ok(0.0),
        }
    }

    pub fn q(&self, x: f64) -> Result<f64> {
        let m = self.m(x)?;
        let law = &self.law;
        let x = x.clamp(law.grid().lo(), law.grid().hi());
        Ok(invariant::mass_ratio(m, law.model().sigma(x), law.ln_density(x)))
    }

    pub fn h(&self, x: f64) -> f64 {
        self.h.at(x)
    }

    /// `Q` at the cell points of the law's grid.
    pub fn q_at_points(&self) -> &[[f64; NPTS]] {
        &self.q_pts
    }

    pub fn m_at_node(&self, j: usize) -> f64 {
        self.mass.as_ref().map_or(0.0, |m| m.at_node(j))
    }

    /// Rows `(x, M, Q, H)` on the nodes of the certified domain.
    pub fn table(&self) -> Vec<[f64; 4]> {
        let law = &self.law;
        let (a, b) = law.domain_nodes();
        (a..=b)
            .map(|j| {
                let x = law.grid().node(j);
                let m = self.m_at_node(j);
                let q = invariant::mass_ratio(m, law.model().sigma(x), law.ln_density(x));
                [x, m, q, self.h.at_nodes()[j]]
            })
            .collect()
    }
}

/// Builds `ϑ`, `M`, `Q`, `H` and `I(S)` for `F` under `law`.
pub fn build_bound(law: &Arc<InvariantLaw>, f: &ScalarField) -> Result<NonparamBound> {
    let theta = invariant::stationary_moment(law, f)?;
    let grid = law.grid();
    let q_field = f.shifted(-theta);
    let q_vals = grid.sample(|x| q_field.eval(x));
    let var_f = law.expect_tabulated(&q_vals.iter().map(|c| c.map(|v| v * v)).collect::<Vec<_>>());
    let zero_cells = vec![[0.0; NPTS]; grid.cells()];
    if var_f <= DEGENERATE_VARIANCE * (1.0 + theta * theta) {
        return Ok(NonparamBound {
            law: law.clone(),
            f: f.clone(),
            theta,
            mass: None,
            q_pts: zero_cells.clone(),
            h: Primitive::new(grid.clone(), law.zero_node(), zero_cells),
            avar: 0.0,
            moments: MomentCheck { e_h: 0.0, e_q: 0.0 },
        });
    }

    let mass = RunningMass::new(law.clone(), &q_vals, Some(q_field))?;
    let ln_f = invariant::ln_density_at_points(law);
    let sigma = law.sigma_at_points();
    let q_pts: Vec<[f64; NPTS]> = (0..grid.cells())
        .map(|j| {
            let mut out = [0.0; NPTS];
            for k in 0..NPTS {
                out[k] = invariant::mass_ratio(mass.at_points()[j][k], sigma[j][k], ln_f[j][k]);
            }
            out
        })
        .collect();
    let h_integrand: Vec<[f64; NPTS]> = q_pts
        .iter()
        .zip(sigma)
        .map(|(q, s)| {
            let mut out = [0.0; NPTS];
            for k in 0..NPTS {
                out[k] = q[k] / s[k];
            }
            out
        })
        .collect();
    let h = Primitive::new(grid.clone(), law.zero_node(), h_integrand);
    let avar = law.expect_tabulated(&q_pts.iter().map(|c| c.map(|v| v * v)).collect::<Vec<_>>());
    if !(avar.is_finite() && avar > 0.0) {
        return Err(Error::QuadratureFailure {
            a: grid.lo(),
            b: grid.hi(),
            tol: 1e-9,
            err: avar,
        });
    }

    let moments = MomentCheck {
        e_h: moment_with_tail_check(law, h.at_points(), "E|H|^4")?,
        e_q: moment_with_tail_check(law, &q_pts, "E|M/(σf)|^4")?,
    };
    Ok(NonparamBound {
        law: law.clone(),
        f: f.clone(),
        theta,
        mass: Some(mass),
        q_pts,
        h,
        avar,
        moments,
    })
}

/// `E|g|^p*`, rejected when it is not finite or when a non-negligible share
/// of it sits outside the certified domain.
fn moment_with_tail_check(law: &InvariantLaw, g: &[[f64; NPTS]], which: &str) -> Result<f64> {
    let pow: Vec<[f64; NPTS]> = g.iter().map(|c| c.map(|v| v.abs().powi(MOMENT_POWER))).collect();
    let total = law.expect_tabulated(&pow);
    let (a, b) = law.domain_nodes();
    let mut outside = pow.clone();
    for cell in outside.iter_mut().take(b).skip(a) {
        *cell = [0.0; NPTS];
    }
    let tail = law.expect_tabulated(&outside);
    if !total.is_finite() || tail > MOMENT_TAIL_SHARE * total.max(f64::MIN_POSITIVE) {
        return Err(Error::MomentConditionViolated {
            which: format!("{which}: total {total:e}, outside the domain {tail:e}"),
        });
    }
    Ok(total)
}

/// Terms of the martingale decomposition
/// `√T(ϑ*_T − ϑ) = (H(X_T) − H(X_0))/√T − (1/√T)∫Q dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ItoDecomposition {
    pub scaled_error: f64,
    pub boundary_term: f64,
    pub martingale_term: f64,
    pub residual: f64,
}

pub fn ito_decomposition(path: &Path, model: &DiffusionModel, bound: &NonparamBound) -> Result<ItoDecomposition> {
    let t = path.horizon();
    let rt = t.sqrt();
    let scaled_error = rt * (empirical_moment(path, &bound.f) - bound.theta);
    let boundary_term = (bound.h(path.last()) - bound.h(path.first())) / rt;
    let martingale_term = if bound.is_degenerate() {
        0.0
    } else {
        let values = path.values();
        let qs = values[..values.len() - 1]
            .iter()
            .map(|x| bound.q(*x))
            .collect::<Result<Vec<f64>>>()?;
        let v = brownian_increments(path, model)?
            .iter()
            .zip(&qs)
            .map(|(dw, q)| q * dw)
            .sum::<f64>();
        v / rt
    };
    let residual = (scaled_error - (boundary_term - martingale_term)).abs();
    Ok(ItoDecomposition {
        scaled_error,
        boundary_term,
        martingale_term,
        residual,
    })
}

/// Absolute residual of the martingale decomposition along `path`.
pub fn ito_decomposition_check(path: &Path, model: &DiffusionModel, bound: &NonparamBound) -> Result<f64> {
    Ok(ito_decomposition(path, model, bound)?.residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_nonlinear_family, make_ou_family};
    use crate::simulate::{simulate_path, stream_rng, SimConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ou_law(g: f64) -> Arc<InvariantLaw> {
        Arc::new(InvariantLaw::build(&make_ou_family().model_at(g)).unwrap())
    }

    /// Long-run variance `2∫₀^∞ Cov(F(X_0), F(X_t)) dt` for OU with unit
    /// noise: for `x` the autocovariance is `v e^{−γt}`, for `x²` it is
    /// `2v² e^{−2γt}`, with `v = 1/(2γ)`.
    fn ou_long_run_variance(power: i32, g: f64) -> f64 {
        let v = 0.5 / g;
        let acov = |t: f64| match power {
            1 => v * (-g * t).exp(),
            2 => 2.0 * v * v * (-2.0 * g * t).exp(),
            _ => unreachable!(),
        };
        2.0 * crate::quadrature::integrate(acov, 0.0, 60.0 / g, 1e-14, 1e-13).unwrap()
    }

    #[test]
    fn ou_bounds_match_long_run_variance() {
        for g in [0.5, 1.0, 2.0] {
            let law = ou_law(g);
            for power in [1, 2] {
                let b = build_bound(&law, &ScalarField::power(power)).unwrap();
                let oracle = ou_long_run_variance(power, g);
                assert!((b.avar() / oracle - 1.0).abs() < 1e-7, "g={g} p={power}");
                assert!((b.info() * b.avar() - 1.0).abs() < 1e-15);
            }
        }
        let law = ou_law(1.0);
        assert!((build_bound(&law, &ScalarField::power(2)).unwrap().avar() - 0.5).abs() < 1e-8);
        assert!((build_bound(&law, &ScalarField::power(1)).unwrap().avar() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn x4_bound_matches_hermite_oracle() {
        // For OU γ = 1, H = −x⁴/4 − 3x²/4 solves LH = x⁴ − 3/4 with
        // L = −x∂ + ½∂², so Q = H′ = −x³ − 3x/2 and E[Q²] = 15/8 + 3·3/4 + 9/4·1/2.
        let b = build_bound(&ou_law(1.0), &ScalarField::power(4)).unwrap();
        assert!((b.avar() - 5.25).abs() < 1e-8, "{}", b.avar());
        for x in [-2.0, -0.3, 0.0, 1.1, 3.0] {
            assert!((b.q(x).unwrap() + (x * x * x + 1.5 * x)).abs() < 1e-8);
            assert!((b.h(x) + (x.powi(4) / 4.0 + 0.75 * x * x)).abs() < 1e-8);
        }
    }

    #[test]
    fn centering_and_ratio_identity() {
        let law = Arc::new(InvariantLaw::build(&make_nonlinear_family().model_at(0.8)).unwrap());
        let b = build_bound(&law, &ScalarField::power(2)).unwrap();
        let (lo, hi) = (law.domain().lo, law.domain().hi);
        assert!(b.m(lo).unwrap().abs() < 1e-8 && b.m(hi).unwrap().abs() < 1e-8);
        let model = law.model();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let x: f64 = rng.random_range(-3.0..3.0);
            let direct = 2.0 * b.m(x).unwrap() / (model.sigma(x) * law.density(x));
            assert!((b.q(x).unwrap() - direct).abs() < 1e-10 * (1.0 + direct.abs()));
            // M against an independent adaptive quadrature of q·f from the left edge
            let oracle = crate::quadrature::integrate(
                |v| (v * v - b.theta()) * law.density(v),
                law.grid().lo(),
                x,
                1e-16,
                1e-12,
            )
            .unwrap();
            assert!((b.m(x).unwrap() - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn additive_constant_leaves_bound_unchanged() {
        let law = ou_law(1.0);
        let a = build_bound(&law, &ScalarField::power(2)).unwrap();
        let b = build_bound(&law, &ScalarField::power(2).shifted(3.0)).unwrap();
        assert!((b.theta() - a.theta() - 3.0).abs() < 1e-12);
        assert!((a.avar() - b.avar()).abs() < 1e-12);
        for x in [-1.5, 0.2, 2.0] {
            assert!((a.m(x).unwrap() - b.m(x).unwrap()).abs() < 1e-12);
            assert!((a.q(x).unwrap() - b.q(x).unwrap()).abs() < 1e-10);
            assert!((a.h(x) - b.h(x)).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_moment_function_is_degenerate() {
        let law = ou_law(1.0);
        let b = build_bound(&law, &ScalarField::constant(2.0)).unwrap();
        assert!(b.is_degenerate());
        assert_eq!(b.info(), f64::INFINITY);
        assert_eq!(b.m(0.3).unwrap(), 0.0);
        let model = law.model().clone();
        let p = simulate_path(&model, &SimConfig::new(10.0), Some(&law), &mut stream_rng(1, 0, 0)).unwrap();
        assert!(ito_decomposition_check(&p, &model, &b).unwrap() < 1e-12);
    }

    #[test]
    fn indicator_bound() {
        let law = ou_law(1.0);
        let b = build_bound(&law, &ScalarField::indicator_below(0.0)).unwrap();
        assert!((b.theta() - 0.5).abs() < 1e-12);
        // M(y) = F(min(y,0)) − ϑF(y): at y = 0 it is 0.5 − 0.25
        assert!((b.m(0.0).unwrap() - 0.25).abs() < 1e-10);
        assert!(b.avar() > 0.0 && b.avar().is_finite());
    }

    #[test]
    fn decomposition_residual_is_small_and_shift_invariant() {
        let law = ou_law(1.0);
        let model = law.model().clone();
        let f = ScalarField::power(2);
        let b = build_bound(&law, &f).unwrap();
        let b2 = build_bound(&law, &f.shifted(1.0)).unwrap();
        let cfg = SimConfig::new(50.0).with_dt(0.005);
        let p = simulate_path(&model, &cfg, Some(&law), &mut stream_rng(7, 0, 0)).unwrap();
        let r = ito_decomposition_check(&p, &model, &b).unwrap();
        let r2 = ito_decomposition_check(&p, &model, &b2).unwrap();
        assert!(r < 0.2, "{r}");
        assert!((r - r2).abs() < 1e-9);
    }

    #[test]
    fn empirical_moment_on_constant_path() {
        let p = Path::new(0.01, vec![1.5; 101]).unwrap();
        assert!((empirical_moment(&p, &ScalarField::power(2)) - 2.25).abs() < 1e-14);
    }

    #[test]
    fn empirical_indicator_estimate() {
        let law = ou_law(1.0);
        let model = law.model().clone();
        let f = ScalarField::indicator_below(0.0);
        let b = build_bound(&law, &f).unwrap();
        let est = (0..20)
            .map(|r| {
                let p = simulate_path(&model, &SimConfig::new(100.0), Some(&law), &mut stream_rng(2, 0, r)).unwrap();
                empirical_moment(&p, &f)
            })
            .sum::<f64>()
            / 20.0;
        assert!((est - 0.5).abs() < 3.0 * (b.avar() / 2000.0).sqrt(), "{est}");
    }
}
