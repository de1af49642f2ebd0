//! Brackets and Green functions of the generator, the cumulant coefficients
//! of `√T(ϑ*_T − ϑ)`, Hermite polynomials and the first-order Edgeworth
//! densities.
//!
//! For centered `a` with running mass `m_a(x) = ∫_{−∞}^x a f`,
//! `∇G_a = G·p·2m_a` and `[a] = −σ∇G_a = −2m_a/(σf)`; the second form
//! follows from `G·σ²·p·f = 1` and is the one tabulated. `G_a` is anchored at
//! `G_a(0) = 0`.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::invariant::{self, InvariantLaw, Primitive, RunningMass};
use crate::quadrature::NPTS;
use crate::stats::{self, normal_cdf, normal_pdf};

/// Headroom over the declared growth exponent of `a` allowed for `[a]` and `G_a`.
const GROWTH_SLACK: f64 = 2.0;
const CENTERING_TOL: f64 = 1e-9;

/// Numeric evidence for membership in the class 𝒞.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassCReport {
    /// `⟨a, f⟩` before centering.
    pub mean: f64,
    /// `⟨a − ⟨a,f⟩, f⟩`, zero up to quadrature error.
    pub centered_mean: f64,
    /// Log-log growth exponents of `|[a]|` and `|G_a|` near the domain edges.
    pub bracket_growth: f64,
    pub green_growth: f64,
    pub growth_limit: f64,
    /// `∫_{lo}^0 |p(y)·m_a(y)| dy` over the certified domain, which stays
    /// bounded as the domain grows only when the left-tail L¹ condition holds.
    pub left_l1: f64,
}

#[derive(Debug, Clone)]
pub struct BracketedFunction {
    law: Arc<InvariantLaw>,
    mass: Option<RunningMass>,
    bracket_pts: Vec<[f64; NPTS]>,
    green: Primitive,
    report: ClassCReport,
}

impl BracketedFunction {
    pub fn report(&self) -> ClassCReport {
        self.report
    }

    pub fn bracket_at_points(&self) -> &[[f64; NPTS]] {
        &self.bracket_pts
    }

    /// `m_a(x) = ∫_{−∞}^x (a − ⟨a,f⟩) f`.
    pub fn mass(&self, x: f64) -> Result<f64> {
        match &self.mass {
            Some(m) => m.at(x),
            None => Ok(0.0),
        }
    }

    /// `[a](x)`.
    pub fn bracket(&self, x: f64) -> Result<f64> {
        let m = self.mass(x)?;
        let law = &self.law;
        let x = x.clamp(law.grid().lo(), law.grid().hi());
        Ok(-invariant::mass_ratio(m, law.model().sigma(x), law.ln_density(x)))
    }

    /// `∇G_a(x) = G·p(x)·2m_a(x)`, formed without the density identity.
    pub fn green_gradient(&self, x: f64) -> Result<f64> {
        Ok(self.law.normalizer() * self.law.scale_density(x) * 2.0 * self.mass(x)?)
    }

    /// `G_a(x)`, anchored at 0.
    pub fn green(&self, x: f64) -> f64 {
        self.green.at(x)
    }

    pub fn green_at_points(&self) -> &[[f64; NPTS]] {
        self.green.at_points()
    }
}

/// Brackets a moment function: centers it, forms `[a]` and `G_a`, and
/// checks the numeric class-𝒞 proxies.
pub fn bracket(law: &Arc<InvariantLaw>, a: &ScalarField) -> Result<BracketedFunction> {
    let (lo, hi) = (law.domain().lo, law.domain().hi);
    let nodes = (0..=64).map(|i| lo + (hi - lo) * i as f64 / 64.0);
    if let Some((x, v)) = a.growth_violation(nodes) {
        return Err(Error::NotInClassC(format!(
            "{} exceeds its declared growth bound at x = {x} (value {v})",
            a.label()
        )));
    }
    let abs_a = ScalarField::new("|a|", a.growth(), {
        let a = a.clone();
        move |x| a.eval(x).abs()
    });
    let e_abs = law.expect(&abs_a)?;
    let tail = law.tail_mass(a);
    if !(e_abs.is_finite() && tail <= law.domain().tail_tol * e_abs.max(1.0)) {
        return Err(Error::NotInClassC(format!(
            "∫|{}|f is not finite on the domain (tail {tail:e})",
            a.label()
        )));
    }
    let mean = law.expect(a)?;
    let centered = a.shifted(-mean);
    let vals = law.grid().sample(|x| centered.eval(x));
    build(law, &vals, Some(centered), mean, a.growth().k)
}

/// Brackets a function known only at the cell points of the law's grid,
/// with declared polynomial growth exponent `growth_k`.
pub fn bracket_tabulated(law: &Arc<InvariantLaw>, a_pts: &[[f64; NPTS]], growth_k: f64) -> Result<BracketedFunction> {
    let mean = law.expect_tabulated(a_pts);
    let vals: Vec<[f64; NPTS]> = a_pts.iter().map(|c| c.map(|v| v - mean)).collect();
    build(law, &vals, None, mean, growth_k)
}

fn build(
    law: &Arc<InvariantLaw>,
    centered: &[[f64; NPTS]],
    field: Option<ScalarField>,
    mean: f64,
    growth_k: f64,
) -> Result<BracketedFunction> {
    let grid = law.grid();
    let scale = law.expect_tabulated(&centered.iter().map(|c| c.map(|v| v * v)).collect::<Vec<_>>());
    let centered_mean = law.expect_tabulated(centered);
    let growth_limit = growth_k + GROWTH_SLACK;
    if scale <= 1e-24 * (1.0 + mean * mean) {
        let zero = vec![[0.0; NPTS]; grid.cells()];
        return Ok(BracketedFunction {
            law: law.clone(),
            mass: None,
            bracket_pts: zero.clone(),
            green: Primitive::new(grid.clone(), law.zero_node(), zero),
            report: ClassCReport {
                mean,
                centered_mean,
                bracket_growth: 0.0,
                green_growth: 0.0,
                growth_limit,
                left_l1: 0.0,
            },
        });
    }
    if centered_mean.abs() > CENTERING_TOL * (1.0 + scale.sqrt()) {
        return Err(Error::NotInClassC(format!(
            "centering failed: ⟨a, f⟩ = {centered_mean:e} after centering"
        )));
    }
    let mass = RunningMass::new(law.clone(), centered, field)?;
    let ln_f = invariant::ln_density_at_points(law);
    let sigma = law.sigma_at_points();
    let mut bracket_pts = vec![[0.0; NPTS]; grid.cells()];
    let mut grad = vec![[0.0; NPTS]; grid.cells()];
    for j in 0..grid.cells() {
        for k in 0..NPTS {
            let b = -invariant::mass_ratio(mass.at_points()[j][k], sigma[j][k], ln_f[j][k]);
            bracket_pts[j][k] = b;
            grad[j][k] = -b / sigma[j][k];
        }
    }
    let green = Primitive::new(grid.clone(), law.zero_node(), grad);

    let bracket_growth = edge_growth(law, |j| node_value(law, &bracket_pts, j));
    let green_growth = edge_growth(law, |j| green.at_nodes()[j]);
    let left_l1 = {
        let (a, _) = law.domain_nodes();
        let pm: Vec<[f64; NPTS]> = (a..law.zero_node())
            .map(|j| {
                let e = law.exponent_at_points()[j];
                let mut out = [0.0; NPTS];
                for k in 0..NPTS {
                    out[k] = ((-e[k]).exp() * mass.at_points()[j][k]).abs();
                }
                out
            })
            .collect();
        pm.iter().map(|c| grid.cell_integral(c).0).sum::<f64>()
    };
    let report = ClassCReport {
        mean,
        centered_mean,
        bracket_growth,
        green_growth,
        growth_limit,
        left_l1,
    };
    if !(bracket_growth <= growth_limit) {
        return Err(Error::NotInClassC(format!(
            "[a] grows like |x|^{bracket_growth:.2} near the domain edges (limit {growth_limit})"
        )));
    }
    if !(green_growth <= growth_limit) {
        return Err(Error::NotInClassC(format!(
            "G_a grows like |x|^{green_growth:.2} near the domain edges (limit {growth_limit})"
        )));
    }
    Ok(BracketedFunction {
        law: law.clone(),
        mass: Some(mass),
        bracket_pts,
        green,
        report,
    })
}

/// Value at node `j` from the adjacent cell's interpolant.
fn node_value(law: &InvariantLaw, pts: &[[f64; NPTS]], j: usize) -> f64 {
    let grid = law.grid();
    let c = j.min(grid.cells() - 1);
    grid.interpolate(c, &pts[c], grid.node(j))
}

/// Largest log-log slope of `|g|` between half the domain and its edge, over
/// both sides.
fn edge_growth<G: Fn(usize) -> f64>(law: &InvariantLaw, g: G) -> f64 {
    let (a, b) = law.domain_nodes();
    let z = law.zero_node();
    let mid_left = (a + z) / 2;
    let mid_right = (z + b) / 2;
    let grid = law.grid();
    let slope = |inner: usize, outer: usize| {
        let (xi, xo) = (grid.node(inner).abs(), grid.node(outer).abs());
        let (gi, go) = (g(inner).abs(), g(outer).abs());
        if !go.is_finite() || !gi.is_finite() {
            return f64::INFINITY;
        }
        ((1.0 + go).ln() - (1.0 + gi).ln()) / ((1.0 + xo).ln() - (1.0 + xi).ln())
    };
    slope(mid_left, a).max(slope(mid_right, b))
}

/// `E[[q]²(ξ)]`, the asymptotic variance of `√T(ϑ*_T − ϑ)`.
pub fn variance_coefficient(law: &Arc<InvariantLaw>, f: &ScalarField) -> Result<f64> {
    let k = bracket(law, f)?;
    Ok(law.expect_tabulated(&squares(k.bracket_at_points())))
}

fn squares(pts: &[[f64; NPTS]]) -> Vec<[f64; NPTS]> {
    pts.iter().map(|c| c.map(|v| v * v)).collect()
}

/// Terms of the skewness coefficient `c₃ = E[[b]·[q]](ξ)` with
/// `b = [q]² − ⟨[q]², f⟩`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Skewness {
    pub c3: f64,
    pub variance: f64,
    pub q_report: ClassCReport,
    pub b_report: ClassCReport,
}

pub fn skewness(law: &Arc<InvariantLaw>, f: &ScalarField) -> Result<Skewness> {
    let kq = bracket(law, f).map_err(|e| match e {
        Error::NotInClassC(m) => Error::NotInClassC(format!("q: {m}")),
        other => other,
    })?;
    let k = kq.bracket_at_points();
    let k2 = squares(k);
    let variance = law.expect_tabulated(&k2);
    let growth_b = 2.0 * (f.growth().k + 1.0);
    let kb = bracket_tabulated(law, &k2, growth_b).map_err(|e| match e {
        Error::NotInClassC(m) => Error::NotInClassC(format!("[q]^2 - <[q]^2, f>: {m}")),
        other => other,
    })?;
    let prod: Vec<[f64; NPTS]> = kb
        .bracket_at_points()
        .iter()
        .zip(k)
        .map(|(u, v)| {
            let mut out = [0.0; NPTS];
            for i in 0..NPTS {
                out[i] = u[i] * v[i];
            }
            out
        })
        .collect();
    Ok(Skewness {
        c3: law.expect_tabulated(&prod),
        variance,
        q_report: kq.report(),
        b_report: kb.report(),
    })
}

/// `c₃`, so that the third cumulant of `√T(ϑ*_T − ϑ)` is `≈ 3c₃/√T`.
pub fn skewness_coefficient(law: &Arc<InvariantLaw>, f: &ScalarField) -> Result<f64> {
    Ok(skewness(law, f)?.c3)
}

/// `h_k(z; Σ) = (−1)^k φ(z;0,Σ)⁻¹ ∂_z^k φ(z;0,Σ)` for `k ≤ 4`.
pub fn hermite(k: u32, z: f64, var: f64) -> f64 {
    let s = var;
    match k {
        0 => 1.0,
        1 => z / s,
        2 => z * z / (s * s) - 1.0 / s,
        3 => z.powi(3) / s.powi(3) - 3.0 * z / (s * s),
        4 => z.powi(4) / s.powi(4) - 6.0 * z * z / s.powi(3) + 3.0 / (s * s),
        _ => panic!("hermite polynomials are provided up to order 4"),
    }
}

/// `p*_{T,1}(z) = φ(z;0,V)(1 + c₃/(2√T)·h₃(z;V))` with `V = E[[q]²]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EdgeworthDensity {
    pub i_star_inv: f64,
    pub c3: f64,
    pub horizon: f64,
}

impl EdgeworthDensity {
    pub fn new(i_star_inv: f64, c3: f64, horizon: f64) -> Self {
        EdgeworthDensity {
            i_star_inv,
            c3,
            horizon,
        }
    }

    fn eps(&self) -> f64 {
        self.c3 / (2.0 * self.horizon.sqrt())
    }

    pub fn density(&self, z: f64) -> f64 {
        let v = self.i_star_inv;
        normal_pdf(z, v) * (1.0 + self.eps() * hermite(3, z, v))
    }

    /// Distribution function; `∫_{−∞}^z h₃φ = −h₂φ`.
    pub fn cdf(&self, z: f64) -> f64 {
        let v = self.i_star_inv;
        normal_cdf(z, v) - self.eps() * hermite(2, z, v) * normal_pdf(z, v)
    }

    pub fn normal_density(&self, z: f64) -> f64 {
        normal_pdf(z, self.i_star_inv)
    }

    /// Largest `|c₃/(2√T)·h₃|` on `[−zmax, zmax]`; the density is positive
    /// there when this is below 1.
    pub fn correction_bound(&self, zmax: f64) -> f64 {
        (0..=2000)
            .map(|i| {
                let z = -zmax + 2.0 * zmax * i as f64 / 2000.0;
                (self.eps() * hermite(3, z, self.i_star_inv)).abs()
            })
            .fold(0.0, f64::max)
    }

    /// The same density written with cumulants, `κ₂ = V`, `κ₃ = 3c₃/√T`.
    pub fn as_cumulant_form(&self) -> CumulantEdgeworth {
        CumulantEdgeworth {
            k2: self.i_star_inv,
            k3: 3.0 * self.c3 / self.horizon.sqrt(),
        }
    }
}

/// `p_{T,1}(z) = φ(z;0,κ₂)(1 + κ₃/6·h₃(z;κ₂))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CumulantEdgeworth {
    pub k2: f64,
    pub k3: f64,
}

impl CumulantEdgeworth {
    pub fn density(&self, z: f64) -> f64 {
        normal_pdf(z, self.k2) * (1.0 + self.k3 / 6.0 * hermite(3, z, self.k2))
    }

    pub fn cdf(&self, z: f64) -> f64 {
        normal_cdf(z, self.k2) - self.k3 / 6.0 * hermite(2, z, self.k2) * normal_pdf(z, self.k2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cumulants {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

/// k-statistics of a replicate ensemble (at least 1000 values).
pub fn mc_cumulants(values: &[f64]) -> Result<Cumulants> {
    let (k1, k2, k3) = stats::checked_k_statistics(values)?;
    Ok(Cumulants { k1, k2, k3 })
}

/// Rows `(z, normal, edgeworth, histogram)` over `bins` equal bins on
/// `[−zmax, zmax]`, evaluated at bin centers.
pub fn density_table(e: &EdgeworthDensity, samples: &[f64], bins: usize, zmax: f64) -> Vec<[f64; 4]> {
    let width = 2.0 * zmax / bins as f64;
    let mut counts = vec![0usize; bins];
    for s in samples {
        if s.abs() < zmax {
            let i = (((s + zmax) / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
    }
    let n = samples.len().max(1) as f64;
    (0..bins)
        .map(|i| {
            let z = -zmax + (i as f64 + 0.5) * width;
            [z, e.normal_density(z), e.density(z), counts[i] as f64 / (n * width)]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_nonlinear_family, make_ou_family};
    use crate::nonparam::build_bound;
    use crate::quadrature;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn law(g: f64) -> Arc<InvariantLaw> {
        Arc::new(InvariantLaw::build(&make_ou_family().model_at(g)).unwrap())
    }

    #[test]
    fn bracket_of_q_is_minus_q() {
        let cases: Vec<(Arc<InvariantLaw>, ScalarField)> = vec![
            (law(1.0), ScalarField::power(2)),
            (law(1.0), ScalarField::power(4)),
            (
                Arc::new(InvariantLaw::build(&make_nonlinear_family().model_at(1.0)).unwrap()),
                ScalarField::power(2),
            ),
        ];
        for (l, f) in cases {
            let b = bracket(&l, &f).unwrap();
            let nb = build_bound(&l, &f).unwrap();
            let sup = b
                .bracket_at_points()
                .iter()
                .zip(nb.q_at_points())
                .flat_map(|(u, v)| u.iter().zip(v.iter()).map(|(x, y)| (x + y).abs()))
                .fold(0.0, f64::max);
            assert!(sup < 1e-6, "{sup}");
            let rel = (variance_coefficient(&l, &f).unwrap() / nb.avar() - 1.0).abs();
            assert!(rel < 1e-6);
            // G_q and H differ at most by a constant; both vanish at 0
            for x in [-2.0, 0.5, 1.7] {
                assert!((b.green(x) - nb.h(x)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn bracket_gradient_forms_agree() {
        let l = Arc::new(InvariantLaw::build(&make_nonlinear_family().model_at(0.6)).unwrap());
        let b = bracket(&l, &ScalarField::power(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let x: f64 = rng.random_range(-3.0..3.0);
            let direct = -l.model().sigma(x) * b.green_gradient(x).unwrap();
            let v = b.bracket(x).unwrap();
            assert!((v - direct).abs() <= 1e-8 * direct.abs().max(1e-12), "{x}: {v} {direct}");
        }
        assert!(b.report().centered_mean.abs() < 1e-9);
    }

    #[test]
    fn zero_and_parity() {
        let l = law(1.0);
        let z = bracket(&l, &ScalarField::constant(0.0)).unwrap();
        assert_eq!(z.bracket(0.4).unwrap(), 0.0);
        assert_eq!(z.green(0.4), 0.0);
        let odd = bracket(&l, &ScalarField::power(1)).unwrap();
        for x in [0.3, 1.0, 2.2] {
            let (p, m) = (odd.bracket(x).unwrap(), odd.bracket(-x).unwrap());
            assert!((p - m).abs() < 1e-9 * (1.0 + p.abs()));
        }
    }

    #[test]
    fn ou_skewness_closed_form() {
        // [q] = x and [q]² − ½ = q, so c₃ = E[x·x] = ½.
        let l = law(1.0);
        let s = skewness(&l, &ScalarField::power(2)).unwrap();
        assert!((s.c3 - 0.5).abs() < 1e-8, "{}", s.c3);
        // integration by parts: E[[b][q]] = −2E[b·G_q]
        let nb = build_bound(&l, &ScalarField::power(2)).unwrap();
        let alt = -2.0
            * quadrature::integrate(
                |x| (x * x - 0.5) * nb.h(x) * l.density(x),
                -12.0,
                12.0,
                1e-14,
                1e-12,
            )
            .unwrap();
        assert!((s.c3 - alt).abs() < 1e-8);
        assert!(skewness_coefficient(&l, &ScalarField::power(1)).unwrap().abs() < 1e-8);
        assert_eq!(skewness_coefficient(&l, &ScalarField::constant(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn class_c_violations_are_named() {
        let l = law(1.0);
        let wild = ScalarField::new("wild", crate::field::GrowthBound::new(1.0, 2.0), |x: f64| x.powi(6));
        match bracket(&l, &wild) {
            Err(Error::NotInClassC(m)) => assert!(m.contains("growth")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hermite_values() {
        assert_eq!(hermite(0, 1.3, 0.7), 1.0);
        assert_eq!(hermite(3, 0.0, 2.0), 0.0);
        assert!((hermite(3, 1.0, 1.0) + 2.0).abs() < 1e-15);
        // against finite differences of the density
        let (z, s) = (0.7, 0.6);
        let h = 1e-3;
        let phi = |u: f64| normal_pdf(u, s);
        let d3 = (phi(z + 2.0 * h) - 2.0 * phi(z + h) + 2.0 * phi(z - h) - phi(z - 2.0 * h)) / (2.0 * h.powi(3));
        assert!((-d3 / phi(z) - hermite(3, z, s)).abs() < 1e-4);
        let d2 = (phi(z + h) - 2.0 * phi(z) + phi(z - h)) / (h * h);
        assert!((d2 / phi(z) - hermite(2, z, s)).abs() < 1e-5);
        let d4 = (phi(z + 2.0 * h) - 4.0 * phi(z + h) + 6.0 * phi(z) - 4.0 * phi(z - h) + phi(z - 2.0 * h)) / h.powi(4);
        assert!((d4 / phi(z) - hermite(4, z, s)).abs() < 1e-3);
    }

    #[test]
    fn edgeworth_density_properties() {
        let e = EdgeworthDensity::new(0.5, 0.5, 25.0);
        let mass = quadrature::integrate(|z| e.density(z), -12.0, 12.0, 1e-13, 1e-12).unwrap();
        assert!((mass - 1.0).abs() < 1e-6);
        let flat = EdgeworthDensity::new(0.5, 0.0, 25.0);
        assert_eq!(flat.density(0.8), normal_pdf(0.8, 0.5));
        let c = e.as_cumulant_form();
        for z in [-1.5, 0.0, 0.4, 2.0] {
            assert!((c.density(z) - e.density(z)).abs() < 1e-15);
            assert!((c.cdf(z) - e.cdf(z)).abs() < 1e-15);
            let num = quadrature::integrate(|u| e.density(u), -12.0, z, 1e-14, 1e-13).unwrap();
            assert!((num - e.cdf(z)).abs() < 1e-10);
        }
        // skewness is large at T = 25: the density is positive near the
        // center but the guard fires three standard deviations out
        assert!(e.correction_bound(1.0) < 1.0);
        assert!(e.correction_bound(2.5) > 1.0);
    }

    #[test]
    fn cumulant_errors_and_table() {
        assert!(matches!(
            mc_cumulants(&[0.0; 999]),
            Err(Error::InsufficientReplicates { .. })
        ));
        let c = mc_cumulants(&[3.0; 1000]).unwrap();
        assert_eq!((c.k2, c.k3), (0.0, 0.0));
        let e = EdgeworthDensity::new(1.0, 0.2, 50.0);
        let samples: Vec<f64> = (0..1000).map(|i| -2.0 + 4.0 * (i as f64 + 0.5) / 1000.0).collect();
        let t = density_table(&e, &samples, 40, 2.0);
        assert_eq!(t.len(), 40);
        let total: f64 = t.iter().map(|r| r[3] * 0.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
