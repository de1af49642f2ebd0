//! Gauss–Kronrod quadrature and the composite cell grid shared by every
//! tabulated object in the crate.
//!
//! A [`Grid`] is a uniform partition of an interval into cells. Every cell
//! carries the 15 Kronrod abscissae, and any smooth integrand is stored as its
//! values at those points. Cell integrals, running integrals inside a cell and
//! interpolation at arbitrary points then reduce to small dot products with
//! precomputed weight vectors (the integrand is represented by its degree-14
//! interpolant through the Kronrod points).

use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Number of Kronrod points per cell.
pub const NPTS: usize = 15;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

// Gauss weights for XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// Kronrod rule on the unit interval, abscissae in ascending order.
pub struct UnitRule {
    pub nodes: [f64; NPTS],
    pub kronrod: [f64; NPTS],
    pub gauss: [f64; NPTS],
    bary: [f64; NPTS],
    /// `partial[k][m]` = ∫₀^{t_k} ℓ_m(t) dt for the Lagrange basis ℓ_m.
    pub partial: [[f64; NPTS]; NPTS],
}

impl UnitRule {
    fn build() -> Self {
        let mut nodes = [0.0; NPTS];
        let mut kronrod = [0.0; NPTS];
        let mut gauss = [0.0; NPTS];
        for i in 0..7 {
            nodes[i] = 0.5 * (1.0 - XGK[i]);
            nodes[NPTS - 1 - i] = 0.5 * (1.0 + XGK[i]);
            kronrod[i] = 0.5 * WGK[i];
            kronrod[NPTS - 1 - i] = 0.5 * WGK[i];
            if i % 2 == 1 {
                gauss[i] = 0.5 * WG[i / 2];
                gauss[NPTS - 1 - i] = 0.5 * WG[i / 2];
            }
        }
        nodes[7] = 0.5;
        kronrod[7] = 0.5 * WGK[7];
        gauss[7] = 0.5 * WG[3];

        let mut bary = [0.0; NPTS];
        for m in 0..NPTS {
            let mut prod = 1.0;
            for i in 0..NPTS {
                if i != m {
                    prod *= nodes[m] - nodes[i];
                }
            }
            bary[m] = 1.0 / prod;
        }

        let mut rule = UnitRule {
            nodes,
            kronrod,
            gauss,
            bary,
            partial: [[0.0; NPTS]; NPTS],
        };
        for k in 0..NPTS {
            rule.partial[k] = rule.partial_weights_uncached(rule.nodes[k]);
        }
        rule
    }

    /// Lagrange basis values at `t` (barycentric form).
    pub fn basis(&self, t: f64) -> [f64; NPTS] {
        let mut out = [0.0; NPTS];
        for m in 0..NPTS {
            if t == self.nodes[m] {
                out[m] = 1.0;
                return out;
            }
        }
        let mut denom = 0.0;
        for m in 0..NPTS {
            let w = self.bary[m] / (t - self.nodes[m]);
            out[m] = w;
            denom += w;
        }
        for v in out.iter_mut() {
            *v /= denom;
        }
        out
    }

    fn partial_weights_uncached(&self, t: f64) -> [f64; NPTS] {
        let mut out = [0.0; NPTS];
        if t <= 0.0 {
            return out;
        }
        // the basis polynomials have degree 14; the Kronrod rule is exact to 22
        for i in 0..NPTS {
            let b = self.basis(t * self.nodes[i]);
            for m in 0..NPTS {
                out[m] += t * self.kronrod[i] * b[m];
            }
        }
        out
    }

    /// Weights `w` with ∫₀ᵗ g ≈ Σ w_m g(t_m).
    pub fn partial_weights(&self, t: f64) -> [f64; NPTS] {
        for k in 0..NPTS {
            if t == self.nodes[k] {
                return self.partial[k];
            }
        }
        if t >= 1.0 {
            return self.kronrod;
        }
        self.partial_weights_uncached(t)
    }
}

pub fn unit_rule() -> &'static UnitRule {
    static RULE: OnceLock<UnitRule> = OnceLock::new();
    RULE.get_or_init(UnitRule::build)
}

#[inline]
fn dot(a: &[f64; NPTS], b: &[f64; NPTS]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One Gauss–Kronrod (7, 15) pass over `[a, b]`: returns (estimate, error).
pub fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let rule = unit_rule();
    let h = b - a;
    let mut vals = [0.0; NPTS];
    for (v, t) in vals.iter_mut().zip(rule.nodes.iter()) {
        *v = f(a + h * t);
    }
    let k = h * dot(&rule.kronrod, &vals);
    let g = h * dot(&rule.gauss, &vals);
    (k, (k - g).abs())
}

/// Adaptive Gauss–Kronrod integration with interval bisection.
///
/// Stops when the summed error estimate is below `max(abs_tol, rel_tol·|I|)`.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<f64> {
    const MAX_INTERVALS: usize = 4000;
    if a == b {
        return Ok(0.0);
    }
    let (v0, e0) = gk15(&f, a, b);
    let mut parts: Vec<(f64, f64, f64, f64)> = vec![(a, b, v0, e0)];
    loop {
        let total: f64 = parts.iter().map(|p| p.2).sum();
        let err: f64 = parts.iter().map(|p| p.3).sum();
        if !total.is_finite() || !err.is_finite() {
            return Err(Error::QuadratureFailure {
                a,
                b,
                tol: abs_tol,
                err,
            });
        }
        if err <= abs_tol.max(rel_tol * total.abs()) {
            return Ok(total);
        }
        if parts.len() >= MAX_INTERVALS {
            return Err(Error::QuadratureFailure {
                a,
                b,
                tol: abs_tol.max(rel_tol * total.abs()),
                err,
            });
        }
        let (idx, _) = parts
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("nonempty");
        let (lo, hi, _, _) = parts.swap_remove(idx);
        let mid = 0.5 * (lo + hi);
        let (vl, el) = gk15(&f, lo, mid);
        let (vr, er) = gk15(&f, mid, hi);
        parts.push((lo, mid, vl, el));
        parts.push((mid, hi, vr, er));
    }
}

/// Uniform partition of `[lo, lo + cells·h]` into cells of width `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    lo: f64,
    h: f64,
    cells: usize,
}

impl Grid {
    pub fn new(lo: f64, hi: f64, cells: usize) -> Self {
        assert!(cells > 0 && hi > lo);
        Grid {
            lo,
            h: (hi - lo) / cells as f64,
            cells,
        }
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.node(self.cells)
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn nodes(&self) -> usize {
        self.cells + 1
    }

    pub fn node(&self, j: usize) -> f64 {
        self.lo + j as f64 * self.h
    }

    /// Index of the node nearest to `x`.
    pub fn nearest_node(&self, x: f64) -> usize {
        let j = ((x - self.lo) / self.h).round();
        j.clamp(0.0, self.cells as f64) as usize
    }

    /// Cell containing `x` (clamped to the grid).
    pub fn cell_of(&self, x: f64) -> usize {
        let j = ((x - self.lo) / self.h).floor();
        if j < 0.0 {
            0
        } else {
            (j as usize).min(self.cells - 1)
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi()
    }

    pub fn cell_points(&self, j: usize) -> [f64; NPTS] {
        let a = self.node(j);
        let rule = unit_rule();
        let mut out = [0.0; NPTS];
        for (o, t) in out.iter_mut().zip(rule.nodes.iter()) {
            *o = a + self.h * t;
        }
        out
    }

    /// Evaluates `g` at every cell point.
    pub fn sample<F: Fn(f64) -> f64>(&self, g: F) -> Vec<[f64; NPTS]> {
        (0..self.cells)
            .map(|j| {
                let pts = self.cell_points(j);
                let mut v = [0.0; NPTS];
                for (o, x) in v.iter_mut().zip(pts.iter()) {
                    *o = g(*x);
                }
                v
            })
            .collect()
    }

    /// Kronrod integral of tabulated values over cell `j` and its error estimate.
    pub fn cell_integral(&self, vals: &[f64; NPTS]) -> (f64, f64) {
        let rule = unit_rule();
        let k = self.h * dot(&rule.kronrod, vals);
        let g = self.h * dot(&rule.gauss, vals);
        (k, (k - g).abs())
    }

    /// ∫ from the left end of the cell to each of its points.
    pub fn cell_partials(&self, vals: &[f64; NPTS]) -> [f64; NPTS] {
        let rule = unit_rule();
        let mut out = [0.0; NPTS];
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.h * dot(&rule.partial[k], vals);
        }
        out
    }

    /// ∫ from the left end of cell `j` to `x` using the cell's interpolant.
    pub fn partial_to(&self, j: usize, vals: &[f64; NPTS], x: f64) -> f64 {
        let t = (x - self.node(j)) / self.h;
        let w = unit_rule().partial_weights(t);
        self.h * dot(&w, vals)
    }

    /// Interpolates tabulated cell values at `x` inside cell `j`.
    pub fn interpolate(&self, j: usize, vals: &[f64; NPTS], x: f64) -> f64 {
        let t = (x - self.node(j)) / self.h;
        dot(&unit_rule().basis(t), vals)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unit_rule_weights_sum_to_one() {
        let r = unit_rule();
        assert_relative_eq!(r.kronrod.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(r.gauss.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn partial_weights_integrate_polynomials_exactly() {
        let r = unit_rule();
        let vals: [f64; NPTS] = r.nodes.map(|t| 3.0 * t * t - 2.0 * t.powi(7) + 1.0);
        for (k, t) in r.nodes.iter().enumerate() {
            let exact = t.powi(3) - 0.25 * t.powi(8) + t;
            let got: f64 = r.partial[k].iter().zip(vals.iter()).map(|(w, v)| w * v).sum();
            assert_relative_eq!(got, exact, epsilon = 1e-14);
        }
        let t = 0.37;
        let w = r.partial_weights(t);
        let got: f64 = w.iter().zip(vals.iter()).map(|(w, v)| w * v).sum();
        assert_relative_eq!(got, t.powi(3) - 0.25 * t.powi(8) + t, epsilon = 1e-14);
    }

    #[test]
    fn interpolation_reproduces_smooth_function() {
        let g = Grid::new(-1.0, 1.0, 8);
        let vals = g.sample(|x| x.sin());
        let j = g.cell_of(0.3);
        assert_relative_eq!(g.interpolate(j, &vals[j], 0.3), 0.3f64.sin(), epsilon = 1e-14);
    }

    #[test]
    fn adaptive_gaussian_integral() {
        let v = integrate(|x: f64| (-x * x).exp(), -12.0, 12.0, 1e-13, 1e-13).unwrap();
        assert_relative_eq!(v, std::f64::consts::PI.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn adaptive_handles_kink() {
        let v = integrate(|x: f64| x.abs(), -1.0, 2.0, 1e-12, 1e-12).unwrap();
        assert_relative_eq!(v, 2.5, epsilon = 1e-11);
    }

    #[test]
    fn nonfinite_integrand_fails() {
        let r = integrate(|x: f64| 1.0 / x, 0.0, 1.0, 1e-10, 1e-10);
        assert!(matches!(r, Err(Error::QuadratureFailure { .. })));
    }

    #[test]
    fn grid_cell_lookup_clamps() {
        let g = Grid::new(0.0, 1.0, 4);
        assert_eq!(g.cell_of(-3.0), 0);
        assert_eq!(g.cell_of(1.0), 3);
        assert_eq!(g.cell_of(0.3), 1);
        assert_eq!(g.nearest_node(0.49), 2);
    }
}
