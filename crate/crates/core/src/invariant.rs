//! Scale function, invariant density, its distribution function and quantile,
//! stationary moments and stationary sampling.
//!
//! Every law is tabulated on a uniform [`Grid`] that extends the certified
//! truncation domain `[lo, hi]` by half its half-width on each side; the
//! extension carries the tail mass used for certification. The scale exponent
//! `E(x) = 2∫₀ˣ S/σ²` is stored at the Kronrod points of each cell, and all
//! exponentials are taken after subtracting `max E`, with the shift absorbed
//! into the normalizer.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::model::DiffusionModel;
use crate::quadrature::{self, Grid, NPTS};

/// Cells inside the certified domain.
pub const DOMAIN_CELLS: usize = 4096;
const EXT_CELLS: usize = DOMAIN_CELLS / 4;
const INITIAL_HALF_WIDTH: f64 = 10.0;
const MAX_DOUBLINGS: usize = 10;
pub const DEFAULT_TAIL_TOL: f64 = 1e-12;
pub const DEFAULT_PROBE_BOUND: f64 = 50.0;
const NORMALIZER_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationDomain {
    pub lo: f64,
    pub hi: f64,
    pub tail_tol: f64,
}

/// Probe values behind an ergodicity verdict. `V` values are reported as
/// `ln|V|` and the normalizer integrand `σ⁻² e^{E}` as its logarithm, since
/// both overflow for strongly confining drifts.
#[derive(Debug, Clone, PartialEq)]
pub struct ErgodicityReport {
    pub ergodic: bool,
    pub probe_bound: f64,
    pub ln_scale_minus: f64,
    pub ln_scale_plus: f64,
    pub ln_scale_minus_one: f64,
    pub ln_scale_plus_one: f64,
    pub ln_speed_minus: f64,
    pub ln_speed_plus: f64,
    pub ln_speed_zero: f64,
}

fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Numerical check of the two ergodicity conditions: the scale function
/// `V(x) = ∫₀ˣ exp(−E(y)) dy` diverges at both ends and the normalizer
/// integrand `σ⁻² exp(E)` decays.
pub fn check_ergodicity(model: &DiffusionModel, probe_bound: f64) -> Result<ErgodicityReport> {
    if !(probe_bound > 1.0) {
        return Err(Error::InvalidConfig(format!(
            "probe bound {probe_bound} must exceed 1"
        )));
    }
    let half_cells = (probe_bound / 0.01).ceil() as usize;
    let grid = Grid::new(-probe_bound, probe_bound, 2 * half_cells);
    let zero = half_cells;
    let sigma = grid.sample(|x| model.sigma(x));
    for (j, cell) in sigma.iter().enumerate() {
        if let Some(k) = cell.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::NonPositiveSigma {
                x: grid.cell_points(j)[k],
            });
        }
    }
    let integrand: Vec<[f64; NPTS]> = grid
        .sample(|x| {
            let s = model.sigma(x);
            2.0 * model.drift(x) / (s * s)
        });
    let expo = Primitive::new(grid.clone(), zero, integrand);
    if let Some(j) = expo.nodes.iter().position(|e| !e.is_finite()) {
        return Err(Error::OverflowInExponent { x: grid.node(j) });
    }

    // ln V accumulated outward from 0 on each side, in log space.
    let cell_ln_scale = |j: usize| -> f64 {
        let vals = expo.pts[j].map(|e| -e);
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let scaled = vals.map(|v| (v - m).exp());
        let (int, _) = grid.cell_integral(&scaled);
        m + int.ln()
    };
    let one_cells = (1.0 / grid.h()).round() as usize;
    let mut ln_plus = f64::NEG_INFINITY;
    let mut ln_plus_one = f64::NEG_INFINITY;
    for (i, j) in (zero..grid.cells()).enumerate() {
        ln_plus = logaddexp(ln_plus, cell_ln_scale(j));
        if i + 1 == one_cells {
            ln_plus_one = ln_plus;
        }
    }
    let mut ln_minus = f64::NEG_INFINITY;
    let mut ln_minus_one = f64::NEG_INFINITY;
    for (i, j) in (0..zero).rev().enumerate() {
        ln_minus = logaddexp(ln_minus, cell_ln_scale(j));
        if i + 1 == one_cells {
            ln_minus_one = ln_minus;
        }
    }
    let ln_speed = |j: usize| expo.nodes[j] - 2.0 * model.sigma(grid.node(j)).ln();
    let ln_speed_minus = ln_speed(0);
    let ln_speed_plus = ln_speed(grid.cells());
    let ln_speed_zero = ln_speed(zero);

    let diverges = 1e3f64.ln();
    let decays = 1e-10f64.ln();
    let ergodic = ln_plus - ln_plus_one > diverges
        && ln_minus - ln_minus_one > diverges
        && ln_speed_plus - ln_speed_zero < decays
        && ln_speed_minus - ln_speed_zero < decays;
    Ok(ErgodicityReport {
        ergodic,
        probe_bound,
        ln_scale_minus: ln_minus,
        ln_scale_plus: ln_plus,
        ln_scale_minus_one: ln_minus_one,
        ln_scale_plus_one: ln_plus_one,
        ln_speed_minus,
        ln_speed_plus,
        ln_speed_zero,
    })
}

/// Running integral `P(x) = ∫₀ˣ g` of a smooth integrand tabulated on a grid.
#[derive(Debug, Clone)]
pub struct Primitive {
    grid: Grid,
    integrand: Vec<[f64; NPTS]>,
    nodes: Vec<f64>,
    pts: Vec<[f64; NPTS]>,
}

impl Primitive {
    /// `zero` is the index of the node where the primitive vanishes.
    pub fn new(grid: Grid, zero: usize, integrand: Vec<[f64; NPTS]>) -> Self {
        let n = grid.cells();
        let cell: Vec<f64> = integrand.iter().map(|v| grid.cell_integral(v).0).collect();
        let mut nodes = vec![0.0; n + 1];
        for j in zero..n {
            nodes[j + 1] = nodes[j] + cell[j];
        }
        for j in (0..zero).rev() {
            nodes[j] = nodes[j + 1] - cell[j];
        }
        let pts = (0..n)
            .map(|j| {
                let part = grid.cell_partials(&integrand[j]);
                part.map(|p| nodes[j] + p)
            })
            .collect();
        Primitive {
            grid,
            integrand,
            nodes,
            pts,
        }
    }

    /// Value at `x`, clamped to the grid.
    pub fn at(&self, x: f64) -> f64 {
        let x = x.clamp(self.grid.lo(), self.grid.hi());
        let j = self.grid.cell_of(x);
        self.nodes[j] + self.grid.partial_to(j, &self.integrand[j], x)
    }

    pub fn at_nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn at_points(&self) -> &[[f64; NPTS]] {
        &self.pts
    }
}

#[derive(Debug, Clone)]
pub struct InvariantLaw {
    model: DiffusionModel,
    domain: TruncationDomain,
    grid: Grid,
    zero: usize,
    expo: Primitive,
    sigma_pts: Vec<[f64; NPTS]>,
    ln_normalizer: f64,
    dens_pts: Vec<[f64; NPTS]>,
    dens_nodes: Vec<f64>,
    cdf_nodes: Vec<f64>,
    cdf_slopes: Vec<f64>,
    median_node: usize,
}

impl InvariantLaw {
    pub fn build(model: &DiffusionModel) -> Result<Self> {
        Self::build_certified(model, &[])
    }

    /// Builds the law on a domain that also certifies the tails of `fields`:
    /// the domain doubles from `[−10, 10]` until the density tails and every
    /// `|F|·f` tail are below the tail tolerance.
    pub fn build_certified(model: &DiffusionModel, fields: &[&ScalarField]) -> Result<Self> {
        let report = check_ergodicity(model, DEFAULT_PROBE_BOUND)?;
        if !report.ergodic {
            return Err(Error::NotErgodic(format!("{report:?}")));
        }
        let mut half = INITIAL_HALF_WIDTH;
        let mut last = None;
        for _ in 0..=MAX_DOUBLINGS {
            let law = Self::build_on(model, half, DEFAULT_TAIL_TOL)?;
            let (tl, tr) = law.density_tails();
            let density_ok = tl.max(tr) < law.domain.tail_tol;
            let fields_ok = fields
                .iter()
                .all(|f| law.tail_mass(f) < law.domain.tail_tol);
            if density_ok && fields_ok {
                return Ok(law);
            }
            last = Some(law);
            half *= 2.0;
        }
        let law = last.expect("at least one build");
        let (tl, tr) = law.density_tails();
        if tl.max(tr) >= law.domain.tail_tol {
            return Err(Error::TailDivergence {
                label: "invariant density".into(),
                mass: tl.max(tr),
            });
        }
        let worst = fields
            .iter()
            .map(|f| (f.label().to_string(), law.tail_mass(f)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("some field failed");
        Err(Error::TailDivergence {
            label: worst.0,
            mass: worst.1,
        })
    }

    fn build_on(model: &DiffusionModel, half: f64, tail_tol: f64) -> Result<Self> {
        let ext = half * EXT_CELLS as f64 / (DOMAIN_CELLS as f64 / 2.0);
        let cells = DOMAIN_CELLS + 2 * EXT_CELLS;
        let grid = Grid::new(-half - ext, half + ext, cells);
        let zero = cells / 2;

        let sigma_pts = grid.sample(|x| model.sigma(x));
        for (j, cell) in sigma_pts.iter().enumerate() {
            if let Some(k) = cell.iter().position(|s| !(*s > 0.0)) {
                return Err(Error::NonPositiveSigma {
                    x: grid.cell_points(j)[k],
                });
            }
        }
        let integrand: Vec<[f64; NPTS]> = grid
            .sample(|x| model.drift(x))
            .iter()
            .zip(sigma_pts.iter())
            .map(|(s, sg)| {
                let mut out = [0.0; NPTS];
                for k in 0..NPTS {
                    out[k] = 2.0 * s[k] / (sg[k] * sg[k]);
                }
                out
            })
            .collect();
        for (j, v) in integrand.iter().enumerate() {
            let (val, err) = grid.cell_integral(v);
            if !val.is_finite() {
                return Err(Error::OverflowInExponent { x: grid.node(j) });
            }
            if err > 1e-9 * (1.0 + val.abs()) {
                return Err(Error::QuadratureFailure {
                    a: grid.node(j),
                    b: grid.node(j + 1),
                    tol: 1e-9,
                    err,
                });
            }
        }
        let expo = Primitive::new(grid.clone(), zero, integrand);
        let e_max = expo
            .pts
            .iter()
            .flat_map(|c| c.iter())
            .chain(expo.nodes.iter())
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);

        let unnorm: Vec<[f64; NPTS]> = expo
            .pts
            .iter()
            .zip(sigma_pts.iter())
            .map(|(e, s)| {
                let mut out = [0.0; NPTS];
                for k in 0..NPTS {
                    out[k] = (e[k] - e_max).exp() / (s[k] * s[k]);
                }
                out
            })
            .collect();
        let mut z = 0.0;
        let mut z_err = 0.0;
        for v in &unnorm {
            let (val, err) = grid.cell_integral(v);
            z += val;
            z_err += err;
        }
        if !(z > 0.0) || z_err > NORMALIZER_TOL * z {
            return Err(Error::QuadratureFailure {
                a: grid.lo(),
                b: grid.hi(),
                tol: NORMALIZER_TOL,
                err: z_err / z,
            });
        }
        let ln_normalizer = z.ln() + e_max;
        let dens_pts: Vec<[f64; NPTS]> = unnorm.iter().map(|c| c.map(|v| v / z)).collect();
        let dens_nodes: Vec<f64> = (0..grid.nodes())
            .map(|j| {
                let s = model.sigma(grid.node(j));
                (expo.nodes[j] - ln_normalizer).exp() / (s * s)
            })
            .collect();
        let mut cdf_nodes = vec![0.0; grid.nodes()];
        for j in 0..grid.cells() {
            cdf_nodes[j + 1] = cdf_nodes[j] + grid.cell_integral(&dens_pts[j]).0;
        }
        let cdf_slopes = monotone_slopes(&cdf_nodes, &dens_nodes, grid.h());
        let median_node = cdf_nodes.partition_point(|c| *c < 0.5).min(grid.cells());

        Ok(InvariantLaw {
            model: model.clone(),
            domain: TruncationDomain {
                lo: -half,
                hi: half,
                tail_tol,
            },
            grid,
            zero,
            expo,
            sigma_pts,
            ln_normalizer,
            dens_pts,
            dens_nodes,
            cdf_nodes,
            cdf_slopes,
            median_node,
        })
    }

    pub fn model(&self) -> &DiffusionModel {
        &self.model
    }

    pub fn domain(&self) -> TruncationDomain {
        self.domain
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub(crate) fn zero_node(&self) -> usize {
        self.zero
    }

    pub(crate) fn median_node(&self) -> usize {
        self.median_node
    }

    /// Node indices bounding the certified domain.
    pub(crate) fn domain_nodes(&self) -> (usize, usize) {
        (EXT_CELLS, EXT_CELLS + DOMAIN_CELLS)
    }

    /// Normalizer `G(S) = ∫ σ⁻² exp(E)`.
    pub fn normalizer(&self) -> f64 {
        self.ln_normalizer.exp()
    }

    pub fn ln_normalizer(&self) -> f64 {
        self.ln_normalizer
    }

    /// `E(x) = 2∫₀ˣ S/σ²`.
    pub fn exponent(&self, x: f64) -> f64 {
        self.expo.at(x)
    }

    /// Scale integrand `p(x) = exp(−E(x))`.
    pub fn scale_density(&self, x: f64) -> f64 {
        (-self.exponent(x)).exp()
    }

    /// `ln f(x)`; `−∞` outside the tabulated grid.
    pub fn ln_density(&self, x: f64) -> f64 {
        if !self.grid.contains(x) {
            return f64::NEG_INFINITY;
        }
        let s = self.model.sigma(x);
        self.exponent(x) - self.ln_normalizer - 2.0 * s.ln()
    }

    pub fn density(&self, x: f64) -> f64 {
        self.ln_density(x).exp()
    }

    pub fn density_at_points(&self) -> &[[f64; NPTS]] {
        &self.dens_pts
    }

    pub fn density_at_nodes(&self) -> &[f64] {
        &self.dens_nodes
    }

    pub fn cdf_at_nodes(&self) -> &[f64] {
        &self.cdf_nodes
    }

    pub fn sigma_at_points(&self) -> &[[f64; NPTS]] {
        &self.sigma_pts
    }

    pub fn exponent_at_points(&self) -> &[[f64; NPTS]] {
        self.expo.at_points()
    }

    /// Total mass of the tabulation (1 up to rounding).
    pub fn total_mass(&self) -> f64 {
        *self.cdf_nodes.last().expect("nonempty")
    }

    /// Density mass left of `lo` and right of `hi`.
    pub fn density_tails(&self) -> (f64, f64) {
        let (a, b) = self.domain_nodes();
        (self.cdf_nodes[a], self.total_mass() - self.cdf_nodes[b])
    }

    /// Distribution function, by monotone cubic interpolation of the tabulation.
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.grid.lo() {
            return 0.0;
        }
        if x >= self.grid.hi() {
            return self.total_mass();
        }
        let j = self.grid.cell_of(x);
        let t = (x - self.grid.node(j)) / self.grid.h();
        self.hermite(j, t)
    }

    fn hermite(&self, j: usize, t: f64) -> f64 {
        let h = self.grid.h();
        let (y0, y1) = (self.cdf_nodes[j], self.cdf_nodes[j + 1]);
        let (m0, m1) = (self.cdf_slopes[j] * h, self.cdf_slopes[j + 1] * h);
        let t2 = t * t;
        let t3 = t2 * t;
        (2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + t) * m0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * m1
    }

    /// Quantile function, clamped to the certified domain.
    pub fn quantile(&self, u: f64) -> f64 {
        let (lo, hi) = (self.domain.lo, self.domain.hi);
        let c = &self.cdf_nodes;
        let n = c.len();
        if !(u > c[0]) {
            return lo;
        }
        if u >= c[n - 1] {
            return hi;
        }
        // first node with c > u
        let k = c.partition_point(|v| *v <= u);
        let j = k - 1;
        let x = if c[j] == u {
            // u sits on a node; resolve flat runs by their midpoint
            let first = c.partition_point(|v| *v < u);
            0.5 * (self.grid.node(first) + self.grid.node(j))
        } else {
            let (mut a, mut b) = (0.0f64, 1.0f64);
            let mut t = (u - c[j]) / (c[k] - c[j]);
            for _ in 0..100 {
                let v = self.hermite(j, t) - u;
                if v > 0.0 {
                    b = t;
                } else {
                    a = t;
                }
                if b - a < 1e-15 {
                    break;
                }
                let h = self.grid.h();
                let slope = self.hermite_slope(j, t) * h;
                let next = if slope > 0.0 { t - v / slope } else { f64::NAN };
                t = if next > a && next < b { next } else { 0.5 * (a + b) };
            }
            self.grid.node(j) + t * self.grid.h()
        };
        x.clamp(lo, hi)
    }

    fn hermite_slope(&self, j: usize, t: f64) -> f64 {
        let h = self.grid.h();
        let (y0, y1) = (self.cdf_nodes[j], self.cdf_nodes[j + 1]);
        let (m0, m1) = (self.cdf_slopes[j] * h, self.cdf_slopes[j + 1] * h);
        let t2 = t * t;
        ((6.0 * t2 - 6.0 * t) * y0
            + (3.0 * t2 - 4.0 * t + 1.0) * m0
            + (-6.0 * t2 + 6.0 * t) * y1
            + (3.0 * t2 - 2.0 * t) * m1)
            / h
    }

    /// Inverse-CDF draw from the invariant law.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile(rng.random::<f64>())
    }

    /// `∫ g f` for `g` tabulated at the cell points of the grid.
    pub fn expect_tabulated(&self, g: &[[f64; NPTS]]) -> f64 {
        g.iter()
            .zip(self.dens_pts.iter())
            .map(|(gv, fv)| {
                let mut prod = [0.0; NPTS];
                for k in 0..NPTS {
                    prod[k] = gv[k] * fv[k];
                }
                self.grid.cell_integral(&prod).0
            })
            .sum()
    }

    /// Cells whose interior contains one of `breaks`.
    pub(crate) fn break_cells(&self, breaks: &[f64]) -> Vec<usize> {
        let mut out: Vec<usize> = breaks
            .iter()
            .filter(|b| self.grid.contains(**b))
            .filter_map(|b| {
                let j = self.grid.cell_of(*b);
                (*b > self.grid.node(j) && *b < self.grid.node(j + 1)).then_some(j)
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// `∫_a^b g f` by adaptive quadrature, split at any breakpoints inside.
    pub(crate) fn integrate_direct<G: Fn(f64) -> f64>(
        &self,
        g: &G,
        a: f64,
        b: f64,
        breaks: &[f64],
    ) -> Result<f64> {
        let mut cuts = vec![a];
        cuts.extend(breaks.iter().filter(|x| **x > a && **x < b));
        cuts.push(b);
        let mut total = 0.0;
        for w in cuts.windows(2) {
            total += quadrature::integrate(|x| g(x) * self.density(x), w[0], w[1], 1e-15, 1e-12)?;
        }
        Ok(total)
    }

    /// Stationary expectation `E_S[g(ξ)]` over the whole tabulation.
    pub fn expect(&self, g: &ScalarField) -> Result<f64> {
        let vals = self.grid.sample(|x| g.eval(x));
        let mut total = self.expect_tabulated(&vals);
        for j in self.break_cells(g.breakpoints()) {
            let mut prod = [0.0; NPTS];
            for k in 0..NPTS {
                prod[k] = vals[j][k] * self.dens_pts[j][k];
            }
            total -= self.grid.cell_integral(&prod).0;
            total += self.integrate_direct(
                &|x| g.eval(x),
                self.grid.node(j),
                self.grid.node(j + 1),
                g.breakpoints(),
            )?;
        }
        Ok(total)
    }

    /// `E[F(ξ)·a(ξ)]` for a smooth `a` given both at the cell points and as a
    /// callback; cells where `F` breaks are integrated adaptively.
    pub fn expect_product<A: Fn(f64) -> f64>(
        &self,
        f: &ScalarField,
        a_pts: &[[f64; NPTS]],
        a: A,
    ) -> Result<f64> {
        let f_vals = self.grid.sample(|x| f.eval(x));
        let prod: Vec<[f64; NPTS]> = f_vals
            .iter()
            .zip(a_pts)
            .map(|(u, v)| {
                let mut out = [0.0; NPTS];
                for k in 0..NPTS {
                    out[k] = u[k] * v[k];
                }
                out
            })
            .collect();
        let mut total = self.expect_tabulated(&prod);
        for j in self.break_cells(f.breakpoints()) {
            let mut cell = [0.0; NPTS];
            for k in 0..NPTS {
                cell[k] = prod[j][k] * self.dens_pts[j][k];
            }
            total -= self.grid.cell_integral(&cell).0;
            total += self.integrate_direct(
                &|x| f.eval(x) * a(x),
                self.grid.node(j),
                self.grid.node(j + 1),
                f.breakpoints(),
            )?;
        }
        Ok(total)
    }

    /// `∫ |g| f` over the part of the tabulation outside `[lo, hi]`.
    pub fn tail_mass(&self, g: &ScalarField) -> f64 {
        let (a, b) = self.domain_nodes();
        (0..a)
            .chain(b..self.grid.cells())
            .map(|j| {
                let pts = self.grid.cell_points(j);
                let mut prod = [0.0; NPTS];
                for k in 0..NPTS {
                    prod[k] = g.eval(pts[k]).abs() * self.dens_pts[j][k];
                }
                self.grid.cell_integral(&prod).0
            })
            .sum()
    }

    /// Rows `(x, density, cdf)` at the nodes of the certified domain.
    pub fn tabulation(&self) -> Vec<(f64, f64, f64)> {
        let (a, b) = self.domain_nodes();
        (a..=b)
            .map(|j| (self.grid.node(j), self.dens_nodes[j], self.cdf_nodes[j]))
            .collect()
    }
}

/// Running integral `x ↦ ∫_{−∞}^x a f` of a tabulated function against the
/// invariant density. Values left of the median are accumulated from the left
/// edge and values right of it as minus the accumulation from the right edge,
/// so both tails keep full relative accuracy when `a` is centered.
#[derive(Debug, Clone)]
pub struct RunningMass {
    law: Arc<InvariantLaw>,
    integrand: Vec<[f64; NPTS]>,
    field: Option<ScalarField>,
    break_cells: Vec<usize>,
    cell: Vec<f64>,
    left: Vec<f64>,
    right: Vec<f64>,
    pts: Vec<[f64; NPTS]>,
}

impl RunningMass {
    /// `a_pts` holds `a` at the cell points. When `field` is given, cells
    /// containing one of its breakpoints are integrated adaptively from the
    /// field itself.
    pub fn new(
        law: Arc<InvariantLaw>,
        a_pts: &[[f64; NPTS]],
        field: Option<ScalarField>,
    ) -> Result<Self> {
        let grid = law.grid().clone();
        let n = grid.cells();
        let integrand: Vec<[f64; NPTS]> = a_pts
            .iter()
            .zip(law.density_at_points())
            .map(|(a, f)| {
                let mut out = [0.0; NPTS];
                for k in 0..NPTS {
                    out[k] = a[k] * f[k];
                }
                out
            })
            .collect();
        let break_cells = match &field {
            Some(fd) => law.break_cells(fd.breakpoints()),
            None => Vec::new(),
        };
        let mut cell: Vec<f64> = integrand.iter().map(|v| grid.cell_integral(v).0).collect();
        let mut partials: Vec<[f64; NPTS]> =
            integrand.iter().map(|v| grid.cell_partials(v)).collect();
        if let Some(fd) = &field {
            let a = |x: f64| fd.eval(x);
            for &j in &break_cells {
                let x0 = grid.node(j);
                cell[j] = law.integrate_direct(&a, x0, grid.node(j + 1), fd.breakpoints())?;
                let pts = grid.cell_points(j);
                for k in 0..NPTS {
                    partials[j][k] = law.integrate_direct(&a, x0, pts[k], fd.breakpoints())?;
                }
            }
        }
        let mut left = vec![0.0; n + 1];
        for j in 0..n {
            left[j + 1] = left[j] + cell[j];
        }
        let mut right = vec![0.0; n + 1];
        for j in (0..n).rev() {
            right[j] = right[j + 1] + cell[j];
        }
        let pivot = law.median_node();
        let pts = (0..n)
            .map(|j| {
                partials[j].map(|p| {
                    if j < pivot {
                        left[j] + p
                    } else {
                        -(right[j + 1] + (cell[j] - p))
                    }
                })
            })
            .collect();
        Ok(RunningMass {
            law,
            integrand,
            field,
            break_cells,
            cell,
            left,
            right,
            pts,
        })
    }

    /// `∫ a f` over the whole tabulation.
    pub fn total(&self) -> f64 {
        *self.left.last().expect("nonempty")
    }

    /// Value at node `j`.
    pub fn at_node(&self, j: usize) -> f64 {
        if j <= self.law.median_node() {
            self.left[j]
        } else {
            -self.right[j]
        }
    }

    pub fn at_points(&self) -> &[[f64; NPTS]] {
        &self.pts
    }

    /// Value at `x`, clamped to the grid.
    pub fn at(&self, x: f64) -> Result<f64> {
        let grid = self.law.grid();
        let x = x.clamp(grid.lo(), grid.hi());
        let j = grid.cell_of(x);
        let p = match &self.field {
            Some(fd) if self.break_cells.binary_search(&j).is_ok() => {
                self.law
                    .integrate_direct(&|v| fd.eval(v), grid.node(j), x, fd.breakpoints())?
            }
            _ => grid.partial_to(j, &self.integrand[j], x),
        };
        Ok(if j < self.law.median_node() {
            self.left[j] + p
        } else {
            -(self.right[j + 1] + (self.cell[j] - p))
        })
    }
}

/// Per-point `ln f` recomputed from the exponent, which never underflows.
pub(crate) fn ln_density_at_points(law: &InvariantLaw) -> Vec<[f64; NPTS]> {
    law.exponent_at_points()
        .iter()
        .zip(law.sigma_at_points())
        .map(|(e, s)| {
            let mut out = [0.0; NPTS];
            for k in 0..NPTS {
                out[k] = e[k] - law.ln_normalizer() - 2.0 * s[k].ln();
            }
            out
        })
        .collect()
}

/// Below this both a running mass and the density count as zero when their
/// ratio is formed.
pub const RATIO_FLOOR: f64 = 1e-280;

/// `2m/(σf)` evaluated in log space, zero where `|m|` and `f` are both below
/// [`RATIO_FLOOR`].
pub fn mass_ratio(m: f64, sigma: f64, ln_f: f64) -> f64 {
    if m == 0.0 || (m.abs() < RATIO_FLOOR && ln_f < RATIO_FLOOR.ln()) {
        return 0.0;
    }
    m.signum() * ((2.0 * m.abs()).ln() - sigma.ln() - ln_f).exp()
}

/// Fritsch–Carlson limited slopes for a nondecreasing tabulation.
fn monotone_slopes(y: &[f64], deriv: &[f64], h: f64) -> Vec<f64> {
    let mut m: Vec<f64> = deriv.iter().map(|d| d.max(0.0)).collect();
    for j in 0..y.len() - 1 {
        let delta = (y[j + 1] - y[j]) / h;
        if delta <= 0.0 {
            m[j] = 0.0;
            m[j + 1] = 0.0;
            continue;
        }
        let a = m[j] / delta;
        let b = m[j + 1] / delta;
        let r = a * a + b * b;
        if r > 9.0 {
            let tau = 3.0 / r.sqrt();
            m[j] = tau * a * delta;
            m[j + 1] = tau * b * delta;
        }
    }
    m
}

/// Normalizer `G(S)` of the invariant density.
pub fn normalizer(model: &DiffusionModel) -> Result<f64> {
    Ok(InvariantLaw::build(model)?.normalizer())
}

pub fn build_law(model: &DiffusionModel) -> Result<InvariantLaw> {
    InvariantLaw::build(model)
}

/// `ϑ_S = E_S[F(ξ)]`, after certifying that `|F|·f` is negligible outside the domain.
pub fn stationary_moment(law: &InvariantLaw, f: &ScalarField) -> Result<f64> {
    let tail = law.tail_mass(f);
    if !(tail < law.domain().tail_tol) {
        return Err(Error::TailDivergence {
            label: f.label().to_string(),
            mass: tail,
        });
    }
    law.expect(f)
}

pub fn sample_stationary<R: Rng + ?Sized>(law: &InvariantLaw, rng: &mut R) -> f64 {
    law.sample(rng)
}

/// Shared, immutable handle to a law.
pub type SharedLaw = Arc<InvariantLaw>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GrowthBound;
    use crate::model::{make_nonlinear_family, make_ou_family};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn ou(g: f64) -> DiffusionModel {
        make_ou_family().model_at(g)
    }

    fn normal_density(x: f64, var: f64) -> f64 {
        (-(x * x) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
    }

    #[test]
    fn ou_is_ergodic() {
        let r = check_ergodicity(&ou(1.0), 50.0).unwrap();
        assert!(r.ergodic, "{r:?}");
    }

    #[test]
    fn explosive_and_brownian_are_not_ergodic() {
        let explosive = DiffusionModel::new(
            "explosive",
            ScalarField::new("x", GrowthBound::new(1.0, 1.0), |x| x),
            ScalarField::constant(1.0),
        );
        assert!(!check_ergodicity(&explosive, 50.0).unwrap().ergodic);
        let bm = DiffusionModel::new("bm", ScalarField::constant(0.0), ScalarField::constant(1.0));
        assert!(!check_ergodicity(&bm, 50.0).unwrap().ergodic);
        assert!(matches!(InvariantLaw::build(&bm), Err(Error::NotErgodic(_))));
    }

    #[test]
    fn nonpositive_sigma_is_rejected() {
        let m = DiffusionModel::new(
            "bad",
            ScalarField::power(1).shifted(0.0),
            ScalarField::new("s", GrowthBound::new(1.0, 1.0), |x| x),
        );
        assert!(matches!(
            check_ergodicity(&m, 50.0),
            Err(Error::NonPositiveSigma { .. })
        ));
    }

    #[test]
    fn exponent_overflow_is_reported() {
        let m = DiffusionModel::new(
            "wild",
            ScalarField::new("e", GrowthBound::new(1.0, 400.0), |x: f64| -x.signum() * (x * x).exp()),
            ScalarField::constant(1.0),
        );
        assert!(matches!(
            check_ergodicity(&m, 50.0),
            Err(Error::OverflowInExponent { .. })
        ));
    }

    #[test]
    fn ou_normalizers() {
        assert_relative_eq!(normalizer(&ou(1.0)).unwrap(), PI.sqrt(), max_relative = 1e-10);
        assert_relative_eq!(normalizer(&ou(0.5)).unwrap(), (2.0 * PI).sqrt(), max_relative = 1e-10);
    }

    #[test]
    fn ou_density_cdf_quantile() {
        let law = build_law(&ou(1.0)).unwrap();
        assert_relative_eq!(law.density(0.0), 1.0 / PI.sqrt(), max_relative = 1e-10);
        assert!((law.cdf(0.0) - 0.5).abs() < 1e-12);
        assert!(law.quantile(0.5).abs() < 1e-8);
        for (x, d, _) in law.tabulation().iter().step_by(7) {
            assert!((d - normal_density(*x, 0.5)).abs() < 1e-8);
        }
        let (tl, tr) = law.density_tails();
        assert!(tl < 1e-12 && tr < 1e-12);
        assert!(law.cdf_at_nodes().windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn quantile_inverts_cdf_on_grid() {
        let law = build_law(&make_nonlinear_family().model_at(0.7)).unwrap();
        let (a, b) = law.domain_nodes();
        for j in (a..=b).step_by(13) {
            let x = law.grid().node(j);
            let u = law.cdf(x);
            if u > 1e-10 && u < 1.0 - 1e-10 {
                assert!((law.quantile(u) - x).abs() < 1e-8, "x={x}");
            }
        }
        let q = law.quantile(1e-9);
        assert!(q.is_finite() && q >= law.domain().lo);
        assert_eq!(law.quantile(0.0), law.domain().lo);
        assert_eq!(law.quantile(1.0), law.domain().hi);
    }

    #[test]
    fn density_identity_and_pointwise_formula() {
        let model = make_nonlinear_family().model_at(1.3);
        let law = build_law(&model).unwrap();
        let g = law.normalizer();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x: f64 = rng.random_range(-3.0..3.0);
            // independent route: adaptive quadrature of the exponent from 0
            let e = quadrature::integrate(
                |v| {
                    let s = model.sigma(v);
                    2.0 * model.drift(v) / (s * s)
                },
                0.0,
                x,
                1e-14,
                1e-14,
            )
            .unwrap();
            let s = model.sigma(x);
            let direct = e.exp() / (g * s * s);
            assert_relative_eq!(law.density(x), direct, max_relative = 1e-9);
            let ident = g * s * s * law.scale_density(x) * law.density(x);
            assert_relative_eq!(ident, 1.0, max_relative = 1e-9);
        }
        let mass = law.total_mass();
        assert!(mass > 1.0 - 2e-12 && mass < 1.0 + 1e-10);
    }

    #[test]
    fn base_point_shift_leaves_density_unchanged() {
        // Moving the exponent's base point from 0 to c multiplies the
        // unnormalized density and G(S) by the same factor.
        let model = make_nonlinear_family().model_at(0.4);
        let law = build_law(&model).unwrap();
        let c = 0.8;
        let shift = law.exponent(c);
        let g_shifted = law.normalizer() * (-shift).exp();
        for x in [-1.0, 0.3, 2.0] {
            let s = model.sigma(x);
            let unnorm = (law.exponent(x) - shift).exp() / (s * s);
            assert_relative_eq!(unnorm / g_shifted, law.density(x), max_relative = 1e-12);
        }
    }

    #[test]
    fn ou_moments() {
        let law = build_law(&ou(1.0)).unwrap();
        let m2 = stationary_moment(&law, &ScalarField::power(2)).unwrap();
        let m1 = stationary_moment(&law, &ScalarField::power(1)).unwrap();
        let m4 = stationary_moment(&law, &ScalarField::power(4)).unwrap();
        assert!((m2 - 0.5).abs() < 1e-9);
        assert!(m1.abs() < 1e-9);
        assert!((m4 - 0.75).abs() < 1e-9);
        let d = stationary_moment(&law, &ScalarField::indicator_below(0.3)).unwrap();
        assert!((d - law.cdf(0.3)).abs() < 1e-9);
    }

    #[test]
    fn domain_doubles_for_wide_laws() {
        let law = build_law(&ou(0.1)).unwrap();
        assert!(law.domain().hi >= 20.0);
        let m2 = stationary_moment(&law, &ScalarField::power(2)).unwrap();
        assert_relative_eq!(m2, 5.0, max_relative = 1e-9);
    }

    #[test]
    fn heavy_integrand_triggers_tail_divergence() {
        let law = build_law(&ou(1.0)).unwrap();
        let huge = ScalarField::new("exp(x^2)", GrowthBound::new(1.0, 300.0), |x: f64| (x * x).exp());
        assert!(matches!(
            stationary_moment(&law, &huge),
            Err(Error::TailDivergence { .. })
        ));
    }

    #[test]
    fn stationary_sampling() {
        let law = build_law(&ou(1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut xs: Vec<f64> = (0..n).map(|_| sample_stationary(&law, &mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        xs.sort_by(f64::total_cmp);
        let ks = crate::stats::ks_distance_sorted(&xs, |x| law.cdf(x));
        assert!(ks < 0.01, "ks {ks}");
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(law.sample(&mut a), law.sample(&mut b));
    }
}
