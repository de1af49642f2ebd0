use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng;

use diffmoment::edgeworth::{self, EdgeworthDensity};
use diffmoment::nonparam::build_bound;
use diffmoment::param::law_at;
use diffmoment::simulate::{ito_integral_fn, simulate_path, stream_rng, SimConfig};
use diffmoment::{make_nonlinear_family, make_ou_family, InvariantLaw, ParametricFamily, ScalarField};

fn families() -> [ParametricFamily; 2] {
    [make_ou_family(), make_nonlinear_family()]
}

fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-5 * (1.0 + x.abs());
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn gauss_pdf(x: f64, var: f64) -> f64 {
    (-x * x / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn family_derivatives_match_finite_differences(which in 0usize..2, g in 0.2f64..9.0, x in -6.0f64..6.0) {
        let fam = &families()[which];
        let sd = fam.drift_dot(g, x);
        let fd = central(|gg| fam.drift(gg, x), g);
        prop_assert!((sd - fd).abs() <= 1e-4 * (1.0 + sd.abs()));
        let sdp = fam.drift_dot_prime(g, x);
        let fd = central(|xx| fam.drift_dot(g, xx), x);
        prop_assert!((sdp - fd).abs() <= 1e-4 * (1.0 + sdp.abs()));
        let sp = fam.sigma_prime(x);
        let fd = central(|xx| fam.sigma(xx), x);
        prop_assert!((sp - fd).abs() <= 1e-4 * (1.0 + sp.abs()));
    }

    #[test]
    fn stream_generators_are_distinct(a in (0u32..64, 0u32..100_000), b in (0u32..64, 0u32..100_000)) {
        prop_assume!(a != b);
        let mut ra = stream_rng(17, a.0, a.1);
        let mut rb = stream_rng(17, b.0, b.1);
        let xa: [u64; 2] = [ra.random(), ra.random()];
        let xb: [u64; 2] = [rb.random(), rb.random()];
        prop_assert_ne!(xa, xb);
    }

    #[test]
    fn edgeworth_cdf_is_the_integral_of_the_density(c3 in -2.0f64..2.0, var in 0.2f64..6.0, t in 10.0f64..400.0, z in -3.0f64..3.0) {
        let e = EdgeworthDensity::new(var, c3, t);
        let z = z * var.sqrt();
        let lo = -12.0 * var.sqrt();
        let n = 4000;
        let h = (z - lo) / n as f64;
        let mut s = 0.5 * (e.density(lo) + e.density(z));
        for i in 1..n {
            s += e.density(lo + i as f64 * h);
        }
        prop_assert!((s * h - e.cdf(z)).abs() < 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn density_identity_and_tail_mass(which in 0usize..2, g in 0.2f64..5.0) {
        let fam = &families()[which];
        let law = InvariantLaw::build(&fam.model_at(g)).unwrap();
        let d = law.domain();
        prop_assert!(law.cdf(d.hi) - law.cdf(d.lo) >= 1.0 - 2.0 * d.tail_tol);
        let big_g = law.normalizer();
        for i in 0..=200 {
            let x = d.lo + (d.hi - d.lo) * i as f64 / 200.0;
            let s = law.model().sigma(x);
            let prod = big_g * s * s * law.scale_density(x) * law.density(x);
            prop_assert!((prod - 1.0).abs() < 1e-9, "x = {x}: {prod}");
        }
    }

    #[test]
    fn ou_density_is_gaussian(g in 0.15f64..8.0) {
        let law = InvariantLaw::build(&make_ou_family().model_at(g)).unwrap();
        let d = law.domain();
        let var = 0.5 / g;
        for i in 0..=400 {
            let x = d.lo + (d.hi - d.lo) * i as f64 / 400.0;
            prop_assert!((law.density(x) - gauss_pdf(x, var)).abs() < 1e-8);
        }
    }

    #[test]
    fn quantile_inverts_the_cdf(which in 0usize..2, g in 0.2f64..5.0, us in proptest::collection::vec(1e-6f64..1.0 - 1e-6, 20)) {
        let law = InvariantLaw::build(&families()[which].model_at(g)).unwrap();
        let mut us = us;
        us.sort_by(f64::total_cmp);
        let qs: Vec<f64> = us.iter().map(|u| law.quantile(*u)).collect();
        for w in qs.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        for (u, q) in us.iter().zip(&qs) {
            prop_assert!((law.cdf(*q) - u).abs() < 1e-8);
        }
    }

    #[test]
    fn declared_growth_holds_on_the_domain(which in 0usize..2, g in 0.2f64..5.0) {
        let law = InvariantLaw::build(&families()[which].model_at(g)).unwrap();
        let grid = law.grid();
        let nodes: Vec<f64> = (0..=grid.cells()).map(|j| grid.node(j)).collect();
        for name in ["x", "x2", "x4", "indicator(0.5)"] {
            let f = ScalarField::from_name(name).unwrap();
            prop_assert!(f.growth_violation(nodes.iter().copied()).is_none(), "{name}");
        }
    }

    #[test]
    fn running_mass_vanishes_at_both_edges(which in 0usize..2, g in 0.2f64..5.0, k in prop_oneof![Just(1), Just(2), Just(4)]) {
        let f = ScalarField::power(k);
        let law = Arc::new(law_at(&families()[which], g, &[&f]).unwrap());
        let b = build_bound(&law, &f).unwrap();
        let d = law.domain();
        prop_assert!(b.m(d.lo).unwrap().abs() < 1e-8);
        prop_assert!(b.m(d.hi).unwrap().abs() < 1e-8);
    }

    #[test]
    fn shifting_the_moment_function(g in 0.3f64..4.0, c in -5.0f64..5.0, x in -2.5f64..2.5) {
        let f = ScalarField::power(4);
        let law = Arc::new(law_at(&make_ou_family(), g, &[&f]).unwrap());
        let a = build_bound(&law, &f).unwrap();
        let b = build_bound(&law, &f.shifted(c)).unwrap();
        prop_assert!((b.theta() - a.theta() - c).abs() < 1e-9 * (1.0 + c.abs()));
        prop_assert!((b.m(x).unwrap() - a.m(x).unwrap()).abs() < 1e-9);
        prop_assert!((b.q(x).unwrap() - a.q(x).unwrap()).abs() < 1e-9 * (1.0 + a.q(x).unwrap().abs()));
        prop_assert!((b.h(x) - a.h(x)).abs() < 1e-9 * (1.0 + a.h(x).abs()));
        prop_assert!((b.info() / a.info() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bracket_of_even_function_is_odd_under_symmetric_law(g in 0.3f64..4.0, x in 0.1f64..3.0, k in prop_oneof![Just(2), Just(4)]) {
        let f = ScalarField::power(k);
        let law = Arc::new(law_at(&make_ou_family(), g, &[&f]).unwrap());
        let b = edgeworth::bracket(&law, &f).unwrap();
        let (p, m) = (b.bracket(x).unwrap(), b.bracket(-x).unwrap());
        prop_assert!((p + m).abs() < 1e-8 * (1.0 + p.abs()), "{p} {m}");
    }

    #[test]
    fn ito_sum_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let law = InvariantLaw::build(&make_nonlinear_family().model_at(1.0)).unwrap();
        let mut rng = stream_rng(seed, 0, 0);
        let path = simulate_path(law.model(), &SimConfig::new(5.0), Some(&law), &mut rng).unwrap();
        let g1 = |x: f64| x.sin();
        let g2 = |x: f64| x * x;
        let i1 = ito_integral_fn(&path, law.model(), g1).unwrap();
        let i2 = ito_integral_fn(&path, law.model(), g2).unwrap();
        let i12 = ito_integral_fn(&path, law.model(), |x| a * g1(x) + b * g2(x)).unwrap();
        prop_assert!((i12 - a * i1 - b * i2).abs() < 1e-9 * (1.0 + i12.abs()));
    }
}

/// Independent OU check of the sampler: stationary draws have variance 1/(2γ).
#[test]
fn stationary_draws_match_the_law() {
    let g = 0.7;
    let law = InvariantLaw::build(&make_ou_family().model_at(g)).unwrap();
    let mut rng = stream_rng(3, 1, 0);
    let n = 50_000;
    let xs: Vec<f64> = (0..n).map(|_| law.sample(&mut rng)).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let target = 0.5 / g;
    // sd of the sample variance is about var·√(2/n)
    assert!((var - target).abs() < 5.0 * target * (2.0 / n as f64).sqrt(), "{var}");
}
