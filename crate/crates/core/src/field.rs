//! Real functions of one real variable carried as callbacks plus metadata.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Smoothness {
    /// Continuous away from the declared breakpoints.
    Piecewise,
    Continuous,
    C1,
    Smooth,
}

/// `|value(x)| ≤ c·(1 + |x|^k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthBound {
    pub c: f64,
    pub k: f64,
}

impl GrowthBound {
    pub fn new(c: f64, k: f64) -> Self {
        GrowthBound { c, k }
    }

    pub fn holds(&self, x: f64, value: f64) -> bool {
        value.abs() <= self.c * (1.0 + x.abs().powf(self.k))
    }
}

type Callback = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct ScalarField {
    f: Callback,
    growth: GrowthBound,
    smoothness: Smoothness,
    breakpoints: Vec<f64>,
    label: String,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("label", &self.label)
            .field("growth", &self.growth)
            .field("smoothness", &self.smoothness)
            .field("breakpoints", &self.breakpoints)
            .finish()
    }
}

impl ScalarField {
    pub fn new<F>(label: impl Into<String>, growth: GrowthBound, f: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        ScalarField {
            f: Arc::new(f),
            growth,
            smoothness: Smoothness::Smooth,
            breakpoints: Vec::new(),
            label: label.into(),
        }
    }

    pub fn with_smoothness(mut self, s: Smoothness) -> Self {
        self.smoothness = s;
        self
    }

    pub fn with_breakpoints(mut self, b: Vec<f64>) -> Self {
        self.breakpoints = b;
        self
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        (self.f)(x)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn growth(&self) -> GrowthBound {
        self.growth
    }

    pub fn smoothness(&self) -> Smoothness {
        self.smoothness
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn constant(c: f64) -> Self {
        ScalarField::new(format!("const({c})"), GrowthBound::new(c.abs(), 0.0), move |_| c)
    }

    /// `x^k` for a non-negative integer power.
    pub fn power(k: i32) -> Self {
        let label = match k {
            1 => "x".to_string(),
            _ => format!("x{k}"),
        };
        ScalarField::new(label, GrowthBound::new(1.0, k as f64), move |x| x.powi(k))
    }

    /// `χ{x < x0}`, the moment function behind the invariant distribution function.
    pub fn indicator_below(x0: f64) -> Self {
        ScalarField::new(format!("indicator({x0})"), GrowthBound::new(1.0, 0.0), move |x| {
            if x < x0 {
                1.0
            } else {
                0.0
            }
        })
        .with_smoothness(Smoothness::Piecewise)
        .with_breakpoints(vec![x0])
    }

    /// `self + c`.
    pub fn shifted(&self, c: f64) -> Self {
        let inner = self.f.clone();
        ScalarField {
            f: Arc::new(move |x| inner(x) + c),
            growth: GrowthBound::new(self.growth.c + c.abs(), self.growth.k),
            smoothness: self.smoothness,
            breakpoints: self.breakpoints.clone(),
            label: format!("{}+{c}", self.label),
        }
    }

    /// Looks a moment function up in the registry: `x`, `x2`, `x4`,
    /// `indicator(x0)` and `const(c)`.
    pub fn from_name(name: &str) -> Result<Self> {
        let name = name.trim();
        match name {
            "x" => return Ok(ScalarField::power(1)),
            "x2" => return Ok(ScalarField::power(2)),
            "x4" => return Ok(ScalarField::power(4)),
            _ => {}
        }
        let arg = |prefix: &str| -> Option<f64> {
            name.strip_prefix(prefix)?
                .strip_suffix(')')?
                .trim()
                .parse::<f64>()
                .ok()
        };
        if let Some(x0) = arg("indicator(") {
            return Ok(ScalarField::indicator_below(x0));
        }
        if let Some(c) = arg("const(") {
            return Ok(ScalarField::constant(c));
        }
        Err(Error::UnknownFunction(name.to_string()))
    }

    /// First grid point where the declared growth bound fails, if any.
    pub fn growth_violation(&self, xs: impl IntoIterator<Item = f64>) -> Option<(f64, f64)> {
        xs.into_iter()
            .map(|x| (x, self.eval(x)))
            .find(|&(x, v)| !v.is_finite() || !self.growth.holds(x, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lookup() {
        assert_eq!(ScalarField::from_name("x2").unwrap().eval(3.0), 9.0);
        assert_eq!(ScalarField::from_name("x4").unwrap().eval(-2.0), 16.0);
        let ind = ScalarField::from_name("indicator(0.5)").unwrap();
        assert_eq!(ind.eval(0.2), 1.0);
        assert_eq!(ind.eval(0.5), 0.0);
        assert_eq!(ind.breakpoints(), &[0.5]);
        assert_eq!(ScalarField::from_name("const(2)").unwrap().eval(9.0), 2.0);
        assert!(matches!(
            ScalarField::from_name("x3"),
            Err(Error::UnknownFunction(_))
        ));
    }

    #[test]
    fn growth_bounds_hold_on_grid() {
        let xs = (-400..=400).map(|i| i as f64 * 0.05);
        for name in ["x", "x2", "x4", "indicator(0)", "const(-3)"] {
            let f = ScalarField::from_name(name).unwrap();
            assert_eq!(f.growth_violation(xs.clone()), None, "{name}");
        }
        let bad = ScalarField::new("exp", GrowthBound::new(1.0, 2.0), f64::exp);
        assert!(bad.growth_violation(xs).is_some());
    }

    #[test]
    fn shift_adds_constant() {
        let f = ScalarField::power(2).shifted(1.5);
        assert_eq!(f.eval(2.0), 5.5);
    }
}
