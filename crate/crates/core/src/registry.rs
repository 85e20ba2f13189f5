//! Built-in coefficient families.
//!
//! * `linear`: `f = -a y`, `g = b x`, `sigma = sigma0 I`, `h = c x`. With
//!   `a = b` and `c = 1` the decoupling field is `u(t, x) = x` for every noise
//!   level and `X = Y` is an Ornstein-Uhlenbeck process.
//! * `tanh-coupled`: the linear family plus `kappa tanh` perturbations in
//!   `f`, `g` and `h`; the field is nonlinear and depends on epsilon.
//! * `martingale`: `f = -a y`, `g = 0`, `h = c x`, so `Y` is a martingale.
//! * `brownian`: `f = g = h = 0`, `sigma = sigma0 I`.

use crate::error::{Error, Result};
use crate::problem::CoefficientSet;
use crate::{Matrix, Vector};

/// Registry entry with its scalar parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegistryEntry {
    Linear {
        a: f64,
        b: f64,
        c: f64,
        sigma0: f64,
    },
    TanhCoupled {
        a: f64,
        b: f64,
        c: f64,
        kappa: f64,
        sigma0: f64,
    },
    Martingale {
        a: f64,
        c: f64,
        sigma0: f64,
    },
    Brownian {
        sigma0: f64,
    },
}

impl RegistryEntry {
    pub const NAMES: [&'static str; 4] = ["linear", "tanh-coupled", "martingale", "brownian"];

    /// Looks an entry up by name; missing parameters take their defaults.
    pub fn from_name(
        name: &str,
        a: Option<f64>,
        b: Option<f64>,
        c: Option<f64>,
        kappa: Option<f64>,
        sigma0: Option<f64>,
    ) -> Result<Self> {
        let sigma0 = sigma0.unwrap_or(1.0);
        match name {
            "linear" => Ok(Self::Linear {
                a: a.unwrap_or(2.0),
                b: b.unwrap_or(2.0),
                c: c.unwrap_or(1.0),
                sigma0,
            }),
            "tanh-coupled" => Ok(Self::TanhCoupled {
                a: a.unwrap_or(1.0),
                b: b.unwrap_or(1.0),
                c: c.unwrap_or(1.0),
                kappa: kappa.unwrap_or(0.5),
                sigma0,
            }),
            "martingale" => Ok(Self::Martingale {
                a: a.unwrap_or(2.0),
                c: c.unwrap_or(1.0),
                sigma0,
            }),
            "brownian" => Ok(Self::Brownian { sigma0 }),
            other => Err(Error::Config(format!(
                "unknown registry problem `{other}` (expected one of {:?})",
                Self::NAMES
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Linear { .. } => "linear",
            Self::TanhCoupled { .. } => "tanh-coupled",
            Self::Martingale { .. } => "martingale",
            Self::Brownian { .. } => "brownian",
        }
    }

    pub fn build(&self, n: usize) -> CoefficientSet {
        match *self {
            Self::Linear { a, b, c, sigma0 } => linear(n, a, b, c, sigma0),
            Self::TanhCoupled {
                a,
                b,
                c,
                kappa,
                sigma0,
            } => tanh_coupled(n, a, b, c, kappa, sigma0),
            Self::Martingale { a, c, sigma0 } => martingale(n, a, c, sigma0),
            Self::Brownian { sigma0 } => brownian(n, sigma0),
        }
    }
}

/// `f = -a y`, `g = b x`, `sigma = sigma0 I_n`, `h = c x` (with `d = n`).
///
/// Declared constants: `C1 = max(a, b, c)`, `C2` half of the largest value
/// compatible with every noise level in `(0, 1]`, `Lambda = max(a, b, c, sigma0) + 1`.
pub fn linear(n: usize, a: f64, b: f64, c: f64, sigma0: f64) -> CoefficientSet {
    let c2 = 0.5 * (a.min(b) - 1.0).min(c).max(0.0);
    CoefficientSet::new(
        move |_, _, y| -a * y,
        move |_, x, _, _| b * x,
        move |_, x, _| Matrix::identity(x.len(), x.len()) * sigma0,
        move |x| c * x,
    )
    .with_constants(
        a.max(b).max(c),
        c2,
        a.max(b).max(c).max(sigma0.abs() * (n as f64).sqrt()) + 1.0,
    )
}

/// Linear family with `kappa tanh` perturbations:
/// `f = -a y - kappa tanh(y)`, `g = b x + kappa tanh(x)`, `h = c x + kappa tanh(x)`.
pub fn tanh_coupled(n: usize, a: f64, b: f64, c: f64, kappa: f64, sigma0: f64) -> CoefficientSet {
    let c2 = 0.5 * (a.min(b) - 1.0).min(c).max(0.0);
    let l = a.max(b).max(c) + kappa.abs();
    CoefficientSet::new(
        move |_, _, y: &Vector| -a * y - kappa * y.map(f64::tanh),
        move |_, x: &Vector, _, _| b * x + kappa * x.map(f64::tanh),
        move |_, x, _| Matrix::identity(x.len(), x.len()) * sigma0,
        move |x: &Vector| c * x + kappa * x.map(f64::tanh),
    )
    .with_constants(l, c2, l.max(sigma0.abs() * (n as f64).sqrt()) + 1.0)
}

/// `f = -a y`, `g = 0`, `h = c x`.
pub fn martingale(n: usize, a: f64, c: f64, sigma0: f64) -> CoefficientSet {
    CoefficientSet::new(
        move |_, _, y| -a * y,
        move |_, x: &Vector, _, _| Vector::zeros(x.len()),
        move |_, x, _| Matrix::identity(x.len(), x.len()) * sigma0,
        move |x| c * x,
    )
    .with_constants(
        a.max(c),
        0.0,
        a.max(c).max(sigma0.abs() * (n as f64).sqrt()) + 1.0,
    )
}

/// `f = g = h = 0`, `sigma = sigma0 I_n`.
pub fn brownian(n: usize, sigma0: f64) -> CoefficientSet {
    CoefficientSet::new(
        |_, x: &Vector, _| Vector::zeros(x.len()),
        |_, x: &Vector, _, _| Vector::zeros(x.len()),
        move |_, x, _| Matrix::identity(x.len(), x.len()) * sigma0,
        |x: &Vector| Vector::zeros(x.len()),
    )
    .with_constants(0.0, 0.0, sigma0.abs() * (n as f64).sqrt() + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_uses_defaults() {
        let e = RegistryEntry::from_name("linear", None, None, None, None, None).unwrap();
        assert_eq!(
            e,
            RegistryEntry::Linear {
                a: 2.0,
                b: 2.0,
                c: 1.0,
                sigma0: 1.0
            }
        );
        assert!(RegistryEntry::from_name("nope", None, None, None, None, None).is_err());
    }

    #[test]
    fn linear_maps_evaluate() {
        let c = linear(1, 2.0, 3.0, 1.5, 0.5);
        let x = Vector::from_element(1, 2.0);
        let y = Vector::from_element(1, -1.0);
        assert_eq!(c.drift(0.0, &x, &y).unwrap()[0], 2.0);
        assert_eq!(
            c.generator(0.0, &x, &y, &Matrix::zeros(1, 1)).unwrap()[0],
            6.0
        );
        assert_eq!(c.diffusion(0.0, &x, &y).unwrap()[(0, 0)], 0.5);
        assert_eq!(c.terminal(&x).unwrap()[0], 3.0);
    }
}
