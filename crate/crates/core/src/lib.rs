//! Numerical laboratory for forward-backward SDEs with small noise.
//!
//! The system under study is
//!
//! ```text
//! X(s) = x + ∫ f(r, X, Y) dr + √ε ∫ σ(r, X, Y) dW
//! Y(s) = h(X(T)) + ∫ g(r, X, Y, Z) dr − ∫ Z dW
//! ```
//!
//! with `X, Y ∈ ℝⁿ`. The crate solves it through its decoupling field
//! `Y = u^ε(s, X)`, simulates the decoupled forward equation, estimates the
//! small-noise moment gaps, and evaluates the large-deviation action of the
//! forward and backward components.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod asymptotics;
pub mod columnar;
pub mod error;
pub mod ldp;
pub mod limit;
pub mod pde;
pub mod problem;
pub mod registry;
pub mod rng;
pub mod simulate;

pub type Vector = nalgebra::DVector<f64>;
pub type Matrix = nalgebra::DMatrix<f64>;

pub use error::{Error, Result};
pub use limit::{BvpMethod, BvpOptions, OdeSolution, ShootingField};
pub use pde::{BoundaryMode, DecouplingField, FieldBounds, FieldOptions, SpaceTimeGrid};
pub use problem::{AssumptionCheck, AssumptionReport, CoefficientSet, EvalBox, ProblemSpec};
pub use registry::RegistryEntry;
pub use simulate::TrajectoryBundle;

/// Deterministic path sampled on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPath {
    pub t_nodes: Vec<f64>,
    pub values: Vec<Vector>,
}

impl GridPath {
    pub fn new(t_nodes: Vec<f64>, values: Vec<Vector>) -> Result<Self> {
        if t_nodes.len() != values.len() || t_nodes.len() < 2 {
            return Err(Error::Shape(format!(
                "path has {} times and {} values (need at least two)",
                t_nodes.len(),
                values.len()
            )));
        }
        if t_nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Shape(
                "path times must be strictly increasing".into(),
            ));
        }
        let n = values[0].len();
        if values.iter().any(|v| v.len() != n) {
            return Err(Error::Shape("path values have mixed dimensions".into()));
        }
        Ok(Self { t_nodes, values })
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn len(&self) -> usize {
        self.t_nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_nodes.is_empty()
    }
}

/// A map `(t, x) ↦ u(t, x) ∈ ℝⁿ`, shared by grid fields and the shooting-based limit field.
pub trait FieldMap: Sync {
    fn dim(&self) -> usize;
    fn value(&self, t: f64, x: &Vector) -> Result<Vector>;
}
