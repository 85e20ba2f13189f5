//! Fixtures shared by the benchmarks.

use fbsde_core::pde::{FieldOptions, SpaceTimeGrid};
use fbsde_core::problem::{EvalBox, ProblemSpec};
use fbsde_core::{registry, Vector};

/// The closed-form linear problem on `[0, 0.5]` started at `x0 = 1`.
pub fn linear_problem() -> ProblemSpec {
    ProblemSpec::new(
        registry::linear(1, 2.0, 2.0, 1.0, 1.0),
        1,
        0.0,
        0.5,
        Vector::from_element(1, 1.0),
        vec![0.1],
        EvalBox::cube((0.0, 0.5), 1.0),
    )
    .expect("linear problem is valid")
}

pub fn grid(problem: &ProblemSpec, nt: usize, nx: usize) -> SpaceTimeGrid {
    SpaceTimeGrid::for_problem(problem, nt, -4.0, 4.0, nx).expect("grid is valid")
}

pub fn field_options() -> FieldOptions {
    FieldOptions::default()
}
