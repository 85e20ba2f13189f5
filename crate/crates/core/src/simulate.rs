//! Euler–Maruyama simulation of the decoupled forward-backward system.
//!
//! With a solved field `u^ε`, the forward equation closes on itself:
//!
//! ```text
//! X_{j+1} = X_j + f(t_j, X_j, u(t_j, X_j)) Δt + √ε σ(t_j, X_j, u(t_j, X_j)) ΔW_j
//! Y_j = u(t_j, X_j),   Z_j = √ε ∇u(t_j, X_j) σ(t_j, X_j, Y_j)
//! ```
//!
//! Increments are addressed by `(seed, path, global step)` so bundles at
//! different `ε`, or started at different grid times, see the same noise.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pde::DecouplingField;
use crate::problem::ProblemSpec;
use crate::rng::BrownianSource;
use crate::{Matrix, Vector};

/// Ensemble of discretized `(X, Y, Z, ΔW)` paths on a shared time grid.
///
/// Per path: `x[p][j * n + l]`, `y[p][j * n + l]`, `z[p][(j * n + l) * d + k]`,
/// `dw[p][j * d + k]` for the increment over `[t_j, t_{j+1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    pub t_nodes: Vec<f64>,
    pub epsilon: f64,
    pub n: usize,
    pub d: usize,
    pub seed_root: u64,
    /// Index of `t_nodes[0]` on the field grid; increments are keyed by global step.
    pub start_step: usize,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub dw: Vec<Vec<f64>>,
}

impl TrajectoryBundle {
    pub fn n_paths(&self) -> usize {
        self.x.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.t_nodes.len()
    }

    pub fn dt(&self) -> f64 {
        self.t_nodes[1] - self.t_nodes[0]
    }

    pub fn x_at(&self, path: usize, j: usize) -> Vector {
        Vector::from_row_slice(&self.x[path][j * self.n..(j + 1) * self.n])
    }

    pub fn y_at(&self, path: usize, j: usize) -> Vector {
        Vector::from_row_slice(&self.y[path][j * self.n..(j + 1) * self.n])
    }

    pub fn z_at(&self, path: usize, j: usize) -> Matrix {
        let w = self.n * self.d;
        Matrix::from_row_slice(self.n, self.d, &self.z[path][j * w..(j + 1) * w])
    }

    pub fn dw_at(&self, path: usize, j: usize) -> Vector {
        Vector::from_row_slice(&self.dw[path][j * self.d..(j + 1) * self.d])
    }
}

struct PathData {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    dw: Vec<f64>,
}

fn simulate_path(
    problem: &ProblemSpec,
    field: &DecouplingField,
    source: &BrownianSource,
    start: usize,
    x0: &Vector,
    path: usize,
) -> Result<PathData> {
    let grid = &field.grid;
    let c = &problem.coefficients;
    let (n, d) = (problem.n, problem.d);
    let sqrt_eps = field.epsilon.sqrt();
    let dt = grid.dt();
    let nodes = grid.nt - start;
    let mut data = PathData {
        x: Vec::with_capacity(nodes * n),
        y: Vec::with_capacity(nodes * n),
        z: Vec::with_capacity(nodes * n * d),
        dw: Vec::with_capacity((nodes - 1) * d),
    };
    let mut cursor = source.cursor(path as u64, start);
    let mut x = x0.clone();
    if !grid.in_safe_region(&x) {
        return Err(Error::Excursion {
            path,
            step: 0,
            state: format!("{:?}", x.as_slice()),
        });
    }
    for j in 0..nodes {
        let k = start + j;
        let t = grid.t_node(k);
        let (y, jac) = field.interpolate(k, &x)?;
        let sigma = c.diffusion(t, &x, &y)?;
        let z = sqrt_eps * jac * &sigma;
        data.x.extend(x.iter());
        data.y.extend(y.iter());
        data.z.extend(z.transpose().iter());
        if j + 1 == nodes {
            break;
        }
        let dw = cursor.next_increment();
        let next = &x + c.drift(t, &x, &y)? * dt + sqrt_eps * &sigma * &dw;
        data.dw.extend(dw.iter());
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                time: grid.t_node(k + 1),
                detail: format!("non-finite state on path {path}"),
            });
        }
        if !grid.in_safe_region(&next) {
            return Err(Error::Excursion {
                path,
                step: j + 1,
                state: format!("{:?}", next.as_slice()),
            });
        }
        x = next;
    }
    Ok(data)
}

/// Simulates `n_paths` paths started at `(t_start, x_start)`; `t_start` is
/// snapped to the nearest field time node.
pub fn simulate_from(
    problem: &ProblemSpec,
    field: &DecouplingField,
    epsilon: f64,
    t_start: f64,
    x_start: &Vector,
    n_paths: usize,
    seed: u64,
) -> Result<TrajectoryBundle> {
    if field.epsilon != epsilon {
        return Err(Error::Contract(format!(
            "field was solved at epsilon {} but the simulation asks for {epsilon}",
            field.epsilon
        )));
    }
    if field.n() != problem.n || x_start.len() != problem.n {
        return Err(Error::Shape(
            "field, problem and start state dimensions differ".into(),
        ));
    }
    if n_paths == 0 {
        return Err(Error::Config("need at least one path".into()));
    }
    let grid = &field.grid;
    let start = grid.time_index(t_start)?;
    if start + 1 >= grid.nt {
        return Err(Error::Config(format!(
            "start time {t_start} leaves no step before the horizon"
        )));
    }
    let source = BrownianSource::new(seed, problem.d, grid.dt());
    let results: Vec<Result<PathData>> = (0..n_paths)
        .into_par_iter()
        .map(|p| simulate_path(problem, field, &source, start, x_start, p))
        .collect();
    let mut bundle = TrajectoryBundle {
        t_nodes: (start..grid.nt).map(|k| grid.t_node(k)).collect(),
        epsilon,
        n: problem.n,
        d: problem.d,
        seed_root: seed,
        start_step: start,
        x: Vec::with_capacity(n_paths),
        y: Vec::with_capacity(n_paths),
        z: Vec::with_capacity(n_paths),
        dw: Vec::with_capacity(n_paths),
    };
    // The lowest failing path index wins, whatever the scheduling.
    for r in results {
        let data = r?;
        bundle.x.push(data.x);
        bundle.y.push(data.y);
        bundle.z.push(data.z);
        bundle.dw.push(data.dw);
    }
    Ok(bundle)
}

/// Simulates from `(problem.t0, problem.x0)`.
pub fn simulate_forward(
    problem: &ProblemSpec,
    field: &DecouplingField,
    epsilon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<TrajectoryBundle> {
    simulate_from(
        problem,
        field,
        epsilon,
        problem.t0,
        &problem.x0,
        n_paths,
        seed,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResidual {
    pub mean: f64,
    pub rms: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardResidual {
    pub steps: Vec<StepResidual>,
    /// `max_k |Y_{k,last} - h(X_{k,last})|`.
    pub terminal_mismatch: f64,
}

impl BackwardResidual {
    /// Root mean square over all paths and steps.
    pub fn overall_rms(&self) -> f64 {
        (self.steps.iter().map(|s| s.rms * s.rms).sum::<f64>() / self.steps.len() as f64).sqrt()
    }
}

/// Residual `Y_{j+1} - Y_j + g(t_j, X_j, Y_j, Z_j) Δt - Z_j ΔW_j` of the
/// discrete backward equation, summarized per step.
pub fn backward_residual(
    bundle: &TrajectoryBundle,
    problem: &ProblemSpec,
) -> Result<BackwardResidual> {
    let c = &problem.coefficients;
    let steps = bundle.n_nodes() - 1;
    let per_path: Vec<(Vec<f64>, f64)> = (0..bundle.n_paths())
        .into_par_iter()
        .map(|p| -> Result<(Vec<f64>, f64)> {
            let mut norms = Vec::with_capacity(steps);
            for j in 0..steps {
                let dt = bundle.t_nodes[j + 1] - bundle.t_nodes[j];
                let (x, y, z) = (bundle.x_at(p, j), bundle.y_at(p, j), bundle.z_at(p, j));
                let g = c.generator(bundle.t_nodes[j], &x, &y, &z)?;
                let r = bundle.y_at(p, j + 1) - &y + g * dt - &z * bundle.dw_at(p, j);
                norms.push(r.norm());
            }
            let last = bundle.n_nodes() - 1;
            let mismatch = (bundle.y_at(p, last) - c.terminal(&bundle.x_at(p, last))?).norm();
            Ok((norms, mismatch))
        })
        .collect::<Result<_>>()?;
    let count = per_path.len() as f64;
    let steps = (0..steps)
        .map(|j| {
            let (mut sum, mut sq, mut max) = (0.0, 0.0, 0.0_f64);
            for (norms, _) in &per_path {
                sum += norms[j];
                sq += norms[j] * norms[j];
                max = max.max(norms[j]);
            }
            StepResidual {
                mean: sum / count,
                rms: (sq / count).sqrt(),
                max,
            }
        })
        .collect();
    let terminal_mismatch = per_path.iter().map(|(_, m)| *m).fold(0.0, f64::max);
    Ok(BackwardResidual {
        steps,
        terminal_mismatch,
    })
}

/// Monte Carlo value of `Y(t)` from `h(X_T) + Σ g Δt` along paths started at `(t, x)`:
/// per-component mean and standard error.
pub fn probabilistic_value(
    problem: &ProblemSpec,
    field: &DecouplingField,
    t: f64,
    x: &Vector,
    n_paths: usize,
    seed: u64,
) -> Result<(Vector, Vector)> {
    if n_paths < 2 {
        return Err(Error::Config(
            "need at least two paths for a standard error".into(),
        ));
    }
    let bundle = simulate_from(problem, field, field.epsilon, t, x, n_paths, seed)?;
    let c = &problem.coefficients;
    let n = problem.n;
    let last = bundle.n_nodes() - 1;
    let samples: Vec<Vector> = (0..n_paths)
        .into_par_iter()
        .map(|p| -> Result<Vector> {
            let mut v = c.terminal(&bundle.x_at(p, last))?;
            for j in 0..last {
                let dt = bundle.t_nodes[j + 1] - bundle.t_nodes[j];
                v += c.generator(
                    bundle.t_nodes[j],
                    &bundle.x_at(p, j),
                    &bundle.y_at(p, j),
                    &bundle.z_at(p, j),
                )? * dt;
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;
    let m = n_paths as f64;
    let mean = samples.iter().fold(Vector::zeros(n), |acc, v| acc + v) / m;
    let var = samples
        .iter()
        .fold(Vector::zeros(n), |acc, v| acc + (v - &mean).map(|e| e * e))
        / (m - 1.0);
    Ok((mean, var.map(|v| (v / m).sqrt())))
}
