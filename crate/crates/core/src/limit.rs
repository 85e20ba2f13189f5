//! Deterministic limit system.
//!
//! At zero noise the pair `(X, Y)` solves the two-point problem
//!
//! ```text
//! X'(s) =  f(s, X, Y),        X(t) = x
//! Y'(s) = -g(s, X, Y, 0),     Y(T) = h(X(T))
//! ```
//!
//! and `u(t, x) = Y(t)` is the limit decoupling field. Two solvers are
//! provided: shooting on `Y(t)` with a fixed-step RK4 integrator, and
//! alternating forward/backward fixed-point sweeps.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::problem::ProblemSpec;
use crate::rng;
use crate::{FieldMap, Matrix, Vector};

/// Solver settings shared by both methods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BvpOptions {
    /// Target integrator step; the horizon is split into equal steps no longer than this.
    pub dt: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Weight of the new sweep in the fixed-point update of the `Y` path.
    pub relaxation: f64,
}

impl BvpOptions {
    pub fn new(dt: f64, tol: f64) -> Self {
        Self {
            dt,
            tol,
            max_iter: 50,
            relaxation: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BvpMethod {
    Shooting,
    Picard,
}

impl BvpMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            BvpMethod::Shooting => "shooting",
            BvpMethod::Picard => "picard",
        }
    }
}

/// Limit pair on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeSolution {
    pub t_nodes: Vec<f64>,
    pub x_values: Vec<Vector>,
    pub y_values: Vec<Vector>,
    /// `|Y(T) - h(X(T))|`.
    pub shooting_residual: f64,
    pub method: BvpMethod,
    pub iterations: usize,
}

impl OdeSolution {
    pub fn y_initial(&self) -> &Vector {
        &self.y_values[0]
    }
}

fn time_nodes(t: f64, horizon: f64, dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!(
            "integrator step must be positive, got {dt}"
        )));
    }
    if t > horizon {
        return Err(Error::Config(format!(
            "start time {t} lies after the horizon {horizon}"
        )));
    }
    let span = horizon - t;
    if span <= 1e-14 * horizon.abs().max(1.0) {
        return Ok(vec![horizon]);
    }
    // Round first so that a grid step reproduces the grid nodes exactly.
    let steps = ((span / dt) - 1e-9).ceil().max(1.0) as usize;
    let h = span / steps as f64;
    Ok((0..=steps)
        .map(|k| {
            if k == steps {
                horizon
            } else {
                t + k as f64 * h
            }
        })
        .collect())
}

/// A coefficient turning non-finite part-way through an integration means the
/// trajectory itself blew up.
fn blow_up(e: Error, time: f64) -> Error {
    match e {
        Error::Evaluation { map, input } => Error::Divergence {
            time,
            detail: format!("{map} became non-finite at {input}"),
        },
        other => other,
    }
}

fn finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

struct Coupled<'a> {
    problem: &'a ProblemSpec,
    zero: Matrix,
}

impl<'a> Coupled<'a> {
    fn new(problem: &'a ProblemSpec) -> Self {
        Self {
            problem,
            zero: problem.zero_z(),
        }
    }

    fn rhs(&self, s: f64, x: &Vector, y: &Vector) -> Result<(Vector, Vector)> {
        let c = &self.problem.coefficients;
        Ok((c.drift(s, x, y)?, -c.generator(s, x, y, &self.zero)?))
    }

    /// One classical RK4 step of the coupled pair.
    fn rk4(&self, s: f64, h: f64, x: &Vector, y: &Vector) -> Result<(Vector, Vector)> {
        let (k1x, k1y) = self.rhs(s, x, y)?;
        let (k2x, k2y) = self.rhs(s + 0.5 * h, &(x + 0.5 * h * &k1x), &(y + 0.5 * h * &k1y))?;
        let (k3x, k3y) = self.rhs(s + 0.5 * h, &(x + 0.5 * h * &k2x), &(y + 0.5 * h * &k2y))?;
        let (k4x, k4y) = self.rhs(s + h, &(x + h * &k3x), &(y + h * &k3y))?;
        Ok((
            x + h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x),
            y + h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y),
        ))
    }

    fn integrate(
        &self,
        nodes: &[f64],
        x: &Vector,
        eta: &Vector,
    ) -> Result<(Vec<Vector>, Vec<Vector>)> {
        let mut xs = Vec::with_capacity(nodes.len());
        let mut ys = Vec::with_capacity(nodes.len());
        xs.push(x.clone());
        ys.push(eta.clone());
        for w in nodes.windows(2) {
            let (nx, ny) = self
                .rk4(w[0], w[1] - w[0], xs.last().unwrap(), ys.last().unwrap())
                .map_err(|e| blow_up(e, w[0]))?;
            if !finite(&nx) || !finite(&ny) {
                return Err(Error::Divergence {
                    time: w[1],
                    detail: "non-finite state during forward integration".into(),
                });
            }
            xs.push(nx);
            ys.push(ny);
        }
        Ok((xs, ys))
    }

    fn mismatch(
        &self,
        nodes: &[f64],
        x: &Vector,
        eta: &Vector,
    ) -> Result<(Vector, Vec<Vector>, Vec<Vector>)> {
        let (xs, ys) = self.integrate(nodes, x, eta)?;
        let r = ys.last().unwrap() - self.problem.coefficients.terminal(xs.last().unwrap())?;
        Ok((r, xs, ys))
    }
}

/// Shooting on the initial value `eta = Y(t)`.
///
/// Secant iteration for `n = 1`, Newton with a forward-difference Jacobian
/// otherwise; each update is halved until the terminal mismatch decreases.
/// The initial guess is `eta = h(x)`.
pub fn solve_bvp_shooting(
    problem: &ProblemSpec,
    t: f64,
    x: &Vector,
    opts: &BvpOptions,
) -> Result<OdeSolution> {
    if !(opts.tol > 0.0) {
        return Err(Error::Config("shooting tolerance must be positive".into()));
    }
    if x.len() != problem.n {
        return Err(Error::Shape(format!(
            "start state has dimension {}, expected {}",
            x.len(),
            problem.n
        )));
    }
    let nodes = time_nodes(t, problem.horizon, opts.dt)?;
    let sys = Coupled::new(problem);
    let mut eta = problem.coefficients.terminal(x)?;
    let (mut r, mut xs, mut ys) = sys.mismatch(&nodes, x, &eta)?;
    let mut best = r.norm();
    let mut iterations = 0;
    // Previous point for the scalar secant update.
    let mut previous: Option<(Vector, Vector)> = None;

    while best > opts.tol {
        if iterations >= opts.max_iter {
            return Err(Error::Shooting {
                iterations,
                best_residual: best,
            });
        }
        iterations += 1;
        let step = if problem.n == 1 {
            let slope = match &previous {
                Some((eta_prev, r_prev))
                    if (eta[0] - eta_prev[0]) != 0.0 && (r[0] - r_prev[0]) != 0.0 =>
                {
                    (r[0] - r_prev[0]) / (eta[0] - eta_prev[0])
                }
                _ => {
                    let delta = 1e-6 * (1.0 + eta[0].abs());
                    let mut bumped = eta.clone();
                    bumped[0] += delta;
                    let (rb, _, _) = sys.mismatch(&nodes, x, &bumped)?;
                    (rb[0] - r[0]) / delta
                }
            };
            if slope == 0.0 || !slope.is_finite() {
                return Err(Error::Shooting {
                    iterations,
                    best_residual: best,
                });
            }
            Vector::from_element(1, -r[0] / slope)
        } else {
            let n = problem.n;
            let mut jac = Matrix::zeros(n, n);
            for j in 0..n {
                let delta = 1e-7 * (1.0 + eta[j].abs());
                let mut bumped = eta.clone();
                bumped[j] += delta;
                let (rb, _, _) = sys.mismatch(&nodes, x, &bumped)?;
                jac.set_column(j, &((rb - &r) / delta));
            }
            match jac.lu().solve(&(-&r)) {
                Some(s) => s,
                None => {
                    return Err(Error::Shooting {
                        iterations,
                        best_residual: best,
                    })
                }
            }
        };

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let candidate = &eta + scale * &step;
            match sys.mismatch(&nodes, x, &candidate) {
                Ok((rc, xc, yc)) if rc.norm() < best => {
                    accepted = Some((candidate, rc, xc, yc));
                    break;
                }
                Ok(_) | Err(Error::Divergence { .. }) | Err(Error::Evaluation { .. }) => {
                    scale *= 0.5
                }
                Err(e) => return Err(e),
            }
        }
        let Some((candidate, rc, xc, yc)) = accepted else {
            return Err(Error::Shooting {
                iterations,
                best_residual: best,
            });
        };
        previous = Some((eta, r));
        eta = candidate;
        r = rc;
        xs = xc;
        ys = yc;
        best = r.norm();
    }

    Ok(OdeSolution {
        t_nodes: nodes,
        x_values: xs,
        y_values: ys,
        shooting_residual: best,
        method: BvpMethod::Shooting,
        iterations,
    })
}

/// Value of a grid path at the midpoint of interval `j`, fourth-order accurate.
fn midpoint(path: &[Vector], j: usize) -> Vector {
    let n = path.len() - 1;
    match n {
        0 => path[0].clone(),
        1 | 2 => 0.5 * (&path[j] + &path[j + 1]),
        _ => {
            if j == 0 {
                (5.0 * &path[0] + 15.0 * &path[1] - 5.0 * &path[2] + &path[3]) / 16.0
            } else if j + 1 == n {
                (&path[n - 3] - 5.0 * &path[n - 2] + 15.0 * &path[n - 1] + 5.0 * &path[n]) / 16.0
            } else {
                (-&path[j - 1] + 9.0 * &path[j] + 9.0 * &path[j + 1] - &path[j + 2]) / 16.0
            }
        }
    }
}

/// Alternating fixed-point sweeps: integrate `X` forward given the current
/// `Y` path, then `Y` backward from `h(X(T))` given that `X` path, until the
/// swept `Y` path agrees with its input to `tol` in sup norm. The next input
/// is `(1 - ω) Y + ω sweep(Y)` with `ω = opts.relaxation`; plain alternation
/// (`ω = 1`) already fails to contract for the linear set at `T = 0.5`.
///
/// Three consecutive increases of the sweep difference raise
/// [`Error::Contraction`], which is the practical signal that the horizon is
/// too long for the coupling strength.
pub fn solve_bvp_picard(
    problem: &ProblemSpec,
    t: f64,
    x: &Vector,
    opts: &BvpOptions,
) -> Result<OdeSolution> {
    if !(opts.tol > 0.0) {
        return Err(Error::Config(
            "fixed-point tolerance must be positive".into(),
        ));
    }
    if !(opts.relaxation > 0.0 && opts.relaxation <= 1.0) {
        return Err(Error::Config(format!(
            "relaxation {} outside (0, 1]",
            opts.relaxation
        )));
    }
    if x.len() != problem.n {
        return Err(Error::Shape(format!(
            "start state has dimension {}, expected {}",
            x.len(),
            problem.n
        )));
    }
    let c = &problem.coefficients;
    let zero = problem.zero_z();
    let nodes = time_nodes(t, problem.horizon, opts.dt)?;
    let n_int = nodes.len() - 1;
    let h0 = c.terminal(x)?;
    let mut ys: Vec<Vector> = vec![h0; nodes.len()];
    let mut xs: Vec<Vector> = vec![x.clone(); nodes.len()];
    let mut last_diff = f64::INFINITY;
    let mut increases = 0;

    for sweep in 1..=opts.max_iter {
        // Forward sweep for X with Y frozen.
        let mut new_x = Vec::with_capacity(nodes.len());
        new_x.push(x.clone());
        for j in 0..n_int {
            let (s, h) = (nodes[j], nodes[j + 1] - nodes[j]);
            let ym = midpoint(&ys, j);
            let xj = &new_x[j];
            let k1 = c.drift(s, xj, &ys[j])?;
            let k2 = c.drift(s + 0.5 * h, &(xj + 0.5 * h * &k1), &ym)?;
            let k3 = c.drift(s + 0.5 * h, &(xj + 0.5 * h * &k2), &ym)?;
            let k4 = c.drift(s + h, &(xj + h * &k3), &ys[j + 1])?;
            let next = xj + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if !finite(&next) {
                return Err(Error::Divergence {
                    time: nodes[j + 1],
                    detail: "non-finite X during forward sweep".into(),
                });
            }
            new_x.push(next);
        }
        // Backward sweep for Y with X frozen.
        let mut new_y = vec![Vector::zeros(problem.n); nodes.len()];
        new_y[n_int] = c.terminal(&new_x[n_int])?;
        for j in (0..n_int).rev() {
            let (s, h) = (nodes[j + 1], nodes[j] - nodes[j + 1]);
            let xm = midpoint(&new_x, j);
            let yj = new_y[j + 1].clone();
            let rhs = |s: f64, xv: &Vector, yv: &Vector| -> Result<Vector> {
                Ok(-c.generator(s, xv, yv, &zero)?)
            };
            let k1 = rhs(s, &new_x[j + 1], &yj)?;
            let k2 = rhs(s + 0.5 * h, &xm, &(&yj + 0.5 * h * &k1))?;
            let k3 = rhs(s + 0.5 * h, &xm, &(&yj + 0.5 * h * &k2))?;
            let k4 = rhs(s + h, &new_x[j], &(&yj + h * &k3))?;
            let next = &yj + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if !finite(&next) {
                return Err(Error::Divergence {
                    time: nodes[j],
                    detail: "non-finite Y during backward sweep".into(),
                });
            }
            new_y[j] = next;
        }
        let diff = ys
            .iter()
            .zip(&new_y)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        xs = new_x;
        if diff < opts.tol {
            ys = new_y;
            let residual = (ys[n_int].clone() - c.terminal(&xs[n_int])?).norm();
            return Ok(OdeSolution {
                t_nodes: nodes,
                x_values: xs,
                y_values: ys,
                shooting_residual: residual,
                method: BvpMethod::Picard,
                iterations: sweep,
            });
        }
        let w = opts.relaxation;
        ys = ys
            .iter()
            .zip(&new_y)
            .map(|(a, b)| (1.0 - w) * a + w * b)
            .collect();
        if diff > last_diff {
            increases += 1;
            if increases >= 3 {
                return Err(Error::Contraction {
                    sweeps: sweep,
                    residual: diff,
                });
            }
        } else {
            increases = 0;
        }
        last_diff = diff;
    }
    Err(Error::Contraction {
        sweeps: opts.max_iter,
        residual: last_diff,
    })
}

/// Limit field `u(t, x) = Y(t)` evaluated by shooting.
pub fn limit_u(problem: &ProblemSpec, t: f64, x: &Vector, opts: &BvpOptions) -> Result<Vector> {
    Ok(solve_bvp_shooting(problem, t, x, opts)?
        .y_values
        .swap_remove(0))
}

/// The limit field as a [`FieldMap`], one shooting solve per query.
#[derive(Debug, Clone)]
pub struct ShootingField<'a> {
    pub problem: &'a ProblemSpec,
    pub opts: BvpOptions,
}

impl<'a> ShootingField<'a> {
    pub fn new(problem: &'a ProblemSpec, opts: BvpOptions) -> Self {
        Self { problem, opts }
    }
}

impl FieldMap for ShootingField<'_> {
    fn dim(&self) -> usize {
        self.problem.n
    }

    fn value(&self, t: f64, x: &Vector) -> Result<Vector> {
        limit_u(self.problem, t, x, &self.opts)
    }
}

/// Fitted constants of `|u(t',x') - u(t,x)|^2 <= alpha |x - x'|^2 + beta (1 + |x|^2) |t - t'|^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuityFit {
    pub alpha: f64,
    pub beta: f64,
    pub samples: usize,
}

/// Samples the space and time moduli of the limit field separately: `alpha`
/// from pairs sharing `t`, `beta` from pairs sharing `x`.
pub fn fit_uniform_continuity(
    problem: &ProblemSpec,
    opts: &BvpOptions,
    x_range: (f64, f64),
    samples: usize,
    seed: u64,
) -> Result<ContinuityFit> {
    let (t_lo, t_hi) = (problem.t0, problem.horizon);
    let quotients: Vec<(f64, f64)> = (0..samples)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64)> {
            let mut r = rng::stream(seed, i as u64);
            let t = rng::uniform(&mut r, t_lo, t_hi);
            let t2 = rng::uniform(&mut r, t_lo, t_hi);
            let x = Vector::from_fn(problem.n, |_, _| rng::uniform(&mut r, x_range.0, x_range.1));
            let x2 = Vector::from_fn(problem.n, |_, _| rng::uniform(&mut r, x_range.0, x_range.1));
            let u = limit_u(problem, t, &x, opts)?;
            let space =
                (limit_u(problem, t, &x2, opts)? - &u).norm_squared() / (&x - &x2).norm_squared();
            let time = (limit_u(problem, t2, &x, opts)? - &u).norm_squared()
                / ((1.0 + x.norm_squared()) * (t - t2).powi(2));
            Ok((space, time))
        })
        .collect::<Result<_>>()?;
    let alpha = quotients
        .iter()
        .map(|q| q.0)
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let beta = quotients
        .iter()
        .map(|q| q.1)
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    Ok(ContinuityFit {
        alpha,
        beta,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{CoefficientSet, EvalBox};
    use crate::registry;

    fn problem(coeffs: CoefficientSet, horizon: f64, x0: f64) -> ProblemSpec {
        ProblemSpec::new(
            coeffs,
            1,
            0.0,
            horizon,
            Vector::from_element(1, x0),
            vec![0.5],
            EvalBox::cube((0.0, horizon), 1.0),
        )
        .unwrap()
    }

    fn v(x: f64) -> Vector {
        Vector::from_element(1, x)
    }

    #[test]
    fn linear_set_limit_path_is_exponential() {
        let p = problem(registry::linear(1, 2.0, 2.0, 1.0, 1.0), 0.5, 1.0);
        let sol = solve_bvp_shooting(&p, 0.0, &v(1.0), &BvpOptions::new(0.005, 1e-12)).unwrap();
        assert_eq!(sol.x_values[0][0], 1.0);
        assert!(sol.shooting_residual <= 1e-12);
        for ((t, x), y) in sol.t_nodes.iter().zip(&sol.x_values).zip(&sol.y_values) {
            let exact = (-2.0 * t).exp();
            assert!((x[0] - exact).abs() < 1e-9, "t={t}");
            assert!((y[0] - exact).abs() < 1e-9, "t={t}");
        }
        assert_eq!(sol.t_nodes.len(), 101);
    }

    #[test]
    fn zero_backward_data_decouples() {
        let coeffs = CoefficientSet::new(
            |_, x: &Vector, _| -x.clone(),
            |_, x: &Vector, _, _| Vector::zeros(x.len()),
            |_, _, _| Matrix::identity(1, 1),
            |x: &Vector| Vector::zeros(x.len()),
        );
        let p = problem(coeffs, 1.0, 2.0);
        let sol = solve_bvp_shooting(&p, 0.0, &v(2.0), &BvpOptions::new(0.01, 1e-12)).unwrap();
        for ((t, x), y) in sol.t_nodes.iter().zip(&sol.x_values).zip(&sol.y_values) {
            assert_eq!(y[0], 0.0);
            assert!((x[0] - 2.0 * (-t).exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn frozen_forward_matches_backward_ode_oracle() {
        // f = 0, g = cos(y) + x, h = x^2: X stays at x; Y solves a scalar backward ODE.
        let coeffs = CoefficientSet::new(
            |_, x: &Vector, _| Vector::zeros(x.len()),
            |s, x: &Vector, y: &Vector, _| Vector::from_element(1, y[0].cos() + x[0] + s),
            |_, _, _| Matrix::identity(1, 1),
            |x: &Vector| x.map(|v| v * v),
        );
        let p = problem(coeffs, 1.0, 0.7);
        let sol = solve_bvp_shooting(&p, 0.2, &v(0.7), &BvpOptions::new(0.01, 1e-12)).unwrap();
        // Oracle: explicit backward RK4 with a much finer step, no shooting.
        let rhs = |s: f64, y: f64| -(y.cos() + 0.7 + s);
        let steps = 8000;
        let h = (1.0 - 0.2) / steps as f64;
        let mut y = 0.49;
        let mut s = 1.0;
        for _ in 0..steps {
            let k1 = rhs(s, y);
            let k2 = rhs(s - 0.5 * h, y - 0.5 * h * k1);
            let k3 = rhs(s - 0.5 * h, y - 0.5 * h * k2);
            let k4 = rhs(s - h, y - h * k3);
            y -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            s -= h;
        }
        assert!(sol.x_values.iter().all(|x| x[0] == 0.7));
        assert!(
            (sol.y_values[0][0] - y).abs() < 1e-9,
            "{} vs {y}",
            sol.y_values[0][0]
        );
    }

    #[test]
    fn shooting_and_picard_agree() {
        let p = problem(registry::linear(1, 2.0, 2.0, 1.0, 1.0), 0.5, 1.0);
        let opts = BvpOptions::new(0.005, 1e-10);
        let a = solve_bvp_shooting(&p, 0.0, &v(1.0), &opts).unwrap();
        let b = solve_bvp_picard(
            &p,
            0.0,
            &v(1.0),
            &BvpOptions {
                max_iter: 500,
                ..opts
            },
        )
        .unwrap();
        assert_eq!(b.method, BvpMethod::Picard);
        let gap = a
            .y_values
            .iter()
            .zip(&b.y_values)
            .map(|(x, y)| (x - y).amax())
            .fold(0.0, f64::max);
        assert!(gap <= 2e-9, "gap {gap}");
    }

    #[test]
    fn tanh_coupled_picard_contracts_only_on_short_horizons() {
        let coeffs = registry::tanh_coupled(1, 1.0, 1.0, 1.0, 0.5, 1.0);
        let short = problem(coeffs.clone(), 0.5, 1.0);
        let opts = BvpOptions {
            max_iter: 500,
            ..BvpOptions::new(0.01, 1e-10)
        };
        let pic = solve_bvp_picard(&short, 0.0, &v(1.0), &opts).unwrap();
        let sho = solve_bvp_shooting(&short, 0.0, &v(1.0), &opts).unwrap();
        let gap = pic
            .y_values
            .iter()
            .zip(&sho.y_values)
            .map(|(x, y)| (x - y).amax())
            .fold(0.0, f64::max);
        assert!(gap < 1e-8, "gap {gap}");
        let long = problem(coeffs, 5.0, 1.0);
        let err = solve_bvp_picard(&long, 0.0, &v(1.0), &opts).unwrap_err();
        assert!(matches!(err, Error::Contraction { .. }), "{err:?}");
    }

    #[test]
    fn single_step_horizon() {
        let p = problem(registry::tanh_coupled(1, 1.0, 1.0, 1.0, 0.5, 1.0), 0.5, 1.0);
        let t = 0.5 - 1e-3;
        let x = v(0.3);
        let sol = solve_bvp_picard(&p, t, &x, &BvpOptions::new(1.0, 1e-12)).unwrap();
        assert_eq!(sol.t_nodes.len(), 2);
        let c = &p.coefficients;
        let hx = c.terminal(&x).unwrap();
        let x_end = &x + 1e-3 * c.drift(t, &x, &hx).unwrap();
        let g = c.generator(t, &x, &hx, &p.zero_z()).unwrap();
        let approx = c.terminal(&x_end).unwrap() + 1e-3 * g;
        assert!((sol.y_values[0][0] - approx[0]).abs() < 1e-5);
    }

    #[test]
    fn limit_u_is_identity_for_linear_set() {
        let p = problem(registry::linear(1, 2.0, 2.0, 1.0, 1.0), 0.5, 1.0);
        let opts = BvpOptions::new(0.005, 1e-12);
        for &(t, x) in &[(0.0, -1.3), (0.25, 0.4), (0.4999, 2.0)] {
            let u = limit_u(&p, t, &v(x), &opts).unwrap();
            assert!((u[0] - x).abs() < 1e-9);
        }
        assert_eq!(limit_u(&p, 0.5, &v(0.8), &opts).unwrap()[0], 0.8);
        let fit = fit_uniform_continuity(&p, &opts, (-1.0, 1.0), 50, 3).unwrap();
        assert!(fit.alpha <= 1.0 + 1e-6);
        assert!(fit.beta < 1e-6);
    }

    #[test]
    fn continuity_constants_are_stable_under_doubling() {
        let p = problem(registry::tanh_coupled(1, 1.0, 1.0, 1.0, 0.5, 1.0), 0.5, 1.0);
        let opts = BvpOptions::new(0.01, 1e-11);
        let a = fit_uniform_continuity(&p, &opts, (-1.0, 1.0), 200, 5).unwrap();
        let b = fit_uniform_continuity(&p, &opts, (-1.0, 1.0), 400, 5).unwrap();
        assert!(a.alpha > 0.0 && a.beta > 0.0);
        assert!((b.alpha / a.alpha - 1.0).abs() <= 0.2);
        assert!((b.beta / a.beta - 1.0).abs() <= 0.2);
    }

    #[test]
    fn shooting_failure_reports_best_residual() {
        let p = problem(registry::tanh_coupled(1, 1.0, 1.0, 1.0, 0.5, 1.0), 0.5, 1.0);
        let err = solve_bvp_shooting(
            &p,
            0.0,
            &v(1.0),
            &BvpOptions {
                max_iter: 3,
                ..BvpOptions::new(0.01, 1e-300)
            },
        )
        .unwrap_err();
        match err {
            Error::Shooting { best_residual, .. } => assert!(best_residual.is_finite()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn blow_up_is_a_divergence() {
        let coeffs = CoefficientSet::new(
            |_, x: &Vector, _| x.map(|v| v * v * v * 1e3),
            |_, x: &Vector, _, _| Vector::zeros(x.len()),
            |_, _, _| Matrix::identity(1, 1),
            |x: &Vector| x.clone(),
        );
        let p = problem(coeffs, 1.0, 5.0);
        let err = solve_bvp_shooting(&p, 0.0, &v(5.0), &BvpOptions::new(0.1, 1e-8)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err:?}");
    }

    #[test]
    fn two_dimensional_newton() {
        let p = ProblemSpec::new(
            registry::tanh_coupled(2, 1.0, 1.0, 1.0, 0.5, 1.0),
            2,
            0.0,
            0.5,
            Vector::from_vec(vec![0.5, -0.3]),
            vec![0.5],
            EvalBox::cube((0.0, 0.5), 1.0),
        )
        .unwrap();
        let opts = BvpOptions::new(0.01, 1e-11);
        let a = solve_bvp_shooting(&p, 0.0, &p.x0, &opts).unwrap();
        let b = solve_bvp_picard(
            &p,
            0.0,
            &p.x0,
            &BvpOptions {
                max_iter: 500,
                ..opts
            },
        )
        .unwrap();
        assert!((&a.y_values[0] - &b.y_values[0]).amax() < 1e-8);
    }
}
