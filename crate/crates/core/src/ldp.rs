//! Large-deviation action of the forward and backward components.
//!
//! For a path `φ` starting at `x0`, the forward action is
//! `I₁(φ) = inf ½ ∫ |ψ'|²` over controls with `φ' = f(φ, u(φ)) + σ(φ, u(φ)) ψ'`,
//! where `u` is the limit field. The backward action `I₂` of a `y`-path is
//! obtained by pulling it back through `x ↦ u(s, x)`.
//!
//! Paths are polylines on a uniform grid; on each interval the constraint is
//! imposed with trapezoidal averages of `f` and `σ`, and the control is the
//! least-squares solution of `σ̄ ψ̇ = Δφ/Δt − f̄`.

use rayon::prelude::*;

use crate::asymptotics::Lab;
use crate::error::{Error, Result};
use crate::problem::ProblemSpec;
use crate::rng::BrownianSource;
use crate::{FieldMap, GridPath, Matrix, Vector};

/// Piecewise-constant control derivative, one value in `ℝᵈ` per interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    pub t_nodes: Vec<f64>,
    pub psi_dot: Vec<Vector>,
}

impl ControlPath {
    /// `½ Σ |ψ̇_j|² Δt_j`.
    pub fn action(&self) -> f64 {
        0.5 * self
            .psi_dot
            .iter()
            .zip(self.t_nodes.windows(2))
            .map(|(p, t)| p.norm_squared() * (t[1] - t[0]))
            .sum::<f64>()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            t_nodes: self.t_nodes.clone(),
            psi_dot: self.psi_dot.iter().map(|p| c * p).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateResult {
    /// `f64::INFINITY` when the constraint set is empty.
    pub value: f64,
    pub control: Option<ControlPath>,
    pub feasible: bool,
    pub minimizing_path: Option<GridPath>,
    pub converged: bool,
    pub iterations: usize,
}

impl RateResult {
    fn infeasible(path: Option<GridPath>) -> Self {
        Self {
            value: f64::INFINITY,
            control: None,
            feasible: false,
            minimizing_path: path,
            converged: true,
            iterations: 0,
        }
    }
}

fn check_uniform(t: &[f64]) -> Result<f64> {
    let dt = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
    if t.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-9 * dt) {
        return Err(Error::Shape("path grid must be uniform".into()));
    }
    Ok(dt)
}

/// Control on one interval, or `None` when `r` is out of the range of `σ̄`.
fn interval_control(
    problem: &ProblemSpec,
    field: &dyn FieldMap,
    t: (f64, f64),
    a: &Vector,
    b: &Vector,
    tol: f64,
) -> Result<Option<Vector>> {
    let c = &problem.coefficients;
    let (ua, ub) = (field.value(t.0, a)?, field.value(t.1, b)?);
    let f = 0.5 * (c.drift(t.0, a, &ua)? + c.drift(t.1, b, &ub)?);
    let sigma: Matrix = 0.5 * (c.diffusion(t.0, a, &ua)? + c.diffusion(t.1, b, &ub)?);
    let r = (b - a) / (t.1 - t.0) - f;
    let psi = sigma
        .clone()
        .svd(true, true)
        .solve(&r, 1e-13)
        .map_err(|e| Error::Domain(format!("least-squares control failed: {e}")))?;
    let miss = (&sigma * &psi - &r).norm();
    Ok((miss <= tol * (1.0 + r.norm())).then_some(psi))
}

fn interval_action(
    problem: &ProblemSpec,
    field: &dyn FieldMap,
    t: (f64, f64),
    a: &Vector,
    b: &Vector,
    tol: f64,
) -> Result<f64> {
    Ok(match interval_control(problem, field, t, a, b, tol)? {
        Some(p) => 0.5 * p.norm_squared() * (t.1 - t.0),
        None => f64::INFINITY,
    })
}

/// Forward action of a grid path.
///
/// A path not starting at `problem.x0`, or with some interval residual outside
/// the range of `σ`, has infinite action.
pub fn action_i1(
    phi: &GridPath,
    field: &dyn FieldMap,
    problem: &ProblemSpec,
    tol: f64,
) -> Result<RateResult> {
    check_uniform(&phi.t_nodes)?;
    if phi.dim() != problem.n || field.dim() != problem.n {
        return Err(Error::Shape(
            "path, field and problem dimensions differ".into(),
        ));
    }
    if (&phi.values[0] - &problem.x0).amax() > tol {
        return Ok(RateResult::infeasible(Some(phi.clone())));
    }
    let controls: Vec<Option<Vector>> = (0..phi.len() - 1)
        .into_par_iter()
        .map(|j| {
            interval_control(
                problem,
                field,
                (phi.t_nodes[j], phi.t_nodes[j + 1]),
                &phi.values[j],
                &phi.values[j + 1],
                tol,
            )
        })
        .collect::<Result<_>>()?;
    if controls.iter().any(Option::is_none) {
        return Ok(RateResult::infeasible(Some(phi.clone())));
    }
    let control = ControlPath {
        t_nodes: phi.t_nodes.clone(),
        psi_dot: controls.into_iter().map(Option::unwrap).collect(),
    };
    Ok(RateResult {
        value: control.action(),
        control: Some(control),
        feasible: true,
        minimizing_path: Some(phi.clone()),
        converged: true,
        iterations: 0,
    })
}

/// Settings of the endpoint minimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimizeOptions {
    /// Stop when the sup norm of the gradient falls below this.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Range tolerance of the per-interval least-squares solve.
    pub range_tol: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-9,
            max_iter: 2000,
            range_tol: 1e-8,
        }
    }
}

/// Solves `(tridiag(-1, 2, -1) / Δt) p = g` for each component.
fn sobolev_precondition(grad: &[Vector], dt: f64) -> Vec<Vector> {
    let m = grad.len();
    let n = grad[0].len();
    let mut out = vec![Vector::zeros(n); m];
    for l in 0..n {
        let mut c = vec![0.0; m];
        let mut d: Vec<f64> = grad.iter().map(|g| g[l] * dt).collect();
        let mut b = 2.0;
        c[0] = -1.0 / b;
        d[0] /= b;
        for i in 1..m {
            b = 2.0 + c[i - 1];
            c[i] = -1.0 / b;
            d[i] = (d[i] + d[i - 1]) / b;
        }
        for i in (0..m - 1).rev() {
            d[i] -= c[i] * d[i + 1];
        }
        for i in 0..m {
            out[i][l] = d[i];
        }
    }
    out
}

/// Minimizes `I₁` over paths from `x0` to `target` on `t_nodes`, starting from `initial`.
///
/// Interior nodes are the unknowns. Each iteration takes the finite-difference
/// gradient, smooths it with the discrete `H¹` metric, and runs an Armijo
/// backtracking search; the trial step doubles after each accepted move.
/// Running out of iterations returns the current path with `converged = false`.
pub fn minimize_i1_from(
    problem: &ProblemSpec,
    field: &dyn FieldMap,
    initial: &GridPath,
    opts: &MinimizeOptions,
) -> Result<RateResult> {
    let dt = check_uniform(&initial.t_nodes)?;
    let t = &initial.t_nodes;
    let m = initial.len() - 1;
    if m < 2 {
        return Err(Error::Config(
            "minimization needs at least two intervals".into(),
        ));
    }
    if (&initial.values[0] - &problem.x0).amax() > opts.range_tol {
        return Err(Error::Config("initial path must start at x0".into()));
    }
    let n = problem.n;
    let mut path = initial.values.clone();
    let tol = opts.range_tol;
    let pieces = |p: &[Vector]| -> Result<Vec<f64>> {
        (0..m)
            .into_par_iter()
            .map(|j| interval_action(problem, field, (t[j], t[j + 1]), &p[j], &p[j + 1], tol))
            .collect()
    };
    let mut local = pieces(&path)?;
    let mut value: f64 = local.iter().sum();
    if !value.is_finite() {
        return Ok(RateResult::infeasible(Some(initial.clone())));
    }
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        let grad: Vec<Vector> = (1..m)
            .into_par_iter()
            .map(|j| -> Result<Vector> {
                let mut g = Vector::zeros(n);
                for l in 0..n {
                    let h = 1e-6 * (1.0 + path[j][l].abs());
                    let mut side = [0.0; 2];
                    for (s, sign) in [(0, 1.0), (1, -1.0)] {
                        let mut x = path[j].clone();
                        x[l] += sign * h;
                        side[s] = interval_action(
                            problem,
                            field,
                            (t[j - 1], t[j]),
                            &path[j - 1],
                            &x,
                            tol,
                        )? + interval_action(
                            problem,
                            field,
                            (t[j], t[j + 1]),
                            &x,
                            &path[j + 1],
                            tol,
                        )?;
                    }
                    g[l] = (side[0] - side[1]) / (2.0 * h);
                }
                Ok(g)
            })
            .collect::<Result<_>>()?;
        let gmax = grad.iter().map(|g| g.amax()).fold(0.0, f64::max);
        if !gmax.is_finite() {
            break;
        }
        if gmax < opts.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let dir = sobolev_precondition(&grad, dt);
        let slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g.dot(d)).sum();
        let mut accepted = false;
        for _ in 0..60 {
            let mut trial = path.clone();
            for j in 1..m {
                trial[j] -= step * &dir[j - 1];
            }
            if let Ok(tl) = pieces(&trial) {
                let tv: f64 = tl.iter().sum();
                if tv.is_finite() && tv <= value - 1e-4 * step * slope {
                    path = trial;
                    local = tl;
                    value = tv;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        step *= 2.0;
    }
    let _ = local;
    let result_path = GridPath::new(t.clone(), path)?;
    let mut result = action_i1(&result_path, field, problem, tol)?;
    result.converged = converged;
    result.iterations = iterations;
    Ok(result)
}

/// Straight-line start between `x0` and `target` on `intervals` equal steps of `[t0, T]`.
pub fn minimize_i1_endpoint(
    problem: &ProblemSpec,
    field: &dyn FieldMap,
    target: &Vector,
    intervals: usize,
    opts: &MinimizeOptions,
) -> Result<RateResult> {
    if target.len() != problem.n {
        return Err(Error::Shape("target has the wrong dimension".into()));
    }
    let (t0, t1) = (problem.t0, problem.horizon);
    let t: Vec<f64> = (0..=intervals)
        .map(|j| {
            if j == intervals {
                t1
            } else {
                t0 + (t1 - t0) * j as f64 / intervals as f64
            }
        })
        .collect();
    let values = (0..=intervals)
        .map(|j| {
            let w = j as f64 / intervals as f64;
            (1.0 - w) * &problem.x0 + w * target
        })
        .collect();
    minimize_i1_from(problem, field, &GridPath::new(t, values)?, opts)
}

/// All preimages of `y` under `ξ ↦ u(s, ξ)` in `[lo, hi]` for `n = 1`, sorted.
fn preimages_1d(
    field: &dyn FieldMap,
    s: f64,
    y: f64,
    box_: (f64, f64),
    tol: f64,
) -> Result<Vec<f64>> {
    const SCAN: usize = 400;
    let xs: Vec<f64> = (0..=SCAN)
        .map(|i| box_.0 + (box_.1 - box_.0) * i as f64 / SCAN as f64)
        .collect();
    let vals: Vec<f64> = xs
        .par_iter()
        .map(|&x| Ok(field.value(s, &Vector::from_element(1, x))?[0] - y))
        .collect::<Result<_>>()?;
    let eval = |x: f64| -> Result<f64> { Ok(field.value(s, &Vector::from_element(1, x))?[0] - y) };
    let mut roots = Vec::new();
    for i in 0..SCAN {
        let (fa, fb) = (vals[i], vals[i + 1]);
        if fa == 0.0 {
            roots.push(xs[i]);
            continue;
        }
        if i + 1 == SCAN && fb == 0.0 {
            roots.push(xs[i + 1]);
        }
        if fa * fb >= 0.0 {
            continue;
        }
        let (mut a, mut b, mut va, mut vb) = (xs[i], xs[i + 1], fa, fb);
        for _ in 0..200 {
            if (b - a)
                <= tol
                    .min(1e-15 * (1.0 + a.abs()))
                    .max(f64::EPSILON * (1.0 + a.abs()))
            {
                break;
            }
            let mid = 0.5 * (a + b);
            let vm = eval(mid)?;
            if vm == 0.0 {
                a = mid;
                b = mid;
                va = 0.0;
                vb = 0.0;
                break;
            }
            if vm * va < 0.0 {
                b = mid;
                vb = vm;
            } else {
                a = mid;
                va = vm;
            }
        }
        // Secant polish inside the final bracket.
        let root = if va == vb {
            a
        } else {
            (a * vb - b * va) / (vb - va)
        };
        roots.push(root.clamp(a.min(b), a.max(b)));
    }
    Ok(roots)
}

/// Newton solve of `u(s, ξ) = y` from `guess`, finite-difference Jacobian.
fn preimage_newton(
    field: &dyn FieldMap,
    s: f64,
    y: &Vector,
    guess: &Vector,
    tol: f64,
) -> Result<Option<Vector>> {
    let n = y.len();
    let mut x = guess.clone();
    for _ in 0..50 {
        let r = match field.value(s, &x) {
            Ok(v) => v - y,
            Err(_) => return Ok(None),
        };
        if r.norm() <= tol {
            return Ok(Some(x));
        }
        let mut jac = Matrix::zeros(n, n);
        for j in 0..n {
            let h = 1e-7 * (1.0 + x[j].abs());
            let mut xp = x.clone();
            xp[j] += h;
            let Ok(up) = field.value(s, &xp) else {
                return Ok(None);
            };
            jac.set_column(j, &((up - y - &r) / h));
        }
        let Some(step) = jac.lu().solve(&r) else {
            return Ok(None);
        };
        x -= step;
    }
    Ok(None)
}

/// Backward action of a `y`-path: the least forward action among `x`-paths
/// with `u(s, x(s)) = φ_Y(s)`, preimages searched in `search_box` per axis.
///
/// In one dimension all preimage branches are found by scanning and
/// bisection; a branch is continued node to node by the nearest preimage,
/// and ties between equal actions go to the lowest (leftmost) branch. More
/// than eight branches at a node raise [`Error::BranchExplosion`]. In two
/// dimensions a single branch is followed by Newton's method from the
/// previous node.
pub fn action_i2(
    phi_y: &GridPath,
    problem: &ProblemSpec,
    field: &dyn FieldMap,
    search_box: (f64, f64),
    tol: f64,
) -> Result<RateResult> {
    check_uniform(&phi_y.t_nodes)?;
    if phi_y.dim() != problem.n {
        return Err(Error::Shape("path and problem dimensions differ".into()));
    }
    let t = &phi_y.t_nodes;
    let root_tol = tol.min(1e-12);
    let candidates: Vec<Vec<Vector>> = if problem.n == 1 {
        let branches: Vec<Vec<f64>> = (0..phi_y.len())
            .map(|j| preimages_1d(field, t[j], phi_y.values[j][0], search_box, root_tol))
            .collect::<Result<_>>()?;
        for (j, b) in branches.iter().enumerate() {
            if b.len() > 8 {
                return Err(Error::BranchExplosion {
                    count: b.len(),
                    time: t[j],
                });
            }
            if b.is_empty() {
                return Ok(RateResult::infeasible(None));
            }
        }
        (0..branches[0].len())
            .map(|start| {
                let mut current = branches[0][start];
                let mut xs = vec![Vector::from_element(1, current)];
                for b in &branches[1..] {
                    // Nearest preimage; the first (leftmost) wins ties.
                    let mut best = b[0];
                    for &c in &b[1..] {
                        if (c - current).abs() < (best - current).abs() {
                            best = c;
                        }
                    }
                    current = best;
                    xs.push(Vector::from_element(1, current));
                }
                xs
            })
            .collect()
    } else {
        let mut xs = Vec::with_capacity(phi_y.len());
        let mut guess = problem.x0.clone();
        for j in 0..phi_y.len() {
            match preimage_newton(field, t[j], &phi_y.values[j], &guess, root_tol)? {
                Some(x) => {
                    guess = x.clone();
                    xs.push(x);
                }
                None => return Ok(RateResult::infeasible(None)),
            }
        }
        vec![xs]
    };

    let mut best: Option<RateResult> = None;
    for mut xs in candidates {
        // The pullback of the starting value must be x0; snap within tolerance.
        if (&xs[0] - &problem.x0).amax() <= tol.max(1e-9) {
            xs[0] = problem.x0.clone();
        }
        let r = action_i1(&GridPath::new(t.clone(), xs)?, field, problem, tol)?;
        if best.as_ref().is_none_or(|b| r.value < b.value) {
            best = Some(r);
        }
    }
    Ok(best.unwrap_or_else(|| RateResult::infeasible(None)))
}

/// One entry of an empirical rate curve.
#[derive(Debug, Clone, PartialEq)]
pub struct LdpPoint {
    pub epsilon: f64,
    /// `P̂(sup |X^ε - φ| ≤ δ)`; for censored entries, the `1 / n_paths` upper bound.
    pub probability: f64,
    pub std_error: f64,
    pub hits: usize,
    pub censored: bool,
    /// `ε log P̂`.
    pub scaled_log: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdpCurve {
    pub points: Vec<LdpPoint>,
    /// `-inf I₁` over the `δ`-tube around `φ`, by endpoint relaxation.
    pub prediction: f64,
    /// Whether the path realizing the prediction stays inside the tube.
    pub prediction_in_tube: bool,
    pub tilted: bool,
}

fn tube_distance(a: &GridPath, b: &GridPath) -> f64 {
    a.values
        .iter()
        .zip(&b.values)
        .map(|(u, v)| (u - v).norm())
        .fold(0.0, f64::max)
}

/// Endpoint probes on the sphere of radius `delta` around `centre`, plus the
/// projection of `free_end` onto that ball.
fn ball_probes(centre: &Vector, free_end: &Vector, delta: f64) -> Vec<Vector> {
    let n = centre.len();
    let mut probes = Vec::new();
    let gap = free_end - centre;
    if gap.norm() > delta {
        probes.push(centre + &gap * (delta / gap.norm()));
    }
    if n == 1 {
        probes.push(centre.add_scalar(-delta));
        probes.push(centre.add_scalar(delta));
    } else {
        for k in 0..8 {
            let a = std::f64::consts::PI * k as f64 / 4.0;
            let mut v = centre.clone();
            v[0] += delta * a.cos();
            v[1] += delta * a.sin();
            probes.push(v);
        }
    }
    probes
}

/// Variational prediction `-inf I₁` over the tube `{ψ : sup |ψ - φ| ≤ δ}`,
/// with the control realizing it (absent when the limit path is in the tube).
pub fn tube_prediction(
    lab: &Lab,
    limit_field: &dyn FieldMap,
    phi: &GridPath,
    delta: f64,
    opts: &MinimizeOptions,
) -> Result<(f64, bool, Option<ControlPath>)> {
    let limit = lab.limit_path()?;
    let limit_path = GridPath::new(limit.t_nodes.clone(), limit.x_values.clone())?;
    if phi.len() != limit_path.len()
        || phi
            .t_nodes
            .iter()
            .zip(&limit_path.t_nodes)
            .any(|(a, b)| (a - b).abs() > 1e-9)
    {
        return Err(Error::Shape("path must live on the lab's time grid".into()));
    }
    if tube_distance(phi, &limit_path) <= delta {
        return Ok((0.0, true, None));
    }
    let end = phi.len() - 1;
    let mut best: Option<(f64, bool, ControlPath)> = None;
    for probe in ball_probes(&phi.values[end], &limit_path.values[end], delta) {
        let shift = &probe - &phi.values[end];
        let start = GridPath::new(
            phi.t_nodes.clone(),
            phi.values
                .iter()
                .enumerate()
                .map(|(j, v)| v + &shift * (j as f64 / end as f64))
                .collect(),
        )?;
        let r = minimize_i1_from(&lab.problem, limit_field, &start, opts)?;
        let (Some(path), Some(control)) = (r.minimizing_path, r.control) else {
            continue;
        };
        if best.as_ref().is_none_or(|b| r.value < b.0) {
            best = Some((
                r.value,
                tube_distance(&path, phi) <= delta * (1.0 + 1e-9),
                control,
            ));
        }
    }
    match best {
        Some((v, inside, c)) => Ok((-v, inside, Some(c))),
        None => Err(Error::Domain(
            "no feasible endpoint probe on the tube boundary".into(),
        )),
    }
}

/// Monte Carlo estimate of `P(sup |X^ε - φ| ≤ δ)` for each `ε`, optionally
/// importance-sampled by tilting the noise with `θ = ψ̇ / √ε` (the control
/// realizing the prediction) and reweighting by the likelihood ratio.
#[allow(clippy::too_many_arguments)]
pub fn empirical_ldp_curve(
    lab: &Lab,
    limit_field: &dyn FieldMap,
    phi: &GridPath,
    delta: f64,
    epsilons: &[f64],
    n_paths: usize,
    seed: u64,
    tilt: bool,
    opts: &MinimizeOptions,
) -> Result<LdpCurve> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!(
            "delta must be positive, got {delta}"
        )));
    }
    if n_paths < 2 {
        return Err(Error::Config("need at least two paths".into()));
    }
    let grid = &lab.grid;
    let (safe_lo, safe_hi) = grid.safe_interval();
    if phi
        .values
        .iter()
        .any(|v| v.iter().any(|c| c - delta < safe_lo || c + delta > safe_hi))
    {
        return Err(Error::Config(
            "the tube must lie inside the field's safe region".into(),
        ));
    }
    let (prediction, inside, control) = tube_prediction(lab, limit_field, phi, delta, opts)?;
    let c = &lab.problem.coefficients;
    let d = lab.problem.d;
    let dt = grid.dt();
    let steps = grid.nt - 1;
    let mut points = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("epsilon {eps} must be positive")));
        }
        let field = lab.field(eps)?;
        let source = BrownianSource::new(seed, d, dt);
        let theta: Vec<Vector> = match (&control, tilt) {
            (Some(ctrl), true) => ctrl.psi_dot.iter().map(|p| p / eps.sqrt()).collect(),
            _ => vec![Vector::zeros(d); steps],
        };
        let weights: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|p| -> Result<f64> {
                let mut cursor = source.cursor(p as u64, 0);
                let mut x = lab.problem.x0.clone();
                let mut log_w = 0.0;
                for j in 0..steps {
                    let t = grid.t_node(j);
                    let (y, _) = field.interpolate(j, &x)?;
                    let sigma = c.diffusion(t, &x, &y)?;
                    let dw = cursor.next_increment();
                    let th = &theta[j];
                    x = &x + c.drift(t, &x, &y)? * dt + eps.sqrt() * &sigma * (&dw + th * dt);
                    log_w -= th.dot(&dw) + 0.5 * th.norm_squared() * dt;
                    if (&x - &phi.values[j + 1]).norm() > delta {
                        return Ok(0.0);
                    }
                }
                Ok(log_w.exp())
            })
            .collect::<Result<_>>()?;
        let hits = weights.iter().filter(|w| **w > 0.0).count();
        let m = n_paths as f64;
        let mean = weights.iter().sum::<f64>() / m;
        let var = weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (m - 1.0);
        let censored = hits == 0;
        let probability = if censored { 1.0 / m } else { mean };
        points.push(LdpPoint {
            epsilon: eps,
            probability,
            std_error: (var / m).sqrt(),
            hits,
            censored,
            scaled_log: eps * probability.ln(),
        });
    }
    if points.iter().all(|p| p.censored) {
        return Err(Error::NoHits(format!(
            "no path stayed within {delta} of the target path at any epsilon; enlarge delta or enable tilting"
        )));
    }
    Ok(LdpCurve {
        points,
        prediction,
        prediction_in_tube: inside,
        tilted: tilt && control.is_some(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::limit::{BvpOptions, ShootingField};
    use crate::pde::{FieldOptions, SpaceTimeGrid};
    use crate::problem::{CoefficientSet, EvalBox};
    use crate::registry;
    use proptest::prelude::*;

    fn linear() -> ProblemSpec {
        ProblemSpec::new(
            registry::linear(1, 2.0, 2.0, 1.0, 1.0),
            1,
            0.0,
            0.5,
            Vector::from_element(1, 1.0),
            vec![0.5],
            EvalBox::cube((0.0, 0.5), 1.0),
        )
        .unwrap()
    }

    fn grid_times(m: usize) -> Vec<f64> {
        (0..=m).map(|j| 0.5 * j as f64 / m as f64).collect()
    }

    fn path(values: Vec<f64>) -> GridPath {
        let m = values.len() - 1;
        GridPath::new(
            grid_times(m),
            values
                .into_iter()
                .map(|v| Vector::from_element(1, v))
                .collect(),
        )
        .unwrap()
    }

    /// `min ½∫ψ'² s.t. φ' = -aφ + σψ', φ(0) = x0, φ(T) = y`.
    fn lq_oracle(a: f64, sigma: f64, x0: f64, y: f64, horizon: f64) -> f64 {
        let w = sigma * sigma * (1.0 - (-2.0 * a * horizon).exp()) / (2.0 * a);
        0.5 * (y - x0 * (-a * horizon).exp()).powi(2) / w
    }

    #[test]
    fn constant_path_action_is_closed_form() {
        let p = linear();
        let field = ShootingField::new(&p, BvpOptions::new(0.5 / 64.0, 1e-12));
        let r = action_i1(&path(vec![1.0; 65]), &field, &p, 1e-8).unwrap();
        assert!(r.feasible);
        assert!((r.value - 1.0).abs() < 1e-12, "{}", r.value);
        let ctrl = r.control.unwrap();
        assert!(ctrl.psi_dot.iter().all(|v| (v[0] - 2.0).abs() < 1e-12));
    }

    #[test]
    fn limit_path_has_zero_action() {
        let p = linear();
        let values: Vec<f64> = grid_times(64).iter().map(|t| (-2.0 * t).exp()).collect();
        let field = ShootingField::new(&p, BvpOptions::new(0.5 / 64.0, 1e-12));
        let r = action_i1(&path(values), &field, &p, 1e-8).unwrap();
        assert!(r.value <= 1e-8, "{}", r.value);
    }

    #[test]
    fn wrong_start_or_empty_range_is_infinite() {
        let p = linear();
        let field = ShootingField::new(&p, BvpOptions::new(0.01, 1e-12));
        assert_eq!(
            action_i1(&path(vec![0.5; 11]), &field, &p, 1e-8)
                .unwrap()
                .value,
            f64::INFINITY
        );
        let frozen = ProblemSpec::new(
            CoefficientSet::new(
                |_, _, y: &Vector| -2.0 * y,
                |_, x: &Vector, _, _| 2.0 * x,
                |_, _, _| Matrix::zeros(1, 1),
                |x: &Vector| x.clone(),
            ),
            1,
            0.0,
            0.5,
            Vector::from_element(1, 1.0),
            vec![0.5],
            EvalBox::cube((0.0, 0.5), 1.0),
        )
        .unwrap();
        let field = ShootingField::new(&frozen, BvpOptions::new(0.05, 1e-12));
        let r = action_i1(&path(vec![1.0; 11]), &field, &frozen, 1e-8).unwrap();
        assert!(!r.feasible && r.value == f64::INFINITY);
    }

    #[test]
    fn endpoint_minimum_matches_lq_oracle() {
        let p = linear();
        let field = ShootingField::new(&p, BvpOptions::new(0.5 / 64.0, 1e-12));
        for &y in &[1.0, 0.2, -0.5] {
            let r = minimize_i1_endpoint(
                &p,
                &field,
                &Vector::from_element(1, y),
                64,
                &MinimizeOptions::default(),
            )
            .unwrap();
            let oracle = lq_oracle(2.0, 1.0, 1.0, y, 0.5);
            assert!(r.converged, "y={y} after {} iterations", r.iterations);
            assert!(
                (r.value / oracle - 1.0).abs() < 0.02,
                "y={y}: {} vs {oracle}",
                r.value
            );
            let again = action_i1(r.minimizing_path.as_ref().unwrap(), &field, &p, 1e-8).unwrap();
            assert_eq!(again.value, r.value);
        }
    }

    #[test]
    fn endpoint_minimum_at_limit_endpoint_is_zero() {
        let p = linear();
        let field = ShootingField::new(&p, BvpOptions::new(0.5 / 32.0, 1e-12));
        let r = minimize_i1_endpoint(
            &p,
            &field,
            &Vector::from_element(1, (-1.0_f64).exp()),
            32,
            &MinimizeOptions::default(),
        )
        .unwrap();
        assert!(r.value < 1e-6, "{}", r.value);
    }

    #[test]
    fn refinement_is_stable() {
        let p = linear();
        let target = Vector::from_element(1, 0.6);
        let coarse = ShootingField::new(&p, BvpOptions::new(0.5 / 32.0, 1e-12));
        let fine = ShootingField::new(&p, BvpOptions::new(0.5 / 64.0, 1e-12));
        let a =
            minimize_i1_endpoint(&p, &coarse, &target, 32, &MinimizeOptions::default()).unwrap();
        let b = minimize_i1_endpoint(&p, &fine, &target, 64, &MinimizeOptions::default()).unwrap();
        assert!((b.value / a.value - 1.0).abs() < 0.05);
        assert!(b.value <= a.value * 1.05);
    }

    #[test]
    fn backward_action_equals_forward_action_for_identity_field() {
        let p = linear();
        let field = ShootingField::new(&p, BvpOptions::new(0.5 / 16.0, 1e-12));
        let mut rng = crate::rng::stream(5, 0);
        for _ in 0..10 {
            let mut v = vec![1.0];
            for _ in 0..16 {
                let last = *v.last().unwrap();
                v.push(last + crate::rng::uniform(&mut rng, -0.2, 0.2));
            }
            let phi = path(v);
            let a = action_i1(&phi, &field, &p, 1e-8).unwrap().value;
            let b = action_i2(&phi, &p, &field, (-4.0, 4.0), 1e-8)
                .unwrap()
                .value;
            assert!((a - b).abs() <= 1e-12 * a.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn backward_action_of_limit_y_path_is_zero() {
        let p = ProblemSpec::new(
            registry::tanh_coupled(1, 1.0, 1.0, 1.0, 0.5, 1.0),
            1,
            0.0,
            0.5,
            Vector::from_element(1, 1.0),
            vec![0.5],
            EvalBox::cube((0.0, 0.5), 1.0),
        )
        .unwrap();
        let opts = BvpOptions::new(0.5 / 16.0, 1e-13);
        let sol = crate::limit::solve_bvp_shooting(&p, 0.0, &p.x0, &opts).unwrap();
        let field = ShootingField::new(&p, opts);
        let y = GridPath::new(sol.t_nodes.clone(), sol.y_values.clone()).unwrap();
        let r = action_i2(&y, &p, &field, (-3.0, 3.0), 1e-7).unwrap();
        assert!(r.value < 1e-8, "{}", r.value);
        let far = GridPath::new(
            sol.t_nodes.clone(),
            vec![Vector::from_element(1, 50.0); sol.t_nodes.len()],
        )
        .unwrap();
        assert!(
            !action_i2(&far, &p, &field, (-3.0, 3.0), 1e-7)
                .unwrap()
                .feasible
        );
    }

    #[test]
    fn many_preimages_explode() {
        struct Wiggly;
        impl FieldMap for Wiggly {
            fn dim(&self) -> usize {
                1
            }
            fn value(&self, _t: f64, x: &Vector) -> Result<Vector> {
                Ok(Vector::from_element(1, (5.0 * x[0]).sin()))
            }
        }
        let p = linear();
        let r = action_i2(&path(vec![0.1; 5]), &p, &Wiggly, (-4.0, 4.0), 1e-8);
        assert!(matches!(r, Err(Error::BranchExplosion { .. })));
    }

    #[test]
    fn two_branch_tie_breaks_leftmost() {
        // u(x) = x² has preimages ±√y; the path must start at x0 = 1, so the right branch wins.
        struct Square;
        impl FieldMap for Square {
            fn dim(&self) -> usize {
                1
            }
            fn value(&self, _t: f64, x: &Vector) -> Result<Vector> {
                Ok(Vector::from_element(1, x[0] * x[0]))
            }
        }
        let p = linear();
        let r = action_i2(&path(vec![1.0; 5]), &p, &Square, (-2.0, 2.0), 1e-8).unwrap();
        assert!(r.feasible);
        assert!(r
            .minimizing_path
            .unwrap()
            .values
            .iter()
            .all(|v| (v[0] - 1.0).abs() < 1e-9));
    }

    fn lab() -> Lab {
        let p = linear();
        let grid = SpaceTimeGrid::for_problem(&p, 65, -4.0, 4.0, 81).unwrap();
        Lab::new(p, grid, FieldOptions::default()).unwrap()
    }

    #[test]
    fn typical_tube_has_zero_prediction() {
        let lab = lab();
        let limit = lab.limit_path().unwrap();
        let phi = GridPath::new(limit.t_nodes.clone(), limit.x_values.clone()).unwrap();
        let field = lab.field(0.0).unwrap();
        let curve = empirical_ldp_curve(
            &lab,
            &*field,
            &phi,
            0.25,
            &[0.1, 0.05],
            2000,
            3,
            true,
            &MinimizeOptions::default(),
        )
        .unwrap();
        assert_eq!(curve.prediction, 0.0);
        for p in &curve.points {
            assert!(p.scaled_log <= 0.0 && p.scaled_log > -0.05);
        }
    }

    #[test]
    fn tilting_reduces_relative_error() {
        let lab = lab();
        let field = lab.field(0.0).unwrap();
        let t = lab.grid.t_nodes();
        let phi = GridPath::new(t.clone(), vec![Vector::from_element(1, 1.0); t.len()]).unwrap();
        let opts = MinimizeOptions::default();
        let crude =
            empirical_ldp_curve(&lab, &*field, &phi, 0.25, &[0.1], 4000, 7, false, &opts).unwrap();
        let tilted =
            empirical_ldp_curve(&lab, &*field, &phi, 0.25, &[0.1], 4000, 7, true, &opts).unwrap();
        assert!(crude.prediction < 0.0);
        let rel = |c: &LdpCurve| c.points[0].std_error / c.points[0].probability;
        assert!(tilted.points[0].hits > 0 && crude.points[0].hits > 0);
        assert!(
            rel(&tilted) < rel(&crude),
            "{} vs {}",
            rel(&tilted),
            rel(&crude)
        );
        // The two estimators target the same probability.
        let gap = (tilted.points[0].probability - crude.points[0].probability).abs();
        let se = (tilted.points[0].std_error.powi(2) + crude.points[0].std_error.powi(2)).sqrt();
        assert!(gap < 4.0 * se);
    }

    #[test]
    fn hopeless_tube_reports_no_hits() {
        let lab = lab();
        let field = lab.field(0.0).unwrap();
        let t = lab.grid.t_nodes();
        let phi = GridPath::new(
            t.clone(),
            t.iter()
                .map(|s| Vector::from_element(1, 1.0 + 1.5 * s))
                .collect(),
        )
        .unwrap();
        let r = empirical_ldp_curve(
            &lab,
            &*field,
            &phi,
            0.05,
            &[0.01],
            200,
            1,
            false,
            &MinimizeOptions::default(),
        );
        assert!(matches!(r, Err(Error::NoHits(_))), "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn action_is_nonnegative_and_quadratic_in_control(
            steps in proptest::collection::vec(-0.3f64..0.3, 8),
            c in prop_oneof![Just(2.0f64), Just(10.0f64)],
        ) {
            let p = linear();
            let field = ShootingField::new(&p, BvpOptions::new(0.5 / 8.0, 1e-12));
            let mut v = vec![1.0];
            for s in steps {
                let last = *v.last().unwrap();
                v.push(last + s);
            }
            let r = action_i1(&path(v), &field, &p, 1e-8).unwrap();
            prop_assert!(r.value >= 0.0);
            let ctrl = r.control.unwrap();
            let scaled = ctrl.scaled(c).action();
            prop_assert!((scaled - c * c * ctrl.action()).abs() <= 1e-12 * scaled.max(1.0));
        }
    }
}
