//! Grid solver for the decoupling field.
//!
//! `u^ε` solves, backward from `u(T, x) = h(x)`,
//!
//! ```text
//! ∂ₜu + g(t, x, u, √ε ∇u σ) + f(t, x, u)·∇u + (ε/2) Σᵢⱼ aᵢⱼ ∂ᵢⱼu = 0,   a = σσᵀ.
//! ```
//!
//! Each backward step freezes the coefficients at a Picard iterate, treats
//! advection (upwind) and source explicitly and the diagonal diffusion
//! implicitly. In two dimensions the mixed derivative is taken from the
//! iterate as well.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::limit::{self, BvpOptions};
use crate::problem::ProblemSpec;
use crate::{FieldMap, Matrix, Vector};

/// Uniform grid on `[t0, t_end] × [x_lo, x_hi]^dim`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceTimeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub nt: usize,
    pub x_lo: f64,
    pub x_hi: f64,
    pub nx: usize,
    pub dim: usize,
    /// Fraction of the box width kept clear of the boundary on each side.
    pub margin: f64,
}

impl SpaceTimeGrid {
    pub fn new(
        t0: f64,
        t_end: f64,
        nt: usize,
        x_lo: f64,
        x_hi: f64,
        nx: usize,
        dim: usize,
    ) -> Result<Self> {
        let grid = Self {
            t0,
            t_end,
            nt,
            x_lo,
            x_hi,
            nx,
            dim,
            margin: 0.25,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn with_margin(mut self, margin: f64) -> Result<Self> {
        self.margin = margin;
        self.validate()?;
        Ok(self)
    }

    /// Grid covering the problem's time interval.
    pub fn for_problem(
        problem: &ProblemSpec,
        nt: usize,
        x_lo: f64,
        x_hi: f64,
        nx: usize,
    ) -> Result<Self> {
        Self::new(problem.t0, problem.horizon, nt, x_lo, x_hi, nx, problem.n)
    }

    fn validate(&self) -> Result<()> {
        if self.nt < 2 || self.nx < 3 {
            return Err(Error::Config(format!(
                "grid needs N_t >= 2 and N_x >= 3, got {} and {}",
                self.nt, self.nx
            )));
        }
        if !(self.t_end > self.t0) || !(self.x_hi > self.x_lo) {
            return Err(Error::Config(
                "grid intervals must have positive length".into(),
            ));
        }
        if !(1..=2).contains(&self.dim) {
            return Err(Error::Config(format!(
                "grid dimension {} not supported (1 or 2)",
                self.dim
            )));
        }
        if !(0.0..0.5).contains(&self.margin) {
            return Err(Error::Config(format!(
                "margin fraction {} must lie in [0, 0.5)",
                self.margin
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / (self.nt - 1) as f64
    }

    pub fn dx(&self) -> f64 {
        (self.x_hi - self.x_lo) / (self.nx - 1) as f64
    }

    pub fn t_node(&self, k: usize) -> f64 {
        if k + 1 == self.nt {
            self.t_end
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn t_nodes(&self) -> Vec<f64> {
        (0..self.nt).map(|k| self.t_node(k)).collect()
    }

    pub fn x_coord(&self, i: usize) -> f64 {
        if i + 1 == self.nx {
            self.x_hi
        } else {
            self.x_lo + i as f64 * self.dx()
        }
    }

    pub fn node_count(&self) -> usize {
        self.nx.pow(self.dim as u32)
    }

    /// Per-axis indices of a flat node index (axis 0 varies fastest).
    pub fn axes(&self, node: usize) -> [usize; 2] {
        [node % self.nx, node / self.nx]
    }

    pub fn node_position(&self, node: usize) -> Vector {
        let ax = self.axes(node);
        Vector::from_fn(self.dim, |i, _| self.x_coord(ax[i]))
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        let ax = self.axes(node);
        (0..self.dim).any(|i| ax[i] == 0 || ax[i] + 1 == self.nx)
    }

    /// Interval kept clear of the boundary by the margin.
    pub fn safe_interval(&self) -> (f64, f64) {
        let w = self.margin * (self.x_hi - self.x_lo);
        (self.x_lo + w, self.x_hi - w)
    }

    pub fn in_safe_region(&self, x: &Vector) -> bool {
        let (lo, hi) = self.safe_interval();
        x.iter().all(|v| *v >= lo && *v <= hi)
    }

    /// Index of the time node nearest to `t`, or a domain error outside the grid.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        let slack = 1e-9 * self.dt();
        if !(t >= self.t0 - slack && t <= self.t_end + slack) {
            return Err(Error::Domain(format!(
                "time {t} outside grid [{}, {}]",
                self.t0, self.t_end
            )));
        }
        Ok((((t - self.t0) / self.dt()).round() as usize).min(self.nt - 1))
    }

    /// Left cell index and weight along one axis.
    fn locate(&self, v: f64) -> Option<(usize, f64)> {
        let slack = 1e-12 * (self.x_hi - self.x_lo);
        if !(v >= self.x_lo - slack && v <= self.x_hi + slack) {
            return None;
        }
        let s = (v - self.x_lo) / self.dx();
        let i = (s.floor().max(0.0) as usize).min(self.nx - 2);
        Some((i, (s - i as f64).clamp(0.0, 1.0)))
    }

    /// Interpolation stencil of `x`: node indices with weights.
    fn stencil(&self, x: &Vector) -> Option<Vec<(usize, f64)>> {
        if x.len() != self.dim {
            return None;
        }
        let (i0, w0) = self.locate(x[0])?;
        if self.dim == 1 {
            return Some(vec![(i0, 1.0 - w0), (i0 + 1, w0)]);
        }
        let (i1, w1) = self.locate(x[1])?;
        let nx = self.nx;
        Some(vec![
            (i0 + nx * i1, (1.0 - w0) * (1.0 - w1)),
            (i0 + 1 + nx * i1, w0 * (1.0 - w1)),
            (i0 + nx * (i1 + 1), (1.0 - w0) * w1),
            (i0 + 1 + nx * (i1 + 1), w0 * w1),
        ])
    }

    fn neighbour(&self, node: usize, axis: usize, up: bool) -> usize {
        let stride = if axis == 0 { 1 } else { self.nx };
        if up {
            node + stride
        } else {
            node - stride
        }
    }
}

/// How the truncation boundary is closed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryMode {
    /// Dirichlet values from the limit field, one shooting solve per boundary node.
    LimitField,
    /// Zero-noise transport update with one-sided differences.
    Characteristic,
}

impl BoundaryMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundaryMode::LimitField => "limit-field",
            BoundaryMode::Characteristic => "characteristic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOptions {
    pub picard_tol: f64,
    pub picard_max: usize,
    pub boundary: BoundaryMode,
}

impl Default for FieldOptions {
    fn default() -> Self {
        Self {
            picard_tol: 1e-10,
            picard_max: 50,
            boundary: BoundaryMode::LimitField,
        }
    }
}

/// Grid values of `u^ε` and of its spatial Jacobian.
///
/// `u[k][node * n + l]` is component `l` at time node `k`;
/// `grad[k][(node * n + l) * n + i]` is `∂u_l/∂x_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecouplingField {
    pub grid: SpaceTimeGrid,
    pub epsilon: f64,
    pub u: Vec<Vec<f64>>,
    pub grad: Vec<Vec<f64>>,
    /// `h` sampled at the nodes.
    pub terminal_data: Vec<f64>,
}

impl DecouplingField {
    pub fn n(&self) -> usize {
        self.grid.dim
    }

    pub fn value_at(&self, k: usize, node: usize) -> Vector {
        let n = self.n();
        Vector::from_row_slice(&self.u[k][node * n..(node + 1) * n])
    }

    pub fn gradient_at(&self, k: usize, node: usize) -> Matrix {
        let n = self.n();
        Matrix::from_row_slice(n, n, &self.grad[k][node * n * n..(node + 1) * n * n])
    }

    /// Interpolated value and Jacobian at time node `k`.
    pub fn interpolate(&self, k: usize, x: &Vector) -> Result<(Vector, Matrix)> {
        let n = self.n();
        let stencil = self.grid.stencil(x).ok_or_else(|| {
            Error::Domain(format!(
                "point {:?} outside the field box [{}, {}]",
                x.as_slice(),
                self.grid.x_lo,
                self.grid.x_hi
            ))
        })?;
        let mut u = Vector::zeros(n);
        let mut j = Matrix::zeros(n, n);
        for (node, w) in stencil {
            if w == 0.0 {
                continue;
            }
            u += w * self.value_at(k, node);
            j += w * self.gradient_at(k, node);
        }
        Ok((u, j))
    }
}

impl FieldMap for DecouplingField {
    fn dim(&self) -> usize {
        self.n()
    }

    fn value(&self, t: f64, x: &Vector) -> Result<Vector> {
        let k = self.grid.time_index(t)?;
        Ok(self.interpolate(k, x)?.0)
    }
}

fn check_problem_grid(problem: &ProblemSpec, grid: &SpaceTimeGrid) -> Result<()> {
    if grid.dim != problem.n {
        return Err(Error::Config(format!(
            "grid dimension {} differs from state dimension {}",
            grid.dim, problem.n
        )));
    }
    if (grid.t_end - problem.horizon).abs() > 1e-12 * problem.horizon.abs().max(1.0) {
        return Err(Error::Config(format!(
            "grid ends at {} but the horizon is {}",
            grid.t_end, problem.horizon
        )));
    }
    Ok(())
}

/// Central differences in the interior, one-sided at the boundary.
fn jacobian(grid: &SpaceTimeGrid, level: &[f64], n: usize, node: usize) -> Vec<f64> {
    let ax = grid.axes(node);
    let dx = grid.dx();
    let mut out = vec![0.0; n * n];
    for i in 0..grid.dim {
        let (lo, hi, span) = if ax[i] == 0 {
            (node, grid.neighbour(node, i, true), dx)
        } else if ax[i] + 1 == grid.nx {
            (grid.neighbour(node, i, false), node, dx)
        } else {
            (
                grid.neighbour(node, i, false),
                grid.neighbour(node, i, true),
                2.0 * dx,
            )
        };
        for l in 0..n {
            out[l * n + i] = (level[hi * n + l] - level[lo * n + l]) / span;
        }
    }
    out
}

fn full_jacobian(grid: &SpaceTimeGrid, level: &[f64], n: usize) -> Vec<f64> {
    (0..grid.node_count())
        .flat_map(|node| jacobian(grid, level, n, node))
        .collect()
}

/// Upwind derivative of component `l` along `axis` for velocity `v` in backward time.
fn upwind(
    grid: &SpaceTimeGrid,
    level: &[f64],
    n: usize,
    node: usize,
    axis: usize,
    l: usize,
    v: f64,
) -> f64 {
    let ax = grid.axes(node)[axis];
    let dx = grid.dx();
    let forward = (v > 0.0 && ax + 1 < grid.nx) || ax == 0;
    if forward {
        (level[grid.neighbour(node, axis, true) * n + l] - level[node * n + l]) / dx
    } else {
        (level[node * n + l] - level[grid.neighbour(node, axis, false) * n + l]) / dx
    }
}

fn mixed_second(grid: &SpaceTimeGrid, level: &[f64], n: usize, node: usize, l: usize) -> f64 {
    let nx = grid.nx;
    let dx = grid.dx();
    let at = |off0: isize, off1: isize| {
        let idx = node as isize + off0 + off1 * nx as isize;
        level[idx as usize * n + l]
    };
    (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4.0 * dx * dx)
}

fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) {
    let m = diag.len();
    let mut c = vec![0.0; m];
    let mut b = diag[0];
    c[0] = upper[0] / b;
    rhs[0] /= b;
    for i in 1..m {
        b = diag[i] - lower[i] * c[i - 1];
        c[i] = upper[i] / b;
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / b;
    }
    for i in (0..m - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
}

/// Frozen coefficients at one node.
struct NodeCoeffs {
    drift: Vector,
    source: Vector,
    diffusion: Matrix,
}

/// Solves for `u^ε` on `grid`, backward from `h`.
///
/// `epsilon = 0` gives the limit field. Fails with a configuration error when
/// `Δt · max|f(T, x, h(x))| > Δx`, and with a Picard error when a step does not
/// settle within `opts.picard_max` iterations.
pub fn solve_parabolic(
    problem: &ProblemSpec,
    epsilon: f64,
    grid: &SpaceTimeGrid,
    opts: &FieldOptions,
) -> Result<DecouplingField> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [0, 1]")));
    }
    check_problem_grid(problem, grid)?;
    let c = &problem.coefficients;
    let n = problem.n;
    let nodes = grid.node_count();
    let (dt, dx) = (grid.dt(), grid.dx());
    let positions: Vec<Vector> = (0..nodes).map(|node| grid.node_position(node)).collect();

    let mut terminal = Vec::with_capacity(nodes * n);
    for x in &positions {
        terminal.extend(c.terminal(x)?.iter());
    }
    let mut max_speed: f64 = 0.0;
    for (node, x) in positions.iter().enumerate() {
        let y = Vector::from_row_slice(&terminal[node * n..(node + 1) * n]);
        max_speed = max_speed.max(c.drift(grid.t_end, x, &y)?.amax());
    }
    if dt * max_speed > dx {
        return Err(Error::Config(format!(
            "advective CFL violated: dt * max|f| = {} exceeds dx = {dx}",
            dt * max_speed
        )));
    }

    let boundary_nodes: Vec<usize> = (0..nodes).filter(|&node| grid.is_boundary(node)).collect();
    let shoot = BvpOptions {
        max_iter: 50,
        ..BvpOptions::new(dt, 1e-12)
    };
    let sqrt_eps = epsilon.sqrt();

    let mut u_levels = vec![Vec::new(); grid.nt];
    let mut grad_levels = vec![Vec::new(); grid.nt];
    u_levels[grid.nt - 1] = terminal.clone();
    grad_levels[grid.nt - 1] = full_jacobian(grid, &terminal, n);

    for k in (0..grid.nt - 1).rev() {
        let t = grid.t_node(k);
        let next = &u_levels[k + 1];
        let next_grad = &grad_levels[k + 1];

        // Boundary values for this level.
        let boundary: Vec<(usize, Vector)> = match opts.boundary {
            BoundaryMode::LimitField => boundary_nodes
                .par_iter()
                .map(|&node| Ok((node, limit::limit_u(problem, t, &positions[node], &shoot)?)))
                .collect::<Result<_>>()?,
            BoundaryMode::Characteristic => boundary_nodes
                .iter()
                .map(|&node| {
                    let x = &positions[node];
                    let y = Vector::from_row_slice(&next[node * n..(node + 1) * n]);
                    let f = c.drift(t, x, &y)?;
                    let g = c.generator(t, x, &y, &problem.zero_z())?;
                    let j =
                        Matrix::from_row_slice(n, n, &next_grad[node * n * n..(node + 1) * n * n]);
                    Ok((node, y + dt * (g + j * f)))
                })
                .collect::<Result<_>>()?,
        };

        let mut iterate = next.clone();
        for (node, v) in &boundary {
            iterate[node * n..(node + 1) * n].copy_from_slice(v.as_slice());
        }
        let mut converged = false;
        let mut residual = f64::INFINITY;
        for _ in 0..opts.picard_max {
            let frozen: Vec<Option<NodeCoeffs>> = (0..nodes)
                .into_par_iter()
                .map(|node| -> Result<Option<NodeCoeffs>> {
                    if grid.is_boundary(node) {
                        return Ok(None);
                    }
                    let x = &positions[node];
                    let y = Vector::from_row_slice(&iterate[node * n..(node + 1) * n]);
                    let sigma = c.diffusion(t, x, &y)?;
                    let j = Matrix::from_row_slice(n, n, &jacobian(grid, &iterate, n, node));
                    let z = sqrt_eps * j * &sigma;
                    Ok(Some(NodeCoeffs {
                        drift: c.drift(t, x, &y)?,
                        source: c.generator(t, x, &y, &z)?,
                        diffusion: &sigma * sigma.transpose(),
                    }))
                })
                .collect::<Result<_>>()?;

            let mut rhs = iterate.clone();
            for node in 0..nodes {
                let Some(fc) = &frozen[node] else { continue };
                for l in 0..n {
                    let mut r = next[node * n + l] + dt * fc.source[l];
                    for i in 0..n {
                        r += dt * fc.drift[i] * upwind(grid, next, n, node, i, l, fc.drift[i]);
                    }
                    if n == 2 {
                        r += dt
                            * epsilon
                            * fc.diffusion[(0, 1)]
                            * mixed_second(grid, &iterate, n, node, l);
                    }
                    rhs[node * n + l] = r;
                }
            }

            let updated = if epsilon == 0.0 {
                rhs
            } else if n == 1 {
                implicit_1d(grid, &frozen, &rhs, dt * epsilon / 2.0)
            } else {
                implicit_2d(grid, &frozen, &rhs, dt * epsilon / 2.0, opts.picard_tol)
            };
            residual = updated
                .iter()
                .zip(&iterate)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if updated.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    time: t,
                    detail: "non-finite field value".into(),
                });
            }
            iterate = updated;
            if residual < opts.picard_tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::PicardNonConvergence {
                time: t,
                iterations: opts.picard_max,
                residual,
            });
        }
        grad_levels[k] = full_jacobian(grid, &iterate, n);
        u_levels[k] = iterate;
    }

    Ok(DecouplingField {
        grid: *grid,
        epsilon,
        u: u_levels,
        grad: grad_levels,
        terminal_data: terminal,
    })
}

/// Tridiagonal solve of `(I - θ a ∂ₓₓ) u = rhs` with the boundary values of `rhs` kept.
fn implicit_1d(
    grid: &SpaceTimeGrid,
    frozen: &[Option<NodeCoeffs>],
    rhs: &[f64],
    theta: f64,
) -> Vec<f64> {
    let m = grid.nx - 2;
    let dx2 = grid.dx() * grid.dx();
    let mut lower = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut upper = vec![0.0; m];
    let mut b: Vec<f64> = rhs[1..grid.nx - 1].to_vec();
    for r in 0..m {
        let alpha = theta
            * frozen[r + 1]
                .as_ref()
                .map_or(0.0, |fc| fc.diffusion[(0, 0)])
            / dx2;
        lower[r] = -alpha;
        diag[r] = 1.0 + 2.0 * alpha;
        upper[r] = -alpha;
    }
    b[0] += -lower[0] * rhs[0];
    b[m - 1] += -upper[m - 1] * rhs[grid.nx - 1];
    lower[0] = 0.0;
    upper[m - 1] = 0.0;
    thomas(&lower, &diag, &upper, &mut b);
    let mut out = rhs.to_vec();
    out[1..grid.nx - 1].copy_from_slice(&b);
    out
}

/// Gauss–Seidel solve of `(I - θ (a₁₁ ∂₁₁ + a₂₂ ∂₂₂)) u_l = rhs_l` per component.
fn implicit_2d(
    grid: &SpaceTimeGrid,
    frozen: &[Option<NodeCoeffs>],
    rhs: &[f64],
    theta: f64,
    tol: f64,
) -> Vec<f64> {
    let n = 2;
    let dx2 = grid.dx() * grid.dx();
    let mut u = rhs.to_vec();
    let scale = rhs.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    for _ in 0..10_000 {
        let mut change: f64 = 0.0;
        for node in 0..grid.node_count() {
            let Some(fc) = &frozen[node] else { continue };
            let a0 = theta * fc.diffusion[(0, 0)] / dx2;
            let a1 = theta * fc.diffusion[(1, 1)] / dx2;
            for l in 0..n {
                let e = u[(node + 1) * n + l] + u[(node - 1) * n + l];
                let s = u[(node + grid.nx) * n + l] + u[(node - grid.nx) * n + l];
                let v = (rhs[node * n + l] + a0 * e + a1 * s) / (1.0 + 2.0 * a0 + 2.0 * a1);
                change = change.max((v - u[node * n + l]).abs());
                u[node * n + l] = v;
            }
        }
        if change <= 1e-3 * tol * scale.max(1.0) || change == 0.0 {
            break;
        }
    }
    u
}

/// Grid suprema of a solved field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldBounds {
    pub sup_u: f64,
    /// Largest Frobenius norm of the Jacobian.
    pub sup_grad: f64,
    /// `max |u(T, x_i) - h(x_i)|`.
    pub terminal_mismatch: f64,
}

pub fn field_bounds(field: &DecouplingField) -> FieldBounds {
    let n = field.n();
    let sup_u = field
        .u
        .iter()
        .flat_map(|level| level.chunks(n))
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let sup_grad = field
        .grad
        .iter()
        .flat_map(|level| level.chunks(n * n))
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let terminal_mismatch = field
        .u
        .last()
        .unwrap()
        .iter()
        .zip(&field.terminal_data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    FieldBounds {
        sup_u,
        sup_grad,
        terminal_mismatch,
    }
}

/// Sup-norm distance between two fields on the same grid.
pub fn field_gap(a: &DecouplingField, b: &DecouplingField) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::Shape("fields live on different grids".into()));
    }
    Ok(a.u
        .iter()
        .zip(&b.u)
        .flat_map(|(la, lb)| la.iter().zip(lb))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

/// Largest discrete residual of the field equation on the inner half of the box,
/// with central differences in space and a forward difference in time.
pub fn parabolic_residual(field: &DecouplingField, problem: &ProblemSpec) -> Result<f64> {
    check_problem_grid(problem, &field.grid)?;
    let grid = &field.grid;
    let c = &problem.coefficients;
    let n = field.n();
    let (dt, dx) = (grid.dt(), grid.dx());
    let quarter = 0.25 * (grid.x_hi - grid.x_lo);
    let inner: Vec<usize> = (0..grid.node_count())
        .filter(|&node| {
            grid.node_position(node)
                .iter()
                .all(|v| *v >= grid.x_lo + quarter - 1e-12 && *v <= grid.x_hi - quarter + 1e-12)
                && !grid.is_boundary(node)
        })
        .collect();
    let sqrt_eps = field.epsilon.sqrt();
    let per_level: Vec<f64> = (0..grid.nt - 1)
        .into_par_iter()
        .map(|k| -> Result<f64> {
            let t = grid.t_node(k);
            let level = &field.u[k];
            let mut worst: f64 = 0.0;
            for &node in &inner {
                let x = grid.node_position(node);
                let y = field.value_at(k, node);
                let j = Matrix::from_row_slice(n, n, &jacobian(grid, level, n, node));
                let sigma = c.diffusion(t, &x, &y)?;
                let a = &sigma * sigma.transpose();
                let g = c.generator(t, &x, &y, &(sqrt_eps * &j * &sigma))?;
                let f = c.drift(t, &x, &y)?;
                for l in 0..n {
                    let mut r = (field.u[k + 1][node * n + l] - level[node * n + l]) / dt + g[l];
                    for i in 0..n {
                        r += f[i] * j[(l, i)];
                        let up = level[grid.neighbour(node, i, true) * n + l];
                        let down = level[grid.neighbour(node, i, false) * n + l];
                        r += 0.5
                            * field.epsilon
                            * a[(i, i)]
                            * (up - 2.0 * level[node * n + l] + down)
                            / (dx * dx);
                    }
                    if n == 2 {
                        r += field.epsilon * a[(0, 1)] * mixed_second(grid, level, n, node, l);
                    }
                    worst = worst.max(r.abs());
                }
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    Ok(per_level.into_iter().fold(0.0, f64::max))
}

/// The limit field sampled on a grid by one shooting solve per node, with
/// the same finite-difference Jacobian as [`solve_parabolic`].
pub fn sample_limit_field(
    problem: &ProblemSpec,
    grid: &SpaceTimeGrid,
    tol: f64,
) -> Result<DecouplingField> {
    check_problem_grid(problem, grid)?;
    let n = problem.n;
    let opts = BvpOptions {
        max_iter: 50,
        ..BvpOptions::new(grid.dt(), tol)
    };
    let mut u = Vec::with_capacity(grid.nt);
    for k in 0..grid.nt {
        let t = grid.t_node(k);
        let level: Vec<Vec<f64>> = (0..grid.node_count())
            .into_par_iter()
            .map(|node| {
                Ok(
                    limit::limit_u(problem, t, &grid.node_position(node), &opts)?
                        .as_slice()
                        .to_vec(),
                )
            })
            .collect::<Result<_>>()?;
        u.push(level.concat());
    }
    let mut terminal = Vec::with_capacity(grid.node_count() * n);
    for node in 0..grid.node_count() {
        terminal.extend(
            problem
                .coefficients
                .terminal(&grid.node_position(node))?
                .iter(),
        );
    }
    let grad = u
        .iter()
        .map(|level| full_jacobian(grid, level, n))
        .collect();
    Ok(DecouplingField {
        grid: *grid,
        epsilon: 0.0,
        u,
        grad,
        terminal_data: terminal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{CoefficientSet, EvalBox};
    use crate::registry;

    fn spec(coeffs: CoefficientSet, n: usize, horizon: f64) -> ProblemSpec {
        ProblemSpec::new(
            coeffs,
            n,
            0.0,
            horizon,
            Vector::from_element(n, 1.0),
            vec![1.0, 0.1],
            EvalBox::cube((0.0, horizon), 1.0),
        )
        .unwrap()
    }

    fn linear() -> ProblemSpec {
        spec(registry::linear(1, 2.0, 2.0, 1.0, 1.0), 1, 0.5)
    }

    #[test]
    fn grid_validation() {
        assert!(SpaceTimeGrid::new(0.0, 1.0, 1, -1.0, 1.0, 5, 1).is_err());
        assert!(SpaceTimeGrid::new(0.0, 1.0, 2, -1.0, 1.0, 2, 1).is_err());
        assert!(SpaceTimeGrid::new(0.0, 1.0, 2, 1.0, 1.0, 3, 1).is_err());
        assert!(SpaceTimeGrid::new(0.0, 1.0, 2, -1.0, 1.0, 3, 3).is_err());
        let g = SpaceTimeGrid::new(0.0, 1.0, 11, -1.0, 1.0, 21, 1).unwrap();
        assert_eq!(g.t_node(10), 1.0);
        assert_eq!(g.x_coord(20), 1.0);
        assert_eq!(g.safe_interval(), (-0.5, 0.5));
        assert_eq!(g.time_index(0.33).unwrap(), 3);
        assert!(g.time_index(1.5).is_err());
    }

    #[test]
    fn zero_data_gives_zero_field() {
        let coeffs = CoefficientSet::new(
            |_, _, y: &Vector| -y.clone(),
            |_, x: &Vector, _, _| Vector::zeros(x.len()),
            |_, _, _| Matrix::identity(1, 1),
            |x: &Vector| Vector::zeros(x.len()),
        );
        let p = spec(coeffs, 1, 1.0);
        let grid = SpaceTimeGrid::for_problem(&p, 21, -2.0, 2.0, 41).unwrap();
        let field = solve_parabolic(&p, 0.5, &grid, &FieldOptions::default()).unwrap();
        let b = field_bounds(&field);
        assert_eq!((b.sup_u, b.sup_grad, b.terminal_mismatch), (0.0, 0.0, 0.0));
    }

    #[test]
    fn linear_field_is_identity_for_every_epsilon() {
        let p = linear();
        let grid = SpaceTimeGrid::for_problem(&p, 101, -4.0, 4.0, 101).unwrap();
        for &eps in &[1.0, 0.1, 0.0] {
            for mode in [BoundaryMode::LimitField, BoundaryMode::Characteristic] {
                let opts = FieldOptions {
                    boundary: mode,
                    ..FieldOptions::default()
                };
                let field = solve_parabolic(&p, eps, &grid, &opts).unwrap();
                for k in 0..grid.nt {
                    for node in 0..grid.node_count() {
                        let x = grid.x_coord(node);
                        assert!((field.u[k][node] - x).abs() < 1e-9, "eps={eps} k={k} x={x}");
                    }
                }
                let b = field_bounds(&field);
                assert!((b.sup_u - 4.0).abs() < 1e-9);
                assert!((b.sup_grad - 1.0).abs() < 1e-9);
                assert_eq!(b.terminal_mismatch, 0.0);
            }
        }
    }

    #[test]
    fn zero_drift_limit_field_matches_nodewise_ode() {
        // f = 0, ε = 0: each node evolves by ∂ₜu = -g(t, x, u, 0).
        let coeffs = CoefficientSet::new(
            |_, x: &Vector, _| Vector::zeros(x.len()),
            |_, x: &Vector, y: &Vector, _| Vector::from_element(1, (x[0] - y[0]).sin()),
            |_, _, _| Matrix::identity(1, 1),
            |x: &Vector| x.map(|v| 0.5 * v),
        );
        let p = spec(coeffs, 1, 1.0);
        let grid = SpaceTimeGrid::for_problem(&p, 2001, -2.0, 2.0, 21).unwrap();
        let field = solve_parabolic(&p, 0.0, &grid, &FieldOptions::default()).unwrap();
        for node in [3usize, 10, 17] {
            let x = grid.x_coord(node);
            // Oracle: backward RK4 with a fine step.
            let mut y = 0.5 * x;
            let steps = 4000;
            let h = 1.0 / steps as f64;
            let rhs = |y: f64| (x - y).sin();
            for _ in 0..steps {
                let k1 = rhs(y);
                let k2 = rhs(y + 0.5 * h * k1);
                let k3 = rhs(y + 0.5 * h * k2);
                let k4 = rhs(y + h * k3);
                y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            assert!(
                (field.u[0][node] - y).abs() < 2e-3,
                "x={x}: {} vs {y}",
                field.u[0][node]
            );
        }
    }

    #[test]
    fn gradient_is_central_difference_of_values() {
        let p = spec(registry::tanh_coupled(1, 1.0, 1.0, 1.0, 0.5, 1.0), 1, 0.5);
        let grid = SpaceTimeGrid::for_problem(&p, 41, -3.0, 3.0, 61).unwrap();
        let field = solve_parabolic(&p, 0.3, &grid, &FieldOptions::default()).unwrap();
        let dx = grid.dx();
        for k in 0..grid.nt {
            for i in 1..grid.nx - 1 {
                let cd = (field.u[k][i + 1] - field.u[k][i - 1]) / (2.0 * dx);
                assert_eq!(field.grad[k][i], cd);
            }
        }
        assert_eq!(field_bounds(&field).terminal_mismatch, 0.0);
    }

    #[test]
    fn residual_decays_under_refinement() {
        let p = spec(registry::tanh_coupled(1, 1.0, 1.0, 1.0, 0.5, 1.0), 1, 0.5);
        let mut residuals = Vec::new();
        for (nt, nx) in [(21, 41), (41, 81), (81, 161)] {
            let grid = SpaceTimeGrid::for_problem(&p, nt, -3.0, 3.0, nx).unwrap();
            let field = solve_parabolic(&p, 0.2, &grid, &FieldOptions::default()).unwrap();
            residuals.push(parabolic_residual(&field, &p).unwrap());
        }
        for w in residuals.windows(2) {
            assert!(w[0] / w[1] >= 1.8, "{residuals:?}");
        }
    }

    #[test]
    fn gap_to_limit_shrinks_with_epsilon() {
        let p = spec(registry::tanh_coupled(1, 1.0, 1.0, 1.0, 0.5, 1.0), 1, 0.5);
        let grid = SpaceTimeGrid::for_problem(&p, 41, -3.0, 3.0, 61).unwrap();
        let limit = solve_parabolic(&p, 0.0, &grid, &FieldOptions::default()).unwrap();
        let gaps: Vec<f64> = [0.8, 0.4, 0.2, 0.1]
            .iter()
            .map(|&e| {
                field_gap(
                    &solve_parabolic(&p, e, &grid, &FieldOptions::default()).unwrap(),
                    &limit,
                )
                .unwrap()
            })
            .collect();
        assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
        assert!(gaps[0] > 0.0);
        let sampled = sample_limit_field(&p, &grid, 1e-12).unwrap();
        assert!(field_gap(&sampled, &limit).unwrap() < 0.05);
        assert_eq!(field_gap(&limit, &limit).unwrap(), 0.0);
        let other = SpaceTimeGrid::for_problem(&p, 21, -3.0, 3.0, 61).unwrap();
        let coarse = solve_parabolic(&p, 0.0, &other, &FieldOptions::default()).unwrap();
        assert!(matches!(field_gap(&coarse, &limit), Err(Error::Shape(_))));
    }

    #[test]
    fn cfl_violation_is_rejected() {
        let p = linear();
        let grid = SpaceTimeGrid::for_problem(&p, 3, -4.0, 4.0, 401).unwrap();
        assert!(matches!(
            solve_parabolic(&p, 0.5, &grid, &FieldOptions::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn picard_budget_exhaustion() {
        let p = spec(registry::tanh_coupled(1, 1.0, 1.0, 1.0, 0.5, 1.0), 1, 0.5);
        let grid = SpaceTimeGrid::for_problem(&p, 11, -3.0, 3.0, 31).unwrap();
        let opts = FieldOptions {
            picard_max: 1,
            ..FieldOptions::default()
        };
        assert!(matches!(
            solve_parabolic(&p, 0.5, &grid, &opts),
            Err(Error::PicardNonConvergence { .. })
        ));
    }

    #[test]
    fn two_dimensional_linear_field() {
        let p = spec(registry::linear(2, 2.0, 2.0, 1.0, 1.0), 2, 0.5);
        let grid = SpaceTimeGrid::for_problem(&p, 21, -2.0, 2.0, 21).unwrap();
        let field = solve_parabolic(&p, 0.5, &grid, &FieldOptions::default()).unwrap();
        for node in 0..grid.node_count() {
            let x = grid.node_position(node);
            assert!((field.value_at(0, node) - x).amax() < 1e-9);
        }
        let (u, j) = field
            .interpolate(3, &Vector::from_vec(vec![0.13, -0.71]))
            .unwrap();
        assert!((u[0] - 0.13).abs() < 1e-9 && (u[1] + 0.71).abs() < 1e-9);
        assert!((j - Matrix::identity(2, 2)).amax() < 1e-9);
    }

    #[test]
    fn interpolation_outside_box_fails() {
        let p = linear();
        let grid = SpaceTimeGrid::for_problem(&p, 11, -1.0, 1.0, 11).unwrap();
        let field = solve_parabolic(&p, 0.5, &grid, &FieldOptions::default()).unwrap();
        assert!(field.value(0.1, &Vector::from_element(1, 1.5)).is_err());
        assert!(
            (field.value(0.1, &Vector::from_element(1, 0.37)).unwrap()[0] - 0.37).abs() < 1e-12
        );
    }
}
