//! Problem instances and sampled audits of the standing assumptions.
//!
//! A [`CoefficientSet`] bundles the forward drift `f(t, x, y)`, the backward
//! generator `g(t, x, y, z)`, the diffusion `sigma(t, x, y)` (an `n x d`
//! matrix) and the terminal map `h(x)`. Both `X` and `Y` live in `R^n`.
//!
//! The auditors never prove anything: they draw random pairs from a declared
//! evaluation box and report the worst observed constants.

use std::fmt;
use std::sync::Arc;

use nalgebra::SymmetricEigen;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;
use crate::{Matrix, Vector};

pub type DriftFn = dyn Fn(f64, &Vector, &Vector) -> Vector + Send + Sync;
pub type GeneratorFn = dyn Fn(f64, &Vector, &Vector, &Matrix) -> Vector + Send + Sync;
pub type DiffusionFn = dyn Fn(f64, &Vector, &Vector) -> Matrix + Send + Sync;
pub type TerminalFn = dyn Fn(&Vector) -> Vector + Send + Sync;

/// Deterministic coefficient maps with their declared regularity constants.
#[derive(Clone)]
pub struct CoefficientSet {
    pub f: Arc<DriftFn>,
    pub g: Arc<GeneratorFn>,
    pub sigma: Arc<DiffusionFn>,
    pub h: Arc<TerminalFn>,
    /// Lipschitz constant.
    pub declared_c1: f64,
    /// Monotonicity constant.
    pub declared_c2: f64,
    /// Growth constant.
    pub declared_lambda: f64,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("declared_c1", &self.declared_c1)
            .field("declared_c2", &self.declared_c2)
            .field("declared_lambda", &self.declared_lambda)
            .finish_non_exhaustive()
    }
}

fn describe(parts: &[(&str, &[f64])]) -> String {
    parts
        .iter()
        .map(|(name, v)| format!("{name}={v:?}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn ensure_finite<'a>(
    map: &'static str,
    values: impl IntoIterator<Item = &'a f64>,
    input: impl FnOnce() -> String,
) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Evaluation {
            map,
            input: input(),
        })
    }
}

impl CoefficientSet {
    pub fn new(
        f: impl Fn(f64, &Vector, &Vector) -> Vector + Send + Sync + 'static,
        g: impl Fn(f64, &Vector, &Vector, &Matrix) -> Vector + Send + Sync + 'static,
        sigma: impl Fn(f64, &Vector, &Vector) -> Matrix + Send + Sync + 'static,
        h: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
    ) -> Self {
        Self {
            f: Arc::new(f),
            g: Arc::new(g),
            sigma: Arc::new(sigma),
            h: Arc::new(h),
            declared_c1: 0.0,
            declared_c2: 0.0,
            declared_lambda: 0.0,
        }
    }

    pub fn with_constants(mut self, c1: f64, c2: f64, lambda: f64) -> Self {
        self.declared_c1 = c1;
        self.declared_c2 = c2;
        self.declared_lambda = lambda;
        self
    }

    pub fn drift(&self, t: f64, x: &Vector, y: &Vector) -> Result<Vector> {
        let v = (self.f)(t, x, y);
        ensure_finite("f", v.iter(), || {
            format!(
                "t={t} {}",
                describe(&[("x", x.as_slice()), ("y", y.as_slice())])
            )
        })?;
        Ok(v)
    }

    pub fn generator(&self, t: f64, x: &Vector, y: &Vector, z: &Matrix) -> Result<Vector> {
        let v = (self.g)(t, x, y, z);
        ensure_finite("g", v.iter(), || {
            format!(
                "t={t} {}",
                describe(&[
                    ("x", x.as_slice()),
                    ("y", y.as_slice()),
                    ("z", z.as_slice())
                ])
            )
        })?;
        Ok(v)
    }

    pub fn diffusion(&self, t: f64, x: &Vector, y: &Vector) -> Result<Matrix> {
        let v = (self.sigma)(t, x, y);
        ensure_finite("sigma", v.iter(), || {
            format!(
                "t={t} {}",
                describe(&[("x", x.as_slice()), ("y", y.as_slice())])
            )
        })?;
        Ok(v)
    }

    pub fn terminal(&self, x: &Vector) -> Result<Vector> {
        let v = (self.h)(x);
        ensure_finite("h", v.iter(), || describe(&[("x", x.as_slice())]))?;
        Ok(v)
    }
}

/// Axis-aligned sampling box: one interval per argument block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalBox {
    pub t: (f64, f64),
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub z: (f64, f64),
}

impl EvalBox {
    pub fn cube(t: (f64, f64), half_width: f64) -> Self {
        let r = (-half_width, half_width);
        Self {
            t,
            x: r,
            y: r,
            z: r,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("t", self.t), ("x", self.x), ("y", self.y), ("z", self.z)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!(
                    "evaluation box {name}-range [{lo}, {hi}] is invalid"
                )));
            }
        }
        if self.x.0 == self.x.1 {
            return Err(Error::Config("evaluation box is degenerate in x".into()));
        }
        Ok(())
    }
}

/// A small-noise forward-backward problem with `m = n`.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub coefficients: CoefficientSet,
    pub n: usize,
    pub d: usize,
    pub t0: f64,
    pub horizon: f64,
    pub x0: Vector,
    pub epsilon_grid: Vec<f64>,
    pub eval_box: EvalBox,
}

impl ProblemSpec {
    pub fn new(
        coefficients: CoefficientSet,
        d: usize,
        t0: f64,
        horizon: f64,
        x0: Vector,
        epsilon_grid: Vec<f64>,
        eval_box: EvalBox,
    ) -> Result<Self> {
        let spec = Self {
            coefficients,
            n: x0.len(),
            d,
            t0,
            horizon,
            x0,
            epsilon_grid,
            eval_box,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::Config(
                "state and noise dimensions must be at least 1".into(),
            ));
        }
        if self.x0.len() != self.n {
            return Err(Error::Config("x0 has the wrong dimension".into()));
        }
        if !(self.t0 >= 0.0 && self.t0 < self.horizon) {
            return Err(Error::Config(format!(
                "need 0 <= t0 < T, got t0 = {}, T = {}",
                self.t0, self.horizon
            )));
        }
        if let Some(e) = self
            .epsilon_grid
            .iter()
            .find(|e| !(**e > 0.0 && **e <= 1.0))
        {
            return Err(Error::Config(format!("epsilon {e} is outside (0, 1]")));
        }
        if self.epsilon_grid.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(
                "epsilon grid must be strictly decreasing".into(),
            ));
        }
        self.eval_box.validate()
    }

    /// Zero `n x d` matrix, the `z` slot of the limit system.
    pub fn zero_z(&self) -> Matrix {
        Matrix::zeros(self.n, self.d)
    }

    pub fn coeffs(&self) -> &CoefficientSet {
        &self.coefficients
    }
}

/// One sampled point `(t, x, y, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePoint {
    pub t: f64,
    pub x: Vector,
    pub y: Vector,
    pub z: Matrix,
}

impl SamplePoint {
    fn draw(rng: &mut rand_chacha::ChaCha8Rng, b: &EvalBox, t: f64, n: usize, d: usize) -> Self {
        let x = Vector::from_fn(n, |_, _| rng::uniform(rng, b.x.0, b.x.1));
        let y = Vector::from_fn(n, |_, _| rng::uniform(rng, b.y.0, b.y.1));
        let z = Matrix::from_fn(n, d, |_, _| rng::uniform(rng, b.z.0, b.z.1));
        Self { t, x, y, z }
    }
}

/// One audited inequality.
#[derive(Debug, Clone)]
pub struct AssumptionCheck {
    pub name: String,
    /// Sampled constant (a maximum for bounds, an infimum for monotonicity).
    pub estimate: f64,
    pub declared: f64,
    /// Positive means the inequality held at every sample with room to spare.
    pub margin: f64,
    pub worst: Option<(SamplePoint, Option<SamplePoint>)>,
    pub samples: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Relative slack used when deciding whether a sampled estimate breaks a bound.
const ROUNDING_SLACK: f64 = 1e-12;

fn pair_points(
    problem: &ProblemSpec,
    b: &EvalBox,
    seed: u64,
    index: usize,
) -> (SamplePoint, SamplePoint) {
    let mut r = rng::stream(seed, index as u64);
    let t = rng::uniform(&mut r, b.t.0, b.t.1);
    let p = SamplePoint::draw(&mut r, b, t, problem.n, problem.d);
    let q = SamplePoint::draw(&mut r, b, t, problem.n, problem.d);
    (p, q)
}

fn stacked(parts: &[&[f64]]) -> Vector {
    Vector::from_iterator(
        parts.iter().map(|p| p.len()).sum(),
        parts.iter().flat_map(|p| p.iter().copied()),
    )
}

/// Max over samples, keeping the lowest index on ties.
fn argmax<T>(items: Vec<(f64, T)>) -> Option<(f64, T)> {
    let mut best: Option<(f64, T)> = None;
    for (v, item) in items {
        if v.is_nan() {
            continue;
        }
        match &best {
            Some((b, _)) if v <= *b => {}
            _ => best = Some((v, item)),
        }
    }
    best
}

fn argmin<T>(items: Vec<(f64, T)>) -> Option<(f64, T)> {
    argmax(items.into_iter().map(|(v, t)| (-v, t)).collect()).map(|(v, t)| (-v, t))
}

/// Per-map sampled Lipschitz constants.
#[derive(Debug, Clone)]
pub struct LipschitzReport {
    pub f: AssumptionCheck,
    pub g: AssumptionCheck,
    pub sigma: AssumptionCheck,
    pub h: AssumptionCheck,
}

impl LipschitzReport {
    pub fn checks(&self) -> [&AssumptionCheck; 4] {
        [&self.f, &self.g, &self.sigma, &self.h]
    }
}

/// Maximum sampled difference quotient of each coefficient map.
///
/// Quotients are taken in the full argument vector of each map (`(x, y)` for
/// `f` and `sigma`, `(x, y, z)` for `g`, `x` for `h`), with both points of a
/// pair sharing the same time. A map is flagged when its estimate exceeds the
/// declared constant by more than 1%.
pub fn estimate_lipschitz(
    problem: &ProblemSpec,
    eval_box: &EvalBox,
    samples: usize,
    seed: u64,
) -> Result<LipschitzReport> {
    if samples < 2 {
        return Err(Error::Config(
            "Lipschitz estimation needs at least 2 samples".into(),
        ));
    }
    eval_box.validate()?;
    let c = &problem.coefficients;
    let quotients: Vec<(usize, [f64; 4])> = (0..samples)
        .into_par_iter()
        .map(|i| -> Result<(usize, [f64; 4])> {
            let (p, q) = pair_points(problem, eval_box, seed, i);
            let dxy = stacked(&[p.x.as_slice(), p.y.as_slice()])
                - stacked(&[q.x.as_slice(), q.y.as_slice()]);
            let dxyz = stacked(&[p.x.as_slice(), p.y.as_slice(), p.z.as_slice()])
                - stacked(&[q.x.as_slice(), q.y.as_slice(), q.z.as_slice()]);
            let dx = (&p.x - &q.x).norm();
            let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { f64::NAN };
            let qf = ratio(
                (c.drift(p.t, &p.x, &p.y)? - c.drift(q.t, &q.x, &q.y)?).norm(),
                dxy.norm(),
            );
            let qg = ratio(
                (c.generator(p.t, &p.x, &p.y, &p.z)? - c.generator(q.t, &q.x, &q.y, &q.z)?).norm(),
                dxyz.norm(),
            );
            let qs = ratio(
                (c.diffusion(p.t, &p.x, &p.y)? - c.diffusion(q.t, &q.x, &q.y)?).norm(),
                dxy.norm(),
            );
            let qh = ratio((c.terminal(&p.x)? - c.terminal(&q.x)?).norm(), dx);
            Ok((i, [qf, qg, qs, qh]))
        })
        .collect::<Result<_>>()?;

    let make = |slot: usize, name: &str| -> AssumptionCheck {
        let best = argmax(quotients.iter().map(|(i, qs)| (qs[slot], *i)).collect());
        let (estimate, worst) = match best {
            Some((v, i)) => {
                let (p, q) = pair_points(problem, eval_box, seed, i);
                (v, Some((p, Some(q))))
            }
            None => (0.0, None),
        };
        let declared = c.declared_c1;
        AssumptionCheck {
            name: format!("A1:{name}"),
            estimate,
            declared,
            margin: declared - estimate,
            worst,
            samples,
            passed: estimate <= declared * 1.01 + ROUNDING_SLACK,
        }
    };
    Ok(LipschitzReport {
        f: make(0, "f"),
        g: make(1, "g"),
        sigma: make(2, "sigma"),
        h: make(3, "h"),
    })
}

/// Monotonicity audit at one noise level.
#[derive(Debug, Clone)]
pub struct MonotonicityReport {
    pub epsilon: f64,
    /// Largest `C2` compatible with the coupled-map inequality at every sample.
    pub admissible_c2: f64,
    /// Largest `C2` compatible with the terminal-map inequality.
    pub terminal_admissible_c2: f64,
    pub coupled: AssumptionCheck,
    pub terminal: AssumptionCheck,
}

/// `<A(u1) - A(u2), u1 - u2>` with `A = (-g, f, sqrt(eps) sigma)` paired
/// against `u = (x, y, z)`; `z` and `sigma` are flattened row-major.
pub fn monotonicity_form(
    c: &CoefficientSet,
    epsilon: f64,
    p: &SamplePoint,
    q: &SamplePoint,
) -> Result<f64> {
    let dg = c.generator(p.t, &p.x, &p.y, &p.z)? - c.generator(q.t, &q.x, &q.y, &q.z)?;
    let df = c.drift(p.t, &p.x, &p.y)? - c.drift(q.t, &q.x, &q.y)?;
    let ds = c.diffusion(p.t, &p.x, &p.y)? - c.diffusion(q.t, &q.x, &q.y)?;
    let dx = &p.x - &q.x;
    let dy = &p.y - &q.y;
    let dz = &p.z - &q.z;
    // Frobenius pairing equals the row-major flattened dot product.
    Ok(-dg.dot(&dx) + df.dot(&dy) + epsilon.sqrt() * ds.dot(&dz))
}

/// Samples the one-sided dissipativity inequality and the terminal clause.
///
/// Pairs with `x1 = x2` and `y1 = y2` are skipped.
pub fn check_monotonicity(
    problem: &ProblemSpec,
    epsilon: f64,
    eval_box: &EvalBox,
    samples: usize,
    seed: u64,
) -> Result<MonotonicityReport> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::Config(format!(
            "epsilon {epsilon} is outside (0, 1]"
        )));
    }
    eval_box.validate()?;
    let c = &problem.coefficients;
    let values: Vec<(usize, f64, f64)> = (0..samples)
        .into_par_iter()
        .map(|i| -> Result<(usize, f64, f64)> {
            let (p, q) = pair_points(problem, eval_box, seed, i);
            let dx2 = (&p.x - &q.x).norm_squared();
            let dy2 = (&p.y - &q.y).norm_squared();
            let coupled = if dx2 + dy2 > 0.0 {
                -monotonicity_form(c, epsilon, &p, &q)? / (dx2 + dy2) - epsilon.sqrt()
            } else {
                f64::NAN
            };
            let terminal = if dx2 > 0.0 {
                (c.terminal(&p.x)? - c.terminal(&q.x)?).dot(&(&p.x - &q.x)) / dx2
            } else {
                f64::NAN
            };
            Ok((i, coupled, terminal))
        })
        .collect::<Result<_>>()?;

    let used = values.iter().filter(|v| !v.1.is_nan()).count();
    let declared = c.declared_c2;
    let build = |name: &str, best: Option<(f64, usize)>, count: usize| {
        let (estimate, worst) = match best {
            Some((v, i)) => {
                let (p, q) = pair_points(problem, eval_box, seed, i);
                (v, Some((p, Some(q))))
            }
            None => (f64::INFINITY, None),
        };
        let margin = estimate - declared;
        AssumptionCheck {
            name: name.to_string(),
            estimate,
            declared,
            margin,
            worst,
            samples: count,
            passed: count > 0 && margin >= -ROUNDING_SLACK * (1.0 + declared.abs()),
        }
    };
    let coupled_best = argmin(values.iter().map(|(i, v, _)| (*v, *i)).collect());
    let terminal_best = argmin(values.iter().map(|(i, _, v)| (*v, *i)).collect());
    let coupled = build("A2", coupled_best, used);
    let terminal = build(
        "A2:h",
        terminal_best,
        values.iter().filter(|v| !v.2.is_nan()).count(),
    );
    Ok(MonotonicityReport {
        epsilon,
        admissible_c2: coupled.estimate,
        terminal_admissible_c2: terminal.estimate,
        coupled,
        terminal,
    })
}

/// Growth and ellipticity audit.
#[derive(Debug, Clone)]
pub struct GrowthReport {
    /// `max |f| / (1 + |x| + |y|)`.
    pub f_ratio: f64,
    /// `max |g| / (1 + |x| + |y| + |z|)`.
    pub g_ratio: f64,
    /// `max |sigma| / (1 + |x| + |y|)`.
    pub sigma_ratio: f64,
    /// `max |h| / (1 + |x|)`.
    pub h_ratio: f64,
    /// `max |sigma|` (Frobenius).
    pub sigma_max: f64,
    /// `max |h|`.
    pub h_max: f64,
    /// Minimum eigenvalue of `sigma sigma^T` over the samples.
    pub ellipticity: f64,
    pub checks: Vec<AssumptionCheck>,
}

/// Samples the linear-growth bounds, the boundedness of `sigma` and `h`, and
/// the ellipticity of `a = sigma sigma^T`. Points are drawn independently.
pub fn check_growth_and_ellipticity(
    problem: &ProblemSpec,
    eval_box: &EvalBox,
    samples: usize,
    seed: u64,
) -> Result<GrowthReport> {
    eval_box.validate()?;
    let c = &problem.coefficients;
    let rows: Vec<(usize, [f64; 7])> = (0..samples.max(1))
        .into_par_iter()
        .map(|i| -> Result<(usize, [f64; 7])> {
            let (p, _) = pair_points(problem, eval_box, seed, i);
            let nx = p.x.norm();
            let ny = p.y.norm();
            let nz = p.z.norm();
            let f = c.drift(p.t, &p.x, &p.y)?.norm();
            let g = c.generator(p.t, &p.x, &p.y, &p.z)?.norm();
            let s = c.diffusion(p.t, &p.x, &p.y)?;
            let h = c.terminal(&p.x)?.norm();
            let a = &s * s.transpose();
            let lambda = SymmetricEigen::new(a).eigenvalues.min();
            let sn = s.norm();
            Ok((
                i,
                [
                    f / (1.0 + nx + ny),
                    g / (1.0 + nx + ny + nz),
                    sn / (1.0 + nx + ny),
                    h / (1.0 + nx),
                    sn,
                    h,
                    -lambda,
                ],
            ))
        })
        .collect::<Result<_>>()?;
    let lambda_decl = c.declared_lambda;
    let column =
        |slot: usize| argmax(rows.iter().map(|(i, r)| (r[slot], *i)).collect()).unwrap_or((0.0, 0));
    let bound_check = |name: &str, slot: usize| {
        let (v, i) = column(slot);
        let (p, _) = pair_points(problem, eval_box, seed, i);
        AssumptionCheck {
            name: name.to_string(),
            estimate: v,
            declared: lambda_decl,
            margin: lambda_decl - v,
            worst: Some((p, None)),
            samples: rows.len(),
            passed: v <= lambda_decl * (1.0 + ROUNDING_SLACK) + ROUNDING_SLACK,
        }
    };
    let mut checks = vec![
        bound_check("A3:f", 0),
        bound_check("A3:g", 1),
        bound_check("A3:sigma", 2),
        bound_check("A3:h", 3),
        bound_check("A4:sigma", 4),
        bound_check("A4:h", 5),
    ];
    let (neg_lambda, i) = column(6);
    let ellipticity = -neg_lambda;
    let (p, _) = pair_points(problem, eval_box, seed, i);
    checks.push(AssumptionCheck {
        name: "A4:ellipticity".into(),
        estimate: ellipticity,
        declared: 0.0,
        margin: ellipticity,
        worst: Some((p, None)),
        samples: rows.len(),
        passed: ellipticity > 0.0,
    });
    Ok(GrowthReport {
        f_ratio: column(0).0,
        g_ratio: column(1).0,
        sigma_ratio: column(2).0,
        h_ratio: column(3).0,
        sigma_max: column(4).0,
        h_max: column(5).0,
        ellipticity,
        checks,
    })
}

/// Runs every audit on the problem's own box and epsilon grid.
pub fn audit(problem: &ProblemSpec, samples: usize, seed: u64) -> Result<AssumptionReport> {
    let b = problem.eval_box;
    let mut report = AssumptionReport::default();
    let lip = estimate_lipschitz(
        problem,
        &b,
        samples,
        rng::derive_seed(seed, "lipschitz", &[]),
    )?;
    report.checks.extend(lip.checks().into_iter().cloned());
    for (k, &eps) in problem.epsilon_grid.iter().enumerate() {
        let mono = check_monotonicity(
            problem,
            eps,
            &b,
            samples,
            rng::derive_seed(seed, "monotonicity", &[k as u64]),
        )?;
        let mut coupled = mono.coupled;
        coupled.name = format!("A2[eps={eps}]");
        report.checks.push(coupled);
        if k == 0 {
            report.checks.push(mono.terminal);
        }
    }
    let growth =
        check_growth_and_ellipticity(problem, &b, samples, rng::derive_seed(seed, "growth", &[]))?;
    report.checks.extend(growth.checks);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry;

    fn linear_problem(a: f64, b: f64, c: f64, sigma0: f64, half: f64) -> ProblemSpec {
        let coeffs = registry::linear(1, a, b, c, sigma0);
        ProblemSpec::new(
            coeffs,
            1,
            0.0,
            0.5,
            Vector::from_element(1, 1.0),
            vec![1.0, 0.25],
            EvalBox::cube((0.0, 0.5), half),
        )
        .unwrap()
    }

    #[test]
    fn lipschitz_of_linear_drift_approaches_two() {
        let p = linear_problem(2.0, 2.0, 1.0, 1.0, 1.0);
        let rep = estimate_lipschitz(&p, &p.eval_box, 4000, 3).unwrap();
        assert!(
            rep.f.estimate <= 2.0 + 1e-12 && rep.f.estimate > 1.95,
            "{}",
            rep.f.estimate
        );
        assert_eq!(rep.sigma.estimate, 0.0);
        assert!((rep.h.estimate - 1.0).abs() < 1e-12);
        assert!(rep.checks().iter().all(|c| c.passed));
    }

    #[test]
    fn lipschitz_flags_understated_constant() {
        let mut p = linear_problem(2.0, 2.0, 1.0, 1.0, 1.0);
        p.coefficients.declared_c1 = 1.5;
        let rep = estimate_lipschitz(&p, &p.eval_box, 500, 3).unwrap();
        assert!(!rep.f.passed);
        assert!(rep.h.passed);
    }

    #[test]
    fn lipschitz_needs_two_samples() {
        let p = linear_problem(2.0, 2.0, 1.0, 1.0, 1.0);
        assert!(matches!(
            estimate_lipschitz(&p, &p.eval_box, 1, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn monotonicity_of_linear_set_is_closed_form() {
        let p = linear_problem(2.0, 2.0, 1.0, 1.0, 1.0);
        let rep = check_monotonicity(&p, 0.25, &p.eval_box, 2000, 9).unwrap();
        assert!(
            (rep.admissible_c2 - 1.5).abs() < 1e-12,
            "{}",
            rep.admissible_c2
        );
        assert!((rep.terminal_admissible_c2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_coupling_admits_nothing() {
        let coeffs = CoefficientSet::new(
            |_, x, _| Vector::zeros(x.len()),
            |_, x, _, _| Vector::zeros(x.len()),
            |_, _, _| Matrix::from_element(1, 1, 0.3),
            |x| x.clone(),
        )
        .with_constants(1.0, 0.1, 1.0);
        let p = ProblemSpec::new(
            coeffs,
            1,
            0.0,
            1.0,
            Vector::zeros(1),
            vec![0.5],
            EvalBox::cube((0.0, 1.0), 1.0),
        )
        .unwrap();
        let rep = check_monotonicity(&p, 0.5, &p.eval_box, 200, 1).unwrap();
        assert!((rep.admissible_c2 + 0.5f64.sqrt()).abs() < 1e-12);
        assert!(rep.admissible_c2 <= 0.0);
        assert!(!rep.coupled.passed);
    }

    #[test]
    fn growth_and_ellipticity_for_constant_diffusion() {
        let p = linear_problem(2.0, 2.0, 1.0, 0.7, 1.0);
        let rep = check_growth_and_ellipticity(&p, &p.eval_box, 3000, 5).unwrap();
        assert!((rep.sigma_max - 0.7).abs() < 1e-12);
        assert!((rep.ellipticity - 0.49).abs() < 1e-12);
        // |2y| / (1 + |x| + |y|) peaks at |y| = 1, x = 0.
        assert!(
            rep.f_ratio <= 1.0 + 1e-12 && rep.f_ratio > 0.9,
            "{}",
            rep.f_ratio
        );
        assert!(rep.h_max <= 1.0 && rep.h_max > 0.99);
    }

    #[test]
    fn terminal_bound_fails_when_lambda_too_small() {
        let mut p = linear_problem(2.0, 2.0, 1.0, 0.7, 1.0);
        p.coefficients.declared_lambda = 0.9;
        let rep = check_growth_and_ellipticity(&p, &p.eval_box, 500, 5).unwrap();
        let h = rep.checks.iter().find(|c| c.name == "A4:h").unwrap();
        assert!(!h.passed);
    }

    #[test]
    fn non_finite_evaluation_reports_input() {
        let coeffs = CoefficientSet::new(
            |_, x, _| x.map(|v| 1.0 / (v - v)),
            |_, x, _, _| Vector::zeros(x.len()),
            |_, _, _| Matrix::identity(1, 1),
            |x| x.clone(),
        );
        let p = ProblemSpec::new(
            coeffs,
            1,
            0.0,
            1.0,
            Vector::zeros(1),
            vec![0.5],
            EvalBox::cube((0.0, 1.0), 1.0),
        )
        .unwrap();
        let err = estimate_lipschitz(&p, &p.eval_box, 10, 0).unwrap_err();
        match err {
            Error::Evaluation { map, input } => {
                assert_eq!(map, "f");
                assert!(input.contains("x="));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn audits_are_bit_reproducible() {
        let p = linear_problem(2.5, 3.0, 1.0, 1.0, 2.0);
        let a = audit(&p, 300, 77).unwrap();
        let b = audit(&p, 300, 77).unwrap();
        for (x, y) in a.checks.iter().zip(&b.checks) {
            assert_eq!(x.estimate.to_bits(), y.estimate.to_bits());
        }
        assert!(a.passed());
    }

    #[test]
    fn problem_validation() {
        let coeffs = registry::linear(1, 2.0, 2.0, 1.0, 1.0);
        let bad = ProblemSpec::new(
            coeffs.clone(),
            1,
            0.5,
            0.5,
            Vector::zeros(1),
            vec![0.5],
            EvalBox::cube((0.0, 1.0), 1.0),
        );
        assert!(matches!(bad, Err(Error::Config(_))));
        let bad = ProblemSpec::new(
            coeffs.clone(),
            1,
            0.0,
            0.5,
            Vector::zeros(1),
            vec![0.5, 1.0],
            EvalBox::cube((0.0, 1.0), 1.0),
        );
        assert!(bad.is_err());
        let bad = ProblemSpec::new(
            coeffs,
            1,
            0.0,
            0.5,
            Vector::zeros(1),
            vec![1.5],
            EvalBox::cube((0.0, 1.0), 1.0),
        );
        assert!(bad.is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn linear_family_is_monotone_at_every_pair(
                c2 in 0.0f64..1.0,
                da in 0.0f64..2.0,
                db in 0.0f64..2.0,
                dc in 0.0f64..1.0,
                eps in 0.01f64..=1.0,
                seed in any::<u64>(),
            ) {
                let a = c2 + 1.0 + da;
                let b = c2 + 1.0 + db;
                let c = c2 + dc;
                let mut p = linear_problem(a, b, c, 1.0, 2.0);
                p.coefficients.declared_c2 = c2;
                for i in 0..64 {
                    let (u, v) = pair_points(&p, &p.eval_box, seed, i);
                    let dx2 = (&u.x - &v.x).norm_squared();
                    let dy2 = (&u.y - &v.y).norm_squared();
                    let form = monotonicity_form(&p.coefficients, eps, &u, &v).unwrap();
                    let bound = -(c2 + eps.sqrt()) * (dx2 + dy2);
                    prop_assert!(form <= bound + 1e-12 * (dx2 + dy2));
                }
                let rep = check_monotonicity(&p, eps, &p.eval_box, 64, seed).unwrap();
                prop_assert!(rep.coupled.passed && rep.terminal.passed);
            }

            #[test]
            fn lipschitz_estimate_is_monotone_in_samples(seed in any::<u64>(), k in 2usize..50) {
                let p = linear_problem(2.0, 3.0, 1.0, 1.0, 1.0);
                let small = estimate_lipschitz(&p, &p.eval_box, k, seed).unwrap();
                let large = estimate_lipschitz(&p, &p.eval_box, 2 * k, seed).unwrap();
                for (s, l) in small.checks().iter().zip(large.checks().iter()) {
                    prop_assert!(l.estimate >= s.estimate);
                }
            }
        }
    }
}
