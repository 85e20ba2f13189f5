//! Ensemble estimators for the small-noise asymptotics.
//!
//! All comparisons between runs (different `ε`, start points or start times)
//! drive both runs with the same Brownian increments, so pathwise differences
//! estimate the moment gaps directly.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::limit::{self, BvpOptions, OdeSolution};
use crate::pde::{solve_parabolic, DecouplingField, FieldOptions, SpaceTimeGrid};
use crate::problem::ProblemSpec;
use crate::rng;
use crate::simulate::{simulate_from, TrajectoryBundle};
use crate::{GridPath, Vector};

/// Point estimate with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStat {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
    pub label: String,
}

impl EnsembleStat {
    /// Sample mean and standard error of the mean.
    pub fn from_samples(label: &str, values: &[f64]) -> Result<Self> {
        let m = values.len();
        if m == 0 {
            return Err(Error::Config(format!("{label}: no samples")));
        }
        let mean = values.iter().sum::<f64>() / m as f64;
        let se = if m > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
            (var / m as f64).sqrt()
        } else {
            0.0
        };
        if !mean.is_finite() || !se.is_finite() {
            return Err(Error::Domain(format!("{label}: non-finite estimate")));
        }
        Ok(Self {
            estimate: mean,
            std_error: se,
            samples: m,
            label: label.to_string(),
        })
    }
}

/// Estimates for the `X`, `Y` and `Z` components of one moment bound.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTriple {
    pub x: EnsembleStat,
    pub y: EnsembleStat,
    pub z: EnsembleStat,
    /// Each estimate divided by the bound's normalizer.
    pub implied: [f64; 3],
}

impl MomentTriple {
    fn new(x: EnsembleStat, y: EnsembleStat, z: EnsembleStat, normalizer: f64) -> Self {
        let ratio = |s: &EnsembleStat| {
            if normalizer == 0.0 {
                0.0
            } else {
                s.estimate / normalizer
            }
        };
        let implied = [ratio(&x), ratio(&y), ratio(&z)];
        Self { x, y, z, implied }
    }

    /// One constant per bound: the largest component ratio.
    pub fn implied_constant(&self) -> f64 {
        self.implied.iter().copied().fold(0.0, f64::max)
    }
}

/// Problem, grid and a cache of solved fields keyed by `ε`.
pub struct Lab {
    pub problem: ProblemSpec,
    pub grid: SpaceTimeGrid,
    pub options: FieldOptions,
    fields: Mutex<BTreeMap<u64, Arc<DecouplingField>>>,
    limit: Mutex<Option<Arc<OdeSolution>>>,
}

impl Lab {
    pub fn new(problem: ProblemSpec, grid: SpaceTimeGrid, options: FieldOptions) -> Result<Self> {
        if grid.dim != problem.n || (grid.t0 - problem.t0).abs() > 1e-12 {
            return Err(Error::Config(
                "grid must start at t0 and match the state dimension".into(),
            ));
        }
        Ok(Self {
            problem,
            grid,
            options,
            fields: Mutex::new(BTreeMap::new()),
            limit: Mutex::new(None),
        })
    }

    /// Field at `epsilon`, solved on first use.
    pub fn field(&self, epsilon: f64) -> Result<Arc<DecouplingField>> {
        let key = epsilon.to_bits();
        if let Some(f) = self.fields.lock().unwrap().get(&key) {
            return Ok(f.clone());
        }
        let solved = Arc::new(solve_parabolic(
            &self.problem,
            epsilon,
            &self.grid,
            &self.options,
        )?);
        Ok(self
            .fields
            .lock()
            .unwrap()
            .entry(key)
            .or_insert(solved)
            .clone())
    }

    /// Seeds the cache with a field solved elsewhere, e.g. read back from disk.
    pub fn preload(&self, field: DecouplingField) -> Result<()> {
        if field.grid != self.grid {
            return Err(Error::Shape(
                "cached field lives on a different grid".into(),
            ));
        }
        self.fields
            .lock()
            .unwrap()
            .insert(field.epsilon.to_bits(), Arc::new(field));
        Ok(())
    }

    /// Limit pair from `(t0, x0)` on the grid's time nodes.
    pub fn limit_path(&self) -> Result<Arc<OdeSolution>> {
        let mut slot = self.limit.lock().unwrap();
        if let Some(s) = slot.as_ref() {
            return Ok(s.clone());
        }
        let opts = BvpOptions::new(self.grid.dt(), 1e-12);
        let sol = Arc::new(limit::solve_bvp_shooting(
            &self.problem,
            self.problem.t0,
            &self.problem.x0,
            &opts,
        )?);
        if sol.t_nodes.len() != self.grid.nt {
            return Err(Error::Shape(
                "limit path and grid have different node counts".into(),
            ));
        }
        *slot = Some(sol.clone());
        Ok(sol)
    }

    pub fn bundle_from(
        &self,
        epsilon: f64,
        t: f64,
        x: &Vector,
        n_paths: usize,
        seed: u64,
    ) -> Result<TrajectoryBundle> {
        simulate_from(
            &self.problem,
            &*self.field(epsilon)?,
            epsilon,
            t,
            x,
            n_paths,
            seed,
        )
    }

    pub fn bundle(&self, epsilon: f64, n_paths: usize, seed: u64) -> Result<TrajectoryBundle> {
        self.bundle_from(epsilon, self.problem.t0, &self.problem.x0, n_paths, seed)
    }
}

/// Binomial estimate of `P(sup_s |X^ε(s) - 𝒳(s)| > δ)` on the grid.
pub fn sup_deviation_probability(
    lab: &Lab,
    epsilon: f64,
    delta: f64,
    n_paths: usize,
    seed: u64,
) -> Result<EnsembleStat> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!(
            "delta must be positive, got {delta}"
        )));
    }
    let limit = lab.limit_path()?;
    let bundle = lab.bundle(epsilon, n_paths, seed)?;
    let hits = (0..n_paths)
        .filter(|&p| {
            (0..bundle.n_nodes()).any(|j| (bundle.x_at(p, j) - &limit.x_values[j]).norm() > delta)
        })
        .count();
    let m = n_paths as f64;
    let p = hits as f64 / m;
    Ok(EnsembleStat {
        estimate: p,
        std_error: (p * (1.0 - p) / m).sqrt(),
        samples: n_paths,
        label: format!("P(sup|X-limit|>{delta}) eps={epsilon}"),
    })
}

/// Per-path `sup_j |X_a - X_b|²`, `sup_j |Y_a - Y_b|²` and `Σ_j |Z_a - Z_b|² Δt`
/// over the nodes the two bundles share, aligned by global step.
fn coupled_gaps(a: &TrajectoryBundle, b: &TrajectoryBundle) -> Result<[Vec<f64>; 3]> {
    if a.seed_root != b.seed_root {
        return Err(Error::Contract(format!(
            "coupled comparison needs a common seed, got {} and {}",
            a.seed_root, b.seed_root
        )));
    }
    if a.n_paths() != b.n_paths() || a.n != b.n || a.d != b.d {
        return Err(Error::Shape(
            "bundles differ in path count or dimensions".into(),
        ));
    }
    let start = a.start_step.max(b.start_step);
    let (oa, ob) = (start - a.start_step, start - b.start_step);
    let shared = (a.n_nodes() - oa).min(b.n_nodes() - ob);
    if shared < 2 || (a.t_nodes[oa] - b.t_nodes[ob]).abs() > 1e-12 {
        return Err(Error::Shape("bundles do not share a time grid".into()));
    }
    let per_path: Vec<[f64; 3]> = (0..a.n_paths())
        .into_par_iter()
        .map(|p| {
            let (mut sx, mut sy, mut iz): (f64, f64, f64) = (0.0, 0.0, 0.0);
            for j in 0..shared {
                sx = sx.max((a.x_at(p, oa + j) - b.x_at(p, ob + j)).norm_squared());
                sy = sy.max((a.y_at(p, oa + j) - b.y_at(p, ob + j)).norm_squared());
                if j + 1 < shared {
                    let dt = a.t_nodes[oa + j + 1] - a.t_nodes[oa + j];
                    iz += (a.z_at(p, oa + j) - b.z_at(p, ob + j)).norm_squared() * dt;
                }
            }
            [sx, sy, iz]
        })
        .collect();
    Ok([0, 1, 2].map(|c| per_path.iter().map(|v| v[c]).collect()))
}

fn triple(label: &str, gaps: [Vec<f64>; 3], normalizer: f64) -> Result<MomentTriple> {
    let [x, y, z] = gaps;
    Ok(MomentTriple::new(
        EnsembleStat::from_samples(&format!("{label} X"), &x)?,
        EnsembleStat::from_samples(&format!("{label} Y"), &y)?,
        EnsembleStat::from_samples(&format!("{label} Z"), &z)?,
        normalizer,
    ))
}

/// Gaps between two bundles at `eps1 > eps2` with the same seed, normalized by `√eps1 - √eps2`.
pub fn epsilon_gap_from_bundles(
    a: &TrajectoryBundle,
    b: &TrajectoryBundle,
) -> Result<MomentTriple> {
    if a.epsilon < b.epsilon {
        return Err(Error::Config(
            "first bundle must carry the larger epsilon".into(),
        ));
    }
    let label = format!("gap eps={}/{}", a.epsilon, b.epsilon);
    triple(
        &label,
        coupled_gaps(a, b)?,
        a.epsilon.sqrt() - b.epsilon.sqrt(),
    )
}

/// `E sup|X^{ε₁} - X^{ε₂}|²`, the same for `Y`, and `E ∫|Z^{ε₁} - Z^{ε₂}|²`.
pub fn epsilon_gap_moments(
    lab: &Lab,
    eps1: f64,
    eps2: f64,
    n_paths: usize,
    seed: u64,
) -> Result<MomentTriple> {
    if !(eps1 >= eps2 && eps2 >= 0.0) {
        return Err(Error::Config(format!(
            "need eps1 >= eps2 >= 0, got {eps1}, {eps2}"
        )));
    }
    let a = lab.bundle(eps1, n_paths, seed)?;
    let b = lab.bundle(eps2, n_paths, seed)?;
    epsilon_gap_from_bundles(&a, &b)
}

/// Start-point sensitivity: coupled gaps from `x` and `y`, divided by `|x - y|²`.
pub fn x_lipschitz_moments(
    lab: &Lab,
    epsilon: f64,
    x: &Vector,
    y: &Vector,
    n_paths: usize,
    seed: u64,
) -> Result<MomentTriple> {
    let dist2 = (x - y).norm_squared();
    if dist2 == 0.0 {
        return Err(Error::Config("start points must differ".into()));
    }
    let t = lab.problem.t0;
    let a = lab.bundle_from(epsilon, t, x, n_paths, seed)?;
    let b = lab.bundle_from(epsilon, t, y, n_paths, seed)?;
    triple(
        &format!("lipschitz eps={epsilon}"),
        coupled_gaps(&a, &b)?,
        dist2,
    )
}

/// `E sup|X|²`, `E sup|Y|²`, `E ∫|Z|²` from `(t0, x0)`, divided by `1 + |x0|²`.
pub fn second_moments(lab: &Lab, epsilon: f64, n_paths: usize, seed: u64) -> Result<MomentTriple> {
    let b = lab.bundle(epsilon, n_paths, seed)?;
    let per_path: Vec<[f64; 3]> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let (mut sx, mut sy, mut iz): (f64, f64, f64) = (0.0, 0.0, 0.0);
            for j in 0..b.n_nodes() {
                sx = sx.max(b.x_at(p, j).norm_squared());
                sy = sy.max(b.y_at(p, j).norm_squared());
                if j + 1 < b.n_nodes() {
                    iz += b.z_at(p, j).norm_squared() * (b.t_nodes[j + 1] - b.t_nodes[j]);
                }
            }
            [sx, sy, iz]
        })
        .collect();
    let gaps = [0, 1, 2].map(|c| per_path.iter().map(|v| v[c]).collect());
    triple(
        &format!("second moments eps={epsilon}"),
        gaps,
        1.0 + lab.problem.x0.norm_squared(),
    )
}

/// Start-time sensitivity: runs from `(t2, x0)` and `(t1, x0)` compared on
/// `[t1, T]`, divided by `|t1 - t2| (1 + |x0|²)`. Times snap to grid nodes.
pub fn time_shift_moments(
    lab: &Lab,
    epsilon: f64,
    t1: f64,
    t2: f64,
    n_paths: usize,
    seed: u64,
) -> Result<MomentTriple> {
    let grid = &lab.grid;
    let (k1, k2) = (grid.time_index(t1)?, grid.time_index(t2)?);
    if !(k2 < k1 && k1 + 1 < grid.nt && grid.t_node(k2) >= lab.problem.t0) {
        return Err(Error::Config(format!(
            "need t0 <= t2 < t1 < T on the grid, got t1 = {t1}, t2 = {t2}"
        )));
    }
    let (s1, s2) = (grid.t_node(k1), grid.t_node(k2));
    let x = &lab.problem.x0;
    let late = lab.bundle_from(epsilon, s1, x, n_paths, seed)?;
    let early = lab.bundle_from(epsilon, s2, x, n_paths, seed)?;
    triple(
        &format!("time shift eps={epsilon}"),
        coupled_gaps(&early, &late)?,
        (s1 - s2) * (1.0 + x.norm_squared()),
    )
}

/// Whether per-`ε` implied constants stay within a factor `bound` of each other.
#[derive(Debug, Clone, PartialEq)]
pub struct Uniformity {
    pub constants: Vec<(f64, f64)>,
    pub ratio: f64,
    pub passed: bool,
}

pub fn uniformity(constants: Vec<(f64, f64)>, bound: f64) -> Uniformity {
    let max = constants
        .iter()
        .map(|c| c.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let min = constants.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let ratio = if max == 0.0 {
        1.0
    } else if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    };
    Uniformity {
        passed: ratio.is_finite() && ratio <= bound,
        constants,
        ratio,
    }
}

/// True when each value exceeds its predecessor by at most `k` combined standard errors.
pub fn non_increasing_within(stats: &[EnsembleStat], k: f64) -> bool {
    stats.windows(2).all(|w| {
        w[1].estimate
            <= w[0].estimate + k * (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt()
    })
}

/// Conditional variation of `Y` over a partition, with its analytic majorant.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalVariation {
    /// Nested estimate of `Σ E|E[Y_{t_{i+1}} - Y_{t_i} | F_{t_i}]| + E|Y_{t_n}|`.
    pub nested: EnsembleStat,
    /// `E|h(X_T)| + E ∫|g| dr`.
    pub majorant: EnsembleStat,
    pub partition: Vec<f64>,
    pub passed: bool,
}

/// Nested Monte Carlo estimate of the conditional variation.
///
/// The majorant and the terminal term `E|Y_{t_n}|` use all `n_paths` outer
/// paths; the conditional increments use the first `n_outer` of them, restarting `n_inner` paths at every `(t_i, X_{t_i})`
/// with seeds derived from `(seed, outer path, i)`.
pub fn conditional_variation(
    lab: &Lab,
    epsilon: f64,
    partition: &[f64],
    n_paths: usize,
    n_outer: usize,
    n_inner: usize,
    seed: u64,
) -> Result<ConditionalVariation> {
    if n_inner < 2 {
        return Err(Error::Config(format!(
            "n_inner must be at least 2, got {n_inner}"
        )));
    }
    if n_outer == 0 || n_outer > n_paths {
        return Err(Error::Config(format!(
            "n_outer must lie in 1..={n_paths}, got {n_outer}"
        )));
    }
    let grid = &lab.grid;
    let mut steps = Vec::with_capacity(partition.len());
    for &t in partition {
        steps.push(grid.time_index(t)?);
    }
    if steps.len() < 2
        || steps.windows(2).any(|w| w[1] <= w[0])
        || grid.t_node(steps[0]) < lab.problem.t0
        || *steps.last().unwrap() != grid.nt - 1
    {
        return Err(Error::Config(
            "partition must be strictly increasing on the grid and end at the horizon".into(),
        ));
    }
    let c = &lab.problem.coefficients;
    let outer_seed = rng::derive_seed(seed, "conditional-variation/outer", &[]);
    let bundle = lab.bundle(epsilon, n_paths, outer_seed)?;
    let offset = |k: usize| k - bundle.start_step;
    let last = bundle.n_nodes() - 1;

    let majorant_samples: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|p| -> Result<f64> {
            let mut v = c.terminal(&bundle.x_at(p, last))?.norm();
            for j in 0..last {
                let dt = bundle.t_nodes[j + 1] - bundle.t_nodes[j];
                v += c
                    .generator(
                        bundle.t_nodes[j],
                        &bundle.x_at(p, j),
                        &bundle.y_at(p, j),
                        &bundle.z_at(p, j),
                    )?
                    .norm()
                    * dt;
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;

    let field = lab.field(epsilon)?;
    let nested_samples: Vec<f64> = (0..n_outer)
        .into_par_iter()
        .map(|o| -> Result<f64> {
            let mut v = 0.0;
            for (i, w) in steps.windows(2).enumerate() {
                let (k0, k1) = (w[0], w[1]);
                let x0 = bundle.x_at(o, offset(k0));
                let y0 = bundle.y_at(o, offset(k0));
                let inner_seed =
                    rng::derive_seed(seed, "conditional-variation/inner", &[o as u64, i as u64]);
                let inner = simulate_from(
                    &lab.problem,
                    &field,
                    epsilon,
                    grid.t_node(k0),
                    &x0,
                    n_inner,
                    inner_seed,
                )?;
                let mut mean = Vector::zeros(lab.problem.n);
                for q in 0..n_inner {
                    mean += inner.y_at(q, k1 - k0);
                }
                mean /= n_inner as f64;
                v += (mean - y0).norm();
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;

    let terminal: Vec<f64> = (0..n_paths)
        .map(|p| bundle.y_at(p, offset(*steps.last().unwrap())).norm())
        .collect();
    let increments = EnsembleStat::from_samples("conditional increments", &nested_samples)?;
    let terminal = EnsembleStat::from_samples("terminal value", &terminal)?;
    let nested = EnsembleStat {
        estimate: increments.estimate + terminal.estimate,
        std_error: increments.std_error.hypot(terminal.std_error),
        samples: n_outer,
        label: format!("conditional variation eps={epsilon}"),
    };
    let majorant = EnsembleStat::from_samples(
        &format!("variation majorant eps={epsilon}"),
        &majorant_samples,
    )?;
    let slack = 3.0 * (nested.std_error.powi(2) + majorant.std_error.powi(2)).sqrt();
    Ok(ConditionalVariation {
        passed: nested.estimate <= majorant.estimate + slack,
        nested,
        majorant,
        partition: steps.iter().map(|&k| grid.t_node(k)).collect(),
    })
}

/// Uniform partition of `[t0, T]` into `intervals` pieces.
pub fn uniform_partition(t0: f64, horizon: f64, intervals: usize) -> Vec<f64> {
    (0..=intervals)
        .map(|i| {
            if i == intervals {
                horizon
            } else {
                t0 + (horizon - t0) * i as f64 / intervals as f64
            }
        })
        .collect()
}

/// `ρ(a, b) = ∫ (|a(s) - b(s)| ∧ 1) ds` by the trapezoid rule.
pub fn meyer_zheng_distance(a: &GridPath, b: &GridPath) -> Result<f64> {
    if a.t_nodes != b.t_nodes || a.dim() != b.dim() {
        return Err(Error::Shape("paths live on different grids".into()));
    }
    let clipped: Vec<f64> = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(u, v)| (u - v).norm().min(1.0))
        .collect();
    Ok(a.t_nodes
        .windows(2)
        .zip(clipped.windows(2))
        .map(|(t, c)| 0.5 * (t[1] - t[0]) * (c[0] + c[1]))
        .sum())
}

/// `E ρ(Y^ε, 𝒴)` over an ensemble.
pub fn mean_meyer_zheng(
    lab: &Lab,
    epsilon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<EnsembleStat> {
    let limit = lab.limit_path()?;
    let reference = GridPath::new(limit.t_nodes.clone(), limit.y_values.clone())?;
    let bundle = lab.bundle(epsilon, n_paths, seed)?;
    let samples: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let path = GridPath::new(
                reference.t_nodes.clone(),
                (0..bundle.n_nodes()).map(|j| bundle.y_at(p, j)).collect(),
            )?;
            meyer_zheng_distance(&path, &reference)
        })
        .collect::<Result<_>>()?;
    EnsembleStat::from_samples(&format!("E rho(Y, limit) eps={epsilon}"), &samples)
}

/// Least-squares line through `(log ε, log value)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub pairs: Vec<(f64, f64)>,
}

pub fn fit_rate(values: &[(f64, f64)]) -> Result<RateFit> {
    if values.len() < 3 {
        return Err(Error::Config(format!(
            "rate fit needs at least 3 points, got {}",
            values.len()
        )));
    }
    if values.windows(2).any(|w| !(w[1].0 < w[0].0)) {
        return Err(Error::Config(
            "rate fit points must be strictly decreasing in epsilon".into(),
        ));
    }
    if let Some(bad) = values.iter().find(|(e, v)| !(*e > 0.0 && *v > 0.0)) {
        return Err(Error::Domain(format!(
            "rate fit needs positive values, got ({}, {})",
            bad.0, bad.1
        )));
    }
    let pairs: Vec<(f64, f64)> = values.iter().map(|(e, v)| (e.ln(), v.ln())).collect();
    let m = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let sxy = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    let syy = pairs.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>();
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Ok(RateFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
        pairs,
    })
}
