//! Subcommand bodies. Each reads a validated config and emits files into a [`Run`].

use std::fs;
use std::io::BufReader;
use std::path::Path;

use fbsde_core::asymptotics::{self, EnsembleStat, Lab, MomentTriple};
use fbsde_core::columnar;
use fbsde_core::ldp::{self, MinimizeOptions, RateResult};
use fbsde_core::limit::{self, BvpOptions};
use fbsde_core::pde::{self, BoundaryMode, FieldOptions, SpaceTimeGrid};
use fbsde_core::problem::{self, EvalBox, ProblemSpec};
use fbsde_core::registry::RegistryEntry;
use fbsde_core::simulate;
use fbsde_core::{Error, GridPath, Vector};
use rayon::prelude::*;

use crate::config::Config;
use crate::output::{Cell, Run};
use crate::CliError;

/// Keys that determine a solved field; a field cache must agree on all of them.
const FIELD_KEYS: &[&str] = &[
    "problem",
    "n",
    "a",
    "b",
    "c",
    "kappa",
    "sigma0",
    "t0",
    "horizon",
    "nt",
    "nx",
    "box_lo",
    "box_hi",
    "margin",
    "boundary",
    "picard_tol",
    "picard_max",
];

pub fn build_problem(cfg: &Config, epsilons: &[f64]) -> Result<ProblemSpec, CliError> {
    let name = cfg.string("problem").unwrap_or("linear");
    let entry = RegistryEntry::from_name(
        name,
        cfg.opt_float("a"),
        cfg.opt_float("b"),
        cfg.opt_float("c"),
        cfg.opt_float("kappa"),
        cfg.opt_float("sigma0"),
    )?;
    let n = cfg.int("n", 1);
    if !(1..=2).contains(&n) {
        return Err(Error::Config(format!(
            "state dimension n = {n} is not supported (use 1 or 2)"
        ))
        .into());
    }
    let x0 = match cfg.floats("x0") {
        None => Vector::from_element(n, 1.0),
        Some(v) if v.len() == 1 => Vector::from_element(n, v[0]),
        Some(v) if v.len() == n => Vector::from_vec(v),
        Some(v) => {
            return Err(Error::Config(format!("x0 has {} entries for n = {n}", v.len())).into())
        }
    };
    let (t0, horizon) = (cfg.float("t0", 0.0), cfg.float("horizon", 0.5));
    let positive: Vec<f64> = epsilons.iter().copied().filter(|e| *e > 0.0).collect();
    Ok(ProblemSpec::new(
        entry.build(n),
        n,
        t0,
        horizon,
        x0,
        positive,
        EvalBox::cube((t0, horizon), cfg.float("eval_half_width", 1.0)),
    )?)
}

/// Config epsilons in `[0, 1]`, sorted descending without duplicates.
pub fn epsilons(cfg: &Config, default: &[f64]) -> Result<Vec<f64>, CliError> {
    let mut e = cfg.floats("epsilons").unwrap_or_else(|| default.to_vec());
    if let Some(bad) = e.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
        return Err(Error::Config(format!("epsilon {bad} is outside [0, 1]")).into());
    }
    e.sort_by(|a, b| b.total_cmp(a));
    e.dedup();
    if e.is_empty() {
        return Err(Error::Config("the epsilon list is empty".into()).into());
    }
    Ok(e)
}

fn build_lab(cfg: &Config, problem: ProblemSpec, run: &mut Run) -> Result<Lab, CliError> {
    let grid = SpaceTimeGrid::for_problem(
        &problem,
        cfg.int("nt", 101),
        cfg.float("box_lo", -8.0),
        cfg.float("box_hi", 8.0),
        cfg.int("nx", 161),
    )?
    .with_margin(cfg.float("margin", 0.25))?;
    let boundary = match cfg.string("boundary") {
        Some("characteristic") => BoundaryMode::Characteristic,
        _ => BoundaryMode::LimitField,
    };
    let defaults = FieldOptions::default();
    let options = FieldOptions {
        picard_tol: cfg.float("picard_tol", defaults.picard_tol),
        picard_max: cfg.int("picard_max", defaults.picard_max),
        boundary,
    };
    let lab = Lab::new(problem, grid, options)?;
    if let Some(dir) = cfg.string("field_cache") {
        load_field_cache(cfg, &lab, Path::new(dir), run)?;
    }
    Ok(lab)
}

fn load_field_cache(cfg: &Config, lab: &Lab, dir: &Path, run: &mut Run) -> Result<(), CliError> {
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)
        .map_err(|e| CliError::Parse(format!("field cache manifest: {e}")))?;
    let ours = cfg.to_json();
    for key in FIELD_KEYS {
        if manifest["config"].get(key) != ours.get(key) {
            return Err(Error::Config(format!(
                "field cache in {} was solved with a different `{key}`",
                dir.display()
            ))
            .into());
        }
    }
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .filter(|n| n.starts_with("field_eps") && n.ends_with(".txt"))
        .collect();
    names.sort();
    for name in names {
        let field = columnar::read_field(BufReader::new(fs::File::open(dir.join(&name))?))?;
        lab.preload(field)?;
        run.log(&format!("loaded cached field {name}"));
    }
    Ok(())
}

/// Runs `f` for each epsilon in parallel; results keep the input order and the
/// first failing entry (in that order) decides the error.
fn per_epsilon<T: Send>(
    eps: &[f64],
    f: impl Fn(usize, f64) -> fbsde_core::Result<T> + Sync,
) -> Result<Vec<T>, CliError> {
    let results: Vec<fbsde_core::Result<T>> =
        eps.par_iter().enumerate().map(|(i, e)| f(i, *e)).collect();
    Ok(results
        .into_iter()
        .collect::<fbsde_core::Result<Vec<T>>>()?)
}

fn field_name(eps: f64) -> String {
    format!("field_eps{eps}.txt")
}

pub fn check_assumptions(cfg: &Config, run: &mut Run) -> Result<(), CliError> {
    let eps: Vec<f64> = epsilons(cfg, &[1.0])?
        .into_iter()
        .filter(|e| *e > 0.0)
        .collect();
    let problem = build_problem(cfg, &eps)?;
    let seed = run.seed(cfg.seed(), "audit", &[]);
    let report = problem::audit(&problem, cfg.int("samples", 2000), seed)?;
    let rows: Vec<Vec<Cell>> = report
        .checks
        .iter()
        .map(|c| {
            vec![
                c.name.as_str().into(),
                c.estimate.into(),
                c.declared.into(),
                c.margin.into(),
                c.samples.into(),
                c.passed.into(),
            ]
        })
        .collect();
    run.csv(
        "assumptions.csv",
        &[
            "check", "estimate", "declared", "margin", "samples", "passed",
        ],
        &rows,
    )?;
    for c in &report.checks {
        run.push_assertion(&c.name, c.estimate, c.declared, "audit", c.passed);
    }
    Ok(())
}

pub fn solve_field(cfg: &Config, run: &mut Run) -> Result<(), CliError> {
    let eps = epsilons(cfg, &[1.0, 0.1, 0.0])?;
    let problem = build_problem(cfg, &eps)?;
    let lab = build_lab(cfg, problem, run)?;
    let solved = per_epsilon(&eps, |_, e| {
        let f = lab.field(e)?;
        let residual = pde::parabolic_residual(&f, &lab.problem)?;
        Ok((f, residual))
    })?;
    let mut rows = Vec::new();
    for (e, (field, residual)) in eps.iter().zip(&solved) {
        run.emit(&field_name(*e), |w| Ok(columnar::write_field(field, w)?))?;
        let b = pde::field_bounds(field);
        rows.push(vec![
            (*e).into(),
            b.sup_u.into(),
            b.sup_grad.into(),
            b.terminal_mismatch.into(),
            (*residual).into(),
        ]);
    }
    run.csv(
        "field_summary.csv",
        &[
            "epsilon",
            "sup_u",
            "sup_grad",
            "terminal_mismatch",
            "parabolic_residual",
        ],
        &rows,
    )?;
    if let Some(bound) = cfg.opt_float("assert_max_residual") {
        let worst = solved.iter().map(|s| s.1).fold(0.0, f64::max);
        run.assert_le("max_parabolic_residual", worst, bound);
    }
    Ok(())
}

pub fn limit(cfg: &Config, run: &mut Run) -> Result<(), CliError> {
    let problem = build_problem(cfg, &[])?;
    let mut opts = BvpOptions::new(
        cfg.float("bvp_dt", (problem.horizon - problem.t0) / 100.0),
        cfg.float("bvp_tol", 1e-12),
    );
    opts.max_iter = cfg.int("bvp_max_iter", opts.max_iter);
    opts.relaxation = cfg.float("relaxation", opts.relaxation);
    let sol = match cfg.string("method") {
        Some("picard") => limit::solve_bvp_picard(&problem, problem.t0, &problem.x0, &opts)?,
        _ => limit::solve_bvp_shooting(&problem, problem.t0, &problem.x0, &opts)?,
    };
    run.emit("limit.txt", |w| Ok(columnar::write_ode(&sol, w)?))?;
    let y0 = sol.y_initial().clone();
    let mut header = vec![
        "method".to_string(),
        "iterations".into(),
        "shooting_residual".into(),
    ];
    header.extend((0..problem.n).map(|l| format!("y0_{l}")));
    let mut row: Vec<Cell> = vec![
        sol.method.as_str().into(),
        sol.iterations.into(),
        sol.shooting_residual.into(),
    ];
    row.extend(y0.iter().map(|v| Cell::Real(*v)));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    run.csv("limit_summary.csv", &header, &[row])?;
    if let Some(expected) = cfg.floats("assert_y0") {
        if expected.len() != y0.len() {
            return Err(Error::Config(format!("assert_y0 needs {} entries", y0.len())).into());
        }
        let gap = y0
            .iter()
            .zip(&expected)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        run.assert_le("y0_error", gap, cfg.float("assert_tol", 1e-8));
    }
    Ok(())
}

pub fn simulate(cfg: &Config, run: &mut Run) -> Result<(), CliError> {
    let eps = epsilons(cfg, &[0.5, 0.1, 0.0])?;
    let problem = build_problem(cfg, &eps)?;
    let lab = build_lab(cfg, problem, run)?;
    let paths = cfg.int("paths", 100);
    // One seed for every epsilon: the bundles are synchronously coupled.
    let seed = run.seed(cfg.seed(), "bundle", &[]);
    let bundles = per_epsilon(&eps, |_, e| {
        let b = lab.bundle(e, paths, seed)?;
        let r = simulate::backward_residual(&b, &lab.problem)?;
        Ok((b, r))
    })?;
    let mut rows = Vec::new();
    for (e, (bundle, residual)) in eps.iter().zip(&bundles) {
        run.emit(&format!("bundle_eps{e}.txt"), |w| {
            Ok(columnar::write_bundle(bundle, w)?)
        })?;
        rows.push(vec![
            (*e).into(),
            bundle.n_paths().into(),
            residual.overall_rms().into(),
            residual.terminal_mismatch.into(),
        ]);
    }
    run.csv(
        "simulate_summary.csv",
        &[
            "epsilon",
            "paths",
            "backward_residual_rms",
            "terminal_mismatch",
        ],
        &rows,
    )?;
    if let Some(bound) = cfg.opt_float("assert_max_residual") {
        let worst = bundles
            .iter()
            .map(|b| b.1.overall_rms())
            .fold(0.0, f64::max);
        run.assert_le("max_backward_residual_rms", worst, bound);
    }
    Ok(())
}

const MOMENT_HEADER: &[&str] = &[
    "x",
    "x_se",
    "y",
    "y_se",
    "z",
    "z_se",
    "implied_x",
    "implied_y",
    "implied_z",
    "implied",
];

fn moment_cells(m: &MomentTriple) -> Vec<Cell> {
    let mut c = Vec::new();
    for s in [&m.x, &m.y, &m.z] {
        c.push(s.estimate.into());
        c.push(s.std_error.into());
    }
    c.extend(m.implied.iter().map(|v| Cell::Real(*v)));
    c.push(m.implied_constant().into());
    c
}

/// Moment table, uniformity of the implied constants and per-component rate fits.
fn emit_moments(
    cfg: &Config,
    run: &mut Run,
    keys: &[&str],
    labels: Vec<Vec<f64>>,
    moments: &[MomentTriple],
) -> Result<(), CliError> {
    let mut header: Vec<&str> = keys.to_vec();
    header.extend_from_slice(MOMENT_HEADER);
    let rows: Vec<Vec<Cell>> = labels
        .iter()
        .zip(moments)
        .map(|(l, m)| {
            let mut r: Vec<Cell> = l.iter().map(|v| Cell::Real(*v)).collect();
            r.extend(moment_cells(m));
            r
        })
        .collect();
    run.csv("moments.csv", &header, &rows)?;

    let constants: Vec<(f64, f64)> = labels
        .iter()
        .zip(moments)
        .map(|(l, m)| (l[0], m.implied_constant()))
        .collect();
    let u = asymptotics::uniformity(constants, cfg.float("assert_max_ratio", 2.0));
    run.csv(
        "uniformity.csv",
        &["min_implied", "max_implied", "ratio"],
        &[vec![
            u.constants
                .iter()
                .map(|c| c.1)
                .fold(f64::INFINITY, f64::min)
                .into(),
            u.constants.iter().map(|c| c.1).fold(0.0, f64::max).into(),
            u.ratio.into(),
        ]],
    )?;
    if let Some(bound) = cfg.opt_float("assert_max_ratio") {
        run.assert_le("implied_constant_ratio", u.ratio, bound);
    }

    let mut fits = Vec::new();
    for (name, pick) in [("x", 0usize), ("y", 1), ("z", 2)] {
        let pairs: Vec<(f64, f64)> = labels
            .iter()
            .zip(moments)
            .map(|(l, m)| (l[0], [&m.x, &m.y, &m.z][pick].estimate))
            .collect();
        match asymptotics::fit_rate(&pairs) {
            Ok(f) => fits.push(vec![
                name.into(),
                f.slope.into(),
                f.intercept.into(),
                f.r_squared.into(),
            ]),
            Err(e) => run.notes.push(format!("rate fit for {name} skipped: {e}")),
        }
    }
    run.csv(
        "rate_fit.csv",
        &["component", "slope", "intercept", "r_squared"],
        &fits,
    )
}

pub fn sweep_lemma(which: u8, cfg: &Config, run: &mut Run) -> Result<(), CliError> {
    let eps: Vec<f64> = epsilons(cfg, &[1.0, 0.3, 0.1, 0.03])?
        .into_iter()
        .filter(|e| *e > 0.0)
        .collect();
    let problem = build_problem(cfg, &eps)?;
    let lab = build_lab(cfg, problem, run)?;
    let paths = cfg.int("paths", 1000);
    let seed = run.seed(cfg.seed(), "moments", &[]);
    match which {
        1 => {
            let x = lab.problem.x0.clone();
            let y = x.add_scalar(cfg.float("x_shift", 0.5));
            let m = per_epsilon(&eps, |_, e| {
                asymptotics::x_lipschitz_moments(&lab, e, &x, &y, paths, seed)
            })?;
            emit_moments(
                cfg,
                run,
                &["epsilon"],
                eps.iter().map(|e| vec![*e]).collect(),
                &m,
            )
        }
        2 => {
            let m = per_epsilon(&eps, |_, e| {
                asymptotics::second_moments(&lab, e, paths, seed)
            })?;
            emit_moments(
                cfg,
                run,
                &["epsilon"],
                eps.iter().map(|e| vec![*e]).collect(),
                &m,
            )
        }
        3 => {
            let (t0, horizon) = (lab.problem.t0, lab.problem.horizon);
            let t1 = cfg.float("t1", t0 + 0.8 * (horizon - t0));
            let t2 = cfg.float("t2", t0);
            let m = per_epsilon(&eps, |_, e| {
                asymptotics::time_shift_moments(&lab, e, t1, t2, paths, seed)
            })?;
            emit_moments(
                cfg,
                run,
                &["epsilon"],
                eps.iter().map(|e| vec![*e]).collect(),
                &m,
            )
        }
        _ => {
            if eps.len() < 2 {
                return Err(
                    Error::Config("sweep-lemma4 needs at least two epsilons".into()).into(),
                );
            }
            let pairs: Vec<(f64, f64)> = eps.windows(2).map(|w| (w[0], w[1])).collect();
            let firsts: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let m = per_epsilon(&firsts, |i, _| {
                asymptotics::epsilon_gap_moments(&lab, pairs[i].0, pairs[i].1, paths, seed)
            })?;
            emit_moments(
                cfg,
                run,
                &["epsilon1", "epsilon2"],
                pairs.iter().map(|p| vec![p.0, p.1]).collect(),
                &m,
            )
        }
    }
}

fn stat_row(e: f64, s: &EnsembleStat) -> Vec<Cell> {
    vec![
        e.into(),
        s.estimate.into(),
        s.std_error.into(),
        s.samples.into(),
    ]
}

pub fn theorem1(cfg: &Config, run: &mut Run) -> Result<(), CliError> {
    let eps: Vec<f64> = epsilons(cfg, &[0.8, 0.4, 0.2, 0.1, 0.05])?
        .into_iter()
        .filter(|e| *e > 0.0)
        .collect();
    let problem = build_problem(cfg, &eps)?;
    let lab = build_lab(cfg, problem, run)?;
    let paths = cfg.int("paths", 1000);
    let delta = cfg.float("delta", 0.25);

    let sup_seed = run.seed(cfg.seed(), "sup-deviation", &[]);
    let sup = per_epsilon(&eps, |_, e| {
        asymptotics::sup_deviation_probability(&lab, e, delta, paths, sup_seed)
    })?;
    let rows: Vec<Vec<Cell>> = eps.iter().zip(&sup).map(|(e, s)| stat_row(*e, s)).collect();
    run.csv(
        "sup_deviation.csv",
        &["epsilon", "probability", "std_error", "paths"],
        &rows,
    )?;

    let mz_seed = run.seed(cfg.seed(), "meyer-zheng", &[]);
    let mz = per_epsilon(&eps, |_, e| {
        asymptotics::mean_meyer_zheng(&lab, e, paths, mz_seed)
    })?;
    let rows: Vec<Vec<Cell>> = eps.iter().zip(&mz).map(|(e, s)| stat_row(*e, s)).collect();
    run.csv(
        "meyer_zheng.csv",
        &["epsilon", "distance", "std_error", "paths"],
        &rows,
    )?;
    let pairs: Vec<(f64, f64)> = eps.iter().zip(&mz).map(|(e, s)| (*e, s.estimate)).collect();
    let fit = asymptotics::fit_rate(&pairs);
    match &fit {
        Ok(f) => run.csv(
            "meyer_zheng_rate.csv",
            &["slope", "intercept", "r_squared"],
            &[vec![f.slope.into(), f.intercept.into(), f.r_squared.into()]],
        )?,
        Err(e) => run.notes.push(format!("Meyer-Zheng rate fit skipped: {e}")),
    }

    let partitions = cfg.ints("partitions").unwrap_or_else(|| vec![4, 8, 16]);
    let cv_eps = cfg.float("variation_epsilon", eps[eps.len() / 2]);
    let (outer, inner) = (cfg.int("outer", 32), cfg.int("inner", 256));
    let (t0, horizon) = (lab.problem.t0, lab.problem.horizon);
    let mut cv = Vec::new();
    for &m in &partitions {
        let seed = run.seed(cfg.seed(), "conditional-variation", &[m as u64]);
        let partition = asymptotics::uniform_partition(t0, horizon, m);
        cv.push(asymptotics::conditional_variation(
            &lab,
            cv_eps,
            &partition,
            paths.max(outer),
            outer,
            inner,
            seed,
        )?);
    }
    let rows: Vec<Vec<Cell>> = partitions
        .iter()
        .zip(&cv)
        .map(|(m, c)| {
            vec![
                (*m).into(),
                cv_eps.into(),
                c.nested.estimate.into(),
                c.nested.std_error.into(),
                c.majorant.estimate.into(),
                c.majorant.std_error.into(),
                c.passed.into(),
            ]
        })
        .collect();
    run.csv(
        "conditional_variation.csv",
        &[
            "intervals",
            "epsilon",
            "variation",
            "variation_se",
            "majorant",
            "majorant_se",
            "within_bound",
        ],
        &rows,
    )?;

    if let Some(k) = cfg.opt_float("assert_monotone_se") {
        let worst = sup
            .windows(2)
            .map(|w| {
                let se = (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
                let rise = w[1].estimate - w[0].estimate;
                if se > 0.0 {
                    rise / se
                } else if rise > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            })
            .fold(f64::NEG_INFINITY, f64::max);
        run.assert_le("sup_deviation_rise_in_se", worst, k);
    }
    if let Some(bound) = cfg.opt_float("assert_final_probability_max") {
        run.assert_le(
            "sup_deviation_at_smallest_epsilon",
            sup[sup.len() - 1].estimate,
            bound,
        );
    }
    if let Some(min_slope) = cfg.opt_float("assert_mz_slope_min") {
        let rise = mz
            .windows(2)
            .map(|w| w[1].estimate - w[0].estimate)
            .fold(f64::NEG_INFINITY, f64::max);
        run.assert_le("meyer_zheng_largest_increase", rise, 0.0);
        let slope = fit.as_ref().map_or(f64::NAN, |f| f.slope);
        run.push_assertion(
            "meyer_zheng_slope",
            slope,
            min_slope,
            ">=",
            slope >= min_slope,
        );
    }
    if cfg.boolean("assert_variation", false) {
        let failed = cv.iter().filter(|c| !c.passed).count();
        run.assert_le("variation_bound_failures", failed as f64, 0.0);
    }
    Ok(())
}

fn rate_row(name: &str, r: &RateResult) -> Vec<Cell> {
    vec![
        name.into(),
        r.value.into(),
        r.feasible.into(),
        r.converged.into(),
        r.iterations.into(),
    ]
}

pub fn ldp(cfg: &Config, run: &mut Run) -> Result<(), CliError> {
    let eps: Vec<f64> = epsilons(cfg, &[0.1, 0.05, 0.02])?
        .into_iter()
        .filter(|e| *e > 0.0)
        .collect();
    let problem = build_problem(cfg, &eps)?;
    let lab = build_lab(cfg, problem, run)?;
    let n = lab.problem.n;
    let x0 = lab.problem.x0.clone();
    let vector = |key: &str, default: &Vector| -> Result<Vector, CliError> {
        match cfg.floats(key) {
            None => Ok(default.clone()),
            Some(v) if v.len() == 1 => Ok(Vector::from_element(n, v[0])),
            Some(v) if v.len() == n => Ok(Vector::from_vec(v)),
            Some(_) => Err(Error::Config(format!("{key} needs 1 or {n} entries")).into()),
        }
    };
    let t = lab.grid.t_nodes();
    let phi = match cfg.string("path").unwrap_or("constant") {
        "limit" => {
            let l = lab.limit_path()?;
            GridPath::new(l.t_nodes.clone(), l.x_values.clone())?
        }
        "linear" => {
            let end = vector("path_end", &x0)?;
            let span = t[t.len() - 1] - t[0];
            let values = t
                .iter()
                .map(|s| &x0 + (&end - &x0) * ((s - t[0]) / span))
                .collect();
            GridPath::new(t.clone(), values)?
        }
        _ => {
            let v = vector("path_value", &x0)?;
            GridPath::new(t.clone(), vec![v; t.len()])?
        }
    };
    let opts = MinimizeOptions {
        grad_tol: cfg.float("grad_tol", 1e-9),
        max_iter: cfg.int("max_iter", 2000),
        range_tol: cfg.float("range_tol", 1e-8),
    };
    let field = lab.field(0.0)?;
    run.emit("path.txt", |w| Ok(columnar::write_path(&phi, "target", w)?))?;

    let mut rows = vec![rate_row(
        "forward_action_path",
        &ldp::action_i1(&phi, &*field, &lab.problem, opts.range_tol)?,
    )];
    if cfg.boolean("backward", false) {
        let search = (
            cfg.float("search_lo", lab.grid.x_lo),
            cfg.float("search_hi", lab.grid.x_hi),
        );
        let r = ldp::action_i2(&phi, &lab.problem, &*field, search, opts.range_tol)?;
        rows.push(rate_row("backward_action_path", &r));
    }
    if cfg.has("target") {
        let target = vector("target", &x0)?;
        let r = ldp::minimize_i1_endpoint(
            &lab.problem,
            &*field,
            &target,
            cfg.int("intervals", 64),
            &opts,
        )?;
        if let Some(p) = &r.minimizing_path {
            run.emit("minimizer.txt", |w| {
                Ok(columnar::write_path(p, "endpoint-minimizer", w)?)
            })?;
        }
        rows.push(rate_row("endpoint_minimum", &r));
    }
    run.csv(
        "rate.csv",
        &["quantity", "value", "feasible", "converged", "iterations"],
        &rows,
    )?;

    if eps.is_empty() {
        return Ok(());
    }
    let seed = run.seed(cfg.seed(), "ldp-curve", &[]);
    let curve = ldp::empirical_ldp_curve(
        &lab,
        &*field,
        &phi,
        cfg.float("delta", 0.25),
        &eps,
        cfg.int("paths", 10_000),
        seed,
        cfg.boolean("tilt", true),
        &opts,
    )?;
    let rows: Vec<Vec<Cell>> = curve
        .points
        .iter()
        .map(|p| {
            vec![
                p.epsilon.into(),
                p.scaled_log.into(),
                p.probability.into(),
                p.std_error.into(),
                p.hits.into(),
                p.censored.into(),
                curve.prediction.into(),
            ]
        })
        .collect();
    run.csv(
        "ldp_curve.csv",
        &[
            "epsilon",
            "scaled_log_probability",
            "probability",
            "std_error",
            "hits",
            "censored",
            "prediction",
        ],
        &rows,
    )?;
    if !curve.prediction_in_tube {
        run.notes
            .push("the path realizing the prediction leaves the tube; the prediction is a lower estimate of the rate".into());
    }
    if let Some(factor) = cfg.opt_float("assert_sandwich") {
        let point = curve
            .points
            .iter()
            .rev()
            .find(|p| !p.censored)
            .expect("at least one uncensored entry");
        let pred = curve.prediction;
        let measured = (point.scaled_log - pred).abs() / pred.abs();
        run.assert_le("ldp_sandwich_relative_gap", measured, factor);
    }
    Ok(())
}
