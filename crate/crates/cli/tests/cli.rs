use std::fs;
use std::path::Path;
use std::process::Command as Process;

use fbsde_cli::{execute, Cli, Command};
use fbsde_core::columnar;

fn cli(command: Command, config: &Path, out: &Path) -> Cli {
    Cli {
        command,
        config: Some(config.to_path_buf()),
        out: Some(out.to_path_buf()),
        seed: None,
        threads: None,
        verbose: false,
    }
}

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

#[test]
fn limit_matches_riccati_closed_form_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    // u(t, x) = p(t) x with p' = 2p² - 2, p(T) = c, so p(0) = tanh(2T + artanh c).
    let c = 0.5_f64;
    let expected = (2.0 * 0.5 + c.atanh()).tanh() * 1.5;
    let cfg = write_config(
        tmp.path(),
        "limit.toml",
        &format!(
            "c = {c}\nx0 = [1.5]\nbvp_dt = 0.001\nassert_y0 = [{expected}]\nassert_tol = 1e-9\n"
        ),
    );
    let first = execute(&cli(Command::Limit, &cfg, &tmp.path().join("a"))).unwrap();
    assert!(first.passed, "{}", manifest(&first.dir));
    let second = execute(&cli(Command::Limit, &cfg, &tmp.path().join("b"))).unwrap();
    assert_eq!(
        manifest(&first.dir)["files"],
        manifest(&second.dir)["files"]
    );
    let sol =
        columnar::read_ode(fs::read(first.dir.join("limit.txt")).unwrap().as_slice()).unwrap();
    assert!((sol.y_values[0][0] - expected).abs() < 1e-9);
}

#[test]
fn linear_problem_passes_every_assumption_check() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "epsilons = [1.0, 0.5, 0.1]\nsamples = 500\n",
    );
    let out = execute(&cli(Command::CheckAssumptions, &cfg, tmp.path())).unwrap();
    assert!(out.passed);
    let rows = read_csv(&out.dir.join("assumptions.csv"));
    assert!(!rows.is_empty());
    for r in rows {
        assert!(r[3].parse::<f64>().unwrap() > 0.0, "{r:?}");
    }
}

#[test]
fn zero_noise_bundle_replicates_the_limit_path() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = write_config(tmp.path(), "s.toml", "epsilons = [0.0]\npaths = 4\n");
    let lim = write_config(tmp.path(), "l.toml", "bvp_dt = 0.005\n");
    let s = execute(&cli(Command::Simulate, &sim, tmp.path())).unwrap();
    let l = execute(&cli(Command::Limit, &lim, tmp.path())).unwrap();
    let bundle =
        columnar::read_bundle(fs::read(s.dir.join("bundle_eps0.txt")).unwrap().as_slice()).unwrap();
    let limit = columnar::read_ode(fs::read(l.dir.join("limit.txt")).unwrap().as_slice()).unwrap();
    assert_eq!(bundle.n_nodes(), limit.t_nodes.len());
    for p in 0..bundle.n_paths() {
        assert_eq!(bundle.x[p], bundle.x[0]);
        assert_eq!(bundle.y[p], bundle.y[0]);
        for j in 0..bundle.n_nodes() {
            // Euler against RK4 on the same nodes: first-order agreement.
            assert!((bundle.x_at(p, j)[0] - limit.x_values[j][0]).abs() < 5e-3);
            assert!((bundle.y_at(p, j)[0] - limit.y_values[j][0]).abs() < 5e-3);
        }
    }
}

#[test]
fn csv_rows_are_ordered_by_descending_epsilon() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "s.toml",
        "epsilons = [0.1, 0.5, 0.3]\npaths = 2\n",
    );
    let out = execute(&cli(Command::Simulate, &cfg, tmp.path())).unwrap();
    let eps: Vec<f64> = read_csv(&out.dir.join("simulate_summary.csv"))
        .iter()
        .map(|r| r[0].parse().unwrap())
        .collect();
    assert_eq!(eps, vec![0.5, 0.3, 0.1]);
}

#[test]
fn field_cache_is_reused_and_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let solve = write_config(tmp.path(), "f.toml", "epsilons = [0.5]\nnt = 81\n");
    let field = execute(&cli(Command::SolveField, &solve, tmp.path())).unwrap();
    let cache = field.dir.display().to_string();
    let good = write_config(
        tmp.path(),
        "s.toml",
        &format!("epsilons = [0.5]\nnt = 81\npaths = 3\nfield_cache = \"{cache}\"\n"),
    );
    let bad = write_config(
        tmp.path(),
        "b.toml",
        &format!("epsilons = [0.5]\nnt = 91\npaths = 3\nfield_cache = \"{cache}\"\n"),
    );
    assert!(execute(&cli(Command::Simulate, &good, tmp.path())).is_ok());
    let err = execute(&cli(Command::Simulate, &bad, tmp.path())).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn seed_override_changes_derived_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "s.toml",
        "epsilons = [0.5]\npaths = 2\nseed = 1\n",
    );
    let a = execute(&cli(Command::Simulate, &cfg, &tmp.path().join("a"))).unwrap();
    let mut c = cli(Command::Simulate, &cfg, &tmp.path().join("b"));
    c.seed = Some(2);
    let b = execute(&c).unwrap();
    let (ma, mb) = (manifest(&a.dir), manifest(&b.dir));
    assert_eq!(mb["seed_root"], 2);
    assert_ne!(ma["seeds"]["bundle"], mb["seeds"]["bundle"]);
    assert_ne!(ma["files"], mb["files"]);
}

#[test]
fn failures_map_to_their_exit_codes_and_leave_no_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let case = |name: &str, text: &str, command: Command| {
        let cfg = write_config(tmp.path(), name, text);
        execute(&cli(command, &cfg, &out)).unwrap_err().exit_code()
    };
    assert_eq!(case("u.toml", "unknown_key = 1\n", Command::Limit), 2);
    assert_eq!(case("t.toml", "nt = \"many\"\n", Command::Simulate), 2);
    assert_eq!(case("p.toml", "nt = \n", Command::Limit), 16);
    assert_eq!(case("e.toml", "epsilons = [2.0]\n", Command::Simulate), 3);
    // A box too small for the noise level: paths leave the safe region.
    assert_eq!(
        case(
            "x.toml",
            "epsilons = [1.0]\nbox_lo = -1.5\nbox_hi = 1.5\nnx = 31\npaths = 200\n",
            Command::Simulate
        ),
        9
    );
    assert_eq!(
        case("h.toml", "path = \"linear\"\npath_end = [2.9]\ndelta = 0.01\nepsilons = [0.01]\npaths = 50\ntilt = false\nbox_lo = -8.0\nbox_hi = 8.0\n", Command::Ldp),
        14
    );
    let missing = cli(Command::Limit, &tmp.path().join("absent.toml"), &out);
    assert_eq!(execute(&missing).unwrap_err().exit_code(), 15);
    let leftovers: Vec<_> = fs::read_dir(&out)
        .map(|d| d.flatten().collect())
        .unwrap_or_default();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn failed_assertion_exits_with_one_and_reports_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "l.toml", "assert_y0 = [0.0]\n");
    let out = execute(&cli(Command::Limit, &cfg, tmp.path())).unwrap();
    assert_eq!(out.exit_code(), 1);
    let m = manifest(&out.dir);
    assert_eq!(m["passed"], false);
    assert_eq!(m["assertions"][0]["required"], 1e-8);
    assert!(m["assertions"][0]["measured"].as_f64().unwrap() > 0.9);
}

#[test]
fn binary_honours_the_output_environment_variable() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("env-out");
    let status = Process::new(env!("CARGO_BIN_EXE_fbsde-lab"))
        .arg("limit")
        .env("FBSDE_LAB_OUT", &out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("limit").join("manifest.json").exists());
    let usage = Process::new(env!("CARGO_BIN_EXE_fbsde-lab"))
        .args(["limit", "--threads", "x"])
        .output()
        .unwrap();
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn run_log_is_the_only_file_outside_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "s.toml", "epsilons = [0.5, 0.0]\npaths = 2\n");
    let out = execute(&cli(Command::Simulate, &cfg, tmp.path())).unwrap();
    let listed: Vec<String> = manifest(&out.dir)["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["name"].as_str().unwrap().to_string())
        .collect();
    let mut on_disk: Vec<String> = fs::read_dir(&out.dir)
        .unwrap()
        .flatten()
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.json" && n != "run.log")
        .collect();
    on_disk.sort();
    let mut listed_sorted = listed.clone();
    listed_sorted.sort();
    assert_eq!(on_disk, listed_sorted);
}
