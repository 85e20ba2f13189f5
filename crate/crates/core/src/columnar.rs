//! Flat columnar text files for fields, trajectory bundles and paths.
//!
//! Layout: one `# key=value ...` header line, one comma-separated row of
//! column names, then one comma-separated row per record. Reals are written
//! with 17 significant digits so that reading a file back is bit-exact.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::limit::{BvpMethod, OdeSolution};
use crate::pde::{DecouplingField, SpaceTimeGrid};
use crate::simulate::TrajectoryBundle;
use crate::{GridPath, Vector};

/// `v` with 17 significant digits.
pub fn real(v: f64) -> String {
    format!("{v:.16e}")
}

fn header_line(pairs: &[(&str, String)]) -> String {
    let body: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("# {}\n", body.join(" "))
}

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{i}"))
}

fn write_row(w: &mut impl Write, cells: &[String]) -> Result<()> {
    w.write_all(cells.join(",").as_bytes())?;
    w.write_all(b"\n")?;
    Ok(())
}

struct Table {
    header: BTreeMap<String, String>,
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Parse("empty file".into()))??;
        let body = first
            .strip_prefix("# ")
            .ok_or_else(|| Error::Parse("missing '# key=value' header line".into()))?;
        let mut header = BTreeMap::new();
        for pair in body.split_whitespace() {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("malformed header entry '{pair}'")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let columns: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Parse("missing column row".into()))??
            .split(',')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let row: Vec<String> = line.split(',').map(str::to_string).collect();
            if row.len() != columns.len() {
                return Err(Error::Parse(format!(
                    "row {} has {} cells, expected {}",
                    i + 1,
                    row.len(),
                    columns.len()
                )));
            }
            rows.push(row);
        }
        Ok(Self {
            header,
            columns,
            rows,
        })
    }

    fn key<T: std::str::FromStr>(&self, k: &str) -> Result<T> {
        let v = self
            .header
            .get(k)
            .ok_or_else(|| Error::Parse(format!("header lacks '{k}'")))?;
        v.parse()
            .map_err(|_| Error::Parse(format!("header '{k}' has unreadable value '{v}'")))
    }

    fn expect_columns(&self, expected: &[String]) -> Result<()> {
        if self.columns != expected {
            return Err(Error::Parse(format!(
                "columns {:?} do not match expected {:?}",
                self.columns, expected
            )));
        }
        Ok(())
    }
}

fn cell<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Parse(format!("unreadable cell '{s}'")))
}

fn field_columns(n: usize) -> Vec<String> {
    let mut c = vec!["k".to_string(), "t".to_string()];
    c.extend(indexed("x", n));
    c.extend(indexed("u", n));
    for l in 0..n {
        c.extend(indexed(&format!("du{l}_"), n));
    }
    c.extend(indexed("h", n));
    c
}

pub fn write_field(field: &DecouplingField, w: &mut impl Write) -> Result<()> {
    let g = &field.grid;
    let n = g.dim;
    w.write_all(
        header_line(&[
            ("kind", "field".into()),
            ("n", n.to_string()),
            ("nt", g.nt.to_string()),
            ("nx", g.nx.to_string()),
            ("epsilon", real(field.epsilon)),
            ("t0", real(g.t0)),
            ("t_end", real(g.t_end)),
            ("x_lo", real(g.x_lo)),
            ("x_hi", real(g.x_hi)),
            ("margin", real(g.margin)),
        ])
        .as_bytes(),
    )?;
    write_row(w, &field_columns(n))?;
    for k in 0..g.nt {
        let t = real(g.t_node(k));
        for node in 0..g.node_count() {
            let mut row = vec![k.to_string(), t.clone()];
            row.extend(g.node_position(node).iter().map(|v| real(*v)));
            row.extend(
                field.u[k][node * n..(node + 1) * n]
                    .iter()
                    .map(|v| real(*v)),
            );
            row.extend(
                field.grad[k][node * n * n..(node + 1) * n * n]
                    .iter()
                    .map(|v| real(*v)),
            );
            row.extend(
                field.terminal_data[node * n..(node + 1) * n]
                    .iter()
                    .map(|v| real(*v)),
            );
            write_row(w, &row)?;
        }
    }
    Ok(())
}

pub fn read_field(r: impl BufRead) -> Result<DecouplingField> {
    let table = Table::read(r)?;
    let n: usize = table.key("n")?;
    let grid = SpaceTimeGrid::new(
        table.key("t0")?,
        table.key("t_end")?,
        table.key("nt")?,
        table.key("x_lo")?,
        table.key("x_hi")?,
        table.key("nx")?,
        n,
    )?
    .with_margin(table.key("margin")?)?;
    table.expect_columns(&field_columns(n))?;
    let nodes = grid.node_count();
    if table.rows.len() != grid.nt * nodes {
        return Err(Error::Parse(format!(
            "field has {} rows, expected {}",
            table.rows.len(),
            grid.nt * nodes
        )));
    }
    let mut u = vec![vec![0.0; nodes * n]; grid.nt];
    let mut grad = vec![vec![0.0; nodes * n * n]; grid.nt];
    let mut terminal = vec![0.0; nodes * n];
    for (i, row) in table.rows.iter().enumerate() {
        let (k, node) = (i / nodes, i % nodes);
        if cell::<usize>(&row[0])? != k {
            return Err(Error::Parse(format!("row {} is out of order", i + 1)));
        }
        let base = 2 + n;
        for l in 0..n {
            u[k][node * n + l] = cell(&row[base + l])?;
            terminal[node * n + l] = cell(&row[base + n + n * n + l])?;
        }
        for q in 0..n * n {
            grad[k][node * n * n + q] = cell(&row[base + n + q])?;
        }
    }
    Ok(DecouplingField {
        grid,
        epsilon: table.key("epsilon")?,
        u,
        grad,
        terminal_data: terminal,
    })
}

fn bundle_columns(n: usize, d: usize) -> Vec<String> {
    let mut c = vec!["path".to_string(), "j".to_string(), "t".to_string()];
    c.extend(indexed("x", n));
    c.extend(indexed("y", n));
    for l in 0..n {
        c.extend(indexed(&format!("z{l}_"), d));
    }
    c.extend(indexed("dw", d));
    c
}

/// One row per (path, node); the increment columns of the last node are empty.
pub fn write_bundle(b: &TrajectoryBundle, w: &mut impl Write) -> Result<()> {
    let (n, d) = (b.n, b.d);
    w.write_all(
        header_line(&[
            ("kind", "bundle".into()),
            ("n", n.to_string()),
            ("d", d.to_string()),
            ("epsilon", real(b.epsilon)),
            ("seed_root", b.seed_root.to_string()),
            ("nt", b.n_nodes().to_string()),
            ("n_paths", b.n_paths().to_string()),
            ("start_step", b.start_step.to_string()),
        ])
        .as_bytes(),
    )?;
    write_row(w, &bundle_columns(n, d))?;
    let last = b.n_nodes() - 1;
    for p in 0..b.n_paths() {
        for j in 0..b.n_nodes() {
            let mut row = vec![p.to_string(), j.to_string(), real(b.t_nodes[j])];
            row.extend(b.x[p][j * n..(j + 1) * n].iter().map(|v| real(*v)));
            row.extend(b.y[p][j * n..(j + 1) * n].iter().map(|v| real(*v)));
            row.extend(b.z[p][j * n * d..(j + 1) * n * d].iter().map(|v| real(*v)));
            if j < last {
                row.extend(b.dw[p][j * d..(j + 1) * d].iter().map(|v| real(*v)));
            } else {
                row.extend(std::iter::repeat_n(String::new(), d));
            }
            write_row(w, &row)?;
        }
    }
    Ok(())
}

pub fn read_bundle(r: impl BufRead) -> Result<TrajectoryBundle> {
    let table = Table::read(r)?;
    let (n, d): (usize, usize) = (table.key("n")?, table.key("d")?);
    let (nt, paths): (usize, usize) = (table.key("nt")?, table.key("n_paths")?);
    table.expect_columns(&bundle_columns(n, d))?;
    if table.rows.len() != nt * paths || nt < 2 {
        return Err(Error::Parse(format!(
            "bundle has {} rows, expected {}",
            table.rows.len(),
            nt * paths
        )));
    }
    let mut b = TrajectoryBundle {
        t_nodes: Vec::with_capacity(nt),
        epsilon: table.key("epsilon")?,
        n,
        d,
        seed_root: table.key("seed_root")?,
        start_step: table.key("start_step")?,
        x: vec![Vec::with_capacity(nt * n); paths],
        y: vec![Vec::with_capacity(nt * n); paths],
        z: vec![Vec::with_capacity(nt * n * d); paths],
        dw: vec![Vec::with_capacity((nt - 1) * d); paths],
    };
    for (i, row) in table.rows.iter().enumerate() {
        let (p, j) = (i / nt, i % nt);
        if cell::<usize>(&row[0])? != p || cell::<usize>(&row[1])? != j {
            return Err(Error::Parse(format!("row {} is out of order", i + 1)));
        }
        if p == 0 {
            b.t_nodes.push(cell(&row[2])?);
        }
        let mut c = 3;
        for _ in 0..n {
            b.x[p].push(cell(&row[c])?);
            c += 1;
        }
        for _ in 0..n {
            b.y[p].push(cell(&row[c])?);
            c += 1;
        }
        for _ in 0..n * d {
            b.z[p].push(cell(&row[c])?);
            c += 1;
        }
        if j + 1 < nt {
            for _ in 0..d {
                b.dw[p].push(cell(&row[c])?);
                c += 1;
            }
        }
    }
    Ok(b)
}

pub fn write_ode(sol: &OdeSolution, w: &mut impl Write) -> Result<()> {
    let n = sol.x_values[0].len();
    w.write_all(
        header_line(&[
            ("kind", "ode".into()),
            ("n", n.to_string()),
            ("nt", sol.t_nodes.len().to_string()),
            ("method", sol.method.as_str().into()),
            ("residual", real(sol.shooting_residual)),
            ("iterations", sol.iterations.to_string()),
        ])
        .as_bytes(),
    )?;
    let mut cols = vec!["t".to_string()];
    cols.extend(indexed("x", n));
    cols.extend(indexed("y", n));
    write_row(w, &cols)?;
    for (j, t) in sol.t_nodes.iter().enumerate() {
        let mut row = vec![real(*t)];
        row.extend(sol.x_values[j].iter().map(|v| real(*v)));
        row.extend(sol.y_values[j].iter().map(|v| real(*v)));
        write_row(w, &row)?;
    }
    Ok(())
}

pub fn read_ode(r: impl BufRead) -> Result<OdeSolution> {
    let table = Table::read(r)?;
    let n: usize = table.key("n")?;
    let method = match table.header.get("method").map(String::as_str) {
        Some("shooting") => BvpMethod::Shooting,
        Some("picard") => BvpMethod::Picard,
        other => return Err(Error::Parse(format!("unknown method {other:?}"))),
    };
    let mut sol = OdeSolution {
        t_nodes: Vec::new(),
        x_values: Vec::new(),
        y_values: Vec::new(),
        shooting_residual: table.key("residual")?,
        method,
        iterations: table.key("iterations")?,
    };
    if table.columns.len() != 1 + 2 * n {
        return Err(Error::Parse("ode column count does not match n".into()));
    }
    for row in &table.rows {
        sol.t_nodes.push(cell(&row[0])?);
        let vals: Vec<f64> = row[1..].iter().map(|s| cell(s)).collect::<Result<_>>()?;
        sol.x_values.push(Vector::from_row_slice(&vals[..n]));
        sol.y_values.push(Vector::from_row_slice(&vals[n..]));
    }
    Ok(sol)
}

pub fn write_path(path: &GridPath, label: &str, w: &mut impl Write) -> Result<()> {
    let n = path.dim();
    w.write_all(
        header_line(&[
            ("kind", "path".into()),
            ("label", label.into()),
            ("n", n.to_string()),
            ("nt", path.len().to_string()),
        ])
        .as_bytes(),
    )?;
    let mut cols = vec!["t".to_string()];
    cols.extend(indexed("x", n));
    write_row(w, &cols)?;
    for (t, v) in path.t_nodes.iter().zip(&path.values) {
        let mut row = vec![real(*t)];
        row.extend(v.iter().map(|c| real(*c)));
        write_row(w, &row)?;
    }
    Ok(())
}

pub fn read_path(r: impl BufRead) -> Result<GridPath> {
    let table = Table::read(r)?;
    let n: usize = table.key("n")?;
    if table.columns.len() != 1 + n {
        return Err(Error::Parse("path column count does not match n".into()));
    }
    let mut t = Vec::new();
    let mut values = Vec::new();
    for row in &table.rows {
        t.push(cell(&row[0])?);
        let v: Vec<f64> = row[1..].iter().map(|s| cell(s)).collect::<Result<_>>()?;
        values.push(Vector::from_vec(v));
    }
    GridPath::new(t, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asymptotics::Lab;
    use crate::pde::FieldOptions;
    use crate::problem::{EvalBox, ProblemSpec};
    use crate::registry;

    fn lab(n: usize) -> Lab {
        let p = ProblemSpec::new(
            registry::tanh_coupled(n, 1.0, 1.0, 1.0, 0.5, 1.0),
            n,
            0.0,
            0.5,
            Vector::from_element(n, 0.5),
            vec![0.5],
            EvalBox::cube((0.0, 0.5), 1.0),
        )
        .unwrap();
        let grid = SpaceTimeGrid::for_problem(&p, 11, -3.0, 3.0, 13).unwrap();
        Lab::new(p, grid, FieldOptions::default()).unwrap()
    }

    #[test]
    fn field_round_trip_is_bit_exact() {
        for n in [1, 2] {
            let lab = lab(n);
            let field = lab.field(0.3).unwrap();
            let mut buf = Vec::new();
            write_field(&field, &mut buf).unwrap();
            let back = read_field(buf.as_slice()).unwrap();
            assert_eq!(back, *field);
        }
    }

    #[test]
    fn bundle_round_trip_is_bit_exact() {
        let lab = lab(2);
        let b = lab.bundle(0.3, 5, 11).unwrap();
        let mut buf = Vec::new();
        write_bundle(&b, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("# kind=bundle n=2 d=2"));
        assert_eq!(read_bundle(buf.as_slice()).unwrap(), b);
    }

    #[test]
    fn ode_and_path_round_trip() {
        let lab = lab(1);
        let sol = lab.limit_path().unwrap();
        let mut buf = Vec::new();
        write_ode(&sol, &mut buf).unwrap();
        assert_eq!(read_ode(buf.as_slice()).unwrap(), *sol);
        let path = GridPath::new(sol.t_nodes.clone(), sol.x_values.clone()).unwrap();
        let mut buf = Vec::new();
        write_path(&path, "limit", &mut buf).unwrap();
        assert_eq!(read_path(buf.as_slice()).unwrap(), path);
    }

    #[test]
    fn malformed_input_is_a_parse_error() {
        assert!(matches!(
            read_path(&b"t,x0\n1,2\n"[..]),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            read_path(&b"# kind=path n=1 nt=2\nt,x0\n0,1\n1\n"[..]),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            read_path(&b"# kind=path n=1 nt=2\nt,x0\n0,1\n1,abc\n"[..]),
            Err(Error::Parse(_))
        ));
    }
}
