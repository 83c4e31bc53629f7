//! Long-format loadings table: one row per (component, block, coordinate).

use std::path::Path;

use cocreg::io::Cell;
use cocreg::{CocregError, FitSequence};
use nalgebra::DMatrix;

pub const HEADER: [&str; 4] = ["component", "block", "index", "loading"];

pub fn rows(seq: &FitSequence) -> Vec<Vec<Cell>> {
    let mut out = Vec::new();
    for (k, c) in seq.components.iter().enumerate() {
        for (block, v) in [("gamma", &c.gamma), ("theta", &c.theta)] {
            for (i, x) in v.iter().enumerate() {
                out.push(vec![Cell::from(k + 1), Cell::from(block), Cell::from(i + 1), Cell::from(*x)]);
            }
        }
    }
    out
}

/// Reads `(Γ, Θ)` with one column per component; `q` and `p` are the expected lengths.
pub fn read(path: &Path, q: usize, p: usize) -> Result<(DMatrix<f64>, DMatrix<f64>), CocregError> {
    let bad = |m: String| CocregError::Validation(format!("{}: {m}", path.display()));
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(bad(format!("expected header {}", HEADER.join(","))));
    }
    let mut entries: Vec<(usize, bool, usize, f64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let k: usize = rec[0].parse().map_err(|_| bad(format!("bad component `{}`", &rec[0])))?;
        let is_gamma = match &rec[1] {
            "gamma" => true,
            "theta" => false,
            other => return Err(bad(format!("unknown block `{other}`"))),
        };
        let i: usize = rec[2].parse().map_err(|_| bad(format!("bad index `{}`", &rec[2])))?;
        let x: f64 = rec[3].parse().map_err(|_| bad(format!("bad loading `{}`", &rec[3])))?;
        if k == 0 || i == 0 || !x.is_finite() {
            return Err(bad("indices are 1-based and loadings finite".into()));
        }
        entries.push((k, is_gamma, i, x));
    }
    let k = entries.iter().map(|e| e.0).max().ok_or_else(|| bad("no loadings".into()))?;
    let mut g = DMatrix::from_element(q, k, f64::NAN);
    let mut t = DMatrix::from_element(p, k, f64::NAN);
    for (c, is_gamma, i, x) in entries {
        let (m, dim) = if is_gamma { (&mut g, q) } else { (&mut t, p) };
        if i > dim {
            return Err(bad(format!("index {i} exceeds dimension {dim}")));
        }
        m[(i - 1, c - 1)] = x;
    }
    if g.iter().chain(t.iter()).any(|x| x.is_nan()) {
        return Err(bad("incomplete loadings".into()));
    }
    Ok((g, t))
}
