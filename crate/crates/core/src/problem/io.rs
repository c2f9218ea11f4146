//! JSON problem files.
//!
//! ```json
//! {"n": 2, "p": 0, "m": 1,
//!  "P": {"rows": 2, "cols": 2, "triplets": [[0, 0, 1.0], [1, 1, 1.0]]},
//!  "q": [0.0, 0.0],
//!  "A": {"rows": 0, "cols": 2, "triplets": []}, "b": [],
//!  "C": {"rows": 1, "cols": 2, "triplets": [[0, 0, -1.0], [0, 1, -1.0]]},
//!  "d": [-1.0]}
//! ```
//!
//! Triplets are zero-based and sorted column-major without duplicates.
//! `"symmetric_lower": true` inside `P` means only the lower triangle is
//! listed. Values are written with 17 significant digits so a round trip
//! reproduces every bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use super::{ProblemError, QpProblem};
use crate::sparse::CscMatrix;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{location}: {message}")]
    Invalid { location: String, message: String },
}

impl FormatError {
    fn invalid(location: impl Into<String>, message: impl Into<String>) -> Self {
        FormatError::Invalid {
            location: location.into(),
            message: message.into(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    triplets: Vec<(usize, usize, f64)>,
    #[serde(default)]
    symmetric_lower: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemRecord {
    n: usize,
    p: usize,
    m: usize,
    #[serde(rename = "P")]
    p_mat: MatrixRecord,
    q: Vec<f64>,
    #[serde(rename = "A")]
    a_mat: MatrixRecord,
    b: Vec<f64>,
    #[serde(rename = "C")]
    c_mat: MatrixRecord,
    d: Vec<f64>,
}

fn build_matrix(name: &str, rec: &MatrixRecord, rows: usize, cols: usize) -> Result<CscMatrix, FormatError> {
    if rec.rows != rows || rec.cols != cols {
        return Err(FormatError::invalid(
            name,
            format!("matrix is {}x{}, expected {rows}x{cols}", rec.rows, rec.cols),
        ));
    }
    if rec.symmetric_lower && name != "P" {
        return Err(FormatError::invalid(name, "symmetric_lower is only allowed for P"));
    }
    let mut prev: Option<(usize, usize)> = None;
    for (k, &(i, j, v)) in rec.triplets.iter().enumerate() {
        let loc = || format!("{name}.triplets[{k}]");
        if i >= rows || j >= cols {
            return Err(FormatError::invalid(loc(), format!("index ({i}, {j}) out of range")));
        }
        if !v.is_finite() {
            return Err(FormatError::invalid(loc(), "non-finite value"));
        }
        if rec.symmetric_lower && i < j {
            return Err(FormatError::invalid(loc(), "entry above the diagonal with symmetric_lower"));
        }
        if let Some(p) = prev {
            if (j, i) == (p.1, p.0) {
                return Err(FormatError::invalid(loc(), format!("duplicate entry ({i}, {j})")));
            }
            if (j, i) < (p.1, p.0) {
                return Err(FormatError::invalid(loc(), "triplets not sorted column-major"));
            }
        }
        prev = Some((i, j));
    }
    let trip: Vec<_> = rec.triplets.clone();
    let m = CscMatrix::from_triplets(rows, cols, &trip).map_err(|e| FormatError::invalid(name, e.to_string()))?;
    if rec.symmetric_lower {
        m.symmetric_from_lower().map_err(|e| FormatError::invalid(name, e.to_string()))
    } else {
        Ok(m)
    }
}

fn check_len(name: &str, v: &[f64], expected: usize) -> Result<(), FormatError> {
    if v.len() != expected {
        return Err(FormatError::invalid(
            name,
            format!("length {} does not match dimension {expected}", v.len()),
        ));
    }
    if let Some(k) = v.iter().position(|x| !x.is_finite()) {
        return Err(FormatError::invalid(format!("{name}[{k}]"), "non-finite value"));
    }
    Ok(())
}

/// Parses a problem from JSON text.
pub fn parse_problem(text: &str) -> Result<QpProblem, FormatError> {
    let rec: ProblemRecord = serde_json::from_str(text).map_err(|e| FormatError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let (n, p, m) = (rec.n, rec.p, rec.m);
    check_len("q", &rec.q, n)?;
    check_len("b", &rec.b, p)?;
    check_len("d", &rec.d, m)?;
    let pm = build_matrix("P", &rec.p_mat, n, n)?;
    let am = build_matrix("A", &rec.a_mat, p, n)?;
    let cm = build_matrix("C", &rec.c_mat, m, n)?;
    QpProblem::new(pm, rec.q, am, rec.b, cm, rec.d).map_err(|e: ProblemError| FormatError::invalid("problem", e.to_string()))
}

pub fn load_problem(path: impl AsRef<Path>) -> Result<QpProblem, FormatError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_problem(&text)
}

/// Integral values are written plainly, everything else with 17
/// significant digits.
fn write_f64(out: &mut String, v: f64) {
    if v == 0.0 && v.is_sign_negative() {
        out.push_str("-0.0");
    } else if v == v.trunc() && v.abs() < 1e15 {
        let _ = write!(out, "{v:.1}");
    } else {
        let _ = write!(out, "{v:.16e}");
    }
}

fn write_vector(out: &mut String, v: &[f64]) {
    out.push('[');
    for (k, x) in v.iter().enumerate() {
        if k > 0 {
            out.push_str(", ");
        }
        write_f64(out, *x);
    }
    out.push(']');
}

fn write_matrix(out: &mut String, m: &CscMatrix) {
    let _ = write!(out, "{{\"rows\": {}, \"cols\": {}, \"triplets\": [", m.nrows(), m.ncols());
    for (k, (i, j, v)) in m.iter().enumerate() {
        if k > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "[{i}, {j}, ");
        write_f64(out, v);
        out.push(']');
    }
    out.push_str("]}");
}

/// Serializes `problem` to JSON text. `P` is always written in full.
pub fn problem_to_json(problem: &QpProblem) -> String {
    let mut out = String::new();
    let (n, p, m) = problem.dims();
    let _ = writeln!(out, "{{\"n\": {n}, \"p\": {p}, \"m\": {m},");
    out.push_str(" \"P\": ");
    write_matrix(&mut out, problem.p());
    out.push_str(",\n \"q\": ");
    write_vector(&mut out, problem.q());
    out.push_str(",\n \"A\": ");
    write_matrix(&mut out, problem.a());
    out.push_str(",\n \"b\": ");
    write_vector(&mut out, problem.b());
    out.push_str(",\n \"C\": ");
    write_matrix(&mut out, problem.c());
    out.push_str(",\n \"d\": ");
    write_vector(&mut out, problem.d());
    out.push_str("}\n");
    out
}

pub fn store_problem(problem: &QpProblem, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let path = path.as_ref();
    fs::write(path, problem_to_json(problem)).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}
