//! Conservation audits and run output.
//!
//! The integrated moments p and E evolve by their own transport equations;
//! reconstructing them from the cell densities gives an independent
//! discrepancy measure. The reconstruction is reported, never corrected.

use crate::coefficients::CoefficientSet;
use crate::solver::KineticState;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed CSV: {0}")]
    Parse(String),
}

/// Momentum and energy reconstructed from cell densities:
/// `p = sum_a m_a N_a`, `E = 1/2 sum_a (|c_a|^2 + 3 d) N_a`.
pub fn reconstruct_moments(coeffs: &CoefficientSet, n: &[f64]) -> ([f64; 3], f64) {
    reconstruct_moments_from_geometry(coeffs.geometry(), coeffs.d(), n)
}

/// Reconstruction from an explicit geometry table (the energy weight
/// `(|c|^2 + 3 d) / 2` is the exact cell average of `|xi|^2 / 2`).
pub fn reconstruct_moments_from_geometry(
    geometry: &[crate::lattice::CellGeometry],
    d: f64,
    n: &[f64],
) -> ([f64; 3], f64) {
    let mut p = [0.0f64; 3];
    let mut e = 0.0f64;
    for (geo, &na) in geometry.iter().zip(n) {
        let c = geo.center;
        p[0] += c[0] * na;
        p[1] += c[1] * na;
        p[2] += c[2] * na;
        e += 0.5 * (c[0] * c[0] + c[1] * c[1] + c[2] * c[2] + 3.0 * d) * na;
    }
    (p, e)
}

/// One audit row of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub t: f64,
    pub mass: f64,
    pub p_rec: [f64; 3],
    pub e_rec: f64,
    pub p_int: [f64; 3],
    pub e_int: f64,
    /// L1 norm of the collision right-hand side.
    pub rhs_l1: f64,
    pub min_n: f64,
}

/// Time series of audit rows plus run-level metadata.
#[derive(Debug, Clone, Default)]
pub struct RunRecord {
    pub rows: Vec<RunRow>,
    /// Largest conservation rescale deviation of the coefficient set used.
    pub max_rescale_deviation: f64,
}

impl RunRecord {
    pub fn push(&mut self, row: RunRow) {
        if let Some(last) = self.rows.last() {
            debug_assert!(row.t > last.t, "rows must increase strictly in t");
        }
        self.rows.push(row);
    }
}

/// Audit one state against a coefficient set. In 1-D the quantities are
/// spatial sums scaled by `dx` (pass `dx = 1` for homogeneous runs).
pub fn audit_row(
    coeffs: &CoefficientSet,
    state: &KineticState,
    rhs_l1: f64,
    dx: f64,
) -> RunRow {
    let m = coeffs.n_cells();
    let mut p_rec = [0.0f64; 3];
    let mut e_rec = 0.0;
    for node in 0..state.n_nodes {
        let (p, e) = reconstruct_moments(coeffs, state.node_density(node, m));
        p_rec[0] += p[0];
        p_rec[1] += p[1];
        p_rec[2] += p[2];
        e_rec += e;
    }
    let mut p_int = [0.0f64; 3];
    for p in &state.p {
        p_int[0] += p[0];
        p_int[1] += p[1];
        p_int[2] += p[2];
    }
    let e_int: f64 = state.e.iter().sum();
    RunRow {
        t: state.t,
        mass: state.total_mass() * dx,
        p_rec: [p_rec[0] * dx, p_rec[1] * dx, p_rec[2] * dx],
        e_rec: e_rec * dx,
        p_int: [p_int[0] * dx, p_int[1] * dx, p_int[2] * dx],
        e_int: e_int * dx,
        rhs_l1,
        min_n: state.min_density(),
    }
}

pub const CSV_HEADER: &str =
    "t,mass,p1_rec,p2_rec,p3_rec,E_rec,p1_int,p2_int,p3_int,E_int,rhs_l1,min_N";

/// Format a float with 17 significant digits (round-trip exact).
fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write the record as CSV with the fixed column schema.
pub fn write_timeseries(record: &RunRecord, path: &Path) -> Result<(), DiagnosticsError> {
    let io_err = |e: std::io::Error| DiagnosticsError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    writeln!(f, "{CSV_HEADER}").map_err(io_err)?;
    for r in &record.rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            fmt(r.t),
            fmt(r.mass),
            fmt(r.p_rec[0]),
            fmt(r.p_rec[1]),
            fmt(r.p_rec[2]),
            fmt(r.e_rec),
            fmt(r.p_int[0]),
            fmt(r.p_int[1]),
            fmt(r.p_int[2]),
            fmt(r.e_int),
            fmt(r.rhs_l1),
            fmt(r.min_n),
        )
        .map_err(io_err)?;
    }
    f.flush().map_err(io_err)
}

/// Parse a CSV written by [`write_timeseries`].
pub fn read_timeseries(path: &Path) -> Result<RunRecord, DiagnosticsError> {
    let io_err = |e: std::io::Error| DiagnosticsError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let text = std::fs::read_to_string(path).map_err(io_err)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(DiagnosticsError::Parse(format!(
                "unexpected header {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 12 {
            return Err(DiagnosticsError::Parse(format!(
                "line {}: expected 12 columns, got {}",
                ln + 2,
                cols.len()
            )));
        }
        let p = |i: usize| -> Result<f64, DiagnosticsError> {
            cols[i]
                .parse()
                .map_err(|e| DiagnosticsError::Parse(format!("line {}: {e}", ln + 2)))
        };
        rows.push(RunRow {
            t: p(0)?,
            mass: p(1)?,
            p_rec: [p(2)?, p(3)?, p(4)?],
            e_rec: p(5)?,
            p_int: [p(6)?, p(7)?, p(8)?],
            e_int: p(9)?,
            rhs_l1: p(10)?,
            min_n: p(11)?,
        });
    }
    Ok(RunRecord {
        rows,
        max_rescale_deviation: 0.0,
    })
}
