//! On-disk artifact formats: CSV field dumps with JSON sidecars, monitor
//! series and continuation tables.
//!
//! All writers are deterministic: fixed row order (row-major in x then y),
//! fixed column order, shortest round-trip float formatting. Re-running a
//! command with the same config byte-reproduces every file.

use crate::flow::{ContinuationReport, MonitorSample};
use crate::grid::{CylinderGrid, ScalarField};
use crate::model::{Frame, MatrixField};
use serde::Serialize;
use std::fmt::Write as _;

pub const SCHEMA_VERSION: &str = "1";

/// Scalar field CSV: header `x,y,value`, row-major in x then y.
pub fn scalar_csv(f: &ScalarField) -> String {
    let g = f.grid;
    let mut out = String::with_capacity(f.values.len() * 24);
    out.push_str("x,y,value\n");
    for i in 0..g.nodes_x() {
        for j in 0..g.ny {
            let _ = writeln!(out, "{},{},{}", g.x(i), g.y(j), f.at(i, j));
        }
    }
    out
}

/// Matrix field CSV: `x,y` then n² (re, im) pairs in row-major matrix order.
pub fn matrix_csv(f: &MatrixField) -> String {
    let g = f.grid;
    let n = f.n;
    let mut out = String::new();
    out.push_str("x,y");
    for r in 0..n {
        for c in 0..n {
            let _ = write!(out, ",re{r}{c},im{r}{c}");
        }
    }
    out.push('\n');
    for i in 0..g.nodes_x() {
        for j in 0..g.ny {
            let _ = write!(out, "{},{}", g.x(i), g.y(j));
            let m = f.at(i, j);
            for v in m {
                let _ = write!(out, ",{},{}", v.re, v.im);
            }
            out.push('\n');
        }
    }
    out
}

/// JSON sidecar describing a field dump (checkpoints add flow time/step).
#[derive(Debug, Clone, Serialize)]
pub struct FieldSidecar {
    pub schema_version: &'static str,
    pub frame: Frame,
    pub n: usize,
    pub grid: CylinderGrid,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

pub fn field_sidecar(f: &MatrixField, t: Option<f64>, dt: Option<f64>) -> FieldSidecar {
    FieldSidecar {
        schema_version: SCHEMA_VERSION,
        frame: f.frame,
        n: f.n,
        grid: f.grid,
        t,
        dt,
    }
}

/// Monitor time series CSV.
pub fn monitors_csv(samples: &[MonitorSample]) -> String {
    let mut out = String::from("t,sup_k_minus_c,sup_tr_h,max_det_drift,energy\n");
    for s in samples {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.t, s.sup_k_minus_c, s.sup_tr_h, s.max_det_drift, s.energy
        );
    }
    out
}

/// Continuation table CSV: one row per truncation.
pub fn continuation_csv(report: &ContinuationReport) -> String {
    let mut out = String::from("x_half,rho,sup_tr_h,sup_tr_argmax_x,converged,residual\n");
    for l in &report.legs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            l.x_half, l.rho, l.sup_tr_h, l.sup_tr_argmax_x, l.converged, l.residual
        );
    }
    out
}

/// Parse a matrix-field CSV back (paired with its sidecar).
pub fn matrix_from_csv(csv: &str, sidecar: &FieldSidecar) -> crate::Result<MatrixField> {
    let g = sidecar.grid;
    let n = sidecar.n;
    let mut field = MatrixField::zeros(g, sidecar.frame, n);
    let mut lines = csv.lines();
    let _header = lines.next();
    let mut count = 0;
    for (row, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 2 + 2 * n * n {
            return Err(crate::Error::Parse(format!(
                "row {row}: expected {} columns, got {}",
                2 + 2 * n * n,
                cols.len()
            )));
        }
        let i = row / g.ny;
        let j = row % g.ny;
        let m = field.at_mut(i, j);
        for q in 0..n * n {
            let re: f64 = cols[2 + 2 * q]
                .parse()
                .map_err(|e| crate::Error::Parse(format!("row {row}: {e}")))?;
            let im: f64 = cols[3 + 2 * q]
                .parse()
                .map_err(|e| crate::Error::Parse(format!("row {row}: {e}")))?;
            m[q] = crate::linalg::C64::new(re, im);
        }
        count += 1;
    }
    if count != g.node_count() {
        return Err(crate::Error::Parse(format!(
            "expected {} rows, got {count}",
            g.node_count()
        )));
    }
    Ok(field)
}
