//! Result persistence: field and path dumps as CSV (17 significant digits,
//! `.` decimal), convergence tables, gnuplot-ready slice columns, and the
//! result.json envelope. Identical config and seed produce byte-identical
//! files.

use crate::config::{OutputFormat, OutputSection, RunConfig};
use gbsde_core::error::{Error, Result};
use gbsde_core::forward::PathBundle;
use gbsde_core::grid::{GridSpec, ValueField};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Full-precision float formatting: 17 significant digits, exponent form.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Everything a run reports besides the field files themselves.
#[derive(Debug, Clone, Serialize)]
pub struct ResultEnvelope {
    /// Echoed config with all defaults materialized.
    pub config: RunConfig,
    pub version: String,
    pub command: String,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub field_files: Vec<String>,
    pub diagnostics: serde_json::Value,
    /// Headline numbers (values at the grid center, distances, ...).
    pub values: BTreeMap<String, f64>,
    /// Pass/fail per requested check.
    pub checks: BTreeMap<String, CheckOutcome>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub pass: bool,
    pub details: serde_json::Value,
}

impl ResultEnvelope {
    pub fn new(command: &str, config: RunConfig) -> Self {
        ResultEnvelope {
            config,
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            timings: BTreeMap::new(),
            field_files: Vec::new(),
            diagnostics: serde_json::Value::Null,
            values: BTreeMap::new(),
            checks: BTreeMap::new(),
        }
    }

    pub fn all_checks_pass(&self) -> bool {
        self.checks.values().all(|c| c.pass)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Solver(format!("i/o error at {}: {e}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn write_envelope(dir: &Path, envelope: &ResultEnvelope) -> Result<PathBuf> {
    let path = dir.join("result.json");
    let text = serde_json::to_string_pretty(envelope)
        .map_err(|e| Error::Solver(format!("envelope serialization: {e}")))?;
    write_text(&path, &text)?;
    Ok(path)
}

/// Field dump: `t, x_1..x_k[, component], Y, Z_1..Z_d, argmax_gamma_index`.
/// The component column appears only for multi-component fields.
pub struct FieldDump<'a> {
    pub grid: &'a GridSpec,
    pub n: usize,
    pub d: usize,
    /// Channel l of the Y field.
    pub y: &'a ValueField,
    /// Channel l·d + b of the Z field.
    pub z: &'a ValueField,
    /// [(time node · n + l) · nodes + node].
    pub argmax: &'a [u16],
}

pub fn render_field_csv(dump: &FieldDump) -> String {
    let k = dump.grid.space.dim();
    let nodes = dump.grid.space.node_count();
    let mut out = String::new();
    out.push('t');
    for a in 1..=k {
        let _ = write!(out, ",x_{a}");
    }
    if dump.n > 1 {
        out.push_str(",component");
    }
    out.push_str(",Y");
    for b in 1..=dump.d {
        let _ = write!(out, ",Z_{b}");
    }
    out.push_str(",argmax_gamma_index\n");
    let mut coords = vec![0.0; k];
    for m in 0..dump.grid.time.nodes() {
        let t = dump.grid.time.node(m);
        for idx in 0..nodes {
            dump.grid.space.coords(idx, &mut coords);
            for l in 0..dump.n {
                let _ = write!(out, "{}", fmt_f64(t));
                for c in &coords {
                    let _ = write!(out, ",{}", fmt_f64(*c));
                }
                if dump.n > 1 {
                    let _ = write!(out, ",{}", l + 1);
                }
                let _ = write!(out, ",{}", fmt_f64(dump.y.value(m, l, idx)));
                for b in 0..dump.d {
                    let _ = write!(out, ",{}", fmt_f64(dump.z.value(m, l * dump.d + b, idx)));
                }
                let gi = dump.argmax[(m * dump.n + l) * nodes + idx];
                let _ = writeln!(out, ",{gi}");
            }
        }
    }
    out
}

/// Gnuplot columns for one time slice: `x_1..x_k  Y_1..Y_n`, whitespace
/// separated with a commented header.
pub fn render_slice_dat(grid: &GridSpec, y: &ValueField, n: usize, m: usize) -> String {
    let k = grid.space.dim();
    let mut out = String::new();
    let _ = writeln!(out, "# t = {}", fmt_f64(grid.time.node(m)));
    out.push('#');
    for a in 1..=k {
        let _ = write!(out, " x_{a}");
    }
    for l in 1..=n {
        let _ = write!(out, " Y_{l}");
    }
    out.push('\n');
    let mut coords = vec![0.0; k];
    for idx in 0..grid.space.node_count() {
        grid.space.coords(idx, &mut coords);
        for c in &coords {
            let _ = write!(out, "{} ", fmt_f64(*c));
        }
        for l in 0..n {
            let _ = write!(out, "{} ", fmt_f64(y.value(m, l, idx)));
        }
        out.push('\n');
    }
    out
}

/// Path dump: `scenario_id, step, time, x_1..x_k, gamma_index`.
pub fn render_paths_csv(bundle: &PathBundle) -> String {
    let mut out = String::new();
    out.push_str("scenario_id,step,time");
    for a in 1..=bundle.k {
        let _ = write!(out, ",x_{a}");
    }
    out.push_str(",gamma_index\n");
    for p in 0..bundle.paths {
        for m in 0..=bundle.times.steps {
            let _ = write!(out, "{p},{m},{}", fmt_f64(bundle.times.node(m)));
            for &x in bundle.state(p, m) {
                let _ = write!(out, ",{}", fmt_f64(x));
            }
            let gi = if m < bundle.times.steps { bundle.gamma_index(p, m) as i64 } else { -1 };
            let _ = writeln!(out, ",{gi}");
        }
    }
    out
}

/// Convergence table: `level, dx, dt, sup_distance, fitted_order`.
pub fn render_convergence_csv(report: &gbsde_core::crossval::CrossValReport) -> String {
    let mut out = String::from("level,dx,dt,sup_distance,fitted_order\n");
    for rec in &report.levels {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            rec.level,
            fmt_f64(rec.dx),
            fmt_f64(rec.dt),
            fmt_f64(rec.distance),
            fmt_f64(report.fitted_order)
        );
    }
    out
}

/// Writes the field artifacts selected by the output formats; returns the
/// files written (relative names).
pub fn write_field_outputs(
    dir: &Path,
    outputs: &OutputSection,
    dump: &FieldDump,
    base_name: &str,
) -> Result<Vec<String>> {
    let mut files = Vec::new();
    if outputs.formats.contains(&OutputFormat::Csv) {
        let name = format!("{base_name}.csv");
        write_text(&dir.join(&name), &render_field_csv(dump))?;
        files.push(name);
    }
    if outputs.formats.contains(&OutputFormat::Gnuplot) {
        for m in 0..dump.grid.time.nodes() {
            let name = format!("plots/{base_name}_slice_{m:04}.dat");
            write_text(&dir.join(&name), &render_slice_dat(dump.grid, dump.y, dump.n, m))?;
            files.push(name);
        }
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting_is_full_precision() {
        let v = std::f64::consts::PI;
        let s = fmt_f64(v);
        let back: f64 = s.parse().unwrap();
        assert_eq!(back.to_bits(), v.to_bits());
        assert!(s.contains('.'));
        assert!(!s.contains(','));
    }
}
