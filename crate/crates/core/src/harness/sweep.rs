//! Grid sweeps over config overrides.
//!
//! A grid file uses the config syntax with `|`-separated alternatives:
//! `expansion.rewarm.steps = 0 | 100 | 250`. Cells are the cartesian
//! product in file order, the first key varying slowest.

use std::fmt::Write as _;

use super::checkpoint::write_atomic;
use super::config::{parse_assignments, Assignment, RunConfig};
use super::metrics::format_float;
use super::train::run_training;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepAxis {
    pub line: usize,
    pub key: String,
    pub values: Vec<String>,
}

pub fn parse_grid(text: &str) -> Result<Vec<SweepAxis>> {
    parse_assignments(text)?
        .into_iter()
        .map(|a| {
            let values: Vec<String> = a.value.split('|').map(|v| v.trim().to_string()).collect();
            if values.iter().any(String::is_empty) {
                return Err(Error::ConfigField {
                    line: a.line,
                    field: a.key,
                    message: "empty grid value".into(),
                });
            }
            Ok(SweepAxis {
                line: a.line,
                key: a.key,
                values,
            })
        })
        .collect()
}

/// Override sets for every cell.
pub fn grid_cells(axes: &[SweepAxis]) -> Vec<Vec<Assignment>> {
    let mut cells = vec![Vec::new()];
    for axis in axes {
        cells = cells
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push(Assignment {
                        line: axis.line,
                        key: axis.key.clone(),
                        value: v.clone(),
                    });
                    c
                })
            })
            .collect();
    }
    cells
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub cell: usize,
    /// `key=value` pairs joined by `;`.
    pub overrides: String,
    pub final_eval_loss: f64,
    pub final_max_symmetry_distance: f64,
    pub status: String,
}

/// Runs every cell under `base.output_dir/cell_NNN` and writes
/// `sweep.csv`, sorted by final eval loss with failed cells last.
pub fn run_sweep(base: &RunConfig, axes: &[SweepAxis]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (i, overrides) in grid_cells(axes).into_iter().enumerate() {
        let label = overrides
            .iter()
            .map(|a| format!("{}={}", a.key, a.value))
            .collect::<Vec<_>>()
            .join(";");
        let result = base.with_overrides(&overrides).and_then(|mut cfg| {
            cfg.output_dir = base.output_dir.join(format!("cell_{i:03}"));
            run_training(&cfg)
        });
        let row = match result {
            Ok(out) => SweepRow {
                cell: i,
                overrides: label,
                final_eval_loss: out.summary.final_eval_loss.unwrap_or(f64::NAN),
                final_max_symmetry_distance: out.summary.final_max_symmetry_distance.unwrap_or(f64::NAN),
                status: "ok".into(),
            },
            Err(e) => SweepRow {
                cell: i,
                overrides: label,
                final_eval_loss: f64::NAN,
                final_max_symmetry_distance: f64::NAN,
                status: format!("failed: {e}").replace([',', '\n'], " "),
            },
        };
        rows.push(row);
    }
    rows.sort_by(|a, b| {
        let key = |r: &SweepRow| (r.status != "ok" || r.final_eval_loss.is_nan(), r.final_eval_loss);
        let (fa, la) = key(a);
        let (fb, lb) = key(b);
        fa.cmp(&fb).then(la.total_cmp(&lb)).then(a.cell.cmp(&b.cell))
    });
    std::fs::create_dir_all(&base.output_dir)?;
    write_atomic(&base.output_dir.join("sweep.csv"), sweep_csv(&rows).as_bytes())?;
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("cell,overrides,final_eval_loss,final_max_symmetry_distance,status\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.cell,
            r.overrides,
            format_float(r.final_eval_loss),
            format_float(r.final_max_symmetry_distance),
            r.status
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cartesian_order() {
        let axes = parse_grid("a = 1 | 2\nb = x | y | z\n").unwrap();
        let cells = grid_cells(&axes);
        assert_eq!(cells.len(), 6);
        let vals: Vec<String> = cells[1].iter().map(|a| a.value.clone()).collect();
        assert_eq!(vals, ["1", "y"]);
        assert_eq!(cells[3][0].value, "2");
        assert!(parse_grid("a = 1 || 2").is_err());
    }
}
