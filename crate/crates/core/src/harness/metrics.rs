//! Per-probe metrics rows and their CSV form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One probe of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    /// Cumulative predicted tokens.
    pub tokens: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub lr_original: f64,
    pub lr_new: f64,
    /// Sublayer gains `s_out / s_in` on the eval batch, attention then MoE
    /// for each layer in order.
    pub gains: Vec<f64>,
    /// Largest relative Frobenius distance between a copied slice and its
    /// donor; NaN when the run has no copied slices.
    pub max_symmetry_distance: f64,
}

pub fn metrics_header(layers: usize) -> String {
    let mut cols = vec![
        "step".to_string(),
        "tokens".into(),
        "train_loss".into(),
        "eval_loss".into(),
        "lr_original".into(),
        "lr_new".into(),
    ];
    for l in 0..layers {
        cols.push(format!("gain.L{l}.attn"));
        cols.push(format!("gain.L{l}.moe"));
    }
    cols.push("max_symmetry_distance".into());
    cols.join(",")
}

/// Floats use 17 significant digits so rows round-trip exactly.
pub fn format_float(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:.16e}")
    }
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{}", self.step, self.tokens);
        for x in [self.train_loss, self.eval_loss, self.lr_original, self.lr_new]
            .into_iter()
            .chain(self.gains.iter().copied())
            .chain([self.max_symmetry_distance])
        {
            let _ = write!(s, ",{}", format_float(x));
        }
        s
    }
}

pub fn metrics_csv(layers: usize, records: &[MetricsRecord]) -> String {
    let mut out = metrics_header(layers);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Parsed numeric CSV: header names and rows of values.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Format("empty csv".into()))?
            .split(',')
            .map(str::to_string)
            .collect();
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let row: Vec<f64> = l
                    .split(',')
                    .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("bad value `{v}`"))))
                    .collect::<Result<_>>()?;
                if row.len() != header.len() {
                    return Err(Error::Format(format!("row has {} fields, header {}", row.len(), header.len())));
                }
                Ok(row)
            })
            .collect::<Result<_>>()?;
        Ok(Self { header, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let i = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("no column `{name}`")))?;
        Ok(self.rows.iter().map(|r| r[i]).collect())
    }
}
