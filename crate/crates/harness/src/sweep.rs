//! Way, shot and fine-tuning-step sweeps: one full train + evaluate per
//! (value, method) cell.

use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Result};

use signmaml::MetaMethod;

use crate::config::ExperimentConfig;
use crate::output::{self, ResultRow, RESULT_COLUMNS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Way,
    Shot,
    /// Inner steps during meta-training; test-time steps stay at `m_test`.
    Steps,
}

impl FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "way" | "N" => Ok(Axis::Way),
            "shot" | "K" => Ok(Axis::Shot),
            "steps" | "m" => Ok(Axis::Steps),
            other => bail!("unknown sweep axis '{other}' (way, shot, steps)"),
        }
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Way => "way",
            Axis::Shot => "shot",
            Axis::Steps => "steps",
        }
    }

    pub fn apply(self, cfg: &mut ExperimentConfig, value: usize) {
        match self {
            Axis::Way => cfg.task.way = value,
            Axis::Shot => cfg.task.shot = value,
            Axis::Steps => cfg.meta.m_train = value,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepCell {
    pub value: usize,
    pub row: ResultRow,
    /// Set when the cell failed; its measurement columns are then empty.
    pub error: Option<String>,
}

pub fn default_methods(cfg: &ExperimentConfig) -> Vec<MetaMethod> {
    if cfg.sweep.methods.is_empty() {
        vec![MetaMethod::FoMaml, MetaMethod::SignMaml]
    } else {
        cfg.sweep.methods.clone()
    }
}

/// Runs every cell in order, writing each run's files under
/// `dir/<axis>-<value>/<method>/`. A failed cell is logged and skipped.
pub fn sweep(cfg: &ExperimentConfig, axis: Axis, values: &[usize], methods: &[MetaMethod], dir: &Path) -> Result<Vec<SweepCell>> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let mut cells = Vec::new();
    for &value in values {
        for &method in methods {
            let mut c = cfg.with_method(method);
            axis.apply(&mut c, value);
            let cell_dir = dir.join(format!("{}-{value}", axis.name())).join(method.name());
            let result = c.validate().and_then(|_| output::run_experiment(&c, &cell_dir));
            cells.push(match result {
                Ok((_, summary)) => SweepCell {
                    value,
                    row: summary.row(),
                    error: None,
                },
                Err(e) => SweepCell {
                    value,
                    row: ResultRow::empty(&c),
                    error: Some(format!("{e:#}")),
                },
            });
        }
    }
    Ok(cells)
}

/// Sign-MAML minus FO-MAML accuracy at `value`, when both cells exist.
pub fn sign_minus_fo(cells: &[SweepCell], value: usize) -> Option<f64> {
    let acc = |m: MetaMethod| {
        cells
            .iter()
            .find(|c| c.value == value && c.row.method == m.name())
            .and_then(|c| c.row.accuracy)
    };
    Some(acc(MetaMethod::SignMaml)? - acc(MetaMethod::FoMaml)?)
}

/// `axis,value,<result columns>,sign_minus_fo`, one line per cell.
pub fn write_sweep(path: &Path, axis: Axis, cells: &[SweepCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["axis", "value"];
    header.extend(RESULT_COLUMNS);
    header.push("sign_minus_fo");
    w.write_record(&header)?;
    for c in cells {
        let mut rec = vec![axis.name().to_string(), c.value.to_string()];
        rec.extend(c.row.fields());
        rec.push(sign_minus_fo(cells, c.value).map(|d| d.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
