//! Per-round metrics and run summaries on disk.
//!
//! The metrics CSV has one row per round and the columns of [`COLUMNS`]:
//!
//! | column | content |
//! |---|---|
//! | `round` | round index, from 1 |
//! | `assoc` | one `0`/`1` character per user |
//! | `rb_assignment` | `user:rb` pairs separated by `;`, users ascending |
//! | `round_time` | slowest selected user's uplink + downlink delay, s |
//! | `cumulative_time` | running sum of `round_time` over rounds counted before convergence |
//! | `omega` | 1 while the run has not yet converged, 0 afterwards |
//! | `global_loss` | mean training loss of the global model after the round |
//! | `test_metric` | test accuracy (digits) or test MSE (sin-fit) after the round |
//! | `grad_norm` | norm of the global-loss gradient at the model the round started from |
//! | `num_gated` | predicted models admitted into aggregation |
//! | `pred_errors` | per-user prediction error used for gating, `;`-separated, empty where none |
//! | `gates` | one `0`/`1` character per user |
//!
//! Reals are written in scientific notation with 17 significant digits, so
//! parsing a file gives back exactly the values that were written.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 12] = [
    "round",
    "assoc",
    "rb_assignment",
    "round_time",
    "cumulative_time",
    "omega",
    "global_loss",
    "test_metric",
    "grad_norm",
    "num_gated",
    "pred_errors",
    "gates",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub assoc: Vec<bool>,
    pub rb_assignment: Vec<(usize, usize)>,
    pub round_time: f64,
    pub cumulative_time: f64,
    pub omega: bool,
    pub global_loss: f64,
    pub test_metric: f64,
    pub grad_norm: f64,
    pub pred_errors: Vec<Option<f64>>,
    pub gates: Vec<bool>,
}

/// Outcome of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub seed: u64,
    pub gating: String,
    pub local_training: String,
    /// True when the digits were generated rather than read from IDX files.
    pub synthetic_data: bool,
    pub num_params: usize,
    pub anchor: Option<usize>,
    pub rounds_run: usize,
    pub converged: bool,
    /// Last round counted before convergence (equals `rounds_run` when not converged).
    pub convergence_round: usize,
    /// Sum of round times over the counted rounds, seconds.
    pub convergence_time: f64,
    /// Sum of all round times, seconds.
    pub total_time: f64,
    pub final_loss: f64,
    pub final_metric: f64,
    pub step: f64,
}

pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn bits(v: &[bool]) -> String {
    v.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn parse_bits(s: &str, row: usize) -> Result<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => Err(Error::Data(format!("row {row}: bad flag character {c:?}"))),
        })
        .collect()
}

fn parse_real(s: &str, row: usize) -> Result<f64> {
    s.parse().map_err(|_| Error::Data(format!("row {row}: bad number {s:?}")))
}

fn parse_usize(s: &str, row: usize) -> Result<usize> {
    s.parse().map_err(|_| Error::Data(format!("row {row}: bad integer {s:?}")))
}

impl RoundMetrics {
    fn to_record(&self) -> Vec<String> {
        vec![
            self.round.to_string(),
            bits(&self.assoc),
            self.rb_assignment
                .iter()
                .map(|(u, n)| format!("{u}:{n}"))
                .collect::<Vec<_>>()
                .join(";"),
            fmt_real(self.round_time),
            fmt_real(self.cumulative_time),
            u8::from(self.omega).to_string(),
            fmt_real(self.global_loss),
            fmt_real(self.test_metric),
            fmt_real(self.grad_norm),
            self.gates.iter().filter(|&&g| g).count().to_string(),
            self.pred_errors
                .iter()
                .map(|e| e.map(fmt_real).unwrap_or_default())
                .collect::<Vec<_>>()
                .join(";"),
            bits(&self.gates),
        ]
    }

    fn from_record(rec: &csv::StringRecord, row: usize) -> Result<Self> {
        if rec.len() != COLUMNS.len() {
            return Err(Error::Data(format!("row {row}: {} fields, expected {}", rec.len(), COLUMNS.len())));
        }
        let rb_assignment = if rec[2].is_empty() {
            Vec::new()
        } else {
            rec[2]
                .split(';')
                .map(|pair| {
                    let (u, n) = pair
                        .split_once(':')
                        .ok_or_else(|| Error::Data(format!("row {row}: bad assignment {pair:?}")))?;
                    Ok((parse_usize(u, row)?, parse_usize(n, row)?))
                })
                .collect::<Result<_>>()?
        };
        let assoc = parse_bits(&rec[1], row)?;
        let pred_errors = if assoc.is_empty() {
            Vec::new()
        } else {
            rec[10]
                .split(';')
                .map(|e| if e.is_empty() { Ok(None) } else { parse_real(e, row).map(Some) })
                .collect::<Result<_>>()?
        };
        Ok(RoundMetrics {
            round: parse_usize(&rec[0], row)?,
            assoc,
            rb_assignment,
            round_time: parse_real(&rec[3], row)?,
            cumulative_time: parse_real(&rec[4], row)?,
            omega: parse_usize(&rec[5], row)? == 1,
            global_loss: parse_real(&rec[6], row)?,
            test_metric: parse_real(&rec[7], row)?,
            grad_norm: parse_real(&rec[8], row)?,
            pred_errors,
            gates: parse_bits(&rec[11], row)?,
        })
    }
}

/// Writes the metrics CSV (header only for an empty run).
pub fn write_metrics(metrics: &[RoundMetrics], path: &Path) -> Result<()> {
    let csv_err = |e| Error::Csv {
        path: path.into(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(COLUMNS).map_err(csv_err)?;
    for m in metrics {
        w.write_record(m.to_record()).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<RoundMetrics>> {
    let csv_err = |e| Error::Csv {
        path: path.into(),
        source: e,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?;
    if header.iter().ne(COLUMNS) {
        return Err(Error::Data(format!("{}: unexpected header", path.display())));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| RoundMetrics::from_record(&rec.map_err(csv_err)?, i + 1))
        .collect()
}

/// Pretty-printed JSON file.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<RoundMetrics> {
        vec![
            RoundMetrics {
                round: 1,
                assoc: vec![true, false, true],
                rb_assignment: vec![(0, 1), (2, 0)],
                round_time: 0.1 + 0.2,
                cumulative_time: 0.1 + 0.2,
                omega: true,
                global_loss: std::f64::consts::LN_10,
                test_metric: 1.0 / 3.0,
                grad_norm: 1e-300,
                pred_errors: vec![None, Some(2.0f64.sqrt() * 1e-7), None],
                gates: vec![false, true, false],
            },
            RoundMetrics {
                round: 2,
                assoc: vec![true, true, true],
                rb_assignment: vec![(0, 0), (1, 1), (2, 2)],
                round_time: 7.0,
                cumulative_time: 7.3,
                omega: false,
                global_loss: -0.0,
                test_metric: f64::MAX,
                grad_norm: 0.0,
                pred_errors: vec![None, None, None],
                gates: vec![false; 3],
            },
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = sample();
        write_metrics(&m, &path).unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back, m);
        for (a, b) in back.iter().zip(&m) {
            assert_eq!(a.round_time.to_bits(), b.round_time.to_bits());
            assert_eq!(a.global_loss.to_bits(), b.global_loss.to_bits());
        }
    }

    #[test]
    fn empty_run_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), COLUMNS.join(",") + "\n");
        assert!(read_metrics(&path).unwrap().is_empty());
    }

    #[test]
    fn io_errors_carry_the_path() {
        let err = write_metrics(&sample(), Path::new("/nonexistent-dir/m.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/m.csv"));
    }
}
