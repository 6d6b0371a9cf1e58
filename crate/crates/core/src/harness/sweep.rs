//! Parallel runs over (variant, seed) pairs.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Variant};
use super::metrics::{fmt_real, write_json, RunSummary};
use super::run::{run_experiment, run_to_dir, RunOutput};
use crate::error::{Error, Result};

/// Per-variant aggregate of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMedians {
    pub variant: String,
    pub runs: usize,
    pub converged: usize,
    pub median_convergence_time: f64,
    pub median_convergence_round: f64,
    pub median_final_metric: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Configs for every (variant, seed) pair, variant-major.
pub fn sweep_configs(base: &ExperimentConfig, variants: &[Variant], seeds: &[u64]) -> Vec<ExperimentConfig> {
    variants
        .iter()
        .flat_map(|&v| {
            seeds.iter().map(move |&s| ExperimentConfig {
                variant: v,
                seed: s,
                ..base.clone()
            })
        })
        .collect()
}

/// Runs every pair in parallel. With `out_dir`, each run writes into
/// `out_dir/<variant>/seed-<seed>` and the sweep writes `sweep.csv` and
/// `medians.json` at the top.
pub fn run_sweep(
    base: &ExperimentConfig,
    variants: &[Variant],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<Vec<RunOutput>> {
    let configs = sweep_configs(base, variants, seeds);
    let outputs: Vec<RunOutput> = configs
        .par_iter()
        .map(|cfg| match out_dir {
            Some(dir) => run_to_dir(cfg, &dir.join(cfg.variant.name()).join(format!("seed-{}", cfg.seed))),
            None => run_experiment(cfg),
        })
        .collect::<Result<_>>()?;
    if let Some(dir) = out_dir {
        let summaries: Vec<&RunSummary> = outputs.iter().map(|o| &o.summary).collect();
        write_sweep_csv(&summaries, &dir.join("sweep.csv"))?;
        write_json(&medians(&summaries, variants), &dir.join("medians.json"))?;
    }
    Ok(outputs)
}

pub fn medians(summaries: &[&RunSummary], variants: &[Variant]) -> Vec<VariantMedians> {
    variants
        .iter()
        .map(|v| {
            let runs: Vec<&&RunSummary> = summaries.iter().filter(|s| s.variant == v.name()).collect();
            let pick = |f: fn(&RunSummary) -> f64| median(&runs.iter().map(|s| f(s)).collect::<Vec<_>>());
            VariantMedians {
                variant: v.name().into(),
                runs: runs.len(),
                converged: runs.iter().filter(|s| s.converged).count(),
                median_convergence_time: pick(|s| s.convergence_time),
                median_convergence_round: pick(|s| s.convergence_round as f64),
                median_final_metric: pick(|s| s.final_metric),
            }
        })
        .collect()
}

pub fn write_sweep_csv(summaries: &[&RunSummary], path: &Path) -> Result<()> {
    let csv_err = |e| Error::Csv {
        path: path.into(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "variant",
        "seed",
        "converged",
        "convergence_round",
        "convergence_time",
        "total_time",
        "final_loss",
        "final_metric",
    ])
    .map_err(csv_err)?;
    for s in summaries {
        w.write_record([
            s.variant.clone(),
            s.seed.to_string(),
            u8::from(s.converged).to_string(),
            s.convergence_round.to_string(),
            fmt_real(s.convergence_time),
            fmt_real(s.total_time),
            fmt_real(s.final_loss),
            fmt_real(s.final_metric),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
