//! The training-round loop and whole-run driver.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, GatingMode, LocalTraining, TargetMetric, TaskSelector, Variant};
use super::data::{self, DATA_DIR_ENV};
use super::metrics::{write_json, write_metrics, RoundMetrics, RunSummary};
use crate::bounds::{self, BoundReport, BoundTerms, GradientRecord};
use crate::error::{Error, Result};
use crate::fl_core::{
    aggregate_global, aggregate_with_predictions, full_gd_from_gradient, local_update_sgd, minimize_pooled, Dataset,
    ModelVec, TaskModel,
};
use crate::net_model::{link_delays, round_time, LinkDelays, NetworkConfig};
use crate::predictor::{gate, prediction_error, PredictorNet};
use crate::rb_alloc::{random_assignment, solve_minmax_assignment, AssignmentInstance};
use crate::rng::{stream, SimRng, Stream};
use crate::selection::{connection_probabilities, pick_anchor, sample_selection, sample_uniform};

/// Tolerance applied when checking measured gaps against the bound.
pub const BOUND_TOLERANCE: f64 = 1e-9;

/// Everything that happened in one round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub round: usize,
    /// Global model the round started from.
    pub start_global: ModelVec,
    pub local_models: Vec<ModelVec>,
    pub probs: Vec<f64>,
    pub assoc: Vec<bool>,
    pub rb_assignment: Vec<(usize, usize)>,
    pub round_time: f64,
    pub predicted: Vec<Option<ModelVec>>,
    pub pred_errors: Vec<Option<f64>>,
    pub gates: Vec<bool>,
    /// Global model after aggregation.
    pub global: ModelVec,
    pub global_loss: f64,
    pub test_metric: f64,
    /// Norm of the global-loss gradient at `start_global`.
    pub grad_norm: f64,
}

/// Gradient statistics of a run plus what is needed to turn them into a
/// bound report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientTrace {
    pub local_training: LocalTraining,
    pub smoothness: f64,
    pub strong_convexity: f64,
    pub optimum_loss: f64,
    /// Global loss before round 1, ..., before round T, and after round T.
    pub losses: Vec<f64>,
    pub records: Vec<GradientRecord>,
}

/// Simulator state between rounds.
pub struct Simulation {
    cfg: ExperimentConfig,
    task: TaskModel,
    users: Vec<Dataset>,
    sizes: Vec<usize>,
    pooled: Dataset,
    test: Dataset,
    network: NetworkConfig,
    delays: LinkDelays,
    step: f64,
    training: LocalTraining,
    global: ModelVec,
    anchor: Option<usize>,
    predictors: Vec<Option<PredictorNet>>,
    observed_error: Vec<Option<f64>>,
    selection_rng: SimRng,
    sample_rng: SimRng,
    alloc_rng: SimRng,
    round: usize,
    synthetic: bool,
    trace: Option<Vec<GradientRecord>>,
    trace_losses: Vec<f64>,
}

impl Simulation {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let n = &cfg.network;
        let distances = match &n.user_distances {
            Some(d) => d.clone(),
            None => data::disk_distances(n.num_users, n.cell_radius, n.min_distance, &mut stream(seed, Stream::Geometry)),
        };
        let sizes = cfg.samples_per_user();
        let (users, test, synthetic, pixels) = load_data(cfg, &sizes)?;
        let task = cfg.task_model_for(pixels);
        let global = task.init_params(&mut stream(seed, Stream::ModelInit));
        let pooled = Dataset::pooled(&users);
        let step = match cfg.step {
            Some(s) => s,
            None => 1.0 / bounds::curvature_constants(&task, &pooled)?.0,
        };
        let w = task.num_params();
        let network = NetworkConfig {
            num_users: n.num_users,
            cell_radius: n.cell_radius,
            pathloss_exponent: n.pathloss_exponent,
            tx_power_user: n.tx_power_user,
            tx_power_bs: n.tx_power_bs,
            rb_bandwidth: n.rb_bandwidth,
            dl_bandwidth: n.dl_bandwidth,
            noise_psd: cfg.noise_psd(),
            num_rbs: n.num_rbs,
            interference: n.interference.clone().unwrap_or_else(|| vec![0.0; n.num_rbs]),
            model_size_bits: n.model_size_bits.unwrap_or(32.0 * w as f64),
            user_distances: distances,
        };
        network.validate()?;
        let delays = link_delays(&network)?;
        Ok(Simulation {
            cfg: cfg.clone(),
            training: cfg.local_training(),
            task,
            users,
            sizes,
            pooled,
            test,
            network,
            delays,
            step,
            global,
            anchor: None,
            predictors: vec![None; n.num_users],
            observed_error: vec![None; n.num_users],
            selection_rng: stream(seed, Stream::Selection),
            sample_rng: stream(seed, Stream::SampleDraw),
            alloc_rng: stream(seed, Stream::RandomAllocation),
            round: 0,
            synthetic,
            trace: cfg.trace_bounds.then(Vec::new),
            trace_losses: Vec::new(),
        })
    }

    pub fn task(&self) -> &TaskModel {
        &self.task
    }

    pub fn global(&self) -> &ModelVec {
        &self.global
    }

    pub fn step_size(&self) -> f64 {
        self.step
    }

    pub fn anchor(&self) -> Option<usize> {
        self.anchor
    }

    pub fn network(&self) -> &NetworkConfig {
        &self.network
    }

    pub fn datasets(&self) -> &[Dataset] {
        &self.users
    }

    pub fn is_synthetic(&self) -> bool {
        self.synthetic
    }

    fn predicting(&self) -> bool {
        self.cfg.variant.uses_predictor() && self.cfg.predictor.enabled
    }

    /// Runs one round (local training, selection, RB assignment,
    /// prediction and gating, aggregation, predictor training).
    pub fn step(&mut self) -> Result<RoundOutcome> {
        self.round += 1;
        let round = self.round;
        self.run_round().map_err(|e| Error::Round {
            round,
            source: Box::new(e),
        })
    }

    fn run_round(&mut self) -> Result<RoundOutcome> {
        let u = self.users.len();
        let g = self.global.clone();
        let lambda = self.step;

        // local training
        let grads: Vec<ModelVec> = self
            .users
            .par_iter()
            .map(|d| self.task.gradient(&g, d))
            .collect::<Result<_>>()?;
        let e_norms: Vec<f64> = grads.iter().map(|gr| lambda * gr.norm()).collect();
        let local_models: Vec<ModelVec> = match self.training {
            LocalTraining::FullGd => grads
                .iter()
                .zip(&self.users)
                .map(|(gr, d)| full_gd_from_gradient(&g, gr, d.len(), lambda))
                .collect(),
            LocalTraining::Sgd => {
                let mut out = Vec::with_capacity(u);
                for d in &self.users {
                    out.push(local_update_sgd(&self.task, &g, d, lambda, None, &mut self.sample_rng)?.0);
                }
                out
            }
        };

        // association
        let baseline_b = self.cfg.variant == Variant::BaselineB;
        if self.anchor.is_none() && !baseline_b {
            let anchor = pick_anchor(&self.network.user_distances, &e_norms, self.cfg.anchor_candidates)?;
            info!("anchor user {anchor}");
            self.anchor = Some(anchor);
            if self.predicting() {
                let p = &self.cfg.predictor;
                for j in (0..u).filter(|&j| j != anchor) {
                    let mut rng = stream(self.cfg.seed, Stream::Predictor(j));
                    self.predictors[j] = Some(PredictorNet::new(g.len(), p.hidden, p.learn_rate, j, &mut rng)?);
                }
            }
        }
        let (probs, assoc) = match self.anchor {
            Some(anchor) if !baseline_b => {
                let probs = connection_probabilities(&e_norms, anchor)?;
                let assoc = sample_selection(&probs, anchor, self.network.num_rbs, &mut self.selection_rng)?;
                (probs, assoc)
            }
            _ => {
                let share = self.network.num_rbs.min(u) as f64 / u as f64;
                (vec![share; u], sample_uniform(u, self.network.num_rbs, &mut self.selection_rng))
            }
        };

        // resource blocks
        let instance = AssignmentInstance::from_delays(&assoc, &self.delays)?;
        let assignment = if baseline_b {
            random_assignment(&instance, &mut self.alloc_rng)?
        } else {
            solve_minmax_assignment(&instance)?
        };
        let alloc = assignment.allocation(u);
        let t = round_time(&assoc, &alloc, &self.delays)?;

        // prediction and gating
        let mut predicted: Vec<Option<ModelVec>> = vec![None; u];
        let mut pred_errors: Vec<Option<f64>> = vec![None; u];
        let mut gates = vec![false; u];
        if let (true, Some(anchor)) = (self.predicting(), self.anchor) {
            let w_anchor = &local_models[anchor];
            let stale = self.cfg.gating == GatingMode::Stale;
            for j in (0..u).filter(|&j| j != anchor) {
                if assoc[j] && !stale {
                    continue;
                }
                let net = self.predictors[j].as_ref().expect("predictor for every non-anchor user");
                let w_hat = net.predict(w_anchor)?;
                let error = prediction_error(&w_hat, &local_models[j])?;
                if assoc[j] {
                    self.observed_error[j] = Some(error);
                    continue;
                }
                let used = if stale { self.observed_error[j] } else { Some(error) };
                gates[j] = used.is_some_and(|e| gate(e, self.cfg.gate_threshold));
                if gates[j] && !stale {
                    assert!(error <= self.cfg.gate_threshold);
                }
                pred_errors[j] = used;
                predicted[j] = Some(w_hat);
            }
        }

        // aggregation
        let new_global = if self.cfg.variant.uses_predictor() {
            aggregate_with_predictions(&local_models, &predicted, &assoc, &gates, &self.sizes)?
        } else {
            aggregate_global(&local_models, &assoc, &self.sizes)?
        };

        // predictor training on the models that arrived
        if let (true, Some(anchor)) = (self.predicting(), self.anchor) {
            let epochs = self.cfg.predictor.epochs;
            for j in (0..u).filter(|&j| j != anchor && assoc[j]) {
                let net = self.predictors[j].as_mut().expect("predictor for every non-anchor user");
                net.train(&local_models[anchor], &local_models[j], epochs)?;
            }
        }

        let total: usize = self.sizes.iter().sum();
        let mut grad_sum = ModelVec::zeros(g.len());
        for gr in &grads {
            grad_sum.axpy(1.0, gr);
        }
        let grad_norm = grad_sum.norm() / total as f64;

        if self.trace.is_some() {
            let record = self.gradient_record(&g, &grads, grad_norm, &local_models, &predicted, &probs, &gates)?;
            self.trace_losses.push(self.task.mean_loss(&g, &self.pooled)?);
            self.trace.as_mut().expect("tracing").push(record);
        }

        let global_loss = self.task.mean_loss(&new_global, &self.pooled)?;
        let test_metric = self.task.metric(&new_global, &self.test)?;
        if !new_global.is_finite() {
            return Err(Error::Domain("global model diverged to non-finite values".into()));
        }
        self.global = new_global.clone();
        Ok(RoundOutcome {
            round: self.round,
            start_global: g,
            local_models,
            probs,
            assoc,
            rb_assignment: assignment.rb_of_user,
            round_time: t,
            predicted,
            pred_errors,
            gates,
            global: new_global,
            global_loss,
            test_metric,
            grad_norm,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn gradient_record(
        &self,
        g: &ModelVec,
        grads: &[ModelVec],
        grad_norm: f64,
        local_models: &[ModelVec],
        predicted: &[Option<ModelVec>],
        probs: &[f64],
        gates: &[bool],
    ) -> Result<GradientRecord> {
        let mut sample_grad_sq = Vec::with_capacity(self.users.len());
        for d in &self.users {
            let mut s = 0.0;
            for (x, y) in d.inputs.iter().zip(&d.outputs) {
                s += self.task.sample_gradient(g, x, y)?.norm_sq();
            }
            sample_grad_sq.push(s / d.len() as f64);
        }
        Ok(GradientRecord {
            round: self.round,
            global_grad_sq: grad_norm * grad_norm,
            user_grad_sq: grads
                .iter()
                .zip(&self.sizes)
                .map(|(gr, &k)| gr.norm_sq() / (k * k) as f64)
                .collect(),
            pred_deviation: predicted
                .iter()
                .zip(local_models)
                .map(|(p, w)| match p {
                    Some(p) if self.step > 0.0 => p.distance_sq(w).sqrt() / self.step,
                    _ => 0.0,
                })
                .collect(),
            sample_grad_sq,
            probs: probs.to_vec(),
            gated: gates.to_vec(),
            samples: self.sizes.clone(),
            anchor: self.anchor.unwrap_or(0),
        })
    }

    /// Gradient trace of the rounds run so far, with the pooled optimum.
    pub fn gradient_trace(&self) -> Result<Option<GradientTrace>> {
        let Some(records) = &self.trace else {
            return Ok(None);
        };
        let (smoothness, strong_convexity) = bounds::curvature_constants(&self.task, &self.pooled)?;
        let optimum = minimize_pooled(&self.task, &self.pooled, 1e-10)?;
        let mut losses = self.trace_losses.clone();
        losses.push(self.task.mean_loss(&self.global, &self.pooled)?);
        Ok(Some(GradientTrace {
            local_training: self.training,
            smoothness,
            strong_convexity,
            optimum_loss: optimum.loss,
            losses,
            records: records.clone(),
        }))
    }

    pub fn predictors(&self) -> impl Iterator<Item = &PredictorNet> {
        self.predictors.iter().flatten()
    }
}

fn load_data(cfg: &ExperimentConfig, sizes: &[usize]) -> Result<(Vec<Dataset>, Dataset, bool, usize)> {
    let seed = cfg.seed;
    match cfg.task.kind {
        TaskSelector::SinFit => {
            let mut rng = stream(seed, Stream::TrainData);
            let mut users = Vec::with_capacity(sizes.len());
            for &k in sizes {
                users.extend(data::generate_sin_dataset(1, k, &mut rng)?);
            }
            Ok((users, data::sin_test_grid(cfg.task.test_samples)?, false, 0))
        }
        TaskSelector::Digits => {
            let dir = cfg
                .task
                .data_dir
                .clone()
                .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from));
            let files = dir.as_deref().and_then(data::idx_files);
            let d = match files {
                Some((images, labels)) => data::load_idx_digits(
                    &images,
                    &labels,
                    sizes,
                    cfg.task.test_samples,
                    &mut stream(seed, Stream::TrainData),
                )?,
                None => {
                    if let Some(dir) = &dir {
                        warn!("no IDX files in {}, using synthetic digits", dir.display());
                    }
                    data::synthetic_digits(
                        cfg.task.image_side,
                        cfg.task.synthetic_noise,
                        sizes,
                        cfg.task.test_samples,
                        &mut stream(seed, Stream::Templates),
                        &mut stream(seed, Stream::TrainData),
                    )?
                }
            };
            Ok((d.users, d.test, d.synthetic, d.input_len))
        }
    }
}

/// Outcome of a whole run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub metrics: Vec<RoundMetrics>,
    pub trace: Option<GradientTrace>,
    pub bound_report: Option<BoundReport>,
}

fn target_met(cfg: &ExperimentConfig, loss: f64, metric: f64) -> bool {
    let thr = cfg.target.threshold;
    match cfg.target.metric {
        TargetMetric::TestMse => metric <= thr,
        TargetMetric::Accuracy => metric >= thr,
        TargetMetric::Loss => loss <= thr,
    }
}

/// First round that starts a run of `sustain` target-meeting rounds (fewer
/// when the horizon ends first).
pub fn convergence_round(met: &[bool], sustain: usize) -> Option<usize> {
    let t = met.len();
    (0..t)
        .find(|&m| {
            let s = sustain.min(t - m);
            met[m..m + s].iter().all(|&x| x)
        })
        .map(|m| m + 1)
}

/// Runs `cfg.rounds` rounds, calling `observe` after each.
pub fn run_with<F: FnMut(&RoundOutcome)>(cfg: &ExperimentConfig, observe: F) -> Result<RunOutput> {
    run_sim(cfg, observe).map(|(out, _)| out)
}

fn run_sim<F: FnMut(&RoundOutcome)>(cfg: &ExperimentConfig, mut observe: F) -> Result<(RunOutput, Simulation)> {
    let mut sim = Simulation::new(cfg)?;
    let mut rows = Vec::with_capacity(cfg.rounds);
    let mut met = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let out = sim.step()?;
        met.push(target_met(cfg, out.global_loss, out.test_metric));
        observe(&out);
        rows.push(RoundMetrics {
            round: out.round,
            assoc: out.assoc,
            rb_assignment: out.rb_assignment,
            round_time: out.round_time,
            cumulative_time: 0.0,
            omega: true,
            global_loss: out.global_loss,
            test_metric: out.test_metric,
            grad_norm: out.grad_norm,
            pred_errors: out.pred_errors,
            gates: out.gates,
        });
    }
    let conv = convergence_round(&met, cfg.sustain_rounds);
    let last_counted = conv.unwrap_or(rows.len());
    let mut cumulative = 0.0;
    for r in &mut rows {
        r.omega = r.round <= last_counted;
        if r.omega {
            cumulative += r.round_time;
        }
        r.cumulative_time = cumulative;
    }
    let trace = sim.gradient_trace()?;
    let bound_report = trace.as_ref().map(bound_report).transpose()?;
    let last = rows.last();
    let summary = RunSummary {
        variant: cfg.variant.name().into(),
        seed: cfg.seed,
        gating: match cfg.gating {
            GatingMode::Oracle => "oracle".into(),
            GatingMode::Stale => "stale".into(),
        },
        local_training: match sim.training {
            LocalTraining::FullGd => "full-gd".into(),
            LocalTraining::Sgd => "sgd".into(),
        },
        synthetic_data: sim.synthetic,
        num_params: sim.task.num_params(),
        anchor: sim.anchor,
        rounds_run: rows.len(),
        converged: conv.is_some(),
        convergence_round: last_counted,
        convergence_time: cumulative,
        total_time: rows.iter().map(|r| r.round_time).sum(),
        final_loss: last.map_or(f64::NAN, |r| r.global_loss),
        final_metric: last.map_or(f64::NAN, |r| r.test_metric),
        step: sim.step,
    };
    Ok((
        RunOutput {
            summary,
            metrics: rows,
            trace,
            bound_report,
        },
        sim,
    ))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_with(cfg, |_| {})
}

/// Checks the measured gap trace against the per-round bound terms
/// (full-gradient or SGD form, by the run's local training).
pub fn bound_report(trace: &GradientTrace) -> Result<BoundReport> {
    if trace.losses.len() != trace.records.len() + 1 {
        return Err(Error::Data(format!(
            "trace has {} losses for {} rounds",
            trace.losses.len(),
            trace.records.len()
        )));
    }
    let gaps: Vec<f64> = trace.losses.iter().map(|l| l - trace.optimum_loss).collect();
    let terms: Vec<Option<BoundTerms>> = trace
        .records
        .iter()
        .map(|r| {
            let Some(c) = bounds::estimate_coeffs(r, trace.smoothness, trace.strong_convexity)? else {
                return Ok(None);
            };
            match trace.local_training {
                LocalTraining::FullGd => bounds::gd_bound_terms(&c).map(Some),
                LocalTraining::Sgd => bounds::sgd_bound_terms(&c).map(Some),
            }
        })
        .collect::<Result<_>>()?;
    bounds::check_gap_trace(&gaps, &terms, BOUND_TOLERANCE)
}

/// Writes `metrics.csv`, `summary.json`, `config.toml` and, when present,
/// `gradient_trace.json` and `bound_report.json` into `dir`.
pub fn write_outputs(cfg: &ExperimentConfig, out: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_metrics(&out.metrics, &dir.join("metrics.csv"))?;
    write_json(&out.summary, &dir.join("summary.json"))?;
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
    if let Some(t) = &out.trace {
        write_json(t, &dir.join("gradient_trace.json"))?;
    }
    if let Some(r) = &out.bound_report {
        write_json(r, &dir.join("bound_report.json"))?;
    }
    Ok(())
}

/// Runs and writes outputs, including predictor checkpoints when enabled.
pub fn run_to_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutput> {
    let (out, sim) = run_sim(cfg, |_| {})?;
    write_outputs(cfg, &out, dir)?;
    if cfg.predictor.checkpoint && sim.predicting() {
        let ckpt = dir.join("predictors");
        std::fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        for net in sim.predictors() {
            net.write_checkpoint(&ckpt.join(format!("user-{:03}.bin", net.target_user)))?;
        }
    }
    Ok(out)
}
