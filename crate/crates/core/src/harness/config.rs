//! Experiment configuration (TOML).
//!
//! ```toml
//! seed = 7
//! variant = "proposed-fullgd"      # proposed-sgd | proposed-fullgd | baseline-a | baseline-b
//! gating = "oracle"                # oracle | stale
//! rounds = 500
//! step = 0.1                       # local learning rate
//! gate_threshold = 0.01
//! anchor_candidates = 3
//!
//! [network]
//! num_users = 15
//! num_rbs = 5
//!
//! [task]
//! kind = "sin-fit"                 # sin-fit | digits
//! samples_per_user = 12
//!
//! [target]
//! metric = "test-mse"              # test-mse | accuracy | loss
//! threshold = 0.01
//!
//! [predictor]
//! hidden = 5
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl_core::{TaskKind, TaskModel};
use crate::net_model::dbm_per_hz_to_watts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Proposed selection, optimal RBs, predictors, single-sample local steps.
    ProposedSgd,
    /// Proposed selection, optimal RBs, predictors, full-gradient local steps.
    #[serde(rename = "proposed-fullgd")]
    ProposedFullGd,
    /// Proposed selection and optimal RBs without prediction.
    BaselineA,
    /// Uniform random selection and random RB matching, no prediction.
    BaselineB,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::ProposedSgd,
        Variant::ProposedFullGd,
        Variant::BaselineA,
        Variant::BaselineB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ProposedSgd => "proposed-sgd",
            Variant::ProposedFullGd => "proposed-fullgd",
            Variant::BaselineA => "baseline-a",
            Variant::BaselineB => "baseline-b",
        }
    }

    pub fn uses_predictor(self) -> bool {
        matches!(self, Variant::ProposedSgd | Variant::ProposedFullGd)
    }

    pub fn default_training(self) -> LocalTraining {
        match self {
            Variant::ProposedSgd => LocalTraining::Sgd,
            _ => LocalTraining::FullGd,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatingMode {
    /// Gate on the true prediction error.
    #[default]
    Oracle,
    /// Gate on the error observed the last time the user transmitted.
    Stale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalTraining {
    #[serde(rename = "full-gd")]
    FullGd,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskSelector {
    SinFit,
    Digits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMetric {
    /// Test mean squared error at or below the threshold.
    TestMse,
    /// Test accuracy at or above the threshold.
    Accuracy,
    /// Global training loss at or below the threshold.
    Loss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub metric: TargetMetric,
    pub threshold: f64,
}

/// Samples per user: one count for everybody or one per user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SamplesPerUser {
    Same(usize),
    Each(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSettings {
    pub kind: TaskSelector,
    pub samples_per_user: SamplesPerUser,
    /// Test set size (sin-fit: evenly spaced grid points).
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    /// Hidden layer widths; defaults to `[10]` for sin-fit and `[]`
    /// (logistic regression) for digits.
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub l2: f64,
    /// First-layer init scale (see `TaskModel::init_scale`); defaults to 8
    /// for sin-fit.
    #[serde(default)]
    pub init_scale: Option<f64>,
    /// Directory with IDX files; falls back to `$FLWIRE_DATA_DIR`, then to
    /// synthetic digits.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Side length of synthetic digit images.
    #[serde(default = "default_image_side")]
    pub image_side: usize,
    /// Pixel noise amplitude of synthetic digits.
    #[serde(default = "default_synthetic_noise")]
    pub synthetic_noise: f64,
}

fn default_test_samples() -> usize {
    200
}
fn default_image_side() -> usize {
    8
}
fn default_synthetic_noise() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSettings {
    pub num_users: usize,
    pub num_rbs: usize,
    #[serde(default = "default_radius")]
    pub cell_radius: f64,
    #[serde(default = "default_alpha")]
    pub pathloss_exponent: f64,
    #[serde(default = "one")]
    pub tx_power_user: f64,
    #[serde(default = "one")]
    pub tx_power_bs: f64,
    #[serde(default = "default_rb_bandwidth")]
    pub rb_bandwidth: f64,
    #[serde(default = "default_dl_bandwidth")]
    pub dl_bandwidth: f64,
    #[serde(default = "default_noise")]
    pub noise_dbm_per_hz: f64,
    /// Per-RB interference in watts; zeros when absent.
    #[serde(default)]
    pub interference: Option<Vec<f64>>,
    /// Payload bits; `32 · W` when absent.
    #[serde(default)]
    pub model_size_bits: Option<f64>,
    /// Fixed user distances in meters; uniform in the disk when absent.
    #[serde(default)]
    pub user_distances: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub min_distance: f64,
}

fn default_radius() -> f64 {
    500.0
}
fn default_alpha() -> f64 {
    2.0
}
fn one() -> f64 {
    1.0
}
fn default_rb_bandwidth() -> f64 {
    1e6
}
fn default_dl_bandwidth() -> f64 {
    20e6
}
fn default_noise() -> f64 {
    -174.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorSettings {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_predictor_hidden")]
    pub hidden: usize,
    #[serde(default = "default_predictor_lr")]
    pub learn_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Write every predictor's weights to the output directory at the end.
    #[serde(default)]
    pub checkpoint: bool,
}

impl Default for PredictorSettings {
    fn default() -> Self {
        PredictorSettings {
            enabled: true,
            hidden: default_predictor_hidden(),
            learn_rate: default_predictor_lr(),
            epochs: default_epochs(),
            checkpoint: false,
        }
    }
}

fn yes() -> bool {
    true
}
fn default_predictor_hidden() -> usize {
    5
}
fn default_predictor_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub variant: Variant,
    #[serde(default)]
    pub gating: GatingMode,
    /// Maximum number of rounds `T`.
    pub rounds: usize,
    /// Local learning rate `λ`.
    #[serde(default)]
    pub step: Option<f64>,
    /// Use `λ = 1/L` with `L` the smoothness constant of the pooled loss
    /// (linear tasks only). Exclusive with `step`.
    #[serde(default)]
    pub step_from_smoothness: bool,
    /// Prediction error threshold `γ`.
    pub gate_threshold: f64,
    /// Number of nearest users eligible as anchor, `γ_R`.
    pub anchor_candidates: usize,
    /// Overrides the variant's local update rule.
    #[serde(default)]
    pub local_training: Option<LocalTraining>,
    /// Consecutive rounds the target must hold to count as converged.
    #[serde(default = "default_sustain")]
    pub sustain_rounds: usize,
    /// Log gradient statistics and evaluate the convergence bound.
    #[serde(default)]
    pub trace_bounds: bool,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub network: NetworkSettings,
    pub task: TaskSettings,
    pub target: Target,
    #[serde(default)]
    pub predictor: PredictorSettings,
}

fn default_sustain() -> usize {
    3
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if !(self.gate_threshold.is_finite() && self.gate_threshold > 0.0) {
            return bad(format!("gate_threshold must be positive, got {}", self.gate_threshold));
        }
        match (self.step, self.step_from_smoothness) {
            (Some(_), true) => return bad("set either step or step_from_smoothness, not both".into()),
            (None, false) => return bad("step is required unless step_from_smoothness is set".into()),
            (Some(s), false) if !(s.is_finite() && s >= 0.0) => {
                return bad(format!("step must be non-negative, got {s}"));
            }
            _ => {}
        }
        let n = &self.network;
        if n.num_users == 0 || n.num_rbs == 0 {
            return bad("num_users and num_rbs must be at least 1".into());
        }
        if self.anchor_candidates == 0 || self.anchor_candidates > n.num_users {
            return bad(format!(
                "anchor_candidates must be in 1..={}, got {}",
                n.num_users, self.anchor_candidates
            ));
        }
        if self.sustain_rounds == 0 {
            return bad("sustain_rounds must be at least 1".into());
        }
        if let Some(d) = &n.user_distances {
            if d.len() != n.num_users {
                return bad(format!("{} user distances for {} users", d.len(), n.num_users));
            }
        }
        if let Some(i) = &n.interference {
            if i.len() != n.num_rbs {
                return bad(format!("{} interference values for {} RBs", i.len(), n.num_rbs));
            }
        }
        if !(n.min_distance > 0.0) {
            return bad("min_distance must be positive".into());
        }
        let sizes = self.samples_per_user();
        if sizes.len() != n.num_users {
            return bad(format!("{} sample counts for {} users", sizes.len(), n.num_users));
        }
        if sizes.contains(&0) {
            return bad("every user needs at least one sample".into());
        }
        if self.task.test_samples < 2 {
            return bad("test_samples must be at least 2".into());
        }
        if !(self.task.l2.is_finite() && self.task.l2 >= 0.0) {
            return bad(format!("l2 must be non-negative, got {}", self.task.l2));
        }
        if self.task.hidden.as_ref().is_some_and(|h| h.contains(&0)) {
            return bad("hidden layer widths must be positive".into());
        }
        match (self.task.kind, self.target.metric) {
            (TaskSelector::SinFit, TargetMetric::Accuracy) => {
                return bad("accuracy target needs the digits task".into());
            }
            (TaskSelector::Digits, TargetMetric::TestMse) => {
                return bad("test-mse target needs the sin-fit task".into());
            }
            _ => {}
        }
        if self.step_from_smoothness && !self.task_model().is_linear() {
            return bad("step_from_smoothness needs a linear task model".into());
        }
        if self.trace_bounds && !self.task_model().is_linear() {
            return bad("trace_bounds needs a linear task model".into());
        }
        let p = &self.predictor;
        if p.enabled && (p.hidden == 0 || !(p.learn_rate.is_finite() && p.learn_rate > 0.0)) {
            return bad("predictor needs hidden >= 1 and a positive learn_rate".into());
        }
        Ok(())
    }

    pub fn samples_per_user(&self) -> Vec<usize> {
        match &self.task.samples_per_user {
            SamplesPerUser::Same(k) => vec![*k; self.network.num_users],
            SamplesPerUser::Each(v) => v.clone(),
        }
    }

    pub fn local_training(&self) -> LocalTraining {
        self.local_training.unwrap_or(self.variant.default_training())
    }

    /// Task model; `digit_pixels` is only used by the digits task.
    pub fn task_model_for(&self, digit_pixels: usize) -> TaskModel {
        let t = &self.task;
        match t.kind {
            TaskSelector::SinFit => TaskModel {
                kind: TaskKind::Regression,
                n_in: 1,
                n_out: 1,
                hidden: t.hidden.clone().unwrap_or_else(|| vec![10]),
                bias: true,
                l2: t.l2,
                init_scale: t.init_scale.or(Some(8.0)),
            },
            TaskSelector::Digits => TaskModel {
                kind: TaskKind::Classification,
                n_in: digit_pixels,
                n_out: 10,
                hidden: t.hidden.clone().unwrap_or_default(),
                bias: true,
                l2: t.l2,
                init_scale: t.init_scale,
            },
        }
    }

    /// Task model assuming synthetic digits of the configured side.
    pub fn task_model(&self) -> TaskModel {
        self.task_model_for(self.task.image_side * self.task.image_side)
    }

    pub fn noise_psd(&self) -> f64 {
        dbm_per_hz_to_watts(self.network.noise_dbm_per_hz)
    }
}
