use serde::{Deserialize, Serialize};

use super::{Dataset, ModelVec};
use crate::error::{Error, Result};

/// Probabilities are clipped into this margin before taking logs.
pub const PROB_CLIP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Squared error on a linear output.
    Regression,
    /// Cross-entropy on a sigmoid (one output) or softmax (several) head.
    Classification,
}

/// A dense network (or a linear model when `hidden` is empty) together with
/// its loss.
///
/// Parameters are laid out layer by layer; each layer stores its weight
/// matrix row-major (`out × in`) followed by its bias (when `bias` is set).
/// Hidden layers use `tanh`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskModel {
    pub kind: TaskKind,
    pub n_in: usize,
    pub n_out: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_bias")]
    pub bias: bool,
    /// L2 penalty `l2/2 * |w|^2` added to every per-sample loss.
    #[serde(default)]
    pub l2: f64,
    /// When set, first-layer weights are drawn from `[-s, s]` and each hidden
    /// unit's bias puts its transition at a uniform random point of the unit
    /// input cube. Otherwise all layers use Glorot-uniform weights.
    #[serde(default)]
    pub init_scale: Option<f64>,
}

fn default_bias() -> bool {
    true
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Layer {
    fn weights(self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }
    fn bias_start(self) -> usize {
        self.offset + self.fan_in * self.fan_out
    }
}

impl TaskModel {
    /// Multinomial logistic regression with bias.
    pub fn logistic(n_in: usize, n_out: usize, l2: f64) -> Self {
        TaskModel {
            kind: TaskKind::Classification,
            n_in,
            n_out,
            hidden: Vec::new(),
            bias: true,
            l2,
            init_scale: None,
        }
    }

    /// Least squares with a linear model.
    pub fn linear_regression(n_in: usize, n_out: usize, bias: bool) -> Self {
        TaskModel {
            kind: TaskKind::Regression,
            n_in,
            n_out,
            hidden: Vec::new(),
            bias,
            l2: 0.0,
            init_scale: None,
        }
    }

    fn layers(&self) -> Vec<Layer> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(self.n_in);
        sizes.extend(&self.hidden);
        sizes.push(self.n_out);
        let mut offset = 0;
        sizes
            .windows(2)
            .map(|w| {
                let layer = Layer {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += w[0] * w[1] + if self.bias { w[1] } else { 0 };
                layer
            })
            .collect()
    }

    /// Number of parameters `W`.
    pub fn num_params(&self) -> usize {
        self.layers()
            .last()
            .map(|l| l.bias_start() + if self.bias { l.fan_out } else { 0 })
            .unwrap_or(0)
    }

    /// True when the loss is convex in the parameters.
    pub fn is_linear(&self) -> bool {
        self.hidden.is_empty()
    }

    /// Initial parameters: zeros for linear models; otherwise random weights
    /// (see [`init_scale`](Self::init_scale)) and zero biases.
    pub fn init_params<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> ModelVec {
        let mut p = ModelVec::zeros(self.num_params());
        if self.is_linear() {
            return p;
        }
        for (l, layer) in self.layers().into_iter().enumerate() {
            match self.init_scale {
                Some(s) if l == 0 => {
                    for o in 0..layer.fan_out {
                        let row = layer.offset + o * layer.fan_in;
                        let mut shift = 0.0;
                        for w in &mut p.0[row..row + layer.fan_in] {
                            *w = rng.random_range(-s..=s);
                            shift += *w * rng.random_range(0.0..1.0);
                        }
                        if self.bias {
                            p.0[layer.bias_start() + o] = -shift;
                        }
                    }
                }
                _ => {
                    let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
                    for w in &mut p.0[layer.weights()] {
                        *w = rng.random_range(-limit..limit);
                    }
                }
            }
        }
        p
    }

    fn check(&self, params: &ModelVec, x: &[f64], y: Option<&[f64]>) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Contract(format!(
                "model has {} parameters, task expects {}",
                params.len(),
                self.num_params()
            )));
        }
        if x.len() != self.n_in {
            return Err(Error::Contract(format!("input of length {}, expected {}", x.len(), self.n_in)));
        }
        if let Some(y) = y {
            if y.len() != self.n_out {
                return Err(Error::Contract(format!("target of length {}, expected {}", y.len(), self.n_out)));
            }
        }
        Ok(())
    }

    /// Activations of every layer, input first, pre-head output last.
    fn forward_all(&self, params: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let layers = self.layers();
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(x.to_vec());
        for (l, layer) in layers.iter().enumerate() {
            let input = &acts[l];
            let w = &params[layer.weights()];
            let mut out: Vec<f64> = w.chunks_exact(layer.fan_in).map(|row| dot(row, input)).collect();
            if self.bias {
                let b = &params[layer.bias_start()..layer.bias_start() + layer.fan_out];
                for (o, bi) in out.iter_mut().zip(b) {
                    *o += bi;
                }
            }
            if l + 1 < layers.len() {
                for o in &mut out {
                    *o = o.tanh();
                }
            }
            acts.push(out);
        }
        acts
    }

    fn head(&self, logits: &[f64]) -> Vec<f64> {
        match self.kind {
            TaskKind::Regression => logits.to_vec(),
            TaskKind::Classification if logits.len() == 1 => vec![sigmoid(logits[0])],
            TaskKind::Classification => softmax(logits),
        }
    }

    /// Model output: regression values or class probabilities.
    pub fn predict(&self, params: &ModelVec, x: &[f64]) -> Result<Vec<f64>> {
        self.check(params, x, None)?;
        let acts = self.forward_all(&params.0, x);
        Ok(self.head(acts.last().expect("at least one layer")))
    }

    fn penalty(&self, params: &[f64]) -> f64 {
        if self.l2 == 0.0 {
            0.0
        } else {
            0.5 * self.l2 * dot(params, params)
        }
    }

    /// Per-sample loss `f(w, x, y)`.
    pub fn loss(&self, params: &ModelVec, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check(params, x, Some(y))?;
        let acts = self.forward_all(&params.0, x);
        let out = self.head(acts.last().expect("at least one layer"));
        let data = match self.kind {
            TaskKind::Regression => out.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum(),
            TaskKind::Classification if out.len() == 1 => {
                let p = out[0].clamp(PROB_CLIP, 1.0 - PROB_CLIP);
                -(y[0] * p.ln() + (1.0 - y[0]) * (1.0 - p).ln())
            }
            TaskKind::Classification => -out
                .iter()
                .zip(y)
                .map(|(p, t)| t * p.clamp(PROB_CLIP, 1.0 - PROB_CLIP).ln())
                .sum::<f64>(),
        };
        Ok(data + self.penalty(&params.0))
    }

    /// Adds `scale * ∇f(w, x, y)` into `grad`.
    fn accumulate_gradient(&self, params: &[f64], x: &[f64], y: &[f64], scale: f64, grad: &mut [f64]) {
        let layers = self.layers();
        let acts = self.forward_all(params, x);
        let out = self.head(acts.last().expect("at least one layer"));
        // derivative with respect to the pre-head output
        let mut delta: Vec<f64> = match self.kind {
            TaskKind::Regression => out.iter().zip(y).map(|(p, t)| 2.0 * (p - t)).collect(),
            TaskKind::Classification => out.iter().zip(y).map(|(p, t)| p - t).collect(),
        };
        for (l, layer) in layers.iter().enumerate().rev() {
            let input = &acts[l];
            let w_range = layer.weights();
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[w_range.start + o * layer.fan_in..w_range.start + (o + 1) * layer.fan_in];
                let sd = scale * d;
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += sd * a;
                }
            }
            if self.bias {
                let b0 = layer.bias_start();
                for (o, &d) in delta.iter().enumerate() {
                    grad[b0 + o] += scale * d;
                }
            }
            if l > 0 {
                let w = &params[w_range];
                let mut prev = vec![0.0; layer.fan_in];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for (p, &wv) in prev.iter_mut().zip(row) {
                        *p += wv * d;
                    }
                }
                for (p, &a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
        if self.l2 != 0.0 {
            for (g, &p) in grad.iter_mut().zip(params) {
                *g += scale * self.l2 * p;
            }
        }
    }

    /// Gradient of a single sample's loss.
    pub fn sample_gradient(&self, params: &ModelVec, x: &[f64], y: &[f64]) -> Result<ModelVec> {
        self.check(params, x, Some(y))?;
        let mut g = vec![0.0; params.len()];
        self.accumulate_gradient(&params.0, x, y, 1.0, &mut g);
        Ok(ModelVec(g))
    }

    /// Sum of per-sample gradients over `data` (not divided by the count).
    pub fn gradient(&self, params: &ModelVec, data: &Dataset) -> Result<ModelVec> {
        if data.is_empty() {
            return Err(Error::Data("gradient of an empty dataset".into()));
        }
        self.check(params, &data.inputs[0], Some(&data.outputs[0]))?;
        let mut g = vec![0.0; params.len()];
        for (x, y) in data.inputs.iter().zip(&data.outputs) {
            self.accumulate_gradient(&params.0, x, y, 1.0, &mut g);
        }
        Ok(ModelVec(g))
    }

    /// Mean loss over `data`.
    pub fn mean_loss(&self, params: &ModelVec, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Data("loss of an empty dataset".into()));
        }
        let mut total = 0.0;
        for (x, y) in data.inputs.iter().zip(&data.outputs) {
            total += self.loss(params, x, y)?;
        }
        Ok(total / data.len() as f64)
    }

    /// Evaluation metric: accuracy for classification, mean squared error
    /// per output for regression.
    pub fn metric(&self, params: &ModelVec, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Data("metric of an empty dataset".into()));
        }
        let mut acc = 0.0;
        for (x, y) in data.inputs.iter().zip(&data.outputs) {
            let out = self.predict(params, x)?;
            acc += match self.kind {
                TaskKind::Regression => {
                    out.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / self.n_out as f64
                }
                TaskKind::Classification if out.len() == 1 => f64::from((out[0] >= 0.5) == (y[0] >= 0.5)),
                TaskKind::Classification => f64::from(argmax(&out) == argmax(y)),
            };
        }
        Ok(acc / data.len() as f64)
    }

    /// Whether a higher [`metric`](Self::metric) is better.
    pub fn metric_higher_is_better(&self) -> bool {
        self.kind == TaskKind::Classification
    }

    /// Constant `c` with per-sample Hessian `≼ c · x̃x̃ᵀ ⊗ I` for linear models:
    /// 2 for squared error, 1/4 for a sigmoid head and 1/2 for softmax.
    pub fn curvature_scale(&self) -> Option<f64> {
        if !self.is_linear() {
            return None;
        }
        Some(match self.kind {
            TaskKind::Regression => 2.0,
            TaskKind::Classification if self.n_out == 1 => 0.25,
            TaskKind::Classification => 0.5,
        })
    }

    /// Second moment `Σ x̃x̃ᵀ / K` of the (bias-augmented) inputs, row-major.
    pub fn input_second_moment(&self, data: &Dataset) -> Vec<f64> {
        let d = self.n_in + usize::from(self.bias);
        let mut m = vec![0.0; d * d];
        let mut xa = vec![1.0; d];
        for x in &data.inputs {
            xa[..self.n_in].copy_from_slice(x);
            for i in 0..d {
                let xi = xa[i];
                if xi == 0.0 {
                    continue;
                }
                for j in 0..d {
                    m[i * d + j] += xi * xa[j];
                }
            }
        }
        let k = data.len() as f64;
        m.iter_mut().for_each(|v| *v /= k);
        m
    }

    /// Exact Hessian of the summed loss for linear models (row-major W×W).
    pub fn hessian(&self, params: &ModelVec, data: &Dataset) -> Result<Vec<f64>> {
        if !self.is_linear() {
            return Err(Error::Contract("Hessian is only available for linear models".into()));
        }
        let w = self.num_params();
        let d = self.n_in + usize::from(self.bias);
        let c = self.n_out;
        // parameter index of (class, feature): weights block then bias block
        let idx = |class: usize, feat: usize| {
            if feat < self.n_in {
                class * self.n_in + feat
            } else {
                c * self.n_in + class
            }
        };
        let mut h = vec![0.0; w * w];
        let mut xa = vec![1.0; d];
        for (x, _) in data.inputs.iter().zip(&data.outputs) {
            xa[..self.n_in].copy_from_slice(x);
            // curvature of the loss in the logits
            let curv: Vec<f64> = match self.kind {
                TaskKind::Regression => {
                    let mut m = vec![0.0; c * c];
                    (0..c).for_each(|a| m[a * c + a] = 2.0);
                    m
                }
                TaskKind::Classification => {
                    let p = self.predict(params, x)?;
                    if c == 1 {
                        vec![p[0] * (1.0 - p[0])]
                    } else {
                        let mut m = vec![0.0; c * c];
                        for a in 0..c {
                            for b in 0..c {
                                m[a * c + b] = if a == b { p[a] * (1.0 - p[a]) } else { -p[a] * p[b] };
                            }
                        }
                        m
                    }
                }
            };
            for a in 0..c {
                for b in 0..c {
                    let s = curv[a * c + b];
                    if s == 0.0 {
                        continue;
                    }
                    for fi in 0..d {
                        let xi = xa[fi];
                        if xi == 0.0 {
                            continue;
                        }
                        let row = idx(a, fi) * w;
                        for fj in 0..d {
                            h[row + idx(b, fj)] += s * xi * xa[fj];
                        }
                    }
                }
            }
        }
        if self.l2 != 0.0 {
            let k = data.len() as f64;
            for i in 0..w {
                h[i * w + i] += k * self.l2;
            }
        }
        Ok(h)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use rand::Rng;

    fn scalar_model() -> TaskModel {
        TaskModel::linear_regression(1, 1, false)
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(TaskModel::logistic(784, 10, 0.0).num_params(), 7850);
        let fnn = TaskModel {
            hidden: vec![50],
            ..TaskModel::logistic(784, 10, 0.0)
        };
        assert_eq!(fnn.num_params(), 784 * 50 + 50 + 50 * 10 + 10);
        assert_eq!(scalar_model().num_params(), 1);
    }

    #[test]
    fn loss_examples() {
        let m = TaskModel::linear_regression(2, 1, true);
        let w = ModelVec(vec![1.0, 2.0, 0.5]);
        assert_eq!(m.loss(&w, &[1.0, 1.0], &[3.5]).unwrap(), 0.0);

        // sigmoid head with zero logit gives p = 0.5
        let b = TaskModel::logistic(3, 1, 0.0);
        let l = b.loss(&ModelVec::zeros(4), &[0.3, -1.0, 2.0], &[1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

        // uniform 10-way prediction
        let s = TaskModel::logistic(4, 10, 0.0);
        let mut y = vec![0.0; 10];
        y[3] = 1.0;
        let l = s.loss(&ModelVec::zeros(50), &[1.0, 2.0, 3.0, 4.0], &y).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn clipped_loss_is_finite() {
        let b = TaskModel::logistic(1, 1, 0.0);
        let l = b.loss(&ModelVec(vec![1e4, 0.0]), &[1.0], &[0.0]).unwrap();
        assert!(l.is_finite());
        assert!((l - -(PROB_CLIP.ln())).abs() < 1e-3);
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let m = TaskModel::logistic(3, 2, 0.0);
        let w = ModelVec::zeros(8);
        assert!(matches!(m.loss(&w, &[1.0], &[1.0, 0.0]), Err(Error::Contract(_))));
        assert!(matches!(m.loss(&w, &[1.0, 2.0, 3.0], &[1.0]), Err(Error::Contract(_))));
        assert!(matches!(m.loss(&ModelVec::zeros(3), &[1.0, 2.0, 3.0], &[1.0, 0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_examples() {
        // f = (g - 1)^2 at g = 0
        let m = scalar_model();
        let g = m.sample_gradient(&ModelVec(vec![0.0]), &[1.0], &[1.0]).unwrap();
        assert_eq!(g.0, vec![-2.0]);

        let lr = TaskModel::linear_regression(2, 1, true);
        let w = ModelVec(vec![1.0, -1.0, 0.5]);
        let xs = vec![vec![0.2, 0.4], vec![1.0, 3.0]];
        let ys = xs.iter().map(|x| vec![x[0] - x[1] + 0.5]).collect();
        let d = Dataset::new(xs, ys).unwrap();
        assert!(lr.gradient(&w, &d).unwrap().0.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let mut rng = stream(9, Stream::ModelInit);
        for model in [
            TaskModel::logistic(3, 4, 0.1),
            TaskModel::logistic(3, 1, 0.0),
            TaskModel::linear_regression(3, 2, true),
        ] {
            let xs: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let ys: Vec<Vec<f64>> = (0..6)
                .map(|k| {
                    let mut y = vec![0.0; model.n_out];
                    y[k % model.n_out] = 1.0;
                    y
                })
                .collect();
            let d = Dataset::new(xs, ys).unwrap();
            let w = ModelVec((0..model.num_params()).map(|_| rng.random_range(-0.5..0.5)).collect());
            let h = model.hessian(&w, &d).unwrap();
            let n = model.num_params();
            let eps = 1e-5;
            for j in 0..n {
                let mut wp = w.clone();
                wp.0[j] += eps;
                let mut wm = w.clone();
                wm.0[j] -= eps;
                let gp = model.gradient(&wp, &d).unwrap();
                let gm = model.gradient(&wm, &d).unwrap();
                for i in 0..n {
                    let fd = (gp.0[i] - gm.0[i]) / (2.0 * eps);
                    assert!((fd - h[i * n + j]).abs() < 1e-6, "{i},{j}: {fd} vs {}", h[i * n + j]);
                }
            }
        }
    }

    #[test]
    fn metric_examples() {
        let s = TaskModel::logistic(2, 3, 0.0);
        // class 2 logit boosted by bias
        let mut w = ModelVec::zeros(9);
        w.0[8] = 5.0;
        let d = Dataset::new(
            vec![vec![0.0, 0.0], vec![1.0, 1.0]],
            vec![vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]],
        )
        .unwrap();
        assert_eq!(s.metric(&w, &d).unwrap(), 0.5);
        let r = TaskModel::linear_regression(1, 1, false);
        let d = Dataset::new(vec![vec![1.0], vec![2.0]], vec![vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(r.metric(&ModelVec(vec![1.0]), &d).unwrap(), 0.5);
    }
}
