//! Per-user predictors of local models.
//!
//! Each non-anchor user `j` gets a single-hidden-layer network that maps the
//! anchor's local model to the difference `w_anchor - w_j`. The base station
//! uses `w_anchor - o` as a stand-in for `w_j` when user `j` is not selected
//! and the prediction error is within the gating threshold.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl_core::ModelVec;

/// Hidden activation `2 / (1 + e^{-2x}) - 1`, i.e. `tanh`.
pub fn activation(x: f64) -> f64 {
    2.0 / (1.0 + (-2.0 * x).exp()) - 1.0
}

/// Single-hidden-layer network `o = v_out σ(v_in w + b_hidden) + b_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorNet {
    /// `hidden × model_len`, row-major.
    pub v_in: Vec<f64>,
    pub b_hidden: Vec<f64>,
    /// `model_len × hidden`, row-major.
    pub v_out: Vec<f64>,
    pub b_out: Vec<f64>,
    pub learn_rate: f64,
    pub target_user: usize,
    hidden: usize,
    model_len: usize,
}

/// Gradient of the pair loss, laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorGrad {
    pub v_in: Vec<f64>,
    pub b_hidden: Vec<f64>,
    pub v_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

impl PredictorGrad {
    /// Flattened in the order of [`PredictorNet::flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        [&self.v_in[..], &self.b_hidden, &self.v_out, &self.b_out].concat()
    }
}

impl PredictorNet {
    /// Weights uniform in `[-0.1, 0.1]`, zero biases.
    pub fn new<R: Rng + ?Sized>(
        model_len: usize,
        hidden: usize,
        learn_rate: f64,
        target_user: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden == 0 || model_len == 0 {
            return Err(Error::Config("predictor needs at least one hidden neuron and parameter".into()));
        }
        if !(learn_rate.is_finite() && learn_rate > 0.0) {
            return Err(Error::Config(format!("predictor learn rate must be positive, got {learn_rate}")));
        }
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-0.1..=0.1)).collect() };
        let v_in = draw(hidden * model_len);
        let v_out = draw(model_len * hidden);
        Ok(PredictorNet {
            v_in,
            b_hidden: vec![0.0; hidden],
            v_out,
            b_out: vec![0.0; model_len],
            learn_rate,
            target_user,
            hidden,
            model_len,
        })
    }

    /// Network with all weights and biases zero.
    pub fn zeros(model_len: usize, hidden: usize, learn_rate: f64, target_user: usize) -> Self {
        PredictorNet {
            v_in: vec![0.0; hidden * model_len],
            b_hidden: vec![0.0; hidden],
            v_out: vec![0.0; model_len * hidden],
            b_out: vec![0.0; model_len],
            learn_rate,
            target_user,
            hidden,
            model_len,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn model_len(&self) -> usize {
        self.model_len
    }

    fn check_len(&self, w: &ModelVec) -> Result<()> {
        if w.len() != self.model_len {
            return Err(Error::Contract(format!(
                "predictor expects models of length {}, got {}",
                self.model_len,
                w.len()
            )));
        }
        Ok(())
    }

    fn hidden_state(&self, w_anchor: &[f64]) -> Vec<f64> {
        self.v_in
            .chunks_exact(self.model_len)
            .zip(&self.b_hidden)
            .map(|(row, b)| activation(row.iter().zip(w_anchor).map(|(a, x)| a * x).sum::<f64>() + b))
            .collect()
    }

    fn output(&self, h: &[f64]) -> Vec<f64> {
        self.v_out
            .chunks_exact(self.hidden)
            .zip(&self.b_out)
            .map(|(row, b)| row.iter().zip(h).map(|(a, x)| a * x).sum::<f64>() + b)
            .collect()
    }

    /// Network output `o` for the anchor model.
    pub fn forward(&self, w_anchor: &ModelVec) -> Result<ModelVec> {
        self.check_len(w_anchor)?;
        let h = self.hidden_state(&w_anchor.0);
        Ok(ModelVec(self.output(&h)))
    }

    /// Predicted model of the target user, `w_anchor - o`.
    pub fn predict(&self, w_anchor: &ModelVec) -> Result<ModelVec> {
        let o = self.forward(w_anchor)?;
        Ok(w_anchor.sub(&o))
    }

    /// Training loss `|o - (w_anchor - w_target)|^2 / (2W)` on one pair.
    pub fn pair_loss(&self, w_anchor: &ModelVec, w_target: &ModelVec) -> Result<f64> {
        self.check_len(w_target)?;
        let o = self.forward(w_anchor)?;
        let s: f64 = o
            .0
            .iter()
            .zip(w_anchor.0.iter().zip(&w_target.0))
            .map(|(o, (a, t))| {
                let r = o - (a - t);
                r * r
            })
            .sum();
        Ok(s / (2.0 * self.model_len as f64))
    }

    /// Backpropagated gradient of [`pair_loss`](Self::pair_loss).
    pub fn pair_gradient(&self, w_anchor: &ModelVec, w_target: &ModelVec) -> Result<PredictorGrad> {
        self.check_len(w_anchor)?;
        self.check_len(w_target)?;
        let (n, w) = (self.hidden, self.model_len);
        let h = self.hidden_state(&w_anchor.0);
        let o = self.output(&h);
        let d_out: Vec<f64> = (0..w)
            .map(|k| (o[k] - (w_anchor.0[k] - w_target.0[k])) / w as f64)
            .collect();
        let mut g_v_out = vec![0.0; w * n];
        let mut d_hidden = vec![0.0; n];
        for k in 0..w {
            let row = &self.v_out[k * n..(k + 1) * n];
            for j in 0..n {
                g_v_out[k * n + j] = d_out[k] * h[j];
                d_hidden[j] += row[j] * d_out[k];
            }
        }
        for j in 0..n {
            d_hidden[j] *= 1.0 - h[j] * h[j];
        }
        let mut g_v_in = vec![0.0; n * w];
        for j in 0..n {
            for (g, x) in g_v_in[j * w..(j + 1) * w].iter_mut().zip(&w_anchor.0) {
                *g = d_hidden[j] * x;
            }
        }
        Ok(PredictorGrad {
            v_in: g_v_in,
            b_hidden: d_hidden,
            v_out: g_v_out,
            b_out: d_out,
        })
    }

    /// One online gradient step on the pair (anchor model, received model).
    pub fn train_step(&mut self, w_anchor: &ModelVec, w_target: &ModelVec) -> Result<()> {
        let g = self.pair_gradient(w_anchor, w_target)?;
        let lr = self.learn_rate;
        for (p, d) in [
            (&mut self.v_in, &g.v_in),
            (&mut self.b_hidden, &g.b_hidden),
            (&mut self.v_out, &g.v_out),
            (&mut self.b_out, &g.b_out),
        ] {
            for (a, b) in p.iter_mut().zip(d) {
                *a -= lr * b;
            }
        }
        Ok(())
    }

    /// `epochs` consecutive online steps on the same pair.
    pub fn train(&mut self, w_anchor: &ModelVec, w_target: &ModelVec, epochs: usize) -> Result<()> {
        for _ in 0..epochs {
            self.train_step(w_anchor, w_target)?;
        }
        Ok(())
    }

    /// All parameters as one flat vector: `v_in`, `b_hidden`, `v_out`, `b_out`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.v_in.len() + self.v_out.len() + self.hidden + self.model_len);
        v.extend(&self.v_in);
        v.extend(&self.b_hidden);
        v.extend(&self.v_out);
        v.extend(&self.b_out);
        v
    }

    /// Inverse of [`flat_params`](Self::flat_params).
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let (n, w) = (self.hidden, self.model_len);
        if flat.len() != 2 * n * w + n + w {
            return Err(Error::Contract(format!(
                "expected {} predictor parameters, got {}",
                2 * n * w + n + w,
                flat.len()
            )));
        }
        let (a, rest) = flat.split_at(n * w);
        let (b, rest) = rest.split_at(n);
        let (c, d) = rest.split_at(w * n);
        self.v_in.copy_from_slice(a);
        self.b_hidden.copy_from_slice(b);
        self.v_out.copy_from_slice(c);
        self.b_out.copy_from_slice(d);
        Ok(())
    }

    /// Writes a JSON header line followed by the flat parameters as
    /// little-endian `f64`.
    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            target_user: self.target_user,
            hidden: self.hidden,
            model_len: self.model_len,
            learn_rate: self.learn_rate,
            count: self.flat_params().len(),
        };
        let mut bytes = serde_json::to_vec(&header).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        bytes.push(b'\n');
        for v in self.flat_params() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = std::io::BufReader::new(f);
        let mut line = Vec::new();
        reader.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Parse {
                offset: line.len() as u64,
                message: "checkpoint header is not newline-terminated".into(),
            });
        }
        let header: CheckpointHeader = serde_json::from_slice(&line[..line.len() - 1]).map_err(|e| Error::Parse {
            offset: e.column().saturating_sub(1) as u64,
            message: format!("bad checkpoint header: {e}"),
        })?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse {
                offset: 0,
                message: format!("unknown checkpoint format {:?}", header.format),
            });
        }
        let mut net = PredictorNet::zeros(header.model_len, header.hidden, header.learn_rate, header.target_user);
        let expected = net.flat_params().len();
        if header.count != expected {
            return Err(Error::Parse {
                offset: 0,
                message: format!("header declares {} values, shape implies {expected}", header.count),
            });
        }
        let mut body = Vec::new();
        reader.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
        if body.len() != 8 * expected {
            return Err(Error::Parse {
                offset: (line.len() + body.len().min(8 * expected)) as u64,
                message: format!("expected {} payload bytes, found {}", 8 * expected, body.len()),
            });
        }
        let flat: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        net.set_flat_params(&flat)?;
        Ok(net)
    }
}

const CHECKPOINT_FORMAT: &str = "flwire-predictor-v1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    target_user: usize,
    hidden: usize,
    model_len: usize,
    learn_rate: f64,
    count: usize,
}

/// Mean squared deviation `|ŵ - w|^2 / (2W)`.
pub fn prediction_error(predicted: &ModelVec, actual: &ModelVec) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::Contract(format!(
            "prediction of length {} for a model of length {}",
            predicted.len(),
            actual.len()
        )));
    }
    if actual.is_empty() {
        return Err(Error::Contract("empty model".into()));
    }
    Ok(predicted.distance_sq(actual) / (2.0 * actual.len() as f64))
}

/// Whether a prediction with error `error` may enter aggregation.
pub fn gate(error: f64, threshold: f64) -> bool {
    error <= threshold
}
