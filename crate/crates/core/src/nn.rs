//! Two-layer tanh MLPs with hand-written backpropagation and Adam.
//!
//! Parameters live in one flat `Vec<f64>` laid out as
//! `[W1 (hidden x input, row-major), b1, W2 (output x hidden), b2]`, which is
//! also the checkpoint layout. Gradients use the same layout.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite gradient at parameter {0}")]
    NonFiniteGradient(usize),
    #[error("checkpoint is malformed: {0}")]
    BadCheckpoint(String),
}

fn check_len(expected: usize, got: usize) -> Result<(), NnError> {
    if expected == got {
        Ok(())
    } else {
        Err(NnError::ShapeMismatch { expected, got })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    input: usize,
    hidden: usize,
    output: usize,
    params: Vec<f64>,
}

/// Cached forward pass for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        let n = hidden * input + hidden + output * hidden + output;
        Mlp {
            input,
            hidden,
            output,
            params: vec![0.0; n],
        }
    }

    /// Weights uniform in `±sqrt(1/fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(input, hidden, output);
        let l1 = (1.0 / input as f64).sqrt();
        let l2 = (1.0 / hidden as f64).sqrt();
        let (w1, w2) = (m.w1_range(), m.w2_range());
        for p in &mut m.params[w1] {
            *p = rng.gen_range(-l1..=l1);
        }
        for p in &mut m.params[w2] {
            *p = rng.gen_range(-l2..=l2);
        }
        m
    }

    /// Zeroes the output layer so every input maps to identical outputs.
    pub fn zero_output_layer(&mut self) {
        let start = self.w2_range().start;
        self.params[start..].iter_mut().for_each(|p| *p = 0.0);
    }

    pub fn input_size(&self) -> usize {
        self.input
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    pub fn output_size(&self) -> usize {
        self.output
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn w1_range(&self) -> std::ops::Range<usize> {
        0..self.hidden * self.input
    }

    fn b1_start(&self) -> usize {
        self.hidden * self.input
    }

    fn w2_range(&self) -> std::ops::Range<usize> {
        let s = self.b1_start() + self.hidden;
        s..s + self.output * self.hidden
    }

    fn b2_start(&self) -> usize {
        self.w2_range().end
    }

    /// Scales the output-layer weights (not its bias).
    pub fn scale_output_weights(&mut self, k: f64) {
        let r = self.w2_range();
        self.params[r].iter_mut().for_each(|p| *p *= k);
    }

    pub fn forward(&self, x: &[f64]) -> Result<Activations, NnError> {
        check_len(self.input, x.len())?;
        let p = &self.params;
        let b1 = self.b1_start();
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|h| {
                let row = &p[h * self.input..(h + 1) * self.input];
                let z: f64 = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + p[b1 + h];
                z.tanh()
            })
            .collect();
        let w2 = self.w2_range().start;
        let b2 = self.b2_start();
        let output = (0..self.output)
            .map(|o| {
                let row = &p[w2 + o * self.hidden..w2 + (o + 1) * self.hidden];
                row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + p[b2 + o]
            })
            .collect();
        Ok(Activations { hidden, output })
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d output`.
    pub fn backward(
        &self,
        x: &[f64],
        act: &Activations,
        grad_out: &[f64],
        grads: &mut [f64],
    ) -> Result<(), NnError> {
        check_len(self.input, x.len())?;
        check_len(self.output, grad_out.len())?;
        check_len(self.params.len(), grads.len())?;
        check_len(self.hidden, act.hidden.len())?;
        let p = &self.params;
        let w2 = self.w2_range().start;
        let b2 = self.b2_start();
        let b1 = self.b1_start();
        let mut dpre = vec![0.0; self.hidden];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = w2 + o * self.hidden;
            for h in 0..self.hidden {
                grads[row + h] += g * act.hidden[h];
                dpre[h] += g * p[row + h];
            }
            grads[b2 + o] += g;
        }
        for h in 0..self.hidden {
            let d = dpre[h] * (1.0 - act.hidden[h] * act.hidden[h]);
            if d == 0.0 {
                continue;
            }
            let row = h * self.input;
            for (gi, xi) in grads[row..row + self.input].iter_mut().zip(x) {
                *gi += d * xi;
            }
            grads[b1 + h] += d;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, version: u64) -> MlpCheckpoint {
        MlpCheckpoint {
            version,
            layers: vec![
                LayerShape {
                    rows: self.hidden,
                    cols: self.input,
                },
                LayerShape {
                    rows: self.output,
                    cols: self.hidden,
                },
            ],
            weights: self.params.clone(),
        }
    }

    pub fn from_checkpoint(c: &MlpCheckpoint) -> Result<Self, NnError> {
        let [l1, l2] = c.layers.as_slice() else {
            return Err(NnError::BadCheckpoint(format!("expected 2 layers, got {}", c.layers.len())));
        };
        if l1.rows != l2.cols {
            return Err(NnError::BadCheckpoint("layer shapes do not chain".into()));
        }
        let mut m = Mlp::zeros(l1.cols, l1.rows, l2.rows);
        check_len(m.params.len(), c.weights.len())?;
        m.params.copy_from_slice(&c.weights);
        if m.params.iter().any(|x| !x.is_finite()) {
            return Err(NnError::BadCheckpoint("non-finite weight".into()));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
}

/// On-disk and actor-sync parameter format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub version: u64,
    pub layers: Vec<LayerShape>,
    /// Per layer: row-major weight matrix followed by its bias.
    pub weights: Vec<f64>,
}

/// Softmax over the unmasked entries; masked entries get probability 0.
pub fn softmax(logits: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let allowed = |i: usize| mask.is_none_or(|m| m[i]);
    let max = (0..logits.len())
        .filter(|&i| allowed(i))
        .map(|i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = (0..logits.len())
        .map(|i| if allowed(i) { (logits[i] - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    p
}

/// `log softmax(logits)[a]`, computed without forming the probabilities.
pub fn log_prob(logits: &[f64], mask: Option<&[bool]>, a: usize) -> f64 {
    let allowed = |i: usize| mask.is_none_or(|m| m[i]);
    if !allowed(a) {
        return f64::NEG_INFINITY;
    }
    let max = (0..logits.len())
        .filter(|&i| allowed(i))
        .map(|i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = (0..logits.len())
        .filter(|&i| allowed(i))
        .map(|i| (logits[i] - max).exp())
        .sum::<f64>()
        .ln();
    logits[a] - max - lse
}

pub fn policy_forward(theta: &Mlp, state: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>, NnError> {
    if let Some(m) = mask {
        check_len(theta.output, m.len())?;
    }
    Ok(softmax(&theta.forward(state)?.output, mask))
}

pub fn value_forward(w: &Mlp, state: &[f64]) -> Result<f64, NnError> {
    check_len(1, w.output)?;
    Ok(w.forward(state)?.output[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected descent step on `params` along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        check_len(self.m.len(), params.len())?;
        check_len(self.m.len(), grads.len())?;
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient(i));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}
