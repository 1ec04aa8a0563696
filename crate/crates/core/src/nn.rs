//! Dense rectifier network with a single output logit.
//!
//! `backward` takes an arbitrary cotangent on the logits, so the same pass
//! differentiates the cross-entropy risk and the invariance penalty.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persist::{self, ArtifactKind, ByteReader, ByteWriter};
use crate::rng::RngStream;

pub const DEFAULT_WIDTHS: [usize; 4] = [392, 390, 390, 1];
const CHECKPOINT_VERSION: u32 = 1;
const ACTIVATION_RELU: u8 = 0;

/// `weights` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(fan_out: usize, fan_in: usize) -> Self {
        Self {
            weights: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
}

/// Same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.last() != Some(&1) || widths.contains(&0) {
        return Err(Error::BadWidths(widths.to_vec()));
    }
    Ok(())
}

impl ModelParams {
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        Ok(Self {
            layers: widths.windows(2).map(|w| Layer::zeros(w[1], w[0])).collect(),
        })
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut out = vec![self.layers[0].weights.ncols()];
        out.extend(self.layers.iter().map(|l| l.weights.nrows()));
        out
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters flattened layer by layer: weights row-major, then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let mut offset = index;
        for l in &mut self.layers {
            if offset < l.weights.len() {
                let cols = l.weights.ncols();
                l.weights[[offset / cols, offset % cols]] = value;
                return;
            }
            offset -= l.weights.len();
            if offset < l.bias.len() {
                l.bias[offset] = value;
                return;
            }
            offset -= l.bias.len();
        }
        panic!("parameter index {index} out of range");
    }

    /// Checkpoint payload: version u32, layer-width count u32, widths u32...,
    /// activation tag u8, weights/bias of each layer as row-major f64, then a
    /// CRC-32 (u32) of every preceding payload byte. Little-endian throughout.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let widths = self.widths();
        let mut w = ByteWriter::new();
        w.u32(CHECKPOINT_VERSION).u32(widths.len() as u32);
        for &width in &widths {
            w.u32(width as u32);
        }
        w.u8(ACTIVATION_RELU);
        for l in &self.layers {
            for &v in l.weights.iter() {
                w.f64(v);
            }
            for &v in l.bias.iter() {
                w.f64(v);
            }
        }
        let mut bytes = w.finish();
        let checksum = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&checksum.to_le_bytes());
        bytes
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::CorruptPayload("checkpoint too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::CorruptPayload("checkpoint checksum mismatch".into()));
        }
        let mut r = ByteReader::new(body);
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let widths = (0..count).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if r.u8()? != ACTIVATION_RELU {
            return Err(Error::CorruptPayload("unknown activation tag".into()));
        }
        let mut params = ModelParams::zeros(&widths)?;
        for l in &mut params.layers {
            for v in l.weights.iter_mut() {
                *v = r.f64()?;
            }
            for v in l.bias.iter_mut() {
                *v = r.f64()?;
            }
        }
        r.finish()?;
        Ok(params)
    }

    pub fn save(&self, path: &std::path::Path, upstream_hash: u64) -> Result<()> {
        persist::save_artifact(ArtifactKind::Checkpoint, &self.to_checkpoint_bytes(), upstream_hash, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (_, payload) = persist::load_artifact(ArtifactKind::Checkpoint, path)?;
        Self::from_checkpoint_bytes(&payload)
    }
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weights.nrows(), l.weights.ncols()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.bias *= factor;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }
}

/// Weights uniform on `[-a, a]` with `a = sqrt(3 / fan_in)` (variance `1 / fan_in`),
/// drawn row-major layer by layer from the `"init"` stream of `seed`; biases zero.
pub fn init_mlp(widths: &[usize], seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(widths)?;
    let mut rng = RngStream::new(seed, "init");
    for l in &mut params.layers {
        let bound = (3.0 / l.weights.ncols() as f64).sqrt();
        for w in l.weights.iter_mut() {
            *w = (2.0 * rng.uniform() - 1.0) * bound;
        }
    }
    Ok(params)
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Array1<f64>,
    /// Post-rectifier activations of every hidden layer, each `B x width`.
    pub hidden: Vec<Array2<f64>>,
}

impl ForwardPass {
    /// Penultimate representation; `None` for a network without hidden layers.
    pub fn penultimate(&self) -> Option<&Array2<f64>> {
        self.hidden.last()
    }
}

pub fn forward(params: &ModelParams, batch: ArrayView2<f64>) -> Result<ForwardPass> {
    if batch.ncols() != params.input_width() {
        return Err(Error::ShapeMismatch(format!(
            "batch width {} but network input width {}",
            batch.ncols(),
            params.input_width()
        )));
    }
    let (output, hidden_layers) = params.layers.split_last().expect("at least one layer");
    let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(hidden_layers.len());
    for layer in hidden_layers {
        let input = hidden.last().map(|h| h.view()).unwrap_or(batch);
        let mut act = input.dot(&layer.weights.t());
        Zip::from(act.rows_mut()).for_each(|mut row| {
            Zip::from(&mut row).and(&layer.bias).for_each(|a, &b| *a = (*a + b).max(0.0));
        });
        hidden.push(act);
    }
    let last = hidden.last().map(|h| h.view()).unwrap_or(batch);
    let logits = last.dot(&output.weights.row(0)) + output.bias[0];
    Ok(ForwardPass { logits, hidden })
}

/// Gradient of `sum_i dlogits_i * logit_i` with respect to every parameter.
pub fn backward(
    params: &ModelParams,
    batch: ArrayView2<f64>,
    pass: &ForwardPass,
    dlogits: ArrayView1<f64>,
) -> Result<Gradients> {
    if dlogits.len() != batch.nrows() || pass.logits.len() != batch.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "batch of {} rows, forward pass of {}, cotangent of {}",
            batch.nrows(),
            pass.logits.len(),
            dlogits.len()
        )));
    }
    if pass.hidden.len() + 1 != params.layers.len() {
        return Err(Error::ShapeMismatch("forward pass does not match network depth".into()));
    }
    let depth = params.layers.len();
    let mut grads = Gradients::zeros_like(params);
    let input_of = |k: usize| if k == 0 { batch } else { pass.hidden[k - 1].view() };

    // Output layer: one row of weights.
    let out_input = input_of(depth - 1);
    grads.layers[depth - 1].weights.row_mut(0).assign(&out_input.t().dot(&dlogits));
    grads.layers[depth - 1].bias[0] = dlogits.sum();
    if depth == 1 {
        return Ok(grads);
    }
    let w_out = params.layers[depth - 1].weights.row(0);
    let mut delta = Array2::from_shape_fn((batch.nrows(), w_out.len()), |(i, j)| dlogits[i] * w_out[j]);

    for k in (0..depth - 1).rev() {
        Zip::from(&mut delta)
            .and(&pass.hidden[k])
            .for_each(|d, &h| {
                if h <= 0.0 {
                    *d = 0.0;
                }
            });
        grads.layers[k].weights = delta.t().dot(&input_of(k));
        grads.layers[k].bias = delta.sum_axis(Axis(0));
        if k > 0 {
            delta = delta.dot(&params.layers[k].weights);
        }
    }
    Ok(grads)
}

fn check_labels(logits: ArrayView1<f64>, labels: ArrayView1<f64>) -> Result<()> {
    if logits.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logits but {} labels",
            logits.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy on logits and its gradient `(sigmoid(z) - y) / B`.
pub fn bce_loss(logits: ArrayView1<f64>, labels: ArrayView1<f64>) -> Result<(f64, Array1<f64>)> {
    check_labels(logits, labels)?;
    let b = logits.len().max(1) as f64;
    let loss = Zip::from(&logits)
        .and(&labels)
        .fold(0.0, |acc, &z, &y| acc + softplus(z) - y * z)
        / b;
    let dlogits = Zip::from(&logits).and(&labels).map_collect(|&z, &y| (sigmoid(z) - y) / b);
    Ok((loss, dlogits))
}

/// Fraction of instances where `(logit > 0) == label`; a zero logit predicts 0.
pub fn accuracy(logits: ArrayView1<f64>, labels: ArrayView1<f64>) -> Result<f64> {
    check_labels(logits, labels)?;
    if logits.is_empty() {
        return Ok(0.0);
    }
    let correct = Zip::from(&logits)
        .and(&labels)
        .fold(0usize, |acc, &z, &y| acc + usize::from((z > 0.0) == (y > 0.5)));
    Ok(correct as f64 / logits.len() as f64)
}

/// Logits for a large set, computed in row chunks to bound memory.
pub fn predict_logits(params: &ModelParams, inputs: ArrayView2<f64>, chunk: usize) -> Result<Array1<f64>> {
    let mut out = Array1::zeros(inputs.nrows());
    for (c, rows) in inputs.axis_chunks_iter(Axis(0), chunk.max(1)).enumerate() {
        let pass = forward(params, rows)?;
        let start = c * chunk.max(1);
        out.slice_mut(ndarray::s![start..start + rows.nrows()]).assign(&pass.logits);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay: weights shrink by `step_size * weight_decay` per step.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Gradients,
    pub second_moment: Gradients,
    pub step: u64,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        Self {
            first_moment: Gradients::zeros_like(params),
            second_moment: Gradients::zeros_like(params),
            step: 0,
            config,
        }
    }
}

/// One adaptive-moment step with decoupled weight decay on weights (not biases).
pub fn update_params(params: &mut ModelParams, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    let congruent = params.layers.len() == grads.layers.len()
        && params.layers.len() == state.first_moment.layers.len()
        && params
            .layers
            .iter()
            .zip(&grads.layers)
            .zip(&state.first_moment.layers)
            .all(|((p, g), m)| p.weights.dim() == g.weights.dim() && p.weights.dim() == m.weights.dim());
    if !congruent {
        return Err(Error::ShapeMismatch("gradients or optimizer state do not match parameters".into()));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let correction1 = 1.0 - c.beta1.powi(t);
    let correction2 = 1.0 - c.beta2.powi(t);
    let decay = 1.0 - c.step_size * c.weight_decay;

    let adam = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= c.step_size * m_hat / (v_hat.sqrt() + c.epsilon);
    };

    for (k, layer) in params.layers.iter_mut().enumerate() {
        let (gl, ml, vl) = (
            &grads.layers[k],
            &mut state.first_moment.layers[k],
            &mut state.second_moment.layers[k],
        );
        Zip::from(&mut layer.weights)
            .and(&gl.weights)
            .and(&mut ml.weights)
            .and(&mut vl.weights)
            .for_each(|p, &g, m, v| {
                *p *= decay;
                adam(p, g, m, v);
            });
        Zip::from(&mut layer.bias)
            .and(&gl.bias)
            .and(&mut ml.bias)
            .and(&mut vl.bias)
            .for_each(|p, &g, m, v| adam(p, g, m, v));
    }
    Ok(())
}
