//! Empirical risk minimization and the spurious-free baseline subset.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::colored::ColoredDataset;
use crate::error::{Error, Result};
use crate::nn::{self, AdamConfig, ModelParams, OptimizerState, DEFAULT_WIDTHS};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub step_size: f64,
    pub weight_decay: f64,
    /// Instances per step; `0` means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub widths: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 501,
            step_size: 1e-3,
            weight_decay: 1.1e-3,
            batch_size: 1024,
            seed: 0,
            eval_every: 250,
            widths: DEFAULT_WIDTHS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            step_size: self.step_size,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    fn is_eval_step(&self, step: usize) -> bool {
        step + 1 == self.steps || (self.eval_every > 0 && step.is_multiple_of(self.eval_every))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    /// Environment index for IRM rows; 0 for ERM.
    pub env: usize,
    pub risk: f64,
    pub penalty: f64,
    pub lambda: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub dataset_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub history: Vec<HistoryRow>,
    pub provenance: Provenance,
}

impl TrainedModel {
    /// ERM history as CSV: `step,loss,train_acc`.
    pub fn erm_history_csv(&self) -> String {
        let mut out = String::from("step,loss,train_acc\n");
        for row in &self.history {
            out.push_str(&format!("{},{:.6},{:.4}\n", row.step, row.risk, row.train_acc));
        }
        out
    }

    /// IRM history as CSV: `step,env_id,risk,penalty,lambda,train_acc`.
    pub fn irm_history_csv(&self) -> String {
        let mut out = String::from("step,env_id,risk,penalty,lambda,train_acc\n");
        for row in &self.history {
            out.push_str(&format!(
                "{},{},{:.6},{:.6e},{},{:.4}\n",
                row.step, row.env, row.risk, row.penalty, row.lambda, row.train_acc
            ));
        }
        out
    }
}

/// Yields row indices for each step: the whole set in full-batch mode,
/// otherwise consecutive chunks of per-epoch shuffles (remainders dropped).
#[derive(Debug)]
pub(crate) struct Batcher {
    len: usize,
    batch: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: RngStream,
}

impl Batcher {
    pub(crate) fn new(len: usize, batch_size: usize, rng: RngStream) -> Self {
        let batch = if batch_size == 0 || batch_size >= len { len } else { batch_size };
        Self {
            len,
            batch,
            order: (0..len).collect(),
            cursor: len,
            rng,
        }
    }

    pub(crate) fn is_full(&self) -> bool {
        self.batch == self.len
    }

    pub(crate) fn next_batch(&mut self) -> &[usize] {
        if self.is_full() {
            return &self.order;
        }
        if self.cursor + self.batch > self.len {
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let out = &self.order[self.cursor..self.cursor + self.batch];
        self.cursor += self.batch;
        out
    }
}

/// Gathers the rows of a step; borrows the full arrays in full-batch mode.
pub(crate) fn gather<'a>(
    images: &'a Array2<f64>,
    labels: &'a Array1<f64>,
    rows: &[usize],
    full: bool,
) -> (std::borrow::Cow<'a, Array2<f64>>, std::borrow::Cow<'a, Array1<f64>>) {
    use std::borrow::Cow;
    if full {
        (Cow::Borrowed(images), Cow::Borrowed(labels))
    } else {
        (
            Cow::Owned(images.select(Axis(0), rows)),
            Cow::Owned(rows.iter().map(|&i| labels[i]).collect()),
        )
    }
}

pub(crate) fn check_finite(step: usize, value: f64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::DivergedLoss {
            step,
            detail: format!("{what} = {value}"),
        })
    }
}

pub(crate) fn full_accuracy(params: &ModelParams, images: ArrayView2<f64>, labels: ArrayView1<f64>) -> Result<f64> {
    let logits = nn::predict_logits(params, images, 8192)?;
    nn::accuracy(logits.view(), labels)
}

pub fn train_erm(dataset: &ColoredDataset, config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = nn::init_mlp(&config.widths, config.seed)?;
    if params.input_width() != dataset.input_width() {
        return Err(Error::ShapeMismatch(format!(
            "network input width {} but dataset width {}",
            params.input_width(),
            dataset.input_width()
        )));
    }
    let labels = dataset.labels_f64();
    let mut state = OptimizerState::new(&params, config.adam());
    let mut batcher = Batcher::new(dataset.len(), config.batch_size, RngStream::new(config.seed, "batches"));
    let mut history = Vec::new();

    for step in 0..config.steps {
        let full = batcher.is_full();
        let rows = batcher.next_batch().to_vec();
        let (x, y) = gather(&dataset.images, &labels, &rows, full);
        let pass = nn::forward(&params, x.view())?;
        let (loss, dlogits) = nn::bce_loss(pass.logits.view(), y.view())?;
        check_finite(step, loss, "training loss")?;
        if config.is_eval_step(step) {
            let train_acc = if full {
                nn::accuracy(pass.logits.view(), y.view())?
            } else {
                full_accuracy(&params, dataset.images.view(), labels.view())?
            };
            history.push(HistoryRow {
                step,
                env: 0,
                risk: loss,
                penalty: 0.0,
                lambda: 0.0,
                train_acc,
            });
        }
        let grads = nn::backward(&params, x.view(), &pass, dlogits.view())?;
        nn::update_params(&mut params, &grads, &mut state)?;
    }

    Ok(TrainedModel {
        params,
        history,
        provenance: Provenance {
            dataset_id: dataset_id(dataset),
            seed: config.seed,
        },
    })
}

/// Short identifier of a dataset's synthesis settings and size.
pub fn dataset_id(dataset: &ColoredDataset) -> String {
    let c = &dataset.config;
    format!(
        "n{}-ny{}-pe{}-seed{}{}",
        dataset.len(),
        c.noise_level,
        c.color_correlation,
        c.seed,
        if c.grayscale { "-gray" } else { "" }
    )
}

/// Largest subset in which all four `(y, z)` groups have equal size.
///
/// Each group is shuffled with the `"spurious-free"` stream of `seed` (groups in
/// order `(0,0), (0,1), (1,0), (1,1)`) and truncated to the smallest group's
/// size. The result is sorted ascending.
pub fn make_spurious_free_subset(dataset: &ColoredDataset, seed: u64) -> Result<Vec<usize>> {
    let mut groups: [[Vec<usize>; 2]; 2] = Default::default();
    for i in 0..dataset.len() {
        groups[dataset.labels[i] as usize][dataset.color_ids[i] as usize].push(i);
    }
    for y in 0..2u8 {
        for z in 0..2u8 {
            if groups[y as usize][z as usize].is_empty() {
                return Err(Error::EmptyGroup { y, z });
            }
        }
    }
    let smallest = groups.iter().flatten().map(Vec::len).min().unwrap();
    let mut rng = RngStream::new(seed, "spurious-free");
    let mut out = Vec::with_capacity(4 * smallest);
    for group in groups.iter().flatten() {
        out.extend(rng.sample_without_replacement(group, smallest));
    }
    out.sort_unstable();
    Ok(out)
}
