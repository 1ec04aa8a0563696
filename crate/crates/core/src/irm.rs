//! IRMv1 training: per-environment risk plus the squared derivative of the
//! risk with respect to a scalar multiplier on the logit, taken at 1.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::colored::ColoredDataset;
use crate::erm::{check_finite, gather, Batcher, HistoryRow, Provenance, TrainConfig, TrainedModel};
use crate::error::{Error, Result};
use crate::nn::{self, sigmoid, Gradients, OptimizerState};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrmConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Penalty weight once warmup is over; the weight is 1 before that.
    pub penalty_weight: f64,
    pub warmup_steps: usize,
}

impl Default for IrmConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            penalty_weight: 1e3,
            warmup_steps: 200,
        }
    }
}

impl IrmConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.penalty_weight >= 1.0) {
            return Err(Error::Config("penalty_weight must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lambda_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            1.0
        } else {
            self.penalty_weight
        }
    }
}

/// One training environment: the rows it draws from and their cached data.
#[derive(Debug, Clone)]
pub struct EnvBatchView {
    pub indices: Vec<usize>,
    pub images: Array2<f64>,
    pub labels: Array1<f64>,
}

impl EnvBatchView {
    pub fn from_dataset(dataset: &ColoredDataset, indices: &[usize]) -> Self {
        Self {
            indices: indices.to_vec(),
            images: dataset.images.select(ndarray::Axis(0), indices),
            labels: indices.iter().map(|&i| dataset.labels[i] as f64).collect(),
        }
    }

    pub fn whole(dataset: &ColoredDataset) -> Self {
        Self {
            indices: (0..dataset.len()).collect(),
            images: dataset.images.clone(),
            labels: dataset.labels_f64(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Squared derivative of the mean cross-entropy with respect to a scalar
/// multiplier `w` on the logits, at `w = 1`, plus its gradient in the logits.
///
/// With `g = (1/B) sum z_i (sigmoid(z_i) - y_i)` the penalty is `g^2` and
/// `d penalty / d z_i = 2 g (1/B) [(sigmoid(z_i) - y_i) + z_i sigmoid(z_i)(1 - sigmoid(z_i))]`.
pub fn irm_penalty(logits: ArrayView1<f64>, labels: ArrayView1<f64>) -> Result<(f64, Array1<f64>)> {
    if logits.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logits but {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let b = logits.len().max(1) as f64;
    let g = ndarray::Zip::from(&logits)
        .and(&labels)
        .fold(0.0, |acc, &z, &y| acc + z * (sigmoid(z) - y))
        / b;
    let scale = 2.0 * g / b;
    let cotangent = ndarray::Zip::from(&logits).and(&labels).map_collect(|&z, &y| {
        let s = sigmoid(z);
        scale * ((s - y) + z * s * (1.0 - s))
    });
    Ok((g * g, cotangent))
}

/// Per-environment quantities of one objective evaluation.
#[derive(Debug, Clone)]
pub struct EnvTerms {
    pub risk: f64,
    pub penalty: f64,
    pub accuracy: f64,
}

/// Objective `sum_e [risk_e + lambda * penalty_e]`, divided by `lambda` when
/// `lambda > 1`, and its exact parameter gradient.
pub fn irm_objective(
    params: &nn::ModelParams,
    envs: &[(&Array2<f64>, &Array1<f64>)],
    lambda: f64,
) -> Result<(f64, Gradients, Vec<EnvTerms>)> {
    let rescale = if lambda > 1.0 { 1.0 / lambda } else { 1.0 };
    let mut grads = Gradients::zeros_like(params);
    let mut total = 0.0;
    let mut terms = Vec::with_capacity(envs.len());
    for (x, y) in envs {
        let pass = nn::forward(params, x.view())?;
        let (risk, d_risk) = nn::bce_loss(pass.logits.view(), y.view())?;
        let (penalty, d_penalty) = irm_penalty(pass.logits.view(), y.view())?;
        let accuracy = nn::accuracy(pass.logits.view(), y.view())?;
        total += (risk + lambda * penalty) * rescale;
        let cotangent = (&d_risk + &(d_penalty * lambda)) * rescale;
        grads.add_assign(&nn::backward(params, x.view(), &pass, cotangent.view())?);
        terms.push(EnvTerms { risk, penalty, accuracy });
    }
    Ok((total, grads, terms))
}

pub fn train_irm(envs: &[EnvBatchView], config: &IrmConfig) -> Result<TrainedModel> {
    if envs.len() < 2 {
        return Err(Error::TooFewEnvironments(envs.len()));
    }
    config.validate()?;
    if envs.iter().any(EnvBatchView::is_empty) {
        return Err(Error::EmptyDataset);
    }
    let train = &config.train;
    let mut params = nn::init_mlp(&train.widths, train.seed)?;
    if let Some(env) = envs.iter().find(|e| e.images.ncols() != params.input_width()) {
        return Err(Error::ShapeMismatch(format!(
            "network input width {} but environment width {}",
            params.input_width(),
            env.images.ncols()
        )));
    }
    let mut state = OptimizerState::new(&params, train.adam());
    let root = RngStream::new(train.seed, "batches");
    let mut batchers: Vec<Batcher> = envs
        .iter()
        .enumerate()
        .map(|(e, env)| Batcher::new(env.len(), train.batch_size, root.child(&format!("env{e}"))))
        .collect();
    let mut history = Vec::new();

    for step in 0..train.steps {
        let lambda = config.lambda_at(step);
        let batches: Vec<_> = envs
            .iter()
            .zip(batchers.iter_mut())
            .map(|(env, b)| {
                let full = b.is_full();
                let rows = b.next_batch().to_vec();
                gather(&env.images, &env.labels, &rows, full)
            })
            .collect();
        let views: Vec<_> = batches.iter().map(|(x, y)| (x.as_ref(), y.as_ref())).collect();
        let (objective, grads, terms) = irm_objective(&params, &views, lambda)?;
        check_finite(step, objective, "IRM objective")?;
        let anneal = step == config.warmup_steps && config.warmup_steps > 0;
        if anneal || step + 1 == train.steps || (train.eval_every > 0 && step % train.eval_every == 0) {
            for (e, t) in terms.iter().enumerate() {
                history.push(HistoryRow {
                    step,
                    env: e,
                    risk: t.risk,
                    penalty: t.penalty,
                    lambda,
                    train_acc: t.accuracy,
                });
            }
        }
        nn::update_params(&mut params, &grads, &mut state)?;
    }

    Ok(TrainedModel {
        params,
        history,
        provenance: Provenance {
            dataset_id: format!(
                "irm-{}",
                envs.iter().map(|e| e.len().to_string()).collect::<Vec<_>>().join("+")
            ),
            seed: train.seed,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn mean_bce_scaled(z: &[f64], y: &[f64], w: f64) -> f64 {
        let zs: Array1<f64> = z.iter().map(|v| v * w).collect();
        nn::bce_loss(zs.view(), ndarray::aview1(y)).unwrap().0
    }

    fn fd_penalty(z: &[f64], y: &[f64]) -> f64 {
        let h = 1e-6;
        let d = (mean_bce_scaled(z, y, 1.0 + h) - mean_bce_scaled(z, y, 1.0 - h)) / (2.0 * h);
        d * d
    }

    #[test]
    fn zero_logits_have_zero_penalty() {
        let (p, c) = irm_penalty(array![0.0, 0.0, 0.0].view(), array![1.0, 0.0, 1.0].view()).unwrap();
        assert_eq!(p, 0.0);
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_example() {
        let (p, _) = irm_penalty(array![1.0].view(), array![1.0].view()).unwrap();
        let g = sigmoid(1.0) - 1.0;
        assert!((g + 0.268_941_421_369_995).abs() < 1e-12);
        assert!((p - g * g).abs() < 1e-15);
        assert!((p - fd_penalty(&[1.0], &[1.0])).abs() / p < 1e-6);
        assert!((p - 0.072_329_488_1).abs() < 1e-9);
    }

    #[test]
    fn two_examples() {
        let (p, _) = irm_penalty(array![2.0, -2.0].view(), array![1.0, 0.0].view()).unwrap();
        let g = 2.0 * sigmoid(2.0) - 2.0;
        assert!((g + 0.238_405_844_044_234).abs() < 1e-12);
        assert!((p - 0.056_837_346_5).abs() < 1e-9);
        assert!((p - fd_penalty(&[2.0, -2.0], &[1.0, 0.0])).abs() / p < 1e-6);
    }

    #[test]
    fn cotangent_matches_finite_differences_in_logits() {
        let z = [0.3, -1.2, 2.5, 0.05];
        let y = [1.0, 0.0, 0.0, 1.0];
        let (_, c) = irm_penalty(ndarray::aview1(&z), ndarray::aview1(&y)).unwrap();
        let h = 1e-6;
        for i in 0..z.len() {
            let mut plus = z;
            let mut minus = z;
            plus[i] += h;
            minus[i] -= h;
            let fd = (irm_penalty(ndarray::aview1(&plus), ndarray::aview1(&y)).unwrap().0
                - irm_penalty(ndarray::aview1(&minus), ndarray::aview1(&y)).unwrap().0)
                / (2.0 * h);
            assert!((fd - c[i]).abs() < 1e-8, "i = {i}: {fd} vs {}", c[i]);
        }
    }

    #[test]
    fn lambda_schedule() {
        let cfg = IrmConfig {
            warmup_steps: 3,
            penalty_weight: 50.0,
            ..Default::default()
        };
        assert_eq!(cfg.lambda_at(2), 1.0);
        assert_eq!(cfg.lambda_at(3), 50.0);
    }

    #[test]
    fn needs_two_environments() {
        let env = EnvBatchView {
            indices: vec![0],
            images: Array2::zeros((1, 2)),
            labels: array![1.0],
        };
        assert!(matches!(
            train_irm(&[env], &IrmConfig::default()),
            Err(Error::TooFewEnvironments(1))
        ));
    }
}
