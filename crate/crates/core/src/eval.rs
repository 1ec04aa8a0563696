//! Test-environment evaluation, p_e sweeps and cross-seed aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::colored::{synthesize, ColoredDataset, SynthesisConfig};
use crate::error::{Error, Result};
use crate::mnist::RawDataset;
use crate::nn::{self, ModelParams};

/// Default sweep grid 0.1, 0.2, ..., 0.9.
pub fn default_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Reference accuracies quoted from the literature, never computed here.
pub const LITERATURE_ROWS: [(&str, f64, f64); 3] = [("IRM*", 66.9, 2.5), ("DecAug*", 69.6, 2.0), ("EIIL*", 68.4, 2.7)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ERM-baseline")]
    ErmBaseline,
    #[serde(rename = "Oracle")]
    Oracle,
    #[serde(rename = "ERM-Dbalance")]
    ErmBalance,
    #[serde(rename = "ERM-DmDbalance-concat")]
    ErmConcat,
    #[serde(rename = "ERM-spurious-free")]
    ErmSpuriousFree,
    #[serde(rename = "IRM-DmDbalance")]
    IrmInferred,
    #[serde(rename = "IRM-handcrafted")]
    IrmHandcrafted,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::ErmBaseline,
        Method::Oracle,
        Method::ErmBalance,
        Method::ErmConcat,
        Method::ErmSpuriousFree,
        Method::IrmInferred,
        Method::IrmHandcrafted,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::ErmBaseline => "ERM-baseline",
            Method::Oracle => "Oracle",
            Method::ErmBalance => "ERM-Dbalance",
            Method::ErmConcat => "ERM-DmDbalance-concat",
            Method::ErmSpuriousFree => "ERM-spurious-free",
            Method::IrmInferred => "IRM-DmDbalance",
            Method::IrmHandcrafted => "IRM-handcrafted",
        }
    }

    /// Whether the method is trained and evaluated on gray images.
    pub fn is_gray(self) -> bool {
        self == Method::Oracle
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    pub grid: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; `None` with fewer than two runs.
    pub std: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AggregateReport {
    pub grid: BTreeMap<Method, Vec<f64>>,
    pub summaries: BTreeMap<Method, Vec<Summary>>,
}

impl AggregateReport {
    pub fn is_empty(&self) -> bool {
        self.summaries.is_empty()
    }

    /// Summary of `method` at the grid point closest to `p`.
    pub fn at(&self, method: Method, p: f64) -> Option<Summary> {
        let grid = self.grid.get(&method)?;
        let idx = grid
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - p).abs().total_cmp(&(b.1 - p).abs()))?
            .0;
        self.summaries.get(&method).map(|s| s[idx])
    }

    /// Aggregate CSV: `method,p_e,mean,std,n`, rows ordered by method then p_e.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,p_e,mean,std,n\n");
        for (method, sums) in &self.summaries {
            for (p, s) in self.grid[method].iter().zip(sums) {
                let std = s.std.map(|v| format!("{v:.4}")).unwrap_or_default();
                out.push_str(&format!("{method},{p:.2},{:.4},{std},{}\n", s.mean, s.n));
            }
        }
        out
    }
}

/// Results CSV: `method,seed,p_e,accuracy`, rows in the given report order.
pub fn results_csv(reports: &[RunReport]) -> String {
    let mut out = String::from("method,seed,p_e,accuracy\n");
    for r in reports {
        for (p, a) in r.grid.iter().zip(&r.accuracies) {
            out.push_str(&format!("{},{},{p:.2},{a:.4}\n", r.method, r.seed));
        }
    }
    out
}

pub fn evaluate(params: &ModelParams, testset: &ColoredDataset) -> Result<f64> {
    if params.input_width() != testset.input_width() {
        return Err(Error::ShapeMismatch(format!(
            "network input width {} but test set width {}",
            params.input_width(),
            testset.input_width()
        )));
    }
    let logits = nn::predict_logits(params, testset.images.view(), 8192)?;
    nn::accuracy(logits.view(), testset.labels_f64().view())
}

/// Test set at color-flip probability `p` sharing the label noise of `seed`.
pub fn test_environment(raw_test: &RawDataset, p: f64, noise_level: f64, seed: u64, grayscale: bool) -> Result<ColoredDataset> {
    synthesize(
        raw_test,
        &SynthesisConfig {
            noise_level,
            color_correlation: p,
            seed,
            grayscale,
            downsample: true,
        },
    )
}

/// Accuracy at every grid point. All test sets share one seed, so the label
/// noise is identical across the grid and only the colors change.
pub fn sweep(
    params: &ModelParams,
    raw_test: &RawDataset,
    grid: &[f64],
    noise_level: f64,
    seed: u64,
    grayscale: bool,
) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::Config("empty p_e grid".into()));
    }
    grid.iter()
        .map(|&p| evaluate(params, &test_environment(raw_test, p, noise_level, seed, grayscale)?))
        .collect()
}

pub fn mean_std(values: &[f64]) -> Summary {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n.max(1) as f64;
    let std = (n >= 2).then(|| {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    });
    Summary { mean, std, n }
}

pub fn aggregate_runs(reports: &[RunReport]) -> Result<AggregateReport> {
    let mut groups: BTreeMap<Method, Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(r.method).or_default().push(r);
    }
    let mut out = AggregateReport::default();
    for (method, runs) in groups {
        let grid = runs[0].grid.clone();
        if runs
            .iter()
            .any(|r| r.grid != grid || r.accuracies.len() != grid.len())
        {
            return Err(Error::GridMismatch(method.to_string()));
        }
        let summaries = (0..grid.len())
            .map(|j| mean_std(&runs.iter().map(|r| r.accuracies[j]).collect::<Vec<_>>()))
            .collect();
        out.grid.insert(method, grid);
        out.summaries.insert(method, summaries);
    }
    Ok(out)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let average = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = average;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(method: Method, seed: u64, accs: Vec<f64>) -> RunReport {
        RunReport {
            method,
            seed,
            grid: (0..accs.len()).map(|i| 0.1 * (i + 1) as f64).collect(),
            accuracies: accs,
            seconds: 0.0,
        }
    }

    #[test]
    fn mean_and_sample_std() {
        let agg = aggregate_runs(&[
            report(Method::IrmInferred, 0, vec![0.6]),
            report(Method::IrmInferred, 1, vec![0.7]),
        ])
        .unwrap();
        let s = agg.summaries[&Method::IrmInferred][0];
        assert!((s.mean - 0.65).abs() < 1e-12);
        assert!((s.std.unwrap() - 0.070_710_678).abs() < 1e-8);
        assert_eq!(s.n, 2);
    }

    #[test]
    fn single_run_has_no_std() {
        let agg = aggregate_runs(&[report(Method::Oracle, 0, vec![0.7, 0.71])]).unwrap();
        assert_eq!(agg.summaries[&Method::Oracle][1].std, None);
        assert!(agg.to_csv().contains("Oracle,0.20,0.7100,,1"));
    }

    #[test]
    fn grid_mismatch() {
        assert!(matches!(
            aggregate_runs(&[report(Method::Oracle, 0, vec![0.7]), report(Method::Oracle, 1, vec![0.7, 0.7])]),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn method_tags_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.tag().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        use crate::colored::ColoredDataset;
        let n = 1000;
        let ds = ColoredDataset {
            images: ndarray::Array2::zeros((n, 2)),
            side: 1,
            labels: (0..n).map(|i| (i % 2) as u8).collect(),
            color_ids: vec![0; n],
            clean_labels: vec![0; n],
            digit_labels: vec![0; n],
            source_index: (0..n as u32).collect(),
            config: SynthesisConfig::default(),
        };
        let mut params = ModelParams::zeros(&[2, 1]).unwrap();
        params.layers[0].bias[0] = -1.0;
        assert!((evaluate(&params, &ds).unwrap() - 0.5).abs() < 0.01);
    }
}
