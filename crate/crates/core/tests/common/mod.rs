#![allow(dead_code)]

use std::path::Path;

use envinfer::cluster::{inertia, kmeans, KMeansConfig};
use envinfer::irm::irm_penalty;
use envinfer::nn::{self, ModelParams};
use envinfer::rng::RngStream;
use ndarray::{Array1, Array2};

pub fn random_params(widths: &[usize], seed: u64) -> ModelParams {
    let mut params = ModelParams::zeros(widths).unwrap();
    let mut rng = RngStream::new(seed, "test-params");
    for i in 0..params.num_params() {
        params.set_flat(i, 2.0 * rng.uniform() - 1.0);
    }
    params
}

pub fn random_batch(batch: usize, width: usize, seed: u64) -> (Array2<f64>, Array1<f64>) {
    let mut rng = RngStream::new(seed, "test-batch");
    let x = Array2::from_shape_fn((batch, width), |_| 2.0 * rng.uniform() - 1.0);
    let y = Array1::from_shape_fn(batch, |_| (rng.uniform() < 0.5) as u8 as f64);
    (x, y)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` with respect to every parameter.
pub fn finite_difference(params: &ModelParams, h: f64, f: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let base = params.flatten();
    let mut p = params.clone();
    (0..base.len())
        .map(|i| {
            p.set_flat(i, base[i] + h);
            let up = f(&p);
            p.set_flat(i, base[i] - h);
            let down = f(&p);
            p.set_flat(i, base[i]);
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn mean_bce(params: &ModelParams, x: &Array2<f64>, y: &Array1<f64>) -> f64 {
    let pass = nn::forward(params, x.view()).unwrap();
    nn::bce_loss(pass.logits.view(), y.view()).unwrap().0
}

fn penalty(params: &ModelParams, x: &Array2<f64>, y: &Array1<f64>) -> f64 {
    let pass = nn::forward(params, x.view()).unwrap();
    irm_penalty(pass.logits.view(), y.view()).unwrap().0
}

/// Relative error of the backpropagated risk gradient against finite differences.
pub fn backward_error(widths: &[usize], batch: usize, seed: u64) -> f64 {
    let params = random_params(widths, seed);
    let (x, y) = random_batch(batch, widths[0], seed);
    let pass = nn::forward(&params, x.view()).unwrap();
    let (_, d) = nn::bce_loss(pass.logits.view(), y.view()).unwrap();
    let analytic = nn::backward(&params, x.view(), &pass, d.view()).unwrap().flatten();
    let numeric = finite_difference(&params, 1e-6, |p| mean_bce(p, &x, &y));
    rel_error(&analytic, &numeric)
}

/// Relative error of the penalty's parameter gradient (cotangent route).
pub fn penalty_gradient_error(widths: &[usize], batch: usize, seed: u64) -> f64 {
    let params = random_params(widths, seed);
    let (x, y) = random_batch(batch, widths[0], seed);
    let pass = nn::forward(&params, x.view()).unwrap();
    let (_, c) = irm_penalty(pass.logits.view(), y.view()).unwrap();
    let analytic = nn::backward(&params, x.view(), &pass, c.view()).unwrap().flatten();
    let numeric = finite_difference(&params, 1e-6, |p| penalty(p, &x, &y));
    rel_error(&analytic, &numeric)
}

/// Relative error between the penalty and the squared central difference of
/// the mean risk in the scalar multiplier `w` at `w = 1`.
pub fn penalty_vs_w_derivative(logits: &Array1<f64>, labels: &Array1<f64>) -> f64 {
    let risk = |w: f64| nn::bce_loss((logits * w).view(), labels.view()).unwrap().0;
    let h = 1e-5;
    let g = (risk(1.0 + h) - risk(1.0 - h)) / (2.0 * h);
    let (p, _) = irm_penalty(logits.view(), labels.view()).unwrap();
    let expected = g * g;
    if expected == 0.0 && p == 0.0 {
        0.0
    } else {
        (p - expected).abs() / expected.abs().max(p.abs())
    }
}

/// Minimal inertia over every split of the points into two nonempty clusters.
pub fn brute_force_two_means(points: &Array2<f64>) -> f64 {
    let n = points.nrows();
    let d = points.ncols();
    let mut best = f64::INFINITY;
    // Fix point 0 in cluster 0 so each split is visited once.
    for mask in 0u32..(1 << (n - 1)) {
        let assignment: Vec<usize> = (0..n).map(|i| if i == 0 { 0 } else { ((mask >> (i - 1)) & 1) as usize }).collect();
        if !assignment.contains(&1) {
            continue;
        }
        let mut centroids = Array2::<f64>::zeros((2, d));
        let mut counts = [0usize; 2];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for j in 0..d {
                centroids[[c, j]] += points[[i, j]];
            }
        }
        for c in 0..2 {
            for j in 0..d {
                centroids[[c, j]] /= counts[c] as f64;
            }
        }
        best = best.min(inertia(points.view(), centroids.view(), &assignment));
    }
    best
}

/// Whether k-means (k = 2) reaches the exhaustive optimum on `points`.
pub fn kmeans_matches_brute_force(points: &Array2<f64>, seed: u64) -> bool {
    let config = KMeansConfig {
        k: 2,
        seed,
        restarts: 32,
        max_iters: 100,
        tol: 0.0,
    };
    let found = kmeans(points.view(), &config).unwrap().inertia;
    let best = brute_force_two_means(points);
    found <= best + 1e-9 * best.max(1.0)
}

/// Point sets for the k-means oracle: random clouds of 2..=10 points in 1..=3 dimensions.
pub fn kmeans_instances(count: usize, seed: u64) -> Vec<Array2<f64>> {
    let mut rng = RngStream::new(seed, "kmeans-instances");
    (0..count)
        .map(|_| {
            let n = 2 + rng.below(9) as usize;
            let d = 1 + rng.below(3) as usize;
            Array2::from_shape_fn((n, d), |_| 10.0 * rng.uniform())
        })
        .collect()
}

fn idx_images(n: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [0x0000_0803u32, n as u32, 28, 28] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [0x0000_0801u32, labels.len() as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(labels);
    out
}

/// Write a small synthetic MNIST in IDX format: digit `d` is a bright
/// horizontal bar at row `2 + 2d` plus speckle noise.
pub fn write_fake_mnist(dir: &Path, train: usize, test: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = RngStream::new(7, "fake-mnist");
    let mut make = |n: usize| {
        let labels: Vec<u8> = (0..n).map(|_| rng.below(10) as u8).collect();
        let mut pixels = vec![0u8; n * 784];
        for (i, &d) in labels.iter().enumerate() {
            let img = &mut pixels[i * 784..(i + 1) * 784];
            let row = 2 + 2 * d as usize;
            for c in 4..24 {
                img[row * 28 + c] = 255;
                img[(row + 1) * 28 + c] = 200;
            }
            for _ in 0..30 {
                img[rng.below(784) as usize] = rng.below(256) as u8;
            }
        }
        (idx_images(n, &pixels), idx_labels(&labels))
    };
    let (ti, tl) = make(train);
    let (vi, vl) = make(test);
    std::fs::write(dir.join("train-images-idx3-ubyte"), ti).unwrap();
    std::fs::write(dir.join("train-labels-idx1-ubyte"), tl).unwrap();
    std::fs::write(dir.join("t10k-images-idx3-ubyte"), vi).unwrap();
    std::fs::write(dir.join("t10k-labels-idx1-ubyte"), vl).unwrap();
}
