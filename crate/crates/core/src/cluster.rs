//! Representation clustering: penultimate embeddings, k-means, purity.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colored::ColoredDataset;
use crate::error::{Error, Result};
use crate::nn::{self, ModelParams};
use crate::persist::{self, ArtifactKind, ByteReader, ByteWriter};
use crate::rng::RngStream;

/// Row `i` is the penultimate activation of dataset instance `source_index[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub values: Array2<f64>,
    pub source_index: Vec<u32>,
}

pub fn extract_embeddings(params: &ModelParams, dataset: &ColoredDataset) -> Result<EmbeddingMatrix> {
    if params.input_width() != dataset.input_width() {
        return Err(Error::ShapeMismatch(format!(
            "network input width {} but dataset width {}",
            params.input_width(),
            dataset.input_width()
        )));
    }
    let chunks = dataset
        .images
        .axis_chunks_iter(Axis(0), 4096)
        .map(|rows| {
            let pass = nn::forward(params, rows)?;
            Ok(match pass.hidden.into_iter().last() {
                Some(h) => h,
                None => rows.to_owned(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    let values = if views.is_empty() {
        Array2::zeros((0, params.widths()[params.widths().len() - 2]))
    } else {
        ndarray::concatenate(Axis(0), &views).expect("chunks share width")
    };
    Ok(EmbeddingMatrix {
        values,
        source_index: (0..dataset.len() as u32).collect(),
    })
}

impl EmbeddingMatrix {
    /// Payload: N u32, d u32, then row-major f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u32(self.values.nrows() as u32).u32(self.values.ncols() as u32);
        for &s in &self.source_index {
            w.u32(s);
        }
        for &v in self.values.iter() {
            w.f64(v);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        let source_index = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let values = (0..n * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self {
            values: Array2::from_shape_vec((n, d), values).expect("sized above"),
            source_index,
        })
    }

    pub fn save(&self, path: &std::path::Path, upstream_hash: u64) -> Result<()> {
        persist::save_artifact(ArtifactKind::Embeddings, &self.to_bytes(), upstream_hash, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&persist::load_artifact(ArtifactKind::Embeddings, path)?.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iters: usize,
    /// Stop when the relative inertia improvement falls below this.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 8,
            seed: 0,
            restarts: 10,
            max_iters: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub assignment: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    pub k: usize,
}

impl ClusterAssignment {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }

    /// Payload: k u32, N u32, d u32, assignment u32 x N, centroids f64 row-major, inertia f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u32(self.k as u32)
            .u32(self.assignment.len() as u32)
            .u32(self.centroids.ncols() as u32);
        for &a in &self.assignment {
            w.u32(a as u32);
        }
        for &c in self.centroids.iter() {
            w.f64(c);
        }
        w.f64(self.inertia);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let k = r.u32()? as usize;
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        let assignment = (0..n).map(|_| r.u32().map(|a| a as usize)).collect::<Result<Vec<_>>>()?;
        if assignment.iter().any(|&a| a >= k) {
            return Err(Error::CorruptPayload("cluster index out of range".into()));
        }
        let centroids = (0..k * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let inertia = r.f64()?;
        r.finish()?;
        Ok(Self {
            assignment,
            centroids: Array2::from_shape_vec((k, d), centroids).expect("sized above"),
            inertia,
            k,
        })
    }

    pub fn save(&self, path: &std::path::Path, upstream_hash: u64) -> Result<()> {
        persist::save_artifact(ArtifactKind::Clusters, &self.to_bytes(), upstream_hash, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&persist::load_artifact(ArtifactKind::Clusters, path)?.1)
    }

    /// Audit CSV: `instance_index,cluster,y,z`.
    pub fn to_csv(&self, dataset: &ColoredDataset) -> String {
        let mut out = String::from("instance_index,cluster,y,z\n");
        for (i, &c) in self.assignment.iter().enumerate() {
            out.push_str(&format!("{i},{c},{},{}\n", dataset.labels[i], dataset.color_ids[i]));
        }
        out
    }
}

/// Exact sum of squared distances from each point to its assigned centroid.
pub fn inertia(points: ArrayView2<f64>, centroids: ArrayView2<f64>, assignment: &[usize]) -> f64 {
    points
        .outer_iter()
        .zip(assignment)
        .map(|(p, &a)| {
            p.iter()
                .zip(centroids.row(a))
                .map(|(x, c)| (x - c) * (x - c))
                .sum::<f64>()
        })
        .sum()
}

/// Nearest centroid per point (lowest index wins ties) and the squared distance.
fn assign(points: ArrayView2<f64>, point_norms: &Array1<f64>, centroids: ArrayView2<f64>) -> (Vec<usize>, Vec<f64>) {
    let centroid_norms: Array1<f64> = centroids.outer_iter().map(|c| c.dot(&c)).collect();
    let cross = points.dot(&centroids.t());
    let mut labels = Vec::with_capacity(points.nrows());
    let mut dists = Vec::with_capacity(points.nrows());
    for (i, row) in cross.outer_iter().enumerate() {
        let mut best = (0, f64::INFINITY);
        for (j, &xc) in row.iter().enumerate() {
            let d = (point_norms[i] - 2.0 * xc + centroid_norms[j]).max(0.0);
            if d < best.1 {
                best = (j, d);
            }
        }
        labels.push(best.0);
        dists.push(best.1);
    }
    (labels, dists)
}

/// k-means++ seeding: first center uniform, then proportional to squared distance.
pub fn kmeans_plus_plus(points: ArrayView2<f64>, k: usize, rng: &mut RngStream) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    let first = rng.below(n as u64) as usize;
    centroids.row_mut(0).assign(&points.row(first));
    let sq = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
    };
    let mut nearest: Vec<f64> = points.outer_iter().map(|p| sq(p, points.row(first))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let u = rng.uniform();
        let chosen = if total > 0.0 {
            let target = u * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            ((u * n as f64) as usize).min(n - 1)
        };
        centroids.row_mut(c).assign(&points.row(chosen));
        for (i, p) in points.outer_iter().enumerate() {
            nearest[i] = nearest[i].min(sq(p, points.row(chosen)));
        }
    }
    centroids
}

#[derive(Debug, Clone)]
pub struct LloydRun {
    pub assignment: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    /// Inertia after the initial assignment and after every iteration.
    pub trace: Vec<f64>,
}

/// Lloyd iterations from the given centroids. Empty clusters are moved onto
/// the point farthest from its own centroid.
pub fn lloyd(points: ArrayView2<f64>, init: Array2<f64>, max_iters: usize, tol: f64) -> LloydRun {
    let k = init.nrows();
    let norms: Array1<f64> = points.outer_iter().map(|p| p.dot(&p)).collect();
    let mut centroids = init;
    let (mut labels, _) = assign(points, &norms, centroids.view());
    let mut current = inertia(points, centroids.view(), &labels);
    let mut trace = vec![current];

    for _ in 0..max_iters {
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (p, &l) in points.outer_iter().zip(&labels) {
            sums.row_mut(l).scaled_add(1.0, &p);
            counts[l] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids.row_mut(j).assign(&(&sums.row(j) / counts[j] as f64));
            }
        }
        let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        if !empty.is_empty() {
            let mut dist: Vec<(usize, f64)> = points
                .outer_iter()
                .zip(&labels)
                .enumerate()
                .map(|(i, (p, &l))| {
                    let d = p.iter().zip(centroids.row(l)).map(|(x, c)| (x - c) * (x - c)).sum();
                    (i, d)
                })
                .collect();
            // Farthest first; ties to the lower index.
            dist.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for (j, &(i, _)) in empty.iter().zip(&dist) {
                centroids.row_mut(*j).assign(&points.row(i));
            }
        }
        let (next_labels, _) = assign(points, &norms, centroids.view());
        labels = next_labels;
        let next = inertia(points, centroids.view(), &labels);
        trace.push(next);
        let improvement = current - next;
        current = next;
        if empty.is_empty() && (current == 0.0 || improvement <= tol * (current + improvement)) {
            break;
        }
    }
    let centroids = hartigan(points, &mut labels, k, max_iters);
    let refined = inertia(points, centroids.view(), &labels);
    if refined != current {
        current = refined;
        trace.push(current);
    }
    LloydRun {
        assignment: labels,
        centroids,
        inertia: current,
        trace,
    }
}

/// Single-point moves on top of a Lloyd solution: a point leaves cluster `a`
/// for `b` when `n_b/(n_b+1)·‖x−c_b‖² < n_a/(n_a−1)·‖x−c_a‖²`, which strictly
/// lowers the inertia. Returns the cluster means.
fn hartigan(points: ArrayView2<f64>, labels: &mut [usize], k: usize, max_passes: usize) -> Array2<f64> {
    let mut sums = Array2::<f64>::zeros((k, points.ncols()));
    let mut counts = vec![0usize; k];
    for (p, &l) in points.outer_iter().zip(labels.iter()) {
        sums.row_mut(l).scaled_add(1.0, &p);
        counts[l] += 1;
    }
    let mut means = sums.clone();
    for j in 0..k {
        if counts[j] > 0 {
            means.row_mut(j).mapv_inplace(|v| v / counts[j] as f64);
        }
    }
    let sq = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
    };
    for _ in 0..max_passes.max(1) {
        let mut changed = false;
        for (i, p) in points.outer_iter().enumerate() {
            let a = labels[i];
            if counts[a] <= 1 {
                continue;
            }
            let n_a = counts[a] as f64;
            let leave = n_a / (n_a - 1.0) * sq(p, means.row(a));
            let mut best: Option<(usize, f64)> = None;
            for b in (0..k).filter(|&b| b != a) {
                let n_b = counts[b] as f64;
                let join = n_b / (n_b + 1.0) * sq(p, means.row(b));
                if join < leave * (1.0 - 1e-12) && best.is_none_or(|(_, c)| join < c) {
                    best = Some((b, join));
                }
            }
            if let Some((b, _)) = best {
                sums.row_mut(a).scaled_add(-1.0, &p);
                sums.row_mut(b).scaled_add(1.0, &p);
                counts[a] -= 1;
                counts[b] += 1;
                for j in [a, b] {
                    let c = counts[j] as f64;
                    let row = sums.row(j).mapv(|v| v / c);
                    means.row_mut(j).assign(&row);
                }
                labels[i] = b;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    means
}

/// Best of `restarts` k-means++ initialised Lloyd runs, ties broken by restart index.
pub fn kmeans(embeddings: ArrayView2<f64>, config: &KMeansConfig) -> Result<ClusterAssignment> {
    let n = embeddings.nrows();
    if config.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if n < config.k {
        return Err(Error::TooFewPoints { points: n, k: config.k });
    }
    let root = RngStream::new(config.seed, "cluster");
    let runs: Vec<LloydRun> = (0..config.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = root.child(&format!("restart{r}"));
            let init = kmeans_plus_plus(embeddings, config.k, &mut rng);
            lloyd(embeddings, init, config.max_iters, config.tol)
        })
        .collect();
    let best = runs
        .into_iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| a.inertia.total_cmp(&b.inertia).then(ia.cmp(ib)))
        .map(|(_, run)| run)
        .expect("at least one restart");
    Ok(ClusterAssignment {
        assignment: best.assignment,
        centroids: best.centroids,
        inertia: best.inertia,
        k: config.k,
    })
}

/// Size-weighted purity: `(1/N) * sum over clusters of the majority attribute count`.
pub fn purity(assignment: &ClusterAssignment, attribute: &[u8]) -> Result<f64> {
    if attribute.len() != assignment.assignment.len() {
        return Err(Error::LengthMismatch {
            expected: assignment.assignment.len(),
            found: attribute.len(),
        });
    }
    if attribute.is_empty() {
        return Ok(0.0);
    }
    let mut counts = vec![[0usize; 256]; assignment.k];
    for (&c, &a) in assignment.assignment.iter().zip(attribute) {
        counts[c][a as usize] += 1;
    }
    let majority: usize = counts.iter().map(|c| *c.iter().max().unwrap()).sum();
    Ok(majority as f64 / attribute.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn assignment_of(labels: Vec<usize>, k: usize) -> ClusterAssignment {
        ClusterAssignment {
            assignment: labels,
            centroids: Array2::zeros((k, 1)),
            inertia: 0.0,
            k,
        }
    }

    #[test]
    fn purity_examples() {
        let a = assignment_of(vec![0, 0, 0, 0, 1, 1], 2);
        assert!((purity(&a, &[0, 0, 0, 1, 1, 1]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(purity(&a, &[1, 1, 1, 1, 0, 0]).unwrap(), 1.0);
        assert!(matches!(purity(&a, &[0, 1]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn each_point_its_own_cluster() {
        let pts = array![[0.0, 1.0], [5.0, 5.0], [-3.0, 2.0], [10.0, -1.0]];
        let cfg = KMeansConfig {
            k: 4,
            restarts: 3,
            ..Default::default()
        };
        let res = kmeans(pts.view(), &cfg).unwrap();
        assert!(res.inertia < 1e-12);
        let mut seen = res.assignment.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn separated_line_clusters() {
        let pts = array![[0.0], [0.1], [0.2], [10.0], [10.1], [10.2]];
        let cfg = KMeansConfig { k: 2, ..Default::default() };
        let res = kmeans(pts.view(), &cfg).unwrap();
        let a = &res.assignment;
        assert!(a[0] == a[1] && a[1] == a[2]);
        assert!(a[3] == a[4] && a[4] == a[5]);
        assert_ne!(a[0], a[3]);
        assert!((res.inertia - 0.04).abs() < 1e-12);
        assert_eq!(kmeans(pts.view(), &cfg).unwrap(), res);
    }

    #[test]
    fn too_few_points() {
        let pts = array![[0.0], [1.0]];
        let cfg = KMeansConfig { k: 3, ..Default::default() };
        assert!(matches!(kmeans(pts.view(), &cfg), Err(Error::TooFewPoints { points: 2, k: 3 })));
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        let pts = array![[0.0], [1.0], [2.0], [3.0]];
        // Second centroid far away owns nothing after the first assignment.
        let run = lloyd(pts.view(), array![[1.5], [100.0]], 10, 0.0);
        let mut sizes = [0; 2];
        for &a in &run.assignment {
            sizes[a] += 1;
        }
        assert!(sizes.iter().all(|&s| s > 0), "{sizes:?}");
        assert!(run.inertia < 5.0);
    }

    #[test]
    fn serialization_round_trip() {
        let pts = array![[0.0, 1.0], [5.0, 5.0], [-3.0, 2.0]];
        let res = kmeans(pts.view(), &KMeansConfig { k: 2, ..Default::default() }).unwrap();
        assert_eq!(ClusterAssignment::from_bytes(&res.to_bytes()).unwrap(), res);
        let emb = EmbeddingMatrix {
            values: pts,
            source_index: vec![0, 1, 2],
        };
        assert_eq!(EmbeddingMatrix::from_bytes(&emb.to_bytes()).unwrap(), emb);
    }
}
