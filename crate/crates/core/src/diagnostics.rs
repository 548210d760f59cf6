//! Representation analysis: exact t-SNE, feature-mean distances, video
//! dissimilarity, domain probes, and generalization gaps.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamConfig, Binder, Mlp, Optimizer, Tape, Track};
use crate::error::{DarlError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Train,
    Test,
    Video,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Train => "train",
            Source::Test => "test",
            Source::Video => "video",
        }
    }
}

/// Row-major `n × dim` feature matrix drawn from one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: Vec<f64>,
    pub dim: usize,
    pub domain_id: usize,
    pub source: Source,
}

impl FeatureSet {
    pub fn new(features: Vec<f64>, dim: usize, domain_id: usize, source: Source) -> Result<Self> {
        if dim == 0 || features.is_empty() || !features.len().is_multiple_of(dim) {
            return Err(DarlError::dim("feature_set", format!("{} values for dim {dim}", features.len())));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DarlError::Contract("feature set holds non-finite values".into()));
        }
        Ok(Self {
            features,
            dim,
            domain_id,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut m = vec![0.0; self.dim];
        for row in self.features.chunks(self.dim) {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Rows of several sets stacked into one; keeps the first set's labels.
    pub fn pool(sets: &[&FeatureSet]) -> Result<FeatureSet> {
        let first = sets
            .first()
            .ok_or(DarlError::InsufficientData("pooling zero feature sets".into()))?;
        if sets.iter().any(|s| s.dim != first.dim) {
            return Err(DarlError::dim("pool", "feature dims differ"));
        }
        let features = sets.iter().flat_map(|s| s.features.iter().copied()).collect();
        FeatureSet::new(features, first.dim, first.domain_id, first.source)
    }
}

/// `‖mean(a) − mean(b)‖₂`.
pub fn feature_mean_l2(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim != b.dim {
        return Err(DarlError::dim("feature_mean_l2", format!("{} vs {}", a.dim, b.dim)));
    }
    Ok(l2(&a.mean(), &b.mean()))
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `mean(train) − mean(test)`.
pub fn generalization_gap(train_returns: &[f64], test_returns: &[f64]) -> Result<f64> {
    if train_returns.is_empty() || test_returns.is_empty() {
        return Err(DarlError::InsufficientData("generalization gap needs returns on both sides".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(mean(train_returns) - mean(test_returns))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub perplexity: f64,
    pub iterations: usize,
    /// `None` picks `max(n / early_exaggeration / 4, 50)`.
    pub learning_rate: Option<f64>,
    pub seed: u64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: None,
            seed: 0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
        }
    }
}

/// 2-D t-SNE output with the un-exaggerated KL(P‖Q) after every iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub points: Vec<[f64; 2]>,
    pub kl_history: Vec<f64>,
}

impl Embedding {
    /// Largest pairwise distance.
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                best = best.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
            }
        }
        best
    }

    pub fn mean(&self, range: std::ops::Range<usize>) -> [f64; 2] {
        let n = range.len() as f64;
        let mut m = [0.0; 2];
        for p in &self.points[range] {
            m[0] += p[0] / n;
            m[1] += p[1] / n;
        }
        m
    }
}

fn squared_distances(points: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let a = &points[i * d..(i + 1) * d];
        for j in i + 1..n {
            let b = &points[j * d..(j + 1) * d];
            let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    out
}

/// Conditional affinities for one row at precision `beta`; returns the row's entropy in nats.
fn row_affinities(dist: &[f64], skip: usize, beta: f64, out: &mut [f64]) -> f64 {
    let dmin = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != skip)
        .fold(f64::INFINITY, |m, (_, &v)| m.min(v));
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, (&dj, o)) in dist.iter().zip(out.iter_mut()).enumerate() {
        if j == skip {
            *o = 0.0;
            continue;
        }
        let shifted = dj - dmin;
        let p = (-beta * shifted).exp();
        *o = p;
        sum += p;
        weighted += p * shifted;
    }
    out.iter_mut().for_each(|p| *p /= sum);
    sum.ln() + beta * weighted / sum
}

/// Row-stochastic conditional affinities with per-point precision chosen by
/// bisection so each row's perplexity matches `perplexity`. Also returns the
/// achieved row entropies.
pub fn conditional_affinities(points: &[f64], n: usize, d: usize, perplexity: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if n < 4 || d == 0 || points.len() != n * d {
        return Err(DarlError::dim("tsne", format!("{} values as {n} points of dim {d}", points.len())));
    }
    if !(perplexity > 1.0) || perplexity >= (n - 1) as f64 {
        return Err(DarlError::Config(format!(
            "perplexity {perplexity} must lie in (1, n - 1 = {})",
            n - 1
        )));
    }
    let dist = squared_distances(points, n, d);
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut entropies = vec![0.0; n];
    for i in 0..n {
        let row = &dist[i * n..(i + 1) * n];
        let out = &mut p[i * n..(i + 1) * n];
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0;
        let mut h = row_affinities(row, i, beta, out);
        for _ in 0..200 {
            if (h - target).abs() < 1e-5 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
            h = row_affinities(row, i, beta, out);
        }
        entropies[i] = h;
    }
    Ok((p, entropies))
}

/// Symmetrized joint affinities `(P + Pᵀ) / 2n`.
pub fn joint_affinities(points: &[f64], n: usize, d: usize, perplexity: f64) -> Result<Vec<f64>> {
    let (cond, _) = conditional_affinities(points, n, d, perplexity)?;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }
    Ok(p)
}

/// Seeded random projection of the centered inputs, each axis rescaled to
/// stdev 1e-4. Identical inputs start (and so stay) at identical positions.
/// An axis with no spread falls back to Gaussian noise.
fn initial_layout(points: &[f64], n: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Normal::new(0.0, 1.0).expect("unit stdev");
    let proj: Vec<f64> = (0..2 * d).map(|_| g.sample(&mut rng)).collect();
    let mut y = vec![0.0; 2 * n];
    for i in 0..n {
        let row = &points[i * d..(i + 1) * d];
        for c in 0..2 {
            y[2 * i + c] = row.iter().zip(&proj[c * d..(c + 1) * d]).map(|(a, b)| a * b).sum();
        }
    }
    for c in 0..2 {
        let mean = (0..n).map(|i| y[2 * i + c]).sum::<f64>() / n as f64;
        let sd = ((0..n).map(|i| (y[2 * i + c] - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        for i in 0..n {
            y[2 * i + c] = if sd > 1e-12 * mean.abs().max(1.0) {
                1e-4 * (y[2 * i + c] - mean) / sd
            } else {
                1e-4 * g.sample(&mut rng)
            };
        }
    }
    y
}

/// Exact t-SNE of `n` row-major points of dimension `d` into two dimensions.
pub fn tsne_embed(points: &[f64], n: usize, d: usize, cfg: &EmbeddingConfig) -> Result<Embedding> {
    if points.iter().any(|v| !v.is_finite()) {
        return Err(DarlError::Contract("t-SNE input holds non-finite values".into()));
    }
    let p = joint_affinities(points, n, d, cfg.perplexity)?;
    let p: Vec<f64> = p.iter().map(|&v| v.max(1e-12)).collect();
    let mut y = initial_layout(points, n, d, cfg.seed);
    let mut velocity = vec![0.0; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![0.0; 2 * n];
    let mut kl_history = Vec::with_capacity(cfg.iterations);
    let lr = cfg.learning_rate.unwrap_or((n as f64 / cfg.early_exaggeration / 4.0).max(50.0));

    for it in 0..cfg.iterations {
        let exaggerate = it < cfg.exaggeration_iters;
        let ex = if exaggerate { cfg.early_exaggeration } else { 1.0 };
        let momentum = if exaggerate { 0.5 } else { 0.8 };

        let mut zsum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[2 * i] - y[2 * j];
                let dy = y[2 * i + 1] - y[2 * j + 1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                zsum += 2.0 * q;
            }
        }
        grad.fill(0.0);
        let mut kl = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let nij = num[i * n + j];
                let q = (nij / zsum).max(1e-12);
                let pij = p[i * n + j];
                kl += pij * (pij / q).ln();
                let m = 4.0 * (ex * pij - q) * nij;
                grad[2 * i] += m * (y[2 * i] - y[2 * j]);
                grad[2 * i + 1] += m * (y[2 * i + 1] - y[2 * j + 1]);
            }
        }
        kl_history.push(kl);

        for k in 0..2 * n {
            gains[k] = if (grad[k] > 0.0) != (velocity[k] > 0.0) {
                gains[k] + 0.2
            } else {
                (gains[k] * 0.8).max(0.01)
            };
            velocity[k] = momentum * velocity[k] - lr * gains[k] * grad[k];
            y[k] += velocity[k];
        }
        for c in 0..2 {
            let m = (0..n).map(|i| y[2 * i + c]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[2 * i + c] -= m);
        }
    }
    Ok(Embedding {
        points: y.chunks(2).map(|c| [c[0], c[1]]).collect(),
        kl_history,
    })
}

/// Mean silhouette coefficient of a labelled 2-D point set.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    let n = points.len();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += dist(points[i], points[j]);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

/// Joint embedding of two frame sets and the distance between their 2-D means.
#[derive(Clone, Debug, PartialEq)]
pub struct Dissimilarity {
    pub distance: f64,
    pub embedding: Embedding,
    /// The first `n_test` embedding points are the test frames.
    pub n_test: usize,
}

/// Flattened raw frames of a test set against those of the training set,
/// embedded together.
pub fn video_dissimilarity(test_frames: &[Vec<f64>], train_frames: &[Vec<f64>], cfg: &EmbeddingConfig) -> Result<Dissimilarity> {
    let d = test_frames.first().map(Vec::len).unwrap_or(0);
    if test_frames.is_empty() || train_frames.is_empty() {
        return Err(DarlError::InsufficientData("video dissimilarity needs frames on both sides".into()));
    }
    if test_frames.iter().chain(train_frames).any(|f| f.len() != d) {
        return Err(DarlError::dim("video_dissimilarity", "frames differ in length"));
    }
    // Embed in a canonical set order so swapping the arguments gives the same layout.
    let swap = frames_cmp(test_frames, train_frames).is_gt();
    let (first, second) = if swap {
        (train_frames, test_frames)
    } else {
        (test_frames, train_frames)
    };
    let n_first = first.len();
    let n = n_first + second.len();
    let flat: Vec<f64> = first.iter().chain(second).flatten().copied().collect();
    let mut embedding = tsne_embed(&flat, n, d, cfg)?;
    let a = embedding.mean(0..n_first);
    let b = embedding.mean(n_first..n);
    if swap {
        embedding.points.rotate_left(n_first);
    }
    Ok(Dissimilarity {
        distance: ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt(),
        embedding,
        n_test: test_frames.len(),
    })
}

fn frames_cmp(a: &[Vec<f64>], b: &[Vec<f64>]) -> std::cmp::Ordering {
    let flat = |s: &[Vec<f64>]| s.iter().flatten().copied().collect::<Vec<f64>>();
    flat(a)
        .iter()
        .zip(&flat(b))
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(a.len().cmp(&b.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            steps: 300,
            lr: 1e-2,
        }
    }
}

/// Validation accuracy of a fresh one-hidden-layer domain classifier trained
/// on an 80/20 split of every set. Labels are the sets' domain ids.
pub fn probe_accuracy(sets: &[FeatureSet], seed: u64) -> Result<f64> {
    probe_accuracy_with(sets, seed, &ProbeConfig::default())
}

pub fn probe_accuracy_with(sets: &[FeatureSet], seed: u64, cfg: &ProbeConfig) -> Result<f64> {
    let labels: BTreeMap<usize, usize> = sets
        .iter()
        .map(|s| s.domain_id)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, d)| (d, i))
        .collect();
    let k = labels.len();
    if k < 2 {
        return Err(DarlError::InsufficientData(format!("probe needs >= 2 domains, got {k}")));
    }
    if let Some(s) = sets.iter().find(|s| s.len() < 10) {
        return Err(DarlError::InsufficientData(format!(
            "domain {} has {} rows, probe needs >= 10",
            s.domain_id,
            s.len()
        )));
    }
    let dim = sets[0].dim;
    if sets.iter().any(|s| s.dim != dim) {
        return Err(DarlError::dim("probe_accuracy", "feature dims differ"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train_x, mut train_y, mut val_x, mut val_y) = (vec![], vec![], vec![], vec![]);
    for s in sets {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.shuffle(&mut rng);
        let cut = (s.len() * 4) / 5;
        for (pos, &i) in idx.iter().enumerate() {
            let (x, y) = if pos < cut {
                (&mut train_x, &mut train_y)
            } else {
                (&mut val_x, &mut val_y)
            };
            x.extend_from_slice(s.row(i));
            y.push(labels[&s.domain_id]);
        }
    }
    // Standardize with training statistics.
    let n_train = train_y.len();
    let mut mean = vec![0.0; dim];
    let mut var = vec![0.0; dim];
    for row in train_x.chunks(dim) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n_train as f64);
    }
    for row in train_x.chunks(dim) {
        var.iter_mut()
            .zip(row.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m).powi(2) / n_train as f64);
    }
    let scale: Vec<f64> = var.iter().map(|v| 1.0 / (v.sqrt() + 1e-8)).collect();
    let standardize = |x: &mut Vec<f64>| {
        for row in x.chunks_mut(dim) {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&scale) {
                *v = (*v - m) * s;
            }
        }
    };
    standardize(&mut train_x);
    standardize(&mut val_x);

    let mut net = Mlp::new(&[dim, cfg.hidden, k], &mut rng);
    let mut opt = Optimizer::new(&net, AdamConfig::new(cfg.lr, 0.9));
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let x = tape.constant(&[n_train, dim], train_x.clone())?;
        let mut binder = Binder::new(Track::Grad);
        let logits = net.forward(&mut tape, x, &mut binder)?;
        let lp = tape.log_softmax(logits);
        let loss = tape.nll(lp, &train_y)?;
        let grads = tape.backward(loss)?;
        binder.accumulate(&grads, &mut net)?;
        opt.step(&mut net)?;
    }
    let mut tape = Tape::new();
    let x = tape.constant(&[val_y.len(), dim], val_x)?;
    let logits = net.forward(&mut tape, x, &mut Binder::new(Track::Frozen))?;
    Ok(crate::agent::accuracy(tape.value(logits), &val_y, k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub point_id: usize,
    pub domain_id: usize,
    pub source: Source,
    pub x: f64,
    pub y: f64,
}

pub fn write_embedding_csv(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
