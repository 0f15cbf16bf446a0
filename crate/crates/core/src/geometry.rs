//! Metric-space primitives shared by training, evaluation and test generation.
//!
//! Points are plain `f64` slices. Feature frames are passed flattened
//! (row-major `T x B`), which is all the squared-feature-frame distance needs.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance function applied to a pair of points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// `‖p − q‖₂`
    Euclidean,
    /// `‖p − q‖₂²` over flattened feature frames.
    SquaredFeatureFrame,
}

impl Metric {
    pub fn distance(self, p: &[f64], q: &[f64]) -> f64 {
        let sq: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
        match self {
            Metric::Euclidean => sq.sqrt(),
            Metric::SquaredFeatureFrame => sq,
        }
    }

    /// Accumulates `scale · ∂d(p, q)/∂p` into `grad_p` and the opposite into
    /// `grad_q`. `dist` must be `self.distance(p, q)`. At `p == q` the
    /// Euclidean subgradient 0 is used.
    fn accumulate_grad(
        self,
        p: &[f64],
        q: &[f64],
        dist: f64,
        scale: f64,
        grad_p: &mut [f64],
        grad_q: &mut [f64],
    ) {
        let factor = match self {
            Metric::Euclidean if dist > 0.0 => scale / dist,
            Metric::Euclidean => return,
            Metric::SquaredFeatureFrame => 2.0 * scale,
        };
        for k in 0..p.len() {
            let g = factor * (p[k] - q[k]);
            grad_p[k] += g;
            grad_q[k] -= g;
        }
    }
}

/// Symmetric `n x n` matrix of pairwise distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    /// Upper-triangle entries in `(0,1), (0,2), ..., (n−2,n−1)` order.
    pub fn upper(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * self.n.saturating_sub(1) / 2);
        for i in 0..self.n {
            for j in i + 1..self.n {
                out.push(self.get(i, j));
            }
        }
        out
    }

    pub fn stats(&self) -> MetricBatchStats {
        MetricBatchStats::from_pairs(&self.upper())
    }

    /// Row-major view of all `n²` entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }
}

/// Mean and standard deviation of a batch's pairwise distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBatchStats {
    pub mean_pairwise: f64,
    pub stddev_pairwise: f64,
}

impl MetricBatchStats {
    pub fn from_pairs(pairs: &[f64]) -> Self {
        if pairs.is_empty() {
            return Self {
                mean_pairwise: 0.0,
                stddev_pairwise: 0.0,
            };
        }
        let n = pairs.len() as f64;
        let mean = pairs.iter().sum::<f64>() / n;
        let var = pairs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
        Self {
            mean_pairwise: mean,
            stddev_pairwise: var.sqrt(),
        }
    }
}

fn check_points<P: AsRef<[f64]>>(points: &[P], min: usize) -> Result<usize> {
    if points.len() < min {
        return Err(Error::Arity(format!(
            "need at least {min} points, got {}",
            points.len()
        )));
    }
    let dim = points[0].as_ref().len();
    if let Some((i, p)) = points
        .iter()
        .enumerate()
        .find(|(_, p)| p.as_ref().len() != dim)
    {
        return Err(Error::Shape(format!(
            "point {i} has {} entries, point 0 has {dim}",
            p.as_ref().len()
        )));
    }
    Ok(dim)
}

pub fn pairwise_distances<P: AsRef<[f64]>>(points: &[P], metric: Metric) -> Result<DistanceMatrix> {
    check_points(points, 2)?;
    let n = points.len();
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = metric.distance(points[i].as_ref(), points[j].as_ref());
            entries[i * n + j] = d;
            entries[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix { n, entries })
}

fn positive_mean(pairs: &[f64], side: &str) -> Result<f64> {
    let mean = pairs.iter().sum::<f64>() / pairs.len() as f64;
    if mean > 0.0 && mean.is_finite() {
        Ok(mean)
    } else {
        Err(Error::DegenerateBatch(format!(
            "{side} mean pairwise distance is {mean}"
        )))
    }
}

/// Metric-preservation loss over matched lists of pair distances.
///
/// For a full batch of `N` points the pair lists hold all `N(N−1)/2`
/// upper-triangle pairs and the result equals
/// `1/(N(N−1)) Σ_{i<j} |dx/E[dx] − dy/E[dy]|`, i.e. half the mean absolute
/// difference of the mean-normalized distances. A uniform subsample of pairs
/// gives an unbiased estimate of the same quantity.
pub fn metric_loss_from_pairs(dx: &[f64], dy: &[f64]) -> Result<f64> {
    Ok(metric_loss_pair_grad(dx, dy)?.0)
}

/// Loss and its gradient with respect to every entry of `dy`.
pub fn metric_loss_pair_grad(dx: &[f64], dy: &[f64]) -> Result<(f64, Vec<f64>)> {
    if dx.len() != dy.len() {
        return Err(Error::Shape(format!(
            "{} source pairs vs {} output pairs",
            dx.len(),
            dy.len()
        )));
    }
    if dx.is_empty() {
        return Err(Error::Arity("need at least one pair".into()));
    }
    let mean_x = positive_mean(dx, "source")?;
    let mean_y = positive_mean(dy, "output")?;
    let p = dx.len() as f64;
    let scale = 0.5 / p;

    let mut loss = 0.0;
    let mut signs = Vec::with_capacity(dx.len());
    for (x, y) in dx.iter().zip(dy) {
        let r = x / mean_x - y / mean_y;
        loss += r.abs();
        signs.push(if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        });
    }
    loss *= scale;

    // d r_p / d dy_q = −δ_pq/μ + dy_p/(μ² P)
    let coupling: f64 =
        signs.iter().zip(dy).map(|(s, y)| s * y).sum::<f64>() / (mean_y * mean_y * p);
    let grad = signs
        .iter()
        .map(|s| scale * (-s / mean_y + coupling))
        .collect();
    Ok((loss, grad))
}

pub fn metric_loss_from_distances(dx: &DistanceMatrix, dy: &DistanceMatrix) -> Result<f64> {
    if dx.len() != dy.len() {
        return Err(Error::Shape(format!(
            "{} source points vs {} output points",
            dx.len(),
            dy.len()
        )));
    }
    metric_loss_from_pairs(&dx.upper(), &dy.upper())
}

pub fn metric_loss<P: AsRef<[f64]>, Q: AsRef<[f64]>>(
    source: &[P],
    output: &[Q],
    source_metric: Metric,
    target_metric: Metric,
) -> Result<f64> {
    if source.len() != output.len() {
        return Err(Error::Shape(format!(
            "{} source points vs {} output points",
            source.len(),
            output.len()
        )));
    }
    let dx = pairwise_distances(source, source_metric)?;
    let dy = pairwise_distances(output, target_metric)?;
    metric_loss_from_distances(&dx, &dy)
}

/// Loss together with its gradient with respect to each output point.
pub fn metric_loss_with_grad<P: AsRef<[f64]>, Q: AsRef<[f64]>>(
    source: &[P],
    output: &[Q],
    source_metric: Metric,
    target_metric: Metric,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if source.len() != output.len() {
        return Err(Error::Shape(format!(
            "{} source points vs {} output points",
            source.len(),
            output.len()
        )));
    }
    let dim = check_points(output, 2)?;
    let dx = pairwise_distances(source, source_metric)?;
    let dy = pairwise_distances(output, target_metric)?;
    let (loss, pair_grad) = metric_loss_pair_grad(&dx.upper(), &dy.upper())?;

    let n = output.len();
    let mut grads = vec![vec![0.0; dim]; n];
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            let (head, tail) = grads.split_at_mut(j);
            target_metric.accumulate_grad(
                output[i].as_ref(),
                output[j].as_ref(),
                dy.get(i, j),
                pair_grad[k],
                &mut head[i],
                &mut tail[0],
            );
            k += 1;
        }
    }
    Ok((loss, grads))
}

/// Sample Pearson correlation of two equally long sequences.
pub fn pearson(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("{} vs {} values", u.len(), v.len())));
    }
    if u.len() < 2 {
        return Err(Error::Arity("need at least two values".into()));
    }
    let su = MetricBatchStats::from_pairs(u);
    let sv = MetricBatchStats::from_pairs(v);
    let (mu, mv) = (su.mean_pairwise, sv.mean_pairwise);
    let mut cov = 0.0;
    let mut var_u = 0.0;
    let mut var_v = 0.0;
    for (a, b) in u.iter().zip(v) {
        cov += (a - mu) * (b - mv);
        var_u += (a - mu) * (a - mu);
        var_v += (b - mv) * (b - mv);
    }
    if !(var_u > 0.0) || !(var_v > 0.0) {
        return Err(Error::UndefinedCorrelation(
            "pairwise distances have zero variance".into(),
        ));
    }
    Ok((cov / (var_u.sqrt() * var_v.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation between the source and output pairwise distances.
pub fn pearson_distance_correlation<P: AsRef<[f64]>, Q: AsRef<[f64]>>(
    source: &[P],
    output: &[Q],
    source_metric: Metric,
    target_metric: Metric,
) -> Result<f64> {
    if source.len() != output.len() {
        return Err(Error::Shape(format!(
            "{} source points vs {} output points",
            source.len(),
            output.len()
        )));
    }
    let dx = pairwise_distances(source, source_metric)?;
    let dy = pairwise_distances(output, target_metric)?;
    pearson(&dx.upper(), &dy.upper())
}

/// Per-label arithmetic-mean centroids, keyed in lexicographic label order.
pub fn centroids<P: AsRef<[f64]>, L: AsRef<str>>(
    points: &[P],
    labels: &[L],
) -> Result<BTreeMap<String, Vec<f64>>> {
    if points.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} points vs {} labels",
            points.len(),
            labels.len()
        )));
    }
    let dim = check_points(points, 1)?;
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for (p, l) in points.iter().zip(labels) {
        let entry = sums
            .entry(l.as_ref().to_string())
            .or_insert_with(|| (vec![0.0; dim], 0));
        for (s, x) in entry.0.iter_mut().zip(p.as_ref()) {
            *s += x;
        }
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(l, (mut s, c))| {
            s.iter_mut().for_each(|x| *x /= c as f64);
            (l, s)
        })
        .collect())
}

/// Nearest-centroid label for every point; ties go to the smallest label.
pub fn nearest_centroid_predict<P: AsRef<[f64]>, L: AsRef<str>>(
    points: &[P],
    labels: &[L],
    metric: Metric,
) -> Result<Vec<String>> {
    let cents = centroids(points, labels)?;
    Ok(points
        .iter()
        .map(|p| {
            let mut best: Option<(&String, f64)> = None;
            for (label, c) in &cents {
                let d = metric.distance(p.as_ref(), c);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((label, d));
                }
            }
            best.expect("at least one centroid").0.clone()
        })
        .collect())
}

pub fn nearest_centroid_accuracy<P: AsRef<[f64]>, L: AsRef<str>>(
    points: &[P],
    labels: &[L],
    metric: Metric,
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Arity("no records".into()));
    }
    let predicted = nearest_centroid_predict(points, labels, metric)?;
    let hits = predicted
        .iter()
        .zip(labels)
        .filter(|(p, l)| p.as_str() == l.as_ref())
        .count();
    Ok(hits as f64 / points.len() as f64)
}

/// `n` points drawn uniformly from the unit sphere in `d` dimensions.
pub fn sample_unit_sphere<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if d == 0 {
        return Err(Error::Arity("sphere dimension must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Ok(out)
}

/// Whether Euclidean distance separates exactly three categories: for every
/// category, its largest internal distance is no larger than the smallest
/// distance from any of its members to a member of another category.
pub fn l2_separates<P: AsRef<[f64]>>(categories: &[Vec<P>]) -> Result<bool> {
    if categories.len() != 3 {
        return Err(Error::Arity(format!(
            "separation is defined for 3 categories, got {}",
            categories.len()
        )));
    }
    if let Some(i) = categories.iter().position(|c| c.is_empty()) {
        return Err(Error::Arity(format!("category {i} is empty")));
    }
    let d = |p: &P, q: &P| Metric::Euclidean.distance(p.as_ref(), q.as_ref());
    for (ci, cat) in categories.iter().enumerate() {
        let mut intra = 0.0f64;
        for i in 0..cat.len() {
            for j in i + 1..cat.len() {
                intra = intra.max(d(&cat[i], &cat[j]));
            }
        }
        let mut cross = f64::INFINITY;
        for (oi, other) in categories.iter().enumerate() {
            if oi == ci {
                continue;
            }
            for p in cat {
                for q in other {
                    cross = cross.min(d(p, q));
                }
            }
        }
        if intra > cross {
            return Ok(false);
        }
    }
    Ok(true)
}
