//! Adaptation metrics and the analysis toolkit: expert-minus-base deltas,
//! attention rollout, probe attention maps, and paired-embedding
//! statistics (Bhattacharyya distance, per-sample distance).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::QASample;
use crate::model::VlmModel;
use crate::numerics::Tensor;
use crate::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("benchmark keys differ between base and expert: missing `{0}`")]
    KeyMismatch(String),
    #[error("attention rollout needs square matrices, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("probe attention requires a model with probes attached")]
    ProbesDisabled,
    #[error("paired statistics need at least {min} samples, got {n}")]
    TooFewSamples { n: usize, min: usize },
    #[error("pair id {0} present on only one side")]
    UnpairedSample(u64),
    #[error("covariance stayed singular after regularization")]
    SingularCovariance,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-benchmark accuracy of the base and expert model, in percentage
/// points, plus the domain-level averages and deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkScore {
    pub benchmark: String,
    /// "target" or "source".
    pub split: String,
    pub base_acc: f64,
    pub expert_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub benchmarks: Vec<BenchmarkScore>,
    pub target_base_avg: f64,
    pub target_expert_avg: f64,
    pub source_base_avg: f64,
    pub source_expert_avg: f64,
    pub delta_target: f64,
    pub delta_source: f64,
}

/// Expert-minus-base averages over the target and source benchmark sets.
/// Accuracies are expected in percentage points and pass through verbatim.
pub fn delta_metrics(
    base: &BTreeMap<String, f64>,
    expert: &BTreeMap<String, f64>,
    target: &[String],
    source: &[String],
) -> Result<AdaptationReport, MetricsError> {
    let fetch = |map: &BTreeMap<String, f64>, key: &str| -> Result<f64, MetricsError> {
        map.get(key)
            .copied()
            .ok_or_else(|| MetricsError::KeyMismatch(key.to_string()))
    };
    let mut benchmarks = Vec::with_capacity(target.len() + source.len());
    let mut averages = Vec::new();
    for (split, keys) in [("target", target), ("source", source)] {
        let mut base_sum = 0.0;
        let mut expert_sum = 0.0;
        for key in keys {
            let b = fetch(base, key)?;
            let e = fetch(expert, key)?;
            base_sum += b;
            expert_sum += e;
            benchmarks.push(BenchmarkScore {
                benchmark: key.clone(),
                split: split.to_string(),
                base_acc: b,
                expert_acc: e,
            });
        }
        let n = keys.len().max(1) as f64;
        averages.push((base_sum / n, expert_sum / n));
    }
    let (target_base_avg, target_expert_avg) = averages[0];
    let (source_base_avg, source_expert_avg) = averages[1];
    Ok(AdaptationReport {
        benchmarks,
        target_base_avg,
        target_expert_avg,
        source_base_avg,
        source_expert_avg,
        delta_target: target_expert_avg - target_base_avg,
        delta_source: source_expert_avg - source_base_avg,
    })
}

/// Attention rollout: the layer-ordered product of row-normalized
/// `(A + I)` matrices. Input and output rows are stochastic.
pub fn attention_rollout(layers: &[Tensor]) -> Result<Tensor, MetricsError> {
    assert!(!layers.is_empty(), "rollout of zero layers");
    let n = layers[0].shape()[0];
    let mut rollout = identity_matrix(n);
    for layer in layers {
        let rows = layer.shape()[0];
        let cols = layer.shape()[1];
        if rows != cols || rows != n {
            return Err(MetricsError::NotSquare { rows, cols });
        }
        let step = normalize_rows_plus_identity(layer);
        rollout = mat_product(&step, &rollout, n);
    }
    Ok(Tensor::from_vec(vec![n, n], rollout).unwrap())
}

fn identity_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn normalize_rows_plus_identity(a: &Tensor) -> Vec<f64> {
    let n = a.shape()[0];
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..n {
            let v = a.data()[i * n + j] + if i == j { 1.0 } else { 0.0 };
            out[i * n + j] = v;
            sum += v;
        }
        for j in 0..n {
            out[i * n + j] /= sum;
        }
    }
    out
}

fn mat_product(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let av = a[i * n + k];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[k * n + j];
            }
        }
    }
    out
}

/// Mean probe attention per interaction layer for one sample, reshaped to
/// frame-major spatial maps. Each layer's map sums to 1.
pub fn probe_attention_map(
    model: &VlmModel,
    sample: &QASample,
) -> Result<Vec<(usize, Tensor)>, MetricsError> {
    if model.probes.is_none() {
        return Err(MetricsError::ProbesDisabled);
    }
    let trace = model.forward_trace(&sample.video)?;
    Ok(trace.probe_maps)
}

/// Mean vector and covariance of an embedding cloud (population divisor).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    /// Row-major d x d covariance.
    pub cov: Vec<f64>,
    pub dim: usize,
}

pub fn fit_gaussian(points: &[Vec<f64>]) -> GaussianSummary {
    let n = points.len();
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for p in points {
        for i in 0..d {
            let di = p[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (p[j] - mean[j]);
            }
        }
    }
    for c in &mut cov {
        *c /= n as f64;
    }
    GaussianSummary { mean, cov, dim: d }
}

/// Lower-triangular Cholesky factor, or `None` if not positive definite.
fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[i * d + j];
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[i * d + j] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    Some(l)
}

fn log_det_from_cholesky(l: &[f64], d: usize) -> f64 {
    (0..d).map(|i| l[i * d + i].ln()).sum::<f64>() * 2.0
}

/// `x^T A^{-1} x` via forward substitution on the Cholesky factor.
fn quad_form(l: &[f64], x: &[f64], d: usize) -> f64 {
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = x[i];
        for k in 0..i {
            s -= l[i * d + k] * y[k];
        }
        y[i] = s / l[i * d + i];
    }
    y.iter().map(|v| v * v).sum()
}

/// Cholesky with on-demand regularization: when the matrix is singular,
/// add `eps * trace/d` to the diagonal and retry (a few magnitudes).
fn robust_cholesky(cov: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    if let Some(l) = cholesky(cov, d) {
        return Ok((l, cov.to_vec()));
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let base = 1e-6 * (trace / d as f64).max(1e-12);
    let mut eps = base;
    for _ in 0..8 {
        let mut reg = cov.to_vec();
        for i in 0..d {
            reg[i * d + i] += eps;
        }
        if let Some(l) = cholesky(&reg, d) {
            return Ok((l, reg));
        }
        eps *= 10.0;
    }
    Err(MetricsError::SingularCovariance)
}

/// Bhattacharyya distance between two fitted Gaussians:
/// `1/8 (m1-m2)^T S^{-1} (m1-m2) + 1/2 ln(det S / sqrt(det S1 det S2))`
/// with `S = (S1+S2)/2`.
pub fn bhattacharyya(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64, MetricsError> {
    let d = a.dim;
    assert_eq!(b.dim, d, "dimension mismatch");
    let mixed: Vec<f64> = a
        .cov
        .iter()
        .zip(&b.cov)
        .map(|(x, y)| 0.5 * (x + y))
        .collect();
    let (l_mixed, _) = robust_cholesky(&mixed, d)?;
    let (l_a, _) = robust_cholesky(&a.cov, d)?;
    let (l_b, _) = robust_cholesky(&b.cov, d)?;
    let diff: Vec<f64> = a.mean.iter().zip(&b.mean).map(|(x, y)| x - y).collect();
    let quad = quad_form(&l_mixed, &diff, d);
    let log_term = log_det_from_cholesky(&l_mixed, d)
        - 0.5 * (log_det_from_cholesky(&l_a, d) + log_det_from_cholesky(&l_b, d));
    Ok(0.125 * quad + 0.5 * log_term)
}

/// Embedding cloud statistics of paired source/target samples:
/// Bhattacharyya distance between the fitted Gaussians and the mean
/// Euclidean distance between paired embeddings.
pub fn paired_embedding_stats(
    source: &[(u64, Vec<f64>)],
    target: &[(u64, Vec<f64>)],
) -> Result<(f64, f64), MetricsError> {
    if source.len() < 3 || target.len() < 3 {
        return Err(MetricsError::TooFewSamples {
            n: source.len().min(target.len()),
            min: 3,
        });
    }
    let src_map: BTreeMap<u64, &Vec<f64>> = source.iter().map(|(id, e)| (*id, e)).collect();
    let tgt_map: BTreeMap<u64, &Vec<f64>> = target.iter().map(|(id, e)| (*id, e)).collect();
    for id in src_map.keys() {
        if !tgt_map.contains_key(id) {
            return Err(MetricsError::UnpairedSample(*id));
        }
    }
    for id in tgt_map.keys() {
        if !src_map.contains_key(id) {
            return Err(MetricsError::UnpairedSample(*id));
        }
    }

    let src_points: Vec<Vec<f64>> = source.iter().map(|(_, e)| e.clone()).collect();
    let tgt_points: Vec<Vec<f64>> = target.iter().map(|(_, e)| e.clone()).collect();
    let bd = bhattacharyya(&fit_gaussian(&src_points), &fit_gaussian(&tgt_points))?;

    let mut psd = 0.0;
    for (id, s) in &src_map {
        let t = tgt_map[id];
        let dist: f64 = s
            .iter()
            .zip(t.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        psd += dist;
    }
    psd /= src_map.len() as f64;
    Ok((bd, psd))
}

/// CSV rows `pair_id, domain, dim_0..dim_{d-1}` for external projection.
pub fn embeddings_to_csv(rows: &[(u64, String, Vec<f64>)]) -> String {
    let dim = rows.first().map(|(_, _, e)| e.len()).unwrap_or(0);
    let mut out = String::from("pair_id,domain");
    for i in 0..dim {
        out.push_str(&format!(",dim_{i}"));
    }
    out.push('\n');
    for (id, domain, embed) in rows {
        out.push_str(&format!("{id},{domain}"));
        for v in embed {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Parse the CSV produced by [`embeddings_to_csv`] (or externally projected
/// coordinates in the same shape).
pub fn embeddings_from_csv(csv: &str) -> Result<Vec<(u64, String, Vec<f64>)>, MetricsError> {
    let mut rows = Vec::new();
    for (idx, line) in csv.lines().enumerate() {
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let id: u64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or(MetricsError::UnpairedSample(0))?;
        let domain = parts.next().unwrap_or("").to_string();
        let embed: Vec<f64> = parts.filter_map(|s| s.parse().ok()).collect();
        rows.push((id, domain, embed));
    }
    Ok(rows)
}
