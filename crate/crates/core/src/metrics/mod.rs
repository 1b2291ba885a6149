//! Similarity, uniformity and linear-probe diagnostics for learned features.

mod probe;

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{domain, substream};
use crate::tensor::{dot, norm, Tensor};

pub use probe::{linear_probe, ProbeConfig, ProbeResult};

/// `q.k / (|q| |k|)`.
pub fn cosine_similarity(q: &[f64], k: &[f64]) -> Result<f64> {
    if q.len() != k.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            lhs: vec![q.len()],
            rhs: vec![k.len()],
        });
    }
    let (nq, nk) = (norm(q), norm(k));
    if nq == 0.0 {
        return Err(Error::ZeroNorm { op: "cosine_similarity", row: 0 });
    }
    if nk == 0.0 {
        return Err(Error::ZeroNorm { op: "cosine_similarity", row: 1 });
    }
    Ok((dot(q, k) / (nq * nk)).clamp(-1.0, 1.0))
}

/// Mean cosine similarity over matching rows of two `[n, d]` feature sets.
pub fn mean_cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (n, _) = a.dims2("mean_cosine")?;
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "mean_cosine",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut sum = 0.0;
    for (x, y) in a.rows().zip(b.rows()) {
        sum += cosine_similarity(x, y)?;
    }
    Ok(sum / n as f64)
}

/// Which feature pairs the Gaussian potential is averaged over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Every distinct unordered pair of the feature set.
    #[default]
    AllPairs,
    /// Only matching rows of two views.
    PositivePairs,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniformityReport {
    pub t: f64,
    pub g_value: f64,
    pub sample_count: usize,
}

fn unit_rows(features: &Tensor, op: &'static str) -> Result<Vec<Vec<f64>>> {
    features
        .rows()
        .enumerate()
        .map(|(i, r)| {
            let n = norm(r);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::ZeroNorm { op, row: i });
            }
            Ok(r.iter().map(|v| v / n).collect())
        })
        .collect()
}

fn check_t(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Invalid(format!("uniformity kernel parameter t must be positive, got {t}")));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean of `exp(-t |u_i - u_j|^2)` over all pairs `i < j` of the L2-normalized rows.
///
/// Row sums are computed in parallel and added in index order, so the result does not
/// depend on the thread count.
pub fn uniformity_g(features: &Tensor, t: f64) -> Result<UniformityReport> {
    check_t(t)?;
    let (n, _) = features.dims2("uniformity_g")?;
    if n < 2 {
        return Err(Error::Invalid(format!("uniformity needs at least 2 features, got {n}")));
    }
    let u = unit_rows(features, "uniformity_g")?;
    let partial: Vec<f64> = (0..n - 1)
        .into_par_iter()
        .map(|i| u[i + 1..].iter().map(|v| (-t * sq_dist(&u[i], v)).exp()).sum())
        .collect();
    let pairs = n * (n - 1) / 2;
    Ok(UniformityReport {
        t,
        g_value: partial.iter().sum::<f64>() / pairs as f64,
        sample_count: n,
    })
}

/// Mean of `exp(-t |a_i - b_i|^2)` over matching normalized rows.
pub fn uniformity_positive(a: &Tensor, b: &Tensor, t: f64) -> Result<UniformityReport> {
    check_t(t)?;
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "uniformity_positive",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (n, _) = a.dims2("uniformity_positive")?;
    let (ua, ub) = (unit_rows(a, "uniformity_positive")?, unit_rows(b, "uniformity_positive")?);
    let sum: f64 = ua.iter().zip(&ub).map(|(x, y)| (-t * sq_dist(x, y)).exp()).sum();
    Ok(UniformityReport {
        t,
        g_value: sum / n as f64,
        sample_count: n,
    })
}

/// Linear map used to look at features in the plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// Keep the first two coordinates (the identity for `d = 2`).
    Identity,
    /// Fixed Gaussian `d x 2` matrix drawn from the seed.
    Random,
}

/// `[d, 2]` Gaussian projection matrix, deterministic in `seed`.
pub fn projection_matrix(d: usize, seed: u64) -> Tensor {
    let mut rng = substream(seed, domain::PROJECTION, &[d as u64]);
    let data = (0..d * 2).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(vec![d, 2], data).expect("d >= 1")
}

/// Projects `[n, d]` features to the plane and L2-normalizes each result.
pub fn project_2d(features: &Tensor, projection: Projection, seed: u64) -> Result<Tensor> {
    let (n, d) = features.dims2("project_2d")?;
    if d < 2 {
        return Err(Error::Invalid(format!("projection needs d >= 2, got {d}")));
    }
    let mut out = Vec::with_capacity(n * 2);
    let m = projection_matrix(d, seed);
    for (i, row) in features.rows().enumerate() {
        let (x, y) = match projection {
            Projection::Identity => (row[0], row[1]),
            Projection::Random => {
                let w = m.data();
                let x = row.iter().enumerate().map(|(j, v)| v * w[j * 2]).sum::<f64>();
                let y = row.iter().enumerate().map(|(j, v)| v * w[j * 2 + 1]).sum::<f64>();
                (x, y)
            }
        };
        let r = x.hypot(y);
        if r == 0.0 || !r.is_finite() {
            return Err(Error::ZeroNorm { op: "project_2d", row: i });
        }
        out.extend_from_slice(&[x / r, y / r]);
    }
    Tensor::new(vec![n, 2], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Gaussian kernel parameter.
    pub t: f64,
    pub pairs: PairMode,
    pub projection: Projection,
    /// Cap on the number of dataset images used for the report.
    pub max_samples: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            t: 2.0,
            pairs: PairMode::AllPairs,
            projection: Projection::Random,
            max_samples: 10_000,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(Error::config("metrics.t", "t must be positive"));
        }
        if self.max_samples < 2 {
            return Err(Error::config("metrics.max_samples", "max_samples must be at least 2"));
        }
        Ok(())
    }
}

/// One line of a metrics report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub metric: String,
    pub value: f64,
    pub t: Option<f64>,
    pub n_samples: usize,
}

/// Writes `metric,value,t,n_samples` rows.
pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "metric,value,t,n_samples")?;
    for r in rows {
        let t = r.t.map(|t| t.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.metric, r.value, t, r.n_samples)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}
