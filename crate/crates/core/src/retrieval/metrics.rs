//! Feature-space evaluation metrics. Distances are Euclidean; ties in
//! retrieval rank go to the lower gallery index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::TensorBundle;
use crate::Real;

use super::eigen::jacobi_eigen;

/// Bundle entry holding a `[N, dim]` feature matrix.
pub const FEATURES_ENTRY: &str = "features";

/// `N` feature rows of width `dim`, row-major, finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim || dim == 0 {
            return Err(Error::shape("features", format!("{} values for {rows} x {dim}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("feature matrix has non-finite entries".into()));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows<T: Real>(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("features", "rows differ in width"));
        }
        Self::new(rows.len(), dim, rows.iter().flatten().map(|v| v.f64()).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_bundle(&self, bundle: &mut TensorBundle) -> Result<()> {
        bundle.push_f32(
            FEATURES_ENTRY,
            &[self.rows, self.dim],
            &self.data.iter().map(|&v| v as f32).collect::<Vec<_>>(),
        )
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let (shape, data) = bundle.f32(FEATURES_ENTRY)?;
        match shape.as_slice() {
            [n, d] => Self::new(*n, *d, data.iter().map(|&v| v as f64).collect()),
            s => Err(Error::shape(FEATURES_ENTRY, format!("expected [N, dim], found {s:?}"))),
        }
    }
}

fn paired(a: &Features, b: &Features, what: &str) -> Result<()> {
    if a.rows != b.rows || a.dim != b.dim {
        return Err(Error::shape(what, format!("{}x{} vs {}x{}", a.rows, a.dim, b.rows, b.dim)));
    }
    if a.rows == 0 {
        return Err(Error::Invalid(format!("{what} needs at least one pair")));
    }
    Ok(())
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Mean Euclidean distance between paired rows.
pub fn paired_distance(a: &Features, b: &Features) -> Result<f64> {
    paired(a, b, "paired_distance")?;
    Ok((0..a.rows).map(|i| dist(a.row(i), b.row(i))).sum::<f64>() / a.rows as f64)
}

/// Cross-modal distance between paired music and dance features.
pub fn mm_dist(music: &Features, dance: &Features) -> Result<f64> {
    paired_distance(music, dance)
}

/// Distance between paired generated and ground-truth features.
pub fn m_dist(generated: &Features, truth: &Features) -> Result<f64> {
    paired_distance(generated, truth)
}

/// 1-based rank of each query's own pair among all gallery rows.
pub fn ranks(query: &Features, gallery: &Features) -> Result<Vec<usize>> {
    paired(query, gallery, "ranks")?;
    Ok((0..query.rows)
        .map(|i| {
            let q = query.row(i);
            let own = dist(q, gallery.row(i));
            1 + (0..gallery.rows)
                .filter(|&j| {
                    let d = dist(q, gallery.row(j));
                    d < own || (d == own && j < i)
                })
                .count()
        })
        .collect())
}

/// Fraction of queries whose pair ranks within the top `k`.
pub fn recall_at_k(query: &Features, gallery: &Features, k: usize) -> Result<f64> {
    if k == 0 || k > gallery.rows {
        return Err(Error::Invalid(format!("recall@{k} needs 1 <= k <= gallery size {}", gallery.rows)));
    }
    let r = ranks(query, gallery)?;
    Ok(r.iter().filter(|&&x| x <= k).count() as f64 / r.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankStats {
    /// Lower middle element for even counts.
    pub median: usize,
    pub mean: f64,
}

pub fn rank_stats(query: &Features, gallery: &Features) -> Result<RankStats> {
    let mut r = ranks(query, gallery)?;
    let mean = r.iter().sum::<usize>() as f64 / r.len() as f64;
    r.sort_unstable();
    Ok(RankStats { median: r[(r.len() - 1) / 2], mean })
}

/// Mean distance over all unordered pairs of rows.
pub fn diversity(f: &Features) -> Result<f64> {
    if f.rows < 2 {
        return Err(Error::Invalid(format!("diversity needs at least 2 rows, got {}", f.rows)));
    }
    let mut total = 0.0;
    for i in 0..f.rows {
        for j in i + 1..f.rows {
            total += dist(f.row(i), f.row(j));
        }
    }
    Ok(total / (f.rows * (f.rows - 1) / 2) as f64)
}

/// Mean and `1/(N-1)` covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
}

impl GaussianStats {
    pub fn fit(f: &Features) -> Result<Self> {
        if f.rows < 2 {
            return Err(Error::Invalid(format!("covariance needs at least 2 rows, got {}", f.rows)));
        }
        let (n, d) = (f.rows, f.dim);
        let mut mean = vec![0.0; d];
        for i in 0..n {
            mean.iter_mut().zip(f.row(i)).for_each(|(m, &v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered: Vec<f64> = (0..n).flat_map(|i| f.row(i).iter().zip(&mean).map(|(v, m)| v - m)).collect();
        let mut cov = vec![0.0; d * d];
        f64::gemm(d, n, d, 1.0 / (n - 1) as f64, &centered, true, &centered, false, 0.0, &mut cov);
        symmetrize(&mut cov, d);
        Ok(Self { dim: d, mean, cov })
    }
}

fn symmetrize(m: &mut [f64], n: usize) {
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = avg;
            m[j * n + i] = avg;
        }
    }
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^½)`, with the trace of the square
/// root taken as the sum of `√λ` over the eigenvalues of `Σa^½ Σb Σa^½`
/// (clamped at zero).
pub fn fid_from_stats(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::shape("fid", format!("dims {} and {}", a.dim, b.dim)));
    }
    let d = a.dim;
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let root_a = jacobi_eigen(&a.cov, d)?.apply(|l| l.max(0.0).sqrt());
    let mut tmp = vec![0.0; d * d];
    f64::gemm(d, d, d, 1.0, &root_a, false, &b.cov, false, 0.0, &mut tmp);
    let mut inner = vec![0.0; d * d];
    f64::gemm(d, d, d, 1.0, &tmp, false, &root_a, false, 0.0, &mut inner);
    symmetrize(&mut inner, d);
    let tr_sqrt: f64 = jacobi_eigen(&inner, d)?.values.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let trace = |m: &[f64]| (0..d).map(|i| m[i * d + i]).sum::<f64>();
    let value = mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(Error::Numerical("FID is not finite".into()));
    }
    Ok(value.max(0.0))
}

pub fn fid(a: &Features, b: &Features) -> Result<f64> {
    fid_from_stats(&GaussianStats::fit(a)?, &GaussianStats::fit(b)?)
}

/// Symmetric contrastive loss: `exp(log_scale)`-scaled cosine logits,
/// cross-entropy toward the diagonal over rows and over columns, averaged.
pub fn clip_loss(music: &Features, dance: &Features, log_scale: f64) -> Result<f64> {
    paired(music, dance, "clip_loss")?;
    if music.rows < 2 {
        return Err(Error::Invalid("contrastive loss needs at least 2 pairs".into()));
    }
    let unit = |f: &Features| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(f.data.len());
        for i in 0..f.rows {
            let norm = f.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Numerical(format!("row {i} has zero norm")));
            }
            out.extend(f.row(i).iter().map(|v| v / norm));
        }
        Ok(out)
    };
    let (m, d) = (unit(music)?, unit(dance)?);
    let n = music.rows;
    let mut logits = vec![0.0; n * n];
    f64::gemm(n, music.dim, n, log_scale.exp(), &m, false, &d, true, 0.0, &mut logits);
    let ce = |get: &dyn Fn(usize, usize) -> f64| -> f64 {
        (0..n)
            .map(|i| {
                let max = (0..n).map(|j| get(i, j)).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|j| (get(i, j) - max).exp()).sum::<f64>().ln();
                lse - get(i, i)
            })
            .sum::<f64>()
            / n as f64
    };
    Ok(0.5 * (ce(&|i, j| logits[i * n + j]) + ce(&|i, j| logits[j * n + i])))
}

/// Metric report; retrieval keys are absent when music features are not given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_at_5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mm_dist: Option<f64>,
    pub fid: f64,
    pub m_dist: f64,
    pub div: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_rank: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_rank: Option<f64>,
}

pub const REPORT_KEYS: [&str; 7] = ["r_at_5", "mm_dist", "fid", "m_dist", "div", "median_rank", "mean_rank"];

/// Evaluates generated dance features against ground truth and, when
/// given, the paired music features. Retrieval queries are dance rows
/// against the music gallery.
pub fn evaluate(generated: &Features, truth: &Features, music: Option<&Features>) -> Result<MetricReport> {
    let mut report = MetricReport {
        r_at_5: None,
        mm_dist: None,
        fid: fid(generated, truth)?,
        m_dist: m_dist(generated, truth)?,
        div: diversity(generated)?,
        median_rank: None,
        mean_rank: None,
    };
    if let Some(m) = music {
        report.mm_dist = Some(mm_dist(m, generated)?);
        if m.rows >= 5 {
            report.r_at_5 = Some(recall_at_k(generated, m, 5)?);
        }
        let rs = rank_stats(generated, m)?;
        report.median_rank = Some(rs.median as f64);
        report.mean_rank = Some(rs.mean);
    }
    Ok(report)
}
