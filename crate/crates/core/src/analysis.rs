//! Diagnostics over sampling runs: step-to-step cosine similarity of the
//! conditioning terms, Fréchet distance between fitted Gaussians of two
//! sample sets, and guidance accuracy under a judging classifier.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::guidance::{ClassifierHandle, SamplerTrace};
use crate::schedule::NoiseSchedule;

/// Per-step batch statistics of the cosine between consecutive conditioning
/// terms. Rows are labeled by the later-executed step of each pair, so a
/// full run over t = T..1 yields labels T-1..1.
#[derive(Debug, Clone)]
pub struct CosineSeries {
    pub rows: Vec<CosineRow>,
}

#[derive(Debug, Clone)]
pub struct CosineRow {
    pub t: usize,
    pub mean: f64,
    pub std: f64,
    pub n_valid: usize,
}

impl CosineSeries {
    /// Mean of the per-step means over a fraction band of the executed
    /// series (0.0 = first executed pair, 1.0 = last). Rows without valid
    /// pairs are skipped.
    pub fn band_mean(&self, lo: f64, hi: f64) -> Option<f64> {
        let n = self.rows.len();
        let i0 = (lo * n as f64).floor() as usize;
        let i1 = ((hi * n as f64).ceil() as usize).min(n);
        let vals: Vec<f64> = self.rows[i0..i1]
            .iter()
            .filter(|r| r.n_valid > 0)
            .map(|r| r.mean)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Cosine between consecutive conditioning terms per chain, aggregated to
/// mean/std over chains. Pairs where either term is zero are excluded; a
/// step with no valid pair reports `n_valid = 0` and NaN statistics.
pub fn cosine_series(trace: &SamplerTrace) -> Result<CosineSeries> {
    if trace.num_steps() < 2 {
        return Err(Error::invalid("trace needs at least 2 steps"));
    }
    let n_pairs = trace.num_steps() - 1;
    let mut rows = Vec::with_capacity(n_pairs);
    for p in 0..n_pairs {
        let t_label = trace.steps[p + 1];
        let mut vals = Vec::new();
        for chain in &trace.records {
            let prev = &chain[p];
            let cur = &chain[p + 1];
            if prev.cond_norm == 0.0 || cur.cond_norm == 0.0 {
                continue;
            }
            let dot: f64 = prev.cond.iter().zip(&cur.cond).map(|(a, b)| a * b).sum();
            let mut c = dot / (prev.cond_norm * cur.cond_norm);
            // rounding can push |c| a hair past 1
            if c > 1.0 && c - 1.0 <= 1e-12 {
                c = 1.0;
            }
            if c < -1.0 && -1.0 - c <= 1e-12 {
                c = -1.0;
            }
            vals.push(c);
        }
        let n_valid = vals.len();
        let (mean, std) = if n_valid == 0 {
            (f64::NAN, f64::NAN)
        } else {
            let mean = vals.iter().sum::<f64>() / n_valid as f64;
            let std = if n_valid >= 2 {
                (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / (n_valid - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            (mean, std)
        };
        rows.push(CosineRow {
            t: t_label,
            mean,
            std,
            n_valid,
        });
    }
    Ok(CosineSeries { rows })
}

/// Squared Fréchet distance between Gaussians fitted to two point sets:
/// `|m1 - m2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`.
///
/// The matrix square root is taken through the symmetrized product
/// `S1^{1/2} S2 S1^{1/2}`; eigenvalues below zero are clamped. A singular
/// fitted covariance is regularized with `1e-6 I`.
pub fn frechet_distance(set_a: &Array2<f64>, set_b: &Array2<f64>) -> Result<f64> {
    if set_a.nrows() == 0 || set_b.nrows() == 0 {
        return Err(Error::invalid("point sets must be nonempty"));
    }
    if set_a.ncols() != set_b.ncols() {
        return Err(Error::ShapeMismatch {
            expected: set_a.ncols(),
            got: set_b.ncols(),
        });
    }
    let (mu_a, cov_a) = fit_gaussian(set_a);
    let (mu_b, cov_b) = fit_gaussian(set_b);

    let sqrt_a = sym_sqrt(&cov_a);
    let prod = &sqrt_a * &cov_b * &sqrt_a;
    let sym = (&prod + prod.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();

    let mean_term = (&mu_a - &mu_b).norm_squared();
    let d2 = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    // tiny negatives are numerical noise around zero
    Ok(if d2 < 0.0 && d2 > -1e-6 { 0.0 } else { d2 })
}

fn fit_gaussian(set: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (set.nrows(), set.ncols());
    let mut mean = DVector::zeros(d);
    for row in set.rows() {
        for (j, v) in row.iter().enumerate() {
            mean[j] += v;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for row in set.rows() {
            let diff = DVector::from_iterator(d, row.iter().copied()) - &mean;
            cov += &diff * diff.transpose();
        }
        cov /= (n - 1) as f64;
    }
    // regularize a singular fit
    let min_eig = cov
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if !(min_eig > 1e-10) {
        cov += DMatrix::identity(d, d) * 1e-6;
    }
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fraction of samples whose argmax class under the judge equals the
/// target; ties break toward the lowest class index.
pub fn guidance_accuracy(
    samples: &Array2<f64>,
    target: usize,
    judge: &ClassifierHandle,
    sched: &NoiseSchedule,
) -> Result<f64> {
    if samples.nrows() == 0 {
        return Err(Error::invalid("empty sample set"));
    }
    let logp = judge.log_posterior_batch(samples, 0, sched)?;
    let mut hits = 0usize;
    for row in logp.rows() {
        let mut best = 0usize;
        for (k, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = k;
            }
        }
        hits += usize::from(best == target);
    }
    Ok(hits as f64 / samples.nrows() as f64)
}
