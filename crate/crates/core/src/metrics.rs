//! Sample-quality metrics: Gaussian Fréchet distance and k-NN manifold
//! precision/recall. Samples are columns.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::numerics::{self, psd_sqrt};

fn moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.ncols();
    let mean = x.column_mean();
    let centered = x - &mean * DVector::from_element(n, 1.0).transpose();
    let cov = &centered * centered.transpose() / (n - 1) as f64;
    (mean, (&cov + cov.transpose()) * 0.5)
}

/// `‖μ1−μ2‖² + tr(S1 + S2 − 2(S1^½ S2 S1^½)^½)` from sample moments.
pub fn frechet_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    numerics::check_dims("feature dimension", b.nrows(), a.nrows())?;
    let d = a.nrows();
    if a.ncols() < d + 2 || b.ncols() < d + 2 {
        return invalid(format!(
            "Fréchet distance needs at least d+2 = {} samples per set, got {} and {}",
            d + 2,
            a.ncols(),
            b.ncols()
        ));
    }
    numerics::ensure_finite(a, "first sample set")?;
    numerics::ensure_finite(b, "second sample set")?;
    let (m1, s1) = moments(a);
    let (m2, s2) = moments(b);
    let r1 = psd_sqrt(&s1)?;
    let inner = &r1 * &s2 * &r1;
    let cross = psd_sqrt(&((&inner + inner.transpose()) * 0.5))?;
    let fd = (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok(fd.max(0.0))
}

fn sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    a.column(i).iter().zip(b.column(j).iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each column to its k-th nearest other column.
pub fn knn_radii(x: &DMatrix<f64>, k: usize) -> Result<Vec<f64>> {
    let n = x.ncols();
    if k == 0 || k >= n {
        return invalid(format!("need 0 < k < n, got k={k}, n={n}"));
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq_dist(x, i, x, j)).collect();
            d.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            d[k - 1]
        })
        .collect())
}

/// Fraction of `queries` that fall inside at least one k-NN ball of `support`.
fn coverage(queries: &DMatrix<f64>, support: &DMatrix<f64>, radii: &[f64]) -> f64 {
    let hits = (0..queries.ncols())
        .into_par_iter()
        .filter(|&q| (0..support.ncols()).any(|s| sq_dist(queries, q, support, s) <= radii[s]))
        .count();
    hits as f64 / queries.ncols() as f64
}

/// Real sample set with precomputed k-NN radii, reused across evaluations.
#[derive(Debug, Clone)]
pub struct ReferenceManifold {
    pub samples: DMatrix<f64>,
    pub radii: Vec<f64>,
    pub k: usize,
}

impl ReferenceManifold {
    pub fn new(samples: DMatrix<f64>, k: usize) -> Result<Self> {
        let radii = knn_radii(&samples, k)?;
        Ok(Self { samples, radii, k })
    }

    /// `(precision, recall)` of `synth` against the reference.
    pub fn precision_recall(&self, synth: &DMatrix<f64>) -> Result<(f64, f64)> {
        numerics::check_dims("feature dimension", synth.nrows(), self.samples.nrows())?;
        if self.k >= synth.ncols() {
            return invalid(format!("k={} must be below the synthetic count {}", self.k, synth.ncols()));
        }
        let synth_radii = knn_radii(synth, self.k)?;
        Ok((coverage(synth, &self.samples, &self.radii), coverage(&self.samples, synth, &synth_radii)))
    }
}

pub fn knn_precision_recall(real: &DMatrix<f64>, synth: &DMatrix<f64>, k: usize) -> Result<(f64, f64)> {
    if k >= real.ncols().min(synth.ncols()) || k == 0 {
        return invalid(format!("need 0 < k < min(n_real, n_synth), got k={k}"));
    }
    ReferenceManifold::new(real.clone(), k)?.precision_recall(synth)
}
