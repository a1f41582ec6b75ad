//! Dense linear algebra helpers: norms, sign-fixed SVD, PSD square roots,
//! principal angles, the Gaussian chi-mean ratio and k-means.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};
use crate::rng;

/// Relative cutoff (times the top singular value) for numerical rank.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormTriple {
    pub frobenius: f64,
    pub operator: f64,
    pub nuclear: f64,
}

#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

pub fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        invalid(format!("{what} contains non-finite entries"))
    }
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    ensure_finite(m, "matrix")?;
    if m.is_empty() {
        return Ok(DVector::zeros(0));
    }
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(DVector::from_vec(sv))
}

/// Thin SVD with descending singular values. Each left singular vector is
/// flipped so its largest-magnitude entry is positive (the matching right
/// vector is flipped too), which makes the factors reproducible.
pub fn svd(m: &DMatrix<f64>) -> Result<Svd> {
    ensure_finite(m, "matrix")?;
    let k = m.nrows().min(m.ncols());
    let raw = m.clone().svd(true, true);
    let (u, v_t) = match (raw.u, raw.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return invalid("svd did not produce singular vectors"),
    };
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| raw.singular_values[b].total_cmp(&raw.singular_values[a]));

    let mut su = DMatrix::zeros(m.nrows(), k);
    let mut svt = DMatrix::zeros(k, m.ncols());
    let mut s = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        let col = u.column(src);
        let pivot = col.iter().fold(0.0_f64, |best, &x| if x.abs() > best.abs() { x } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        su.set_column(dst, &(col * sign));
        svt.set_row(dst, &(v_t.row(src) * sign));
        s[dst] = raw.singular_values[src];
    }
    Ok(Svd { u: su, singular_values: s, v_t: svt })
}

pub fn norms(m: &DMatrix<f64>) -> Result<NormTriple> {
    let sv = singular_values(m)?;
    Ok(NormTriple {
        frobenius: m.norm(),
        operator: sv.iter().copied().fold(0.0, f64::max),
        nuclear: sv.sum(),
    })
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> Result<f64> {
    Ok(singular_values(m)?.sum())
}

/// Count of singular values above `RANK_TOLERANCE` times the largest one.
pub fn numerical_rank(m: &DMatrix<f64>) -> Result<usize> {
    let sv = singular_values(m)?;
    let top = sv.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > RANK_TOLERANCE * top).count())
}

/// Symmetric eigendecomposition sorted by descending eigenvalue.
pub fn sorted_eigen(s: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(s.clone());
    let n = s.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut values = DVector::zeros(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let col = eig.eigenvectors.column(src);
        let pivot = col.iter().fold(0.0_f64, |best, &x| if x.abs() > best.abs() { x } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        vectors.set_column(dst, &(col * sign));
    }
    (values, vectors)
}

/// Principal square root of a symmetric positive semidefinite matrix.
/// Eigenvalues down to `-1e-10` (relative to scale) are clamped to zero.
pub fn psd_sqrt(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !s.is_square() {
        return invalid("psd_sqrt needs a square matrix");
    }
    ensure_finite(s, "matrix")?;
    let scale = s.amax().max(1.0);
    if (s - s.transpose()).amax() > 1e-10 * scale {
        return invalid("matrix is not symmetric");
    }
    let sym = (s + s.transpose()) * 0.5;
    let (vals, vecs) = sorted_eigen(&sym);
    if let Some(&min) = vals.iter().min_by(|a, b| a.total_cmp(b)) {
        if min < -1e-10 * scale {
            return invalid(format!("matrix is not positive semidefinite (eigenvalue {min:e})"));
        }
    }
    let roots = vals.map(|v| v.max(0.0).sqrt());
    let root = &vecs * DMatrix::from_diagonal(&roots) * vecs.transpose();
    Ok((&root + root.transpose()) * 0.5)
}

/// E‖g‖ for g ~ N(0, I_n): √2 Γ((n+1)/2) / Γ(n/2).
pub fn gamma_ratio(n: f64) -> Result<f64> {
    if !(n.is_finite() && n > 0.0) {
        return invalid(format!("gamma_ratio needs n > 0, got {n}"));
    }
    Ok(std::f64::consts::SQRT_2 * (ln_gamma((n + 1.0) / 2.0) - ln_gamma(n / 2.0)).exp())
}

/// Random d×r matrix with orthonormal columns (QR of a Gaussian matrix with
/// the R diagonal made positive, i.e. Haar distributed).
pub fn random_orthonormal(d: usize, r: usize, seed: u64) -> Result<DMatrix<f64>> {
    if r == 0 || r > d {
        return invalid(format!("random_orthonormal needs 0 < r <= d, got d={d}, r={r}"));
    }
    let mut g = rng::rng_from(seed);
    let a = DMatrix::from_fn(d, r, |_, _| rng::normal(&mut g));
    let qr = a.qr();
    let mut q = qr.q();
    let rdiag = qr.r().diagonal();
    for j in 0..r {
        if rdiag[j] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

pub fn orthonormality_error(u: &DMatrix<f64>) -> f64 {
    (u.transpose() * u - DMatrix::identity(u.ncols(), u.ncols())).amax()
}

/// Principal angles between the column spans of two orthonormal bases,
/// ascending, in radians.
pub fn principal_angles(u0: &DMatrix<f64>, u1: &DMatrix<f64>) -> Result<Vec<f64>> {
    if u0.nrows() != u1.nrows() {
        return invalid(format!("ambient dimension mismatch: {} vs {}", u0.nrows(), u1.nrows()));
    }
    for (name, u) in [("first", u0), ("second", u1)] {
        if orthonormality_error(u) > 1e-8 {
            return invalid(format!("{name} basis is not orthonormal"));
        }
    }
    let cross = u0.transpose() * u1;
    let mut angles: Vec<f64> = singular_values(&cross)?
        .iter()
        .map(|&c| c.clamp(0.0, 1.0).acos())
        .collect();
    angles.sort_by(|a, b| a.total_cmp(b));
    Ok(angles)
}

/// Branch-stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct KMeans {
    /// d×k, one center per column.
    pub centers: DMatrix<f64>,
    pub assignments: Vec<usize>,
}

impl KMeans {
    pub fn nearest(&self, x: &DVector<f64>) -> usize {
        nearest_column(&self.centers, x)
    }
}

fn nearest_column(centers: &DMatrix<f64>, x: &DVector<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.column_iter().enumerate() {
        let dist = (x - c).norm_squared();
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best.0
}

/// Lloyd's algorithm with k-means++ seeding on the columns of `x`.
pub fn kmeans(x: &DMatrix<f64>, k: usize, seed: u64) -> Result<KMeans> {
    let n = x.ncols();
    if k == 0 || n == 0 || k > n {
        return invalid(format!("kmeans needs 0 < k <= n, got k={k}, n={n}"));
    }
    ensure_finite(x, "data")?;
    let mut g = rng::rng_from(seed);
    let mut centers = DMatrix::zeros(x.nrows(), k);
    centers.set_column(0, &x.column(g.random_range(0..n)));
    let mut d2: Vec<f64> = x.column_iter().map(|c| (c - centers.column(0)).norm_squared()).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = g.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            g.random_range(0..n)
        };
        centers.set_column(j, &x.column(pick));
        for (i, c) in x.column_iter().enumerate() {
            d2[i] = d2[i].min((c - centers.column(j)).norm_squared());
        }
    }

    let mut assignments = vec![usize::MAX; n];
    for _ in 0..300 {
        let mut changed = false;
        for (i, c) in x.column_iter().enumerate() {
            let a = nearest_column(&centers, &c.into_owned());
            if a != assignments[i] {
                assignments[i] = a;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = DMatrix::zeros(x.nrows(), k);
        let mut counts = vec![0usize; k];
        for (i, c) in x.column_iter().enumerate() {
            let mut col = sums.column_mut(assignments[i]);
            col += c;
            counts[assignments[i]] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers.set_column(j, &(sums.column(j) / counts[j] as f64));
            }
        }
    }
    Ok(KMeans { centers, assignments })
}

pub(crate) fn check_dims(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what}: expected {want}, got {got}")))
    }
}
