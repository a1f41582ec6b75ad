//! Zero-mean noisy low-rank Gaussians `x = U z + σ ε` and pairs of them used
//! as the two-class model behind the OLE and confidence bounds.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::numerics::{self, orthonormality_error, sigmoid};
use crate::{rng, stats};

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLowRankGaussian {
    basis: DMatrix<f64>,
    sigma: f64,
}

impl NoisyLowRankGaussian {
    /// `basis` must have orthonormal columns. `sigma == 0` is accepted for
    /// sampling; density-based quantities reject it.
    pub fn new(basis: DMatrix<f64>, sigma: f64) -> Result<Self> {
        if basis.ncols() == 0 || basis.ncols() >= basis.nrows() {
            return invalid(format!("need 0 < r < d, got d={}, r={}", basis.nrows(), basis.ncols()));
        }
        if orthonormality_error(&basis) > 1e-8 {
            return invalid("basis columns are not orthonormal");
        }
        if !(sigma.is_finite() && sigma >= 0.0) {
            return invalid(format!("sigma must be finite and non-negative, got {sigma}"));
        }
        Ok(Self { basis, sigma })
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }
    pub fn sigma(&self) -> f64 {
        self.sigma
    }
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// `n` samples as columns of a d×n matrix.
    pub fn sample(&self, n: usize, seed: u64) -> DMatrix<f64> {
        let mut g = rng::rng_from(seed);
        let mut out = DMatrix::zeros(self.dim(), n);
        for j in 0..n {
            out.set_column(j, &self.draw(&mut g));
        }
        out
    }

    pub(crate) fn draw<R: rand::Rng + ?Sized>(&self, g: &mut R) -> DVector<f64> {
        let z = rng::normal_vec(g, self.rank());
        let e = rng::normal_vec(g, self.dim());
        &self.basis * z + e * self.sigma
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairConstruction {
    /// `v_i = cos θ u_i + sin θ w_i` with `W ⟂ U0`.
    Angled { theta: f64 },
    /// Every entry of `U0ᵀ U1` equals `cosine`.
    Equicosine { cosine: f64 },
}

#[derive(Debug, Clone)]
pub struct SubspacePair {
    pub class0: NoisyLowRankGaussian,
    pub class1: NoisyLowRankGaussian,
    pub construction: PairConstruction,
}

impl SubspacePair {
    pub fn sigma(&self) -> f64 {
        self.class0.sigma
    }
    pub fn dim(&self) -> usize {
        self.class0.dim()
    }
    pub fn rank(&self) -> usize {
        self.class0.rank()
    }
}

pub fn make_angled_pair(d: usize, r: usize, theta: f64, sigma: f64, seed: u64) -> Result<SubspacePair> {
    if r == 0 || d < 2 * r {
        return invalid(format!("angled pair needs d >= 2r, got d={d}, r={r}"));
    }
    if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&theta) {
        return invalid(format!("theta must lie in [0, pi/2], got {theta}"));
    }
    let q = numerics::random_orthonormal(d, 2 * r, seed)?;
    let u0 = q.columns(0, r).into_owned();
    let w = q.columns(r, r).into_owned();
    let u1 = &u0 * theta.cos() + &w * theta.sin();
    Ok(SubspacePair {
        class0: NoisyLowRankGaussian::new(u0, sigma)?,
        class1: NoisyLowRankGaussian::new(u1, sigma)?,
        construction: PairConstruction::Angled { theta },
    })
}

/// Two r-dimensional subspaces whose bases have all cross inner products
/// equal to `cosine`. Requires `cosine <= 1/r` so the Gram matrix
/// `I − r c² J` of the complement part stays PSD.
pub fn make_equicosine_pair(d: usize, r: usize, cosine: f64, sigma: f64, seed: u64) -> Result<SubspacePair> {
    if r == 0 || d < 2 * r {
        return invalid(format!("equicosine pair needs d >= 2r, got d={d}, r={r}"));
    }
    if !(0.0..=1.0).contains(&cosine) {
        return invalid(format!("cosine must lie in [0, 1], got {cosine}"));
    }
    if cosine * r as f64 > 1.0 + 1e-12 {
        return Err(Error::Infeasible(format!(
            "equicosine c={cosine} exceeds 1/r={} for r={r}",
            1.0 / r as f64
        )));
    }
    let j = DMatrix::from_element(r, r, 1.0);
    let gram = DMatrix::identity(r, r) - &j * (r as f64 * cosine * cosine);
    let root = numerics::psd_sqrt(&gram)?;
    let q = numerics::random_orthonormal(d - r, r, seed)?;
    let mut u0 = DMatrix::zeros(d, r);
    u0.view_mut((0, 0), (r, r)).fill_with_identity();
    let mut u1 = DMatrix::zeros(d, r);
    u1.view_mut((0, 0), (r, r)).copy_from(&(&j * cosine));
    u1.view_mut((r, 0), (d - r, r)).copy_from(&(q * root));
    Ok(SubspacePair {
        class0: NoisyLowRankGaussian::new(u0, sigma)?,
        class1: NoisyLowRankGaussian::new(u1, sigma)?,
        construction: PairConstruction::Equicosine { cosine },
    })
}

fn c3(sigma: f64) -> Result<f64> {
    if sigma == 0.0 {
        return Err(Error::DivisionByZero("sigma is zero".into()));
    }
    let s2 = sigma * sigma;
    Ok(1.0 / (2.0 * s2 * (s2 + 1.0)))
}

/// log p1(h) − log p0(h) for the pair: `C3 (‖U1ᵀh‖² − ‖U0ᵀh‖²)`.
pub fn loglik_ratio(pair: &SubspacePair, h: &DVector<f64>) -> Result<f64> {
    numerics::check_dims("feature dimension", h.len(), pair.dim())?;
    let c = c3(pair.sigma())?;
    let p1 = (pair.class1.basis().transpose() * h).norm_squared();
    let p0 = (pair.class0.basis().transpose() * h).norm_squared();
    Ok(c * (p1 - p0))
}

/// Posterior of class 1 under equal priors.
pub fn bayes_confidence(pair: &SubspacePair, h: &DVector<f64>) -> Result<f64> {
    Ok(sigmoid(loglik_ratio(pair, h)?))
}

/// Monte Carlo mean and standard error of the Bayes confidence for class-1
/// samples of an angled pair. Trial `i` uses its own sub-seed, so the result
/// does not depend on how trials are split across threads.
pub fn expected_confidence(d: usize, r: usize, sigma: f64, theta: f64, trials: usize, seed: u64) -> Result<(f64, f64)> {
    if trials < 100 {
        return invalid(format!("expected_confidence needs at least 100 trials, got {trials}"));
    }
    c3(sigma)?;
    let pair = make_angled_pair(d, r, theta, sigma, rng::sub_seed(seed, &[0]))?;
    let values: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut g = rng::child_rng(seed, &[1, i as u64]);
            let h = pair.class1.draw(&mut g);
            bayes_confidence(&pair, &h)
        })
        .collect::<Result<_>>()?;
    Ok((stats::mean(&values), stats::std_error(&values)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn angled_pair_has_expected_angles() {
        let p = make_angled_pair(16, 4, 0.3, 0.5, 1).unwrap();
        let a = numerics::principal_angles(p.class0.basis(), p.class1.basis()).unwrap();
        assert!(a.iter().all(|x| (x - 0.3).abs() < 1e-10));
        assert!(make_angled_pair(7, 4, 0.3, 0.5, 1).is_err());
    }

    #[test]
    fn equicosine_cross_products() {
        let p = make_equicosine_pair(16, 4, 0.2, 1.0, 3).unwrap();
        let cross = p.class0.basis().transpose() * p.class1.basis();
        assert!(cross.iter().all(|&c| (c - 0.2).abs() < 1e-12));
        assert!(orthonormality_error(p.class1.basis()) < 1e-10);
        assert!(matches!(make_equicosine_pair(16, 4, 0.3, 1.0, 3), Err(Error::Infeasible(_))));
    }

    #[test]
    fn loglik_ratio_signs() {
        let p = make_angled_pair(8, 2, FRAC_PI_2, 1.0, 2).unwrap();
        let h: DVector<f64> = p.class1.basis().column(0).into_owned();
        assert!(loglik_ratio(&p, &h).unwrap() > 0.0);
        let same = make_angled_pair(8, 2, 0.0, 1.0, 2).unwrap();
        assert_eq!(loglik_ratio(&same, &h).unwrap(), 0.0);
        let zero = make_angled_pair(8, 2, 0.4, 0.0, 2).unwrap();
        assert!(matches!(loglik_ratio(&zero, &h), Err(Error::DivisionByZero(_))));
    }

    #[test]
    fn near_noiseless_samples_lie_in_span() {
        let p = make_angled_pair(6, 2, 0.5, 1e-12, 4).unwrap();
        let x = p.class0.sample(20, 9);
        let u = p.class0.basis();
        let resid = &x - u * (u.transpose() * &x);
        assert!(resid.amax() < 1e-9);
    }

    #[test]
    fn confidence_at_zero_angle_is_exactly_half() {
        let (m, se) = expected_confidence(16, 4, 0.7, 0.0, 500, 5).unwrap();
        assert_eq!(m, 0.5);
        assert_eq!(se, 0.0);
        assert!(expected_confidence(16, 4, 0.7, 0.0, 10, 5).is_err());
    }
}
