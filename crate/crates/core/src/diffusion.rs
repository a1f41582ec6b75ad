//! DDPM machinery with analytic scores: a linear noise schedule, closed-form
//! forward noising, scores of low-rank Gaussian mixtures, the ancestral
//! sampler, score extrapolation, and the frozen PCA encoder.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::numerics::{self, orthonormality_error};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `steps` betas spaced linearly from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return invalid(format!("schedule needs at least 2 steps, got {steps}"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return invalid(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { beta_start, beta_end, betas, alpha_bars })
    }

    /// The 1000-step schedule (1e-4 to 0.02) with betas rescaled by
    /// `1000 / steps`, so shorter chains still reach near-pure noise.
    pub fn scaled_default(steps: usize) -> Result<Self> {
        let s = 1000.0 / steps as f64;
        Self::linear(steps, 1e-4 * s, 0.02 * s)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }
    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }
    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    /// β_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// ᾱ_t for t in 0..=T, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Posterior standard deviation of the reverse step from t to t−1.
    pub fn sigma_q(&self, t: usize) -> f64 {
        let a = 1.0 - self.beta(t);
        ((1.0 - a) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))).sqrt()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return invalid(format!("timestep {t} exceeds schedule length {}", self.steps()));
        }
        Ok(())
    }
}

/// `√ᾱ_t x0 + √(1−ᾱ_t) ε` with ε drawn from `rng`. `t = 0` returns `x0`.
pub fn forward_noise<R: rand::Rng + ?Sized>(x0: &DVector<f64>, t: usize, schedule: &NoiseSchedule, g: &mut R) -> Result<DVector<f64>> {
    schedule.check_t(t)?;
    if t == 0 {
        return Ok(x0.clone());
    }
    let ab = schedule.alpha_bar(t);
    Ok(x0 * ab.sqrt() + rng::normal_vec(g, x0.len()) * (1.0 - ab).sqrt())
}

/// One Gaussian with covariance `V diag(excess) Vᵀ + residual·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    /// d×q with orthonormal columns.
    pub basis: DMatrix<f64>,
    pub excess: DVector<f64>,
    pub residual: f64,
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: DVector<f64>, basis: DMatrix<f64>, excess: DVector<f64>, residual: f64) -> Result<Self> {
        numerics::check_dims("basis rows", basis.nrows(), mean.len())?;
        numerics::check_dims("excess length", excess.len(), basis.ncols())?;
        if !(weight.is_finite() && weight > 0.0) {
            return invalid(format!("component weight must be positive, got {weight}"));
        }
        if !(residual.is_finite() && residual >= 0.0) || excess.iter().any(|&e| !(e.is_finite() && e >= 0.0)) {
            return invalid("covariance spectrum must be finite and non-negative");
        }
        if basis.ncols() > 0 && orthonormality_error(&basis) > 1e-6 {
            return invalid("component basis is not orthonormal");
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return invalid("component mean is not finite");
        }
        Ok(Self { weight, mean, basis, excess, residual })
    }

    /// Component from a dense mean and covariance (full eigendecomposition).
    pub fn from_dense(weight: f64, mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let (vals, vecs) = numerics::sorted_eigen(&((cov + cov.transpose()) * 0.5));
        let excess = vals.map(|v| v.max(0.0));
        Self::new(weight, mean, vecs, excess, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.basis * DMatrix::from_diagonal(&self.excess) * self.basis.transpose() + DMatrix::identity(self.dim(), self.dim()) * self.residual
    }

    /// Score and log density of the t-marginal `N(√ᾱ μ, ᾱΣ + (1−ᾱ)I)` at x.
    fn marginal(&self, x: &DVector<f64>, ab: f64) -> Result<(DVector<f64>, f64)> {
        let s = ab * self.residual + (1.0 - ab);
        if !(s > 0.0) {
            return Err(Error::Numerical { step: 0, message: "singular marginal covariance".into() });
        }
        let r = x - &self.mean * ab.sqrt();
        let proj = self.basis.transpose() * &r;
        let mut shrink = proj.clone();
        let mut logdet = (self.dim() - self.basis.ncols()) as f64 * s.ln();
        for i in 0..proj.len() {
            let a = ab * self.excess[i];
            shrink[i] *= a / (a + s);
            logdet += (a + s).ln();
        }
        let precision_r = (&r - &self.basis * shrink) / s;
        let quad = r.dot(&precision_r);
        let logp = -0.5 * (quad + logdet + self.dim() as f64 * (2.0 * PI).ln());
        Ok((-precision_r, logp))
    }
}

/// Class-indexed mixture of low-rank Gaussians. Component `c` is class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScoreModel {
    components: Vec<GaussianComponent>,
}

impl GaussianScoreModel {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let Some(first) = components.first() else {
            return invalid("score model needs at least one component");
        };
        let d = first.dim();
        for c in &components {
            numerics::check_dims("component dimension", c.dim(), d)?;
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }
    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }
    pub fn classes(&self) -> usize {
        self.components.len()
    }

    fn check(&self, x: &DVector<f64>, t: usize, schedule: &NoiseSchedule) -> Result<f64> {
        numerics::check_dims("state dimension", x.len(), self.dim())?;
        schedule.check_t(t)?;
        if t == 0 {
            return invalid("scores are defined for t >= 1");
        }
        Ok(schedule.alpha_bar(t))
    }

    /// Score of class `class` at noise level t.
    pub fn class_score(&self, x: &DVector<f64>, t: usize, schedule: &NoiseSchedule, class: usize) -> Result<DVector<f64>> {
        let ab = self.check(x, t, schedule)?;
        let Some(c) = self.components.get(class) else {
            return invalid(format!("class {class} out of range for {} components", self.classes()));
        };
        Ok(c.marginal(x, ab)?.0)
    }

    /// Score of the weighted mixture, with responsibilities in log space.
    pub fn mixture_score(&self, x: &DVector<f64>, t: usize, schedule: &NoiseSchedule) -> Result<DVector<f64>> {
        let ab = self.check(x, t, schedule)?;
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        let parts: Vec<(DVector<f64>, f64)> = self
            .components
            .iter()
            .map(|c| c.marginal(x, ab).map(|(s, lp)| (s, lp + (c.weight / total).ln())))
            .collect::<Result<_>>()?;
        let top = parts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = parts.iter().map(|p| (p.1 - top).exp()).collect();
        let z: f64 = weights.iter().sum();
        let mut out = DVector::zeros(self.dim());
        for (w, (s, _)) in weights.iter().zip(&parts) {
            out += s * (w / z);
        }
        Ok(out)
    }

    /// Log density of the mixture's t-marginal.
    pub fn log_density(&self, x: &DVector<f64>, t: usize, schedule: &NoiseSchedule) -> Result<f64> {
        let ab = if t == 0 { 1.0 } else { self.check(x, t, schedule)? };
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        let lps: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.marginal(x, ab).map(|(_, lp)| lp + (c.weight / total).ln()))
            .collect::<Result<_>>()?;
        let top = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(top + lps.iter().map(|l| (l - top).exp()).sum::<f64>().ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Class(usize),
    Unconditional,
}

pub trait ScoreFunction: Send + Sync {
    fn dim(&self) -> usize;
    fn score(&self, x: &DVector<f64>, t: usize, condition: Condition) -> Result<DVector<f64>>;
}

/// Analytic score of a fitted model under a schedule.
#[derive(Debug, Clone)]
pub struct ModelScore {
    pub model: Arc<GaussianScoreModel>,
    pub schedule: Arc<NoiseSchedule>,
}

impl ModelScore {
    pub fn new(model: GaussianScoreModel, schedule: Arc<NoiseSchedule>) -> Self {
        Self { model: Arc::new(model), schedule }
    }
}

impl ScoreFunction for ModelScore {
    fn dim(&self) -> usize {
        self.model.dim()
    }
    fn score(&self, x: &DVector<f64>, t: usize, condition: Condition) -> Result<DVector<f64>> {
        match condition {
            Condition::Class(c) => self.model.class_score(x, t, &self.schedule, c),
            Condition::Unconditional => self.model.mixture_score(x, t, &self.schedule),
        }
    }
}

/// Extrapolated score `(1+ω)·prev − ω·cur`, pushing samples away from the
/// newest model towards the previous one.
#[derive(Clone)]
pub struct SimsScore {
    pub prev: Arc<dyn ScoreFunction>,
    pub cur: Arc<dyn ScoreFunction>,
    pub omega: f64,
}

pub fn sims_score(prev: Arc<dyn ScoreFunction>, cur: Arc<dyn ScoreFunction>, omega: f64) -> Result<SimsScore> {
    if !(omega.is_finite() && omega >= 0.0) {
        return invalid(format!("omega must be finite and non-negative, got {omega}"));
    }
    numerics::check_dims("score dimension", cur.dim(), prev.dim())?;
    Ok(SimsScore { prev, cur, omega })
}

impl ScoreFunction for SimsScore {
    fn dim(&self) -> usize {
        self.prev.dim()
    }
    fn score(&self, x: &DVector<f64>, t: usize, condition: Condition) -> Result<DVector<f64>> {
        let p = self.prev.score(x, t, condition)?;
        let c = self.cur.score(x, t, condition)?;
        Ok(p * (1.0 + self.omega) - c * self.omega)
    }
}

/// Wraps a closure as a score function.
pub struct FnScore<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> ScoreFunction for FnScore<F>
where
    F: Fn(&DVector<f64>, usize, Condition) -> DVector<f64> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn score(&self, x: &DVector<f64>, t: usize, condition: Condition) -> Result<DVector<f64>> {
        Ok((self.f)(x, t, condition))
    }
}

/// Runs one reverse chain from `x_T ~ N(0, I)`.
pub fn ancestral_chain(score: &dyn ScoreFunction, schedule: &NoiseSchedule, condition: Condition, seed: u64) -> Result<DVector<f64>> {
    let mut g = rng::rng_from(seed);
    let mut x = rng::normal_vec(&mut g, score.dim());
    for t in (1..=schedule.steps()).rev() {
        let beta = schedule.beta(t);
        let s = score.score(&x, t, condition).map_err(|e| match e {
            Error::Numerical { message, .. } => Error::Numerical { step: t, message },
            other => other,
        })?;
        x = (x + s * beta) / (1.0 - beta).sqrt();
        if t > 1 {
            x += rng::normal_vec(&mut g, score.dim()) * schedule.sigma_q(t);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical { step: t, message: "non-finite sample state".into() });
        }
    }
    Ok(x)
}

/// One chain per entry of `conditions`; chain `i` is seeded by `(seed, i)`.
/// Returns a d×n matrix.
pub fn ancestral_sample(score: &dyn ScoreFunction, schedule: &NoiseSchedule, conditions: &[Condition], seed: u64) -> Result<DMatrix<f64>> {
    let cols: Vec<DVector<f64>> = conditions
        .par_iter()
        .enumerate()
        .map(|(i, &c)| ancestral_chain(score, schedule, c, rng::sub_seed(seed, &[i as u64])))
        .collect::<Result<_>>()?;
    let mut out = DMatrix::zeros(score.dim(), cols.len());
    for (j, c) in cols.iter().enumerate() {
        out.set_column(j, c);
    }
    Ok(out)
}

/// PCA projection fitted once on real data, composed with forward noising.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    projection: DMatrix<f64>,
    center: DVector<f64>,
    schedule: NoiseSchedule,
}

impl FrozenEncoder {
    pub fn new(projection: DMatrix<f64>, center: DVector<f64>, schedule: NoiseSchedule) -> Result<Self> {
        numerics::check_dims("projection rows", projection.nrows(), center.len())?;
        if projection.ncols() == 0 || orthonormality_error(&projection) > 1e-6 {
            return invalid("encoder projection must have orthonormal columns");
        }
        Ok(Self { projection, center, schedule })
    }

    /// Top-`p` principal directions of `real` (d×n).
    pub fn fit(real: &DMatrix<f64>, p: usize, schedule: NoiseSchedule) -> Result<Self> {
        let (d, n) = real.shape();
        if p == 0 || p > d || n < 2 {
            return invalid(format!("encoder needs 0 < p <= d and n >= 2, got p={p}, d={d}, n={n}"));
        }
        let center = real.column_mean();
        let centered = real - &center * DVector::from_element(n, 1.0).transpose();
        let cov = &centered * centered.transpose() / (n - 1) as f64;
        let (_, vecs) = numerics::sorted_eigen(&cov);
        Self::new(vecs.columns(0, p).into_owned(), center, schedule)
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }
    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }
    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
    pub fn latent_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn encode(&self, x: &DVector<f64>, t: usize, seed: u64) -> Result<DVector<f64>> {
        numerics::check_dims("sample dimension", x.len(), self.center.len())?;
        let noisy = forward_noise(&(x - &self.center), t, &self.schedule, &mut rng::rng_from(seed))?;
        Ok(self.projection.transpose() * noisy)
    }

    /// Encodes every column; column `i` draws noise from `(seed, i)`.
    pub fn encode_batch(&self, x: &DMatrix<f64>, t: usize, seed: u64) -> Result<DMatrix<f64>> {
        let cols: Vec<DVector<f64>> = (0..x.ncols())
            .into_par_iter()
            .map(|i| self.encode(&x.column(i).into_owned(), t, rng::sub_seed(seed, &[i as u64])))
            .collect::<Result<_>>()?;
        let mut out = DMatrix::zeros(self.latent_dim(), cols.len());
        for (j, c) in cols.iter().enumerate() {
            out.set_column(j, c);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_constant_schedule() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(2), 0.25);
        assert_eq!(s.sigma_q(1), 0.0);
        assert!((s.sigma_q(2) - (0.5f64 * 0.5 / 0.75).sqrt()).abs() < 1e-15);
        assert!(NoiseSchedule::linear(1, 0.1, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
    }

    #[test]
    fn scaled_default_matches_reference_at_1000() {
        let s = NoiseSchedule::scaled_default(1000).unwrap();
        assert!((s.beta(1) - 1e-4).abs() < 1e-18);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        let short = NoiseSchedule::scaled_default(200).unwrap();
        assert!(short.alpha_bar(200) < 1e-3);
    }

    #[test]
    fn forward_noise_edge_cases() {
        let s = NoiseSchedule::linear(10, 0.01, 0.2).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let mut g = rng::rng_from(1);
        assert_eq!(forward_noise(&x, 0, &s, &mut g).unwrap(), x);
        assert!(forward_noise(&x, 11, &s, &mut g).is_err());
    }

    #[test]
    fn standard_normal_score_is_minus_x() {
        let s = NoiseSchedule::linear(50, 0.001, 0.05).unwrap();
        let comp = GaussianComponent::new(1.0, DVector::zeros(3), DMatrix::zeros(3, 0), DVector::zeros(0), 1.0).unwrap();
        let m = GaussianScoreModel::new(vec![comp]).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        for t in [1, 17, 50] {
            assert!((m.class_score(&x, t, &s, 0).unwrap() + &x).amax() < 1e-12);
        }
        assert!(m.class_score(&x, 0, &s, 0).is_err());
    }

    #[test]
    fn zero_score_two_step_sampler() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        let zero = FnScore { dim: 1, f: |_: &DVector<f64>, _: usize, _: Condition| DVector::zeros(1) };
        let out = ancestral_chain(&zero, &s, Condition::Unconditional, 9).unwrap();
        let mut g = rng::rng_from(9);
        let x2 = rng::normal(&mut g);
        let z = rng::normal(&mut g);
        let x1 = x2 / 0.5f64.sqrt() + s.sigma_q(2) * z;
        let x0 = x1 / 0.5f64.sqrt();
        assert!((out[0] - x0).abs() < 1e-12);
    }

    #[test]
    fn sims_with_zero_omega_is_prev() {
        let prev: Arc<dyn ScoreFunction> = Arc::new(FnScore { dim: 2, f: |x: &DVector<f64>, _: usize, _: Condition| -x });
        let cur: Arc<dyn ScoreFunction> = Arc::new(FnScore { dim: 2, f: |x: &DVector<f64>, _: usize, _: Condition| x * 3.0 });
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let s0 = sims_score(prev.clone(), cur.clone(), 0.0).unwrap();
        assert_eq!(s0.score(&x, 1, Condition::Unconditional).unwrap(), -x.clone());
        let s1 = sims_score(prev, cur, 1.0).unwrap();
        assert_eq!(s1.score(&x, 1, Condition::Unconditional).unwrap(), -x.clone() * 2.0 - x * 3.0);
    }

    #[test]
    fn encoder_at_zero_is_pca_projection() {
        let real = DMatrix::from_fn(3, 50, |i, j| ((i + 1) as f64) * ((j as f64) * 0.37).sin());
        let sched = NoiseSchedule::scaled_default(100).unwrap();
        let enc = FrozenEncoder::fit(&real, 2, sched).unwrap();
        let x: DVector<f64> = real.column(4).into_owned();
        let z = enc.encode(&x, 0, 1).unwrap();
        assert_eq!(z, enc.projection().transpose() * (&x - enc.center()));
    }
}
