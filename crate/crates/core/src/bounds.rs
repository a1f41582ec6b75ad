//! Closed-form OLE and confidence bounds, and Monte Carlo checks of them.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::numerics::{self, gamma_ratio, sigmoid};
use crate::subspace::{self, SubspacePair};
use crate::{ole, rng, stats};

/// `√(2n)·√(ℓ cos θ̃) + √(2n(2n−1))·√(1 − cos θ̃)`.
pub fn phi(theta_tilde: f64, ell: f64, n: usize) -> Result<f64> {
    if !(0.0..=std::f64::consts::FRAC_PI_2 + 1e-12).contains(&theta_tilde) {
        return invalid(format!("theta must lie in [0, pi/2], got {theta_tilde}"));
    }
    if n == 0 || !(ell >= 1.0) {
        return invalid(format!("need n >= 1 and ell >= 1, got n={n}, ell={ell}"));
    }
    // cos(π/2) evaluates to ~6e-17 in floating point.
    let c = theta_tilde.cos().clamp(0.0, 1.0);
    let c = if c < 1e-15 { 0.0 } else { c };
    if ell * c > 1.0 + 1e-12 {
        return invalid(format!("ell * cos(theta) = {} exceeds 1", ell * c));
    }
    let two_n = 2.0 * n as f64;
    Ok(two_n.sqrt() * (ell * c).min(1.0).sqrt() + (two_n * (two_n - 1.0)).sqrt() * (1.0 - c).sqrt())
}

/// `cos θ̃` at which `phi` (with ℓ = 1) switches from increasing to
/// decreasing in the cosine.
pub fn phi_turning_cosine(n: usize) -> f64 {
    1.0 / (2.0 * n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theorem1Constants {
    pub n: usize,
    pub d: usize,
    pub r: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Theorem1Constants {
    /// Lower bound `C1 − C2·phi(θ̃, ℓ, n)` on the expected OLE.
    pub fn bound(&self, theta_tilde: f64, ell: f64) -> Result<f64> {
        Ok(self.c1 - self.c2 * phi(theta_tilde, ell, self.n)?)
    }
}

pub fn theorem1_constants(n: usize, d: usize, r: usize) -> Result<Theorem1Constants> {
    if n == 0 || r == 0 || r >= d {
        return invalid(format!("need n >= 1 and 0 < r < d, got n={n}, d={d}, r={r}"));
    }
    if r <= 2 * n {
        return Err(Error::Precondition(format!("the OLE bound needs r > 2n, got r={r}, n={n}")));
    }
    let (nf, df, rf) = (n as f64, d as f64, r as f64);
    let c2 = 2.0 * gamma_ratio(rf * nf)?;
    let c1 = c2 - 2.0 * nf.sqrt() * gamma_ratio(df * nf)? - (2.0 * nf).sqrt() * gamma_ratio(2.0 * df * nf)?;
    Ok(Theorem1Constants { n, d, r, c1, c2 })
}

/// Upper bounds on the expected confidence for an angled pair:
/// `(C3·ς(r sin²θ), ς(C3·r sin²θ))`. The second form follows from Jensen's
/// inequality applied directly to `E[g]`.
pub fn theorem2_bounds(theta: f64, r: usize, sigma: f64) -> Result<(f64, f64)> {
    if sigma == 0.0 {
        return Err(Error::DivisionByZero("sigma is zero".into()));
    }
    if !(sigma.is_finite() && sigma > 0.0) || r == 0 {
        return invalid(format!("need sigma > 0 and r >= 1, got sigma={sigma}, r={r}"));
    }
    let s2 = sigma * sigma;
    let c3 = 1.0 / (2.0 * s2 * (s2 + 1.0));
    let x = r as f64 * theta.sin().powi(2);
    Ok((c3 * sigmoid(x), sigmoid(c3 * x)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub parameter: f64,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub bounds: Vec<f64>,
    pub satisfied: Vec<bool>,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub parameter_name: String,
    pub bound_names: Vec<String>,
    pub rows: Vec<BoundRow>,
    /// Named whole-grid checks (monotonicity, endpoints).
    pub checks: Vec<(String, bool)>,
}

impl BoundReport {
    pub fn row_satisfied(&self, bound: usize) -> bool {
        self.rows.iter().filter(|r| !r.skipped).all(|r| r.satisfied[bound])
    }

    pub fn check(&self, name: &str) -> Option<bool> {
        self.checks.iter().find(|(n, _)| n == name).map(|&(_, ok)| ok)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{},mc_mean,mc_stderr", self.parameter_name);
        for b in &self.bound_names {
            out.push_str(&format!(",bound_{b}"));
        }
        for b in &self.bound_names {
            out.push_str(&format!(",satisfied_{b}"));
        }
        out.push_str(",skipped\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}", r.parameter, r.mc_mean, r.mc_stderr));
            for b in &r.bounds {
                out.push_str(&format!(",{b}"));
            }
            for s in &r.satisfied {
                out.push_str(&format!(",{s}"));
            }
            out.push_str(&format!(",{}\n", r.skipped));
        }
        out
    }
}

fn pair_ole(pair: &SubspacePair, n: usize, g: &mut rand_chacha::ChaCha8Rng) -> Result<f64> {
    let draw = |m: &subspace::NoisyLowRankGaussian, g: &mut rand_chacha::ChaCha8Rng| {
        let mut out = DMatrix::zeros(m.dim(), n);
        for j in 0..n {
            out.set_column(j, &m.draw(g));
        }
        out
    };
    let m0 = draw(&pair.class0, g);
    let m1 = draw(&pair.class1, g);
    ole::ole_two(&m0, &m1)
}

/// Checks `E[OLE] >= C1 − C2·phi` on equicosine pairs with unit noise.
/// Grid values above `1/r` are reported as skipped.
pub fn verify_theorem1(d: usize, r: usize, n: usize, cosines: &[f64], trials: usize, seed: u64) -> Result<BoundReport> {
    if trials < 500 {
        return invalid(format!("verify_theorem1 needs at least 500 trials, got {trials}"));
    }
    let k = theorem1_constants(n, d, r)?;
    let mut rows = Vec::with_capacity(cosines.len());
    for (gi, &c) in cosines.iter().enumerate() {
        if !(0.0..=1.0).contains(&c) {
            return invalid(format!("cosine {c} outside [0, 1]"));
        }
        let bound = k.bound(c.acos(), 1.0)?;
        if c * r as f64 > 1.0 + 1e-12 {
            rows.push(BoundRow {
                parameter: c,
                mc_mean: f64::NAN,
                mc_stderr: f64::NAN,
                bounds: vec![bound],
                satisfied: vec![false],
                skipped: true,
            });
            continue;
        }
        let pair = subspace::make_equicosine_pair(d, r, c, 1.0, rng::sub_seed(seed, &[gi as u64]))?;
        let values: Vec<f64> = (0..trials)
            .into_par_iter()
            .map(|t| pair_ole(&pair, n, &mut rng::child_rng(seed, &[gi as u64, 1, t as u64])))
            .collect::<Result<_>>()?;
        let (m, se) = (stats::mean(&values), stats::std_error(&values));
        rows.push(BoundRow {
            parameter: c,
            mc_mean: m,
            mc_stderr: se,
            bounds: vec![bound],
            satisfied: vec![m + 3.0 * se >= bound],
            skipped: false,
        });
    }
    let active: Vec<&BoundRow> = rows.iter().filter(|r| !r.skipped).collect();
    let monotone = active.windows(2).all(|w| {
        let (a, b) = (w[0], w[1]);
        b.parameter < a.parameter || b.bounds[0] <= a.bounds[0] + 1e-12
    });
    let shape = phi_shape_ok(n)?;
    Ok(BoundReport {
        parameter_name: "cosine".into(),
        bound_names: vec!["ole".into()],
        rows,
        checks: vec![
            ("bound_nonincreasing_in_cosine".into(), monotone),
            ("phi_unimodal_in_cosine".into(), shape),
        ],
    })
}

/// `phi` (ℓ = 1) rises in the cosine up to `1/(2n)` and falls after it.
fn phi_shape_ok(n: usize) -> Result<bool> {
    let turn = phi_turning_cosine(n);
    let steps = 400;
    let mut ok = true;
    let mut prev = phi(std::f64::consts::FRAC_PI_2, 1.0, n)?;
    for i in 1..=steps {
        let c = i as f64 / steps as f64;
        let cur = phi(c.acos(), 1.0, n)?;
        let prev_c = (i - 1) as f64 / steps as f64;
        if c <= turn {
            ok &= cur > prev;
        } else if prev_c >= turn {
            ok &= cur < prev;
        }
        prev = cur;
    }
    Ok(ok)
}

/// Estimates the expected Bayes confidence on an angle grid and compares it
/// with both confidence bounds. `θ = 0` must give exactly 0.5 and the
/// estimates must be non-decreasing within two combined standard errors.
pub fn verify_theorem2(d: usize, r: usize, sigma: f64, thetas: &[f64], trials: usize, seed: u64) -> Result<BoundReport> {
    if trials < 10_000 {
        return invalid(format!("verify_theorem2 needs at least 10000 trials, got {trials}"));
    }
    let mut rows = Vec::with_capacity(thetas.len());
    for (gi, &theta) in thetas.iter().enumerate() {
        let (m, se) = subspace::expected_confidence(d, r, sigma, theta, trials, rng::sub_seed(seed, &[gi as u64]))?;
        let (stated, jensen) = theorem2_bounds(theta, r, sigma)?;
        rows.push(BoundRow {
            parameter: theta,
            mc_mean: m,
            mc_stderr: se,
            bounds: vec![stated, jensen],
            satisfied: vec![m <= stated + 3.0 * se, m <= jensen + 3.0 * se],
            skipped: false,
        });
    }
    let monotone = rows.windows(2).all(|w| {
        let tol = 2.0 * (w[0].mc_stderr.powi(2) + w[1].mc_stderr.powi(2)).sqrt();
        w[1].parameter < w[0].parameter || w[1].mc_mean >= w[0].mc_mean - tol
    });
    let zero_exact = rows.iter().filter(|r| r.parameter == 0.0).all(|r| r.mc_mean == 0.5);
    Ok(BoundReport {
        parameter_name: "theta".into(),
        bound_names: vec!["stated".into(), "jensen".into()],
        rows,
        checks: vec![
            ("confidence_nondecreasing_in_theta".into(), monotone),
            ("confidence_at_zero_is_half".into(), zero_exact),
        ],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaCheck {
    pub name: String,
    pub cases: usize,
    pub violations: usize,
    /// Smallest `(rhs − lhs) / max(1, |rhs|)` seen; negative means violated.
    pub min_slack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChiMeanCheck {
    pub dof: usize,
    pub trials: usize,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub expected: f64,
    pub within_three_stderr: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaReport {
    pub inequalities: Vec<LemmaCheck>,
    pub chi_mean: ChiMeanCheck,
}

impl LemmaReport {
    pub fn all_hold(&self) -> bool {
        self.inequalities.iter().all(|c| c.violations == 0) && self.chi_mean.within_three_stderr
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("check,cases,violations,min_slack\n");
        for c in &self.inequalities {
            out.push_str(&format!("{},{},{},{}\n", c.name, c.cases, c.violations, c.min_slack));
        }
        let c = &self.chi_mean;
        out.push_str(&format!(
            "chi_mean_dof{},{},{},{}\n",
            c.dof,
            c.trials,
            usize::from(!c.within_three_stderr),
            3.0 * c.mc_stderr - (c.mc_mean - c.expected).abs()
        ));
        out
    }
}

const LEMMA_TOL: f64 = 1e-9;

struct Tally {
    check: LemmaCheck,
}

impl Tally {
    fn new(name: &str) -> Self {
        Self { check: LemmaCheck { name: name.into(), cases: 0, violations: 0, min_slack: f64::INFINITY } }
    }
    /// Records `lhs <= rhs` with relative tolerance.
    fn le(&mut self, lhs: f64, rhs: f64) {
        let slack = (rhs - lhs) / rhs.abs().max(1.0);
        self.check.cases += 1;
        self.check.min_slack = self.check.min_slack.min(slack);
        if slack < -LEMMA_TOL {
            self.check.violations += 1;
        }
    }
}

fn gaussian(rows: usize, cols: usize, g: &mut rand_chacha::ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng::normal(g))
}

/// Checks the norm inequalities used by the OLE bound on `cases` random
/// matrices each, plus the chi-mean identity at `chi_trials` draws.
pub fn verify_lemmas(cases: usize, chi_trials: usize, seed: u64) -> Result<LemmaReport> {
    use rand::Rng;
    if cases == 0 || chi_trials < 2 {
        return invalid("verify_lemmas needs cases >= 1 and chi_trials >= 2");
    }
    let mut cos = Tally::new("unit_vector_nuclear_bound");
    let mut tri = Tally::new("nuclear_triangle");
    let mut sand_lo = Tally::new("frobenius_le_nuclear");
    let mut sand_hi = Tally::new("nuclear_le_sqrt_rank_frobenius");
    let mut holder = Tally::new("holder_op_nuclear");
    let mut opf = Tally::new("operator_le_frobenius");

    let mut g = rng::child_rng(seed, &[0]);
    for _ in 0..cases {
        let m = g.random_range(1..8usize);
        let k = g.random_range(1..8usize);
        let p = g.random_range(1..8usize);

        let n_vec = g.random_range(1..8usize);
        let d_vec = n_vec + g.random_range(1..6usize);
        let mut v = gaussian(d_vec, n_vec, &mut g).map(f64::abs);
        for mut col in v.column_iter_mut() {
            let norm = col.norm();
            col /= norm;
        }
        let gram = v.transpose() * &v;
        let nf = n_vec as f64;
        let avg = (gram.sum() / (nf * nf)).clamp(0.0, 1.0);
        cos.le(numerics::nuclear_norm(&v)?, nf.sqrt() * avg.sqrt() + (nf * (nf - 1.0)).sqrt() * (1.0 - avg).sqrt());

        let a = gaussian(m, k, &mut g);
        let b = gaussian(m, k, &mut g);
        let na = numerics::norms(&a)?;
        tri.le(numerics::nuclear_norm(&(&a + &b))?, na.nuclear + numerics::nuclear_norm(&b)?);

        let rank_deficient = gaussian(m, 1, &mut g) * gaussian(1, k, &mut g) + gaussian(m, 1, &mut g) * gaussian(1, k, &mut g);
        for x in [&a, &rank_deficient] {
            let nx = numerics::norms(x)?;
            let rank = numerics::numerical_rank(x)? as f64;
            sand_lo.le(nx.frobenius, nx.nuclear);
            sand_hi.le(nx.nuclear, rank.sqrt() * nx.frobenius);
            opf.le(nx.operator, nx.frobenius);
        }

        let c = gaussian(k, p, &mut g);
        let nc = numerics::norms(&c)?;
        let prod = (&a * &c).norm();
        holder.le(prod, na.operator * nc.nuclear);
        holder.le(prod, na.nuclear * nc.operator);
    }

    let (rows, cols) = (3usize, 4usize);
    let values: Vec<f64> = (0..chi_trials)
        .into_par_iter()
        .map(|t| gaussian(rows, cols, &mut rng::child_rng(seed, &[1, t as u64])).norm())
        .collect();
    let expected = gamma_ratio((rows * cols) as f64)?;
    let (m, se) = (stats::mean(&values), stats::std_error(&values));
    Ok(LemmaReport {
        inequalities: vec![cos.check, tri.check, sand_lo.check, sand_hi.check, holder.check, opf.check],
        chi_mean: ChiMeanCheck {
            dof: rows * cols,
            trials: chi_trials,
            mc_mean: m,
            mc_stderr: se,
            expected,
            within_three_stderr: (m - expected).abs() <= 3.0 * se,
        },
    })
}
