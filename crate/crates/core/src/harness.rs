//! The self-consuming loop: fit a generator, sample from it, rebuild the
//! training set under a curation strategy, refit, and record metrics.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dataset::{provenance_stats, ProvenancedDataset};
use crate::diffusion::{self, Condition, FrozenEncoder, GaussianComponent, GaussianScoreModel, ModelScore, NoiseSchedule, ScoreFunction};
use crate::error::{invalid, Error, Result};
use crate::metrics::{self, ReferenceManifold};
use crate::numerics;
use crate::ole::{self, sample_indices};
use crate::probe::{self, ProbeClassifier, ProbeHyper};
use crate::{rng, stats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Syn,
    SynAdd,
    Acu,
    Acur,
    AcurSims,
    AcurSc,
    AcuLsf,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Syn,
        Strategy::SynAdd,
        Strategy::Acu,
        Strategy::Acur,
        Strategy::AcurSims,
        Strategy::AcurSc,
        Strategy::AcuLsf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Syn => "SYN",
            Strategy::SynAdd => "SYN-ADD",
            Strategy::Acu => "ACU",
            Strategy::Acur => "ACUR",
            Strategy::AcurSims => "ACUR-SIMS",
            Strategy::AcurSc => "ACUR-SC",
            Strategy::AcuLsf => "ACU-LSF",
        }
    }

    fn accumulates(self) -> bool {
        !matches!(self, Strategy::Syn | Strategy::SynAdd)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase().replace('_', "-");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == up)
            .ok_or_else(|| Error::InvalidInput(format!("unknown strategy {s:?}")))
    }
}

/// Class-conditional ground truth: class `c` is `N(μ_c, U_c U_cᵀ + σ² I)`.
/// Means and subspaces come from one orthonormal frame, so every mean is
/// orthogonal to every class subspace.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub means: Vec<DVector<f64>>,
    pub bases: Vec<DMatrix<f64>>,
    pub sigma: f64,
}

impl GroundTruth {
    pub fn new(d: usize, classes: usize, r: usize, sigma: f64, separation: f64, seed: u64) -> Result<Self> {
        if classes < 2 || r == 0 || classes * (r + 1) > d {
            return invalid(format!("need classes >= 2 and classes*(r+1) <= d, got classes={classes}, r={r}, d={d}"));
        }
        if !(sigma > 0.0) || !(separation >= 0.0) {
            return invalid("need sigma > 0 and separation >= 0");
        }
        let q = numerics::random_orthonormal(d, classes * (r + 1), seed)?;
        let bases = (0..classes).map(|c| q.columns(c * r, r).into_owned()).collect();
        let means = (0..classes).map(|c| q.column(classes * r + c) * separation).collect();
        Ok(Self { means, bases, sigma })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }
    pub fn classes(&self) -> usize {
        self.means.len()
    }

    /// `n` real samples labelled `i mod C`, tagged generation 0.
    pub fn sample(&self, n: usize, seed: u64) -> ProvenancedDataset {
        let mut g = rng::rng_from(seed);
        let c = self.classes();
        let mut x = DMatrix::zeros(self.dim(), n);
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        for (i, &y) in labels.iter().enumerate() {
            let z = rng::normal_vec(&mut g, self.bases[y].ncols());
            let e = rng::normal_vec(&mut g, self.dim());
            x.set_column(i, &(&self.means[y] + &self.bases[y] * z + e * self.sigma));
        }
        ProvenancedDataset::tagged(x, labels, 0, true).expect("consistent sizes")
    }

    pub fn exact_model(&self) -> Result<GaussianScoreModel> {
        let comps = (0..self.classes())
            .map(|c| {
                let r = self.bases[c].ncols();
                GaussianComponent::new(1.0, self.means[c].clone(), self.bases[c].clone(), DVector::from_element(r, 1.0), self.sigma * self.sigma)
            })
            .collect::<Result<_>>()?;
        GaussianScoreModel::new(comps)
    }
}

/// Settings of the per-class generator fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Retained eigenpairs per class.
    pub rank: usize,
    /// Lower bound on the isotropic residual variance.
    pub floor: f64,
    /// Fraction by which each class mean is pulled toward the global mean.
    pub mean_shrinkage: f64,
    /// Weight of the pooled within-class covariance in each class covariance.
    pub covariance_pooling: f64,
}

impl FitOptions {
    pub fn plain(rank: usize, floor: f64) -> Self {
        Self { rank, floor, mean_shrinkage: 0.0, covariance_pooling: 0.0 }
    }
}

/// Per-class low-rank Gaussian fit: sample mean, top-`rank` eigenpairs of the
/// maximum-likelihood covariance, and the mean of the remaining eigenvalues
/// (at least `floor`) as isotropic residual. Nonzero shrinkage and pooling
/// share statistics across classes before the low-rank truncation.
pub fn fit_generator(data: &ProvenancedDataset, classes: usize, opts: FitOptions) -> Result<GaussianScoreModel> {
    let d = data.dim();
    let q = opts.rank;
    if q > d {
        return invalid(format!("generator rank {q} exceeds dimension {d}"));
    }
    if !(opts.floor > 0.0) {
        return invalid("variance floor must be positive");
    }
    if !(0.0..=1.0).contains(&opts.mean_shrinkage) || !(0.0..=1.0).contains(&opts.covariance_pooling) {
        return invalid("mean_shrinkage and covariance_pooling must lie in [0, 1]");
    }
    let mut stats = Vec::with_capacity(classes);
    for c in 0..classes {
        let idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
        if idx.len() < q + 2 {
            return Err(Error::DegenerateClass { class: c, count: idx.len(), needed: q + 2 });
        }
        let x = data.features.select_columns(&idx);
        let n = idx.len();
        let mean = x.column_mean();
        let centered = &x - &mean * DVector::from_element(n, 1.0).transpose();
        let cov = &centered * centered.transpose() / n as f64;
        stats.push((n as f64 / data.len() as f64, mean, (&cov + cov.transpose()) * 0.5));
    }
    let global_mean = stats.iter().fold(DVector::zeros(d), |acc, (w, m, _)| acc + m * *w);
    let pooled = stats.iter().fold(DMatrix::zeros(d, d), |acc, (w, _, s)| acc + s * *w);
    let mut comps = Vec::with_capacity(classes);
    for (weight, mean, cov) in stats {
        let mean = &mean * (1.0 - opts.mean_shrinkage) + &global_mean * opts.mean_shrinkage;
        let cov = &cov * (1.0 - opts.covariance_pooling) + &pooled * opts.covariance_pooling;
        let (vals, vecs) = numerics::sorted_eigen(&cov);
        let residual = if q < d { vals.rows(q, d - q).mean() } else { 0.0 }.max(opts.floor);
        let excess = vals.rows(0, q).map(|v| (v - residual).max(0.0));
        comps.push(GaussianComponent::new(weight, mean, vecs.columns(0, q).into_owned(), excess, residual)?);
    }
    GaussianScoreModel::new(comps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TstarRule {
    Fixed(usize),
    /// Timestep of smallest mean OLE on held-out real data over `grid_steps`
    /// evenly spaced timesteps.
    MinRealOle { grid_steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Generation 0 is fitted on the initial real set.
    Fitted,
    /// Generation 0 is the ground-truth model.
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub strategy: Strategy,
    pub generations: usize,
    /// Training-set size N.
    pub budget: usize,
    pub seed: u64,
    pub dim: usize,
    pub classes: usize,
    pub rank: usize,
    pub sigma: f64,
    pub separation: f64,
    pub generator_rank: usize,
    pub variance_floor: f64,
    pub mean_shrinkage: f64,
    pub covariance_pooling: f64,
    pub timesteps: usize,
    /// Overrides the scaled default schedule when set.
    pub betas: Option<(f64, f64)>,
    /// Probability that a synthetic chain ignores its class label and
    /// follows the unconditional mixture score.
    pub condition_leak: f64,
    pub latent_dim: Option<usize>,
    pub tstar: TstarRule,
    pub probe: ProbeHyper,
    pub sims_omega: f64,
    pub synth_add_real_fraction: f64,
    pub eval_samples: usize,
    pub reference_samples: usize,
    pub knn_k: usize,
    pub ole_batch: usize,
    pub ole_batches: usize,
    pub init: Init,
    /// Record wall-clock time per generation. Off by default so reports are
    /// byte-reproducible.
    pub record_timing: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Syn,
            generations: 10,
            budget: 200,
            seed: 0,
            dim: 16,
            classes: 2,
            rank: 4,
            sigma: 0.25,
            separation: 3.0,
            generator_rank: 4,
            variance_floor: 1e-6,
            mean_shrinkage: 0.0,
            covariance_pooling: 0.0,
            timesteps: 200,
            betas: None,
            condition_leak: 0.0,
            latent_dim: None,
            tstar: TstarRule::MinRealOle { grid_steps: 20 },
            probe: ProbeHyper::default(),
            sims_omega: 0.7,
            synth_add_real_fraction: 0.3,
            eval_samples: 1000,
            reference_samples: 5000,
            knn_k: 10,
            ole_batch: 64,
            ole_batches: 10,
            init: Init::Fitted,
            record_timing: false,
        }
    }
}

impl LoopConfig {
    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            rank: self.generator_rank,
            floor: self.variance_floor,
            mean_shrinkage: self.mean_shrinkage,
            covariance_pooling: self.covariance_pooling,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        match self.betas {
            Some((b0, b1)) => NoiseSchedule::linear(self.timesteps, b0, b1),
            None => NoiseSchedule::scaled_default(self.timesteps),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget < self.classes * (self.generator_rank + 2) {
            return invalid(format!("budget {} too small to fit {} classes", self.budget, self.classes));
        }
        if !(0.0..=1.0).contains(&self.condition_leak) || !(0.0..=1.0).contains(&self.synth_add_real_fraction) {
            return invalid("condition_leak and synth_add_real_fraction must lie in [0, 1]");
        }
        if self.eval_samples <= self.knn_k || self.reference_samples <= self.knn_k {
            return invalid("evaluation and reference sets must exceed knn_k");
        }
        if self.eval_samples < self.dim + 2 {
            return invalid("evaluation set too small for the Fréchet distance");
        }
        if self.generator_rank > self.dim {
            return invalid("generator_rank exceeds dim");
        }
        if let TstarRule::Fixed(t) = self.tstar {
            if t > self.timesteps {
                return invalid(format!("t* = {t} exceeds the schedule length {}", self.timesteps));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationReport {
    pub generation: usize,
    pub strategy: Strategy,
    pub fid: f64,
    pub precision: f64,
    pub recall: f64,
    pub ole_tstar: f64,
    pub mean_conf: f64,
    pub median_conf: f64,
    pub real_ratio: f64,
    pub mean_gen_tag: f64,
    pub wall_ms: u64,
}

pub const REPORT_HEADER: &str = "generation,strategy,fid,precision,recall,ole_tstar,mean_conf,median_conf,real_ratio,mean_gen_tag,wall_ms";

impl GenerationReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.generation,
            self.strategy,
            self.fid,
            self.precision,
            self.recall,
            self.ole_tstar,
            self.mean_conf,
            self.median_conf,
            self.real_ratio,
            self.mean_gen_tag,
            self.wall_ms
        )
    }
}

pub fn reports_to_csv(reports: &[GenerationReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Frozen pieces shared by every generation of a run.
pub struct LoopContext {
    pub truth: GroundTruth,
    pub schedule: Arc<NoiseSchedule>,
    pub encoder: FrozenEncoder,
    pub probe: ProbeClassifier,
    pub tstar: usize,
    pub initial: ProvenancedDataset,
    reference_features: DMatrix<f64>,
    reference: ReferenceManifold,
    centers: numerics::KMeans,
}

#[derive(Debug, Clone)]
pub struct LoopOutcome {
    pub reports: Vec<GenerationReport>,
    /// Set when the loop stopped early; `reports` holds completed generations.
    pub failure: Option<String>,
    pub tstar: usize,
    pub final_model: GaussianScoreModel,
    pub final_training_set: ProvenancedDataset,
    /// Generation 0 real set followed by each generation's fresh synthetic set.
    pub samples: Vec<ProvenancedDataset>,
    pub encoder: FrozenEncoder,
    pub probe: ProbeClassifier,
}

/// Streams used by the loop, keyed under the master seed.
mod stream {
    pub const TRUTH: u64 = 1;
    pub const REFERENCE: u64 = 2;
    pub const INITIAL: u64 = 3;
    pub const FRESH_REAL: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const LEAK: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const EVAL_ENCODE: u64 = 8;
    pub const FILTER: u64 = 9;
    pub const SUBSET: u64 = 10;
    pub const KMEANS: u64 = 11;
    pub const TSTAR: u64 = 12;
    pub const OLE: u64 = 13;
    pub const PROBE: u64 = 14;
    pub const HELDOUT: u64 = 15;
}

fn seed_of(cfg: &LoopConfig, path: &[u64]) -> u64 {
    rng::sub_seed(cfg.seed, path)
}

/// Chooses t* by the configured rule, using held-out real data.
pub fn select_tstar(cfg: &LoopConfig, truth: &GroundTruth, encoder: &FrozenEncoder) -> Result<usize> {
    match cfg.tstar {
        TstarRule::Fixed(t) => Ok(t),
        TstarRule::MinRealOle { grid_steps } => {
            let heldout = truth.sample(cfg.ole_batch * cfg.ole_batches, seed_of(cfg, &[stream::HELDOUT]));
            let grid: Vec<usize> = (1..=grid_steps.max(1)).map(|i| (i * cfg.timesteps / grid_steps.max(1)).max(1)).collect();
            let table = ole::ole_scan(
                &[(0, &heldout)],
                encoder,
                &grid,
                ole::ScanSettings {
                    batch_size: cfg.ole_batch,
                    batches: cfg.ole_batches,
                    labels: ole::LabelSource::GroundTruth,
                    seed: seed_of(cfg, &[stream::TSTAR]),
                },
            )?;
            Ok(table.argmin_timestep(0).expect("non-empty grid"))
        }
    }
}

/// Ground truth of a run, keyed by the master seed.
pub fn ground_truth(cfg: &LoopConfig) -> Result<GroundTruth> {
    GroundTruth::new(cfg.dim, cfg.classes, cfg.rank, cfg.sigma, cfg.separation, seed_of(cfg, &[stream::TRUTH]))
}

/// The generation-0 real training set of a run.
pub fn initial_real(cfg: &LoopConfig, truth: &GroundTruth) -> ProvenancedDataset {
    truth.sample(cfg.budget, seed_of(cfg, &[stream::INITIAL]))
}

pub fn build_context(cfg: &LoopConfig) -> Result<LoopContext> {
    cfg.validate()?;
    let schedule = Arc::new(cfg.schedule()?);
    let truth = ground_truth(cfg)?;
    let reference_set = truth.sample(cfg.reference_samples, seed_of(cfg, &[stream::REFERENCE]));
    let initial = initial_real(cfg, &truth);
    let encoder = FrozenEncoder::fit(&initial.features, cfg.latent_dim.unwrap_or(cfg.dim), (*schedule).clone())?;
    let tstar = select_tstar(cfg, &truth, &encoder)?;
    let latents = encoder.encode_batch(&initial.features, tstar, seed_of(cfg, &[stream::PROBE]))?;
    let probe = probe::train_probe(&latents, &initial.labels, cfg.classes, cfg.probe, tstar)?;
    let reference_features = encoder.encode_batch(&reference_set.features, 0, 0)?;
    let reference = ReferenceManifold::new(reference_features.clone(), cfg.knn_k)?;
    let centers = numerics::kmeans(&initial.features, cfg.classes, seed_of(cfg, &[stream::KMEANS]))?;
    Ok(LoopContext { truth, schedule, encoder, probe, tstar, initial, reference_features, reference, centers })
}

/// Class conditions for `n` chains: label `i mod C`, with each chain
/// independently switched to unconditional sampling with probability `leak`.
fn conditions(n: usize, classes: usize, leak: f64, seed: u64) -> (Vec<Condition>, Vec<usize>) {
    let mut g = rng::rng_from(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let conds = labels
        .iter()
        .map(|&y| if leak > 0.0 && g.random::<f64>() < leak { Condition::Unconditional } else { Condition::Class(y) })
        .collect();
    (conds, labels)
}

fn synthesize(score: &dyn ScoreFunction, ctx: &LoopContext, cfg: &LoopConfig, n: usize, generation: u32, seed: u64) -> Result<ProvenancedDataset> {
    let (conds, labels) = conditions(n, cfg.classes, cfg.condition_leak, rng::sub_seed(seed, &[stream::LEAK]));
    let x = diffusion::ancestral_sample(score, &ctx.schedule, &conds, rng::sub_seed(seed, &[stream::SYNTH]))?;
    ProvenancedDataset::tagged(x, labels, generation, false)
}

fn evaluate(score: &dyn ScoreFunction, ctx: &LoopContext, cfg: &LoopConfig, k: usize, train: &ProvenancedDataset) -> Result<GenerationReport> {
    let eval = synthesize(score, ctx, cfg, cfg.eval_samples, k as u32, seed_of(cfg, &[stream::EVAL, k as u64]))?;
    let clean = ctx.encoder.encode_batch(&eval.features, 0, 0)?;
    let fid = metrics::frechet_distance(&ctx.reference_features, &clean)?;
    let (precision, recall) = ctx.reference.precision_recall(&clean)?;

    let conf = probe::score_dataset(&eval, &ctx.probe, &ctx.encoder, seed_of(cfg, &[stream::EVAL_ENCODE, k as u64]))?;
    let mut oles = Vec::with_capacity(cfg.ole_batches);
    for b in 0..cfg.ole_batches {
        let idx = sample_indices(eval.len(), cfg.ole_batch, seed_of(cfg, &[stream::OLE, k as u64, b as u64]));
        let sub = eval.select(&idx);
        let z = ctx.encoder.encode_batch(&sub.features, ctx.tstar, seed_of(cfg, &[stream::OLE, k as u64, b as u64, 1]))?;
        oles.push(ole::ole_score(&z, &sub.labels)?);
    }
    let (mean_gen_tag, real_ratio) = provenance_stats(train)?;
    Ok(GenerationReport {
        generation: k,
        strategy: cfg.strategy,
        fid,
        precision,
        recall,
        ole_tstar: stats::mean(&oles),
        mean_conf: stats::mean(&conf),
        median_conf: stats::median(&conf),
        real_ratio,
        mean_gen_tag,
        wall_ms: 0,
    })
}

/// Training set for generation `k` from the fresh synthetic set and the
/// accumulated synthetic history (all earlier synthetic sets, oldest first).
pub fn make_training_set(
    cfg: &LoopConfig,
    ctx: &LoopContext,
    k: usize,
    fresh: &ProvenancedDataset,
    history: &[ProvenancedDataset],
) -> Result<ProvenancedDataset> {
    let n = cfg.budget;
    let fresh_real = || ctx.truth.sample(n, seed_of(cfg, &[stream::FRESH_REAL, k as u64]));
    match cfg.strategy {
        Strategy::Syn => Ok(fresh.clone()),
        Strategy::SynAdd => {
            let n_real = (cfg.synth_add_real_fraction * n as f64).round() as usize;
            let n_syn = (n - n_real).min(fresh.len());
            let real = ctx.truth.sample(n_real, seed_of(cfg, &[stream::FRESH_REAL, k as u64]));
            let syn = fresh.select(&(0..n_syn).collect::<Vec<_>>());
            ProvenancedDataset::concat(&[&real, &syn])
        }
        _ => {
            let real = fresh_real();
            let mut parts: Vec<&ProvenancedDataset> = vec![&real];
            parts.extend(history.iter());
            parts.push(fresh);
            let pool = ProvenancedDataset::concat(&parts)?;
            match cfg.strategy {
                Strategy::Acu => Ok(pool),
                Strategy::Acur | Strategy::AcurSims => Ok(pool.select(&sample_indices(pool.len(), n, seed_of(cfg, &[stream::SUBSET, k as u64])))),
                Strategy::AcurSc => {
                    let mut sub = pool.select(&sample_indices(pool.len(), n, seed_of(cfg, &[stream::SUBSET, k as u64])));
                    for i in 0..sub.len() {
                        if !sub.real[i] {
                            let c = ctx.centers.nearest(&sub.sample(i));
                            let center = ctx.centers.centers.column(c).into_owned();
                            sub.features.set_column(i, &center);
                        }
                    }
                    Ok(sub)
                }
                Strategy::AcuLsf => probe::lsf_filter(&pool, &ctx.probe, &ctx.encoder, n, seed_of(cfg, &[stream::FILTER, k as u64])),
                Strategy::Syn | Strategy::SynAdd => unreachable!(),
            }
        }
    }
}

/// Runs generations `0..=K`. A failure inside the loop stops it and is
/// reported in `failure`, keeping the generations already completed.
pub fn run_loop(cfg: &LoopConfig) -> Result<LoopOutcome> {
    let ctx = build_context(cfg)?;
    run_loop_with(cfg, &ctx)
}

pub fn run_loop_with(cfg: &LoopConfig, ctx: &LoopContext) -> Result<LoopOutcome> {
    let fit = |d: &ProvenancedDataset| fit_generator(d, cfg.classes, cfg.fit_options());
    let mut train = ctx.initial.clone();
    let mut model = match cfg.init {
        Init::Fitted => fit(&train)?,
        Init::Exact => ctx.truth.exact_model()?,
    };
    let mut sampling: Arc<dyn ScoreFunction> = Arc::new(ModelScore::new(model.clone(), ctx.schedule.clone()));
    let mut history: Vec<ProvenancedDataset> = Vec::new();
    let mut samples = vec![ctx.initial.clone()];
    let mut reports = Vec::with_capacity(cfg.generations + 1);
    let mut failure = None;

    let start = Instant::now();
    reports.push(timed(cfg, start, evaluate(sampling.as_ref(), ctx, cfg, 0, &train)?));

    for k in 1..=cfg.generations {
        let start = Instant::now();
        let step = (|| -> Result<(GenerationReport, GaussianScoreModel, Arc<dyn ScoreFunction>, ProvenancedDataset, ProvenancedDataset)> {
            let fresh = synthesize(sampling.as_ref(), ctx, cfg, cfg.budget, k as u32, seed_of(cfg, &[stream::SYNTH, k as u64]))?;
            let next_train = make_training_set(cfg, ctx, k, &fresh, &history)?;
            let next_model = fit(&next_train)?;
            let fitted: Arc<dyn ScoreFunction> = Arc::new(ModelScore::new(next_model.clone(), ctx.schedule.clone()));
            let next_sampling = if cfg.strategy == Strategy::AcurSims {
                Arc::new(diffusion::sims_score(sampling.clone(), fitted, cfg.sims_omega)?) as Arc<dyn ScoreFunction>
            } else {
                fitted
            };
            let report = evaluate(next_sampling.as_ref(), ctx, cfg, k, &next_train)?;
            Ok((report, next_model, next_sampling, next_train, fresh))
        })();
        match step {
            Ok((report, m, s, t, fresh)) => {
                reports.push(timed(cfg, start, report));
                model = m;
                sampling = s;
                train = t;
                if cfg.strategy.accumulates() {
                    history.push(fresh.clone());
                }
                samples.push(fresh);
            }
            Err(e) => {
                failure = Some(format!("generation {k}: {e}"));
                break;
            }
        }
    }
    Ok(LoopOutcome {
        reports,
        failure,
        tstar: ctx.tstar,
        final_model: model,
        final_training_set: train,
        samples,
        encoder: ctx.encoder.clone(),
        probe: ctx.probe.clone(),
    })
}

fn timed(cfg: &LoopConfig, start: Instant, mut r: GenerationReport) -> GenerationReport {
    if cfg.record_timing {
        r.wall_ms = start.elapsed().as_millis() as u64;
    }
    r
}
