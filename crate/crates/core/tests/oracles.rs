use std::f64::consts::PI;

use collapse_lab::dataset::{self, Container, ProvenancedDataset};
use collapse_lab::diffusion::{self, ancestral_sample, Condition, FnScore, FrozenEncoder, GaussianComponent, GaussianScoreModel, ModelScore, NoiseSchedule};
use collapse_lab::harness::{self, build_context, fit_generator, make_training_set, run_loop, FitOptions, GroundTruth, LoopConfig, Strategy, TstarRule};
use collapse_lab::metrics::{frechet_distance, knn_precision_recall};
use collapse_lab::numerics::{self, gamma_ratio, nuclear_norm, random_orthonormal};
use collapse_lab::probe::{self, ProbeHyper};
use collapse_lab::subspace::{self, loglik_ratio};
use collapse_lab::{rng, stats, Error};
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut g = rng::rng_from(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng::normal(&mut g))
}

#[test]
fn nuclear_norm_matches_gram_eigenvalues() {
    for seed in 0..20 {
        let m = gaussian_matrix(5, 3 + (seed as usize % 4), seed);
        let gram = if m.ncols() <= m.nrows() { m.transpose() * &m } else { &m * m.transpose() };
        let eig = gram.symmetric_eigenvalues();
        let expected: f64 = eig.iter().map(|v| v.max(0.0).sqrt()).sum();
        assert!((nuclear_norm(&m).unwrap() - expected).abs() < 1e-9);
    }
}

#[test]
fn gamma_ratio_matches_chi_means() {
    assert!((gamma_ratio(1.0).unwrap() - (2.0 / PI).sqrt()).abs() < 1e-12);
    assert!((gamma_ratio(2.0).unwrap() - (PI / 2.0).sqrt()).abs() < 1e-12);
    assert!((gamma_ratio(3.0).unwrap() - 2.0 * (2.0 / PI).sqrt()).abs() < 1e-12);
    let big = gamma_ratio(1e4).unwrap();
    assert!((big - 1e4f64.sqrt()).abs() < 1e-2);
}

fn two_class_model(seed: u64) -> GaussianScoreModel {
    let q = random_orthonormal(6, 4, seed).unwrap();
    let a = GaussianComponent::new(0.3, q.column(3) * 1.5, q.columns(0, 2).into_owned(), DVector::from_vec(vec![2.0, 0.5]), 0.0625).unwrap();
    let b = GaussianComponent::new(0.7, q.column(3) * -1.0, q.columns(2, 1).into_owned(), DVector::from_vec(vec![1.0]), 0.2).unwrap();
    GaussianScoreModel::new(vec![a, b]).unwrap()
}

#[test]
fn scores_match_finite_differences() {
    let schedule = NoiseSchedule::scaled_default(200).unwrap();
    let model = two_class_model(3);
    let h = 1e-4;
    for t in [1usize, 100, 200] {
        for seed in 0..5 {
            let x = gaussian_matrix(6, 1, 100 + seed).column(0).into_owned();
            let analytic = model.mixture_score(&x, t, &schedule).unwrap();
            for i in 0..6 {
                let mut up = x.clone();
                let mut down = x.clone();
                up[i] += h;
                down[i] -= h;
                let fd = (model.log_density(&up, t, &schedule).unwrap() - model.log_density(&down, t, &schedule).unwrap()) / (2.0 * h);
                assert!((fd - analytic[i]).abs() < 1e-5, "t={t} i={i}: {fd} vs {}", analytic[i]);
            }
            let single = GaussianScoreModel::new(vec![model.components()[1].clone()]).unwrap();
            let class = model.class_score(&x, t, &schedule, 1).unwrap();
            assert!((class - single.mixture_score(&x, t, &schedule).unwrap()).amax() < 1e-12);
        }
    }
}

#[test]
fn low_rank_score_matches_dense_inverse() {
    let schedule = NoiseSchedule::scaled_default(50).unwrap();
    let model = two_class_model(8);
    let c = &model.components()[0];
    let x = gaussian_matrix(6, 1, 4).column(0).into_owned();
    for t in [1usize, 25, 50] {
        let ab = schedule.alpha_bar(t);
        let cov = c.covariance() * ab + DMatrix::identity(6, 6) * (1.0 - ab);
        let dense = -cov.try_inverse().unwrap() * (&x - &c.mean * ab.sqrt());
        assert!((model.class_score(&x, t, &schedule, 0).unwrap() - dense).amax() < 1e-10);
    }
}

#[test]
fn loglik_ratio_matches_dense_gaussians() {
    let pair = subspace::make_angled_pair(10, 3, 0.7, 0.6, 2).unwrap();
    let s2 = 0.36;
    let logpdf = |u: &DMatrix<f64>, h: &DVector<f64>| {
        let cov = u * u.transpose() + DMatrix::identity(10, 10) * s2;
        let chol = cov.clone().cholesky().unwrap();
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (h.dot(&(cov.try_inverse().unwrap() * h)) + logdet)
    };
    for seed in 0..10 {
        let h = gaussian_matrix(10, 1, seed).column(0).into_owned();
        let expected = logpdf(pair.class1.basis(), &h) - logpdf(pair.class0.basis(), &h);
        assert!((loglik_ratio(&pair, &h).unwrap() - expected).abs() < 1e-9);
    }
}

#[test]
fn forward_noise_moments() {
    let schedule = NoiseSchedule::scaled_default(100).unwrap();
    let x0 = DVector::from_vec(vec![2.0, -1.0]);
    let t = 40;
    let ab = schedule.alpha_bar(t);
    let mut g = rng::rng_from(11);
    let n = 20_000;
    let draws: Vec<DVector<f64>> = (0..n).map(|_| diffusion::forward_noise(&x0, t, &schedule, &mut g).unwrap()).collect();
    for i in 0..2 {
        let v: Vec<f64> = draws.iter().map(|d| d[i]).collect();
        let m = stats::mean(&v);
        assert!((m - ab.sqrt() * x0[i]).abs() < 4.0 * stats::std_error(&v));
        let var = stats::std_dev(&v).powi(2);
        assert!((var - (1.0 - ab)).abs() < 0.03 * (1.0 - ab));
    }
}

#[test]
fn zero_score_sampler_follows_variance_recursion() {
    let schedule = NoiseSchedule::scaled_default(50).unwrap();
    let zero = FnScore { dim: 4, f: |_: &DVector<f64>, _: usize, _: Condition| DVector::zeros(4) };
    let conds = vec![Condition::Unconditional; 4000];
    let x = ancestral_sample(&zero, &schedule, &conds, 3).unwrap();
    let mut v = 1.0;
    for t in (1..=50).rev() {
        v = v / (1.0 - schedule.beta(t)) + if t > 1 { schedule.sigma_q(t).powi(2) } else { 0.0 };
    }
    let sq: Vec<f64> = x.column_iter().map(|c| c.norm_squared() / 4.0).collect();
    assert!((stats::mean(&sq) - v).abs() < 4.0 * stats::std_error(&sq), "{} vs {v}", stats::mean(&sq));
}

#[test]
fn sampler_reproduces_a_known_gaussian() {
    let schedule = NoiseSchedule::scaled_default(200).unwrap();
    let q = random_orthonormal(8, 4, 21).unwrap();
    let comp = GaussianComponent::new(1.0, q.column(3) * 2.0, q.columns(0, 3).into_owned(), DVector::from_vec(vec![2.0, 1.0, 0.5]), 0.25).unwrap();
    let cov = comp.covariance();
    let root = numerics::psd_sqrt(&cov).unwrap();
    let direct = |seed: u64| {
        let z = gaussian_matrix(8, 5000, seed);
        let mut out = &root * z;
        for mut col in out.column_iter_mut() {
            col += &comp.mean;
        }
        out
    };
    let model = GaussianScoreModel::new(vec![comp.clone()]).unwrap();
    let score = ModelScore::new(model, Arc::new(schedule.clone()));
    let sampled = ancestral_sample(&score, &schedule, &vec![Condition::Class(0); 5000], 5).unwrap();
    let reference = direct(1);
    let baseline = frechet_distance(&reference, &direct(2)).unwrap();
    let fd = frechet_distance(&reference, &sampled).unwrap();
    assert!(fd <= 3.0 * baseline + 0.05, "fd {fd} baseline {baseline}");
}

#[test]
fn sampling_is_independent_of_thread_count() {
    let schedule = NoiseSchedule::scaled_default(30).unwrap();
    let score = ModelScore::new(two_class_model(1), Arc::new(schedule.clone()));
    let conds: Vec<Condition> = (0..64).map(|i| if i % 3 == 0 { Condition::Unconditional } else { Condition::Class(i % 2) }).collect();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| ancestral_sample(&score, &schedule, &conds, 77).unwrap())
    };
    assert_eq!(run(1), run(5));
}

#[test]
fn generator_fit_recovers_ground_truth() {
    let truth = GroundTruth::new(12, 2, 3, 0.3, 2.0, 4).unwrap();
    let data = truth.sample(20_000, 9);
    let model = fit_generator(&data, 2, FitOptions::plain(3, 1e-6)).unwrap();
    let exact = truth.exact_model().unwrap();
    for c in 0..2 {
        let fitted = &model.components()[c];
        let want = &exact.components()[c];
        assert!((&fitted.mean - &want.mean).amax() < 0.05);
        let (a, b) = (fitted.covariance().trace(), want.covariance().trace());
        assert!((a - b).abs() < 0.05 * b, "trace {a} vs {b}");
        assert!((fitted.weight - 0.5).abs() < 1e-12);
    }
}

#[test]
fn full_rank_fit_is_the_mle() {
    let truth = GroundTruth::new(6, 2, 2, 0.5, 1.0, 2).unwrap();
    let data = truth.sample(400, 3);
    let model = fit_generator(&data, 2, FitOptions::plain(5, 1e-6)).unwrap();
    for c in 0..2 {
        let idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == c).collect();
        let x = data.features.select_columns(&idx);
        let mean = x.column_mean();
        let centered = &x - &mean * DVector::from_element(x.ncols(), 1.0).transpose();
        let mle = &centered * centered.transpose() / x.ncols() as f64;
        assert!((model.components()[c].covariance() - mle).amax() < 1e-9);
    }
}

#[test]
fn frechet_closed_forms() {
    let a = gaussian_matrix(3, 40_000, 1);
    let shift = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    let mut b = gaussian_matrix(3, 40_000, 2);
    for mut col in b.column_iter_mut() {
        col += &shift;
    }
    assert!((frechet_distance(&a, &b).unwrap() - shift.norm_squared()).abs() < 0.05);
    let one = gaussian_matrix(1, 40_000, 3);
    let two = gaussian_matrix(1, 40_000, 4) * 2.0;
    assert!((frechet_distance(&one, &two).unwrap() - 1.0).abs() < 0.05);
}

#[test]
fn dropped_modes_keep_precision_and_lose_recall() {
    let mut real = gaussian_matrix(2, 600, 5) * 0.3;
    for j in 0..600 {
        real[(0, j)] += [-6.0, 0.0, 6.0][j % 3];
    }
    let mut synth = gaussian_matrix(2, 200, 6) * 0.3;
    for j in 0..200 {
        synth[(0, j)] -= 6.0;
    }
    let (p, r) = knn_precision_recall(&real, &synth, 10).unwrap();
    assert!(p > 0.9 && r < 0.7, "precision {p} recall {r}");
}

#[test]
fn equicosine_pair_has_constant_cross_gram() {
    for &c in &[0.0, 0.05, 0.11] {
        let p = subspace::make_equicosine_pair(64, 9, c, 1.0, 4).unwrap();
        let cross = p.class0.basis().transpose() * p.class1.basis();
        assert!(cross.iter().all(|&v| (v - c).abs() < 1e-12));
    }
    assert!(matches!(subspace::make_equicosine_pair(64, 9, 0.12, 1.0, 4), Err(Error::Infeasible(_))));
}

#[test]
fn lsf_is_top_confidence_selection() {
    let truth = GroundTruth::new(8, 2, 2, 0.3, 2.0, 1).unwrap();
    let real = truth.sample(120, 2);
    let schedule = NoiseSchedule::scaled_default(100).unwrap();
    let enc = FrozenEncoder::fit(&real.features, 8, schedule).unwrap();
    let latents = enc.encode_batch(&real.features, 10, 3).unwrap();
    let p = probe::train_probe(&latents, &real.labels, 2, ProbeHyper::default(), 10).unwrap();
    let pool = truth.sample(90, 4);
    let scores = probe::score_dataset(&pool, &p, &enc, 5).unwrap();
    let filtered = probe::lsf_filter(&pool, &p, &enc, 30, 5).unwrap();
    assert_eq!(filtered, pool.select(&probe::top_indices(&scores, 30)));
    let whole = probe::lsf_filter(&pool, &p, &enc, 500, 5).unwrap();
    assert_eq!(whole, pool);
}

#[test]
fn container_round_trip_with_sections() {
    let cfg = small_config(Strategy::Syn);
    let out = run_loop(&cfg).unwrap();
    let c = Container {
        dataset: out.final_training_set.clone(),
        model: Some(out.final_model.clone()),
        probe: Some(out.probe.clone()),
        encoder: Some(out.encoder.clone()),
    };
    let mut bytes = Vec::new();
    dataset::write_container(&mut bytes, &c).unwrap();
    assert_eq!(&bytes[..4], b"LSFD");
    assert_eq!(dataset::read_container(bytes.as_slice()).unwrap(), c);
    assert!(dataset::decode_container(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(dataset::decode_container(&bad).is_err());
}

#[test]
fn dataset_header_layout() {
    let data = ProvenancedDataset::new(DMatrix::from_row_slice(2, 1, &[1.5, -2.0]), vec![1], vec![3], vec![false]).unwrap();
    let bytes = dataset::encode_container(&Container::with_dataset(data));
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), dataset::VERSION);
    assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 1);
    assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2);
    assert_eq!(f64::from_le_bytes(bytes[24..32].try_into().unwrap()), 1.5);
    assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()), -2.0);
    assert_eq!(i32::from_le_bytes(bytes[40..44].try_into().unwrap()), 1);
    assert_eq!(i32::from_le_bytes(bytes[44..48].try_into().unwrap()), 3);
    assert_eq!(bytes[48], 0);
}

fn small_config(strategy: Strategy) -> LoopConfig {
    LoopConfig {
        strategy,
        generations: 3,
        budget: 60,
        dim: 8,
        rank: 2,
        generator_rank: 2,
        timesteps: 50,
        eval_samples: 80,
        reference_samples: 200,
        ole_batch: 20,
        ole_batches: 3,
        tstar: TstarRule::MinRealOle { grid_steps: 5 },
        ..LoopConfig::default()
    }
}

#[test]
fn training_set_sizes_per_strategy() {
    let cfg = LoopConfig { budget: 1000, ..small_config(Strategy::SynAdd) };
    let ctx = build_context(&cfg).unwrap();
    let mut fresh = ctx.truth.sample(1000, 8);
    fresh.real = vec![false; 1000];
    fresh.generations = vec![1; 1000];
    let add = make_training_set(&cfg, &ctx, 1, &fresh, &[]).unwrap();
    assert_eq!(add.len(), 1000);
    assert_eq!(add.real.iter().filter(|&&r| r).count(), 300);

    let syn = make_training_set(&LoopConfig { strategy: Strategy::Syn, ..cfg.clone() }, &ctx, 1, &fresh, &[]).unwrap();
    assert_eq!(syn, fresh);

    let history = vec![fresh.clone(), fresh.clone()];
    let acu_cfg = LoopConfig { strategy: Strategy::Acu, ..cfg.clone() };
    let acu = make_training_set(&acu_cfg, &ctx, 3, &fresh, &history).unwrap();
    assert_eq!(acu.len(), 4000);
    for s in [Strategy::Acur, Strategy::AcurSims, Strategy::AcurSc, Strategy::AcuLsf] {
        let out = make_training_set(&LoopConfig { strategy: s, ..cfg.clone() }, &ctx, 3, &fresh, &history).unwrap();
        assert_eq!(out.len(), 1000, "{s}");
    }
}

#[test]
fn sc_replaces_synthetic_samples_by_centers() {
    let cfg = small_config(Strategy::AcurSc);
    let ctx = build_context(&cfg).unwrap();
    let mut fresh = ctx.truth.sample(60, 8);
    fresh.real = vec![false; 60];
    fresh.generations = vec![1; 60];
    let out = make_training_set(&cfg, &ctx, 1, &fresh, &[]).unwrap();
    let synth: Vec<usize> = (0..out.len()).filter(|&i| !out.real[i]).collect();
    assert!(!synth.is_empty());
    let distinct: std::collections::BTreeSet<Vec<u64>> = synth.iter().map(|&i| out.sample(i).iter().map(|v| v.to_bits()).collect()).collect();
    assert!(distinct.len() <= 2);
    assert!(synth.iter().all(|&i| out.generations[i] == 1));
}

#[test]
fn loop_reports_are_deterministic_across_thread_counts() {
    let cfg = small_config(Strategy::AcuLsf);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| harness::reports_to_csv(&run_loop(&cfg).unwrap().reports))
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one.lines().count(), 1 + 4);
    assert!(one.starts_with(harness::REPORT_HEADER));
}

#[test]
fn acu_grows_and_lsf_keeps_budget() {
    let acu = run_loop(&small_config(Strategy::Acu)).unwrap();
    assert_eq!(acu.final_training_set.len(), 4 * 60);
    let lsf = run_loop(&small_config(Strategy::AcuLsf)).unwrap();
    assert_eq!(lsf.final_training_set.len(), 60);
    for r in acu.reports.iter().chain(&lsf.reports) {
        assert!((0.0..=1.0).contains(&r.precision) && (0.0..=1.0).contains(&r.recall));
        assert!(r.fid >= 0.0);
        assert_eq!(r.wall_ms, 0);
    }
}

#[test]
fn single_generation_from_exact_model_is_close() {
    let cfg = LoopConfig { generations: 1, init: harness::Init::Exact, ..small_config(Strategy::Syn) };
    let out = run_loop(&cfg).unwrap();
    let fid = out.reports[1].fid;
    assert!(fid > 0.0 && fid < 0.5, "fid {fid}");
}

#[test]
fn degenerate_generator_stops_the_loop_cleanly() {
    let cfg = LoopConfig { condition_leak: 0.0, ..small_config(Strategy::Syn) };
    let ctx = build_context(&cfg).unwrap();
    let mut lopsided = ctx.initial.clone();
    lopsided.labels = vec![0; lopsided.len()];
    let err = fit_generator(&lopsided, 2, cfg.fit_options()).unwrap_err();
    assert!(matches!(err, Error::DegenerateClass { class: 1, .. }));
}
