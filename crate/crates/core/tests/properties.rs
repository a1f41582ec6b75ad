use std::sync::Arc;

use collapse_lab::dataset::{self, Container, ProvenancedDataset};
use collapse_lab::diffusion::{sims_score, Condition, FnScore, NoiseSchedule, ScoreFunction};
use collapse_lab::metrics::{frechet_distance, knn_precision_recall};
use collapse_lab::numerics::{nuclear_norm, random_orthonormal};
use collapse_lab::ole::{ole_score, ole_two};
use collapse_lab::probe::{top_indices, ProbeClassifier};
use collapse_lab::stats;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn labelled_batch() -> impl Strategy<Value = (DMatrix<f64>, Vec<usize>)> {
    (2usize..7, 2usize..14, 2usize..4).prop_flat_map(|(d, n, c)| (matrix(d, n), prop::collection::vec(0..c, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ole_is_non_negative((x, y) in labelled_batch()) {
        let v = ole_score(&x, &y).unwrap();
        prop_assert!(v >= -1e-9 * (1.0 + nuclear_norm(&x).unwrap()));
    }

    #[test]
    fn ole_ignores_column_order((x, y) in labelled_batch(), seed in any::<u64>()) {
        let n = x.ncols();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let xp = x.select_columns(&perm);
        let yp: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        let a = ole_score(&x, &y).unwrap();
        let b = ole_score(&xp, &yp).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn ole_scales_linearly((x, y) in labelled_batch(), a in -5.0f64..5.0) {
        let base = ole_score(&x, &y).unwrap();
        let scaled = ole_score(&(&x * a), &y).unwrap();
        prop_assert!((scaled - a.abs() * base).abs() < 1e-8 * (1.0 + base.abs() * a.abs()));
    }

    #[test]
    fn ole_of_orthogonal_classes_is_zero(a in matrix(3, 5), b in matrix(2, 6), seed in 0u64..1000) {
        let q = random_orthonormal(7, 5, seed).unwrap();
        let m0 = q.columns(0, 3) * &a;
        let m1 = q.columns(3, 2) * &b;
        prop_assert!(ole_two(&m0, &m1).unwrap().abs() < 1e-8);
    }

    #[test]
    fn ole_of_duplicated_class(a in matrix(4, 5)) {
        let expected = (2.0 - 2f64.sqrt()) * nuclear_norm(&a).unwrap();
        prop_assert!((ole_two(&a, &a).unwrap() - expected).abs() < 1e-8);
    }

    #[test]
    fn probabilities_form_a_distribution(w in matrix(3, 4), b in prop::collection::vec(-50.0f64..50.0, 3), h in prop::collection::vec(-20.0f64..20.0, 4)) {
        let p = ProbeClassifier::new(w, DVector::from_vec(b), 0).unwrap();
        let probs = p.probabilities(&DVector::from_vec(h)).unwrap();
        prop_assert!((probs.sum() - 1.0).abs() < 1e-12);
        prop_assert!(probs.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn top_indices_keeps_the_highest(scores in prop::collection::vec(0.0f64..1.0, 1..40), budget in 0usize..50) {
        let kept = top_indices(&scores, budget);
        prop_assert_eq!(kept.len(), budget.min(scores.len()));
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        let dropped: Vec<usize> = (0..scores.len()).filter(|i| !kept.contains(i)).collect();
        for &k in &kept {
            for &d in &dropped {
                prop_assert!(scores[k] >= scores[d]);
            }
        }
    }

    #[test]
    fn top_indices_is_permutation_equivariant(raw in prop::collection::btree_set(0u32..10_000, 2..30), budget in 1usize..30, rot in 0usize..30) {
        let scores: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        let n = scores.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let permuted: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let mut mapped: Vec<usize> = top_indices(&permuted, budget).into_iter().map(|i| perm[i]).collect();
        mapped.sort_unstable();
        prop_assert_eq!(mapped, top_indices(&scores, budget));
    }

    #[test]
    fn raising_a_kept_score_keeps_it(scores in prop::collection::vec(0.0f64..1.0, 2..30), budget in 1usize..30, bump in 0.0f64..1.0) {
        let kept = top_indices(&scores, budget);
        let mut raised = scores.clone();
        raised[kept[0]] += bump;
        prop_assert!(top_indices(&raised, budget).contains(&kept[0]));
    }

    #[test]
    fn schedule_invariants(steps in 2usize..400, b0 in 1e-5f64..0.01, span in 0.0f64..0.05) {
        let s = NoiseSchedule::linear(steps, b0, b0 + span).unwrap();
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=steps {
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert!(s.alpha_bar(t) > 0.0);
            prop_assert!(s.sigma_q(t) >= 0.0 && s.sigma_q(t) <= s.beta(t).sqrt() + 1e-15);
            prop_assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * (1.0 - s.beta(t))).abs() < 1e-15);
        }
        prop_assert_eq!(s.sigma_q(1), 0.0);
    }

    #[test]
    fn sims_is_a_superposition(omega in 0.0f64..3.0, x in prop::collection::vec(-5.0f64..5.0, 3), t in 1usize..100) {
        let prev: Arc<dyn ScoreFunction> = Arc::new(FnScore { dim: 3, f: |x: &DVector<f64>, t: usize, _: Condition| -x * (t as f64).sqrt() });
        let cur: Arc<dyn ScoreFunction> = Arc::new(FnScore { dim: 3, f: |x: &DVector<f64>, _: usize, _: Condition| x.map(f64::sin) });
        let x = DVector::from_vec(x);
        let s = sims_score(prev.clone(), cur.clone(), omega).unwrap();
        let got = s.score(&x, t, Condition::Class(0)).unwrap();
        let want = prev.score(&x, t, Condition::Class(0)).unwrap() * (1.0 + omega) - cur.score(&x, t, Condition::Class(0)).unwrap() * omega;
        prop_assert!((got - want).amax() < 1e-12);
    }

    #[test]
    fn frechet_is_symmetric_and_non_negative(a in matrix(2, 12), b in matrix(2, 12)) {
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-7 * (1.0 + ab));
        prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
    }

    #[test]
    fn precision_recall_in_unit_interval(a in matrix(2, 15), b in matrix(2, 15), k in 1usize..10) {
        let (p, r) = knn_precision_recall(&a, &b, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
    }

    #[test]
    fn provenance_stats_are_means(gens in prop::collection::vec(0u32..12, 1..40)) {
        let n = gens.len();
        let real: Vec<bool> = gens.iter().map(|&g| g == 0).collect();
        let data = ProvenancedDataset::new(DMatrix::zeros(1, n), vec![0; n], gens.clone(), real).unwrap();
        let (mean_gen, ratio) = dataset::provenance_stats(&data).unwrap();
        prop_assert!((mean_gen - gens.iter().map(|&g| g as f64).sum::<f64>() / n as f64).abs() < 1e-12);
        prop_assert!((ratio - gens.iter().filter(|&&g| g == 0).count() as f64 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn container_round_trips(x in matrix(3, 7), labels in prop::collection::vec(0usize..4, 7), gens in prop::collection::vec(0u32..20, 7), real in prop::collection::vec(any::<bool>(), 7)) {
        let data = ProvenancedDataset::new(x, labels, gens, real).unwrap();
        let c = Container::with_dataset(data);
        let bytes = dataset::encode_container(&c);
        prop_assert_eq!(dataset::decode_container(&bytes).unwrap(), c);
    }

    #[test]
    fn spearman_is_rank_based(x in prop::collection::btree_set(-1000i32..1000, 3..30)) {
        let x: Vec<f64> = x.into_iter().map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| (v / 100.0).exp()).collect();
        prop_assert!((stats::spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let z: Vec<f64> = x.iter().map(|v| -v * v * v).collect();
        prop_assert!((stats::spearman(&x, &z).unwrap() + 1.0).abs() < 1e-12);
    }
}
