use merit_core::metrics::{auc, ndcg_at_k, wndcg_at_k};
use merit_core::objectives::{enumerate_session_pairs, pairwise_loss, PairSet};
use merit_core::rng::{stream, Domain};
use merit_core::verify::{monotonicity_sweep, randomized_model, small_spec, verification_data};
use merit_core::{Architecture, Graph, Tensor, ZRule};
use proptest::prelude::*;

/// Scores on a quarter grid, so ties are common and strictly increasing
/// maps cannot merge distinct values through rounding.
fn grid_scores(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-20i32..20).prop_map(|v| v as f64 / 4.0), n)
}

fn ranking_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|n| (grid_scores(n), prop::collection::vec(0.0f64..5.0, n)))
}

fn labeled_case() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..60).prop_flat_map(|n| (grid_scores(n), prop::collection::vec(any::<bool>(), n)))
}

fn session_case() -> impl Strategy<Value = (Vec<u8>, Vec<f64>)> {
    (1usize..12).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..3, n),
            prop::collection::vec((0i32..6).prop_map(|v| v as f64 * 0.75), n),
        )
    })
}

fn pairs_of(y: &[u8], z: &[f64], rule: ZRule) -> PairSet {
    let mut rng = stream(0, Domain::Test, 0);
    enumerate_session_pairs(y, z, rule, usize::MAX, &mut rng).unwrap()
}

fn loss_value(scores: &[f64], pairs: &[(usize, usize)]) -> f64 {
    let mut g = Graph::new();
    let s = g.constant(Tensor::column(scores.to_vec()));
    let l = pairwise_loss(&mut g, s, pairs).unwrap();
    g.value(l).item()
}

proptest! {
    #[test]
    fn ndcg_is_invariant_under_increasing_score_maps((s, z) in ranking_case(), k in 1usize..25) {
        let moved: Vec<f64> = s.iter().map(|v| v * v * v + 3.0 * v).collect();
        prop_assert_eq!(ndcg_at_k(&s, &z, k).unwrap(), ndcg_at_k(&moved, &z, k).unwrap());
    }

    #[test]
    fn ndcg_is_invariant_under_gain_scaling((s, z) in ranking_case(), k in 1usize..25, c in 0.01f64..100.0) {
        let base = ndcg_at_k(&s, &z, k).unwrap();
        // Powers of two scale exactly, any other factor up to rounding.
        let doubled: Vec<f64> = z.iter().map(|v| v * 4.0).collect();
        prop_assert_eq!(base, ndcg_at_k(&s, &doubled, k).unwrap());
        let scaled: Vec<f64> = z.iter().map(|v| v * c).collect();
        prop_assert!((base - ndcg_at_k(&s, &scaled, k).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ndcg_lies_in_unit_interval((s, z) in ranking_case(), k in 1usize..25) {
        let v = ndcg_at_k(&s, &z, k).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
    }

    #[test]
    fn single_session_wndcg_equals_ndcg((s, z) in ranking_case(), k in 1usize..25) {
        let sessions = vec![7u64; s.len()];
        // Weighting by the session length and dividing it out again rounds.
        let w = wndcg_at_k(&s, &z, &sessions, k).unwrap();
        prop_assert!((w - ndcg_at_k(&s, &z, k).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn auc_is_bounded_and_flips_to_its_complement((s, labels) in labeled_case()) {
        let Some(a) = auc(&s, &labels).unwrap() else {
            prop_assert!(labels.iter().all(|&l| l) || labels.iter().all(|&l| !l));
            return Ok(());
        };
        prop_assert!((0.0..=1.0).contains(&a));
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let b = auc(&s, &flipped).unwrap().unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
        let negated: Vec<f64> = s.iter().map(|v| -v).collect();
        let c = auc(&negated, &labels).unwrap().unwrap();
        prop_assert!((a + c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stratified_pairs_are_a_subset_of_unstratified((y, z) in session_case()) {
        let strat = pairs_of(&y, &z, ZRule::Stratified);
        let unstrat = pairs_of(&y, &z, ZRule::Unstratified);
        prop_assert_eq!(strat.y_pairs(), unstrat.y_pairs());
        let all = unstrat.z_pairs();
        for p in strat.z_pairs() {
            prop_assert!(all.contains(&p));
        }
    }

    #[test]
    fn constant_labels_make_both_rules_agree((_, z) in session_case(), level in 0u8..3) {
        let y = vec![level; z.len()];
        prop_assert_eq!(pairs_of(&y, &z, ZRule::Stratified), pairs_of(&y, &z, ZRule::Unstratified));
    }

    #[test]
    fn pair_loss_ignores_row_order((y, z) in session_case(), seed in any::<u64>()) {
        let n = y.len();
        let mut rng = stream(seed, Domain::Test, 1);
        let scores: Vec<f64> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, -3.0..3.0)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        // Row r of the permuted list holds original row perm[r].
        let mut place = vec![0; n];
        for (r, &o) in perm.iter().enumerate() {
            place[o] = r;
        }
        let permuted: Vec<f64> = perm.iter().map(|&o| scores[o]).collect();
        for rule in [ZRule::Stratified, ZRule::Unstratified] {
            let set = pairs_of(&y, &z, rule);
            for pairs in [set.y_pairs(), set.z_pairs()] {
                let remapped: Vec<(usize, usize)> = pairs.iter().map(|&(i, j)| (place[i], place[j])).collect();
                let a = loss_value(&scores, &pairs);
                let b = loss_value(&permuted, &remapped);
                prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn merchant_towers_stay_monotone_for_any_weights(seed in any::<u64>(), minmax in any::<bool>(), scale in 0.1f64..3.0) {
        let schema = verification_data(5).unwrap().schema;
        let arch = if minmax { Architecture::MeritMinmax } else { Architecture::Merit };
        let model = randomized_model(small_spec(arch, schema), seed, scale).unwrap();
        let stats = monotonicity_sweep(&model, 40, seed).unwrap();
        prop_assert_eq!(stats.violations, 0, "worst drop {}", stats.worst_drop);
    }
}
