use proptest::prelude::*;

use specdec::codebook::{brute_force_neighbors, build_neighbor_index, synthesize_codebook, NeighborIndex, ProximityMeasureKind};
use specdec::decoding::{decode, verify_lantern_greedy, DecodeConfig, DecodeMode, DraftChain};
use specdec::metrics::{mean_accepted_length, set_size_profile};
use specdec::models::TableModel;
use specdec::oracle::{enumerate_lantern_step, enumerate_vanilla_step};
use specdec::prob::{
    apply_temperature, jsd, normalize, residual_plus, rng_from_seed, sample, truncate_top_k_p, tvd, ProbDist, TokenId,
};
use specdec::proximity::{build_proximity_set, distort_target, DivergenceBound};

fn dist(v: usize) -> impl Strategy<Value = ProbDist> {
    prop::collection::vec(0.0f64..1.0, v).prop_map(|raw| {
        let raw: Vec<f64> = raw.into_iter().map(|x| x * x + 1e-4).collect();
        normalize(&raw).unwrap()
    })
}

fn pair(max_v: usize) -> impl Strategy<Value = (ProbDist, ProbDist)> {
    (2..=max_v).prop_flat_map(|v| (dist(v), dist(v)))
}

fn triple(max_v: usize) -> impl Strategy<Value = (ProbDist, ProbDist, ProbDist)> {
    (2..=max_v).prop_flat_map(|v| (dist(v), dist(v), dist(v)))
}

fn index(v: usize, k: usize, seed: u64) -> NeighborIndex {
    build_neighbor_index(&synthesize_codebook(v, 2, seed, false), k, ProximityMeasureKind::L2).unwrap()
}

/// q, p, an index over V tokens, a candidate, and a TVD budget.
fn lantern_case() -> impl Strategy<Value = (ProbDist, ProbDist, NeighborIndex, TokenId, f64)> {
    (2usize..=12)
        .prop_flat_map(|v| (dist(v), dist(v), 1..=v, 0..v, any::<u64>(), 0.001f64..1.0))
        .prop_map(|(q, p, k, x, seed, delta)| {
            let v = q.vocab_size();
            (q, p, index(v, k, seed), TokenId::from(x), delta)
        })
}

proptest! {
    #[test]
    fn tvd_is_a_bounded_metric((a, b, c) in triple(10)) {
        let ab = tvd(&a, &b).unwrap();
        prop_assert_eq!(ab, tvd(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!(ab <= tvd(&a, &c).unwrap() + tvd(&c, &b).unwrap() + 1e-12);
        prop_assert_eq!(tvd(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn jsd_is_symmetric_and_bounded((a, b) in pair(10)) {
        let ab = jsd(&a, &b).unwrap();
        prop_assert!((ab - jsd(&b, &a).unwrap()).abs() < 1e-15);
        prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&ab));
    }

    #[test]
    fn residual_vanishes_where_target_is_covered((q, p) in pair(10)) {
        if let Ok(r) = residual_plus(&q, &p) {
            for i in 0..q.vocab_size() {
                let t = TokenId::from(i);
                if q.get(t) <= p.get(t) {
                    prop_assert_eq!(r.get(t), 0.0);
                }
            }
            prop_assert!((r.total() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn neutral_adjustments_are_identities(d in (2usize..12).prop_flat_map(dist)) {
        prop_assert_eq!(&apply_temperature(&d, 1.0), &d);
        prop_assert_eq!(&truncate_top_k_p(&d, d.vocab_size(), 1.0), &d);
    }

    #[test]
    fn truncation_keeps_the_top_ranked(d in (2usize..12).prop_flat_map(dist), k in 1usize..12, top_p in 0.01f64..=1.0) {
        let k = k.min(d.vocab_size());
        let t = truncate_top_k_p(&d, k, top_p);
        let kept = t.mass().iter().filter(|&&m| m > 0.0).count();
        prop_assert!(kept >= 1 && kept <= k);
        prop_assert_eq!(t.argmax(), d.argmax());
    }

    #[test]
    fn sampling_is_a_pure_function_of_the_seed(d in (2usize..12).prop_flat_map(dist), seed in any::<u64>()) {
        let a = sample(&d, &mut rng_from_seed(seed));
        let b = sample(&d, &mut rng_from_seed(seed));
        prop_assert_eq!(a, b);
        prop_assert!(d.get(a) > 0.0);
    }

    #[test]
    fn knn_matches_brute_force_and_nests(v in 2usize..40, d in 1usize..6, seed in any::<u64>(), k in 1usize..40) {
        let k = k.min(v);
        let cb = synthesize_codebook(v, d, seed, false);
        for m in [ProximityMeasureKind::L2, ProximityMeasureKind::Cosine, ProximityMeasureKind::Random { seed }] {
            let small = build_neighbor_index(&cb, k, m).unwrap();
            let full = build_neighbor_index(&cb, v, m).unwrap();
            let brute = brute_force_neighbors(&cb, k, m).unwrap();
            for (t, want) in brute.iter().enumerate() {
                let t_id = TokenId::from(t);
                prop_assert_eq!(small.neighbors(t_id), want.as_slice());
                prop_assert_eq!(small.neighbors(t_id), &full.neighbors(t_id)[..k]);
                prop_assert_eq!(small.neighbors(t_id)[0], t_id);
            }
        }
    }

    #[test]
    fn tvd_sets_follow_the_closed_form((q, _p, idx, x, delta) in lantern_case()) {
        let s = build_proximity_set(&q, x, &idx, DivergenceBound::tvd(delta).unwrap());
        prop_assert_eq!(s.members[0], x);
        let closed: f64 = s.members[1..].iter().map(|&m| q.get(m)).sum();
        prop_assert!((s.realized_divergence - closed).abs() < 1e-12);
        prop_assert!(s.realized_divergence < delta);
        let d = distort_target(&q, &s).unwrap().dist;
        prop_assert!((tvd(&d, &q).unwrap() - s.realized_divergence).abs() < 1e-12);
        // the scan stops at the first neighbour that would overflow
        if let Some(&next) = idx.neighbors(x).get(s.len()) {
            prop_assert!(s.realized_divergence + q.get(next) >= delta);
        }
    }

    #[test]
    fn sets_grow_with_delta_and_k((q, _p, idx, x, delta) in lantern_case(), grow in 0.0f64..0.5) {
        let v = q.vocab_size();
        let small = build_proximity_set(&q, x, &idx, DivergenceBound::tvd(delta).unwrap());
        let wide = build_proximity_set(&q, x, &idx, DivergenceBound::tvd((delta + grow).min(1.0)).unwrap());
        prop_assert!(wide.members.starts_with(&small.members));
        // a longer neighbour list over the same ordering
        let k = idx.k();
        let cb_lists: Vec<Vec<TokenId>> = (0..v).map(|t| idx.neighbors(TokenId::from(t)).to_vec()).collect();
        if k > 1 {
            let shorter = NeighborIndex::from_lists(cb_lists.iter().map(|l| l[..k - 1].to_vec()).collect()).unwrap();
            let s = build_proximity_set(&q, x, &shorter, DivergenceBound::tvd(delta).unwrap());
            prop_assert!(small.members.starts_with(&s.members));
        }
    }

    #[test]
    fn relaxed_acceptance_dominates_vanilla((q, p, idx, x, delta) in lantern_case()) {
        let s = build_proximity_set(&q, x, &idx, DivergenceBound::tvd(delta).unwrap());
        let relaxed = (s.aggregated_mass / p.get(x)).min(1.0);
        let vanilla = (q.get(x) / p.get(x)).min(1.0);
        prop_assert!(relaxed >= vanilla);
        if s.len() == 1 {
            prop_assert_eq!(relaxed, vanilla);
        }
    }

    #[test]
    fn vanilla_enumeration_is_lossless((q, p) in pair(8)) {
        let law = enumerate_vanilla_step(&q, &p).unwrap();
        prop_assert!(tvd(&law.law, &q).unwrap() < 1e-9);
    }

    #[test]
    fn lantern_laws_mix_and_respect_the_bound((q, p, idx, _x, delta) in lantern_case()) {
        let bound = DivergenceBound::tvd(delta).unwrap();
        let law = enumerate_lantern_step(&q, &p, &idx, bound).unwrap();
        let v = q.vocab_size();
        let mut mixed = vec![0.0; v];
        for (x, c) in law.conditional_laws.iter().enumerate() {
            for (m, &c) in mixed.iter_mut().zip(c.as_ref().unwrap().mass()) {
                *m += p.mass()[x] * c;
            }
        }
        for (a, b) in mixed.iter().zip(law.law.mass()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for (x, c) in law.candidate_laws.iter().enumerate() {
            let s = build_proximity_set(&q, TokenId::from(x), &idx, bound);
            let want = distort_target(&q, &s).unwrap().dist;
            prop_assert!(tvd(c.as_ref().unwrap(), &want).unwrap() < 1e-12);
        }
        prop_assert!(tvd(&law.candidate_mixture, &q).unwrap() < delta);
    }

    #[test]
    fn greedy_accepts_exactly_the_distorted_argmax((q, _p, idx, x, delta) in lantern_case()) {
        let v = q.vocab_size();
        let bound = DivergenceBound::tvd(delta).unwrap();
        let mut cfg = DecodeConfig::new(DecodeMode::Lantern, 1, idx.k(), bound, v);
        cfg.tau = 0.0;
        let chain = DraftChain { tokens: vec![x], dists: vec![ProbDist::one_hot(v, x)] };
        let s = verify_lantern_greedy(&TableModel::context_free(q.clone()), &[], &chain, &idx, &cfg).unwrap();
        let best = distort_target(&q, &build_proximity_set(&q, x, &idx, bound)).unwrap().dist.argmax();
        prop_assert_eq!(s.accepted_count == 1, best == x);
    }

    #[test]
    fn step_accounting_holds(
        (q, p) in pair(6),
        gamma in 1usize..5,
        len in 1usize..20,
        seed in any::<u64>(),
        lantern in any::<bool>(),
    ) {
        let v = q.vocab_size();
        let mode = if lantern { DecodeMode::Lantern } else { DecodeMode::Vanilla };
        let idx = index(v, v, seed);
        let mut cfg = DecodeConfig::new(mode, gamma, v, DivergenceBound::tvd(0.2).unwrap(), v);
        cfg.min_target_len = len;
        let tr = decode(&TableModel::context_free(q), &TableModel::context_free(p), &[], &cfg, Some(&idx), seed).unwrap();
        prop_assert!(tr.generated().len() >= len);
        let emitted: usize = tr.steps.iter().map(|s| s.emitted().len()).sum();
        prop_assert_eq!(emitted, tr.generated().len());
        for s in &tr.steps {
            prop_assert_eq!(s.emitted().len(), s.accepted_count + 1);
            prop_assert_eq!(s.resampled.is_some(), s.accepted_count < gamma);
            prop_assert_eq!(s.bonus.is_some(), s.accepted_count == gamma);
        }
        let mal = mean_accepted_length(&[tr]).unwrap();
        prop_assert!((1.0..=(gamma + 1) as f64).contains(&mal));
    }
}

#[test]
fn uniform_sets_have_the_expected_size() {
    let q = ProbDist::uniform(10);
    let idx = index(10, 10, 4);
    let s = build_proximity_set(&q, TokenId(3), &idx, DivergenceBound::tvd(0.35).unwrap());
    assert_eq!(s.len(), 4);
}

#[test]
fn set_profile_at_the_first_position_grows_with_delta() {
    let mut rng = rng_from_seed(3);
    let v = 12;
    let q = specdec::oracle::random_dist(v, &mut rng);
    let p = specdec::oracle::random_dist(v, &mut rng);
    let (q, p) = (TableModel::context_free(q), TableModel::context_free(p));
    let idx = index(v, v, 3);
    let first = |delta: f64| {
        let mut cfg = DecodeConfig::new(DecodeMode::Lantern, 3, v, DivergenceBound::tvd(delta).unwrap(), v);
        cfg.min_target_len = 1;
        let traces: Vec<_> = (0..200).map(|s| decode(&q, &p, &[], &cfg, Some(&idx), s).unwrap()).collect();
        set_size_profile(&traces).unwrap()[0]
    };
    let profile: Vec<f64> = [1e-12, 0.05, 0.1, 0.2, 0.4].iter().map(|&d| first(d)).collect();
    assert_eq!(profile[0], 1.0);
    assert!(profile.windows(2).all(|w| w[0] <= w[1]), "{profile:?}");
}
