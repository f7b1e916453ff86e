//! Invariants over random inputs.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use srl_adapt::annotations::{EventAnnotation, RolePair};
use srl_adapt::encoders::EmbeddingMatrix;
use srl_adapt::evaluation::{retrieval_metrics, retrieval_metrics_with};
use srl_adapt::losses::{symmetric_info_nce, LogitScale};
use srl_adapt::negatives::{make_role_noun_negatives, make_verb_role_negatives, noun_pool, VerbFrame};
use srl_adapt::numerics::{Graph, Tensor};
use srl_adapt::prompting::{parse_prompt, render_event_prompt_with, TemplateStyle};

const KS: [usize; 4] = [1, 2, 5, 10];

fn sim_matrix(max_n: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1..=max_n).prop_flat_map(|n| (Just(n), prop::collection::vec(-1.0f64..1.0, n * n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranks_survive_monotone_transforms((n, sim) in sim_matrix(12)) {
        let a = retrieval_metrics(&tensor(&[n, n], sim.clone()), &KS).unwrap();
        let warped: Vec<f64> = sim.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
        let b = retrieval_metrics(&tensor(&[n, n], warped), &KS).unwrap();
        prop_assert_eq!(a.ranks, b.ranks);
    }

    #[test]
    fn ranks_follow_gallery_permutation(
        (n, sim, perm) in sim_matrix(12).prop_flat_map(|(n, sim)| {
            (Just(n), Just(sim), Just((0..n).collect::<Vec<usize>>()).prop_shuffle())
        })
    ) {
        // Only ties depend on gallery order.
        for row in sim.chunks(n) {
            let mut sorted = row.to_vec();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
        }
        let mut moved = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                moved[i * n + perm[j]] = sim[i * n + j];
            }
        }
        let a = retrieval_metrics(&tensor(&[n, n], sim), &KS).unwrap();
        let b = retrieval_metrics_with(&tensor(&[n, n], moved), &perm, &KS).unwrap();
        prop_assert_eq!(a.ranks, b.ranks);
    }

    #[test]
    fn metric_bounds((n, sim) in sim_matrix(12)) {
        let m = retrieval_metrics(&tensor(&[n, n], sim), &KS).unwrap();
        prop_assert!(m.ranks.iter().all(|&r| r >= 1 && r <= n));
        let mut last = 0.0;
        for k in KS {
            let r = m.recall_at(k).unwrap();
            prop_assert!((0.0..=100.0).contains(&r) && r >= last);
            last = r;
        }
        if n <= 10 {
            prop_assert_eq!(m.recall_at(10), Some(100.0));
        }
        prop_assert!(m.mean_rank >= 1.0 && m.mean_rank <= n as f64);
        prop_assert!(m.median_rank >= 1.0 && m.median_rank <= n as f64);
    }

    #[test]
    fn symmetric_loss_is_symmetric(seed in any::<u64>(), n in 1usize..6, s in 0.5f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Rows = (0..n).map(|_| unit_vec(&mut rng, 6)).collect();
        let k: Rows = (0..n).map(|_| unit_vec(&mut rng, 6)).collect();
        let mut g = Graph::<f64>::new();
        let qv = g.constant(tensor(&[n, 6], flat(&q)));
        let kv = g.constant(tensor(&[n, 6], flat(&k)));
        let sc = LogitScale::Fixed(s);
        let ab = symmetric_info_nce(&mut g, qv, kv, None, false, &sc).unwrap();
        let ba = symmetric_info_nce(&mut g, kv, qv, None, false, &sc).unwrap();
        let (ab, ba) = (g.scalar(ab), g.scalar(ba));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab >= 0.0);
        let want = symmetric_nce(&q, &k, &vec![Vec::new(); n], false, s);
        prop_assert!((ab - want).abs() < 1e-9);
    }

    #[test]
    fn perfect_alignment_approaches_zero(n in 2usize..6, s in 5.0f64..100.0) {
        // Orthonormal, perfectly paired rows: each term is ln(1 + (n-1)e^{-s}).
        let rows: Rows = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let mut g = Graph::<f64>::new();
        let a = g.constant(tensor(&[n, n], flat(&rows)));
        let loss = symmetric_info_nce(&mut g, a, a, None, false, &LogitScale::Fixed(s)).unwrap();
        let floor = 2.0 * (1.0 + (n as f64 - 1.0) * (-s).exp()).ln();
        prop_assert!((g.scalar(loss) - floor).abs() < 1e-12);
    }

    #[test]
    fn embedding_file_round_trip(rows in 0usize..6, dim in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = Tensor::<f32>::randn(vec![rows * dim], 1.0, &mut rng).into_data();
        let ids: Vec<String> = (0..rows).map(|i| format!("clip_{i}")).collect();
        let m = EmbeddingMatrix::new(dim, data, ids.clone()).unwrap();
        let back = EmbeddingMatrix::from_bytes(&m.to_bytes(), ids).unwrap();
        prop_assert_eq!(&back, &m);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.fgemb");
        m.save(&path).unwrap();
        prop_assert_eq!(EmbeddingMatrix::load(&path).unwrap(), m);
    }
}

fn noun() -> impl Strategy<Value = String> {
    // Nouns may contain the connectives the grammar uses.
    prop_oneof![
        "[a-z]{1,8}( [a-z]{1,8}){0,3}",
        Just("man is tall".to_string()),
        Just("rock, paper and scissors".to_string()),
        Just("the end of the event is near".to_string()),
    ]
}

fn arb_event() -> impl Strategy<Value = EventAnnotation> {
    let roles = prop::sample::subsequence(vec!["agent", "patient", "thing hit", "direction", "manner", "scene"], 1..=5);
    ("[a-z]{3,8}", roles)
        .prop_flat_map(|(verb, roles)| {
            let n = roles.len();
            (Just(verb), Just(roles), prop::collection::vec(noun(), n))
        })
        .prop_map(|(verb, roles, nouns)| {
            let pairs: Vec<(&str, &str)> = roles.iter().copied().zip(nouns.iter().map(String::as_str)).collect();
            event("e", &verb, &pairs)
        })
}

const KNOWN: [&str; 6] = ["agent", "patient", "thing hit", "direction", "manner", "scene"];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn prompts_parse_back_to_their_annotation(e in arb_event(), listed in any::<bool>()) {
        let style = if listed { TemplateStyle::Listed } else { TemplateStyle::Enumerated };
        let text = render_event_prompt_with(&e, style).unwrap().text;
        let (verb, roles) = parse_prompt(&text, style, &KNOWN).expect("parses");
        prop_assert_eq!(verb, e.verb.clone());
        prop_assert_eq!(roles, e.roles.clone());
    }

    #[test]
    fn distinct_annotations_render_distinct_prompts(a in arb_event(), b in arb_event()) {
        let ra = render_event_prompt_with(&a, TemplateStyle::Enumerated).unwrap().text;
        let rb = render_event_prompt_with(&b, TemplateStyle::Enumerated).unwrap().text;
        prop_assert_eq!(ra == rb, a.verb == b.verb && a.roles == b.roles);
    }

    #[test]
    fn negatives_are_deterministic_and_never_positive(e in arb_event(), other in arb_event(), seed in any::<u64>()) {
        let style = TemplateStyle::Enumerated;
        let positive = render_event_prompt_with(&e, style).unwrap().text;
        let frames = vec![
            VerbFrame { verb: e.verb.clone(), roles: e.role_names().map(str::to_string).collect() },
            VerbFrame { verb: format!("{}x", e.verb), roles: vec!["doer".into(), "scene".into()] },
        ];
        let a = make_verb_role_negatives(&e, &frames, 3, seed, style).unwrap();
        prop_assert_eq!(&a, &make_verb_role_negatives(&e, &frames, 3, seed, style).unwrap());
        prop_assert!(a.iter().all(|r| r.text != positive));

        let pool = noun_pool([&e, &other]);
        if let Ok(rn) = make_role_noun_negatives(&e, &pool, 3, 0.5, seed, style) {
            prop_assert_eq!(&rn, &make_role_noun_negatives(&e, &pool, 3, 0.5, seed, style).unwrap());
            prop_assert!(rn.iter().all(|r| r.text != positive));
        }
    }
}

#[test]
fn role_names_are_normalised() {
    assert_eq!(RolePair::new("  Thing Hit ", "x").role_name, "thing hit");
}
