use dialforge::dialogue::{proxy_score, Dialogue, Speaker, Turn};
use dialforge::gateway::MockBackend;
use dialforge::graph::{init_graph, mutate, spawn_offspring, GraphConfig, LeafId, MetricContext, MetricGraph, MutationKind, Strategy as Offspring, StrategyWeights};
use dialforge::metrics::{cosine_similarity, distinct_n, tfidf_similarity, turn_stats};
use dialforge::refinery::{ReasoningTask, TaskKind};
use dialforge::reports::similarity_from_embeddings;
use dialforge::store::{self, Decision, Store, StoreError, VerificationItem};
use proptest::prelude::*;

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["hotel", "taxi", "meal", "cap", "per", "night", "receipt"]), 0..16)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, dim).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

proptest! {
    #[test]
    fn distinct_one_ignores_order(tokens in words(), seed in any::<u64>()) {
        let mut shuffled = tokens.clone();
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(distinct_n(&tokens, 1).unwrap(), distinct_n(&shuffled, 1).unwrap());
    }

    #[test]
    fn distinct_bounds(tokens in words(), n in 1usize..4) {
        let d = distinct_n(&tokens, n).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        let grams: Vec<_> = tokens.windows(n).collect();
        let unique = grams.iter().collect::<std::collections::HashSet<_>>().len() == grams.len();
        prop_assert_eq!(d == 1.0, unique);
    }

    #[test]
    fn cosine_symmetric_and_scale_free(a in vector(5), b in vector(5), k in 0.01f64..100.0) {
        let ab = cosine_similarity(&a, &b).unwrap();
        prop_assert!((ab - cosine_similarity(&b, &a).unwrap()).abs() <= 1e-12);
        let scaled: Vec<f64> = a.iter().map(|x| x * k).collect();
        prop_assert!((ab - cosine_similarity(&scaled, &b).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn tfidf_self_similarity_is_one(corpus in prop::collection::vec(words().prop_filter("non-empty", |w| !w.is_empty()), 1..6)) {
        for i in 0..corpus.len() {
            prop_assert!((tfidf_similarity(&corpus, i, i).unwrap() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn stats_turn_totals_add(a in prop::collection::vec(prop::collection::vec("[a-z]{1,5}( [a-z]{1,5}){0,3}", 1..4), 1..4),
                             b in prop::collection::vec(prop::collection::vec("[a-z]{1,5}( [a-z]{1,5}){0,3}", 1..4), 1..4)) {
        let both: Vec<Vec<String>> = a.iter().chain(&b).cloned().collect();
        prop_assert_eq!(turn_stats(&both).unwrap().total_turns, turn_stats(&a).unwrap().total_turns + turn_stats(&b).unwrap().total_turns);
    }

    #[test]
    fn similarity_mean_between_extremes(set in prop::collection::vec(vector(4), 2..8)) {
        let r = similarity_from_embeddings(&set).unwrap();
        prop_assert!(r.min <= r.mean && r.mean <= r.max, "{:?}", r);
        prop_assert_eq!(r.pairs, set.len() * (set.len() - 1) / 2);
    }

    #[test]
    fn graph_text_round_trip(seed in any::<u64>(), steps in 0usize..6) {
        let cfg = GraphConfig::default();
        let mut g = init_graph(&cfg, seed).unwrap();
        for k in 0..steps {
            g = mutate(&g, MutationKind::ALL[k % 3], &cfg, seed.wrapping_add(k as u64)).unwrap().0;
        }
        let parsed: MetricGraph = g.to_string().parse().unwrap();
        prop_assert_eq!(parsed.id(), g.id());
        prop_assert_eq!(parsed.to_string(), g.to_string());
    }

    #[test]
    fn copy_offspring_scores_like_parent(seed in any::<u64>(), values in prop::collection::vec(-5.0f64..5.0, 5)) {
        let cfg = GraphConfig::default();
        let parent = init_graph(&cfg, seed).unwrap();
        let weights = StrategyWeights { copy: 1.0, reinit: 0.0, mutation: 0.0 };
        let (child, strategy) = spawn_offspring(&parent, weights, &cfg, seed).unwrap();
        prop_assert_eq!(strategy, Offspring::Copy);
        let mut ctx = MetricContext::new();
        for (leaf, v) in LeafId::ALL.iter().zip(&values) {
            ctx.insert(*leaf, *v);
        }
        prop_assert_eq!(child.evaluate(&ctx).unwrap().to_bits(), parent.evaluate(&ctx).unwrap().to_bits());
    }

    #[test]
    fn verdict_log_replays_to_same_states(ops in prop::collection::vec((0usize..4, 0u8..3, prop::option::of("[0-9]{1,3}")), 1..12)) {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(dir.path()).unwrap();
        let fresh: Vec<VerificationItem> = (0..4).map(item).collect();
        for it in &fresh {
            s.append(store::QUEUE, it).unwrap();
        }
        let mut log = Vec::new();
        for (idx, d, label) in &ops {
            let decision = [Decision::Accept, Decision::Edit, Decision::Reject][*d as usize];
            match s.verdict(&fresh[*idx].id, decision, label.clone(), None) {
                Ok(_) => log.push((*idx, decision, label.clone())),
                Err(StoreError::Conflict { .. } | StoreError::InvalidVerdict(_)) => {}
                Err(e) => panic!("{e}"),
            }
        }
        let mut replayed = fresh.clone();
        for (idx, decision, label) in &log {
            replayed[*idx].decide(*decision, label.clone(), None).unwrap();
        }
        for (idx, decision, label) in &log {
            prop_assert!(replayed[*idx].clone().decide(*decision, label.clone(), None).is_err(), "second replay is rejected");
        }
        prop_assert_eq!(&s.queue(None).unwrap(), &replayed);
        prop_assert_eq!(Store::open(dir.path()).unwrap().queue(None).unwrap(), replayed);
    }
}

fn item(i: usize) -> VerificationItem {
    let task = ReasoningTask { question: format!("Q{i}?"), label: Some("12".into()), kind: TaskKind::MathWord };
    VerificationItem::new(format!("v-{i}"), format!("r-{i}"), format!("d-{i}"), task)
}

#[test]
fn tfidf_frozen_oracle() {
    let corpus: Vec<Vec<&str>> = vec![vec!["the", "cat", "sat"], vec!["the", "dog", "sat", "down"], vec!["a", "cat", "and", "a", "dog"]];
    let expected = [(0, 1, 0.5309931172334252), (0, 2, 0.1769602917548359), (1, 2, 0.1409470454181551)];
    for (i, j, v) in expected {
        let got = tfidf_similarity(&corpus, i, j).unwrap();
        assert!((got - v).abs() <= 1e-12, "({i},{j}) {got} vs {v}");
        assert!((tfidf_similarity(&corpus, j, i).unwrap() - v).abs() <= 1e-12);
    }
}

#[test]
fn store_ids_unique_and_seq_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let s = Store::open(dir.path()).unwrap();
    for i in 0..5 {
        s.append_value(store::RUNS, serde_json::json!({ "n": i })).unwrap();
    }
    s.append_value(store::RUNS, serde_json::json!({ "id": "runs-2", "n": 99 })).unwrap();
    let history = s.history(store::RUNS).unwrap();
    let seqs: Vec<u64> = history.iter().map(|v| v["seq"].as_u64().unwrap()).collect();
    assert_eq!(seqs, [1, 2, 3, 4, 5, 6]);
    assert!(history.iter().all(|v| v["schema_version"] == store::SCHEMA_VERSION));
    let latest = s.load_values(store::RUNS).unwrap();
    let ids: Vec<&str> = latest.iter().map(|v| v["id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 5);
    assert_eq!(ids.iter().collect::<std::collections::HashSet<_>>().len(), 5);
    assert_eq!(s.get::<serde_json::Value>(store::RUNS, "runs-2").unwrap().unwrap()["n"], 99);
}

fn judged() -> Dialogue {
    Dialogue {
        id: "d".into(),
        scenario: "travel".into(),
        persona_id: "p".into(),
        action_seq_id: "a".into(),
        turns: vec![Turn { speaker: Speaker::User, text: "Is breakfast covered?".into(), index: 1 }],
        dia_len: 1,
        seed: 0,
        terminated_early: false,
    }
}

#[test]
fn proxy_mean_ignores_response_order() {
    let orders = [["5", "2", "4"], ["2", "4", "5"], ["4", "5", "2"]];
    let scores: Vec<_> = orders.iter().map(|o| proxy_score(&MockBackend::sequence("judge", *o), &judged()).unwrap()).collect();
    for s in &scores {
        assert!((s.mean - 11.0 / 3.0).abs() < 1e-12);
        assert!((1.0..=5.0).contains(&s.mean));
    }
    let mut components: Vec<[u8; 3]> = scores.iter().map(|s| [s.coherence, s.fluency, s.diversity]).collect();
    for c in &mut components {
        c.sort();
    }
    assert!(components.iter().all(|c| *c == [2, 4, 5]));
}
