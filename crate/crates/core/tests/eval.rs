mod common;

use kbsearch_core::eval::*;
use kbsearch_core::factory::Split;
use kbsearch_core::gateway::{ScriptedBackend, ScriptedRule};
use kbsearch_core::protocol::{render_evidence, ActionKind, EvidenceItem, TurnRecord};
use kbsearch_core::runtime::{RolloutConfig, Termination, Trajectory};
use kbsearch_core::synth::{
    ambiguous_query_rules, evidence_policy_rules, qa_sample, synthetic_world,
};
use proptest::prelude::*;

fn g(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

#[test]
fn score_examples() {
    assert!(score_answer("Congridae", &g(&["Congridae"]), ScoreMetric::Em, None).unwrap());
    assert!(!score_answer("the congridae", &g(&["Congridae"]), ScoreMetric::Em, None).unwrap());
    assert!(!score_answer("", &g(&["Congridae"]), ScoreMetric::Em, None).unwrap());
    assert!(!score_answer("congridae", &g(&["Congridae"]), ScoreMetric::RawEm, None).unwrap());
    let junk = ScriptedBackend::new(vec![ScriptedRule::at_turn(0, "unsure")]);
    assert!(matches!(
        score_answer("x", &g(&["y"]), ScoreMetric::Judge, Some(&junk)),
        Err(EvalError::Unscored(_))
    ));
}

fn item(article: &str) -> EvidenceItem {
    EvidenceItem {
        article_id: article.into(),
        section_id: Some("s0".into()),
        article_title: article.into(),
        section_heading: "Overview".into(),
        text: "text".into(),
        score: 0.1,
        rank: 1,
    }
}

fn traj(id: &str, searches: &[&[&str]], answer: &str) -> Trajectory {
    let mut turns = Vec::new();
    let mut observations = Vec::new();
    for (i, hits) in searches.iter().enumerate() {
        turns.push(TurnRecord::new("look", None, ActionKind::TextSearch, "q"));
        observations.push(render_evidence(hits.iter().map(|a| item(a)).collect(), i));
    }
    turns.push(TurnRecord::new("done", None, ActionKind::Answer, answer));
    Trajectory {
        task_id: id.into(),
        image_ref: "img://x".into(),
        question: "q?".into(),
        final_answer: Some(answer.into()),
        turns,
        observations,
        terminated_by: Termination::Answer,
        config: RolloutConfig::default().snapshot(),
        rejected_turns: Vec::new(),
        context_chars: 0,
    }
}

#[test]
fn hit_examples() {
    assert_eq!(
        hit_at_any_turn(&traj("t", &[&["b"], &["c", "gold"]], "x"), "gold"),
        Some(true)
    );
    assert_eq!(hit_at_any_turn(&traj("t", &[], "x"), "gold"), None);
    assert_eq!(
        hit_at_any_turn(&traj("t", &[&["b"], &["c"]], "x"), "gold"),
        Some(false)
    );
}

fn r1(s: f64) -> String {
    format!("{s:.1}")
}

#[test]
fn type_breakdown_fixture_reproduces() {
    let rep = aggregate(&common::type_breakdown_records()).unwrap();
    for (label, share, recall, acc) in common::TYPE_BREAKDOWN {
        let row = rep.type_row(label).unwrap();
        assert_eq!(r1(row.proportion), r1(share), "{label}");
        assert_eq!(row.recall.map(r1), recall.map(r1), "{label}");
        assert_eq!(r1(row.accuracy), r1(acc), "{label}");
    }
    let labels: Vec<&str> = rep
        .per_type
        .iter()
        .map(|r| r.trajectory_type.as_str())
        .collect();
    assert_eq!(labels, ["A", "I→A", "T→A", "I→T→A", "T→T→A"]);
    let text = rep.render_text();
    assert!(text.contains("I→T→A") && text.contains("55.2") && text.contains("–"));
    assert!(rep.render_csv().contains("type,T→T→A,17100,17.1,70.3,41.1"));
}

#[test]
fn contingency_fixture_reproduces() {
    let rep = aggregate(&common::contingency_records()).unwrap();
    let (hc, hw) = rep.contingency.hit_row().unwrap();
    let (mc, mw) = rep.contingency.miss_row().unwrap();
    assert_eq!(
        [r1(hc), r1(hw), r1(mc), r1(mw)],
        ["70.4", "29.6", "11.4", "88.6"]
    );
}

#[test]
fn single_record() {
    let rec = EvalRecord {
        sample_id: "s".into(),
        trajectory_type: "T→A".into(),
        answer_correct: true,
        retrieval_hit: Some(true),
        n_tool_calls: 1,
        split_tags: vec!["test".into(), "unseen_e".into()],
    };
    let rep = aggregate(&[rec]).unwrap();
    assert_eq!(rep.overall_accuracy, 100.0);
    assert_eq!(rep.retrieval_recall, Some(100.0));
    assert_eq!(rep.per_split.len(), 2);
    assert!(matches!(aggregate(&[]), Err(EvalError::Empty)));
}

#[test]
fn records_from_trajectories() {
    let w = synthetic_world(3, 1);
    let mut samples: Vec<_> = w
        .facts
        .iter()
        .enumerate()
        .map(|(i, f)| qa_sample(&format!("q{i}"), f, Split::Test))
        .collect();
    samples[1].tags = vec!["unseen_q".into()];
    let trajs = vec![
        traj("q2", &[], ""),
        traj("q1", &[&["a00001"]], &w.facts[1].elevation()),
        traj("q0", &[&["a00002"]], "wrong"),
    ];
    let set = build_records(&trajs, &samples, ScoreMetric::Em, None, 2).unwrap();
    let ids: Vec<&str> = set.records.iter().map(|r| r.sample_id.as_str()).collect();
    assert_eq!(ids, ["q0", "q1", "q2"]);
    assert_eq!(set.empty_predictions, 1);
    assert_eq!(set.records[1].split_tags, ["test", "unseen_q"]);
    assert_eq!(set.records[1].retrieval_hit, Some(true));
    assert_eq!(set.records[0].retrieval_hit, Some(false));
    assert_eq!(set.records[2].retrieval_hit, None);
    assert!(build_records(&[traj("zz", &[], "x")], &samples, ScoreMetric::Em, None, 1).is_err());
}

fn arb_record() -> impl Strategy<Value = EvalRecord> {
    (
        0usize..6,
        any::<bool>(),
        any::<bool>(),
        0usize..4,
        "[a-z]{1,6}",
    )
        .prop_map(|(t, c, h, tag, id)| {
            let label = ["A", "I→A", "T→A", "I→T→A", "T→T→A", "T→T→T→T"][t];
            let n = label.matches('→').count() + usize::from(t == 5);
            EvalRecord {
                sample_id: id,
                trajectory_type: label.into(),
                answer_correct: c,
                retrieval_hit: (n > 0).then_some(h),
                n_tool_calls: n,
                split_tags: ["test", "unseen_q", "unseen_e", "val"][..=tag]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            }
        })
}

proptest! {
    #[test]
    fn aggregate_is_permutation_invariant(recs in prop::collection::vec(arb_record(), 1..60), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = recs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(aggregate(&recs).unwrap(), aggregate(&shuffled).unwrap());
    }

    #[test]
    fn report_invariants(recs in prop::collection::vec(arb_record(), 1..60)) {
        let rep = aggregate(&recs).unwrap();
        let share: f64 = rep.per_type.iter().map(|r| r.proportion).sum();
        prop_assert!((share - 100.0).abs() <= 0.1);
        for row in [rep.contingency.hit_row(), rep.contingency.miss_row()].into_iter().flatten() {
            prop_assert!((row.0 + row.1 - 100.0).abs() <= 0.1);
        }
        let with_tools = recs.iter().filter(|r| r.retrieval_hit.is_some()).count();
        prop_assert_eq!(rep.contingency.total(), with_tools);
        let json = serde_json::to_string(&recs).unwrap();
        let back: Vec<EvalRecord> = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(aggregate(&back).unwrap(), rep);
    }
}

#[test]
fn topk_grid_cells() {
    let w = synthetic_world(40, 5);
    let samples: Vec<_> = w.facts[..10]
        .iter()
        .enumerate()
        .map(|(i, f)| qa_sample(&format!("q{i:02}"), f, Split::Test))
        .collect();
    let backend = ScriptedBackend::new(evidence_policy_rules(&w.facts[..10]));
    let tools = common::tools(&w.corpus);
    let base = RolloutConfig::default();
    let settings = EvalSettings {
        metric: ScoreMetric::Em,
        threads: 2,
    };
    let grid = run_topk_grid(
        &samples,
        &backend,
        &tools,
        &base,
        &[1, 3, 5],
        &[1, 2, 3],
        settings,
    )
    .unwrap();
    assert_eq!(grid.cells.len(), 9);
    let again = run_topk_grid(&samples, &backend, &tools, &base, &[3], &[2], settings).unwrap();
    assert_eq!(again.cells[0], *grid.cell(3, 2).unwrap());
    let plain = evaluate(
        &samples,
        &backend,
        &tools,
        &RolloutConfig {
            k_text: 3,
            k_image: 2,
            ..base.clone()
        },
        settings,
        None,
    )
    .unwrap();
    assert_eq!(again.cells[0].report.as_ref(), Some(&plain.report));
    let bad = run_topk_grid(&samples, &backend, &tools, &base, &[0, 1], &[1], settings).unwrap();
    assert!(bad.cells[0].error.is_some() && bad.cells[1].report.is_some());
    assert!(run_topk_grid(&samples, &backend, &tools, &base, &[], &[1], settings).is_err());
    let text = grid.render_text();
    assert_eq!(text.lines().count(), 5);
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(write_grid(dir.path(), &grid).unwrap().len(), 12);
}

#[test]
fn kb_scale_sweep() {
    let w = synthetic_world(120, 9);
    let facts = &w.facts[..12];
    let samples: Vec<_> = facts
        .iter()
        .enumerate()
        .map(|(i, f)| qa_sample(&format!("q{i:02}"), f, Split::Test))
        .collect();
    let backend = ScriptedBackend::new(ambiguous_query_rules(facts));
    let (tp, ip) = common::providers();
    let cfg = RolloutConfig::default();
    let settings = EvalSettings::default();
    let series = run_kb_scale(
        &samples,
        &w.corpus,
        &[30, 30, 60, 120],
        4,
        &backend,
        tp.clone(),
        ip.clone(),
        &cfg,
        settings,
    )
    .unwrap();
    assert_eq!(series.points[0], series.points[1]);
    let recalls: Vec<f64> = series
        .points
        .iter()
        .map(|p| p.report.as_ref().unwrap().retrieval_recall.unwrap())
        .collect();
    assert!(recalls.windows(2).all(|w| w[1] <= w[0]), "{recalls:?}");
    let full = evaluate(
        &samples,
        &backend,
        &common::tools(&w.corpus),
        &cfg,
        settings,
        None,
    )
    .unwrap();
    assert_eq!(series.points[3].report.as_ref(), Some(&full.report));
    let over = run_kb_scale(
        &samples,
        &w.corpus,
        &[500],
        4,
        &backend,
        tp,
        ip,
        &cfg,
        settings,
    )
    .unwrap();
    assert!(over.points[0].error.is_some());
}
