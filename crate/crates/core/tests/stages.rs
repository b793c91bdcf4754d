mod common;

use std::sync::Arc;

use sqlvote::corpus::{export_report, ReportFilter, ReportKind, RunStore};
use sqlvote::pipeline::{run_stage, StageConfig, StageId};
use sqlvote::{Expert, VoteStrategy};

fn gold_expert(bench: &sqlvote::corpus::BenchmarkSet, name: &str) -> Arc<dyn Expert> {
    let gold = common::gold_map(bench);
    common::question_expert(name, move |q, _| gold[q].clone())
}

#[test]
fn every_stage_scores_gold_experts_perfectly() {
    let work = tempfile::tempdir().unwrap();
    let bench = common::spider_bench(work.path(), 10);
    let experts = vec![gold_expert(&bench, "a"), gold_expert(&bench, "b")];
    for stage in StageId::ALL {
        let path = work.path().join(format!("{}.jsonl", stage.name()));
        let mut store = RunStore::open(&path).unwrap();
        let summary = run_stage(&StageConfig::new(stage), &bench, &experts, &mut store).unwrap();
        assert_eq!(summary.items, 10);
        assert_eq!(summary.failed_items, 0, "{}", stage.name());
        for s in VoteStrategy::ALL {
            assert_eq!(summary.accuracy(s), 1.0, "{} {s:?}", stage.name());
        }
        let records = store.records().unwrap();
        assert_eq!(records.len(), 10);
        assert!(records.iter().all(|r| r.stage == stage.name()));
    }
}

#[test]
fn refinement_stage_repairs_broken_first_drafts() {
    let work = tempfile::tempdir().unwrap();
    let bench = common::spider_bench(work.path(), 8);
    let gold = common::gold_map(&bench);
    let repairer = common::question_expert("repairer", move |q, refining| {
        if refining {
            gold[q].clone()
        } else {
            "SELECT * FROM no_such_table".into()
        }
    });
    let mut s1 = RunStore::open(&work.path().join("s1.jsonl")).unwrap();
    let before = run_stage(
        &StageConfig::new(StageId::S1),
        &bench,
        std::slice::from_ref(&repairer),
        &mut s1,
    )
    .unwrap();
    let mut s3 = RunStore::open(&work.path().join("s3.jsonl")).unwrap();
    let after = run_stage(&StageConfig::new(StageId::S3), &bench, &[repairer], &mut s3).unwrap();
    assert_eq!(before.accuracy(VoteStrategy::Wma), 0.0);
    assert_eq!(after.accuracy(VoteStrategy::Wma), 1.0);
}

#[test]
fn reports_render_for_every_kind() {
    let work = tempfile::tempdir().unwrap();
    let bench = common::spider_bench(work.path(), 5);
    let experts = vec![
        gold_expert(&bench, "good"),
        common::question_expert("bad", |_, _| "SELECT 0".into()),
    ];
    let path = work.path().join("run.jsonl");
    let mut store = RunStore::open(&path).unwrap();
    run_stage(
        &StageConfig::new(StageId::S6Wma),
        &bench,
        &experts,
        &mut store,
    )
    .unwrap();
    let records = RunStore::read(&path).unwrap();
    for kind in [
        ReportKind::AccuracyTable,
        ReportKind::WeightTrajectory,
        ReportKind::RegretSeries,
    ] {
        let text = export_report(&records, kind, &ReportFilter::default()).unwrap();
        assert!(text.lines().count() > 1, "{kind}");
    }
}

#[test]
fn identical_runs_share_a_run_id() {
    let work = tempfile::tempdir().unwrap();
    let bench = common::spider_bench(work.path(), 3);
    let experts = vec![gold_expert(&bench, "a")];
    let cfg = StageConfig::new(StageId::S2);
    let a = run_stage(
        &cfg,
        &bench,
        &experts,
        &mut RunStore::open(&work.path().join("a.jsonl")).unwrap(),
    )
    .unwrap();
    let b = run_stage(
        &cfg,
        &bench,
        &experts,
        &mut RunStore::open(&work.path().join("b.jsonl")).unwrap(),
    )
    .unwrap();
    assert_eq!(a.run_id, b.run_id);
}
