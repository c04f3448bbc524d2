mod common;

use std::collections::BTreeMap;

use ca_core::flow::StepResponse;
use ca_core::pipeline::{
    subset_select, ChangeEvent, ChangeSource, Decision, Pipeline, PipelineConfig, MAIN_BRANCH,
};
use ca_core::tuple::{aligned, diff_tuples, DataScope};
use ca_core::{ArtifactKind, Error, Repository, RunKind, RunStatus, VersionPin};

/// Serialized `main` entry of pins.json, read straight from disk.
fn main_pins_bytes(repo: &Repository) -> Vec<u8> {
    let all: serde_json::Value = serde_json::from_slice(&std::fs::read(repo.root().join("pins.json")).unwrap()).unwrap();
    serde_json::to_vec(&all["main"]).unwrap()
}

fn data_event(repo: &Repository, id: &str, version: &str, n: usize) -> ChangeEvent {
    let bytes = common::dataset(n, version);
    let hash = repo.put_artifact(ArtifactKind::Data, &bytes, "text/plain", BTreeMap::new()).unwrap().hash;
    ChangeEvent::new(id, ChangeSource::Data, "working/x", VersionPin::new("data", version).unwrap().with_content(hash))
}

#[test]
fn data_event_flows_to_release_on_main() {
    let (_d, repo, main_tuple) = common::seeded();
    let pipe = Pipeline::new(&repo, common::pipeline_config());
    let event = data_event(&repo, "evt-1", "x2", 1000);
    let plan = pipe.ingest_event(&event).unwrap();
    assert_eq!(plan.branch, "working/x");
    assert_eq!(plan.data_scope, DataScope::Subset { fraction: 0.1, seed: 0 });
    let changes = diff_tuples(&main_tuple, &plan.tuple);
    assert_eq!(changes.len(), 1);
    assert_eq!(changes[0].component, "data");
    // working branch now tracks the new tuple; main is unchanged
    assert_eq!(pipe.branch_pins("working/x").unwrap().unwrap().pins, plan.tuple);
    assert_eq!(pipe.branch_pins(MAIN_BRANCH).unwrap().unwrap().pins, main_tuple);

    let ex = common::executor(0.91);
    let validation = pipe.run_validation(&plan, &common::four_step_flow(), &ex).unwrap();
    assert_eq!(validation.status, RunStatus::Succeeded);
    assert_eq!(validation.kind, RunKind::Validation);
    assert_eq!(validation.labels["event_id"], "evt-1");
    assert!(pipe.gate_report(&validation).unwrap().pass);

    let req = pipe.approve(&validation.run_id, "alice").unwrap();
    assert_eq!(req.decision, Decision::Approved);

    let release = pipe.run_release(&validation.run_id, &common::four_step_flow(), &ex).unwrap();
    assert_eq!(release.status, RunStatus::Succeeded);
    assert_eq!(release.kind, RunKind::Release);
    assert_eq!(release.data_scope, DataScope::Full);
    assert!(aligned(&validation.tuple, &release.tuple));
    assert_eq!(release.tuple, validation.tuple);

    let main = pipe.branch_pins(MAIN_BRANCH).unwrap().unwrap();
    assert_eq!(main.pins.get("data").unwrap().version, "x2");
    assert_eq!(main.last_release_run.as_ref(), Some(&release.run_id));
    assert_eq!(main.result_refs, release.result_ids);
    assert!(!main.result_refs.is_empty());

    let fv = repo.load_feedback(&validation).unwrap();
    let fr = repo.load_feedback(&release).unwrap();
    assert_eq!(fv.field_set(), fr.field_set());
    // the release saw the full dataset, the validation only a subset
    let manifest_of = |r: &ca_core::RunRecord| {
        r.step_outcomes.iter().find(|o| o.step == "step1").unwrap().inputs["__data_manifest"].artifact
    };
    let full = repo.get_artifact(&manifest_of(&release)).unwrap();
    let sub = repo.get_artifact(&manifest_of(&validation)).unwrap();
    assert_eq!(full, common::dataset(1000, "x2"));
    let sub_lines = sub.split(|b| *b == b'\n').filter(|l| !l.is_empty()).count();
    assert!((60..=140).contains(&sub_lines), "{sub_lines}");

    // a second release of the same approval is refused
    assert!(matches!(
        pipe.run_release(&validation.run_id, &common::four_step_flow(), &ex),
        Err(Error::AlreadyReleased(..))
    ));
}

#[test]
fn gatekeeping_negative_paths_leave_main_untouched() {
    let (_d, repo, _) = common::seeded();
    let pipe = Pipeline::new(&repo, common::pipeline_config());
    let before = main_pins_bytes(&repo);

    // failed validation run
    let plan = pipe.ingest_event(&data_event(&repo, "e-fail", "x3", 200)).unwrap();
    let failing = common::executor(0.95).script("step2", StepResponse::exit(1));
    let failed = pipe.run_validation(&plan, &common::four_step_flow(), &failing).unwrap();
    assert_eq!(failed.status, RunStatus::Failed);
    assert!(matches!(pipe.approve(&failed.run_id, "bob"), Err(Error::RunNotSucceeded(_))));

    // succeeded, but the gate fails
    let plan = pipe.ingest_event(&data_event(&repo, "e-gate", "x4", 200)).unwrap();
    let low = pipe.run_validation(&plan, &common::four_step_flow(), &common::executor(0.85)).unwrap();
    assert_eq!(low.status, RunStatus::Succeeded);
    assert!(matches!(pipe.approve(&low.run_id, "bob"), Err(Error::GateFailed(_))));

    // good run, never approved
    let plan = pipe.ingest_event(&data_event(&repo, "e-good", "x5", 200)).unwrap();
    let good = pipe.run_validation(&plan, &common::four_step_flow(), &common::executor(0.99)).unwrap();
    assert!(matches!(
        pipe.run_release(&good.run_id, &common::four_step_flow(), &common::executor(0.99)),
        Err(Error::NotApproved(_))
    ));

    // rejected run cannot be released or approved
    pipe.reject(&good.run_id, "carol", "not this week").unwrap();
    assert!(matches!(pipe.approve(&good.run_id, "bob"), Err(Error::AlreadyDecided(_))));
    assert!(matches!(
        pipe.run_release(&good.run_id, &common::four_step_flow(), &common::executor(0.99)),
        Err(Error::NotApproved(_))
    ));

    assert!(main_pins_bytes(&repo) == before, "main pins changed");
    assert!(repo.list_runs().unwrap().iter().all(|r| r.kind == RunKind::Validation));
}

#[test]
fn approving_a_release_run_is_refused() {
    let (_d, repo, _) = common::seeded();
    let pipe = Pipeline::new(&repo, common::pipeline_config());
    let plan = pipe.ingest_event(&data_event(&repo, "e1", "x2", 100)).unwrap();
    let ex = common::executor(0.95);
    let v = pipe.run_validation(&plan, &common::four_step_flow(), &ex).unwrap();
    pipe.approve(&v.run_id, "a").unwrap();
    let r = pipe.run_release(&v.run_id, &common::four_step_flow(), &ex).unwrap();
    assert!(matches!(pipe.approve(&r.run_id, "a"), Err(Error::NotValidationRun(_))));
    let missing = "000000000000-000001".parse().unwrap();
    assert!(matches!(pipe.approve(&missing, "a"), Err(Error::RunNotFound(_))));
}

#[test]
fn failed_release_keeps_main_and_can_be_retried() {
    let (_d, repo, _) = common::seeded();
    let pipe = Pipeline::new(&repo, common::pipeline_config());
    let plan = pipe.ingest_event(&data_event(&repo, "e1", "x2", 100)).unwrap();
    let v = pipe.run_validation(&plan, &common::four_step_flow(), &common::executor(0.95)).unwrap();
    pipe.approve(&v.run_id, "a").unwrap();
    let before = main_pins_bytes(&repo);
    let broken = common::executor(0.95).script("step4[merge]", StepResponse::exit(9));
    let r = pipe.run_release(&v.run_id, &common::four_step_flow(), &broken).unwrap();
    assert_eq!(r.status, RunStatus::Failed);
    assert!(main_pins_bytes(&repo) == before, "main pins changed");
    let r2 = pipe.run_release(&v.run_id, &common::four_step_flow(), &common::executor(0.95)).unwrap();
    assert_eq!(r2.status, RunStatus::Succeeded);
    assert!(main_pins_bytes(&repo) != before, "main pins did not move");
}

#[test]
fn event_errors() {
    let (_d, repo) = common::repo();
    let pipe = Pipeline::new(&repo, PipelineConfig::default());
    let ev = ChangeEvent::new("e", ChangeSource::Code, "working/y", VersionPin::new("code", "c9").unwrap());
    assert!(matches!(pipe.ingest_event(&ev), Err(Error::UnknownBranch(_))));
    let bad = ChangeEvent::new("e", ChangeSource::Code, "main", VersionPin::new("data", "c9").unwrap());
    assert!(matches!(pipe.ingest_event(&bad), Err(Error::MalformedEvent(_))));
    pipe.set_branch_pins(
        "main",
        ca_core::ArtifactVersionTuple::from_pins([VersionPin::new("code", "c1").unwrap()]).unwrap(),
    )
    .unwrap_err();
}

#[test]
fn code_event_changes_only_code() {
    let (_d, repo, main_tuple) = common::seeded();
    let pipe = Pipeline::new(&repo, PipelineConfig::default());
    let ev = ChangeEvent::new("c", ChangeSource::Code, "feature/z", VersionPin::new("code", "c2").unwrap());
    let plan = pipe.ingest_event(&ev).unwrap();
    let d = diff_tuples(&main_tuple, &plan.tuple);
    assert_eq!(d.len(), 1);
    assert_eq!(d[0].component, "code");
}

#[test]
fn duplicate_events_plan_once() {
    let (_d, repo, _) = common::seeded();
    let pipe = Pipeline::new(&repo, PipelineConfig::default());
    let ev = data_event(&repo, "dup", "x2", 10);
    let a = pipe.ingest_event(&ev).unwrap();
    let b = pipe.ingest_event(&ev).unwrap();
    assert_eq!(a, b);
    assert_eq!(pipe.plans().unwrap().len(), 1);
    assert_eq!(pipe.events().unwrap().len(), 1);
}

#[test]
fn concurrent_ingest_of_same_event_plans_once() {
    let (_d, repo, _) = common::seeded();
    let ev = data_event(&repo, "race", "x2", 10);
    std::thread::scope(|s| {
        for _ in 0..8 {
            s.spawn(|| Pipeline::new(&repo, PipelineConfig::default()).ingest_event(&ev).unwrap());
        }
    });
    assert_eq!(Pipeline::new(&repo, PipelineConfig::default()).plans().unwrap().len(), 1);
}

#[test]
fn subset_oracle_independent_reimplementation() {
    use sha2::{Digest, Sha256};
    let items: Vec<String> = (0..300).map(|i| format!("id{i}")).collect();
    let oracle: Vec<String> = items
        .iter()
        .filter(|id| {
            let mut buf = 9u64.to_be_bytes().to_vec();
            buf.extend(id.as_bytes());
            let d = Sha256::digest(&buf);
            let mut v = 0u64;
            for b in &d[..8] {
                v = (v << 8) | *b as u64;
            }
            v % 1_000_000 < 250_000
        })
        .cloned()
        .collect();
    assert_eq!(subset_select(&items, 0.25, 9).unwrap(), oracle);
}
