//! A data change arrives as an event, is validated on a 10% subset, passes
//! the gate, gets approved and is released on the full dataset.

use std::collections::BTreeMap;

use ca_core::feedback::{Comparator, Constraint, GatePolicy};
use ca_core::flow::{parse_manifest, RecordingExecutor, StepResponse};
use ca_core::pipeline::{ChangeEvent, ChangeSource, Pipeline, PipelineConfig, MAIN_BRANCH};
use ca_core::{ArtifactKind, ArtifactVersionTuple, Repository, VersionPin};

const FLOW: &str = r#"{
  "steps": [
    {"name": "prep", "command": "select {input:data} {input:__data_manifest} > {output:rows}",
     "inputs": {"data": {"pin": "data"}}, "outputs": ["rows"]},
    {"name": "score", "command": "score {input:rows} {input:code} > {output:metrics}",
     "inputs": {"rows": {"step": "prep", "slot": "rows"}, "code": {"pin": "code"}}, "outputs": ["metrics"]}
  ],
  "outcomes": [{"step": "score", "slot": "metrics"}],
  "metrics_output": {"step": "score", "slot": "metrics"}
}"#;

fn dataset(n: usize, tag: &str) -> Vec<u8> {
    (0..n).map(|i| format!("{tag}-{i:04}\n")).collect::<String>().into_bytes()
}

fn main() -> ca_core::Result<()> {
    let dir = tempfile::tempdir()?;
    let repo = Repository::init(dir.path().join(".ca"))?;
    let graph = parse_manifest(FLOW)?;
    let put = |kind, bytes: &[u8]| repo.put_artifact(kind, bytes, "text/plain", BTreeMap::new()).map(|id| id.hash);

    let config = PipelineConfig {
        policy: GatePolicy::new(vec![Constraint::new("accuracy", Comparator::Ge, 0.9)])?,
        ..PipelineConfig::default()
    };
    let pipe = Pipeline::new(&repo, config);
    pipe.set_branch_pins(
        MAIN_BRANCH,
        ArtifactVersionTuple::from_pins([
            VersionPin::new("code", "c1")?.with_content(put(ArtifactKind::Code, b"model v1\n")?),
            VersionPin::new("dependencies", "d1")?,
            VersionPin::new("deployment", "y1")?,
            VersionPin::new("data", "x1")?.with_content(put(ArtifactKind::Data, &dataset(1000, "row"))?),
        ])?,
    )?;

    let new_data = put(ArtifactKind::Data, &dataset(1000, "row-v2"))?;
    let event = ChangeEvent::new("evt-0001", ChangeSource::Data, "working/data-x2", VersionPin::new("data", "x2")?.with_content(new_data));
    let plan = pipe.ingest_event(&event)?;
    println!("plan for {}: {} run on {} with scope {:?}", plan.event_id, plan.kind, plan.branch, plan.data_scope);
    println!("duplicate ingest returns the same plan: {}", pipe.ingest_event(&event)? == plan);

    let executor = RecordingExecutor::echo().script("score", StepResponse::ok([("metrics", r#"{"accuracy": 0.92, "rows": 100}"#)]));
    let validation = pipe.run_validation(&plan, &graph, &executor)?;
    println!("validation {} {}", validation.run_id, validation.status);

    let report = pipe.gate_report(&validation)?;
    for r in &report.results {
        println!("  gate {} {} {} observed {:?}: {}", r.metric, r.op, r.threshold, r.observed, r.satisfied);
    }

    pipe.approve(&validation.run_id, "reviewer@example.org")?;
    let release = pipe.run_release(&validation.run_id, &graph, &executor)?;
    println!("release {} {} scope {:?}", release.run_id, release.status, release.data_scope);

    let main = pipe.branch_pins(MAIN_BRANCH)?.expect("main exists");
    println!("main now pins data {}", main.pins.get("data").unwrap().version);
    println!("last release run {:?}", main.last_release_run.map(|r| r.to_string()));
    Ok(())
}
