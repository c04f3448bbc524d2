//! Lineage queries over two runs, then a replay that reproduces the first
//! run and one that does not.

use std::collections::BTreeMap;

use ca_core::flow::{parse_manifest, ExecuteOptions, RecordingExecutor, StepResponse};
use ca_core::lineage::{replay_check, ReplayVerdict};
use ca_core::pipeline::run_flow;
use ca_core::{ArtifactKind, ArtifactVersionTuple, Repository, RunKind, VersionPin};

const FLOW: &str = r#"{
  "steps": [
    {"name": "clean", "command": "clean {input:data} > {output:rows}",
     "inputs": {"data": {"pin": "data"}}, "outputs": ["rows"]},
    {"name": "fit", "command": "fit {input:rows} {input:code} > {output:model}",
     "inputs": {"rows": {"step": "clean", "slot": "rows"}, "code": {"pin": "code"}}, "outputs": ["model"]}
  ],
  "outcomes": [{"step": "fit", "slot": "model"}]
}"#;

fn main() -> ca_core::Result<()> {
    let dir = tempfile::tempdir()?;
    let repo = Repository::init(dir.path().join(".ca"))?;
    let graph = parse_manifest(FLOW)?;
    let put = |kind, bytes: &[u8]| repo.put_artifact(kind, bytes, "text/plain", BTreeMap::new());

    let data = put(ArtifactKind::Data, b"a\nb\n")?;
    let tuple_for = |code: &[u8], version: &str| -> ca_core::Result<ArtifactVersionTuple> {
        ArtifactVersionTuple::from_pins([
            VersionPin::new("code", version)?.with_content(put(ArtifactKind::Code, code)?.hash),
            VersionPin::new("dependencies", "d1")?,
            VersionPin::new("deployment", "y1")?,
            VersionPin::new("data", "x1")?.with_content(data.hash),
        ])
    };
    let opts = ExecuteOptions::new(RunKind::Validation, "main");
    let first = run_flow(&repo, &graph, &tuple_for(b"v1", "c1")?, &RecordingExecutor::echo(), &opts)?;
    let second = run_flow(&repo, &graph, &tuple_for(b"v2", "c2")?, &RecordingExecutor::echo(), &opts)?;

    println!("runs that used {}:", data);
    for run in repo.runs_using(&data)? {
        println!("  {run}");
    }
    let model = &second.result_ids[0];
    println!("provenance of {model}:");
    for node in repo.provenance_of(model)? {
        println!("  {node}");
    }

    let same = replay_check(&repo, &first.run_id, &graph, &RecordingExecutor::echo(), 2)?;
    println!("replay of {}: {:?}", first.run_id, same.verdict);

    let drifted = RecordingExecutor::echo().fallback_fn(|req| {
        StepResponse::ok(req.outputs.iter().map(|s| (s.clone(), format!("{} nondeterministic\n", req.task))))
    });
    let report = replay_check(&repo, &first.run_id, &graph, &drifted, 2)?;
    if let ReplayVerdict::Diverged(ds) = report.verdict {
        for d in ds {
            let short = |h: Option<ca_core::ContentHash>| h.map_or("none".to_string(), |h| h.to_hex()[..12].to_string());
            println!("diverged at {} slot {}: {} -> {}", d.task, d.slot, short(d.old_hash), short(d.new_hash));
        }
    }
    Ok(())
}
