//! A four-step flow whose last step fans out into three partitions and a
//! merge. The in-process executor echoes inputs, so outputs are easy to read.

use std::collections::BTreeMap;

use ca_core::flow::{execute, parse_manifest, ExecuteOptions, RecordingExecutor, StepResponse};
use ca_core::{ArtifactKind, ArtifactVersionTuple, Repository, RunKind, VersionPin};

const FLOW: &str = r#"{
  "steps": [
    {"name": "step1", "command": "prepare {input:data} > {output:out}",
     "inputs": {"data": {"pin": "data"}}, "outputs": ["out"]},
    {"name": "step2", "command": "build {input:code} > {output:bin}",
     "inputs": {"code": {"pin": "code"}}, "outputs": ["bin"]},
    {"name": "step3", "command": "evaluate {input:bin} {input:features} > {output:metrics}",
     "inputs": {"bin": {"step": "step2", "slot": "bin"}, "features": {"step": "step1", "slot": "out"}},
     "outputs": ["metrics"]},
    {"name": "step4", "command": "analyze {input:in} --part {partition} > {output:out}",
     "inputs": {"in": {"step": "step1", "slot": "out"}}, "outputs": ["out"],
     "partition": {"count": 3, "merge_command": "cat {partitions} > {output:out}"}}
  ],
  "outcomes": [{"step": "step4", "slot": "out"}, {"step": "step3", "slot": "metrics"}],
  "metrics_output": {"step": "step3", "slot": "metrics"}
}"#;

fn main() -> ca_core::Result<()> {
    let dir = tempfile::tempdir()?;
    let repo = Repository::init(dir.path().join(".ca"))?;
    let graph = parse_manifest(FLOW)?;
    println!("topological order: {:?}", graph.topo_order()?);
    println!("{}", graph.to_dot());

    let put = |kind, bytes: &[u8]| repo.put_artifact(kind, bytes, "text/plain", BTreeMap::new()).map(|id| id.hash);
    let tuple = ArtifactVersionTuple::from_pins([
        VersionPin::new("code", "c1")?.with_content(put(ArtifactKind::Code, b"model v1\n")?),
        VersionPin::new("dependencies", "d1")?,
        VersionPin::new("deployment", "y1")?,
        VersionPin::new("data", "x1")?.with_content(put(ArtifactKind::Data, b"a\nb\nc\n")?),
    ])?;

    let executor = RecordingExecutor::echo()
        .script("step3", StepResponse::ok([("metrics", r#"{"accuracy": 0.93}"#)]))
        .completion_order("step4", vec![2, 0, 1]);
    let run = execute(&repo, &graph, &tuple, &executor, &ExecuteOptions::new(RunKind::Validation, "main").parallelism(4))?;

    println!("run {} finished {}", run.run_id, run.status);
    for o in &run.step_outcomes {
        let outs: Vec<String> = o.output_ids.iter().map(|(s, id)| format!("{s}={}", &id.hash.to_hex()[..12])).collect();
        println!("  {:<14} exit {}  {}", o.task().to_string(), o.exit_code, outs.join(" "));
    }
    let merged = run.step_outcomes.iter().find(|o| o.merge).expect("merge task");
    println!("merged output:\n{}", String::from_utf8_lossy(&repo.get_artifact(&merged.output_ids["out"])?));
    Ok(())
}
