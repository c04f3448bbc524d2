//! Runs real shell commands through the process executor: a filter step, a
//! two-way partitioned transform and a metrics step.

use std::collections::BTreeMap;

use ca_core::flow::{parse_manifest, ExecuteOptions, ProcessExecutor};
use ca_core::pipeline::run_flow;
use ca_core::{ArtifactKind, ArtifactVersionTuple, Repository, RunKind, VersionPin};

const FLOW: &str = r#"{
  "steps": [
    {"name": "prep", "command": "grep -v '^#' {input:data} | sort > {output:rows}",
     "inputs": {"data": {"pin": "data"}}, "outputs": ["rows"]},
    {"name": "upper", "command": "awk -v p={partition} 'NR % 2 == p' {input:rows} | tr a-z A-Z > {output:out}",
     "inputs": {"rows": {"step": "prep", "slot": "rows"}}, "outputs": ["out"],
     "partition": {"count": 2, "merge_command": "cat {partitions} | sort > {output:out}"}},
    {"name": "score", "command": "printf '{\"rows\": %d}' $(wc -l < {input:rows}) > {output:metrics}",
     "inputs": {"rows": {"step": "prep", "slot": "rows"}}, "outputs": ["metrics"]}
  ],
  "outcomes": [{"step": "upper", "slot": "out"}, {"step": "score", "slot": "metrics"}],
  "metrics_output": {"step": "score", "slot": "metrics"}
}"#;

fn main() -> ca_core::Result<()> {
    let dir = tempfile::tempdir()?;
    let repo = Repository::init(dir.path().join(".ca"))?;
    let graph = parse_manifest(FLOW)?;
    let data = repo.put_artifact(ArtifactKind::Data, b"# header\ngamma\nalpha\nbeta\n", "text/plain", BTreeMap::new())?;
    let mut tuple = ArtifactVersionTuple::baseline("c1", "d1", "y1", "x1");
    tuple.insert(VersionPin::new("data", "x1")?.with_content(data.hash));

    let run = run_flow(&repo, &graph, &tuple, &ProcessExecutor::new(), &ExecuteOptions::new(RunKind::Validation, "main").parallelism(2))?;
    println!("run {} {}", run.run_id, run.status);
    for o in &run.step_outcomes {
        println!("  {:<12} exit {} `{}`", o.task().to_string(), o.exit_code, o.command_rendered);
    }
    for id in &run.result_ids {
        println!("result {id}:\n{}", String::from_utf8_lossy(&repo.get_artifact(id)?));
    }
    let feedback = repo.load_feedback(&run)?;
    println!("metrics: {:?}", feedback.metrics);
    Ok(())
}
