#![allow(dead_code)]

use std::collections::BTreeMap;

use ca_core::feedback::{Comparator, Constraint, GatePolicy};
use ca_core::flow::{parse_manifest, FlowGraph, RecordingExecutor, StepResponse};
use ca_core::pipeline::{Pipeline, PipelineConfig, MAIN_BRANCH};
use ca_core::{ArtifactKind, ArtifactVersionTuple, Repository, VersionPin};
use tempfile::TempDir;

/// Four steps; step1's output feeds step4, which fans out into three
/// partitions and merges them. step3 writes the metrics document.
pub const FOUR_STEP_FLOW: &str = r#"{
  "steps": [
    {"name": "step1", "command": "prepare {input:data} {input:__data_manifest} > {output:out}",
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

pub fn four_step_flow() -> FlowGraph {
    parse_manifest(FOUR_STEP_FLOW).expect("fixture parses")
}

pub fn repo() -> (TempDir, Repository) {
    let dir = tempfile::tempdir().unwrap();
    let repo = Repository::init(dir.path().join(".ca")).unwrap();
    (dir, repo)
}

pub fn dataset(n: usize, tag: &str) -> Vec<u8> {
    (0..n).map(|i| format!("{tag}-{i:05}\n")).collect::<String>().into_bytes()
}

/// Stores one artifact per component and returns the tuple pinning them.
pub fn stored_tuple(repo: &Repository, data: &[u8], version_suffix: &str) -> ArtifactVersionTuple {
    let put = |kind, bytes: &[u8]| repo.put_artifact(kind, bytes, "text/plain", BTreeMap::new()).unwrap().hash;
    let pins = [
        VersionPin::new("code", format!("c{version_suffix}")).unwrap().with_content(put(ArtifactKind::Code, b"fn main() {}\n")),
        VersionPin::new("dependencies", "d1").unwrap().with_content(put(ArtifactKind::Dependency, b"numpy==2.0\n")),
        VersionPin::new("deployment", "y1").unwrap().with_content(put(ArtifactKind::Deployment, b"image: base\n")),
        VersionPin::new("data", format!("x{version_suffix}")).unwrap().with_content(put(ArtifactKind::Data, data)),
    ];
    ArtifactVersionTuple::from_pins(pins).unwrap()
}

/// Echo executor whose metrics step reports `accuracy`.
pub fn executor(accuracy: f64) -> RecordingExecutor {
    RecordingExecutor::echo().script("step3", StepResponse::ok([("metrics", format!("{{\"accuracy\": {accuracy}}}"))]))
}

pub fn accuracy_gate() -> GatePolicy {
    GatePolicy::new(vec![Constraint::new("accuracy", Comparator::Ge, 0.9)]).unwrap()
}

/// Repository with `main` seeded from a 1000-item dataset.
pub fn seeded() -> (TempDir, Repository, ArtifactVersionTuple) {
    let (dir, repo) = repo();
    let tuple = stored_tuple(&repo, &dataset(1000, "item"), "1");
    Pipeline::new(&repo, PipelineConfig::default())
        .set_branch_pins(MAIN_BRANCH, tuple.clone())
        .unwrap();
    (dir, repo, tuple)
}

pub fn pipeline_config() -> PipelineConfig {
    PipelineConfig {
        policy: accuracy_gate(),
        ..PipelineConfig::default()
    }
}

pub mod lineage_oracle {
    use std::collections::BTreeSet;

    use ca_core::lineage::{EdgeRole, LineageEdge, LineageNode};
    use ca_core::{ArtifactId, ArtifactKind, ContentHash, RunId};
    use chrono::{DateTime, Duration, TimeZone, Utc};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    pub struct Sample {
        pub edges: Vec<LineageEdge>,
        pub starts: Vec<(RunId, DateTime<Utc>)>,
        pub artifacts: Vec<ArtifactId>,
    }

    /// Random acyclic lineage: runs are created in order, each uses only
    /// artifacts that exist before it and produces fresh ones. Start times
    /// are shuffled relative to creation so ordering is exercised.
    pub fn sample(seed: u64, max_runs: usize, max_edges: usize) -> Sample {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let n_runs = rng.gen_range(1..=max_runs);
        let mut artifacts: Vec<ArtifactId> = (0..rng.gen_range(1..4))
            .map(|i| ArtifactId::new(ArtifactKind::Data, ContentHash::of(format!("{seed}-seed-{i}").as_bytes())))
            .collect();
        let mut edges = Vec::new();
        let mut starts = Vec::new();
        let t0 = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        let tuple_hash = ContentHash::of(&seed.to_be_bytes());
        for r in 0..n_runs {
            let run = RunId::new(&tuple_hash, r as u64 + 1);
            starts.push((run.clone(), t0 + Duration::seconds(rng.gen_range(0..20))));
            let uses = rng.gen_range(0..=3.min(artifacts.len()));
            for a in artifacts.choose_multiple(&mut rng, uses).copied().collect::<Vec<_>>() {
                if edges.len() >= max_edges {
                    break;
                }
                let role = if rng.gen_bool(0.3) { EdgeRole::Pinned } else { EdgeRole::Consumed };
                edges.push(LineageEdge::into_run(a, run.clone(), role));
            }
            for k in 0..rng.gen_range(0..3) {
                if edges.len() >= max_edges {
                    break;
                }
                let a = ArtifactId::new(ArtifactKind::Result, ContentHash::of(format!("{seed}-{r}-{k}").as_bytes()));
                edges.push(LineageEdge::produced(run.clone(), a));
                artifacts.push(a);
            }
        }
        Sample { edges, starts, artifacts }
    }

    pub fn runs_using(s: &Sample, a: &ArtifactId) -> Vec<RunId> {
        let mut runs: Vec<(DateTime<Utc>, RunId)> = Vec::new();
        for e in &s.edges {
            if let (LineageNode::Artifact(x), LineageNode::Run(r)) = (&e.from, &e.to) {
                if x == a && e.role != EdgeRole::Produced && !runs.iter().any(|(_, y)| y == r) {
                    let t = s.starts.iter().find(|(id, _)| id == r).unwrap().1;
                    runs.push((t, r.clone()));
                }
            }
        }
        runs.sort();
        runs.into_iter().map(|(_, r)| r).collect()
    }

    /// Fixed point of "add every node with an edge into the set".
    pub fn provenance(s: &Sample, a: &ArtifactId) -> BTreeSet<LineageNode> {
        let mut set = BTreeSet::from([LineageNode::Artifact(*a)]);
        loop {
            let before = set.len();
            for e in &s.edges {
                if set.contains(&e.to) {
                    set.insert(e.from.clone());
                }
            }
            if set.len() == before {
                return set;
            }
        }
    }
}
