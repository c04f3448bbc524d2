mod common;

use std::collections::BTreeSet;

use ca_core::flow::{execute, ExecuteOptions, StepResponse};
use ca_core::lineage::{replay_check, EdgeRole, LineageGraph, LineageNode, ReplayVerdict};
use ca_core::pipeline::run_flow;
use ca_core::{Error, RunKind};
use common::lineage_oracle;

fn opts() -> ExecuteOptions {
    ExecuteOptions::new(RunKind::Validation, "main")
}

#[test]
fn random_graphs_match_brute_force() {
    for seed in 0..100 {
        let s = lineage_oracle::sample(seed, 12, 40);
        assert!(s.edges.len() <= 40);
        let g = LineageGraph::new(s.edges.clone(), s.starts.clone());
        for a in &s.artifacts {
            assert_eq!(g.runs_using(a), lineage_oracle::runs_using(&s, a), "seed {seed} runs_using {a}");
            assert_eq!(g.provenance_of(a), lineage_oracle::provenance(&s, a), "seed {seed} provenance {a}");
        }
    }
}

#[test]
fn recorded_run_edges() {
    let (_d, repo) = common::repo();
    let tuple = common::stored_tuple(&repo, &common::dataset(10, "item"), "1");
    let run = run_flow(&repo, &common::four_step_flow(), &tuple, &common::executor(0.9), &opts()).unwrap();
    let edges = repo.lineage_edges().unwrap();
    assert!(!edges.is_empty());
    let data = repo.resolve_pin(tuple.get("data").unwrap()).unwrap().unwrap();
    let code = repo.resolve_pin(tuple.get("code").unwrap()).unwrap().unwrap();
    assert_eq!(repo.runs_using(&data).unwrap(), vec![run.run_id.clone()]);
    assert_eq!(repo.runs_using(&code).unwrap(), vec![run.run_id.clone()]);
    // every output was produced by the run; its provenance reaches the pins
    for id in &run.result_ids {
        let p = repo.provenance_of(id).unwrap();
        assert!(p.contains(&LineageNode::Run(run.run_id.clone())));
        assert!(p.contains(&LineageNode::Artifact(data)));
    }
    // recording again adds nothing
    assert_eq!(repo.record_edges(&run, &run.step_outcomes).unwrap(), 0);
    // roles: pins are pinned, nothing points into a run as produced
    for e in &edges {
        match (&e.from, &e.to) {
            (LineageNode::Artifact(_), LineageNode::Run(_)) => assert_ne!(e.role, EdgeRole::Produced),
            (LineageNode::Run(_), LineageNode::Artifact(_)) => assert_eq!(e.role, EdgeRole::Produced),
            _ => panic!("edge between nodes of the same type"),
        }
    }
}

#[test]
fn two_run_chain_provenance() {
    let (_d, repo) = common::repo();
    let tuple = common::stored_tuple(&repo, &common::dataset(10, "item"), "1");
    let first = run_flow(&repo, &common::four_step_flow(), &tuple, &common::executor(0.9), &opts()).unwrap();
    let merged = first.step_outcomes.iter().find(|o| o.merge).unwrap().output_ids["out"];
    let text = format!(
        r#"{{"steps":[{{"name":"post","command":"x {{input:m}} {{output:o}}","inputs":{{"m":{{"artifact":"{merged}"}}}},"outputs":["o"]}}],
        "outcomes":[{{"step":"post","slot":"o"}}]}}"#
    );
    let g = ca_core::flow::parse_manifest(&text).unwrap();
    let second = run_flow(&repo, &g, &tuple, &common::executor(0.9), &opts()).unwrap();
    let out = second.result_ids[0];
    let p = repo.provenance_of(&out).unwrap();
    let runs: BTreeSet<_> = p.iter().filter(|n| matches!(n, LineageNode::Run(_))).collect();
    assert!(runs.contains(&LineageNode::Run(first.run_id.clone())));
    assert!(runs.contains(&LineageNode::Run(second.run_id.clone())));
    assert!(p.contains(&LineageNode::Artifact(merged)));
    assert_eq!(repo.runs_using(&merged).unwrap(), vec![second.run_id.clone()]);
}

#[test]
fn replay_identical_then_diverged_on_merge_only() {
    let (_d, repo) = common::repo();
    let tuple = common::stored_tuple(&repo, &common::dataset(30, "item"), "1");
    let g = common::four_step_flow();
    let run = run_flow(&repo, &g, &tuple, &common::executor(0.9), &opts()).unwrap();
    let report = replay_check(&repo, &run.run_id, &g, &common::executor(0.9), 4).unwrap();
    assert_eq!(report.verdict, ReplayVerdict::Identical);
    assert_eq!(repo.load_run(&report.replay).unwrap().labels["replay-of"], run.run_id.to_string());

    let perturbed = common::executor(0.9).script_fn("step4[merge]", |req| {
        let mut out = b"step4[merge]/out\n".to_vec();
        for p in req.inputs.values().chain(&req.partition_inputs) {
            out.extend(std::fs::read(p).unwrap());
        }
        out[0] ^= 1;
        StepResponse::ok([("out", out)])
    });
    let report = replay_check(&repo, &run.run_id, &g, &perturbed, 4).unwrap();
    let ReplayVerdict::Diverged(ds) = report.verdict else { panic!("expected divergence") };
    assert_eq!(ds.len(), 1);
    assert_eq!((ds[0].task.as_str(), ds[0].step.as_str(), ds[0].slot.as_str()), ("step4[merge]", "step4", "out"));
    assert_ne!(ds[0].old_hash, ds[0].new_hash);
}

#[test]
fn replay_with_deleted_input_is_missing_input() {
    let (_d, repo) = common::repo();
    let tuple = common::stored_tuple(&repo, &common::dataset(30, "item"), "1");
    let g = common::four_step_flow();
    let run = execute(&repo, &g, &tuple, &common::executor(0.9), &opts()).unwrap();
    let data = repo.resolve_pin(tuple.get("data").unwrap()).unwrap().unwrap();
    std::fs::remove_file(repo.store().object_path(&data.hash)).unwrap();
    assert!(matches!(
        replay_check(&repo, &run.run_id, &g, &common::executor(0.9), 2),
        Err(Error::MissingInput(_))
    ));
}
