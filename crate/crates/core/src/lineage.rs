//! Lineage graph over artifacts and runs, and replay checks.
//!
//! Edges are appended once per run: `consumed` from each external input to
//! the run, `pinned` from each content-hashed tuple pin to the run, and
//! `produced` from the run to each output it stored. The graph only grows.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::flow::{ExecuteOptions, FlowGraph, InputOrigin, StepExecutor, StepOutcome, TaskKey};
use crate::pipeline::run_flow;
use crate::repo::{self, Repository};
use crate::store::{ArtifactId, ContentHash};
use crate::tuple::{RunId, RunKind, RunRecord};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LineageNode {
    Artifact(ArtifactId),
    Run(RunId),
}

impl fmt::Display for LineageNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LineageNode::Artifact(id) => write!(f, "{id}"),
            LineageNode::Run(id) => write!(f, "run:{id}"),
        }
    }
}

impl FromStr for LineageNode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("run:") {
            Some(id) => Ok(LineageNode::Run(id.parse()?)),
            None => Ok(LineageNode::Artifact(s.parse()?)),
        }
    }
}

impl Serialize for LineageNode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LineageNode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeRole {
    Consumed,
    Produced,
    Pinned,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LineageEdge {
    pub from: LineageNode,
    pub to: LineageNode,
    pub role: EdgeRole,
}

impl LineageEdge {
    pub fn into_run(artifact: ArtifactId, run: RunId, role: EdgeRole) -> Self {
        Self {
            from: LineageNode::Artifact(artifact),
            to: LineageNode::Run(run),
            role,
        }
    }

    pub fn produced(run: RunId, artifact: ArtifactId) -> Self {
        Self {
            from: LineageNode::Run(run),
            to: LineageNode::Artifact(artifact),
            role: EdgeRole::Produced,
        }
    }
}

/// The edges a run contributes, in a deterministic order. An artifact the
/// run both used and stored again (same bytes) is only recorded as used.
pub fn edges_for_run(run: &RunRecord, pinned: &[ArtifactId], outcomes: &[StepOutcome]) -> Vec<LineageEdge> {
    let rid = &run.run_id;
    let mut used: Vec<(ArtifactId, EdgeRole)> = pinned.iter().map(|a| (*a, EdgeRole::Pinned)).collect();
    for o in outcomes {
        for b in o.inputs.values() {
            if b.origin == InputOrigin::External {
                used.push((b.artifact, EdgeRole::Consumed));
            }
        }
    }
    let used_ids: HashSet<ArtifactId> = used.iter().map(|(a, _)| *a).collect();
    let produced = outcomes
        .iter()
        .flat_map(|o| o.output_ids.values().copied())
        .chain(run.result_ids.iter().copied())
        .filter(|a| !used_ids.contains(a));

    let mut seen = HashSet::new();
    used.into_iter()
        .map(|(a, role)| LineageEdge::into_run(a, rid.clone(), role))
        .chain(produced.map(|a| LineageEdge::produced(rid.clone(), a)))
        .filter(|e| seen.insert(e.clone()))
        .collect()
}

/// In-memory view of the lineage edges with reachability queries.
#[derive(Clone, Debug, Default)]
pub struct LineageGraph {
    edges: Vec<LineageEdge>,
    // node -> nodes with an edge into it
    preds: HashMap<LineageNode, Vec<LineageNode>>,
    // artifact -> runs that consumed or pinned it
    users: HashMap<ArtifactId, BTreeSet<RunId>>,
    started: HashMap<RunId, DateTime<Utc>>,
}

impl LineageGraph {
    pub fn new(
        edges: impl IntoIterator<Item = LineageEdge>,
        started: impl IntoIterator<Item = (RunId, DateTime<Utc>)>,
    ) -> Self {
        let mut g = LineageGraph {
            started: started.into_iter().collect(),
            ..Default::default()
        };
        let mut seen = HashSet::new();
        for e in edges {
            if seen.insert(e.clone()) {
                g.add(e);
            }
        }
        g
    }

    fn add(&mut self, e: LineageEdge) {
        self.preds.entry(e.to.clone()).or_default().push(e.from.clone());
        if let (LineageNode::Artifact(a), LineageNode::Run(r), EdgeRole::Consumed | EdgeRole::Pinned) =
            (&e.from, &e.to, e.role)
        {
            self.users.entry(*a).or_default().insert(r.clone());
        }
        self.edges.push(e);
    }

    pub fn edges(&self) -> &[LineageEdge] {
        &self.edges
    }

    /// Runs that consumed or pinned `artifact`, ordered by start time and
    /// then run id. Runs with no known start time come last.
    pub fn runs_using(&self, artifact: &ArtifactId) -> Vec<RunId> {
        let mut runs: Vec<RunId> = self.users.get(artifact).into_iter().flatten().cloned().collect();
        runs.sort_by(|a, b| {
            let key = |r: &RunId| (!self.started.contains_key(r), self.started.get(r).copied());
            key(a).cmp(&key(b)).then_with(|| a.cmp(b))
        });
        runs
    }

    /// Every node from which `artifact` is reachable, including itself.
    pub fn provenance_of(&self, artifact: &ArtifactId) -> BTreeSet<LineageNode> {
        let start = LineageNode::Artifact(*artifact);
        let mut out = BTreeSet::from([start.clone()]);
        let mut stack = vec![start];
        while let Some(n) = stack.pop() {
            for p in self.preds.get(&n).into_iter().flatten() {
                if out.insert(p.clone()) {
                    stack.push(p.clone());
                }
            }
        }
        out
    }
}

impl Repository {
    /// Appends the run's lineage edges, skipping any already recorded.
    /// Returns how many were new.
    pub fn record_edges(&self, run: &RunRecord, outcomes: &[StepOutcome]) -> Result<usize> {
        let mut pinned = Vec::new();
        for pin in run.tuple.pins() {
            if let Some(id) = self.resolve_pin(pin)? {
                pinned.push(id);
            }
        }
        let edges = edges_for_run(run, &pinned, outcomes);
        for e in &edges {
            for n in [&e.from, &e.to] {
                if let LineageNode::Artifact(a) = n {
                    if !self.store().contains(a)? {
                        return Err(Error::DanglingReference(format!("lineage edge names unknown artifact {a}")));
                    }
                }
            }
        }
        let _guard = self.write_lock()?;
        let path = self.path(repo::LINEAGE_FILE);
        let existing: HashSet<LineageEdge> = repo::read_jsonl::<LineageEdge>(&path)?.into_iter().collect();
        let mut added = 0;
        for e in edges.iter().filter(|e| !existing.contains(e)) {
            repo::append_jsonl(&path, e)?;
            added += 1;
        }
        Ok(added)
    }

    pub fn lineage_edges(&self) -> Result<Vec<LineageEdge>> {
        repo::read_jsonl(&self.path(repo::LINEAGE_FILE))
    }

    pub fn lineage(&self) -> Result<LineageGraph> {
        let started = self.list_runs()?.into_iter().map(|r| (r.run_id, r.started_at));
        Ok(LineageGraph::new(self.lineage_edges()?, started))
    }

    pub fn runs_using(&self, artifact: &ArtifactId) -> Result<Vec<RunId>> {
        Ok(self.lineage()?.runs_using(artifact))
    }

    pub fn provenance_of(&self, artifact: &ArtifactId) -> Result<BTreeSet<LineageNode>> {
        Ok(self.lineage()?.provenance_of(artifact))
    }
}

/// One output whose content differs between a run and its replay.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub task: String,
    pub step: String,
    pub slot: String,
    pub old_hash: Option<ContentHash>,
    pub new_hash: Option<ContentHash>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "divergences", rename_all = "lowercase")]
pub enum ReplayVerdict {
    Identical,
    Diverged(Vec<Divergence>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub original: RunId,
    pub replay: RunId,
    pub verdict: ReplayVerdict,
}

fn outputs_by_task(outcomes: &[StepOutcome]) -> BTreeMap<(TaskKey, String), ContentHash> {
    outcomes
        .iter()
        .flat_map(|o| {
            let task = o.task();
            o.output_ids.iter().map(move |(slot, id)| ((task.clone(), slot.clone()), id.hash))
        })
        .collect()
}

/// Compares two runs' outputs task by task and slot by slot.
pub fn diff_outputs(old: &[StepOutcome], new: &[StepOutcome]) -> Vec<Divergence> {
    let a = outputs_by_task(old);
    let b = outputs_by_task(new);
    let keys: BTreeSet<&(TaskKey, String)> = a.keys().chain(b.keys()).collect();
    keys.into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| Divergence {
            task: k.0.to_string(),
            step: k.0.step.clone(),
            slot: k.1.clone(),
            old_hash: a.get(k).copied(),
            new_hash: b.get(k).copied(),
        })
        .collect()
}

/// Re-executes `run_id` with its recorded tuple, data scope and `flow`, and
/// reports which outputs, if any, came out different.
///
/// Every pinned artifact and every external input the original run bound
/// must still be present with intact bytes.
pub fn replay_check(
    repo: &Repository,
    run_id: &RunId,
    flow: &FlowGraph,
    executor: &dyn StepExecutor,
    parallelism: usize,
) -> Result<ReplayReport> {
    let run = repo.load_run(run_id)?;
    let mut needed = BTreeSet::new();
    for pin in run.tuple.pins() {
        match repo.resolve_pin(pin) {
            Ok(Some(id)) => {
                needed.insert(id);
            }
            Ok(None) => {}
            Err(Error::DanglingReference(m)) => return Err(Error::MissingInput(m)),
            Err(e) => return Err(e),
        }
    }
    for o in &run.step_outcomes {
        needed.extend(o.inputs.values().filter(|b| b.origin == InputOrigin::External).map(|b| b.artifact));
    }
    for id in &needed {
        if !repo.verify(id)? {
            return Err(Error::MissingInput(id.to_string()));
        }
    }

    let opts = ExecuteOptions::new(RunKind::Validation, run.branch.clone())
        .scope(run.data_scope)
        .label("replay-of", run_id.to_string())
        .parallelism(parallelism);
    let replay = run_flow(repo, flow, &run.tuple, executor, &opts)?;
    let divergences = diff_outputs(&run.step_outcomes, &replay.step_outcomes);
    Ok(ReplayReport {
        original: run_id.clone(),
        replay: replay.run_id,
        verdict: if divergences.is_empty() {
            ReplayVerdict::Identical
        } else {
            ReplayVerdict::Diverged(divergences)
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::ArtifactKind;

    fn art(n: u8) -> ArtifactId {
        ArtifactId::new(ArtifactKind::Data, ContentHash::of(&[n]))
    }

    fn run(n: u64) -> RunId {
        RunId::new(&ContentHash::of(b"t"), n)
    }

    fn chain() -> LineageGraph {
        // r1: a -> b ; r2: b -> c
        let edges = vec![
            LineageEdge::into_run(art(1), run(1), EdgeRole::Consumed),
            LineageEdge::produced(run(1), art(2)),
            LineageEdge::into_run(art(2), run(2), EdgeRole::Consumed),
            LineageEdge::produced(run(2), art(3)),
            LineageEdge::into_run(art(9), run(2), EdgeRole::Pinned),
        ];
        let t0 = Utc::now();
        LineageGraph::new(edges, [(run(2), t0), (run(1), t0 + chrono::Duration::seconds(1))])
    }

    #[test]
    fn provenance_of_chain_output() {
        let p = chain().provenance_of(&art(3));
        let expect: BTreeSet<LineageNode> = [
            LineageNode::Artifact(art(3)),
            LineageNode::Run(run(2)),
            LineageNode::Artifact(art(2)),
            LineageNode::Artifact(art(9)),
            LineageNode::Run(run(1)),
            LineageNode::Artifact(art(1)),
        ]
        .into();
        assert_eq!(p, expect);
    }

    #[test]
    fn runs_using_ordered_by_start() {
        let g = chain();
        assert_eq!(g.runs_using(&art(2)), vec![run(2)]);
        assert_eq!(g.runs_using(&art(3)), Vec::<RunId>::new());
        let t0 = Utc::now();
        let g = LineageGraph::new(
            [
                LineageEdge::into_run(art(1), run(1), EdgeRole::Consumed),
                LineageEdge::into_run(art(1), run(2), EdgeRole::Pinned),
                LineageEdge::into_run(art(1), run(3), EdgeRole::Consumed),
            ],
            [(run(2), t0), (run(1), t0 + chrono::Duration::seconds(1))],
        );
        assert_eq!(g.runs_using(&art(1)), vec![run(2), run(1), run(3)]);
    }

    #[test]
    fn node_text_roundtrip() {
        for n in [LineageNode::Artifact(art(4)), LineageNode::Run(run(7))] {
            assert_eq!(n.to_string().parse::<LineageNode>().unwrap(), n);
        }
    }

    #[test]
    fn duplicate_edges_collapse() {
        let e = LineageEdge::into_run(art(1), run(1), EdgeRole::Consumed);
        let g = LineageGraph::new([e.clone(), e], []);
        assert_eq!(g.edges().len(), 1);
    }
}
