use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use chrono::Utc;

use super::executor::{Phase, StepExecutor, StepRequest, TaskKey};
use super::manifest::{tokenize, Placeholder};
use super::{BoundInput, FlowGraph, InputOrigin, InputRef, StepOutcome, StepSpec};
use crate::error::{Error, Result};
use crate::pipeline::{parse_dataset_manifest, subset_select};
use crate::repo::{Repository, WORK_DIR};
use crate::store::{ArtifactId, ArtifactKind};
use crate::tuple::{ArtifactVersionTuple, DataScope, RunKind, RunRecord, RunStatus};

/// Reserved input slot carrying the dataset manifest (full or subset) to
/// every step.
pub const DATA_MANIFEST_SLOT: &str = "__data_manifest";

#[derive(Clone, Debug)]
pub struct ExecuteOptions {
    pub kind: RunKind,
    pub data_scope: DataScope,
    pub branch: String,
    pub labels: BTreeMap<String, String>,
    /// Upper bound on concurrently running tasks.
    pub parallelism: usize,
}

impl ExecuteOptions {
    pub fn new(kind: RunKind, branch: impl Into<String>) -> Self {
        Self {
            kind,
            data_scope: DataScope::Full,
            branch: branch.into(),
            labels: BTreeMap::new(),
            parallelism: 4,
        }
    }

    pub fn scope(mut self, scope: DataScope) -> Self {
        self.data_scope = scope;
        self
    }

    pub fn label(mut self, key: &str, value: impl Into<String>) -> Self {
        self.labels.insert(key.into(), value.into());
        self
    }

    pub fn parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self
    }
}

struct TaskSpec {
    key: TaskKey,
    template: String,
    inputs: BTreeMap<String, BoundInput>,
    partition_inputs: Vec<ArtifactId>,
    outputs: Vec<(String, ArtifactKind)>,
}

enum StepState {
    Waiting,
    Partitions { outputs: Vec<Option<ArtifactId>>, remaining: u32 },
    Done(BTreeMap<String, ArtifactId>),
}

struct Scheduler<'g> {
    graph: &'g FlowGraph,
    pos: HashMap<&'g str, usize>,
    external: HashMap<(&'g str, &'g str), ArtifactId>,
    manifest: Option<ArtifactId>,
    state: HashMap<&'g str, StepState>,
    ready: BTreeMap<(usize, Phase), TaskSpec>,
}

impl<'g> Scheduler<'g> {
    fn step(&self, name: &str) -> &'g StepSpec {
        self.graph.step(name).expect("validated graph")
    }

    fn upstream_steps(step: &StepSpec) -> impl Iterator<Item = &str> {
        step.inputs.values().filter_map(|r| match r {
            InputRef::Upstream { step, .. } => Some(step.as_str()),
            _ => None,
        })
    }

    fn is_ready(&self, step: &StepSpec) -> bool {
        Self::upstream_steps(step).all(|u| matches!(self.state.get(u), Some(StepState::Done(_))))
    }

    fn bind_inputs(&self, step: &'g StepSpec) -> BTreeMap<String, BoundInput> {
        let mut out = BTreeMap::new();
        for (slot, r) in &step.inputs {
            let bound = match r {
                InputRef::Upstream { step: up, slot: up_slot } => {
                    let Some(StepState::Done(outs)) = self.state.get(up.as_str()) else {
                        unreachable!("bound before upstream finished")
                    };
                    BoundInput { artifact: outs[up_slot], origin: InputOrigin::Upstream }
                }
                _ => BoundInput {
                    artifact: self.external[&(step.name.as_str(), slot.as_str())],
                    origin: InputOrigin::External,
                },
            };
            out.insert(slot.clone(), bound);
        }
        if let Some(m) = self.manifest {
            out.insert(
                DATA_MANIFEST_SLOT.into(),
                BoundInput { artifact: m, origin: InputOrigin::Manifest },
            );
        }
        out
    }

    fn output_kind(&self, step: &str, slot: &str, phase: Phase) -> ArtifactKind {
        let designated = self.graph.is_outcome(step, slot)
            || self
                .graph
                .metrics_output
                .as_ref()
                .is_some_and(|m| m.step == step && m.slot == slot);
        if designated && !matches!(phase, Phase::Partition(_)) {
            ArtifactKind::Result
        } else {
            ArtifactKind::Data
        }
    }

    fn enqueue(&mut self, step: &'g StepSpec) {
        let pos = self.pos[step.name.as_str()];
        let inputs = self.bind_inputs(step);
        match &step.partition {
            None => {
                let key = TaskKey::single(&step.name);
                let outputs = self.outputs_for(step, key.phase);
                self.ready.insert(
                    (pos, key.phase),
                    TaskSpec {
                        key,
                        template: step.command.clone(),
                        inputs,
                        partition_inputs: Vec::new(),
                        outputs,
                    },
                );
            }
            Some(p) => {
                self.state.insert(
                    &step.name,
                    StepState::Partitions { outputs: vec![None; p.count as usize], remaining: p.count },
                );
                for i in 0..p.count {
                    let key = TaskKey::partition(&step.name, i);
                    let outputs = self.outputs_for(step, key.phase);
                    self.ready.insert(
                        (pos, key.phase),
                        TaskSpec {
                            key,
                            template: step.command.clone(),
                            inputs: inputs.clone(),
                            partition_inputs: Vec::new(),
                            outputs,
                        },
                    );
                }
            }
        }
    }

    fn outputs_for(&self, step: &StepSpec, phase: Phase) -> Vec<(String, ArtifactKind)> {
        step.outputs
            .iter()
            .map(|s| (s.clone(), self.output_kind(&step.name, s, phase)))
            .collect()
    }

    /// Records a successful task and enqueues whatever it unblocks.
    fn complete(&mut self, outcome: &StepOutcome) {
        let step = self.step(&outcome.step);
        let finished = match outcome.task().phase {
            Phase::Single | Phase::Merge => {
                self.state.insert(&step.name, StepState::Done(outcome.output_ids.clone()));
                true
            }
            Phase::Partition(i) => {
                let Some(StepState::Partitions { outputs, remaining }) = self.state.get_mut(step.name.as_str())
                else {
                    unreachable!("partition of a non-partitioned step")
                };
                outputs[i as usize] = outcome.output_ids.values().next().copied();
                *remaining -= 1;
                if *remaining == 0 {
                    let parts: Vec<ArtifactId> = outputs.iter().map(|o| o.expect("all partitions done")).collect();
                    let key = TaskKey::merge(&step.name);
                    let spec = TaskSpec {
                        inputs: self.bind_inputs(step),
                        partition_inputs: parts,
                        outputs: self.outputs_for(step, key.phase),
                        template: step.partition.as_ref().expect("partitioned").merge_command.clone(),
                        key,
                    };
                    self.ready.insert((self.pos[step.name.as_str()], Phase::Merge), spec);
                }
                false
            }
        };
        if finished {
            let consumers: Vec<&'g StepSpec> = self
                .graph
                .steps
                .iter()
                .filter(|c| Self::upstream_steps(c).any(|u| u == step.name))
                .filter(|c| matches!(self.state.get(c.name.as_str()), Some(StepState::Waiting)))
                .collect();
            for c in consumers {
                if self.is_ready(c) {
                    self.enqueue(c);
                }
            }
        }
    }
}

fn unresolved(e: Error) -> Error {
    match e {
        Error::DanglingReference(m) => Error::UnresolvedInput(m),
        other => other,
    }
}

fn resolve_externals<'g>(
    repo: &Repository,
    graph: &'g FlowGraph,
    tuple: &ArtifactVersionTuple,
) -> Result<HashMap<(&'g str, &'g str), ArtifactId>> {
    let mut out = HashMap::new();
    for step in &graph.steps {
        for (slot, r) in &step.inputs {
            let id = match r {
                InputRef::Upstream { .. } => continue,
                InputRef::Artifact(id) => {
                    if !repo.store().contains(id)? {
                        return Err(Error::UnresolvedInput(format!(
                            "{}.{slot}: artifact {id} is not in the store",
                            step.name
                        )));
                    }
                    *id
                }
                InputRef::Pin(c) => {
                    let pin = tuple.get(c).ok_or_else(|| {
                        Error::UnresolvedInput(format!("{}.{slot}: tuple has no `{c}` pin", step.name))
                    })?;
                    repo.resolve_pin(pin).map_err(unresolved)?.ok_or_else(|| {
                        Error::UnresolvedInput(format!(
                            "{}.{slot}: pin `{c}` has no content hash",
                            step.name
                        ))
                    })?
                }
            };
            out.insert((step.name.as_str(), slot.as_str()), id);
        }
    }
    Ok(out)
}

/// Artifact passed in the reserved manifest slot: the data pin's content
/// for a full run, a stored subset of it otherwise.
fn data_manifest(
    repo: &Repository,
    tuple: &ArtifactVersionTuple,
    scope: DataScope,
) -> Result<Option<ArtifactId>> {
    let pin = tuple.get("data").expect("validated tuple");
    let full = repo.resolve_pin(pin).map_err(unresolved)?;
    match (scope, full) {
        (DataScope::Full, full) => Ok(full),
        (DataScope::Subset { .. }, None) => Err(Error::UnresolvedInput(
            "subset scope needs a data pin with a content hash".into(),
        )),
        (DataScope::Subset { fraction, seed }, Some(id)) => {
            let items = parse_dataset_manifest(&repo.get_artifact(&id)?);
            let subset = subset_select(&items, fraction, seed)?;
            let mut body = subset.join("\n");
            body.push('\n');
            let labels = BTreeMap::from([
                ("role".to_string(), "data-subset".to_string()),
                ("source".to_string(), id.to_string()),
                ("fraction".to_string(), fraction.to_string()),
                ("seed".to_string(), seed.to_string()),
            ]);
            Ok(Some(repo.put_artifact(ArtifactKind::Data, body.as_bytes(), "text/plain", labels)?))
        }
    }
}

fn render(template: &str, partition: Option<u32>, partitions: usize) -> String {
    let mut out = String::new();
    for tok in tokenize(template) {
        match tok {
            Ok(text) => out.push_str(text),
            Err(Placeholder::Input(s)) => out.push_str(&format!("in/{s}")),
            Err(Placeholder::Output(s)) => out.push_str(&format!("out/{s}")),
            Err(Placeholder::Partition) => out.push_str(&partition.unwrap_or(0).to_string()),
            Err(Placeholder::Partitions) => out.push_str(
                &(0..partitions).map(|i| format!("parts/{i}")).collect::<Vec<_>>().join(" "),
            ),
        }
    }
    out
}

fn labels(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn run_task(
    repo: &Repository,
    executor: &dyn StepExecutor,
    env: &BTreeMap<String, String>,
    run_dir: &Path,
    spec: TaskSpec,
) -> Result<StepOutcome> {
    let workdir = run_dir.join(spec.key.to_string());
    for sub in ["in", "out", "parts"] {
        fs::create_dir_all(workdir.join(sub))?;
    }
    let mut inputs = BTreeMap::new();
    for (slot, b) in &spec.inputs {
        let path = workdir.join("in").join(slot);
        fs::write(&path, repo.get_artifact(&b.artifact)?)?;
        inputs.insert(slot.clone(), path);
    }
    let mut partition_inputs = Vec::new();
    for (i, id) in spec.partition_inputs.iter().enumerate() {
        let path = workdir.join("parts").join(i.to_string());
        fs::write(&path, repo.get_artifact(id)?)?;
        partition_inputs.push(path);
    }
    let partition = match spec.key.phase {
        Phase::Partition(i) => Some(i),
        _ => None,
    };
    let request = StepRequest {
        command: render(&spec.template, partition, spec.partition_inputs.len()),
        task: spec.key.clone(),
        inputs,
        partition_inputs,
        outputs: spec.outputs.iter().map(|(s, _)| s.clone()).collect(),
        env: env.clone(),
        workdir,
    };
    let t0 = Instant::now();
    let resp = executor.run(&request)?;
    let wall_time_ms = t0.elapsed().as_millis() as u64;

    let task = spec.key.to_string();
    let log_id = repo.put_artifact(
        ArtifactKind::Result,
        &resp.log,
        "text/plain",
        labels(&[("role", "log"), ("task", &task)]),
    )?;
    let env_snapshot_id = repo.put_artifact(
        ArtifactKind::Result,
        &resp.env_snapshot,
        "text/plain",
        labels(&[("role", "env-snapshot")]),
    )?;
    let mut output_ids = BTreeMap::new();
    if resp.exit_code == 0 {
        for (slot, kind) in &spec.outputs {
            let bytes = resp
                .outputs
                .get(slot)
                .ok_or_else(|| Error::MissingOutput { slot: slot.clone() })?;
            let id = repo.put_artifact(
                *kind,
                bytes,
                "application/octet-stream",
                labels(&[("task", &task), ("slot", slot)]),
            )?;
            output_ids.insert(slot.clone(), id);
        }
    }
    Ok(StepOutcome {
        step: spec.key.step.clone(),
        partition_index: partition,
        merge: spec.key.phase == Phase::Merge,
        exit_code: resp.exit_code,
        inputs: spec.inputs,
        partition_inputs: spec.partition_inputs,
        output_ids,
        log_id,
        command_rendered: request.command,
        wall_time_ms,
        env_snapshot_id,
    })
}

/// Runs a validated flow against `tuple` and persists the resulting run
/// record.
///
/// Tasks run in dependency order, independent ones concurrently up to
/// `opts.parallelism`. After the first failing task no new task is started;
/// tasks already running finish and their outcomes are kept. An executor
/// `Err` aborts the run and is returned without recording it.
pub fn execute(
    repo: &Repository,
    graph: &FlowGraph,
    tuple: &ArtifactVersionTuple,
    executor: &dyn StepExecutor,
    opts: &ExecuteOptions,
) -> Result<RunRecord> {
    graph.check()?;
    tuple.validate()?;
    let order = graph.topo_order()?;
    let external = resolve_externals(repo, graph, tuple)?;
    let manifest = data_manifest(repo, tuple, opts.data_scope)?;
    let env: BTreeMap<String, String> = graph
        .env_whitelist
        .iter()
        .filter_map(|k| std::env::var(k).ok().map(|v| (k.clone(), v)))
        .collect();

    let run_id = repo.mint_run_id(tuple)?;
    let started_at = Utc::now();
    let run_dir = repo.path(WORK_DIR).join(run_id.as_str());

    let mut sched = Scheduler {
        graph,
        pos: order
            .iter()
            .enumerate()
            .map(|(i, n)| (graph.step(n).expect("ordered step").name.as_str(), i))
            .collect(),
        external,
        manifest,
        state: graph.steps.iter().map(|s| (s.name.as_str(), StepState::Waiting)).collect(),
        ready: BTreeMap::new(),
    };
    for step in &graph.steps {
        if sched.is_ready(step) {
            sched.enqueue(step);
        }
    }

    let parallelism = opts.parallelism.max(1);
    let mut outcomes: Vec<StepOutcome> = Vec::new();
    let mut failed = false;
    let mut infra: Option<Error> = None;
    thread::scope(|s| {
        let (tx, rx) = mpsc::channel::<Result<StepOutcome>>();
        let mut running = 0usize;
        loop {
            while !failed && infra.is_none() && running < parallelism {
                let Some((_, spec)) = sched.ready.pop_first() else { break };
                let tx = tx.clone();
                let (env, run_dir) = (&env, &run_dir);
                s.spawn(move || {
                    let _ = tx.send(run_task(repo, executor, env, run_dir, spec));
                });
                running += 1;
            }
            if running == 0 {
                break;
            }
            let res = rx.recv().expect("worker result");
            running -= 1;
            match res {
                Err(e) => {
                    infra.get_or_insert(e);
                }
                Ok(o) => {
                    if o.succeeded() {
                        sched.complete(&o);
                    } else {
                        failed = true;
                    }
                    outcomes.push(o);
                }
            }
        }
    });
    let _ = fs::remove_dir_all(&run_dir);
    if let Some(e) = infra {
        return Err(e);
    }

    let all_done = sched.state.values().all(|s| matches!(s, StepState::Done(_)));
    let status = if !failed && all_done { RunStatus::Succeeded } else { RunStatus::Failed };
    outcomes.sort_by_key(|o| (sched.pos[o.step.as_str()], o.task().phase));
    let mut result_ids = Vec::new();
    for o in &graph.outcomes {
        if let Some(StepState::Done(outs)) = sched.state.get(o.step.as_str()) {
            let id = outs[&o.slot];
            if !result_ids.contains(&id) {
                result_ids.push(id);
            }
        }
    }
    let finished_at = Utc::now().max(started_at);
    let record = RunRecord {
        run_id,
        tuple: tuple.clone(),
        kind: opts.kind,
        branch: opts.branch.clone(),
        started_at,
        finished_at: Some(finished_at),
        status,
        data_scope: opts.data_scope,
        step_outcomes: outcomes,
        result_ids,
        feedback_id: None,
        labels: opts.labels.clone(),
    };
    repo.record_run(&record)?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_uses_workdir_relative_paths() {
        assert_eq!(
            render("cat {input:a} > {output:b} # {partition}", Some(2), 0),
            "cat in/a > out/b # 2"
        );
        assert_eq!(render("merge {partitions}", None, 3), "merge parts/0 parts/1 parts/2");
    }
}
