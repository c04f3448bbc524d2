//! Change events to validation runs, approval, and release on `main`.
//!
//! An event names one component that changed on one branch. Ingesting it
//! resolves a tuple (the branch's current pins with that one component
//! replaced) and plans a validation run over a deterministic data subset.
//! A validation run that succeeded and passes the gate can be approved;
//! an approved run can be released once, re-running the flow on the full
//! data with the same tuple. Only a successful release moves `main`'s pins.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::feedback::{evaluate_gate, GatePolicy, GateReport};
use crate::flow::{execute, ExecuteOptions, FlowGraph, StepExecutor};
use crate::repo::{self, Repository};
use crate::store::{ArtifactId, ArtifactKind, ContentHash};
use crate::tuple::{
    diff_tuples, ArtifactVersionTuple, DataScope, RunId, RunKind, RunRecord, RunStatus, VersionPin,
};

pub const MAIN_BRANCH: &str = "main";
pub const DEFAULT_SUBSET_FRACTION: f64 = 0.1;

/// Splits a dataset manifest into item ids: one per line, blank lines
/// ignored.
pub fn parse_dataset_manifest(bytes: &[u8]) -> Vec<String> {
    String::from_utf8_lossy(bytes)
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

fn subset_digest(seed: u64, item: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(item.as_bytes());
    h.finalize().into()
}

/// Deterministic subset: keeps `item` iff
/// `u64(sha256(seed_be ‖ item)[..8]) mod 10^6 < fraction * 10^6`, in input
/// order. If nothing is selected the item with the smallest digest is kept.
pub fn subset_select(items: &[String], fraction: f64, seed: u64) -> Result<Vec<String>> {
    if items.is_empty() {
        return Err(Error::EmptyManifest);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("subset fraction {fraction} is outside (0, 1]")));
    }
    let threshold = fraction * 1e6;
    let digests: Vec<[u8; 32]> = items.iter().map(|i| subset_digest(seed, i)).collect();
    let kept: Vec<String> = items
        .iter()
        .zip(&digests)
        .filter(|(_, d)| {
            let v = u64::from_be_bytes(d[..8].try_into().expect("8 bytes")) % 1_000_000;
            (v as f64) < threshold
        })
        .map(|(i, _)| i.clone())
        .collect();
    if !kept.is_empty() {
        return Ok(kept);
    }
    let (smallest, _) = items
        .iter()
        .zip(&digests)
        .min_by(|a, b| a.1.cmp(b.1))
        .expect("nonempty");
    Ok(vec![smallest.clone()])
}

/// Repository a change came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeSource {
    Code,
    Data,
    Dependencies,
    Deployment,
}

impl ChangeSource {
    pub fn component(self) -> &'static str {
        match self {
            ChangeSource::Code => "code",
            ChangeSource::Data => "data",
            ChangeSource::Dependencies => "dependencies",
            ChangeSource::Deployment => "deployment",
        }
    }
}

impl fmt::Display for ChangeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.component())
    }
}

impl std::str::FromStr for ChangeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "code" => Ok(ChangeSource::Code),
            "data" => Ok(ChangeSource::Data),
            "dependencies" => Ok(ChangeSource::Dependencies),
            "deployment" => Ok(ChangeSource::Deployment),
            _ => Err(Error::Invalid(format!("unknown change source `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeEvent {
    pub event_id: String,
    pub source: ChangeSource,
    #[serde(rename = "ref")]
    pub git_ref: String,
    pub new_pin: VersionPin,
    pub at: DateTime<Utc>,
}

impl ChangeEvent {
    pub fn new(
        event_id: impl Into<String>,
        source: ChangeSource,
        git_ref: impl Into<String>,
        new_pin: VersionPin,
    ) -> Self {
        Self {
            event_id: event_id.into(),
            source,
            git_ref: git_ref.into(),
            new_pin,
            at: Utc::now(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.event_id.trim().is_empty() {
            return Err(Error::MalformedEvent("event_id is empty".into()));
        }
        if self.git_ref.trim().is_empty() {
            return Err(Error::MalformedEvent("ref is empty".into()));
        }
        if self.new_pin.component != self.source.component() {
            return Err(Error::MalformedEvent(format!(
                "pin component `{}` does not match source `{}`",
                self.new_pin.component, self.source
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchPins {
    pub branch: String,
    pub pins: ArtifactVersionTuple,
    #[serde(default)]
    pub last_release_run: Option<RunId>,
    #[serde(default)]
    pub result_refs: Vec<ArtifactId>,
}

/// The tuple a change event asks to validate: `current` with the event's
/// component replaced by its new pin.
pub fn resolve_tuple(event: &ChangeEvent, current: &BranchPins) -> Result<ArtifactVersionTuple> {
    let missing = current.pins.missing_baseline();
    if !missing.is_empty() {
        return Err(Error::IncompletePins(missing));
    }
    let mut tuple = current.pins.clone();
    tuple.insert(event.new_pin.clone());
    Ok(tuple)
}

/// A validation run waiting to be executed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPlan {
    pub event_id: String,
    pub branch: String,
    pub source: ChangeSource,
    pub kind: RunKind,
    pub tuple: ArtifactVersionTuple,
    pub tuple_hash: ContentHash,
    pub data_scope: DataScope,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Approved,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromotionRequest {
    pub run_id: RunId,
    pub approver: String,
    pub decision: Decision,
    #[serde(default)]
    pub reason: String,
    pub at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub subset_fraction: f64,
    pub subset_seed: u64,
    pub parallelism: usize,
    pub policy: GatePolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            subset_fraction: DEFAULT_SUBSET_FRACTION,
            subset_seed: 0,
            parallelism: 4,
            policy: GatePolicy::default(),
        }
    }
}

/// Stores the flow definition as a `code` artifact so runs can name it.
pub fn store_flow(repo: &Repository, graph: &FlowGraph) -> Result<ArtifactId> {
    let bytes = serde_json::to_vec_pretty(graph).expect("serializable flow");
    repo.put_artifact(
        ArtifactKind::Code,
        &bytes,
        "application/json",
        BTreeMap::from([("role".to_string(), "flow".to_string())]),
    )
}

/// The flow a run was executed with, from its `flow` label.
pub fn load_flow(repo: &Repository, run: &RunRecord) -> Result<FlowGraph> {
    let id: ArtifactId = run
        .labels
        .get("flow")
        .ok_or_else(|| Error::NotFound(format!("run {} does not name its flow", run.run_id)))?
        .parse()?;
    let bytes = repo.get_artifact(&id)?;
    crate::flow::parse_manifest(&String::from_utf8_lossy(&bytes))
}

/// Executes a flow and completes the run's bookkeeping: the flow itself is
/// stored and labelled on the run, the feedback bundle is collected (with
/// metrics when the flow designates a metrics output), and lineage edges
/// are appended. Returns the final persisted record.
pub fn run_flow(
    repo: &Repository,
    graph: &FlowGraph,
    tuple: &ArtifactVersionTuple,
    executor: &dyn StepExecutor,
    opts: &ExecuteOptions,
) -> Result<RunRecord> {
    let flow_id = store_flow(repo, graph)?;
    let opts = opts.clone().label("flow", flow_id.to_string());
    let record = execute(repo, graph, tuple, executor, &opts)?;
    let metrics = graph.metrics_output.as_ref().and_then(|m| {
        record
            .step_outcomes
            .iter()
            .filter(|o| o.step == m.step && o.partition_index.is_none())
            .find_map(|o| o.output_ids.get(&m.slot).copied())
    });
    repo.collect_feedback(&record, &record.step_outcomes, metrics)?;
    repo.record_edges(&record, &record.step_outcomes)?;
    repo.load_run(&record.run_id)
}

pub struct Pipeline<'r> {
    repo: &'r Repository,
    config: PipelineConfig,
}

impl<'r> Pipeline<'r> {
    pub fn new(repo: &'r Repository, config: PipelineConfig) -> Self {
        Self { repo, config }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn load_pins(&self) -> Result<BTreeMap<String, BranchPins>> {
        repo::read_json(&self.repo.path(repo::PINS_FILE))
    }

    pub fn branch_pins(&self, branch: &str) -> Result<Option<BranchPins>> {
        Ok(self.load_pins()?.remove(branch))
    }

    pub fn all_pins(&self) -> Result<BTreeMap<String, BranchPins>> {
        self.load_pins()
    }

    /// Seeds or overwrites a branch's pins directly. Used to bootstrap
    /// `main`; afterwards `main` moves only through releases.
    pub fn set_branch_pins(&self, branch: &str, pins: ArtifactVersionTuple) -> Result<()> {
        pins.validate()?;
        for pin in pins.pins() {
            self.repo.resolve_pin(pin)?;
        }
        let _guard = self.repo.write_lock()?;
        let mut all = self.load_pins()?;
        let entry = all.entry(branch.to_string()).or_insert_with(|| BranchPins {
            branch: branch.to_string(),
            pins: ArtifactVersionTuple::new(),
            last_release_run: None,
            result_refs: Vec::new(),
        });
        entry.pins = pins;
        repo::write_json_atomic(&self.repo.path(repo::PINS_FILE), &all)
    }

    pub fn events(&self) -> Result<Vec<ChangeEvent>> {
        repo::read_jsonl(&self.repo.path(repo::EVENTS_FILE))
    }

    pub fn plans(&self) -> Result<Vec<ValidationPlan>> {
        repo::read_jsonl(&self.repo.path(repo::PLANS_FILE))
    }

    pub fn promotions(&self) -> Result<Vec<PromotionRequest>> {
        repo::read_jsonl(&self.repo.path(repo::PROMOTIONS_FILE))
    }

    /// Plans a validation run for `event`. Re-ingesting an event id that was
    /// already seen returns the original plan and changes nothing.
    pub fn ingest_event(&self, event: &ChangeEvent) -> Result<ValidationPlan> {
        let _guard = self.repo.write_lock()?;
        if let Some(plan) = self.plans()?.into_iter().find(|p| p.event_id == event.event_id) {
            return Ok(plan);
        }
        event.check()?;
        self.repo.resolve_pin(&event.new_pin)?;
        let mut pins = self.load_pins()?;
        let current = pins
            .get(&event.git_ref)
            .or_else(|| pins.get(MAIN_BRANCH))
            .ok_or_else(|| Error::UnknownBranch(event.git_ref.clone()))?;
        let tuple = resolve_tuple(event, current)?;
        let plan = ValidationPlan {
            event_id: event.event_id.clone(),
            branch: event.git_ref.clone(),
            source: event.source,
            kind: RunKind::Validation,
            tuple_hash: tuple.hash()?,
            tuple: tuple.clone(),
            data_scope: DataScope::Subset {
                fraction: self.config.subset_fraction,
                seed: self.config.subset_seed,
            },
        };
        debug_assert!(diff_tuples(&current.pins, &tuple).len() <= 1);
        repo::append_jsonl(&self.repo.path(repo::EVENTS_FILE), event)?;
        repo::append_jsonl(&self.repo.path(repo::PLANS_FILE), &plan)?;
        if event.git_ref != MAIN_BRANCH {
            pins.insert(
                event.git_ref.clone(),
                BranchPins {
                    branch: event.git_ref.clone(),
                    pins: tuple,
                    last_release_run: None,
                    result_refs: Vec::new(),
                },
            );
            repo::write_json_atomic(&self.repo.path(repo::PINS_FILE), &pins)?;
        }
        Ok(plan)
    }

    /// Runs the planned validation on the plan's data subset, recording the
    /// branch and event id on the run.
    pub fn run_validation(
        &self,
        plan: &ValidationPlan,
        flow: &FlowGraph,
        executor: &dyn StepExecutor,
    ) -> Result<RunRecord> {
        let _branch = self.repo.branch_lock(&plan.branch)?;
        let opts = ExecuteOptions::new(RunKind::Validation, plan.branch.clone())
            .scope(plan.data_scope)
            .label("branch", plan.branch.clone())
            .label("event_id", plan.event_id.clone())
            .parallelism(self.config.parallelism);
        run_flow(self.repo, flow, &plan.tuple, executor, &opts)
    }

    /// Evaluates the configured gate policy on a run's feedback metrics.
    pub fn gate_report(&self, run: &RunRecord) -> Result<GateReport> {
        let bundle = self.repo.load_feedback(run)?;
        Ok(evaluate_gate(&bundle.metrics, &self.config.policy))
    }

    fn decision_for(&self, run_id: &RunId) -> Result<Option<PromotionRequest>> {
        Ok(self.promotions()?.into_iter().find(|p| &p.run_id == run_id))
    }

    pub fn approve(&self, run_id: &RunId, approver: &str) -> Result<PromotionRequest> {
        self.decide(run_id, approver, Decision::Approved, "")
    }

    pub fn reject(&self, run_id: &RunId, approver: &str, reason: &str) -> Result<PromotionRequest> {
        self.decide(run_id, approver, Decision::Rejected, reason)
    }

    fn decide(
        &self,
        run_id: &RunId,
        approver: &str,
        decision: Decision,
        reason: &str,
    ) -> Result<PromotionRequest> {
        if approver.trim().is_empty() {
            return Err(Error::Invalid("approver identity is empty".into()));
        }
        let _guard = self.repo.write_lock()?;
        let run = self.repo.load_run(run_id)?;
        if self.decision_for(run_id)?.is_some() {
            return Err(Error::AlreadyDecided(run_id.to_string()));
        }
        if run.kind != RunKind::Validation {
            return Err(Error::NotValidationRun(run_id.to_string()));
        }
        if decision == Decision::Approved {
            if run.status != RunStatus::Succeeded {
                return Err(Error::RunNotSucceeded(run_id.to_string()));
            }
            if !self.gate_report(&run)?.pass {
                return Err(Error::GateFailed(run_id.to_string()));
            }
        }
        let req = PromotionRequest {
            run_id: run_id.clone(),
            approver: approver.to_string(),
            decision,
            reason: reason.to_string(),
            at: Utc::now(),
        };
        repo::append_jsonl(&self.repo.path(repo::PROMOTIONS_FILE), &req)?;
        Ok(req)
    }

    /// Releases an approved validation run on `main`: the flow runs on the
    /// full data with the validation run's tuple. On success `main` takes the
    /// tuple's pins and the release's result references; on any failure the
    /// pins are left as they were.
    pub fn run_release(
        &self,
        approved_run: &RunId,
        flow: &FlowGraph,
        executor: &dyn StepExecutor,
    ) -> Result<RunRecord> {
        let _branch = self.repo.branch_lock(MAIN_BRANCH)?;
        match self.decision_for(approved_run)? {
            Some(p) if p.decision == Decision::Approved => {}
            _ => return Err(Error::NotApproved(approved_run.to_string())),
        }
        if let Some(prior) = self.repo.list_runs()?.into_iter().find(|r| {
            r.kind == RunKind::Release
                && r.status == RunStatus::Succeeded
                && r.labels.get("promoted_from").map(String::as_str) == Some(approved_run.as_str())
        }) {
            return Err(Error::AlreadyReleased(approved_run.to_string(), prior.run_id.to_string()));
        }
        let validation = self.repo.load_run(approved_run)?;
        let mut opts = ExecuteOptions::new(RunKind::Release, MAIN_BRANCH)
            .scope(DataScope::Full)
            .label("branch", MAIN_BRANCH)
            .label("promoted_from", approved_run.to_string())
            .parallelism(self.config.parallelism);
        if let Some(ev) = validation.labels.get("event_id") {
            opts = opts.label("event_id", ev.clone());
        }
        let release = run_flow(self.repo, flow, &validation.tuple, executor, &opts)?;
        if release.status == RunStatus::Succeeded {
            let _guard = self.repo.write_lock()?;
            let mut pins = self.load_pins()?;
            pins.insert(
                MAIN_BRANCH.to_string(),
                BranchPins {
                    branch: MAIN_BRANCH.to_string(),
                    pins: validation.tuple.clone(),
                    last_release_run: Some(release.run_id.clone()),
                    result_refs: release.result_ids.clone(),
                },
            );
            repo::write_json_atomic(&self.repo.path(repo::PINS_FILE), &pins)?;
        }
        Ok(release)
    }
}
