//! The `ca` command-line front end.
//!
//! Every subcommand produces a [`Reply`] holding both a JSON document and a
//! human rendering; `--json` picks the former. Errors go to stderr and map
//! to exit codes through [`Error::exit_code`]; argument errors exit 2.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::feedback::{evaluate_gate, GatePolicy};
use crate::flow::{parse_manifest, ExecuteOptions, FlowGraph, ProcessExecutor};
use crate::lineage::{replay_check, ReplayVerdict};
use crate::pipeline::{
    load_flow, run_flow, ChangeEvent, ChangeSource, Pipeline, PipelineConfig, MAIN_BRANCH,
};
use crate::repo::{Repository, DEFAULT_REPO_DIR};
use crate::store::{ArtifactId, ArtifactKind, ContentHash};
use crate::tuple::{ArtifactVersionTuple, RunId, RunKind, RunRecord, RunStatus, VersionPin};

pub const CONFIG_FILE: &str = "config.json";
pub const GATES_FILE: &str = "gates.json";

#[derive(Parser, Debug)]
#[command(name = "ca", version, about = "Continuous analysis engine")]
struct Cli {
    /// Repository directory.
    #[arg(long, global = true, env = "CA_REPO")]
    repo: Option<PathBuf>,
    /// Print one JSON document on stdout instead of tables.
    #[arg(long, global = true)]
    json: bool,
    /// Maximum number of tasks running at once.
    #[arg(long, global = true, env = "CA_PARALLELISM")]
    parallelism: Option<usize>,
    /// Share of the dataset a validation run sees.
    #[arg(long, global = true)]
    subset_fraction: Option<f64>,
    /// Seed for validation subset selection.
    #[arg(long, global = true)]
    subset_seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create the repository skeleton (no-op if it exists).
    Init,
    /// Store, fetch, verify and list artifacts.
    #[command(subcommand)]
    Artifact(ArtifactCmd),
    /// Validate, render or run a flow manifest.
    #[command(subcommand)]
    Flow(FlowCmd),
    /// Ingest change events and list planned runs.
    #[command(subcommand)]
    Event(EventCmd),
    /// Inspect and compare runs.
    #[command(subcommand)]
    Run(RunCmd),
    /// Evaluate a gate policy against a run.
    #[command(subcommand)]
    Gate(GateCmd),
    /// Approve a validation run for release.
    Approve {
        run: RunId,
        #[arg(long = "by")]
        approver: String,
        /// Release immediately after approving.
        #[arg(long)]
        auto_release: bool,
        #[arg(long)]
        flow: Option<PathBuf>,
    },
    /// Reject a validation run.
    Reject {
        run: RunId,
        #[arg(long = "by")]
        approver: String,
        #[arg(long)]
        reason: String,
    },
    /// Release an approved run on main.
    Release {
        run: RunId,
        /// Manifest to run; defaults to the flow the validation run used.
        #[arg(long)]
        flow: Option<PathBuf>,
    },
    /// Query the provenance graph.
    #[command(subcommand)]
    Lineage(LineageCmd),
    /// Re-execute a run and compare its outputs.
    Replay {
        run: RunId,
        #[arg(long)]
        flow: Option<PathBuf>,
    },
    /// Show or set branch pins.
    #[command(subcommand)]
    Pins(PinsCmd),
}

#[derive(Subcommand, Debug)]
enum ArtifactCmd {
    /// Store a file (or stdin with `-`).
    Put {
        file: PathBuf,
        #[arg(long)]
        kind: ArtifactKind,
        #[arg(long, default_value = "application/octet-stream")]
        media_type: String,
        #[arg(long = "label", value_parser = parse_kv)]
        labels: Vec<(String, String)>,
    },
    /// Write an artifact's bytes to stdout or `--out`.
    Get {
        id: ArtifactId,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Recompute an artifact's hash and compare.
    Verify { id: ArtifactId },
    /// List stored artifacts.
    Ls {
        #[arg(long)]
        kind: Option<ArtifactKind>,
        #[arg(long = "label", value_parser = parse_kv)]
        labels: Vec<(String, String)>,
    },
}

#[derive(Subcommand, Debug)]
enum FlowCmd {
    /// Check a manifest and report every violation.
    Validate { manifest: PathBuf },
    /// Render the step graph as DOT.
    Graph { manifest: PathBuf },
    /// Execute a flow with a branch's pins on the full data.
    Run {
        manifest: PathBuf,
        #[arg(long, default_value = MAIN_BRANCH)]
        branch: String,
    },
}

#[derive(Subcommand, Debug)]
enum EventCmd {
    /// Ingest a change event and plan its validation run.
    Emit(EmitArgs),
    /// List planned validation runs.
    Ls,
}

#[derive(Args, Debug)]
struct EmitArgs {
    #[arg(long)]
    source: ChangeSource,
    #[arg(long = "ref")]
    git_ref: String,
    #[arg(long)]
    version: String,
    #[arg(long)]
    content: Option<ContentHash>,
    /// Event id; derived from the other fields when omitted.
    #[arg(long)]
    id: Option<String>,
    /// Also execute the planned validation run with this manifest.
    #[arg(long)]
    flow: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum RunCmd {
    /// List recorded runs.
    Ls {
        #[arg(long)]
        branch: Option<String>,
        #[arg(long)]
        kind: Option<String>,
    },
    /// Show one run with its step outcomes.
    Show { run: RunId },
    /// Tuple differences and metric deltas between two aligned runs.
    Diff { a: RunId, b: RunId },
}

#[derive(Subcommand, Debug)]
enum GateCmd {
    /// Evaluate a gate policy against a run's metrics.
    Eval {
        run: RunId,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum LineageCmd {
    /// Runs that consumed an artifact, oldest first.
    WhoUses { artifact: ArtifactId },
    /// Every artifact and run upstream of an artifact.
    Provenance { artifact: ArtifactId },
}

#[derive(Subcommand, Debug)]
enum PinsCmd {
    /// Pins of one branch or all branches.
    Show { branch: Option<String> },
    /// Seed a branch's pins: `--pin component=version[@content-hash]`.
    Set {
        branch: String,
        #[arg(long = "pin", value_parser = parse_pin, required = true)]
        pins: Vec<VersionPin>,
    },
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

fn parse_pin(s: &str) -> std::result::Result<VersionPin, String> {
    let (component, rest) = s
        .split_once('=')
        .ok_or_else(|| format!("expected component=version[@hash], got `{s}`"))?;
    let (version, content) = match rest.rsplit_once('@') {
        Some((v, h)) => (v, Some(h.parse::<ContentHash>().map_err(|e| e.to_string())?)),
        None => (rest, None),
    };
    let pin = VersionPin::new(component, version).map_err(|e| e.to_string())?;
    Ok(match content {
        Some(h) => pin.with_content(h),
        None => pin,
    })
}

/// Resolved settings: flags, then environment, then `<repo>/config.json`,
/// then defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub repo_path: PathBuf,
    pub parallelism: usize,
    pub subset_fraction: f64,
    pub subset_seed: u64,
    pub json: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    parallelism: Option<usize>,
    subset_fraction: Option<f64>,
    subset_seed: Option<u64>,
}

impl CliConfig {
    fn resolve(cli: &Cli) -> Result<Self> {
        let repo_path = cli.repo.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_REPO_DIR));
        let file: FileConfig = match std::fs::read_to_string(repo_path.join(CONFIG_FILE)) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{CONFIG_FILE}: {e}")))?,
            Err(_) => FileConfig::default(),
        };
        let defaults = PipelineConfig::default();
        let cfg = CliConfig {
            repo_path,
            parallelism: cli.parallelism.or(file.parallelism).unwrap_or(defaults.parallelism),
            subset_fraction: cli
                .subset_fraction
                .or(file.subset_fraction)
                .unwrap_or(defaults.subset_fraction),
            subset_seed: cli.subset_seed.or(file.subset_seed).unwrap_or(defaults.subset_seed),
            json: cli.json,
        };
        if cfg.parallelism < 1 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        if !(cfg.subset_fraction > 0.0 && cfg.subset_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "subset fraction {} is outside (0, 1]",
                cfg.subset_fraction
            )));
        }
        Ok(cfg)
    }
}

/// What a command printed: the JSON form, the human form, and the exit
/// code (nonzero when the command ran but reports a failing verdict).
pub struct Reply {
    json: Value,
    human: Human,
    code: i32,
}

enum Human {
    Text(String),
    Bytes(Vec<u8>),
}

impl Reply {
    fn new(json: Value, human: impl Into<String>) -> Self {
        Self {
            json,
            human: Human::Text(human.into()),
            code: 0,
        }
    }

    fn code(mut self, code: i32) -> Self {
        self.code = code;
        self
    }
}

fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ");
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    };
    let mut out = line(headers.to_vec());
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn read_manifest(path: &Path) -> Result<FlowGraph> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::NotFound(format!("manifest {}: {e}", path.display())))?;
    parse_manifest(&text)
}

fn flow_for(repo: &Repository, run: &RunRecord, path: Option<&Path>) -> Result<FlowGraph> {
    match path {
        Some(p) => read_manifest(p),
        None => load_flow(repo, run),
    }
}

fn run_row(r: &RunRecord) -> Vec<String> {
    vec![
        r.run_id.to_string(),
        r.kind.to_string(),
        r.branch.clone(),
        r.status.to_string(),
        r.started_at.to_rfc3339(),
    ]
}

fn run_summary(r: &RunRecord) -> Reply {
    let code = if r.status == RunStatus::Succeeded { 0 } else { 1 };
    let mut human = table(&["RUN", "KIND", "BRANCH", "STATUS", "STARTED"], &[run_row(r)]);
    for o in &r.step_outcomes {
        human.push_str(&format!("  {:<20} exit {:<4} {} ms\n", o.task().to_string(), o.exit_code, o.wall_time_ms));
    }
    for id in &r.result_ids {
        human.push_str(&format!("  result {id}\n"));
    }
    Reply::new(to_json(r), human).code(code)
}

struct Ctx {
    cfg: CliConfig,
}

impl Ctx {
    fn repo(&self) -> Result<Repository> {
        Repository::open(&self.cfg.repo_path)
    }

    fn pipeline_config(&self, repo: &Repository) -> Result<PipelineConfig> {
        Ok(PipelineConfig {
            subset_fraction: self.cfg.subset_fraction,
            subset_seed: self.cfg.subset_seed,
            parallelism: self.cfg.parallelism,
            policy: GatePolicy::load(&repo.root().join(GATES_FILE))?,
        })
    }

    fn run(&self, cmd: Command) -> Result<Reply> {
        match cmd {
            Command::Init => {
                let repo = Repository::init(&self.cfg.repo_path)?;
                let root = repo.root().display().to_string();
                Ok(Reply::new(json!({ "repo": root }), format!("initialized {root}\n")))
            }
            Command::Artifact(c) => self.artifact(c),
            Command::Flow(c) => self.flow(c),
            Command::Event(c) => self.event(c),
            Command::Run(c) => self.run_cmd(c),
            Command::Gate(GateCmd::Eval { run, policy }) => {
                let repo = self.repo()?;
                let record = repo.load_run(&run)?;
                let policy = match policy {
                    Some(p) => GatePolicy::load(&p)?,
                    None => GatePolicy::load(&repo.root().join(GATES_FILE))?,
                };
                let bundle = repo.load_feedback(&record)?;
                let report = evaluate_gate(&bundle.metrics, &policy);
                let rows: Vec<Vec<String>> = report
                    .results
                    .iter()
                    .map(|r| {
                        vec![
                            r.metric.clone(),
                            format!("{} {}", r.op, r.threshold),
                            r.observed.map_or("absent".into(), |v| v.to_string()),
                            if r.satisfied { "ok" } else { "FAIL" }.into(),
                        ]
                    })
                    .collect();
                let mut human = table(&["METRIC", "CONSTRAINT", "OBSERVED", "RESULT"], &rows);
                human.push_str(if report.pass { "gate: pass\n" } else { "gate: FAIL\n" });
                let code = if report.pass { 0 } else { 1 };
                Ok(Reply::new(to_json(&report), human).code(code))
            }
            Command::Approve {
                run,
                approver,
                auto_release,
                flow,
            } => {
                let repo = self.repo()?;
                let pipe = Pipeline::new(&repo, self.pipeline_config(&repo)?);
                let req = pipe.approve(&run, &approver)?;
                let mut human = format!("approved {run} by {approver}\n");
                let mut doc = json!({ "promotion": to_json(&req) });
                let mut code = 0;
                if auto_release {
                    let record = repo.load_run(&run)?;
                    let graph = flow_for(&repo, &record, flow.as_deref())?;
                    let rel = pipe.run_release(&run, &graph, &ProcessExecutor::new())?;
                    let summary = run_summary(&rel);
                    code = summary.code;
                    if let Human::Text(t) = summary.human {
                        human.push_str(&t);
                    }
                    doc["release"] = summary.json;
                }
                Ok(Reply::new(doc, human).code(code))
            }
            Command::Reject {
                run,
                approver,
                reason,
            } => {
                let repo = self.repo()?;
                let pipe = Pipeline::new(&repo, self.pipeline_config(&repo)?);
                let req = pipe.reject(&run, &approver, &reason)?;
                Ok(Reply::new(to_json(&req), format!("rejected {run} by {approver}: {reason}\n")))
            }
            Command::Release { run, flow } => {
                let repo = self.repo()?;
                let pipe = Pipeline::new(&repo, self.pipeline_config(&repo)?);
                let record = repo.load_run(&run)?;
                let graph = flow_for(&repo, &record, flow.as_deref())?;
                Ok(run_summary(&pipe.run_release(&run, &graph, &ProcessExecutor::new())?))
            }
            Command::Lineage(c) => {
                let repo = self.repo()?;
                match c {
                    LineageCmd::WhoUses { artifact } => {
                        let graph = repo.lineage()?;
                        let runs = graph.runs_using(&artifact);
                        let human: String = runs.iter().map(|r| format!("{r}\n")).collect();
                        Ok(Reply::new(json!({ "artifact": artifact, "runs": runs }), human))
                    }
                    LineageCmd::Provenance { artifact } => {
                        let nodes = repo.provenance_of(&artifact)?;
                        let human: String = nodes.iter().map(|n| format!("{n}\n")).collect();
                        Ok(Reply::new(json!({ "artifact": artifact, "nodes": nodes }), human))
                    }
                }
            }
            Command::Replay { run, flow } => {
                let repo = self.repo()?;
                let record = repo.load_run(&run)?;
                let graph = flow_for(&repo, &record, flow.as_deref())?;
                let report = replay_check(&repo, &run, &graph, &ProcessExecutor::new(), self.cfg.parallelism)?;
                let (human, code) = match &report.verdict {
                    ReplayVerdict::Identical => (format!("identical (replay {})\n", report.replay), 0),
                    ReplayVerdict::Diverged(ds) => {
                        let rows: Vec<Vec<String>> = ds
                            .iter()
                            .map(|d| {
                                let h = |x: Option<ContentHash>| x.map_or("-".into(), |h| h.to_hex()[..12].to_string());
                                vec![d.task.clone(), d.slot.clone(), h(d.old_hash), h(d.new_hash)]
                            })
                            .collect();
                        let mut t = format!("diverged (replay {})\n", report.replay);
                        t.push_str(&table(&["TASK", "SLOT", "OLD", "NEW"], &rows));
                        (t, 1)
                    }
                };
                Ok(Reply::new(to_json(&report), human).code(code))
            }
            Command::Pins(c) => {
                let repo = self.repo()?;
                let pipe = Pipeline::new(&repo, self.pipeline_config(&repo)?);
                match c {
                    PinsCmd::Show { branch } => {
                        let all = pipe.all_pins()?;
                        let shown: BTreeMap<_, _> = all
                            .into_iter()
                            .filter(|(b, _)| branch.as_deref().is_none_or(|x| x == b))
                            .collect();
                        if let Some(b) = &branch {
                            if shown.is_empty() {
                                return Err(Error::UnknownBranch(b.clone()));
                            }
                        }
                        let mut rows = Vec::new();
                        for (b, p) in &shown {
                            for pin in p.pins.pins() {
                                rows.push(vec![
                                    b.clone(),
                                    pin.component.clone(),
                                    pin.version.clone(),
                                    pin.content.map_or(String::new(), |h| h.to_hex()),
                                ]);
                            }
                        }
                        Ok(Reply::new(to_json(&shown), table(&["BRANCH", "COMPONENT", "VERSION", "CONTENT"], &rows)))
                    }
                    PinsCmd::Set { branch, pins } => {
                        let tuple = ArtifactVersionTuple::from_pins(pins)?;
                        pipe.set_branch_pins(&branch, tuple.clone())?;
                        Ok(Reply::new(
                            json!({ "branch": branch, "pins": tuple }),
                            format!("pins set for {branch}\n"),
                        ))
                    }
                }
            }
        }
    }

    fn artifact(&self, cmd: ArtifactCmd) -> Result<Reply> {
        let repo = self.repo()?;
        match cmd {
            ArtifactCmd::Put {
                file,
                kind,
                media_type,
                labels,
            } => {
                let bytes = if file.as_os_str() == "-" {
                    let mut buf = Vec::new();
                    std::io::stdin().read_to_end(&mut buf)?;
                    buf
                } else {
                    std::fs::read(&file)?
                };
                let id = repo.put_artifact(kind, &bytes, &media_type, labels.into_iter().collect())?;
                Ok(Reply::new(json!({ "id": id, "size": bytes.len() }), format!("{id}\n")))
            }
            ArtifactCmd::Get { id, out } => {
                let bytes = repo.get_artifact(&id)?;
                if let Some(path) = out {
                    std::fs::write(&path, &bytes)?;
                    let p = path.display().to_string();
                    return Ok(Reply::new(json!({ "id": id, "size": bytes.len(), "written": p }), format!("wrote {p}\n")));
                }
                Ok(Reply {
                    json: json!({ "id": id, "size": bytes.len(), "content_hex": hex::encode(&bytes) }),
                    human: Human::Bytes(bytes),
                    code: 0,
                })
            }
            ArtifactCmd::Verify { id } => {
                if repo.store().record(&id)?.is_none() {
                    return Err(Error::NotFound(id.to_string()));
                }
                let ok = repo.verify(&id)?;
                let human = format!("{id}: {}\n", if ok { "ok" } else { "INTEGRITY VIOLATION" });
                Ok(Reply::new(json!({ "id": id, "ok": ok }), human).code(if ok { 0 } else { 3 }))
            }
            ArtifactCmd::Ls { kind, labels } => {
                let records = repo.list_artifacts(kind, &labels.into_iter().collect())?;
                let rows: Vec<Vec<String>> = records
                    .iter()
                    .map(|r| {
                        vec![
                            r.id().to_string(),
                            r.size.to_string(),
                            r.media_type.clone(),
                            r.labels.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(","),
                        ]
                    })
                    .collect();
                Ok(Reply::new(to_json(&records), table(&["ID", "SIZE", "MEDIA TYPE", "LABELS"], &rows)))
            }
        }
    }

    fn flow(&self, cmd: FlowCmd) -> Result<Reply> {
        match cmd {
            FlowCmd::Validate { manifest } => {
                let graph = read_manifest(&manifest)?;
                graph.check()?;
                let order = graph.topo_order()?;
                Ok(Reply::new(
                    json!({ "valid": true, "steps": order }),
                    format!("valid: {} steps, order {}\n", order.len(), order.join(" -> ")),
                ))
            }
            FlowCmd::Graph { manifest } => {
                let dot = read_manifest(&manifest)?.to_dot();
                Ok(Reply::new(json!({ "dot": dot }), dot))
            }
            FlowCmd::Run { manifest, branch } => {
                let graph = read_manifest(&manifest)?;
                let repo = self.repo()?;
                let pipe = Pipeline::new(&repo, self.pipeline_config(&repo)?);
                let pins = match pipe.branch_pins(&branch)? {
                    Some(p) => p,
                    None => pipe
                        .branch_pins(MAIN_BRANCH)?
                        .ok_or_else(|| Error::UnknownBranch(branch.clone()))?,
                };
                let opts = ExecuteOptions::new(RunKind::Validation, branch.clone())
                    .label("branch", branch)
                    .parallelism(self.cfg.parallelism);
                let record = run_flow(&repo, &graph, &pins.pins, &ProcessExecutor::new(), &opts)?;
                Ok(run_summary(&record))
            }
        }
    }

    fn event(&self, cmd: EventCmd) -> Result<Reply> {
        let repo = self.repo()?;
        let pipe = Pipeline::new(&repo, self.pipeline_config(&repo)?);
        match cmd {
            EventCmd::Emit(a) => {
                let graph = a.flow.as_deref().map(read_manifest).transpose()?;
                let mut pin = VersionPin::new(a.source.component(), a.version.clone())?;
                if let Some(h) = a.content {
                    pin = pin.with_content(h);
                }
                let id = a.id.unwrap_or_else(|| {
                    let mut h = Sha256::new();
                    h.update(format!(
                        "{}\n{}\n{}\n{}\n",
                        a.source,
                        a.git_ref,
                        a.version,
                        a.content.map_or(String::new(), |c| c.to_hex())
                    ));
                    format!("evt-{}", &hex::encode(h.finalize())[..16])
                });
                let event = ChangeEvent::new(id, a.source, a.git_ref, pin);
                let plan = pipe.ingest_event(&event)?;
                let mut human = format!(
                    "planned {} validation on {} (tuple {})\n",
                    plan.event_id,
                    plan.branch,
                    &plan.tuple_hash.to_hex()[..12]
                );
                let mut doc = json!({ "plan": to_json(&plan) });
                let mut code = 0;
                if let Some(graph) = graph {
                    let record = pipe.run_validation(&plan, &graph, &ProcessExecutor::new())?;
                    let summary = run_summary(&record);
                    code = summary.code;
                    if let Human::Text(t) = summary.human {
                        human.push_str(&t);
                    }
                    doc["run"] = summary.json;
                }
                Ok(Reply::new(doc, human).code(code))
            }
            EventCmd::Ls => {
                let plans = pipe.plans()?;
                let rows: Vec<Vec<String>> = plans
                    .iter()
                    .map(|p| {
                        vec![
                            p.event_id.clone(),
                            p.source.to_string(),
                            p.branch.clone(),
                            p.tuple_hash.to_hex()[..12].to_string(),
                        ]
                    })
                    .collect();
                Ok(Reply::new(to_json(&plans), table(&["EVENT", "SOURCE", "BRANCH", "TUPLE"], &rows)))
            }
        }
    }

    fn run_cmd(&self, cmd: RunCmd) -> Result<Reply> {
        let repo = self.repo()?;
        match cmd {
            RunCmd::Ls { branch, kind } => {
                let runs: Vec<RunRecord> = repo
                    .list_runs()?
                    .into_iter()
                    .filter(|r| branch.as_deref().is_none_or(|b| r.branch == b))
                    .filter(|r| kind.as_deref().is_none_or(|k| r.kind.to_string() == k))
                    .collect();
                let rows: Vec<Vec<String>> = runs.iter().map(run_row).collect();
                let listing: Vec<Value> = runs
                    .iter()
                    .map(|r| {
                        json!({
                            "run_id": r.run_id, "kind": r.kind, "branch": r.branch,
                            "status": r.status, "started_at": r.started_at,
                        })
                    })
                    .collect();
                Ok(Reply::new(
                    Value::Array(listing),
                    table(&["RUN", "KIND", "BRANCH", "STATUS", "STARTED"], &rows),
                ))
            }
            RunCmd::Show { run } => {
                let record = repo.load_run(&run)?;
                let summary = run_summary(&record);
                Ok(Reply { code: 0, ..summary })
            }
            RunCmd::Diff { a, b } => {
                let cmp = repo.compare_runs(&a, &b)?;
                let mut human = String::new();
                for c in &cmp.tuple_diff {
                    let v = |p: &Option<VersionPin>| p.as_ref().map_or("-".to_string(), |p| p.version.clone());
                    human.push_str(&format!("pin {}: {} -> {}\n", c.component, v(&c.a), v(&c.b)));
                }
                let rows: Vec<Vec<String>> = cmp
                    .deltas
                    .iter()
                    .map(|d| vec![d.metric.clone(), d.a.to_string(), d.b.to_string(), format!("{:+}", d.delta)])
                    .collect();
                human.push_str(&table(&["METRIC", "A", "B", "DELTA"], &rows));
                Ok(Reply::new(to_json(&cmp), human))
            }
        }
    }
}

fn error_json(e: &Error) -> Value {
    let mut doc = json!({ "error": { "code": e.exit_code(), "message": e.to_string() } });
    if let Error::InvalidFlow(v) = e {
        doc["error"]["violations"] = to_json(v);
    }
    doc
}

/// Runs `ca` with `argv` (program name first), writing to the given
/// streams. Returns the process exit code.
pub fn dispatch_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let json_mode = cli.json;
    let result = CliConfig::resolve(&cli).and_then(|cfg| Ctx { cfg }.run(cli.command));
    match result {
        Ok(reply) => {
            let _ = if json_mode {
                writeln!(out, "{}", serde_json::to_string_pretty(&reply.json).expect("json"))
            } else {
                match &reply.human {
                    Human::Text(t) => out.write_all(t.as_bytes()),
                    Human::Bytes(b) => out.write_all(b),
                }
            };
            reply.code
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if let Error::InvalidFlow(vs) = &e {
                for v in vs {
                    let _ = writeln!(err, "  {v}");
                }
            }
            if json_mode {
                let _ = writeln!(out, "{}", serde_json::to_string_pretty(&error_json(&e)).expect("json"));
            }
            e.exit_code()
        }
    }
}

/// [`dispatch_with`] on the process's stdout and stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    let code = dispatch_with(argv, &mut stdout.lock(), &mut stderr.lock());
    let _ = std::io::stdout().flush();
    code
}
