use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use crate::error::{Error, Result};

pub const ENGINE_VERSION: &str = concat!("ca-core ", env!("CARGO_PKG_VERSION"));

/// Which part of a step a task runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Single,
    Partition(u32),
    Merge,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskKey {
    pub step: String,
    pub phase: Phase,
}

impl TaskKey {
    pub fn single(step: &str) -> Self {
        Self { step: step.into(), phase: Phase::Single }
    }

    pub fn partition(step: &str, index: u32) -> Self {
        Self { step: step.into(), phase: Phase::Partition(index) }
    }

    pub fn merge(step: &str) -> Self {
        Self { step: step.into(), phase: Phase::Merge }
    }
}

/// `step`, `step[p<i>]` or `step[merge]`; also used as a directory name.
impl fmt::Display for TaskKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.phase {
            Phase::Single => f.write_str(&self.step),
            Phase::Partition(i) => write!(f, "{}[p{i}]", self.step),
            Phase::Merge => write!(f, "{}[merge]", self.step),
        }
    }
}

/// Everything an executor needs to run one task.
#[derive(Clone, Debug)]
pub struct StepRequest {
    pub task: TaskKey,
    /// Command with placeholders already rendered to workdir-relative paths.
    pub command: String,
    /// Input slot -> materialized file.
    pub inputs: BTreeMap<String, PathBuf>,
    /// Partition outputs in partition-index order (merge tasks only).
    pub partition_inputs: Vec<PathBuf>,
    /// Output slots the task must produce under `workdir/out/`.
    pub outputs: Vec<String>,
    pub env: BTreeMap<String, String>,
    pub workdir: PathBuf,
}

impl StepRequest {
    pub fn output_path(&self, slot: &str) -> PathBuf {
        self.workdir.join("out").join(slot)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StepResponse {
    pub exit_code: i32,
    pub outputs: BTreeMap<String, Vec<u8>>,
    pub log: Vec<u8>,
    pub env_snapshot: Vec<u8>,
}

impl StepResponse {
    pub fn ok<S: Into<String>, B: Into<Vec<u8>>>(outputs: impl IntoIterator<Item = (S, B)>) -> Self {
        Self {
            exit_code: 0,
            outputs: outputs.into_iter().map(|(s, b)| (s.into(), b.into())).collect(),
            ..Self::default()
        }
    }

    pub fn exit(code: i32) -> Self {
        Self { exit_code: code, ..Self::default() }
    }

    pub fn with_log(mut self, log: impl Into<Vec<u8>>) -> Self {
        self.log = log.into();
        self
    }
}

/// Runs one task. An `Err` is an infrastructure failure; a command that
/// ran and failed is an `Ok` with a nonzero exit code.
pub trait StepExecutor: Send + Sync {
    fn run(&self, request: &StepRequest) -> Result<StepResponse>;
}

impl<T: StepExecutor + ?Sized> StepExecutor for &T {
    fn run(&self, request: &StepRequest) -> Result<StepResponse> {
        (**self).run(request)
    }
}

impl<T: StepExecutor + ?Sized> StepExecutor for Arc<T> {
    fn run(&self, request: &StepRequest) -> Result<StepResponse> {
        (**self).run(request)
    }
}

/// Sorted `KEY=VALUE` lines of the given environment plus the engine
/// version.
pub fn env_snapshot(env: &BTreeMap<String, String>) -> Vec<u8> {
    let mut all = env.clone();
    all.insert("CA_ENGINE_VERSION".into(), ENGINE_VERSION.into());
    let mut out = Vec::new();
    for (k, v) in all {
        out.extend_from_slice(format!("{k}={v}\n").as_bytes());
    }
    out
}

/// Runs each task as `sh -c <command>` inside its working directory with a
/// cleared environment. Only the whitelisted variables (plus `PATH`, so
/// commands can be found) are visible to the process.
#[derive(Clone, Debug)]
pub struct ProcessExecutor {
    shell: String,
}

impl Default for ProcessExecutor {
    fn default() -> Self {
        Self { shell: "sh".into() }
    }
}

impl ProcessExecutor {
    pub fn new() -> Self {
        Self::default()
    }
}

impl StepExecutor for ProcessExecutor {
    fn run(&self, req: &StepRequest) -> Result<StepResponse> {
        if req.command.trim().is_empty() {
            return Err(Error::Executor(format!("{}: empty command", req.task)));
        }
        fs::create_dir_all(req.workdir.join("out"))?;
        let log_path = req.workdir.join(".log");
        let log = File::create(&log_path)?;
        let mut cmd = Command::new(&self.shell);
        cmd.arg("-c")
            .arg(&req.command)
            .current_dir(&req.workdir)
            .env_clear()
            .envs(&req.env)
            .stdin(Stdio::null())
            .stdout(Stdio::from(log.try_clone()?))
            .stderr(Stdio::from(log));
        if !req.env.contains_key("PATH") {
            if let Some(path) = std::env::var_os("PATH") {
                cmd.env("PATH", path);
            }
        }
        let status = cmd
            .status()
            .map_err(|e| Error::Executor(format!("{}: spawn failed: {e}", req.task)))?;
        let exit_code = status.code().unwrap_or(-1);
        let mut outputs = BTreeMap::new();
        if exit_code == 0 {
            for slot in &req.outputs {
                match fs::read(req.output_path(slot)) {
                    Ok(b) => {
                        outputs.insert(slot.clone(), b);
                    }
                    Err(e) if e.kind() == io::ErrorKind::NotFound => {
                        return Err(Error::MissingOutput { slot: slot.clone() })
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
        Ok(StepResponse {
            exit_code,
            outputs,
            log: fs::read(&log_path)?,
            env_snapshot: env_snapshot(&req.env),
        })
    }
}

type ScriptFn = dyn Fn(&StepRequest) -> StepResponse + Send + Sync;

#[derive(Clone)]
pub enum Script {
    Fixed(StepResponse),
    Dynamic(Arc<ScriptFn>),
}

impl fmt::Debug for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Script::Fixed(r) => f.debug_tuple("Fixed").field(r).finish(),
            Script::Dynamic(_) => f.write_str("Dynamic(..)"),
        }
    }
}

/// Start/finish sequence numbers of one task, from a counter shared by all
/// tasks of a recording executor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub task: TaskKey,
    pub started: u64,
    pub finished: u64,
}

#[derive(Default)]
struct Sequencer {
    done: Mutex<HashMap<String, usize>>,
    cv: Condvar,
}

/// Test executor answering from scripts keyed by task.
///
/// Lookup order for a task is its exact key (`step[p1]`), then the bare step
/// name, then the fallback. [`RecordingExecutor::completion_order`] forces
/// the partitions of a step to finish in a given order.
#[derive(Default)]
pub struct RecordingExecutor {
    scripts: HashMap<String, Script>,
    fallback: Option<Script>,
    orders: HashMap<String, Vec<u32>>,
    seq: Sequencer,
    clock: AtomicU64,
    trace: Mutex<Vec<TraceEvent>>,
}

impl RecordingExecutor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Deterministic executor: each declared output is
    /// `"<task>/<slot>\n"` followed by the contents of every input (in slot
    /// order) and every partition input (in index order).
    pub fn echo() -> Self {
        Self::new().fallback_fn(echo_response)
    }

    pub fn script(mut self, key: &str, response: StepResponse) -> Self {
        self.scripts.insert(key.into(), Script::Fixed(response));
        self
    }

    pub fn script_fn(
        mut self,
        key: &str,
        f: impl Fn(&StepRequest) -> StepResponse + Send + Sync + 'static,
    ) -> Self {
        self.scripts.insert(key.into(), Script::Dynamic(Arc::new(f)));
        self
    }

    pub fn fallback_fn(mut self, f: impl Fn(&StepRequest) -> StepResponse + Send + Sync + 'static) -> Self {
        self.fallback = Some(Script::Dynamic(Arc::new(f)));
        self
    }

    /// Partition `order[k]` of `step` may only finish after partitions
    /// `order[..k]` have finished. Needs parallelism >= partition count; a
    /// task waits at most two seconds for its turn.
    pub fn completion_order(mut self, step: &str, order: Vec<u32>) -> Self {
        self.orders.insert(step.into(), order);
        self
    }

    pub fn trace(&self) -> Vec<TraceEvent> {
        let mut t = self.trace.lock().unwrap_or_else(|p| p.into_inner()).clone();
        t.sort_by_key(|e| e.finished);
        t
    }

    fn lookup(&self, task: &TaskKey) -> Option<&Script> {
        self.scripts
            .get(&task.to_string())
            .or_else(|| self.scripts.get(&task.step))
            .or(self.fallback.as_ref())
    }

    fn wait_turn(&self, task: &TaskKey) {
        let (Phase::Partition(i), Some(order)) = (task.phase, self.orders.get(&task.step)) else {
            return;
        };
        let Some(rank) = order.iter().position(|&p| p == i) else {
            return;
        };
        let mut done = self.seq.done.lock().unwrap_or_else(|p| p.into_inner());
        let deadline = std::time::Instant::now() + Duration::from_secs(2);
        while done.get(&task.step).copied().unwrap_or(0) < rank {
            let left = deadline.saturating_duration_since(std::time::Instant::now());
            if left.is_zero() {
                break;
            }
            done = self.seq.cv.wait_timeout(done, left).unwrap_or_else(|p| p.into_inner()).0;
        }
    }

    fn mark_done(&self, task: &TaskKey) {
        if matches!(task.phase, Phase::Partition(_)) && self.orders.contains_key(&task.step) {
            let mut done = self.seq.done.lock().unwrap_or_else(|p| p.into_inner());
            *done.entry(task.step.clone()).or_insert(0) += 1;
            self.seq.cv.notify_all();
        }
    }
}

impl StepExecutor for RecordingExecutor {
    fn run(&self, req: &StepRequest) -> Result<StepResponse> {
        let started = self.clock.fetch_add(1, Ordering::SeqCst);
        let script = self
            .lookup(&req.task)
            .ok_or_else(|| Error::Executor(format!("no script for task {}", req.task)))?;
        let mut resp = match script {
            Script::Fixed(r) => r.clone(),
            Script::Dynamic(f) => f(req),
        };
        if resp.env_snapshot.is_empty() {
            resp.env_snapshot = env_snapshot(&req.env);
        }
        if resp.log.is_empty() {
            resp.log = format!("{} exited {}\n", req.task, resp.exit_code).into_bytes();
        }
        if resp.exit_code == 0 {
            if let Some(missing) = req.outputs.iter().find(|s| !resp.outputs.contains_key(*s)) {
                return Err(Error::MissingOutput { slot: missing.clone() });
            }
        }
        self.wait_turn(&req.task);
        let finished = self.clock.fetch_add(1, Ordering::SeqCst);
        self.trace
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .push(TraceEvent { task: req.task.clone(), started, finished });
        self.mark_done(&req.task);
        Ok(resp)
    }
}

fn echo_response(req: &StepRequest) -> StepResponse {
    let mut body = Vec::new();
    for path in req.inputs.values().chain(&req.partition_inputs) {
        body.extend(fs::read(path).unwrap_or_default());
    }
    StepResponse::ok(req.outputs.iter().map(|slot| {
        let mut out = format!("{}/{slot}\n", req.task).into_bytes();
        out.extend_from_slice(&body);
        (slot.clone(), out)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(dir: &std::path::Path, command: &str, outputs: &[&str]) -> StepRequest {
        StepRequest {
            task: TaskKey::single("s"),
            command: command.into(),
            inputs: BTreeMap::new(),
            partition_inputs: Vec::new(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            env: BTreeMap::from([("MODE".to_string(), "test".to_string())]),
            workdir: dir.to_path_buf(),
        }
    }

    #[test]
    fn recording_returns_script_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let ex = RecordingExecutor::new().script("s", StepResponse::ok([("out", "x")]).with_log("L"));
        let r = ex.run(&request(dir.path(), "anything", &["out"])).unwrap();
        assert_eq!(r.exit_code, 0);
        assert_eq!(r.outputs["out"], b"x");
        assert_eq!(r.log, b"L");
    }

    #[test]
    fn recording_without_script_is_executor_failure() {
        let dir = tempfile::tempdir().unwrap();
        let ex = RecordingExecutor::new();
        assert!(matches!(ex.run(&request(dir.path(), "x", &[])), Err(Error::Executor(_))));
    }

    #[test]
    fn process_copy_preserves_bytes() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("in")).unwrap();
        fs::write(dir.path().join("in/src"), b"payload\x00\xff").unwrap();
        let mut req = request(dir.path(), "cp in/src out/dst", &["dst"]);
        req.inputs.insert("src".into(), dir.path().join("in/src"));
        let r = ProcessExecutor::new().run(&req).unwrap();
        assert_eq!(r.exit_code, 0);
        assert_eq!(r.outputs["dst"], b"payload\x00\xff");
        assert_eq!(
            String::from_utf8(r.env_snapshot).unwrap(),
            format!("CA_ENGINE_VERSION={ENGINE_VERSION}\nMODE=test\n")
        );
    }

    #[test]
    fn process_nonzero_exit_captures_log_without_missing_output() {
        let dir = tempfile::tempdir().unwrap();
        let req = request(dir.path(), "echo boom; echo err >&2; exit 1", &["never"]);
        let r = ProcessExecutor::new().run(&req).unwrap();
        assert_eq!(r.exit_code, 1);
        assert!(r.outputs.is_empty());
        let log = String::from_utf8(r.log).unwrap();
        assert!(log.contains("boom") && log.contains("err"));
    }

    #[test]
    fn process_missing_output_on_success() {
        let dir = tempfile::tempdir().unwrap();
        let req = request(dir.path(), "true", &["declared"]);
        assert!(matches!(
            ProcessExecutor::new().run(&req),
            Err(Error::MissingOutput { slot }) if slot == "declared"
        ));
    }

    #[test]
    fn process_env_is_whitelisted() {
        let dir = tempfile::tempdir().unwrap();
        let req = request(dir.path(), "env > out/e", &["e"]);
        let r = ProcessExecutor::new().run(&req).unwrap();
        let env = String::from_utf8(r.outputs["e"].clone()).unwrap();
        assert!(env.contains("MODE=test"));
        assert!(!env.contains("HOME="));
    }

    #[test]
    fn task_key_display() {
        assert_eq!(TaskKey::single("a").to_string(), "a");
        assert_eq!(TaskKey::partition("a", 2).to_string(), "a[p2]");
        assert_eq!(TaskKey::merge("a").to_string(), "a[merge]");
    }
}
