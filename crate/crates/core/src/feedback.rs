//! Feedback bundles, metrics and gate policies.
//!
//! Every finished run gets one bundle: a uniform record per task (log,
//! rendered command, bound inputs, outputs, telemetry, environment
//! snapshot) plus the flat metrics document the flow designated. Because
//! the entry layout never depends on the run kind, a validation run and the
//! release built from it can be compared field by field.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{StepOutcome, ENGINE_VERSION};
use crate::repo::Repository;
use crate::store::{ArtifactId, ArtifactKind};
use crate::tuple::{aligned, diff_tuples, PinChange, RunId, RunRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Telemetry {
    pub wall_time_ms: u64,
    pub exit_code: i32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub task: String,
    pub step: String,
    pub partition_index: Option<u32>,
    pub merge: bool,
    pub log_id: ArtifactId,
    pub command_rendered: String,
    /// Input slot to the artifact bound to it.
    pub input_parameters: BTreeMap<String, ArtifactId>,
    pub output_ids: BTreeMap<String, ArtifactId>,
    pub telemetry: Telemetry,
    pub env_snapshot_id: ArtifactId,
}

impl From<&StepOutcome> for FeedbackEntry {
    fn from(o: &StepOutcome) -> Self {
        Self {
            task: o.task().to_string(),
            step: o.step.clone(),
            partition_index: o.partition_index,
            merge: o.merge,
            log_id: o.log_id,
            command_rendered: o.command_rendered.clone(),
            input_parameters: o.inputs.iter().map(|(k, b)| (k.clone(), b.artifact)).collect(),
            output_ids: o.output_ids.clone(),
            telemetry: Telemetry {
                wall_time_ms: o.wall_time_ms,
                exit_code: o.exit_code,
            },
            env_snapshot_id: o.env_snapshot_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackBundle {
    pub run_id: RunId,
    pub engine_version: String,
    pub entries: Vec<FeedbackEntry>,
    pub metrics: BTreeMap<String, f64>,
}

impl FeedbackBundle {
    pub fn new(run_id: RunId, outcomes: &[StepOutcome]) -> Self {
        Self {
            run_id,
            engine_version: ENGINE_VERSION.to_string(),
            entries: outcomes.iter().map(FeedbackEntry::from).collect(),
            metrics: BTreeMap::new(),
        }
    }

    /// Dotted names of every field present: top-level keys, entry keys
    /// (`entries[].key`) and metric names (`metrics.name`).
    pub fn field_set(&self) -> BTreeSet<String> {
        let value = serde_json::to_value(self).expect("serializable bundle");
        let mut out = BTreeSet::new();
        if let serde_json::Value::Object(top) = value {
            for (k, v) in top {
                match (k.as_str(), v) {
                    ("entries", serde_json::Value::Array(items)) => {
                        for item in items {
                            if let serde_json::Value::Object(e) = item {
                                out.extend(e.keys().map(|ek| format!("entries[].{ek}")));
                            }
                        }
                    }
                    ("metrics", serde_json::Value::Object(m)) => {
                        out.extend(m.keys().map(|mk| format!("metrics.{mk}")));
                    }
                    _ => {}
                }
                out.insert(k);
            }
        }
        out
    }
}

/// Parses a flat metrics document: a JSON object whose values are all
/// numbers. An empty document yields no metrics.
pub fn parse_metrics(bytes: &[u8]) -> Result<BTreeMap<String, f64>> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(BTreeMap::new());
    }
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| Error::MalformedMetrics(e.to_string()))?;
    let serde_json::Value::Object(map) = value else {
        return Err(Error::MalformedMetrics("document is not a JSON object".into()));
    };
    map.into_iter()
        .map(|(k, v)| match v.as_f64() {
            Some(x) => Ok((k, x)),
            None => Err(Error::MalformedMetrics(format!("metric `{k}` is not a number: {v}"))),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "=", alias = "==")]
    Eq,
}

impl Comparator {
    pub fn holds(self, observed: f64, threshold: f64) -> bool {
        match self {
            Comparator::Le => observed <= threshold,
            Comparator::Lt => observed < threshold,
            Comparator::Ge => observed >= threshold,
            Comparator::Gt => observed > threshold,
            Comparator::Eq => observed == threshold,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Le => "<=",
            Comparator::Lt => "<",
            Comparator::Ge => ">=",
            Comparator::Gt => ">",
            Comparator::Eq => "=",
        }
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraint {
    pub metric: String,
    pub op: Comparator,
    pub threshold: f64,
}

impl Constraint {
    pub fn new(metric: impl Into<String>, op: Comparator, threshold: f64) -> Self {
        Self {
            metric: metric.into(),
            op,
            threshold,
        }
    }
}

/// A conjunction of metric thresholds. Metric names are unique.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GatePolicy {
    constraints: Vec<Constraint>,
}

impl GatePolicy {
    pub fn new(constraints: Vec<Constraint>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for c in &constraints {
            if !seen.insert(c.metric.as_str()) {
                return Err(Error::Config(format!(
                    "gate policy constrains `{}` more than once",
                    c.metric
                )));
            }
        }
        Ok(Self { constraints })
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            constraints: Vec<Constraint>,
        }
        let raw: Raw =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("gate policy: {e}")))?;
        Self::new(raw.constraints)
    }

    /// Reads a policy file; a missing file is the empty policy.
    pub fn load(path: &Path) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(text) => Self::from_json(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(e.into()),
        }
    }
}

impl<'de> Deserialize<'de> for GatePolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            constraints: Vec<Constraint>,
        }
        let raw = Raw::deserialize(d)?;
        GatePolicy::new(raw.constraints).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintResult {
    pub metric: String,
    pub op: Comparator,
    pub threshold: f64,
    pub observed: Option<f64>,
    pub satisfied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub pass: bool,
    pub results: Vec<ConstraintResult>,
}

/// Checks every constraint against `metrics`. A constraint on a metric the
/// run did not report fails.
pub fn evaluate_gate(metrics: &BTreeMap<String, f64>, policy: &GatePolicy) -> GateReport {
    let results: Vec<ConstraintResult> = policy
        .constraints
        .iter()
        .map(|c| {
            let observed = metrics.get(&c.metric).copied();
            ConstraintResult {
                metric: c.metric.clone(),
                op: c.op,
                threshold: c.threshold,
                observed,
                satisfied: observed.is_some_and(|v| c.op.holds(v, c.threshold)),
            }
        })
        .collect();
    GateReport {
        pass: results.iter().all(|r| r.satisfied),
        results,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `b - a`.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub run_a: RunId,
    pub run_b: RunId,
    pub tuple_diff: Vec<PinChange>,
    pub deltas: Vec<MetricDelta>,
    pub only_in_a: BTreeMap<String, f64>,
    pub only_in_b: BTreeMap<String, f64>,
}

/// Metric deltas between two metric maps, keyed by name.
pub fn compare_metrics(
    a: &BTreeMap<String, f64>,
    b: &BTreeMap<String, f64>,
) -> (Vec<MetricDelta>, BTreeMap<String, f64>, BTreeMap<String, f64>) {
    let deltas = a
        .iter()
        .filter_map(|(k, &va)| {
            b.get(k).map(|&vb| MetricDelta {
                metric: k.clone(),
                a: va,
                b: vb,
                delta: vb - va,
            })
        })
        .collect();
    let only = |x: &BTreeMap<String, f64>, y: &BTreeMap<String, f64>| {
        x.iter()
            .filter(|(k, _)| !y.contains_key(*k))
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    };
    (deltas, only(a, b), only(b, a))
}

impl Repository {
    /// Builds the feedback bundle for a persisted run, stores it as a
    /// `result` artifact and attaches it to the run. When `metrics` names
    /// an artifact, its flat JSON document becomes the bundle's metrics.
    pub fn collect_feedback(
        &self,
        run: &RunRecord,
        outcomes: &[StepOutcome],
        metrics: Option<ArtifactId>,
    ) -> Result<FeedbackBundle> {
        self.load_run(&run.run_id)?;
        for id in outcomes.iter().flat_map(|o| o.referenced_artifacts()) {
            if !self.store().contains(&id)? {
                return Err(Error::DanglingReference(format!(
                    "run {} outcome references unknown artifact {id}",
                    run.run_id
                )));
            }
        }
        let mut bundle = FeedbackBundle::new(run.run_id.clone(), outcomes);
        if let Some(id) = metrics {
            self.extract_metrics(&mut bundle, &id)?;
        }
        let bytes = serde_json::to_vec_pretty(&bundle).expect("serializable bundle");
        let id = self.put_artifact(
            ArtifactKind::Result,
            &bytes,
            "application/json",
            BTreeMap::from([
                ("role".to_string(), "feedback".to_string()),
                ("run".to_string(), run.run_id.to_string()),
            ]),
        )?;
        self.attach_feedback(&run.run_id, id)?;
        Ok(bundle)
    }

    /// Reads a metrics artifact into `bundle.metrics`.
    pub fn extract_metrics(&self, bundle: &mut FeedbackBundle, metrics: &ArtifactId) -> Result<()> {
        let bytes = self.get_artifact(metrics)?;
        bundle.metrics.extend(parse_metrics(&bytes)?);
        Ok(())
    }

    pub fn load_feedback(&self, run: &RunRecord) -> Result<FeedbackBundle> {
        let id = run
            .feedback_id
            .ok_or_else(|| Error::MissingFeedback(run.run_id.to_string()))?;
        let bytes = self.get_artifact(&id)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(id.to_string(), e))
    }

    /// Compares two aligned runs: tuple differences plus metric deltas.
    pub fn compare_runs(&self, a: &RunId, b: &RunId) -> Result<RunComparison> {
        let ra = self.load_run(a)?;
        let rb = self.load_run(b)?;
        if !aligned(&ra.tuple, &rb.tuple) {
            return Err(Error::NotAligned);
        }
        let fa = self.load_feedback(&ra)?;
        let fb = self.load_feedback(&rb)?;
        let (deltas, only_in_a, only_in_b) = compare_metrics(&fa.metrics, &fb.metrics);
        Ok(RunComparison {
            run_a: a.clone(),
            run_b: b.clone(),
            tuple_diff: diff_tuples(&ra.tuple, &rb.tuple),
            deltas,
            only_in_a,
            only_in_b,
        })
    }
}
