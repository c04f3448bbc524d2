//! Artifact version tuples and the run records bound to them.
//!
//! A tuple pins one version per component. `code`, `dependencies`,
//! `deployment` and `data` are mandatory; further components (critical
//! artifacts promoted out of a flow) may be added and take part in hashing
//! and alignment like the baseline ones.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::flow::StepOutcome;
use crate::repo::{self, Repository};
use crate::store::{ArtifactId, ArtifactKind, ContentHash};

pub const BASELINE_COMPONENTS: [&str; 4] = ["code", "data", "dependencies", "deployment"];

/// Artifact kind a component's content hash is expected to be stored under.
pub fn component_kind(component: &str) -> Option<ArtifactKind> {
    match component {
        "code" => Some(ArtifactKind::Code),
        "dependencies" => Some(ArtifactKind::Dependency),
        "deployment" => Some(ArtifactKind::Deployment),
        "data" => Some(ArtifactKind::Data),
        _ => None,
    }
}

pub(crate) fn is_valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| matches!(b, b'a'..=b'z' | b'0'..=b'9' | b'_' | b'-'))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct VersionPin {
    pub component: String,
    pub version: String,
    pub content: Option<ContentHash>,
}

impl VersionPin {
    pub fn new(component: impl Into<String>, version: impl Into<String>) -> Result<Self> {
        let pin = Self {
            component: component.into(),
            version: version.into(),
            content: None,
        };
        pin.check()?;
        Ok(pin)
    }

    pub fn with_content(mut self, content: ContentHash) -> Self {
        self.content = Some(content);
        self
    }

    fn check(&self) -> Result<()> {
        if !is_valid_name(&self.component) {
            return Err(Error::InvalidTuple(format!(
                "component name `{}` must match [a-z0-9_-]+",
                self.component
            )));
        }
        // the canonical encoding is newline-delimited
        if self.version.contains('\n') {
            return Err(Error::InvalidTuple(format!(
                "version of `{}` contains a newline",
                self.component
            )));
        }
        Ok(())
    }
}

/// Pins keyed by component name; iteration is always lexicographic.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct ArtifactVersionTuple {
    pins: BTreeMap<String, VersionPin>,
}

impl ArtifactVersionTuple {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a tuple from the four baseline versions, without content hashes.
    pub fn baseline(code: &str, dependencies: &str, deployment: &str, data: &str) -> Self {
        let mut t = Self::new();
        for (c, v) in [
            ("code", code),
            ("dependencies", dependencies),
            ("deployment", deployment),
            ("data", data),
        ] {
            t.insert(VersionPin::new(c, v).expect("baseline names are valid"));
        }
        t
    }

    /// Builds a tuple, rejecting duplicate component names.
    pub fn from_pins(pins: impl IntoIterator<Item = VersionPin>) -> Result<Self> {
        let mut t = Self::new();
        for pin in pins {
            pin.check()?;
            if t.pins.contains_key(&pin.component) {
                return Err(Error::InvalidTuple(format!(
                    "component `{}` pinned twice",
                    pin.component
                )));
            }
            t.pins.insert(pin.component.clone(), pin);
        }
        Ok(t)
    }

    /// Inserts or replaces the pin for its component.
    pub fn insert(&mut self, pin: VersionPin) -> Option<VersionPin> {
        self.pins.insert(pin.component.clone(), pin)
    }

    pub fn get(&self, component: &str) -> Option<&VersionPin> {
        self.pins.get(component)
    }

    pub fn pins(&self) -> impl Iterator<Item = &VersionPin> {
        self.pins.values()
    }

    pub fn components(&self) -> BTreeSet<&str> {
        self.pins.keys().map(String::as_str).collect()
    }

    pub fn len(&self) -> usize {
        self.pins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pins.is_empty()
    }

    pub fn missing_baseline(&self) -> Vec<String> {
        BASELINE_COMPONENTS
            .iter()
            .filter(|c| !self.pins.contains_key(**c))
            .map(|c| c.to_string())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let missing = self.missing_baseline();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidTuple(format!(
                "missing baseline component(s): {}",
                missing.join(", ")
            )))
        }
    }

    /// Deterministic byte encoding: `component\nversion\ncontent-or-empty\n`
    /// per pin in component order.
    pub fn canonical_encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        for pin in self.pins.values() {
            out.extend_from_slice(pin.component.as_bytes());
            out.push(b'\n');
            out.extend_from_slice(pin.version.as_bytes());
            out.push(b'\n');
            if let Some(h) = &pin.content {
                out.extend_from_slice(h.to_hex().as_bytes());
            }
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn hash(&self) -> Result<ContentHash> {
        Ok(ContentHash::of(&self.canonical_encode()?))
    }

    /// Same component key set; versions may differ.
    pub fn aligned(&self, other: &Self) -> bool {
        self.pins.keys().eq(other.pins.keys())
    }
}

/// One row of [`diff_tuples`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinChange {
    pub component: String,
    pub a: Option<VersionPin>,
    pub b: Option<VersionPin>,
}

/// Components whose pin differs or exists on only one side, sorted by name.
pub fn diff_tuples(a: &ArtifactVersionTuple, b: &ArtifactVersionTuple) -> Vec<PinChange> {
    let names: BTreeSet<&String> = a.pins.keys().chain(b.pins.keys()).collect();
    names
        .into_iter()
        .filter_map(|name| {
            let (pa, pb) = (a.pins.get(name), b.pins.get(name));
            (pa != pb).then(|| PinChange {
                component: name.clone(),
                a: pa.cloned(),
                b: pb.cloned(),
            })
        })
        .collect()
}

pub fn aligned(a: &ArtifactVersionTuple, b: &ArtifactVersionTuple) -> bool {
    a.aligned(b)
}

#[derive(Serialize, Deserialize)]
struct PinBody {
    version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    content: Option<ContentHash>,
}

impl Serialize for VersionPin {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Full<'a> {
            component: &'a str,
            version: &'a str,
            #[serde(skip_serializing_if = "Option::is_none")]
            content: Option<ContentHash>,
        }
        Full {
            component: &self.component,
            version: &self.version,
            content: self.content,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for VersionPin {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Full {
            component: String,
            version: String,
            #[serde(default)]
            content: Option<ContentHash>,
        }
        let f = Full::deserialize(d)?;
        let pin = VersionPin {
            component: f.component,
            version: f.version,
            content: f.content,
        };
        pin.check().map_err(serde::de::Error::custom)?;
        Ok(pin)
    }
}

// Serialized as `{component: {version, content?}}` in component order.
impl Serialize for ArtifactVersionTuple {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let body: BTreeMap<&str, PinBody> = self
            .pins
            .values()
            .map(|p| {
                (
                    p.component.as_str(),
                    PinBody {
                        version: p.version.clone(),
                        content: p.content,
                    },
                )
            })
            .collect();
        body.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ArtifactVersionTuple {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let body = BTreeMap::<String, PinBody>::deserialize(d)?;
        let mut t = ArtifactVersionTuple::new();
        for (component, b) in body {
            let pin = VersionPin {
                component,
                version: b.version,
                content: b.content,
            };
            pin.check().map_err(serde::de::Error::custom)?;
            t.insert(pin);
        }
        Ok(t)
    }
}

/// `<first 12 hex of tuple hash>-<6-digit sequence>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RunId(String);

impl RunId {
    pub fn new(tuple_hash: &ContentHash, sequence: u64) -> Self {
        Self(format!("{}-{:06}", &tuple_hash.to_hex()[..12], sequence))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn tuple_prefix(&self) -> &str {
        &self.0[..12]
    }

    pub fn sequence(&self) -> u64 {
        self.0[13..].parse().expect("validated run id")
    }
}

impl fmt::Display for RunId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for RunId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let ok = s.len() >= 19
            && s.as_bytes()[12] == b'-'
            && s[..12].bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
            && s[13..].bytes().all(|b| b.is_ascii_digit());
        if ok {
            Ok(Self(s.to_string()))
        } else {
            Err(Error::Invalid(format!("malformed run id `{s}`")))
        }
    }
}

impl Serialize for RunId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for RunId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Validation,
    Release,
}

impl fmt::Display for RunKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunKind::Validation => "validation",
            RunKind::Release => "release",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::Running => "running",
            RunStatus::Succeeded => "succeeded",
            RunStatus::Failed => "failed",
        })
    }
}

/// Which slice of the pinned dataset a run sees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scope", rename_all = "lowercase")]
pub enum DataScope {
    Full,
    Subset { fraction: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: RunId,
    pub tuple: ArtifactVersionTuple,
    pub kind: RunKind,
    pub branch: String,
    pub started_at: DateTime<Utc>,
    #[serde(default)]
    pub finished_at: Option<DateTime<Utc>>,
    pub status: RunStatus,
    pub data_scope: DataScope,
    #[serde(default)]
    pub step_outcomes: Vec<StepOutcome>,
    #[serde(default)]
    pub result_ids: Vec<ArtifactId>,
    #[serde(default)]
    pub feedback_id: Option<ArtifactId>,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

impl RunRecord {
    fn check_shape(&self) -> Result<()> {
        self.tuple.validate()?;
        match (self.status, self.finished_at) {
            (RunStatus::Running, Some(_)) => {
                return Err(Error::Invalid("running run has finished_at".into()))
            }
            (RunStatus::Succeeded | RunStatus::Failed, None) => {
                return Err(Error::Invalid("finished run lacks finished_at".into()))
            }
            (_, Some(end)) if end < self.started_at => {
                return Err(Error::Invalid("finished_at precedes started_at".into()))
            }
            _ => {}
        }
        if let Some(bad) = self.result_ids.iter().find(|id| id.kind != ArtifactKind::Result) {
            return Err(Error::Invalid(format!("result id {bad} is not of kind result")));
        }
        Ok(())
    }

    /// Every artifact the record points at.
    fn referenced_artifacts(&self) -> impl Iterator<Item = ArtifactId> + '_ {
        self.result_ids
            .iter()
            .copied()
            .chain(self.feedback_id)
            .chain(self.step_outcomes.iter().flat_map(|o| o.referenced_artifacts()))
    }
}

type Counters = BTreeMap<String, u64>;

impl Repository {
    /// Resolves a pin's content hash to a stored artifact.
    ///
    /// `Ok(None)` when the pin carries no content hash.
    pub fn resolve_pin(&self, pin: &VersionPin) -> Result<Option<ArtifactId>> {
        let Some(hash) = pin.content else {
            return Ok(None);
        };
        self.store()
            .find_by_hash(&hash, component_kind(&pin.component))?
            .map(Some)
            .ok_or_else(|| {
                Error::DanglingReference(format!(
                    "pin {}={} content {hash} is not in the store",
                    pin.component, pin.version
                ))
            })
    }

    /// Issues the next run id for `tuple`. The counter is persisted before
    /// the id is returned, so ids are never reissued.
    pub fn mint_run_id(&self, tuple: &ArtifactVersionTuple) -> Result<RunId> {
        let hash = tuple.hash()?;
        let _guard = self.write_lock()?;
        let path = self.path(repo::COUNTERS_FILE);
        let mut counters: Counters = repo::read_json(&path)?;
        let key = hash.to_hex()[..12].to_string();
        let next = counters.get(&key).copied().unwrap_or(0) + 1;
        counters.insert(key, next);
        repo::write_json_atomic(&path, &counters)?;
        Ok(RunId::new(&hash, next))
    }

    fn run_path(&self, id: &RunId) -> std::path::PathBuf {
        self.path(repo::RUNS_DIR).join(format!("{id}.json"))
    }

    /// Persists a run record to `runs/<run-id>.json`. Writing identical
    /// content again is a no-op; different content under the same id is a
    /// conflict.
    pub fn record_run(&self, record: &RunRecord) -> Result<()> {
        record.check_shape()?;
        for pin in record.tuple.pins() {
            self.resolve_pin(pin)?;
        }
        for id in record.referenced_artifacts() {
            if !self.store().contains(&id)? {
                return Err(Error::DanglingReference(format!(
                    "run {} references unknown artifact {id}",
                    record.run_id
                )));
            }
        }
        let _guard = self.write_lock()?;
        self.write_run_locked(record, false)
    }

    fn write_run_locked(&self, record: &RunRecord, allow_replace: bool) -> Result<()> {
        let path = self.run_path(&record.run_id);
        if path.exists() && !allow_replace {
            let existing: RunRecord = repo::read_json(&path)?;
            if &existing == record {
                return Ok(());
            }
            return Err(Error::Conflict(format!(
                "run {} already recorded with different content",
                record.run_id
            )));
        }
        repo::write_json_atomic(&path, record)
    }

    /// Sets the feedback bundle of an already persisted run. Setting the
    /// same bundle twice is a no-op; replacing a different one is a conflict.
    pub(crate) fn attach_feedback(&self, run_id: &RunId, feedback: ArtifactId) -> Result<RunRecord> {
        let _guard = self.write_lock()?;
        let mut record = self.load_run(run_id)?;
        match record.feedback_id {
            Some(existing) if existing == feedback => return Ok(record),
            Some(existing) => {
                return Err(Error::Conflict(format!(
                    "run {run_id} already has feedback {existing}"
                )))
            }
            None => record.feedback_id = Some(feedback),
        }
        self.write_run_locked(&record, true)?;
        Ok(record)
    }

    pub fn load_run(&self, id: &RunId) -> Result<RunRecord> {
        let path = self.run_path(id);
        if !path.is_file() {
            return Err(Error::RunNotFound(id.to_string()));
        }
        repo::read_json(&path)
    }

    /// All persisted runs ordered by start time, then id.
    pub fn list_runs(&self) -> Result<Vec<RunRecord>> {
        let mut runs = Vec::new();
        for entry in std::fs::read_dir(self.path(repo::RUNS_DIR))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                runs.push(repo::read_json::<RunRecord>(&path)?);
            }
        }
        runs.sort_by(|a, b| a.started_at.cmp(&b.started_at).then(a.run_id.cmp(&b.run_id)));
        Ok(runs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pin(c: &str, v: &str) -> VersionPin {
        VersionPin::new(c, v).unwrap()
    }

    fn base() -> ArtifactVersionTuple {
        ArtifactVersionTuple::baseline("c1", "d1", "y1", "x1")
    }

    #[test]
    fn encoding_ignores_insertion_order() {
        let fwd = ArtifactVersionTuple::from_pins([
            pin("data", "x1"),
            pin("code", "c1"),
            pin("dependencies", "d1"),
            pin("deployment", "y1"),
        ])
        .unwrap();
        let rev = ArtifactVersionTuple::from_pins([
            pin("deployment", "y1"),
            pin("dependencies", "d1"),
            pin("code", "c1"),
            pin("data", "x1"),
        ])
        .unwrap();
        assert_eq!(fwd.canonical_encode().unwrap(), rev.canonical_encode().unwrap());
        assert_eq!(fwd.hash().unwrap(), rev.hash().unwrap());
    }

    #[test]
    fn encoding_starts_with_code() {
        let bytes = base().canonical_encode().unwrap();
        assert!(bytes.starts_with(b"code\nc1\n"));
        assert_eq!(
            bytes,
            b"code\nc1\n\ndata\nx1\n\ndependencies\nd1\n\ndeployment\ny1\n\n".to_vec()
        );
    }

    #[test]
    fn extra_component_sorts_into_place() {
        let mut t = base();
        t.insert(pin("gpu_driver", "535"));
        let text = String::from_utf8(t.canonical_encode().unwrap()).unwrap();
        let order: Vec<&str> = text.lines().step_by(3).collect();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(order, sorted);
        assert_eq!(order.iter().position(|c| *c == "gpu_driver"), Some(4));
    }

    #[test]
    fn missing_baseline_is_invalid() {
        let t = ArtifactVersionTuple::from_pins([pin("code", "c1")]).unwrap();
        assert!(matches!(t.canonical_encode(), Err(Error::InvalidTuple(_))));
        assert!(matches!(t.hash(), Err(Error::InvalidTuple(_))));
    }

    #[test]
    fn duplicate_and_bad_names_rejected() {
        assert!(ArtifactVersionTuple::from_pins([pin("code", "a"), pin("code", "b")]).is_err());
        assert!(VersionPin::new("Code", "a").is_err());
        assert!(VersionPin::new("", "a").is_err());
        assert!(VersionPin::new("code", "a\nb").is_err());
    }

    #[test]
    fn diff_single_change() {
        let a = base();
        assert!(diff_tuples(&a, &a).is_empty());
        let mut b = a.clone();
        b.insert(pin("data", "x2"));
        let d = diff_tuples(&a, &b);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].component, "data");
        assert_eq!(d[0].a.as_ref().unwrap().version, "x1");
        assert_eq!(d[0].b.as_ref().unwrap().version, "x2");
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn alignment_ignores_versions() {
        let a = base();
        assert!(aligned(&a, &a));
        let mut extra = a.clone();
        extra.insert(pin("gpu_driver", "1"));
        assert!(!aligned(&a, &extra));
        let bumped = ArtifactVersionTuple::baseline("c9", "d9", "y9", "x9");
        assert!(aligned(&a, &bumped));
    }

    #[test]
    fn run_id_parse() {
        let id = RunId::new(&ContentHash::of(b"t"), 1);
        assert!(id.as_str().ends_with("-000001"));
        assert_eq!(id.sequence(), 1);
        assert_eq!(id.as_str().parse::<RunId>().unwrap(), id);
        assert!("abc-000001".parse::<RunId>().is_err());
        assert!("zzzzzzzzzzzz-000001".parse::<RunId>().is_err());
    }

    #[test]
    fn tuple_json_is_component_ordered() {
        let mut t = base();
        t.insert(pin("data", "x1").with_content(ContentHash::of(b"ds")));
        let json = serde_json::to_string(&t).unwrap();
        assert!(json.starts_with(r#"{"code":{"version":"c1"},"data":{"version":"x1","content":""#));
        let back: ArtifactVersionTuple = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }
}
