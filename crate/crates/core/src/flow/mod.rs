//! Experiment flows: a DAG of steps wired through named slots.
//!
//! A step's inputs come either from outside the flow (a stored artifact, or
//! the content of a tuple pin) or from an upstream step's output slot.
//! Partitioned steps fan out into `count` tasks whose outputs are merged in
//! partition-index order by a separate merge command.

mod execute;
mod executor;
mod graph;
mod manifest;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::store::ArtifactId;

pub use execute::{execute, ExecuteOptions, DATA_MANIFEST_SLOT};
pub use executor::{
    env_snapshot, Phase, ProcessExecutor, RecordingExecutor, Script, StepExecutor, StepRequest,
    StepResponse, TaskKey, TraceEvent, ENGINE_VERSION,
};
pub use graph::{ExternalRef, Violation};
pub use manifest::parse_manifest;

/// Where a step input comes from.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum InputRef {
    Artifact(ArtifactId),
    Pin(String),
    Upstream { step: String, slot: String },
}

impl InputRef {
    pub fn is_external(&self) -> bool {
        !matches!(self, InputRef::Upstream { .. })
    }
}

/// `(step, slot)` pair naming a produced output.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotRef {
    pub step: String,
    pub slot: String,
}

impl fmt::Display for SlotRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.step, self.slot)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub count: u32,
    pub merge_command: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSpec {
    pub name: String,
    pub command: String,
    #[serde(default)]
    pub inputs: BTreeMap<String, InputRef>,
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowGraph {
    pub steps: Vec<StepSpec>,
    pub outcomes: Vec<SlotRef>,
    #[serde(default)]
    pub env_whitelist: Vec<String>,
    /// Output holding the flat metrics document the gate reads.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics_output: Option<SlotRef>,
}

impl FlowGraph {
    pub fn step(&self, name: &str) -> Option<&StepSpec> {
        self.steps.iter().find(|s| s.name == name)
    }

    pub fn is_outcome(&self, step: &str, slot: &str) -> bool {
        self.outcomes.iter().any(|o| o.step == step && o.slot == slot)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputOrigin {
    External,
    Upstream,
    /// The reserved dataset-manifest slot.
    Manifest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundInput {
    pub artifact: ArtifactId,
    pub origin: InputOrigin,
}

/// What one task (a plain step, one partition, or a merge) did.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub step: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition_index: Option<u32>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub merge: bool,
    pub exit_code: i32,
    #[serde(default)]
    pub inputs: BTreeMap<String, BoundInput>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub partition_inputs: Vec<ArtifactId>,
    #[serde(default)]
    pub output_ids: BTreeMap<String, ArtifactId>,
    pub log_id: ArtifactId,
    pub command_rendered: String,
    pub wall_time_ms: u64,
    pub env_snapshot_id: ArtifactId,
}

impl StepOutcome {
    pub fn succeeded(&self) -> bool {
        self.exit_code == 0
    }

    pub fn task(&self) -> TaskKey {
        let phase = match (self.partition_index, self.merge) {
            (Some(i), _) => Phase::Partition(i),
            (None, true) => Phase::Merge,
            (None, false) => Phase::Single,
        };
        TaskKey {
            step: self.step.clone(),
            phase,
        }
    }

    pub(crate) fn referenced_artifacts(&self) -> impl Iterator<Item = ArtifactId> + '_ {
        self.inputs
            .values()
            .map(|b| b.artifact)
            .chain(self.partition_inputs.iter().copied())
            .chain(self.output_ids.values().copied())
            .chain([self.log_id, self.env_snapshot_id])
    }
}
