use std::collections::BTreeSet;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::execute::DATA_MANIFEST_SLOT;
use super::{FlowGraph, InputRef, StepSpec};
use crate::error::{Error, Result};
use crate::store::ArtifactId;
use crate::tuple::is_valid_name;

impl Serialize for InputRef {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(None)?;
        match self {
            InputRef::Artifact(id) => m.serialize_entry("artifact", id)?,
            InputRef::Pin(c) => m.serialize_entry("pin", c)?,
            InputRef::Upstream { step, slot } => {
                m.serialize_entry("step", step)?;
                m.serialize_entry("slot", slot)?;
            }
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for InputRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            artifact: Option<ArtifactId>,
            pin: Option<String>,
            step: Option<String>,
            slot: Option<String>,
        }
        use serde::de::Error as _;
        let raw = Raw::deserialize(d)?;
        match raw {
            Raw {
                artifact: Some(id),
                pin: None,
                step: None,
                slot: None,
            } => Ok(InputRef::Artifact(id)),
            Raw {
                artifact: None,
                pin: Some(c),
                step: None,
                slot: None,
            } => Ok(InputRef::Pin(c)),
            Raw {
                artifact: None,
                pin: None,
                step: Some(step),
                slot: Some(slot),
            } => Ok(InputRef::Upstream { step, slot }),
            _ => Err(D::Error::custom(
                "input must be exactly one of {\"artifact\"}, {\"pin\"} or {\"step\",\"slot\"}",
            )),
        }
    }
}

/// A `{...}` placeholder recognised in command templates. Braces that do
/// not match one of these forms are passed through untouched.
#[derive(Debug, PartialEq, Eq)]
pub(crate) enum Placeholder<'a> {
    Input(&'a str),
    Output(&'a str),
    Partition,
    Partitions,
}

/// Splits a template into literal text and placeholders.
pub(crate) fn tokenize(template: &str) -> Vec<Result<&str, Placeholder<'_>>> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let tail = &rest[open..];
        let parsed = tail.find('}').and_then(|close| {
            let inner = &tail[1..close];
            let ph = if inner == "partition" {
                Some(Placeholder::Partition)
            } else if inner == "partitions" {
                Some(Placeholder::Partitions)
            } else if let Some(s) = inner.strip_prefix("input:") {
                Some(Placeholder::Input(s))
            } else {
                inner.strip_prefix("output:").map(Placeholder::Output)
            };
            ph.map(|p| (p, close))
        });
        match parsed {
            Some((ph, close)) => {
                if open > 0 {
                    out.push(Ok(&rest[..open]));
                }
                out.push(Err(ph));
                rest = &tail[close + 1..];
            }
            None => {
                out.push(Ok(&rest[..open + 1]));
                rest = &tail[1..];
            }
        }
    }
    if !rest.is_empty() {
        out.push(Ok(rest));
    }
    out
}

fn check_template(step: &StepSpec, template: &str, is_merge: bool) -> Result<()> {
    let inputs: BTreeSet<&str> = step.inputs.keys().map(String::as_str).collect();
    let outputs: BTreeSet<&str> = step.outputs.iter().map(String::as_str).collect();
    let what = if is_merge { "merge_command" } else { "command" };
    for tok in tokenize(template) {
        let Err(ph) = tok else { continue };
        let ok = match &ph {
            Placeholder::Input(s) => inputs.contains(s) || *s == DATA_MANIFEST_SLOT,
            Placeholder::Output(s) => outputs.contains(s),
            Placeholder::Partition => step.partition.is_some() && !is_merge,
            Placeholder::Partitions => is_merge,
        };
        if !ok {
            return Err(Error::Schema(format!(
                "step `{}` {what} uses {ph:?} which the step does not declare",
                step.name
            )));
        }
    }
    Ok(())
}

fn check_step(step: &StepSpec) -> Result<()> {
    let name = &step.name;
    if !is_valid_name(name) {
        return Err(Error::Schema(format!("step name `{name}` must match [a-z0-9_-]+")));
    }
    if step.command.trim().is_empty() {
        return Err(Error::Schema(format!("step `{name}` has an empty command")));
    }
    for slot in step.inputs.keys() {
        if slot == DATA_MANIFEST_SLOT {
            return Err(Error::Schema(format!(
                "step `{name}` declares reserved input slot `{DATA_MANIFEST_SLOT}`"
            )));
        }
        if !is_valid_name(slot) {
            return Err(Error::Schema(format!("step `{name}` input slot `{slot}` is not a valid name")));
        }
    }
    let mut seen = BTreeSet::new();
    for slot in &step.outputs {
        if !is_valid_name(slot) {
            return Err(Error::Schema(format!("step `{name}` output slot `{slot}` is not a valid name")));
        }
        if !seen.insert(slot) {
            return Err(Error::Schema(format!("step `{name}` declares output `{slot}` twice")));
        }
    }
    check_template(step, &step.command, false)?;
    if let Some(p) = &step.partition {
        if p.count < 1 {
            return Err(Error::Schema(format!("step `{name}` partition count must be >= 1")));
        }
        if step.outputs.len() != 1 {
            return Err(Error::Schema(format!(
                "partitioned step `{name}` must declare exactly one output slot, found {}",
                step.outputs.len()
            )));
        }
        check_template(step, &p.merge_command, true)?;
    }
    Ok(())
}

/// Parses a flow manifest and checks per-step structure (names, slot
/// declarations, placeholders, partition shape).
///
/// Graph-level properties (cycles, dangling upstream references, duplicate
/// step names, unknown outcomes) are reported by [`FlowGraph::validate`].
pub fn parse_manifest(text: &str) -> Result<FlowGraph> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let graph: FlowGraph = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
    for step in &graph.steps {
        check_step(step)?;
    }
    for name in &graph.env_whitelist {
        if name.is_empty() || name.contains('=') {
            return Err(Error::Schema(format!("invalid env_whitelist entry `{name}`")));
        }
    }
    Ok(graph)
}
