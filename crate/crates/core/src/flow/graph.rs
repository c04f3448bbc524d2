use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt::{self, Write as _};

use serde::Serialize;

use super::{FlowGraph, InputRef};
use crate::error::{Error, Result};
use crate::store::ArtifactId;

/// A structural problem found by [`FlowGraph::validate`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "violation", rename_all = "kebab-case")]
pub enum Violation {
    Cycle { steps: Vec<String> },
    DuplicateStep { step: String },
    DanglingUpstream { step: String, input: String, upstream_step: String, upstream_slot: String },
    UnknownOutcome { step: String, slot: String },
    NoOutcomes,
    UnknownMetricsOutput { step: String, slot: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Cycle { steps } => write!(f, "cycle: [{}]", steps.join(", ")),
            Violation::DuplicateStep { step } => write!(f, "duplicate-step: {step}"),
            Violation::DanglingUpstream { step, input, upstream_step, upstream_slot } => write!(
                f,
                "dangling-upstream: {step}.{input} reads {upstream_step}.{upstream_slot}"
            ),
            Violation::UnknownOutcome { step, slot } => write!(f, "unknown-outcome: {step}.{slot}"),
            Violation::NoOutcomes => write!(f, "no-outcomes"),
            Violation::UnknownMetricsOutput { step, slot } => {
                write!(f, "unknown-metrics-output: {step}.{slot}")
            }
        }
    }
}

/// An input that comes from outside the flow.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ExternalRef {
    Artifact(ArtifactId),
    Pin(String),
}

impl fmt::Display for ExternalRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExternalRef::Artifact(id) => write!(f, "artifact:{id}"),
            ExternalRef::Pin(c) => write!(f, "pin:{c}"),
        }
    }
}

impl FlowGraph {
    /// Producer -> consumer step edges, restricted to steps that exist.
    fn step_edges(&self) -> BTreeSet<(&str, &str)> {
        let names: BTreeSet<&str> = self.steps.iter().map(|s| s.name.as_str()).collect();
        let mut edges = BTreeSet::new();
        for step in &self.steps {
            for input in step.inputs.values() {
                if let InputRef::Upstream { step: up, .. } = input {
                    if names.contains(up.as_str()) {
                        edges.insert((up.as_str(), step.name.as_str()));
                    }
                }
            }
        }
        edges
    }

    /// Returns every structural violation; an empty list means the graph is
    /// valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for s in &self.steps {
            if !seen.insert(s.name.as_str()) {
                out.push(Violation::DuplicateStep { step: s.name.clone() });
            }
        }
        for s in &self.steps {
            for (input, r) in &s.inputs {
                if let InputRef::Upstream { step: up, slot } = r {
                    let ok = self.step(up).is_some_and(|u| u.outputs.contains(slot));
                    if !ok {
                        out.push(Violation::DanglingUpstream {
                            step: s.name.clone(),
                            input: input.clone(),
                            upstream_step: up.clone(),
                            upstream_slot: slot.clone(),
                        });
                    }
                }
            }
        }
        for steps in self.cycles() {
            out.push(Violation::Cycle { steps });
        }
        if self.outcomes.is_empty() {
            out.push(Violation::NoOutcomes);
        }
        for o in &self.outcomes {
            if !self.step(&o.step).is_some_and(|s| s.outputs.contains(&o.slot)) {
                out.push(Violation::UnknownOutcome {
                    step: o.step.clone(),
                    slot: o.slot.clone(),
                });
            }
        }
        if let Some(m) = &self.metrics_output {
            if !self.step(&m.step).is_some_and(|s| s.outputs.contains(&m.slot)) {
                out.push(Violation::UnknownMetricsOutput {
                    step: m.step.clone(),
                    slot: m.slot.clone(),
                });
            }
        }
        out
    }

    pub fn check(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidFlow(v))
        }
    }

    /// Strongly connected components that form cycles (size > 1, or a
    /// self-loop), each sorted by name, listed in name order.
    fn cycles(&self) -> Vec<Vec<String>> {
        let names: Vec<&str> = {
            let set: BTreeSet<&str> = self.steps.iter().map(|s| s.name.as_str()).collect();
            set.into_iter().collect()
        };
        let idx: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let mut adj = vec![Vec::new(); names.len()];
        let mut self_loop = vec![false; names.len()];
        for (a, b) in self.step_edges() {
            adj[idx[a]].push(idx[b]);
            if a == b {
                self_loop[idx[a]] = true;
            }
        }
        let mut out: Vec<Vec<String>> = tarjan_scc(&adj)
            .into_iter()
            .filter(|c| c.len() > 1 || self_loop[c[0]])
            .map(|c| {
                let mut v: Vec<String> = c.into_iter().map(|i| names[i].to_string()).collect();
                v.sort();
                v
            })
            .collect();
        out.sort();
        out
    }

    /// Topological order of step names with ties broken lexicographically.
    pub fn topo_order(&self) -> Result<Vec<String>> {
        let names: BTreeSet<&str> = self.steps.iter().map(|s| s.name.as_str()).collect();
        let edges = self.step_edges();
        let mut indeg: BTreeMap<&str, usize> = names.iter().map(|n| (*n, 0)).collect();
        let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for &(a, b) in &edges {
            *indeg.get_mut(b).expect("known step") += 1;
            succ.entry(a).or_default().push(b);
        }
        let mut ready: BinaryHeap<Reverse<&str>> = indeg
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(n, _)| Reverse(*n))
            .collect();
        let mut order = Vec::with_capacity(names.len());
        while let Some(Reverse(n)) = ready.pop() {
            order.push(n.to_string());
            for &m in succ.get(n).into_iter().flatten() {
                let d = indeg.get_mut(m).expect("known step");
                *d -= 1;
                if *d == 0 {
                    ready.push(Reverse(m));
                }
            }
        }
        if order.len() != names.len() {
            let left: Vec<String> = indeg
                .into_iter()
                .filter(|(_, d)| *d > 0)
                .map(|(n, _)| n.to_string())
                .collect();
            return Err(Error::Cycle(left));
        }
        Ok(order)
    }

    /// External inputs from which a directed path reaches a designated
    /// outcome.
    pub fn critical_artifacts(&self) -> BTreeSet<ExternalRef> {
        let mut preds: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (a, b) in self.step_edges() {
            preds.entry(b).or_default().push(a);
        }
        let mut reaching: BTreeSet<&str> = BTreeSet::new();
        let mut stack: Vec<&str> = self.outcomes.iter().map(|o| o.step.as_str()).collect();
        while let Some(n) = stack.pop() {
            if reaching.insert(n) {
                stack.extend(preds.get(n).into_iter().flatten().copied());
            }
        }
        self.steps
            .iter()
            .filter(|s| reaching.contains(s.name.as_str()))
            .flat_map(|s| s.inputs.values())
            .filter_map(|r| match r {
                InputRef::Artifact(id) => Some(ExternalRef::Artifact(*id)),
                InputRef::Pin(c) => Some(ExternalRef::Pin(c.clone())),
                InputRef::Upstream { .. } => None,
            })
            .collect()
    }

    /// Graphviz rendering: steps as boxes, external inputs as ellipses,
    /// outcomes as double octagons.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph flow {\n  rankdir=LR;\n  node [fontname=\"Helvetica\"];\n");
        for step in &self.steps {
            let label = match &step.partition {
                Some(p) => format!("{}\\n[partitioned x{}, merge]", step.name, p.count),
                None => step.name.clone(),
            };
            let style = if step.partition.is_some() { ", peripheries=2" } else { "" };
            let _ = writeln!(s, "  {} [shape=box, label=\"{}\"{style}];", quote(&step.name), label);
        }
        let mut externals = BTreeSet::new();
        for step in &self.steps {
            for (slot, r) in &step.inputs {
                let from = match r {
                    InputRef::Upstream { step: up, slot: out } => {
                        let _ = writeln!(
                            s,
                            "  {} -> {} [label=\"{out} -> {slot}\"];",
                            quote(up),
                            quote(&step.name)
                        );
                        continue;
                    }
                    InputRef::Artifact(id) => format!("artifact:{}", &id.to_string()[..id.kind.as_str().len() + 13]),
                    InputRef::Pin(c) => format!("pin:{c}"),
                };
                if externals.insert(from.clone()) {
                    let _ = writeln!(s, "  {} [shape=ellipse, style=filled, fillcolor=lightgrey];", quote(&from));
                }
                let _ = writeln!(s, "  {} -> {} [label=\"{slot}\"];", quote(&from), quote(&step.name));
            }
        }
        for o in &self.outcomes {
            let node = format!("outcome:{o}");
            let _ = writeln!(s, "  {} [shape=doubleoctagon];", quote(&node));
            let _ = writeln!(s, "  {} -> {} [label=\"{}\"];", quote(&o.step), quote(&node), o.slot);
        }
        s.push_str("}\n");
        s
    }
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn tarjan_scc(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    struct State<'a> {
        adj: &'a [Vec<usize>],
        index: Vec<Option<usize>>,
        low: Vec<usize>,
        on_stack: Vec<bool>,
        stack: Vec<usize>,
        next: usize,
        out: Vec<Vec<usize>>,
    }
    fn visit(st: &mut State<'_>, v: usize) {
        st.index[v] = Some(st.next);
        st.low[v] = st.next;
        st.next += 1;
        st.stack.push(v);
        st.on_stack[v] = true;
        for i in 0..st.adj[v].len() {
            let w = st.adj[v][i];
            match st.index[w] {
                None => {
                    visit(st, w);
                    st.low[v] = st.low[v].min(st.low[w]);
                }
                Some(iw) if st.on_stack[w] => st.low[v] = st.low[v].min(iw),
                _ => {}
            }
        }
        if Some(st.low[v]) == st.index[v] {
            let mut comp = Vec::new();
            loop {
                let w = st.stack.pop().expect("scc member");
                st.on_stack[w] = false;
                comp.push(w);
                if w == v {
                    break;
                }
            }
            st.out.push(comp);
        }
    }
    let n = adj.len();
    let mut st = State {
        adj,
        index: vec![None; n],
        low: vec![0; n],
        on_stack: vec![false; n],
        stack: Vec::new(),
        next: 0,
        out: Vec::new(),
    };
    for v in 0..n {
        if st.index[v].is_none() {
            visit(&mut st, v);
        }
    }
    st.out
}
