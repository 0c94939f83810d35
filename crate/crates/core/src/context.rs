//! The context graph: a DAG of entities, models, and constraint nodes with
//! undo/redo history, sparse activation, composite evaluation, and
//! do-style intervention cascades.

use crate::budget::Meter;
use crate::registry::{Registry, RegistryError};
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("edge {from} -> {to} would create a cycle")]
    CycleRejected { from: String, to: String },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate node `{0}`")]
    DuplicateNode(String),
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(String, String),
    #[error("unknown edge {0} -> {1}")]
    UnknownEdge(String, String),
    #[error("self edge on `{0}`")]
    SelfEdge(String),
    #[error("invalid node id `{0}`")]
    InvalidId(String),
    #[error("edge gain must be finite")]
    NonFiniteGain,
    #[error("nothing to undo")]
    NothingToUndo,
    #[error("nothing to redo")]
    NothingToRedo,
    #[error("model node `{0}` has no bound model")]
    UnboundModel(String),
    #[error("model node `{node}` has no value for input `{field}`")]
    MissingInput { node: String, field: String },
    #[error("model at `{node}` failed: {error}")]
    Model { node: String, error: RegistryError },
    #[error("malformed graph record: {0}")]
    Malformed(String),
}

type Result<T> = std::result::Result<T, GraphError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Entity,
    Model,
    Constraint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextNode {
    pub node_id: String,
    pub kind: NodeKind,
    pub value: Option<f64>,
    pub bound_model: Option<String>,
    pub metadata: BTreeMap<String, String>,
}

impl ContextNode {
    pub fn entity(id: &str, value: Option<f64>) -> Self {
        Self {
            node_id: id.to_string(),
            kind: NodeKind::Entity,
            value,
            bound_model: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn model(id: &str, model_id: &str) -> Self {
        Self {
            node_id: id.to_string(),
            kind: NodeKind::Model,
            value: None,
            bound_model: Some(model_id.to_string()),
            metadata: BTreeMap::new(),
        }
    }

    pub fn constraint(id: &str) -> Self {
        Self {
            node_id: id.to_string(),
            kind: NodeKind::Constraint,
            value: None,
            bound_model: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: &str) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    /// Last path segment of the id.
    pub fn local_name(&self) -> &str {
        local_name(&self.node_id)
    }
}

pub fn local_name(id: &str) -> &str {
    id.rsplit('/').next().unwrap_or(id)
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.split('/').all(|seg| !seg.is_empty())
        && !id.chars().any(|c| c.is_whitespace() || c.is_control())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    Dependency,
    Causal,
    ConstraintBinding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextEdge {
    pub from: String,
    pub to: String,
    pub relation: Relation,
    pub gain: f64,
}

impl ContextEdge {
    pub fn new(from: &str, to: &str, relation: Relation, gain: f64) -> Self {
        Self {
            from: from.to_string(),
            to: to.to_string(),
            relation,
            gain,
        }
    }

    pub fn dep(from: &str, to: &str) -> Self {
        Self::new(from, to, Relation::Dependency, 1.0)
    }

    pub fn causal(from: &str, to: &str, gain: f64) -> Self {
        Self::new(from, to, Relation::Causal, gain)
    }
}

/// An invertible graph change.
///
/// `AddNode` carries the edges to restore alongside the node, which makes it
/// the exact inverse of `RemoveNode`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Mutation {
    AddNode {
        node: ContextNode,
        edges: Vec<ContextEdge>,
    },
    RemoveNode {
        node: ContextNode,
        edges: Vec<ContextEdge>,
    },
    AddEdge {
        edge: ContextEdge,
    },
    RemoveEdge {
        edge: ContextEdge,
    },
    SetValue {
        node_id: String,
        before: Option<f64>,
        after: Option<f64>,
    },
    SetGain {
        from: String,
        to: String,
        before: f64,
        after: f64,
    },
}

impl Mutation {
    pub fn inverse(&self) -> Mutation {
        match self.clone() {
            Mutation::AddNode { node, edges } => Mutation::RemoveNode { node, edges },
            Mutation::RemoveNode { node, edges } => Mutation::AddNode { node, edges },
            Mutation::AddEdge { edge } => Mutation::RemoveEdge { edge },
            Mutation::RemoveEdge { edge } => Mutation::AddEdge { edge },
            Mutation::SetValue {
                node_id,
                before,
                after,
            } => Mutation::SetValue {
                node_id,
                before: after,
                after: before,
            },
            Mutation::SetGain {
                from,
                to,
                before,
                after,
            } => Mutation::SetGain {
                from,
                to,
                before: after,
                after: before,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MutationReceipt {
    pub seq: u64,
    pub mutation: Mutation,
}

/// Nodes reached by [`ContextGraph::activate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationSet {
    /// Ancestor closure of the targets, in topological order.
    pub nodes: Vec<String>,
    pub model_nodes: usize,
    pub total_model_nodes: usize,
    /// Model nodes in the closure over all model nodes in the graph.
    pub fraction: f64,
    /// Nodes plus edges touched while computing the closure.
    pub explored: usize,
}

/// One model call made during evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub node_id: String,
    pub model_id: String,
    pub version: u64,
}

/// Hook decision after a node is evaluated.
#[derive(Clone, Debug, PartialEq)]
pub enum Control {
    Continue,
    Halt(String),
}

/// Observation hooks for [`ContextGraph::evaluate`].
pub trait EvalObserver {
    /// May rewrite a model's outputs (e.g. envelope substitution).
    fn after_model(
        &mut self,
        _node_id: &str,
        _model_id: &str,
        _inputs: &BTreeMap<String, f64>,
        _outputs: &mut Vec<(String, f64)>,
    ) -> Result<()> {
        Ok(())
    }

    /// Called after each node receives its value.
    fn after_node(&mut self, _node_id: &str, _values: &BTreeMap<String, f64>) -> Control {
        Control::Continue
    }
}

/// Observer that does nothing.
pub struct NoObserver;
impl EvalObserver for NoObserver {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub values: BTreeMap<String, f64>,
    /// Full output records of model nodes.
    pub outputs: BTreeMap<String, Vec<(String, f64)>>,
    pub invocations: Vec<Invocation>,
    /// Set when evaluation stopped early, with the node it stopped after.
    pub halted: Option<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub node_id: String,
    pub magnitude: f64,
    pub hop: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeTrace {
    pub trigger: String,
    pub entries: Vec<TraceEntry>,
    /// True when an emergency stop cut the cascade short.
    pub truncated: bool,
}

impl CascadeTrace {
    /// Indented hop list.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{}{} ({:.6})\n",
                "  ".repeat(e.hop),
                e.node_id,
                e.magnitude
            ));
        }
        if self.truncated {
            s.push_str("(truncated by emergency stop)\n");
        }
        s
    }
}

/// Text record used for import/export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum GraphRecord {
    Node { node: ContextNode },
    Edge { edge: ContextEdge },
}

#[derive(Clone, Debug, Default)]
pub struct ContextGraph {
    nodes: BTreeMap<String, ContextNode>,
    out: BTreeMap<String, BTreeMap<String, ContextEdge>>,
    inc: BTreeMap<String, BTreeSet<String>>,
    undo: Vec<Mutation>,
    redo: Vec<Mutation>,
    seq: u64,
}

impl ContextGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.out.values().map(|m| m.len()).sum()
    }

    pub fn node(&self, id: &str) -> Option<&ContextNode> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &ContextNode> {
        self.nodes.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = &ContextEdge> {
        self.out.values().flat_map(|m| m.values())
    }

    pub fn edge(&self, from: &str, to: &str) -> Option<&ContextEdge> {
        self.out.get(from)?.get(to)
    }

    pub fn parents(&self, id: &str) -> impl Iterator<Item = &String> {
        self.inc.get(id).into_iter().flatten()
    }

    pub fn children(&self, id: &str) -> impl Iterator<Item = &ContextEdge> {
        self.out.get(id).into_iter().flat_map(|m| m.values())
    }

    /// True when `to` is reachable from `from` along edges.
    pub fn reaches(&self, from: &str, to: &str) -> bool {
        let mut stack = vec![from];
        let mut seen = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            if !seen.insert(n) {
                continue;
            }
            if let Some(kids) = self.out.get(n) {
                stack.extend(kids.keys().map(|k| k.as_str()));
            }
        }
        false
    }

    // -- mutation ---------------------------------------------------------

    pub fn add_node(&mut self, node: ContextNode) -> Result<MutationReceipt> {
        self.apply_fresh(Mutation::AddNode {
            node,
            edges: Vec::new(),
        })
    }

    pub fn add_edge(&mut self, edge: ContextEdge) -> Result<MutationReceipt> {
        self.apply_fresh(Mutation::AddEdge { edge })
    }

    pub fn remove_edge(&mut self, from: &str, to: &str) -> Result<MutationReceipt> {
        let edge = self
            .edge(from, to)
            .cloned()
            .ok_or_else(|| GraphError::UnknownEdge(from.into(), to.into()))?;
        self.apply_fresh(Mutation::RemoveEdge { edge })
    }

    pub fn remove_node(&mut self, id: &str) -> Result<MutationReceipt> {
        let node = self
            .nodes
            .get(id)
            .cloned()
            .ok_or_else(|| GraphError::UnknownNode(id.into()))?;
        let mut edges: Vec<ContextEdge> = self.children(id).cloned().collect();
        for p in self.parents(id) {
            edges.push(self.out[p][id].clone());
        }
        self.apply_fresh(Mutation::RemoveNode { node, edges })
    }

    pub fn set_value(&mut self, id: &str, value: Option<f64>) -> Result<MutationReceipt> {
        let before = self
            .nodes
            .get(id)
            .ok_or_else(|| GraphError::UnknownNode(id.into()))?
            .value;
        self.apply_fresh(Mutation::SetValue {
            node_id: id.to_string(),
            before,
            after: value,
        })
    }

    pub fn set_gain(&mut self, from: &str, to: &str, gain: f64) -> Result<MutationReceipt> {
        let before = self
            .edge(from, to)
            .ok_or_else(|| GraphError::UnknownEdge(from.into(), to.into()))?
            .gain;
        self.apply_fresh(Mutation::SetGain {
            from: from.to_string(),
            to: to.to_string(),
            before,
            after: gain,
        })
    }

    /// Apply a caller-built mutation (e.g. from a proposal payload).
    pub fn apply(&mut self, m: Mutation) -> Result<MutationReceipt> {
        self.apply_fresh(m)
    }

    fn apply_fresh(&mut self, m: Mutation) -> Result<MutationReceipt> {
        self.apply_raw(&m)?;
        self.undo.push(m.clone());
        self.redo.clear();
        Ok(self.receipt(m))
    }

    fn receipt(&mut self, mutation: Mutation) -> MutationReceipt {
        self.seq += 1;
        MutationReceipt {
            seq: self.seq,
            mutation,
        }
    }

    pub fn undo(&mut self) -> Result<MutationReceipt> {
        let m = self.undo.pop().ok_or(GraphError::NothingToUndo)?;
        let inv = m.inverse();
        self.apply_raw(&inv).expect("inverse of an applied mutation applies");
        self.redo.push(m);
        Ok(self.receipt(inv))
    }

    pub fn redo(&mut self) -> Result<MutationReceipt> {
        let m = self.redo.pop().ok_or(GraphError::NothingToRedo)?;
        self.apply_raw(&m).expect("redo of an undone mutation applies");
        self.undo.push(m.clone());
        Ok(self.receipt(m))
    }

    pub fn history_len(&self) -> (usize, usize) {
        (self.undo.len(), self.redo.len())
    }

    /// Validate then apply; on error nothing changes.
    fn apply_raw(&mut self, m: &Mutation) -> Result<()> {
        match m {
            Mutation::AddNode { node, edges } => {
                if !valid_id(&node.node_id) {
                    return Err(GraphError::InvalidId(node.node_id.clone()));
                }
                if self.nodes.contains_key(&node.node_id) {
                    return Err(GraphError::DuplicateNode(node.node_id.clone()));
                }
                self.nodes.insert(node.node_id.clone(), node.clone());
                for (k, e) in edges.iter().enumerate() {
                    if let Err(err) = self.insert_edge(e) {
                        for e in &edges[..k] {
                            self.delete_edge(&e.from, &e.to);
                        }
                        self.nodes.remove(&node.node_id);
                        return Err(err);
                    }
                }
                Ok(())
            }
            Mutation::RemoveNode { node, edges } => {
                if !self.nodes.contains_key(&node.node_id) {
                    return Err(GraphError::UnknownNode(node.node_id.clone()));
                }
                let attached = self.children(&node.node_id).count() + self.parents(&node.node_id).count();
                if attached != edges.len() {
                    return Err(GraphError::Malformed(format!(
                        "removal of `{}` must list its {attached} edges",
                        node.node_id
                    )));
                }
                for e in edges {
                    self.delete_edge(&e.from, &e.to);
                }
                self.nodes.remove(&node.node_id);
                Ok(())
            }
            Mutation::AddEdge { edge } => self.insert_edge(edge),
            Mutation::RemoveEdge { edge } => {
                if self.edge(&edge.from, &edge.to).is_none() {
                    return Err(GraphError::UnknownEdge(edge.from.clone(), edge.to.clone()));
                }
                self.delete_edge(&edge.from, &edge.to);
                Ok(())
            }
            Mutation::SetValue { node_id, after, .. } => {
                let n = self
                    .nodes
                    .get_mut(node_id)
                    .ok_or_else(|| GraphError::UnknownNode(node_id.clone()))?;
                n.value = *after;
                Ok(())
            }
            Mutation::SetGain { from, to, after, .. } => {
                if !after.is_finite() {
                    return Err(GraphError::NonFiniteGain);
                }
                let e = self
                    .out
                    .get_mut(from)
                    .and_then(|m| m.get_mut(to))
                    .ok_or_else(|| GraphError::UnknownEdge(from.clone(), to.clone()))?;
                e.gain = *after;
                Ok(())
            }
        }
    }

    fn insert_edge(&mut self, e: &ContextEdge) -> Result<()> {
        if e.from == e.to {
            return Err(GraphError::SelfEdge(e.from.clone()));
        }
        for end in [&e.from, &e.to] {
            if !self.nodes.contains_key(end) {
                return Err(GraphError::UnknownNode(end.clone()));
            }
        }
        if !e.gain.is_finite() {
            return Err(GraphError::NonFiniteGain);
        }
        if self.edge(&e.from, &e.to).is_some() {
            return Err(GraphError::DuplicateEdge(e.from.clone(), e.to.clone()));
        }
        if self.reaches(&e.to, &e.from) {
            return Err(GraphError::CycleRejected {
                from: e.from.clone(),
                to: e.to.clone(),
            });
        }
        self.out.entry(e.from.clone()).or_default().insert(e.to.clone(), e.clone());
        self.inc.entry(e.to.clone()).or_default().insert(e.from.clone());
        Ok(())
    }

    fn delete_edge(&mut self, from: &str, to: &str) {
        if let Some(m) = self.out.get_mut(from) {
            m.remove(to);
            if m.is_empty() {
                self.out.remove(from);
            }
        }
        if let Some(s) = self.inc.get_mut(to) {
            s.remove(from);
            if s.is_empty() {
                self.inc.remove(to);
            }
        }
    }

    // -- ordering and activation -----------------------------------------

    /// Kahn's algorithm with lexicographic tie-breaking, over `subset`
    /// (or the whole graph when `None`).
    pub fn topological_order(&self, subset: Option<&BTreeSet<String>>) -> Vec<String> {
        let inside = |id: &str| subset.is_none_or(|s| s.contains(id));
        let mut indeg: BTreeMap<&str, usize> = BTreeMap::new();
        for id in self.nodes.keys().filter(|id| inside(id)) {
            let d = self.parents(id).filter(|p| inside(p)).count();
            indeg.insert(id.as_str(), d);
        }
        let mut ready: BinaryHeap<Reverse<&str>> = indeg
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(id, _)| Reverse(*id))
            .collect();
        let mut order = Vec::with_capacity(indeg.len());
        while let Some(Reverse(id)) = ready.pop() {
            order.push(id.to_string());
            for e in self.children(id) {
                if let Some(d) = indeg.get_mut(e.to.as_str()) {
                    *d -= 1;
                    if *d == 0 {
                        ready.push(Reverse(e.to.as_str()));
                    }
                }
            }
        }
        order
    }

    /// Ancestor closure of `targets` (targets included), in topological order.
    pub fn activate(&self, targets: &[&str]) -> Result<ActivationSet> {
        let mut closure = BTreeSet::new();
        let mut queue = VecDeque::new();
        let mut explored = 0;
        for t in targets {
            if !self.nodes.contains_key(*t) {
                return Err(GraphError::UnknownNode(t.to_string()));
            }
            if closure.insert(t.to_string()) {
                queue.push_back(t.to_string());
            }
        }
        while let Some(n) = queue.pop_front() {
            explored += 1;
            for p in self.parents(&n) {
                explored += 1;
                if closure.insert(p.clone()) {
                    queue.push_back(p.clone());
                }
            }
        }
        let total_model_nodes = self.nodes.values().filter(|n| n.kind == NodeKind::Model).count();
        let model_nodes = closure
            .iter()
            .filter(|id| self.nodes[*id].kind == NodeKind::Model)
            .count();
        let fraction = if total_model_nodes == 0 {
            0.0
        } else {
            model_nodes as f64 / total_model_nodes as f64
        };
        Ok(ActivationSet {
            nodes: self.topological_order(Some(&closure)),
            model_nodes,
            total_model_nodes,
            fraction,
            explored,
        })
    }

    // -- evaluation --------------------------------------------------------

    /// Evaluate the ancestor closure of `targets`.
    ///
    /// Non-model nodes take their value from `inputs` if present, else the
    /// gain-weighted sum of their valued parents, else their stored value.
    /// Model nodes gather named inputs (see [`ContextGraph::model_inputs`]),
    /// call their bound model once, and take the output named by the
    /// `output` metadata key (first output by default).
    ///
    /// `stop` is polled before each node: once set, evaluation finishes the
    /// node in progress and returns with `halted` set.
    pub fn evaluate(
        &self,
        targets: &[&str],
        inputs: &BTreeMap<String, f64>,
        registry: &Registry,
        meter: &Meter,
        observer: &mut dyn EvalObserver,
        stop: Option<&AtomicBool>,
    ) -> Result<EvalOutcome> {
        let act = self.activate(targets)?;
        let mut out = EvalOutcome {
            values: BTreeMap::new(),
            outputs: BTreeMap::new(),
            invocations: Vec::new(),
            halted: None,
        };
        for id in &act.nodes {
            if stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
                out.halted = Some((id.clone(), "emergency stop".into()));
                break;
            }
            let node = &self.nodes[id];
            if node.kind == NodeKind::Model {
                let model_id = node
                    .bound_model
                    .as_deref()
                    .ok_or_else(|| GraphError::UnboundModel(id.clone()))?;
                let art = registry.get(model_id, None).map_err(|error| GraphError::Model {
                    node: id.clone(),
                    error,
                })?;
                let fields: Vec<String> = if art.spec.input_schema.is_empty() {
                    self.parents(id).map(|p| local_name(p).to_string()).collect()
                } else {
                    art.spec.input_schema.iter().map(|f| f.name.clone()).collect()
                };
                let model_inputs = self.model_inputs(node, &fields, &out.values)?;
                let mut result = art.call(&model_inputs, meter).map_err(|error| GraphError::Model {
                    node: id.clone(),
                    error,
                })?;
                out.invocations.push(Invocation {
                    node_id: id.clone(),
                    model_id: model_id.to_string(),
                    version: art.spec.version,
                });
                observer.after_model(id, model_id, &model_inputs, &mut result)?;
                let wanted = node.metadata.get("output");
                let primary = result
                    .iter()
                    .find(|(k, _)| Some(k) == wanted)
                    .or(result.first())
                    .map(|(_, v)| *v)
                    .unwrap_or(f64::NAN);
                out.values.insert(id.clone(), primary);
                out.outputs.insert(id.clone(), result);
            } else if let Some(v) = self.plain_value(node, inputs, &out.values) {
                out.values.insert(id.clone(), v);
            }
            if let Control::Halt(reason) = observer.after_node(id, &out.values) {
                out.halted = Some((id.clone(), reason));
                break;
            }
        }
        Ok(out)
    }

    fn plain_value(
        &self,
        node: &ContextNode,
        inputs: &BTreeMap<String, f64>,
        values: &BTreeMap<String, f64>,
    ) -> Option<f64> {
        if let Some(v) = inputs.get(&node.node_id) {
            return Some(*v);
        }
        let mut sum = None;
        for p in self.parents(&node.node_id) {
            if let Some(pv) = values.get(p) {
                let gain = self.out[p][&node.node_id].gain;
                *sum.get_or_insert(0.0) += pv * gain;
            }
        }
        sum.or(node.value)
    }

    /// Inputs for a model node. For each field: the node named by
    /// `bind.<field>` metadata, else a parent whose last path segment is
    /// the field name, else a `const.<field>` metadata literal.
    pub fn model_inputs(
        &self,
        node: &ContextNode,
        fields: &[String],
        values: &BTreeMap<String, f64>,
    ) -> Result<BTreeMap<String, f64>> {
        let mut m = BTreeMap::new();
        for f in fields {
            let v = if let Some(src) = node.metadata.get(&format!("bind.{f}")) {
                values.get(src).copied()
            } else if let Some(p) = self.parents(&node.node_id).find(|p| local_name(p) == f) {
                values.get(p).copied()
            } else {
                node.metadata
                    .get(&format!("const.{f}"))
                    .and_then(|s| s.parse::<f64>().ok())
            };
            let v = v.ok_or_else(|| GraphError::MissingInput {
                node: node.node_id.clone(),
                field: f.clone(),
            })?;
            m.insert(f.clone(), v);
        }
        Ok(m)
    }

    // -- interventions -----------------------------------------------------

    /// Force `node_id` to `magnitude` and propagate downstream through edge
    /// gains. Incoming edges of the trigger play no part. Entries are
    /// ordered by (hop, node_id) where hop is the longest path length from
    /// the trigger. The graph itself is not modified.
    pub fn intervene(&self, node_id: &str, magnitude: f64, stop: Option<&AtomicBool>) -> Result<CascadeTrace> {
        if !self.nodes.contains_key(node_id) {
            return Err(GraphError::UnknownNode(node_id.to_string()));
        }
        // descendants
        let mut desc = BTreeSet::new();
        let mut stack = vec![node_id.to_string()];
        while let Some(n) = stack.pop() {
            if desc.insert(n.clone()) {
                stack.extend(self.children(&n).map(|e| e.to.clone()));
            }
        }
        let order = self.topological_order(Some(&desc));
        let mut hop: BTreeMap<&str, usize> = BTreeMap::new();
        let mut mag: BTreeMap<&str, f64> = BTreeMap::new();
        for id in &order {
            if id == node_id {
                hop.insert(id, 0);
                mag.insert(id, magnitude);
                continue;
            }
            let mut h = 0;
            let mut m = 0.0;
            for p in self.parents(id) {
                if let (Some(&ph), Some(&pm)) = (hop.get(p.as_str()), mag.get(p.as_str())) {
                    h = h.max(ph + 1);
                    m += pm * self.out[p][id].gain;
                }
            }
            hop.insert(id, h);
            mag.insert(id, m);
        }
        let mut entries: Vec<TraceEntry> = order
            .iter()
            .map(|id| TraceEntry {
                node_id: id.clone(),
                magnitude: mag[id.as_str()],
                hop: hop[id.as_str()],
            })
            .collect();
        entries.sort_by(|a, b| a.hop.cmp(&b.hop).then_with(|| a.node_id.cmp(&b.node_id)));
        let mut truncated = false;
        if let Some(s) = stop {
            // the hop being emitted when the stop lands is completed
            let mut kept = Vec::new();
            for e in entries {
                if s.load(Ordering::SeqCst) && kept.last().is_some_and(|l: &TraceEntry| l.hop != e.hop) {
                    truncated = true;
                    break;
                }
                kept.push(e);
            }
            entries = kept;
        }
        Ok(CascadeTrace {
            trigger: node_id.to_string(),
            entries,
            truncated,
        })
    }

    // -- import / export ---------------------------------------------------

    /// Canonical text: one record per line, nodes sorted by id, then edges
    /// sorted by (from, to).
    pub fn export(&self) -> String {
        let mut s = String::new();
        for n in self.nodes.values() {
            s.push_str(&crate::canonical::to_canonical(&GraphRecord::Node { node: n.clone() }));
            s.push('\n');
        }
        for e in self.edges() {
            s.push_str(&crate::canonical::to_canonical(&GraphRecord::Edge { edge: e.clone() }));
            s.push('\n');
        }
        s
    }

    /// Rebuild from [`ContextGraph::export`] text. History starts empty.
    pub fn import(text: &str) -> Result<Self> {
        let mut g = ContextGraph::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let rec: GraphRecord =
                serde_json::from_str(line).map_err(|e| GraphError::Malformed(e.to_string()))?;
            match rec {
                GraphRecord::Node { node } => g.add_node(node)?,
                GraphRecord::Edge { edge } => g.add_edge(edge)?,
            };
        }
        g.undo.clear();
        Ok(g)
    }

    /// Content digest of nodes and edges (history excluded).
    pub fn digest(&self) -> crate::canonical::Digest {
        crate::canonical::Digest::of_str(&self.export())
    }

    /// Drop undo/redo history (used for bootstrap graphs).
    pub fn clear_history(&mut self) {
        self.undo.clear();
        self.redo.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> ContextGraph {
        let mut g = ContextGraph::new();
        for id in ["a", "b", "c"] {
            g.add_node(ContextNode::entity(id, None)).unwrap();
        }
        g.add_edge(ContextEdge::dep("a", "b")).unwrap();
        g.add_edge(ContextEdge::dep("b", "c")).unwrap();
        g
    }

    #[test]
    fn cycles_rejected() {
        let mut g = chain();
        assert_eq!(
            g.add_edge(ContextEdge::dep("c", "a")),
            Err(GraphError::CycleRejected {
                from: "c".into(),
                to: "a".into()
            })
        );
        assert!(matches!(g.add_edge(ContextEdge::dep("a", "a")), Err(GraphError::SelfEdge(_))));
        assert!(matches!(
            g.add_node(ContextNode::entity("a", None)),
            Err(GraphError::DuplicateNode(_))
        ));
        assert!(matches!(
            g.add_node(ContextNode::entity("x//y", None)),
            Err(GraphError::InvalidId(_))
        ));
    }

    #[test]
    fn topo_orders() {
        assert_eq!(chain().topological_order(None), ["a", "b", "c"]);
        let mut g = ContextGraph::new();
        for id in ["d", "c", "b", "a"] {
            g.add_node(ContextNode::entity(id, None)).unwrap();
        }
        for (f, t) in [("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")] {
            g.add_edge(ContextEdge::dep(f, t)).unwrap();
        }
        assert_eq!(g.topological_order(None), ["a", "b", "c", "d"]);
        assert!(ContextGraph::new().topological_order(None).is_empty());
    }

    #[test]
    fn activation_closure() {
        let g = chain();
        assert_eq!(g.activate(&["c"]).unwrap().nodes, ["a", "b", "c"]);
        assert_eq!(g.activate(&["a"]).unwrap().nodes, ["a"]);
        assert!(matches!(g.activate(&["z"]), Err(GraphError::UnknownNode(_))));
    }

    #[test]
    fn undo_redo() {
        let mut g = ContextGraph::new();
        g.add_node(ContextNode::entity("n", None)).unwrap();
        g.undo().unwrap();
        assert!(g.node("n").is_none());
        g.redo().unwrap();
        assert!(g.node("n").is_some());
        g.undo().unwrap();
        g.add_node(ContextNode::entity("m", None)).unwrap();
        assert_eq!(g.redo(), Err(GraphError::NothingToRedo));
        let mut empty = ContextGraph::new();
        assert_eq!(empty.undo(), Err(GraphError::NothingToUndo));
    }

    #[test]
    fn remove_node_round_trips() {
        let mut g = chain();
        let before = g.export();
        g.remove_node("b").unwrap();
        assert_eq!(g.edge_count(), 0);
        g.undo().unwrap();
        assert_eq!(g.export(), before);
    }

    #[test]
    fn cascade_toy() {
        let mut g = ContextGraph::new();
        for id in ["grid", "building", "traffic"] {
            g.add_node(ContextNode::entity(id, None)).unwrap();
        }
        g.add_edge(ContextEdge::causal("grid", "building", 0.5)).unwrap();
        g.add_edge(ContextEdge::causal("building", "traffic", 0.4)).unwrap();
        let t = g.intervene("grid", 1.0, None).unwrap();
        let mags: Vec<f64> = t.entries.iter().map(|e| e.magnitude).collect();
        assert_eq!(mags, [1.0, 0.5, 0.2]);
        let sink = g.intervene("traffic", 1.0, None).unwrap();
        assert_eq!(sink.entries.len(), 1);
    }

    #[test]
    fn intervene_truncates_on_stop() {
        let mut g = chain();
        g.set_gain("a", "b", 0.5).unwrap();
        let stop = AtomicBool::new(true);
        let t = g.intervene("a", 1.0, Some(&stop)).unwrap();
        assert!(t.truncated);
        assert_eq!(t.entries.len(), 1);
    }

    #[test]
    fn export_import_round_trip() {
        let g = chain();
        let h = ContextGraph::import(&g.export()).unwrap();
        assert_eq!(g.export(), h.export());
    }
}
