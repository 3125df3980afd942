//! The concrete dispatch loop over a flow graph.
//!
//! A flow graph is a set of typed nodes joined by labeled edges. The loop sits
//! at one node; an action dispatches only if the node's kind accepts it, the
//! boundary policy admits it, and the node has an edge carrying the action's
//! canonical label (`read`, `tool`, `step`). Anything else is rejected with a
//! `NoEffect` stutter that leaves the state untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, BoundaryEvent};
use crate::lts::TransitionSystem;
use crate::spec_model::{self, Conjunct, Guards, SpecConstants, StepAccounting};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Read,
    Tool,
    Step,
    Terminal,
}

impl NodeKind {
    /// Whether a node of this kind dispatches on `action`'s variant.
    pub fn accepts(self, action: &Action) -> bool {
        matches!(
            (self, action),
            (NodeKind::Read, Action::ReadPath(_))
                | (NodeKind::Tool, Action::ToolCall(_))
                | (NodeKind::Step, Action::Step)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub from: NodeId,
    pub label: String,
    pub to: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDecl {
    pub id: NodeId,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("entry node `{0}` is not declared")]
    UnknownEntry(NodeId),
    #[error("node `{0}` is declared twice")]
    DuplicateNode(NodeId),
    #[error("edge `{}` -[{}]-> `{}` references an undeclared node", .0.from, .0.label, .0.to)]
    DanglingEdge(Edge),
    #[error("node `{0}` has two edges labeled `{1}`")]
    DuplicateEdge(NodeId, String),
    #[error("non-terminal node `{0}` has no outgoing edge")]
    NoOutgoingEdge(NodeId),
}

/// The serialized shape of a flow graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub entry: NodeId,
    pub nodes: Vec<NodeDecl>,
    pub edges: Vec<Edge>,
}

/// A validated flow graph: the entry and every edge endpoint are declared,
/// and every non-terminal node has at least one outgoing edge.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "GraphSpec", try_from = "GraphSpec")]
pub struct FlowGraph {
    entry: NodeId,
    nodes: BTreeMap<NodeId, NodeKind>,
    edges: BTreeMap<(NodeId, String), NodeId>,
}

impl FlowGraph {
    pub fn new(
        entry: impl Into<NodeId>,
        nodes: impl IntoIterator<Item = (NodeId, NodeKind)>,
        edges: impl IntoIterator<Item = Edge>,
    ) -> Result<Self, GraphError> {
        let entry = entry.into();
        let mut node_map = BTreeMap::new();
        for (id, kind) in nodes {
            if node_map.insert(id.clone(), kind).is_some() {
                return Err(GraphError::DuplicateNode(id));
            }
        }
        if !node_map.contains_key(&entry) {
            return Err(GraphError::UnknownEntry(entry));
        }
        let mut edge_map = BTreeMap::new();
        for e in edges {
            if !node_map.contains_key(&e.from) || !node_map.contains_key(&e.to) {
                return Err(GraphError::DanglingEdge(e));
            }
            if edge_map
                .insert((e.from.clone(), e.label.clone()), e.to.clone())
                .is_some()
            {
                return Err(GraphError::DuplicateEdge(e.from, e.label));
            }
        }
        for (id, kind) in &node_map {
            let has_out = edge_map.keys().any(|(from, _)| from == id);
            if *kind != NodeKind::Terminal && !has_out {
                return Err(GraphError::NoOutgoingEdge(id.clone()));
            }
        }
        Ok(FlowGraph {
            entry,
            nodes: node_map,
            edges: edge_map,
        })
    }

    pub fn entry(&self) -> &NodeId {
        &self.entry
    }

    pub fn contains(&self, node: &NodeId) -> bool {
        self.nodes.contains_key(node)
    }

    pub fn kind(&self, node: &NodeId) -> Option<NodeKind> {
        self.nodes.get(node).copied()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&NodeId, NodeKind)> {
        self.nodes.iter().map(|(id, k)| (id, *k))
    }

    pub fn target(&self, from: &NodeId, label: &str) -> Option<&NodeId> {
        self.edges.get(&(from.clone(), label.to_string()))
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.edges.iter().map(|((from, label), to)| Edge {
            from: from.clone(),
            label: label.clone(),
            to: to.clone(),
        })
    }
}

impl From<FlowGraph> for GraphSpec {
    fn from(g: FlowGraph) -> Self {
        GraphSpec {
            entry: g.entry.clone(),
            nodes: g
                .nodes()
                .map(|(id, kind)| NodeDecl {
                    id: id.clone(),
                    kind,
                })
                .collect(),
            edges: g.edges().collect(),
        }
    }
}

impl TryFrom<GraphSpec> for FlowGraph {
    type Error = GraphError;

    fn try_from(spec: GraphSpec) -> Result<Self, Self::Error> {
        FlowGraph::new(
            spec.entry,
            spec.nodes.into_iter().map(|n| (n.id, n.kind)),
            spec.edges,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImplConstants {
    pub spec: SpecConstants,
    pub graph: FlowGraph,
    /// Guards enforced by the dispatch loop. Always the faithful policy
    /// unless a containment fault is injected on purpose.
    #[serde(default)]
    pub enforcement: Guards,
}

impl ImplConstants {
    pub fn new(spec: SpecConstants, graph: FlowGraph) -> Self {
        ImplConstants {
            spec,
            graph,
            enforcement: Guards::default(),
        }
    }

    /// A copy with the given enforcement guards, for fault injection.
    pub fn with_enforcement(&self, guards: Guards) -> Self {
        ImplConstants {
            enforcement: guards,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub node: NodeId,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImplState {
    pub read_paths: Vec<String>,
    pub tool_calls: Vec<String>,
    pub step_count: u32,
    pub halted: bool,
    pub history: Vec<HistoryEntry>,
    pub current_node: NodeId,
    /// `None` is the no-node sentinel of the initial state.
    pub last_node: Option<NodeId>,
    pub last_action: Action,
}

/// Which edge a dispatch followed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Dispatch {
    pub from: NodeId,
    pub label: String,
    pub to: NodeId,
}

/// A concrete event: a boundary event plus the dispatch that produced it.
/// The annotation is present exactly when the event is not `NoEffect`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImplEvent {
    event: BoundaryEvent,
    dispatch: Option<Dispatch>,
}

impl ImplEvent {
    pub fn stutter() -> Self {
        ImplEvent {
            event: BoundaryEvent::NoEffect,
            dispatch: None,
        }
    }

    /// Returns `None` when `event` is `NoEffect`, which cannot carry a dispatch.
    pub fn dispatched(event: BoundaryEvent, dispatch: Dispatch) -> Option<Self> {
        event.is_effect().then_some(ImplEvent {
            event,
            dispatch: Some(dispatch),
        })
    }

    pub fn event(&self) -> &BoundaryEvent {
        &self.event
    }

    pub fn dispatch(&self) -> Option<&Dispatch> {
        self.dispatch.as_ref()
    }

    pub fn is_stutter(&self) -> bool {
        self.dispatch.is_none()
    }
}

impl fmt::Display for ImplEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.dispatch {
            None => write!(f, "{}", self.event),
            Some(d) => write!(f, "{} @ {} -[{}]-> {}", self.event, d.from, d.label, d.to),
        }
    }
}

pub fn impl_init(c: &ImplConstants) -> ImplState {
    ImplState {
        read_paths: Vec::new(),
        tool_calls: Vec::new(),
        step_count: 0,
        halted: false,
        history: Vec::new(),
        current_node: c.graph.entry().clone(),
        last_node: None,
        last_action: Action::NoAction,
    }
}

/// The loop counter the dispatch loop bounds. Under the default accounting
/// this is the length of the dispatch history, not the recorded step count;
/// the two agree only where the history-length invariant holds.
fn loop_counter(c: &ImplConstants, s: &ImplState) -> u32 {
    match c.spec.step_accounting {
        StepAccounting::AllDispatches => u32::try_from(s.history.len()).unwrap_or(u32::MAX),
        StepAccounting::StepActionOnly => s.step_count,
    }
}

/// The concrete next relation. Deterministic, and total by construction.
pub fn impl_next(c: &ImplConstants, s: &ImplState, a: &Action) -> Vec<(ImplEvent, ImplState)> {
    vec![dispatch(c, s, a).unwrap_or_else(|| (ImplEvent::stutter(), s.clone()))]
}

fn dispatch(c: &ImplConstants, s: &ImplState, a: &Action) -> Option<(ImplEvent, ImplState)> {
    let kind = c.graph.kind(&s.current_node)?;
    if !kind.accepts(a) {
        return None;
    }
    let event = c
        .enforcement
        .admits(&c.spec, loop_counter(c, s), s.halted, a)?;
    let label = a.edge_label()?;
    let to = c.graph.target(&s.current_node, label)?.clone();

    let mut post = s.clone();
    spec_model::record(
        &c.spec,
        &c.enforcement,
        &mut post.read_paths,
        &mut post.tool_calls,
        &mut post.step_count,
        &mut post.halted,
        a,
        &event,
    );
    post.history.push(HistoryEntry {
        node: s.current_node.clone(),
        action: a.clone(),
    });
    post.last_node = Some(s.current_node.clone());
    post.last_action = a.clone();
    post.current_node = to.clone();
    let ev = ImplEvent::dispatched(
        event,
        Dispatch {
            from: s.current_node.clone(),
            label: label.to_string(),
            to,
        },
    )?;
    Some((ev, post))
}

/// The concrete system as a transition system.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImplSystem {
    pub constants: ImplConstants,
}

impl ImplSystem {
    pub fn new(constants: ImplConstants) -> Self {
        ImplSystem { constants }
    }
}

impl TransitionSystem for ImplSystem {
    type State = ImplState;
    type Action = Action;
    type Event = ImplEvent;

    fn initial_state(&self) -> ImplState {
        impl_init(&self.constants)
    }

    fn successors(&self, s: &ImplState, a: &Action) -> Vec<(ImplEvent, ImplState)> {
        impl_next(&self.constants, s, a)
    }
}

/// Clauses of the inductive invariant beyond well-formedness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvariantClause {
    /// `step_count <= max_steps`
    StepBound,
    /// `halted ==> step_count >= max_steps`
    HaltedBound,
    /// `|history| == step_count`
    HistoryLength,
    /// `last_node != NoNode ==> history ends with (last_node, last_action)`
    HistoryTail,
}

impl InvariantClause {
    pub const ALL: [InvariantClause; 4] = [
        InvariantClause::StepBound,
        InvariantClause::HaltedBound,
        InvariantClause::HistoryLength,
        InvariantClause::HistoryTail,
    ];

    pub fn all() -> BTreeSet<InvariantClause> {
        Self::ALL.into_iter().collect()
    }

    pub fn holds(self, c: &ImplConstants, s: &ImplState) -> bool {
        let max = c.spec.max_steps;
        match self {
            InvariantClause::StepBound => s.step_count <= max,
            InvariantClause::HaltedBound => !s.halted || s.step_count >= max,
            InvariantClause::HistoryLength => s.history.len() == s.step_count as usize,
            InvariantClause::HistoryTail => match &s.last_node {
                None => true,
                Some(node) => s
                    .history
                    .last()
                    .is_some_and(|h| &h.node == node && h.action == s.last_action),
            },
        }
    }
}

/// Well-formedness: the current node is a node of the graph.
pub fn impl_wf(c: &ImplConstants, s: &ImplState) -> bool {
    c.graph.contains(&s.current_node)
}

/// Well-formedness plus the listed clauses.
pub fn impl_inv_with(
    c: &ImplConstants,
    s: &ImplState,
    clauses: &BTreeSet<InvariantClause>,
) -> bool {
    impl_wf(c, s) && clauses.iter().all(|cl| cl.holds(c, s))
}

pub fn impl_inv(c: &ImplConstants, s: &ImplState) -> bool {
    impl_wf(c, s) && InvariantClause::ALL.iter().all(|cl| cl.holds(c, s))
}

/// Safety conjuncts that fail on the concrete boundary fields.
pub fn impl_violations(c: &ImplConstants, s: &ImplState) -> Vec<Conjunct> {
    Conjunct::ALL
        .into_iter()
        .filter(|cj| !cj.holds(&c.spec, &s.read_paths, &s.tool_calls, s.step_count))
        .collect()
}

pub fn impl_safety(c: &ImplConstants, s: &ImplState) -> bool {
    impl_violations(c, s).is_empty()
}

/// Whether an emitted event is one the boundary policy permits from `pre`.
/// This is checked independently of the dispatch code path.
pub fn event_is_compliant(c: &ImplConstants, pre: &ImplState, event: &BoundaryEvent) -> bool {
    match event {
        BoundaryEvent::Read(p) => c.spec.is_rooted(p),
        BoundaryEvent::Tool(t) => c.spec.is_allowed(t),
        BoundaryEvent::Step => pre.step_count < c.spec.max_steps,
        BoundaryEvent::NoEffect => true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn tiny(max: u32) -> ImplConstants {
        let graph = FlowGraph::new(
            "s",
            [
                ("s".into(), NodeKind::Step),
                ("end".into(), NodeKind::Terminal),
            ],
            [Edge {
                from: "s".into(),
                label: "step".into(),
                to: "s".into(),
            }],
        )
        .unwrap();
        ImplConstants::new(SpecConstants::new("/ws", ["search"], max).unwrap(), graph)
    }

    fn only(v: Vec<(ImplEvent, ImplState)>) -> (ImplEvent, ImplState) {
        assert_eq!(v.len(), 1);
        v.into_iter().next().unwrap()
    }

    #[test]
    fn graph_validation() {
        let dangling = FlowGraph::new(
            "a",
            [("a".into(), NodeKind::Step)],
            [Edge {
                from: "a".into(),
                label: "step".into(),
                to: "ghost".into(),
            }],
        );
        assert!(matches!(dangling, Err(GraphError::DanglingEdge(_))));
        let no_out = FlowGraph::new("a", [("a".into(), NodeKind::Read)], []);
        assert_eq!(no_out, Err(GraphError::NoOutgoingEdge("a".into())));
        let bad_entry = FlowGraph::new("x", [("a".into(), NodeKind::Terminal)], []);
        assert_eq!(bad_entry, Err(GraphError::UnknownEntry("x".into())));
    }

    #[test]
    fn init_state() {
        let c = fixtures::read_agent();
        let s = impl_init(&c);
        assert_eq!(&s.current_node, c.graph.entry());
        assert_eq!(s.last_node, None);
        assert!(impl_inv(&c, &s));
        assert!(impl_safety(&c, &s));
    }

    #[test]
    fn step_increments_counter() {
        let c = tiny(3);
        let (ev, post) = only(impl_next(&c, &impl_init(&c), &Action::Step));
        assert_eq!(ev.event(), &BoundaryEvent::Step);
        assert_eq!(post.step_count, 1);
        assert_eq!(post.history.len(), 1);
    }

    #[test]
    fn step_at_bound_stutters() {
        let c = tiny(2);
        let s0 = impl_init(&c);
        let (_, s1) = only(impl_next(&c, &s0, &Action::Step));
        let (_, s2) = only(impl_next(&c, &s1, &Action::Step));
        assert_eq!(s2.step_count, 2);
        assert!(s2.halted);
        // enumerate the relation at the boundary state
        let succ = impl_next(&c, &s2, &Action::Step);
        assert_eq!(succ, vec![(ImplEvent::stutter(), s2.clone())]);
        let unhalted = ImplState {
            halted: false,
            ..s2.clone()
        };
        assert_eq!(
            impl_next(&c, &unhalted, &Action::Step),
            vec![(ImplEvent::stutter(), unhalted.clone())]
        );
    }

    #[test]
    fn halted_absorbs() {
        let c = fixtures::read_agent();
        let s = ImplState {
            halted: true,
            ..impl_init(&c)
        };
        for a in fixtures::default_alphabet() {
            assert_eq!(
                impl_next(&c, &s, &a),
                vec![(ImplEvent::stutter(), s.clone())]
            );
        }
    }

    #[test]
    fn terminal_absorbs() {
        let c = tiny(3);
        let s = ImplState {
            current_node: "end".into(),
            ..impl_init(&c)
        };
        for a in fixtures::default_alphabet() {
            assert!(only(impl_next(&c, &s, &a)).0.is_stutter());
        }
    }

    #[test]
    fn read_agent_dispatch() {
        let c = fixtures::read_agent();
        let s0 = impl_init(&c);
        assert_eq!(c.graph.kind(&s0.current_node), Some(NodeKind::Read));
        let (ev, s1) = only(impl_next(&c, &s0, &Action::ReadPath("/ws/a.txt".into())));
        assert_eq!(ev.event(), &BoundaryEvent::Read("/ws/a.txt".into()));
        assert_eq!(s1.history.len(), 1);
        assert_eq!(s1.step_count, 1);
        assert_eq!(s1.last_node.as_ref(), Some(&s0.current_node));
        assert!(impl_inv(&c, &s1));

        // a Read node does not dispatch tool calls, even allowlisted ones
        let (ev, same) = only(impl_next(&c, &s0, &Action::ToolCall("search".into())));
        assert!(ev.is_stutter());
        assert_eq!(same, s0);

        // out-of-policy read at a Read node
        let (ev, same) = only(impl_next(&c, &s0, &Action::ReadPath("/etc/pw".into())));
        assert!(ev.is_stutter());
        assert_eq!(same, s0);
    }

    #[test]
    fn inv_examples() {
        let c = fixtures::read_agent();
        let s0 = impl_init(&c);
        let bad_len = ImplState {
            step_count: 3,
            history: vec![
                HistoryEntry {
                    node: "read_file".into(),
                    action: Action::Step,
                };
                2
            ],
            ..s0.clone()
        };
        assert!(!impl_inv(&c, &bad_len));
        let c3 = ImplConstants {
            spec: SpecConstants {
                max_steps: 3,
                ..c.spec.clone()
            },
            ..c.clone()
        };
        let early_halt = ImplState {
            halted: true,
            step_count: 1,
            history: bad_len.history[..1].to_vec(),
            ..s0.clone()
        };
        assert!(!impl_inv(&c3, &early_halt));
        let ghost = ImplState {
            current_node: "ghost".into(),
            ..s0
        };
        assert!(!impl_inv(&c, &ghost));
    }

    #[test]
    fn safety_examples() {
        let c = fixtures::read_agent();
        let s = ImplState {
            tool_calls: vec!["rm".into()],
            ..impl_init(&c)
        };
        assert!(!impl_safety(&c, &s));
        assert_eq!(impl_violations(&c, &s), vec![Conjunct::ToolAllowlisted]);
    }

    #[test]
    fn dispatch_annotation_iff_effect() {
        assert!(ImplEvent::dispatched(
            BoundaryEvent::NoEffect,
            Dispatch {
                from: "a".into(),
                label: "step".into(),
                to: "a".into()
            }
        )
        .is_none());
        assert!(ImplEvent::stutter().dispatch().is_none());
    }
}
