//! The adaptive planning graph: an append-only DAG of typed reasoning steps.
//!
//! Node ids are assigned in creation order and every edge points from an older
//! node to a newer one, so the graph is acyclic by construction and id order is
//! a topological order.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{single_line, truncate_chars};

/// Default per-node character budget used when rendering graph state.
pub const DEFAULT_STATE_BUDGET: usize = 600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Question,
    Answer,
    Retrieval,
    Stop,
}

impl NodeKind {
    pub const ALL: [NodeKind; 4] = [
        NodeKind::Question,
        NodeKind::Answer,
        NodeKind::Retrieval,
        NodeKind::Stop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Question => "Question",
            NodeKind::Answer => "Answer",
            NodeKind::Retrieval => "Retrieval",
            NodeKind::Stop => "Stop",
        }
    }

    /// Case-insensitive lookup of a kind name.
    pub fn parse(s: &str) -> Option<NodeKind> {
        let s = s.trim();
        NodeKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub content: String,
    /// The planner instruction that produced this node; empty for the root.
    pub instruction: String,
    /// Parent ids in ascending order.
    pub parents: Vec<NodeId>,
}

/// Parsed planner output: which kind of node to create next, which existing
/// nodes it builds on, and the instruction for producing its content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub kind: NodeKind,
    pub parents: Vec<NodeId>,
    pub instruction: String,
}

impl Decision {
    pub fn new(kind: NodeKind, parents: impl Into<Vec<NodeId>>, instruction: impl Into<String>) -> Self {
        Decision {
            kind,
            parents: parents.into(),
            instruction: instruction.into(),
        }
    }

    pub fn stop(parent: NodeId) -> Self {
        Decision::new(NodeKind::Stop, [parent], "")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanningGraph {
    nodes: Vec<Node>,
    edges: BTreeSet<(NodeId, NodeId)>,
}

impl PlanningGraph {
    /// Creates a graph holding only the root question node.
    pub fn new(question: &str) -> Result<Self> {
        if question.trim().is_empty() {
            return Err(Error::invalid("question must be non-empty"));
        }
        Ok(PlanningGraph {
            nodes: alloc::vec![Node {
                id: NodeId::ROOT,
                kind: NodeKind::Question,
                content: String::from(question),
                instruction: String::new(),
                parents: Vec::new(),
            }],
            edges: BTreeSet::new(),
        })
    }

    pub fn question(&self) -> &str {
        &self.nodes[0].content
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id.0)
    }

    pub fn edges(&self) -> &BTreeSet<(NodeId, NodeId)> {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn last_id(&self) -> NodeId {
        NodeId(self.nodes.len() - 1)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.0 < self.nodes.len()
    }

    pub fn is_stopped(&self) -> bool {
        self.nodes.last().is_some_and(|n| n.kind == NodeKind::Stop)
    }

    /// Appends a node built from `decision`, wiring one edge per distinct
    /// parent. Duplicate parent ids are folded together.
    pub fn add_node(&mut self, decision: &Decision, content: &str) -> Result<NodeId> {
        if self.is_stopped() {
            return Err(Error::GraphClosed);
        }
        if decision.parents.is_empty() {
            return Err(Error::invalid("decision must name at least one parent"));
        }
        if let Some(&bad) = decision.parents.iter().find(|p| !self.contains(**p)) {
            return Err(Error::DanglingParent(bad));
        }
        if decision.kind != NodeKind::Stop && content.trim().is_empty() {
            return Err(Error::invalid(format!(
                "{} node content must be non-empty",
                decision.kind
            )));
        }
        let id = NodeId(self.nodes.len());
        let parents: BTreeSet<NodeId> = decision.parents.iter().copied().collect();
        for &p in &parents {
            self.edges.insert((p, id));
        }
        self.nodes.push(Node {
            id,
            kind: decision.kind,
            content: String::from(content),
            instruction: decision.instruction.clone(),
            parents: parents.into_iter().collect(),
        });
        Ok(id)
    }

    /// Content of the highest-id Answer node.
    pub fn last_answer(&self) -> Option<&str> {
        self.nodes
            .iter()
            .rev()
            .find(|n| n.kind == NodeKind::Answer)
            .map(|n| n.content.as_str())
    }

    pub fn has_answer(&self) -> bool {
        self.nodes.iter().any(|n| n.kind == NodeKind::Answer)
    }

    pub fn contents_of(&self, ids: &[NodeId]) -> Vec<String> {
        ids.iter()
            .filter_map(|id| self.node(*id))
            .map(|n| n.content.clone())
            .collect()
    }

    /// Renders the graph state with the default content budget.
    pub fn describe_state(&self) -> String {
        self.describe_state_with_budget(DEFAULT_STATE_BUDGET)
    }

    /// One line per node in id order:
    /// `N<id> [<Kind>] parents: [N..] | <content>`.
    /// Content is flattened to one line and cut to `budget` characters.
    pub fn describe_state_with_budget(&self, budget: usize) -> String {
        let mut out = String::new();
        for node in &self.nodes {
            let parents: Vec<String> = node.parents.iter().map(|p| format!("{p}")).collect();
            let content = truncate_chars(&single_line(&node.content), budget);
            let _ = writeln!(
                out,
                "{} [{}] parents: [{}] | {}",
                node.id,
                node.kind,
                parents.join(", "),
                content
            );
        }
        out
    }

    /// Checks every structural invariant, returning a description of the
    /// first violation.
    pub fn check_invariants(&self) -> core::result::Result<(), String> {
        let root = self.nodes.first().ok_or("graph has no nodes")?;
        if root.kind != NodeKind::Question || root.content.is_empty() {
            return Err("root must be a non-empty Question".into());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id.0 != i {
                return Err(format!("node at position {i} has id {}", node.id));
            }
            if node.kind != NodeKind::Stop && node.content.is_empty() {
                return Err(format!("{} has empty content", node.id));
            }
            if i > 0 && node.parents.is_empty() {
                return Err(format!("{} has no incoming edge", node.id));
            }
            if node.kind == NodeKind::Stop && i != self.nodes.len() - 1 {
                return Err(format!("Stop node {} is not last", node.id));
            }
            for p in &node.parents {
                if !self.edges.contains(&(*p, node.id)) {
                    return Err(format!("missing edge {p} -> {}", node.id));
                }
            }
        }
        let mut incoming = 0usize;
        for &(u, v) in &self.edges {
            if !self.contains(u) || !self.contains(v) {
                return Err(format!("edge {u} -> {v} has a missing endpoint"));
            }
            if u >= v {
                return Err(format!("edge {u} -> {v} does not point forward"));
            }
            if !self.nodes[v.0].parents.contains(&u) {
                return Err(format!("edge {u} -> {v} not recorded on child"));
            }
            incoming += 1;
        }
        let recorded: usize = self.nodes.iter().map(|n| n.parents.len()).sum();
        if recorded != incoming {
            return Err("edge set and parent lists disagree".into());
        }
        Ok(())
    }

    /// Rebuilds a graph from node records in id order, validating that ids are
    /// contiguous. Used to replay exported traces.
    pub fn replay(nodes: &[Node]) -> Result<Self> {
        let (root, rest) = nodes
            .split_first()
            .ok_or_else(|| Error::invalid("trace holds no nodes"))?;
        let mut graph = PlanningGraph::new(&root.content)?;
        for node in rest {
            let decision = Decision::new(node.kind, node.parents.clone(), node.instruction.clone());
            let id = graph.add_node(&decision, &node.content)?;
            if id != node.id {
                return Err(Error::invalid(format!("trace node {} replayed as {id}", node.id)));
            }
        }
        Ok(graph)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dec(kind: NodeKind, parents: &[usize]) -> Decision {
        Decision::new(kind, parents.iter().map(|&p| NodeId(p)).collect::<Vec<_>>(), "do it")
    }

    /// Q, R1, R2, R3 (off target), R4 (recovery), A, Stop.
    fn case_study_graph() -> PlanningGraph {
        let mut g = PlanningGraph::new("Which common profession do they share?").unwrap();
        g.add_node(&dec(NodeKind::Retrieval, &[0]), "Britney Spears sang Toxic").unwrap();
        g.add_node(&dec(NodeKind::Retrieval, &[0]), "Justin Timberlake is a singer").unwrap();
        g.add_node(&dec(NodeKind::Retrieval, &[1, 2]), "Britney Spears was born in 1981").unwrap();
        g.add_node(&dec(NodeKind::Retrieval, &[1]), "Britney Spears is a singer").unwrap();
        g.add_node(&dec(NodeKind::Answer, &[2, 4]), "singer").unwrap();
        g.add_node(&dec(NodeKind::Stop, &[5]), "").unwrap();
        g
    }

    #[test]
    fn init_graph() {
        let g = PlanningGraph::new("Which common profession do they share?").unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.edges().is_empty());
        assert_eq!(g.nodes()[0].kind, NodeKind::Question);
        let g = PlanningGraph::new("x").unwrap();
        assert_eq!((g.len(), g.edges().len()), (1, 0));
        assert!(matches!(PlanningGraph::new(""), Err(Error::InvalidInput(_))));
        assert!(matches!(PlanningGraph::new("  \n"), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn add_node_single_parent() {
        let mut g = PlanningGraph::new("q").unwrap();
        let id = g.add_node(&dec(NodeKind::Retrieval, &[0]), "found").unwrap();
        assert_eq!(id, NodeId(1));
        assert_eq!(g.edges().iter().copied().collect::<Vec<_>>(), [(NodeId(0), NodeId(1))]);
    }

    #[test]
    fn add_node_multi_parent_edges() {
        let mut g = PlanningGraph::new("q").unwrap();
        for _ in 0..3 {
            g.add_node(&dec(NodeKind::Question, &[0]), "sub").unwrap();
        }
        let id = g.add_node(&dec(NodeKind::Answer, &[0, 2]), "a").unwrap();
        assert_eq!(id, NodeId(4));
        let into_new: BTreeSet<_> = g.edges().iter().filter(|e| e.1 == id).copied().collect();
        let expected: BTreeSet<_> = [(NodeId(0), NodeId(4)), (NodeId(2), NodeId(4))].into();
        assert_eq!(into_new, expected);
    }

    #[test]
    fn add_node_errors() {
        let mut g = PlanningGraph::new("q").unwrap();
        g.add_node(&dec(NodeKind::Question, &[0]), "sub").unwrap();
        assert_eq!(
            g.add_node(&dec(NodeKind::Retrieval, &[9]), "x"),
            Err(Error::DanglingParent(NodeId(9)))
        );
        assert!(matches!(
            g.add_node(&dec(NodeKind::Answer, &[0]), " "),
            Err(Error::InvalidInput(_))
        ));
        assert_eq!(g.len(), 2, "failed appends leave the graph untouched");
    }

    #[test]
    fn duplicate_parents_are_deduplicated() {
        let mut g = PlanningGraph::new("q").unwrap();
        let id = g.add_node(&dec(NodeKind::Retrieval, &[0, 0, 0]), "r").unwrap();
        assert_eq!(g.edges().len(), 1);
        assert_eq!(g.node(id).unwrap().parents, [NodeId(0)]);
    }

    #[test]
    fn stop_is_terminal() {
        let mut g = PlanningGraph::new("q").unwrap();
        g.add_node(&Decision::stop(NodeId(0)), "").unwrap();
        assert!(g.is_stopped());
        assert_eq!(
            g.add_node(&dec(NodeKind::Retrieval, &[0]), "x"),
            Err(Error::GraphClosed)
        );
        assert!(g.check_invariants().is_ok());
    }

    #[test]
    fn describe_singleton() {
        let g = PlanningGraph::new("What is it?").unwrap();
        let s = g.describe_state();
        assert_eq!(s.lines().count(), 1);
        assert!(s.contains("N0") && s.contains("What is it?"));
        assert_eq!(s, g.describe_state());
    }

    #[test]
    fn describe_case_study_topology() {
        let g = case_study_graph();
        let s = g.describe_state();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 7);
        for (line, node) in lines.iter().zip(g.nodes()) {
            assert!(line.starts_with(&format!("{} [{}]", node.id, node.kind)));
            // Parent lists rendered on each line match the edge set.
            let from_edges: Vec<String> = g
                .edges()
                .iter()
                .filter(|e| e.1 == node.id)
                .map(|e| format!("{}", e.0))
                .collect();
            assert!(line.contains(&format!("parents: [{}]", from_edges.join(", "))));
        }
        assert!(lines[4].contains("parents: [N1]"));
        assert!(lines[3].contains("parents: [N1, N2]"));
    }

    #[test]
    fn describe_truncates_and_flattens() {
        let mut g = PlanningGraph::new("q").unwrap();
        g.add_node(&dec(NodeKind::Retrieval, &[0]), "line one\nline two and more").unwrap();
        let s = g.describe_state_with_budget(8);
        assert_eq!(s.lines().count(), 2);
        assert!(s.contains("| line one…"));
    }

    #[test]
    fn last_answer_selection() {
        let mut g = PlanningGraph::new("q").unwrap();
        assert_eq!(g.last_answer(), None);
        g.add_node(&dec(NodeKind::Retrieval, &[0]), "r").unwrap();
        g.add_node(&dec(NodeKind::Question, &[0]), "q2").unwrap();
        g.add_node(&dec(NodeKind::Answer, &[1]), "first").unwrap();
        g.add_node(&dec(NodeKind::Retrieval, &[3]), "r2").unwrap();
        g.add_node(&dec(NodeKind::Answer, &[4]), "second").unwrap();
        assert_eq!(g.last_answer(), Some("second"));
        assert_eq!(case_study_graph().last_answer(), Some("singer"));
    }

    #[test]
    fn replay_reconstructs_graph() {
        let g = case_study_graph();
        let replayed = PlanningGraph::replay(g.nodes()).unwrap();
        assert_eq!(replayed, g);
    }

    #[derive(Debug, Clone)]
    struct Step {
        kind: NodeKind,
        parent_picks: Vec<usize>,
    }

    fn step() -> impl Strategy<Value = Step> {
        (
            prop_oneof![
                Just(NodeKind::Question),
                Just(NodeKind::Answer),
                Just(NodeKind::Retrieval),
            ],
            prop::collection::vec(any::<usize>(), 1..4),
        )
            .prop_map(|(kind, parent_picks)| Step { kind, parent_picks })
    }

    proptest! {
        #[test]
        fn random_construction_preserves_invariants(
            steps in prop::collection::vec(step(), 0..40),
            stop in any::<bool>(),
        ) {
            let mut g = PlanningGraph::new("root question").unwrap();
            for (i, s) in steps.iter().enumerate() {
                let before = g.clone();
                let parents: Vec<NodeId> = s.parent_picks.iter().map(|p| NodeId(p % g.len())).collect();
                let d = Decision::new(s.kind, parents, "instr");
                let id = g.add_node(&d, &format!("content {i}")).unwrap();
                prop_assert_eq!(id, NodeId(i + 1));
                prop_assert!(g.check_invariants().is_ok(), "{:?}", g.check_invariants());
                // Append-only: earlier nodes and edges are untouched.
                prop_assert_eq!(&g.nodes()[..before.len()], before.nodes());
                prop_assert!(before.edges().is_subset(g.edges()));
                prop_assert!(g.edges().iter().all(|(u, v)| u < v));
            }
            if stop {
                g.add_node(&Decision::stop(g.last_id()), "").unwrap();
                prop_assert!(g.check_invariants().is_ok());
            }
            prop_assert_eq!(g.describe_state(), g.describe_state());
        }
    }
}
