//! Compiled fan-out/fan-in graph of a workflow template.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{sorted_by_order, TaskNode, WorkflowTemplate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum NodeKind {
    Source,
    Sink,
    Service {
        #[serde(rename = "taskId")]
        task_id: String,
    },
    Split {
        combiner: NodeId,
    },
    WaitCombiner {
        split: NodeId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GraphNode {
    pub id: NodeId,
    #[serde(flatten)]
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CompileError {
    #[error("graph contains a cycle")]
    Cycle,
    #[error("malformed graph: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExecutionGraph {
    nodes: Vec<GraphNode>,
    edges: Vec<(NodeId, NodeId)>,
    #[serde(skip)]
    succ: Vec<Vec<NodeId>>,
    #[serde(skip)]
    pred: Vec<Vec<NodeId>>,
}

impl ExecutionGraph {
    fn empty() -> Self {
        ExecutionGraph {
            nodes: Vec::new(),
            edges: Vec::new(),
            succ: Vec::new(),
            pred: Vec::new(),
        }
    }

    fn add(&mut self, kind: NodeKind) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(GraphNode { id, kind });
        self.succ.push(Vec::new());
        self.pred.push(Vec::new());
        id
    }

    fn connect(&mut self, from: NodeId, to: NodeId) {
        self.edges.push((from, to));
        self.succ[from.index()].push(to);
        self.pred[to.index()].push(from);
    }

    /// Builds a graph from raw parts. Used by tests to feed the checker
    /// graphs that `compile` would never produce.
    pub fn from_parts(kinds: Vec<NodeKind>, edges: Vec<(NodeId, NodeId)>) -> Self {
        let mut g = ExecutionGraph::empty();
        for k in kinds {
            g.add(k);
        }
        for (a, b) in edges {
            g.connect(a, b);
        }
        g
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn node(&self, id: NodeId) -> &GraphNode {
        &self.nodes[id.index()]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn successors(&self, id: NodeId) -> &[NodeId] {
        &self.succ[id.index()]
    }

    pub fn predecessors(&self, id: NodeId) -> &[NodeId] {
        &self.pred[id.index()]
    }

    pub fn source(&self) -> NodeId {
        NodeId(0)
    }

    pub fn sink(&self) -> NodeId {
        NodeId(self.nodes.len() as u32 - 1)
    }

    pub fn service_nodes(&self) -> impl Iterator<Item = (NodeId, &str)> {
        self.nodes.iter().filter_map(|n| match &n.kind {
            NodeKind::Service { task_id } => Some((n.id, task_id.as_str())),
            _ => None,
        })
    }

    /// Kahn's algorithm, always taking the smallest ready id, so the order
    /// is a deterministic function of the graph.
    pub fn topological_order(&self) -> Result<Vec<NodeId>, CompileError> {
        let mut indegree: Vec<usize> = self.pred.iter().map(Vec::len).collect();
        let mut ready: BinaryHeap<Reverse<NodeId>> = indegree
            .iter()
            .enumerate()
            .filter(|(_, d)| **d == 0)
            .map(|(i, _)| Reverse(NodeId(i as u32)))
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse(n)) = ready.pop() {
            order.push(n);
            for &s in self.successors(n) {
                indegree[s.index()] -= 1;
                if indegree[s.index()] == 0 {
                    ready.push(Reverse(s));
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(CompileError::Cycle);
        }
        Ok(order)
    }

    /// Checks the structural invariants of a compiled graph.
    pub fn check(&self) -> Result<(), CompileError> {
        let bad = |m: String| Err(CompileError::Malformed(m));
        if self.nodes.len() < 2 {
            return bad("graph needs a source and a sink".into());
        }
        self.topological_order()?;

        let sources: Vec<_> = self
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Source)
            .collect();
        let sinks: Vec<_> = self
            .nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Sink)
            .collect();
        if sources.len() != 1 || sources[0].id != self.source() {
            return bad("expected exactly one source at node 0".into());
        }
        if sinks.len() != 1 || sinks[0].id != self.sink() {
            return bad("expected exactly one sink as the last node".into());
        }

        let len = self.nodes.len();
        let forward = reachable(len, self.source(), |n| self.successors(n));
        let backward = reachable(len, self.sink(), |n| self.predecessors(n));
        if let Some(i) = forward.iter().position(|r| !r) {
            return bad(format!("node {i} unreachable from source"));
        }
        if let Some(i) = backward.iter().position(|r| !r) {
            return bad(format!("node {i} cannot reach sink"));
        }

        for n in &self.nodes {
            let (ins, outs) = (self.predecessors(n.id).len(), self.successors(n.id).len());
            match &n.kind {
                NodeKind::Source if ins != 0 || outs != 1 => {
                    return bad("source must have exactly one successor".into())
                }
                NodeKind::Sink if ins != 1 || outs != 0 => {
                    return bad("sink must have exactly one predecessor".into())
                }
                NodeKind::Service { .. } if ins != 1 || outs != 1 => {
                    return bad(format!("service node {} must have in/out degree 1", n.id))
                }
                NodeKind::Split { combiner } => {
                    let partner = self.nodes.get(combiner.index()).map(|c| &c.kind);
                    if partner != Some(&NodeKind::WaitCombiner { split: n.id }) {
                        return bad(format!("split {} has no matching combiner", n.id));
                    }
                    if ins != 1 || outs == 0 {
                        return bad(format!("split {} must fan out", n.id));
                    }
                    if self.predecessors(*combiner).len() != outs {
                        return bad(format!(
                            "combiner {combiner} fan-in differs from split {} fan-out",
                            n.id
                        ));
                    }
                }
                NodeKind::WaitCombiner { split } => {
                    let partner = self.nodes.get(split.index()).map(|c| &c.kind);
                    if partner != Some(&NodeKind::Split { combiner: n.id }) {
                        return bad(format!("combiner {} has no matching split", n.id));
                    }
                    if outs != 1 {
                        return bad(format!("combiner {} must have one successor", n.id));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn reachable<'a>(len: usize, start: NodeId, next: impl Fn(NodeId) -> &'a [NodeId]) -> Vec<bool> {
    let mut seen = vec![false; len];
    let mut queue = VecDeque::from([start]);
    while let Some(n) = queue.pop_front() {
        if seen[n.index()] {
            continue;
        }
        seen[n.index()] = true;
        queue.extend(next(n).iter().copied());
    }
    seen
}

/// Compiles a template into its execution graph. Top-level tasks compose
/// sequentially; parallel blocks become a split fanning out to every child
/// and a single wait-combiner collecting them.
pub fn compile(template: &WorkflowTemplate) -> Result<ExecutionGraph, CompileError> {
    let mut g = ExecutionGraph::empty();
    let source = g.add(NodeKind::Source);
    let last = compile_sequence(&mut g, &sorted_by_order(&template.tasks), source);
    let sink = g.add(NodeKind::Sink);
    g.connect(last, sink);
    g.check()?;
    Ok(g)
}

fn compile_sequence(g: &mut ExecutionGraph, nodes: &[&TaskNode], entry: NodeId) -> NodeId {
    nodes
        .iter()
        .fold(entry, |prev, node| compile_node(g, node, prev))
}

fn compile_node(g: &mut ExecutionGraph, node: &TaskNode, prev: NodeId) -> NodeId {
    match node {
        TaskNode::Service { task_id, .. } => {
            let n = g.add(NodeKind::Service {
                task_id: task_id.clone(),
            });
            g.connect(prev, n);
            n
        }
        TaskNode::Sequential { children, .. } => {
            compile_sequence(g, &sorted_by_order(children), prev)
        }
        TaskNode::Parallel { children, .. } => {
            // Partner ids are patched once the combiner exists.
            let split = g.add(NodeKind::Split {
                combiner: NodeId(u32::MAX),
            });
            g.connect(prev, split);
            let exits: Vec<NodeId> = sorted_by_order(children)
                .into_iter()
                .map(|c| compile_node(g, c, split))
                .collect();
            let combiner = g.add(NodeKind::WaitCombiner { split });
            g.nodes[split.index()].kind = NodeKind::Split { combiner };
            for e in exits {
                g.connect(e, combiner);
            }
            combiner
        }
    }
}
