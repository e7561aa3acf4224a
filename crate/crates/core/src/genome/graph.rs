//! DAG helpers shared by module and individual genomes.
//!
//! Node ids `INPUT_NODE` and `OUTPUT_NODE` are virtual endpoints: they never
//! appear in a genome's node map but may be referenced by edges.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{InnovationId, Violation, INPUT_NODE, OUTPUT_NODE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from: InnovationId,
    pub to: InnovationId,
}

/// Read access to the graph part of a genome.
pub trait GenomeGraph {
    type Gene: Clone;

    fn nodes(&self) -> &BTreeMap<InnovationId, Self::Gene>;
    fn nodes_mut(&mut self) -> &mut BTreeMap<InnovationId, Self::Gene>;
    fn edges(&self) -> &BTreeMap<InnovationId, Edge>;
    fn edges_mut(&mut self) -> &mut BTreeMap<InnovationId, Edge>;

    fn predecessors(&self, node: InnovationId) -> Vec<InnovationId> {
        let mut v: Vec<_> = self.edges().values().filter(|e| e.to == node).map(|e| e.from).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    fn successors(&self, node: InnovationId) -> Vec<InnovationId> {
        let mut v: Vec<_> = self.edges().values().filter(|e| e.from == node).map(|e| e.to).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Topological order of all nodes including both endpoints, or `None` on a cycle.
    ///
    /// Ties are broken by innovation id so the order is deterministic.
    fn topological_order(&self) -> Option<Vec<InnovationId>> {
        topological_order(self.nodes().keys().copied(), self.edges().values())
    }

    /// Structural violations: dangling edges, cycles, and nodes not on an input-to-output path.
    fn structural_violations(&self) -> Vec<Violation> {
        structural_violations(self.nodes().keys().copied().collect(), self.edges())
    }
}

pub(crate) fn topological_order<'a>(
    nodes: impl IntoIterator<Item = InnovationId>,
    edges: impl IntoIterator<Item = &'a Edge>,
) -> Option<Vec<InnovationId>> {
    let mut all: BTreeSet<InnovationId> = nodes.into_iter().collect();
    all.insert(INPUT_NODE);
    all.insert(OUTPUT_NODE);
    let mut indegree: BTreeMap<InnovationId, usize> = all.iter().map(|&n| (n, 0)).collect();
    let mut out: BTreeMap<InnovationId, Vec<InnovationId>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for e in edges {
        if !all.contains(&e.from) || !all.contains(&e.to) || !seen.insert(*e) {
            continue;
        }
        *indegree.get_mut(&e.to).expect("known node") += 1;
        out.entry(e.from).or_default().push(e.to);
    }
    let mut ready: BTreeSet<InnovationId> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| n).collect();
    let mut order = Vec::with_capacity(all.len());
    while let Some(n) = ready.pop_first() {
        order.push(n);
        for &m in out.get(&n).map(Vec::as_slice).unwrap_or(&[]) {
            let d = indegree.get_mut(&m).expect("known node");
            *d -= 1;
            if *d == 0 {
                ready.insert(m);
            }
        }
    }
    (order.len() == all.len()).then_some(order)
}

fn reachable(start: InnovationId, adjacency: &BTreeMap<InnovationId, Vec<InnovationId>>) -> BTreeSet<InnovationId> {
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(n) = queue.pop_front() {
        for &m in adjacency.get(&n).map(Vec::as_slice).unwrap_or(&[]) {
            if seen.insert(m) {
                queue.push_back(m);
            }
        }
    }
    seen
}

pub(crate) fn structural_violations(
    nodes: BTreeSet<InnovationId>,
    edges: &BTreeMap<InnovationId, Edge>,
) -> Vec<Violation> {
    let mut violations = Vec::new();
    let known = |n: InnovationId| n == INPUT_NODE || n == OUTPUT_NODE || nodes.contains(&n);
    if nodes.contains(&INPUT_NODE) || nodes.contains(&OUTPUT_NODE) {
        violations.push(Violation::EndpointAsGene);
    }
    if nodes.is_empty() {
        violations.push(Violation::Empty);
    }
    let mut forward: BTreeMap<InnovationId, Vec<InnovationId>> = BTreeMap::new();
    let mut backward: BTreeMap<InnovationId, Vec<InnovationId>> = BTreeMap::new();
    let mut pairs = BTreeSet::new();
    for (&id, e) in edges {
        for end in [e.from, e.to] {
            if !known(end) {
                violations.push(Violation::DanglingEdge { edge: id, node: end });
            }
        }
        if e.from == e.to {
            violations.push(Violation::SelfLoop { edge: id });
        }
        if e.to == INPUT_NODE || e.from == OUTPUT_NODE {
            violations.push(Violation::EndpointDirection { edge: id });
        }
        if !pairs.insert((e.from, e.to)) {
            violations.push(Violation::DuplicateEdge { edge: id });
        }
        forward.entry(e.from).or_default().push(e.to);
        backward.entry(e.to).or_default().push(e.from);
    }
    if topological_order(nodes.iter().copied(), edges.values()).is_none() {
        violations.push(Violation::Cycle);
    }
    let from_input = reachable(INPUT_NODE, &forward);
    let to_output = reachable(OUTPUT_NODE, &backward);
    for &n in &nodes {
        if !from_input.contains(&n) {
            violations.push(Violation::Unreachable { node: n });
        }
        if !to_output.contains(&n) {
            violations.push(Violation::DeadEnd { node: n });
        }
    }
    if !nodes.is_empty() && !from_input.contains(&OUTPUT_NODE) {
        violations.push(Violation::Disconnected);
    }
    violations
}
