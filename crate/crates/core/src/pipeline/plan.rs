//! Stage planning for validated pipelines.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::spec::PipelineSpec;

/// Ordered stages; the instances of one stage are mutually independent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Plan {
    pub stages: Vec<Vec<String>>,
}

impl Plan {
    pub fn stage_of(&self, instance: &str) -> Option<usize> {
        self.stages.iter().position(|stage| stage.iter().any(|i| i == instance))
    }
}

/// Layers the DAG: each instance lands in the stage after its deepest
/// predecessor. Stage members are sorted by instance id.
pub fn plan(pipeline: &PipelineSpec) -> Plan {
    let stages = layer(&pipeline.instance_ids(), &pipeline.dependencies())
        .expect("plan() requires a pipeline that passed load_pipeline");
    Plan { stages }
}

/// Kahn layering; `None` when the graph has a cycle.
pub(crate) fn layer(nodes: &[String], edges: &BTreeSet<(String, String)>) -> Option<Vec<Vec<String>>> {
    let mut indegree: BTreeMap<&str, usize> = nodes.iter().map(|n| (n.as_str(), 0)).collect();
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (from, to) in edges {
        *indegree.get_mut(to.as_str())? += 1;
        succ.entry(from.as_str()).or_default().push(to.as_str());
    }
    let mut current: Vec<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
    let mut stages = Vec::new();
    let mut placed = 0;
    while !current.is_empty() {
        current.sort_unstable();
        let mut next = Vec::new();
        for n in &current {
            for s in succ.get(n).map(Vec::as_slice).unwrap_or_default() {
                let d = indegree.get_mut(s).unwrap();
                *d -= 1;
                if *d == 0 {
                    next.push(*s);
                }
            }
        }
        placed += current.len();
        stages.push(current.iter().map(|s| s.to_string()).collect());
        current = next;
    }
    (placed == indegree.len()).then_some(stages)
}

/// One cycle, as a closed walk `a -> b -> ... -> a`, if the graph has any.
pub(crate) fn find_cycle(nodes: &[String], edges: &BTreeSet<(String, String)>) -> Option<Vec<String>> {
    if layer(nodes, edges).is_some() {
        return None;
    }
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (from, to) in edges {
        succ.entry(from.as_str()).or_default().push(to.as_str());
    }
    // Iterative DFS with colours: 0 unvisited, 1 on stack, 2 done.
    let mut colour: BTreeMap<&str, u8> = BTreeMap::new();
    for start in nodes {
        if colour.get(start.as_str()).copied().unwrap_or(0) != 0 {
            continue;
        }
        let mut stack: Vec<(&str, usize)> = vec![(start.as_str(), 0)];
        colour.insert(start, 1);
        while let Some((node, idx)) = stack.last_mut() {
            let children = succ.get(*node).map(Vec::as_slice).unwrap_or_default();
            if *idx < children.len() {
                let child = children[*idx];
                *idx += 1;
                match colour.get(child).copied().unwrap_or(0) {
                    0 => {
                        colour.insert(child, 1);
                        stack.push((child, 0));
                    }
                    1 => {
                        let pos = stack.iter().position(|(n, _)| *n == child).unwrap();
                        let mut cycle: Vec<String> = stack[pos..].iter().map(|(n, _)| n.to_string()).collect();
                        cycle.push(child.to_string());
                        return Some(cycle);
                    }
                    _ => {}
                }
            } else {
                colour.insert(node, 2);
                stack.pop();
            }
        }
    }
    unreachable!("layering found a cycle that DFS did not")
}
