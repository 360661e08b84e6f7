//! Topological map memory with priority-scored pruning.
//!
//! The map grows as the agent observes navigable neighbors. Once the clock
//! reaches `t_start`, every update may drop the stalest, least useful visited
//! nodes. A node's pruning priority is
//!
//! ```text
//! P(v) = λt·max(1, t − τ(v) − θage) − λd·deg(v) − λf·#unvisited(v) + λdist·hops(current, v)
//! ```
//!
//! and only visited, non-current nodes whose last visit is older than both
//! `theta_recent_visit` and `theta_age` are scored.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::StepObservation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub t_start: usize,
    pub theta_recent_visit: usize,
    pub theta_age: usize,
    pub n_remove: usize,
    pub lambda_t: f64,
    pub lambda_d: f64,
    pub lambda_f: f64,
    pub lambda_dist: f64,
    /// Hop distance assigned to nodes unreachable from the current node.
    /// `None` means the number of nodes in the map.
    pub unreachable_distance: Option<f64>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            t_start: 15,
            theta_recent_visit: 3,
            theta_age: 10,
            n_remove: 1,
            lambda_t: 1.0,
            lambda_d: 2.0,
            lambda_f: 5.0,
            lambda_dist: 0.5,
            unreachable_distance: None,
        }
    }
}

impl PruneConfig {
    /// Same thresholds with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            lambda_t: self.lambda_t * factor,
            lambda_d: self.lambda_d * factor,
            lambda_f: self.lambda_f * factor,
            lambda_dist: self.lambda_dist * factor,
            ..self.clone()
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("edge endpoint {0} is not a node")]
    DanglingEdge(String),
    #[error("self-loop on {0}")]
    SelfLoop(String),
    #[error("visited node {0} is not in the map")]
    UnknownVisited(String),
    #[error("last visit of {id} ({step}) is after the clock ({clock})")]
    FutureVisit { id: String, step: usize, clock: usize },
    #[error("current node {0} must be visited at the current clock")]
    BadCurrent(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: String,
    /// Display index, fixed at first observation and kept across pruning.
    pub label: usize,
    pub last_visit: Option<usize>,
    pub annotation: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedNode {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TopoMap {
    nodes: BTreeMap<String, NodeRecord>,
    adjacency: BTreeMap<String, BTreeSet<String>>,
    /// Visited ids in first-visit order; pruned ids are dropped.
    trajectory: Vec<String>,
    current: Option<String>,
    clock: usize,
    labels: BTreeMap<String, usize>,
}

impl TopoMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a map directly from a visit history, for scoring fixtures and
    /// property tests. `visits` lists `(id, last_visit)`; every other node is
    /// unvisited. Labels follow the order of `nodes`.
    pub fn from_history(
        nodes: &[&str],
        edges: &[(&str, &str)],
        visits: &[(&str, usize)],
        current: &str,
        clock: usize,
    ) -> Result<Self, MapError> {
        let mut map = Self {
            clock,
            ..Self::default()
        };
        for id in nodes {
            map.insert_node(id);
        }
        for &(a, b) in edges {
            if a == b {
                return Err(MapError::SelfLoop(a.to_string()));
            }
            for end in [a, b] {
                if !map.nodes.contains_key(end) {
                    return Err(MapError::DanglingEdge(end.to_string()));
                }
            }
            map.link(a, b);
        }
        let mut ordered: Vec<&(&str, usize)> = visits.iter().collect();
        ordered.sort_by_key(|(id, step)| (*step, *id));
        for &&(id, step) in &ordered {
            if step > clock {
                return Err(MapError::FutureVisit {
                    id: id.to_string(),
                    step,
                    clock,
                });
            }
            let node = map
                .nodes
                .get_mut(id)
                .ok_or_else(|| MapError::UnknownVisited(id.to_string()))?;
            if node.last_visit.is_none() {
                map.trajectory.push(id.to_string());
            }
            node.last_visit = Some(step);
        }
        match map.nodes.get(current) {
            Some(NodeRecord {
                last_visit: Some(step), ..
            }) if *step == clock => {}
            _ => return Err(MapError::BadCurrent(current.to_string())),
        }
        map.current = Some(current.to_string());
        Ok(map)
    }

    fn insert_node(&mut self, id: &str) {
        if self.nodes.contains_key(id) {
            return;
        }
        let next = self.labels.len();
        let label = *self.labels.entry(id.to_string()).or_insert(next);
        self.nodes.insert(
            id.to_string(),
            NodeRecord {
                id: id.to_string(),
                label,
                last_visit: None,
                annotation: Vec::new(),
            },
        );
        self.adjacency.insert(id.to_string(), BTreeSet::new());
    }

    fn link(&mut self, a: &str, b: &str) {
        self.adjacency.get_mut(a).expect("node exists").insert(b.to_string());
        self.adjacency.get_mut(b).expect("node exists").insert(a.to_string());
    }

    /// Integrates one observation: advances the clock, marks the observed
    /// location visited and links it to every navigable neighbor.
    pub fn observe_and_update(&mut self, obs: &StepObservation) {
        self.clock += 1;
        self.insert_node(&obs.current);
        for nav in &obs.navigable {
            if nav.id != obs.current {
                self.insert_node(&nav.id);
                self.link(&obs.current, &nav.id);
            }
        }
        let node = self.nodes.get_mut(&obs.current).expect("inserted above");
        if node.last_visit.is_none() {
            self.trajectory.push(obs.current.clone());
        }
        node.last_visit = Some(self.clock);
        node.annotation = obs.visible_objects.clone();
        self.current = Some(obs.current.clone());
    }

    pub fn clock(&self) -> usize {
        self.clock
    }

    pub fn current(&self) -> Option<&str> {
        self.current.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn node(&self, id: &str) -> Option<&NodeRecord> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> BTreeSet<String> {
        self.nodes.keys().cloned().collect()
    }

    /// Undirected edges as `(a, b)` with `a < b`.
    pub fn edges(&self) -> BTreeSet<(String, String)> {
        self.adjacency
            .iter()
            .flat_map(|(a, ns)| ns.iter().filter(move |b| a < *b).map(move |b| (a.clone(), b.clone())))
            .collect()
    }

    pub fn neighbors(&self, id: &str) -> impl Iterator<Item = &str> {
        self.adjacency.get(id).into_iter().flatten().map(String::as_str)
    }

    pub fn degree(&self, id: &str) -> usize {
        self.adjacency.get(id).map_or(0, BTreeSet::len)
    }

    pub fn is_visited(&self, id: &str) -> bool {
        self.nodes.get(id).is_some_and(|n| n.last_visit.is_some())
    }

    pub fn visited(&self) -> BTreeSet<String> {
        self.trajectory.iter().cloned().collect()
    }

    /// Visited ids in first-visit order.
    pub fn trajectory(&self) -> &[String] {
        &self.trajectory
    }

    /// Display label for any id ever observed, including pruned ones.
    pub fn label(&self, id: &str) -> Option<usize> {
        self.labels.get(id).copied()
    }

    /// Breadth-first hop counts from `from` over the current map.
    pub fn hops_from(&self, from: &str) -> BTreeMap<String, usize> {
        let mut dist = BTreeMap::new();
        if !self.nodes.contains_key(from) {
            return dist;
        }
        dist.insert(from.to_string(), 0);
        let mut queue = VecDeque::from([from]);
        while let Some(id) = queue.pop_front() {
            let d = dist[id];
            for n in self.neighbors(id) {
                if !dist.contains_key(n) {
                    dist.insert(n.to_string(), d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    fn is_eligible(&self, node: &NodeRecord, cfg: &PruneConfig) -> bool {
        let Some(last) = node.last_visit else { return false };
        let gap = self.clock - last;
        Some(node.id.as_str()) != self.current() && gap > cfg.theta_recent_visit && gap > cfg.theta_age
    }

    /// The assessment set: visited, non-current, temporally stale nodes.
    pub fn eligible_nodes(&self, cfg: &PruneConfig) -> BTreeSet<String> {
        self.nodes
            .values()
            .filter(|n| self.is_eligible(n, cfg))
            .map(|n| n.id.clone())
            .collect()
    }

    fn score_with(&self, id: &str, cfg: &PruneConfig, hops: &BTreeMap<String, usize>) -> f64 {
        let node = &self.nodes[id];
        let last = node.last_visit.expect("eligible nodes are visited");
        let staleness = (self.clock as f64 - last as f64 - cfg.theta_age as f64).max(1.0);
        let degree = self.degree(id) as f64;
        let unvisited = self.neighbors(id).filter(|n| !self.is_visited(n)).count() as f64;
        let distance = hops
            .get(id)
            .map(|&h| h as f64)
            .unwrap_or_else(|| cfg.unreachable_distance.unwrap_or(self.nodes.len() as f64));
        cfg.lambda_t * staleness - cfg.lambda_d * degree - cfg.lambda_f * unvisited + cfg.lambda_dist * distance
    }

    /// Pruning priority of an eligible node; higher means more prunable.
    ///
    /// Panics if `id` is not in [`eligible_nodes`](Self::eligible_nodes).
    pub fn priority_score(&self, id: &str, cfg: &PruneConfig) -> f64 {
        let node = self.nodes.get(id).unwrap_or_else(|| panic!("{id} is not in the map"));
        assert!(self.is_eligible(node, cfg), "{id} is not eligible for pruning");
        let hops = self.hops_from(self.current().unwrap_or_default());
        self.score_with(id, cfg, &hops)
    }

    /// Scores of the whole assessment set, sorted by removal priority.
    pub fn ranked_candidates(&self, cfg: &PruneConfig) -> Vec<PrunedNode> {
        let hops = self.hops_from(self.current().unwrap_or_default());
        let mut ranked: Vec<PrunedNode> = self
            .eligible_nodes(cfg)
            .into_iter()
            .map(|id| PrunedNode {
                score: self.score_with(&id, cfg, &hops),
                id,
            })
            .collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
        ranked
    }

    /// Removes the `n_remove` highest-priority eligible nodes and their
    /// edges. No-op before `t_start`. Returns the removed nodes in order.
    pub fn prune(&mut self, cfg: &PruneConfig) -> Vec<PrunedNode> {
        if self.clock < cfg.t_start || cfg.n_remove == 0 {
            return Vec::new();
        }
        let mut ranked = self.ranked_candidates(cfg);
        ranked.truncate(cfg.n_remove);
        for p in &ranked {
            self.remove_node(&p.id);
        }
        ranked
    }

    fn remove_node(&mut self, id: &str) {
        self.nodes.remove(id);
        if let Some(ns) = self.adjacency.remove(id) {
            for n in ns {
                if let Some(back) = self.adjacency.get_mut(&n) {
                    back.remove(id);
                }
            }
        }
        self.trajectory.retain(|t| t != id);
    }

    pub fn render_map_context(&self) -> MemoryContext {
        MemoryContext::render(self)
    }
}

/// Textual rendering of the map for a planner prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryContext {
    pub trajectory: String,
    pub map: String,
    pub supplementary: String,
}

pub fn place(label: usize) -> String {
    format!("Place {label}")
}

impl MemoryContext {
    fn render(map: &TopoMap) -> Self {
        let name = |id: &str| place(map.labels[id]);

        let trajectory = format!(
            "Trajectory: {}",
            map.trajectory.iter().map(|id| name(id)).collect::<Vec<_>>().join(", ")
        );

        let mut by_label: Vec<&NodeRecord> = map.nodes.values().collect();
        by_label.sort_by_key(|n| n.label);

        let map_lines: Vec<String> = by_label
            .iter()
            .map(|n| {
                let mut ns: Vec<usize> = map.neighbors(&n.id).map(|m| map.labels[m]).collect();
                ns.sort_unstable();
                if ns.is_empty() {
                    format!("{} has no connections", place(n.label))
                } else {
                    let list: Vec<String> = ns.into_iter().map(place).collect();
                    format!("{} is connected with {}", place(n.label), list.join(", "))
                }
            })
            .collect();

        let supplementary_lines: Vec<String> = by_label
            .iter()
            .filter(|n| n.last_visit.is_some())
            .map(|n| {
                let objects = if n.annotation.is_empty() {
                    "none".to_string()
                } else {
                    n.annotation.join(", ")
                };
                format!("{}: {}", place(n.label), objects)
            })
            .collect();

        Self {
            trajectory,
            map: format!("Map:\n{}", map_lines.join("\n")),
            supplementary: format!("Supplementary Info:\n{}", supplementary_lines.join("\n")),
        }
    }

    /// Number of per-node lines in the Map block.
    pub fn map_line_count(&self) -> usize {
        self.map.lines().count() - 1
    }
}

impl fmt::Display for MemoryContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\n{}\n{}", self.trajectory, self.map, self.supplementary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Direction, Navigable};

    fn obs(current: &str, navigable: &[&str], objects: &[&str]) -> StepObservation {
        StepObservation {
            current: current.into(),
            navigable: navigable
                .iter()
                .map(|id| Navigable {
                    id: id.to_string(),
                    direction: Direction {
                        heading: 0.0,
                        elevation: 0.0,
                    },
                    distance: 1.0,
                })
                .collect(),
            visible_objects: objects.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// clock 20; A: τ=4, deg 3, no unvisited neighbors, 2 hops;
    /// B: τ=8, deg 1, one unvisited neighbor, 3 hops. Everything else is recent.
    pub(crate) fn two_candidate_map() -> TopoMap {
        TopoMap::from_history(
            &["C", "X", "Y", "Z", "A", "W", "U", "B"],
            &[
                ("C", "X"),
                ("X", "A"),
                ("A", "Y"),
                ("A", "Z"),
                ("C", "W"),
                ("W", "U"),
                ("U", "B"),
            ],
            &[
                ("C", 20),
                ("X", 18),
                ("Y", 19),
                ("Z", 17),
                ("W", 16),
                ("A", 4),
                ("B", 8),
            ],
            "C",
            20,
        )
        .unwrap()
    }

    #[test]
    fn first_observation_builds_star() {
        let mut map = TopoMap::new();
        map.observe_and_update(&obs("s", &["a", "b"], &["lamp"]));
        assert_eq!(map.len(), 3);
        assert_eq!(map.edges().len(), 2);
        assert_eq!(map.visited(), BTreeSet::from(["s".to_string()]));
        assert_eq!(map.clock(), 1);
        assert_eq!(map.node("s").unwrap().last_visit, Some(1));
        assert_eq!(map.node("a").unwrap().last_visit, None);
    }

    #[test]
    fn reobserving_refreshes_visit_only() {
        let mut map = TopoMap::new();
        map.observe_and_update(&obs("s", &["a", "b"], &[]));
        let (nodes, edges) = (map.node_ids(), map.edges());
        map.observe_and_update(&obs("s", &["a", "b"], &["chair"]));
        assert_eq!(map.node_ids(), nodes);
        assert_eq!(map.edges(), edges);
        assert_eq!(map.node("s").unwrap().last_visit, Some(2));
        assert_eq!(map.node("s").unwrap().annotation, ["chair"]);
    }

    #[test]
    fn eligibility_thresholds() {
        let cfg = PruneConfig::default();
        let map = TopoMap::from_history(
            &["cur", "old", "mid", "front"],
            &[("cur", "old"), ("cur", "mid"), ("mid", "front")],
            &[("cur", 20), ("old", 5), ("mid", 12)],
            "cur",
            20,
        )
        .unwrap();
        assert_eq!(map.eligible_nodes(&cfg), BTreeSet::from(["old".to_string()]));
    }

    #[test]
    fn hand_computed_scores() {
        let cfg = PruneConfig::default();
        let map = two_candidate_map();
        assert_eq!(
            map.eligible_nodes(&cfg),
            BTreeSet::from(["A".to_string(), "B".to_string()])
        );
        assert!((map.priority_score("A", &cfg) - 1.0).abs() < 1e-12);
        assert!((map.priority_score("B", &cfg) + 3.5).abs() < 1e-12);

        let zero = PruneConfig {
            lambda_t: 0.0,
            lambda_d: 0.0,
            lambda_f: 0.0,
            lambda_dist: 0.0,
            ..cfg
        };
        assert_eq!(map.priority_score("A", &zero), 0.0);
        assert_eq!(map.priority_score("B", &zero), 0.0);
    }

    #[test]
    #[should_panic(expected = "not eligible")]
    fn scoring_ineligible_node_panics() {
        two_candidate_map().priority_score("X", &PruneConfig::default());
    }

    #[test]
    fn prune_takes_highest_score() {
        let cfg = PruneConfig::default();
        let mut map = two_candidate_map();
        let pruned = map.prune(&cfg);
        assert_eq!(pruned.len(), 1);
        assert_eq!(pruned[0].id, "A");
        assert!(!map.contains("A") && map.contains("B"));
        assert_eq!(map.degree("X"), 1);
        assert!(!map.trajectory().contains(&"A".to_string()));
    }

    #[test]
    fn prune_gates() {
        let cfg = PruneConfig::default();
        let mut early = TopoMap::from_history(&["a", "b"], &[("a", "b")], &[("a", 10), ("b", 1)], "a", 10).unwrap();
        let before = early.clone();
        assert!(early.prune(&cfg).is_empty());
        assert_eq!(early, before);

        let mut fresh = TopoMap::from_history(&["a", "b"], &[("a", "b")], &[("a", 16), ("b", 15)], "a", 16).unwrap();
        let before = fresh.clone();
        assert!(fresh.prune(&cfg).is_empty());
        assert_eq!(fresh, before);
    }

    #[test]
    fn ties_remove_smallest_id() {
        let cfg = PruneConfig {
            n_remove: 1,
            ..PruneConfig::default()
        };
        let mut map = TopoMap::from_history(
            &["c", "q", "p"],
            &[("c", "p"), ("c", "q")],
            &[("c", 30), ("p", 2), ("q", 2)],
            "c",
            30,
        )
        .unwrap();
        assert_eq!(map.prune(&cfg)[0].id, "p");
    }

    #[test]
    fn unreachable_nodes_use_configured_distance() {
        let map = TopoMap::from_history(&["c", "x", "far"], &[("c", "x")], &[("c", 30), ("far", 1)], "c", 30).unwrap();
        let cfg = PruneConfig::default();
        // staleness 19, no edges, distance = 3 nodes
        assert_eq!(map.priority_score("far", &cfg), 19.0 + 0.5 * 3.0);
        let cfg = PruneConfig {
            unreachable_distance: Some(100.0),
            ..cfg
        };
        assert_eq!(map.priority_score("far", &cfg), 19.0 + 50.0);
    }

    #[test]
    fn pruned_nodes_return_as_frontier_with_same_label() {
        let mut map = two_candidate_map();
        let label = map.label("A");
        map.prune(&PruneConfig::default());
        map.observe_and_update(&obs("X", &["C", "A"], &[]));
        let node = map.node("A").unwrap();
        assert_eq!(node.last_visit, None);
        assert_eq!(Some(node.label), label);
    }

    #[test]
    fn history_validation() {
        assert_eq!(
            TopoMap::from_history(&["a"], &[("a", "b")], &[("a", 1)], "a", 1),
            Err(MapError::DanglingEdge("b".into()))
        );
        assert_eq!(
            TopoMap::from_history(&["a", "b"], &[], &[("a", 1)], "b", 1),
            Err(MapError::BadCurrent("b".into()))
        );
        assert!(matches!(
            TopoMap::from_history(&["a"], &[], &[("a", 5)], "a", 1),
            Err(MapError::FutureVisit { .. })
        ));
    }

    #[test]
    fn render_single_node() {
        let mut map = TopoMap::new();
        map.observe_and_update(&obs("s", &[], &["lamp", "chair"]));
        let ctx = map.render_map_context();
        assert_eq!(ctx.trajectory, "Trajectory: Place 0");
        assert_eq!(ctx.map, "Map:\nPlace 0 has no connections");
        assert_eq!(ctx.supplementary, "Supplementary Info:\nPlace 0: lamp, chair");
    }

    #[test]
    fn render_three_node_path_golden() {
        let mut map = TopoMap::new();
        map.observe_and_update(&obs("a", &["b"], &["door"]));
        map.observe_and_update(&obs("b", &["a", "c"], &[]));
        let expected = include_str!("../tests/fixtures/three_node_map.txt");
        assert_eq!(map.render_map_context().to_string(), expected.trim_end());
    }

    #[test]
    fn render_omits_pruned_ids() {
        let mut map = two_candidate_map();
        let label = map.label("A").unwrap();
        map.prune(&PruneConfig::default());
        let text = map.render_map_context().to_string();
        let label = label.to_string();
        let tokens: Vec<&str> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        assert!(!tokens.windows(2).any(|w| w == ["Place", label.as_str()]));
    }
}
