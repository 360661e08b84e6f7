#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::PathBuf;

use nalgebra::Vector3;
use navmem::spatial::{Bbox2D, CameraPose};
use navmem::world::{load_episodes, load_scene, Episode, ObjectAnnotation, Scene, Viewpoint};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// hall (0,0) - landing (0,4) - lounge (3,8)
pub fn line_scene() -> Scene {
    load_scene(fixture("line_scene.json")).expect("line fixture loads")
}

pub fn line_episode() -> Episode {
    load_episodes(fixture("line_episodes.json"))
        .expect("episode fixture loads")
        .remove(0)
}

/// Scene from `(id, x, y, neighbors)` tuples, all at z = 0.
pub fn flat_scene(id: &str, nodes: &[(&str, f64, f64, &[&str])]) -> Scene {
    let vps = nodes
        .iter()
        .map(|(id, x, y, ns)| Viewpoint {
            id: id.to_string(),
            position: Vector3::new(*x, *y, 0.0),
            neighbors: ns.iter().map(|s| s.to_string()).collect(),
            objects: vec![],
        })
        .collect();
    Scene::new(id, vps).expect("valid scene")
}

/// Unweighted hop distances by breadth-first search over an edge list.
pub fn bfs(edges: &BTreeSet<(String, String)>, from: &str) -> BTreeMap<String, usize> {
    let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (a, b) in edges {
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    }
    let mut dist = BTreeMap::from([(from.to_string(), 0)]);
    let mut queue = VecDeque::from([from.to_string()]);
    while let Some(id) = queue.pop_front() {
        let d = dist[&id];
        for n in adj.get(id.as_str()).into_iter().flatten() {
            if !dist.contains_key(*n) {
                dist.insert(n.to_string(), d + 1);
                queue.push_back(n.to_string());
            }
        }
    }
    dist
}

/// A raw visit history, kept separate from `TopoMap` so oracles can work
/// from the same data without going through the map.
#[derive(Debug, Clone)]
pub struct History {
    pub nodes: Vec<String>,
    pub edges: BTreeSet<(String, String)>,
    pub visits: BTreeMap<String, usize>,
    pub current: String,
    pub clock: usize,
}

pub fn random_history<R: Rng>(rng: &mut R, max_nodes: usize) -> History {
    let n = rng.random_range(2..=max_nodes);
    let nodes: Vec<String> = (0..n).map(|i| format!("n{i:02}")).collect();
    let density: f64 = rng.random_range(0.05..0.4);
    let mut edges = BTreeSet::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(density) {
                edges.insert((nodes[i].clone(), nodes[j].clone()));
            }
        }
    }
    let clock = rng.random_range(1..=60);
    let current = nodes[rng.random_range(0..n)].clone();
    let mut visits = BTreeMap::new();
    for id in &nodes {
        if *id != current && rng.random_bool(0.6) {
            visits.insert(id.clone(), rng.random_range(0..clock));
        }
    }
    visits.insert(current.clone(), clock);
    History {
        nodes,
        edges,
        visits,
        current,
        clock,
    }
}

impl History {
    pub fn to_map(&self) -> navmem::memgraph::TopoMap {
        let nodes: Vec<&str> = self.nodes.iter().map(String::as_str).collect();
        let edges: Vec<(&str, &str)> = self.edges.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let visits: Vec<(&str, usize)> = self.visits.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        navmem::memgraph::TopoMap::from_history(&nodes, &edges, &visits, &self.current, self.clock)
            .expect("valid history")
    }

    pub fn neighbors(&self, id: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter_map(|(a, b)| {
                if a == id {
                    Some(b.as_str())
                } else if b == id {
                    Some(a.as_str())
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn eligible(&self, cfg: &navmem::memgraph::PruneConfig) -> Vec<String> {
        self.visits
            .iter()
            .filter(|(id, &t)| {
                let gap = self.clock - t;
                **id != self.current && gap > cfg.theta_recent_visit && gap > cfg.theta_age
            })
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Score of every eligible node, straight from the formula.
    pub fn scores(&self, cfg: &navmem::memgraph::PruneConfig) -> Vec<(String, f64)> {
        let hops = bfs(&self.edges, &self.current);
        self.eligible(cfg)
            .into_iter()
            .map(|id| {
                let t = self.visits[&id] as f64;
                let staleness = f64::max(1.0, self.clock as f64 - t - cfg.theta_age as f64);
                let nbrs = self.neighbors(&id);
                let degree = nbrs.len() as f64;
                let unvisited = nbrs.iter().filter(|n| !self.visits.contains_key(**n)).count() as f64;
                let dist = match hops.get(&id) {
                    Some(&h) => h as f64,
                    None => cfg.unreachable_distance.unwrap_or(self.nodes.len() as f64),
                };
                let score = cfg.lambda_t * staleness
                    + cfg.lambda_d * -degree
                    + cfg.lambda_f * -unvisited
                    + cfg.lambda_dist * dist;
                (id, score)
            })
            .collect()
    }

    /// Brute-force removal set: every eligible score, top `n_remove` by
    /// score then id.
    pub fn oracle_prune(&self, cfg: &navmem::memgraph::PruneConfig) -> Vec<(String, f64)> {
        if self.clock < cfg.t_start {
            return Vec::new();
        }
        let mut all = self.scores(cfg);
        let mut out = Vec::new();
        for _ in 0..cfg.n_remove.min(all.len()) {
            let mut best = 0;
            for i in 1..all.len() {
                let (bid, bs) = &all[best];
                let (id, s) = &all[i];
                if s > bs || (s == bs && id < bid) {
                    best = i;
                }
            }
            out.push(all.remove(best));
        }
        out
    }
}

/// World → camera by explicit yaw then pitch rotations, then pinhole.
pub fn oracle_pixel(cam: &CameraPose, p: &Vector3<f64>) -> (f64, f64, f64) {
    let d = p - cam.position;
    let (s, c) = cam.heading.sin_cos();
    let (x1, y1, z1) = (d.x * c - d.y * s, d.x * s + d.y * c, d.z);
    let (se, ce) = cam.elevation.sin_cos();
    let (depth, up) = (y1 * ce + z1 * se, -y1 * se + z1 * ce);
    (
        cam.width / 2.0 + cam.focal * x1 / depth,
        cam.height / 2.0 - cam.focal * up / depth,
        depth,
    )
}

pub fn oracle_corners(o: &ObjectAnnotation) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                out.push(
                    o.center
                        + o.axes[0] * (sx * o.half_extents.x)
                        + o.axes[1] * (sy * o.half_extents.y)
                        + o.axes[2] * (sz * o.half_extents.z),
                );
            }
        }
    }
    out
}

pub fn oracle_bbox(o: &ObjectAnnotation, cam: &CameraPose) -> Option<Bbox2D> {
    let pts: Vec<(f64, f64)> = oracle_corners(o)
        .iter()
        .map(|p| oracle_pixel(cam, p))
        .filter(|&(_, _, depth)| depth > 1e-9)
        .map(|(u, v, _)| (u, v))
        .collect();
    if pts.is_empty() {
        return None;
    }
    let x0 = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x1 = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let y0 = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let y1 = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if x1 <= 0.0 || y1 <= 0.0 || x0 >= cam.width || y0 >= cam.height {
        return None;
    }
    let (cx0, cy0, cx1, cy1) = (x0.max(0.0), y0.max(0.0), x1.min(cam.width), y1.min(cam.height));
    Some(Bbox2D {
        x: cx0,
        y: cy0,
        w: cx1 - cx0,
        h: cy1 - cy0,
    })
}

pub fn level_camera() -> CameraPose {
    CameraPose {
        position: Vector3::zeros(),
        heading: 0.0,
        elevation: 0.0,
        focal: 500.0,
        width: 1000.0,
        height: 1000.0,
    }
}

/// Random prediction and truth lists over a small pool, with the truth
/// leading the prediction in about half the cases.
pub fn random_ranking(seed: u64) -> (Vec<String>, Vec<String>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<String> = (0..8).map(|i| format!("obj{i}")).collect();
    let k = r.random_range(0..4);
    let truth: Vec<String> = pool.choose_multiple(&mut r, k).cloned().collect();
    let mut pred: Vec<String> = if r.random_bool(0.4) {
        // truth first in some order, then arbitrary tail
        let mut p = truth.clone();
        p.shuffle(&mut r);
        p
    } else {
        Vec::new()
    };
    for _ in 0..r.random_range(0..5) {
        pred.push(pool.choose(&mut r).unwrap().clone());
    }
    if r.random_bool(0.3) {
        pred.shuffle(&mut r);
    }
    (pred, truth)
}
