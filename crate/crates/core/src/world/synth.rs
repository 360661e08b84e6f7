//! Synthetic scenes and episodes for tests, demos and the acceptance suite.

use std::collections::BTreeSet;

use nalgebra::Vector3;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{hop_distances, Episode, ObjectAnnotation, Scene, Viewpoint, DEFAULT_GOAL_RADIUS, DEFAULT_MAX_STEPS};

pub const OBJECT_NAMES: &[&str] = &[
    "chair",
    "sofa",
    "table",
    "lamp",
    "sink",
    "refrigerator",
    "bed",
    "plant",
    "mirror",
    "picture",
    "door",
    "stairs",
    "cabinet",
    "television",
    "rug",
    "shelf",
];

/// Viewpoint id for grid cell `(row, col)`.
pub fn grid_id(row: usize, col: usize) -> String {
    format!("r{row:02}c{col:02}")
}

/// A `rows × cols` lattice with the given spacing. Each lattice edge is
/// dropped with probability `edge_drop` unless doing so would disconnect the
/// graph. Every viewpoint gets up to two annotated objects.
pub fn grid_scene<R: Rng>(
    scene_id: &str,
    rows: usize,
    cols: usize,
    spacing: f64,
    edge_drop: f64,
    rng: &mut R,
) -> Scene {
    let n = rows * cols;
    let mut candidate_edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if c + 1 < cols {
                candidate_edges.push((i, i + 1));
            }
            if r + 1 < rows {
                candidate_edges.push((i, i + cols));
            }
        }
    }
    // random spanning tree first (Kruskal over shuffled edges), extras afterwards
    let mut order: Vec<usize> = (0..candidate_edges.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut keep = vec![false; candidate_edges.len()];
    for &e in &order {
        let (a, b) = candidate_edges[e];
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            keep[e] = true;
        }
    }
    for k in keep.iter_mut() {
        if !*k && rng.random::<f64>() >= edge_drop {
            *k = true;
        }
    }
    let mut neighbors: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (e, &(a, b)) in candidate_edges.iter().enumerate() {
        if keep[e] {
            neighbors[a].insert(b);
            neighbors[b].insert(a);
        }
    }
    let ids: Vec<String> = (0..n).map(|i| grid_id(i / cols, i % cols)).collect();
    let viewpoints = (0..n)
        .map(|i| {
            let position = Vector3::new((i % cols) as f64 * spacing, (i / cols) as f64 * spacing, 0.0);
            let count = rng.random_range(0..=2);
            let objects = (0..count)
                .map(|_| {
                    let name = OBJECT_NAMES.choose(rng).expect("nonempty names");
                    let offset = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.5);
                    ObjectAnnotation::axis_aligned(name, position + offset, Vector3::new(0.3, 0.3, 0.4))
                })
                .collect();
            Viewpoint {
                id: ids[i].clone(),
                position,
                neighbors: neighbors[i].iter().map(|&j| ids[j].clone()).collect(),
                objects,
            }
        })
        .collect();
    Scene::new(scene_id, viewpoints).expect("generated grid is valid")
}

/// A ring of `n` viewpoints on a circle of unit chord spacing.
pub fn ring_scene(scene_id: &str, n: usize) -> Scene {
    assert!(n >= 3, "ring needs at least three viewpoints");
    let id = |i: usize| format!("p{i:03}");
    let radius = 1.0 / (2.0 * (std::f64::consts::PI / n as f64).sin());
    let viewpoints = (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            Viewpoint {
                id: id(i),
                position: Vector3::new(radius * a.cos(), radius * a.sin(), 0.0),
                neighbors: vec![id((i + 1) % n), id((i + n - 1) % n)],
                objects: vec![],
            }
        })
        .collect();
    Scene::new(scene_id, viewpoints).expect("ring is valid")
}

/// Shortest hop path from `start` to `goal`, preferring the smallest id at
/// every branch.
pub fn expert_path(scene: &Scene, start: &str, goal: &str) -> Option<Vec<String>> {
    let to_goal = hop_distances(scene, goal).ok()?;
    let mut path = vec![start.to_string()];
    let mut here = start.to_string();
    let mut remaining = *to_goal.get(start)?;
    while remaining > 0 {
        let next = scene
            .viewpoint(&here)
            .ok()?
            .neighbors
            .iter()
            .filter(|n| to_goal.get(*n) == Some(&(remaining - 1)))
            .min()?
            .clone();
        path.push(next.clone());
        here = next;
        remaining -= 1;
    }
    Some(path)
}

/// Random solvable episodes whose expert path has between `min_hops` and
/// `max_hops` edges. The instruction mentions the goal's objects.
pub fn random_episodes<R: Rng>(
    scene: &Scene,
    count: usize,
    min_hops: usize,
    max_hops: usize,
    rng: &mut R,
) -> Vec<Episode> {
    let ids: Vec<&str> = scene.viewpoints().iter().map(|v| v.id.as_str()).collect();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        assert!(
            attempts < count * 1000 + 1000,
            "could not sample episodes with {min_hops}..={max_hops} hops"
        );
        let start = *ids.choose(rng).expect("nonempty scene");
        let goal = *ids.choose(rng).expect("nonempty scene");
        let Some(path) = expert_path(scene, start, goal) else {
            continue;
        };
        let hops = path.len() - 1;
        if hops < min_hops.max(1) || hops > max_hops {
            continue;
        }
        let goal_objects: Vec<String> = scene
            .viewpoint(goal)
            .map(|v| v.objects.iter().map(|o| o.name.clone()).collect())
            .unwrap_or_default();
        let instruction = if goal_objects.is_empty() {
            format!("Walk {hops} places forward and stop.")
        } else {
            format!("Walk ahead and stop next to the {}.", goal_objects.join(" and the "))
        };
        out.push(Episode {
            id: format!("{}-{:04}", scene.id(), out.len()),
            scene_id: scene.id().to_string(),
            instruction,
            start: start.to_string(),
            goal: goal.to_string(),
            expert_path: path,
            goal_radius: DEFAULT_GOAL_RADIUS,
            max_steps: DEFAULT_MAX_STEPS,
        });
    }
    out
}

/// `scene_count` grid scenes with `per_scene` episodes each, fully
/// determined by `seed`. Spacing is 2 m so metric and hop shortest paths
/// coincide.
pub fn grid_corpus(
    seed: u64,
    scene_count: usize,
    rows: usize,
    cols: usize,
    per_scene: usize,
    min_hops: usize,
    max_hops: usize,
) -> (Vec<Scene>, Vec<Episode>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes = Vec::new();
    let mut episodes = Vec::new();
    for i in 0..scene_count {
        let scene = grid_scene(&format!("grid{i:02}"), rows, cols, 2.0, 0.3, &mut rng);
        episodes.extend(random_episodes(&scene, per_scene, min_hops, max_hops, &mut rng));
        scenes.push(scene);
    }
    (scenes, episodes)
}
