use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use super::{Scene, WorldError};

/// Unweighted hop counts from `from` to every reachable viewpoint.
pub fn hop_distances(scene: &Scene, from: &str) -> Result<HashMap<String, usize>, WorldError> {
    scene.viewpoint(from)?;
    let mut dist = HashMap::new();
    dist.insert(from.to_string(), 0);
    let mut queue = VecDeque::from([from.to_string()]);
    while let Some(id) = queue.pop_front() {
        let d = dist[&id];
        for n in &scene.viewpoint(&id)?.neighbors {
            if !dist.contains_key(n) {
                dist.insert(n.clone(), d + 1);
                queue.push_back(n.clone());
            }
        }
    }
    Ok(dist)
}

struct Frontier {
    cost: f64,
    idx: usize,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Frontier {}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier {
    // min-heap on cost
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| other.idx.cmp(&self.idx))
    }
}

/// Dijkstra over Euclidean edge lengths.
pub fn metric_distances(scene: &Scene, from: &str) -> Result<HashMap<String, f64>, WorldError> {
    scene.viewpoint(from)?;
    let vps = scene.viewpoints();
    let mut best = vec![f64::INFINITY; vps.len()];
    let start = scene.index[from];
    best[start] = 0.0;
    let mut heap = BinaryHeap::from([Frontier { cost: 0.0, idx: start }]);
    while let Some(Frontier { cost, idx }) = heap.pop() {
        if cost > best[idx] {
            continue;
        }
        let here = &vps[idx];
        for n in &here.neighbors {
            let j = scene.index[n];
            let next = cost + (vps[j].position - here.position).norm();
            if next < best[j] {
                best[j] = next;
                heap.push(Frontier { cost: next, idx: j });
            }
        }
    }
    Ok(vps
        .iter()
        .zip(best)
        .filter(|(_, d)| d.is_finite())
        .map(|(v, d)| (v.id.clone(), d))
        .collect())
}
