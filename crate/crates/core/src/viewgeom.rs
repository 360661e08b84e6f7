//! Discrete view selection.
//!
//! The agent's panorama is a 12 × 3 grid of camera directions: headings every
//! 30° starting at north, elevations −30°, 0° and +30°. View `k` sits at
//! elevation row `k / 12` and heading column `k % 12`. A target direction is
//! mapped to the view with the smallest L1 angular distance, heading
//! differences wrapped into (−π, π].

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{normalize_heading, Direction, Scene, WorldError};

pub const HEADING_COUNT: usize = 12;
pub const ELEVATION_COUNT: usize = 3;
pub const VIEW_COUNT: usize = HEADING_COUNT * ELEVATION_COUNT;

/// Distances closer than this are treated as ties.
pub const TIE_EPSILON: f64 = 1e-12;

const HEADING_STEP: f64 = TAU / HEADING_COUNT as f64;
const ELEVATION_STEP: f64 = PI / 6.0;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("zero displacement has no direction")]
    Degenerate,
}

/// Wraps an angle difference into (−π, π].
pub fn wrap_angle(delta: f64) -> f64 {
    let w = (delta + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ViewGrid;

impl ViewGrid {
    pub fn heading(&self, view: usize) -> f64 {
        (view % HEADING_COUNT) as f64 * HEADING_STEP
    }

    pub fn elevation(&self, view: usize) -> f64 {
        ((view / HEADING_COUNT) as f64 - 1.0) * ELEVATION_STEP
    }

    pub fn direction(&self, view: usize) -> Direction {
        Direction {
            heading: self.heading(view),
            elevation: self.elevation(view),
        }
    }

    pub fn index(&self, elevation_row: usize, heading_col: usize) -> usize {
        debug_assert!(elevation_row < ELEVATION_COUNT && heading_col < HEADING_COUNT);
        elevation_row * HEADING_COUNT + heading_col
    }

    pub fn l1_distance(&self, view: usize, target: Direction) -> f64 {
        wrap_angle(self.heading(view) - target.heading).abs() + (self.elevation(view) - target.elevation).abs()
    }

    /// View with the smallest wrapped L1 distance to `target`; ties go to the
    /// smallest index.
    ///
    /// The distance separates into a heading and an elevation term, so the
    /// column and row are chosen independently.
    pub fn select_best_view(&self, target: Direction) -> usize {
        let heading = normalize_heading(target.heading);

        let below = ((heading / HEADING_STEP).floor() as usize).min(HEADING_COUNT - 1);
        let above = (below + 1) % HEADING_COUNT;
        let d_below = wrap_angle(below as f64 * HEADING_STEP - heading).abs();
        let d_above = wrap_angle(above as f64 * HEADING_STEP - heading).abs();
        let col = if (d_below - d_above).abs() <= TIE_EPSILON {
            below.min(above)
        } else if d_above < d_below {
            above
        } else {
            below
        };

        let mut row = 0;
        let mut best = f64::INFINITY;
        for r in 0..ELEVATION_COUNT {
            let d = ((r as f64 - 1.0) * ELEVATION_STEP - target.elevation).abs();
            if d < best - TIE_EPSILON {
                best = d;
                row = r;
            }
        }
        self.index(row, col)
    }

    /// Level view whose 30° heading sector contains `heading`; this is where
    /// a panoramic sweep first sees a neighbor.
    pub fn sector_view(&self, heading: f64) -> usize {
        let col = ((normalize_heading(heading) + HEADING_STEP / 2.0) / HEADING_STEP).floor() as usize % HEADING_COUNT;
        self.index(1, col)
    }
}

pub fn target_direction(from: &Vector3<f64>, to: &Vector3<f64>) -> Result<Direction, GeomError> {
    Direction::of(&(to - from)).ok_or(GeomError::Degenerate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub target: String,
    pub discovered_view: usize,
    pub optimized_view: usize,
    pub direction: Direction,
    pub distance: f64,
    pub position: Vector3<f64>,
    /// Object names annotated at the target viewpoint.
    pub objects: Vec<String>,
}

type CandidateMap = HashMap<(String, String), Arc<Vec<CandidateView>>>;

/// Per-location candidate cache keyed by `(scene_id, viewpoint_id)`.
#[derive(Debug, Default)]
pub struct CandidateCache {
    entries: RwLock<CandidateMap>,
    computations: AtomicUsize,
}

impl CandidateCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of cache misses that triggered a discovery sweep.
    pub fn computations(&self) -> usize {
        self.computations.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Candidates at `at`: navigable neighbors with their discovery view and
    /// the grid view that best faces them. Computed once per location.
    pub fn discover_candidates(&self, scene: &Scene, at: &str) -> Result<Arc<Vec<CandidateView>>, WorldError> {
        let key = (scene.id().to_string(), at.to_string());
        if let Some(hit) = self.entries.read().expect("cache lock poisoned").get(&key) {
            return Ok(Arc::clone(hit));
        }
        let computed = Arc::new(compute_candidates(scene, at)?);
        self.computations.fetch_add(1, Ordering::Relaxed);
        let mut entries = self.entries.write().expect("cache lock poisoned");
        Ok(Arc::clone(entries.entry(key).or_insert(computed)))
    }
}

pub fn compute_candidates(scene: &Scene, at: &str) -> Result<Vec<CandidateView>, WorldError> {
    let grid = ViewGrid;
    let here = scene.viewpoint(at)?;
    here.neighbors
        .iter()
        .map(|n| {
            let target = scene.viewpoint(n)?;
            let direction = target_direction(&here.position, &target.position).unwrap_or(Direction {
                heading: 0.0,
                elevation: 0.0,
            });
            let mut objects: Vec<String> = Vec::new();
            for o in &target.objects {
                if !objects.contains(&o.name) {
                    objects.push(o.name.clone());
                }
            }
            Ok(CandidateView {
                target: n.clone(),
                discovered_view: grid.sector_view(direction.heading),
                optimized_view: grid.select_best_view(direction),
                direction,
                distance: (target.position - here.position).norm(),
                position: target.position,
                objects,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Viewpoint;

    fn deg(d: f64) -> f64 {
        d.to_radians()
    }

    fn brute_force(target: Direction) -> usize {
        let grid = ViewGrid;
        let dists: Vec<f64> = (0..VIEW_COUNT).map(|k| grid.l1_distance(k, target)).collect();
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        (0..VIEW_COUNT).find(|&k| dists[k] <= min + TIE_EPSILON).unwrap()
    }

    #[test]
    fn grid_layout() {
        let g = ViewGrid;
        assert_eq!(g.heading(0), 0.0);
        assert!((g.heading(11) - deg(330.0)).abs() < 1e-12);
        assert!((g.elevation(0) - deg(-30.0)).abs() < 1e-12);
        assert_eq!(g.elevation(12), 0.0);
        assert!((g.elevation(35) - deg(30.0)).abs() < 1e-12);
        assert_eq!(g.index(2, 11), 35);
    }

    #[test]
    fn wrap_into_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(deg(350.0)) - deg(-10.0)).abs() < 1e-12);
    }

    #[test]
    fn exact_views_select_themselves() {
        let g = ViewGrid;
        for k in 0..VIEW_COUNT {
            assert_eq!(g.select_best_view(g.direction(k)), k);
        }
    }

    #[test]
    fn wraps_359_to_north() {
        let g = ViewGrid;
        let k = g.select_best_view(Direction {
            heading: deg(359.0),
            elevation: 0.0,
        });
        assert_eq!(k, 12);
        assert_eq!(
            k,
            brute_force(Direction {
                heading: deg(359.0),
                elevation: 0.0
            })
        );
    }

    #[test]
    fn ties_go_to_lower_index() {
        let g = ViewGrid;
        assert_eq!(
            g.select_best_view(Direction {
                heading: deg(15.0),
                elevation: 0.0
            }),
            12
        );
        assert_eq!(
            g.select_best_view(Direction {
                heading: deg(345.0),
                elevation: 0.0
            }),
            12
        );
        // halfway between rows: lower row
        assert_eq!(
            g.select_best_view(Direction {
                heading: 0.0,
                elevation: deg(15.0)
            }),
            12
        );
    }

    #[test]
    fn target_direction_cases() {
        let o = Vector3::zeros();
        let d = target_direction(&o, &Vector3::new(0.0, 5.0, 0.0)).unwrap();
        assert_eq!((d.heading, d.elevation), (0.0, 0.0));
        let d = target_direction(&o, &Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!((d.heading, d.elevation), (0.0, PI / 2.0));
        assert!(target_direction(&o, &o).is_err());
    }

    fn scene() -> Scene {
        let vp = |id: &str, p: [f64; 3], ns: &[&str]| Viewpoint {
            id: id.into(),
            position: Vector3::from(p),
            neighbors: ns.iter().map(|s| s.to_string()).collect(),
            objects: vec![],
        };
        Scene::new(
            "s",
            vec![
                vp("a", [0.0; 3], &["east"]),
                vp("east", [3.0, 0.0, 0.0], &["a"]),
                vp("lonely", [9.0, 9.0, 0.0], &[]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn discovery_and_cache() {
        let scene = scene();
        let cache = CandidateCache::new();
        assert!(cache.discover_candidates(&scene, "lonely").unwrap().is_empty());

        let first = cache.discover_candidates(&scene, "a").unwrap();
        assert_eq!(first.len(), 1);
        assert_eq!(first[0].target, "east");
        // heading 90° is column 3, level row 1
        assert_eq!(first[0].optimized_view, 15);
        assert_eq!(first[0].discovered_view, 15);
        let computed = cache.computations();
        let second = cache.discover_candidates(&scene, "a").unwrap();
        assert_eq!(cache.computations(), computed);
        assert_eq!(first, second);
        assert_eq!(*second, compute_candidates(&scene, "a").unwrap());
    }
}
