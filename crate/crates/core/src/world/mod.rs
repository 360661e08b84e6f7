//! Ground-truth navigation environments.
//!
//! A [`Scene`] is an undirected graph of viewpoints with 3D positions and
//! object annotations. Axis convention: x east, y north, z up. Headings are
//! measured clockwise from north, elevations upward from the horizontal plane.

mod paths;
pub mod synth;

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::{FRAC_PI_2, TAU};
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use paths::{hop_distances, metric_distances};

/// Version tag every scene and episode file must carry.
pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_GOAL_RADIUS: f64 = 3.0;
pub const DEFAULT_MAX_STEPS: usize = 40;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    SchemaVersion(u32),
    #[error("duplicate viewpoint id {0}")]
    DuplicateId(String),
    #[error("viewpoint {from} lists unknown neighbor {to}")]
    DanglingNeighbor { from: String, to: String },
    #[error("edge {from} -> {to} has no reverse edge")]
    AsymmetricEdge { from: String, to: String },
    #[error("viewpoint {0} lists itself as a neighbor")]
    SelfLoop(String),
    #[error("object {name} at viewpoint {viewpoint}: {reason}")]
    InvalidObject {
        viewpoint: String,
        name: String,
        reason: String,
    },
    #[error("unknown viewpoint {0}")]
    UnknownViewpoint(String),
    #[error("illegal action: {to} is not navigable from {from}")]
    IllegalAction { from: String, to: String },
    #[error("episode {episode}: {reason}")]
    InvalidEpisode { episode: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub name: String,
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
    /// Box axes as unit row vectors.
    pub axes: [Vector3<f64>; 3],
}

impl ObjectAnnotation {
    /// Axis-aligned box helper.
    pub fn axis_aligned(name: &str, center: Vector3<f64>, half_extents: Vector3<f64>) -> Self {
        Self {
            name: name.to_string(),
            center,
            half_extents,
            axes: [Vector3::x(), Vector3::y(), Vector3::z()],
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.half_extents.iter().any(|h| !h.is_finite() || *h <= 0.0) {
            return Err("half_extents must be strictly positive".into());
        }
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                if (self.axes[i].dot(&self.axes[j]) - expected).abs() > ORTHONORMAL_TOL {
                    return Err("axes are not orthonormal".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub id: String,
    pub position: Vector3<f64>,
    pub neighbors: Vec<String>,
    #[serde(default)]
    pub objects: Vec<ObjectAnnotation>,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    schema_version: u32,
    scene_id: String,
    viewpoints: Vec<Viewpoint>,
}

/// A validated, immutable scene graph.
#[derive(Debug, Clone)]
pub struct Scene {
    scene_id: String,
    viewpoints: Vec<Viewpoint>,
    index: HashMap<String, usize>,
}

impl PartialEq for Scene {
    fn eq(&self, other: &Self) -> bool {
        self.scene_id == other.scene_id && self.viewpoints == other.viewpoints
    }
}

impl Scene {
    /// Validates and builds a scene from raw viewpoints.
    pub fn new(scene_id: impl Into<String>, viewpoints: Vec<Viewpoint>) -> Result<Self, WorldError> {
        let mut index = HashMap::with_capacity(viewpoints.len());
        for (i, vp) in viewpoints.iter().enumerate() {
            if index.insert(vp.id.clone(), i).is_some() {
                return Err(WorldError::DuplicateId(vp.id.clone()));
            }
        }
        let mut edges = BTreeSet::new();
        for vp in &viewpoints {
            for n in &vp.neighbors {
                if n == &vp.id {
                    return Err(WorldError::SelfLoop(vp.id.clone()));
                }
                if !index.contains_key(n) {
                    return Err(WorldError::DanglingNeighbor {
                        from: vp.id.clone(),
                        to: n.clone(),
                    });
                }
                edges.insert((vp.id.as_str(), n.as_str()));
            }
            for obj in &vp.objects {
                obj.validate().map_err(|reason| WorldError::InvalidObject {
                    viewpoint: vp.id.clone(),
                    name: obj.name.clone(),
                    reason,
                })?;
            }
        }
        for &(a, b) in &edges {
            if !edges.contains(&(b, a)) {
                return Err(WorldError::AsymmetricEdge {
                    from: a.to_string(),
                    to: b.to_string(),
                });
            }
        }
        Ok(Self {
            scene_id: scene_id.into(),
            viewpoints,
            index,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, WorldError> {
        let file: SceneFile = serde_json::from_str(text)?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(WorldError::SchemaVersion(file.schema_version));
        }
        Self::new(file.scene_id, file.viewpoints)
    }

    pub fn to_json(&self) -> String {
        let file = SceneFile {
            schema_version: SCHEMA_VERSION,
            scene_id: self.scene_id.clone(),
            viewpoints: self.viewpoints.clone(),
        };
        serde_json::to_string_pretty(&file).expect("scene serializes")
    }

    pub fn id(&self) -> &str {
        &self.scene_id
    }

    pub fn viewpoints(&self) -> &[Viewpoint] {
        &self.viewpoints
    }

    pub fn len(&self) -> usize {
        self.viewpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.viewpoints.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.viewpoints.iter().map(|v| v.neighbors.len()).sum::<usize>() / 2
    }

    pub fn viewpoint(&self, id: &str) -> Result<&Viewpoint, WorldError> {
        self.index
            .get(id)
            .map(|&i| &self.viewpoints[i])
            .ok_or_else(|| WorldError::UnknownViewpoint(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn position(&self, id: &str) -> Result<Vector3<f64>, WorldError> {
        Ok(self.viewpoint(id)?.position)
    }

    pub fn is_neighbor(&self, from: &str, to: &str) -> bool {
        self.viewpoint(from)
            .map(|v| v.neighbors.iter().any(|n| n == to))
            .unwrap_or(false)
    }

    pub fn distance(&self, a: &str, b: &str) -> Result<f64, WorldError> {
        Ok((self.position(a)? - self.position(b)?).norm())
    }

    /// All object names annotated anywhere in the scene, lowercased.
    pub fn object_vocabulary(&self) -> BTreeSet<String> {
        self.viewpoints
            .iter()
            .flat_map(|v| v.objects.iter())
            .map(|o| o.name.trim().to_lowercase())
            .filter(|n| !n.is_empty())
            .collect()
    }

    /// Shortest path length in meters over edge lengths.
    pub fn shortest_path_length(&self, from: &str, to: &str) -> Result<Option<f64>, WorldError> {
        self.viewpoint(to)?;
        Ok(metric_distances(self, from)?.get(to).copied())
    }
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene, WorldError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| WorldError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Scene::from_json(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub scene_id: String,
    pub instruction: String,
    pub start: String,
    pub goal: String,
    pub expert_path: Vec<String>,
    #[serde(default = "default_goal_radius")]
    pub goal_radius: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
}

fn default_goal_radius() -> f64 {
    DEFAULT_GOAL_RADIUS
}

fn default_max_steps() -> usize {
    DEFAULT_MAX_STEPS
}

impl Episode {
    /// Checks the episode's invariants against its scene.
    pub fn validate(&self, scene: &Scene) -> Result<(), WorldError> {
        let bad = |reason: &str| WorldError::InvalidEpisode {
            episode: self.id.clone(),
            reason: reason.to_string(),
        };
        if scene.id() != self.scene_id {
            return Err(bad("scene id mismatch"));
        }
        if self.goal_radius.is_nan() || self.goal_radius <= 0.0 {
            return Err(bad("goal_radius must be positive"));
        }
        if self.max_steps == 0 {
            return Err(bad("max_steps must be positive"));
        }
        scene.viewpoint(&self.start)?;
        scene.viewpoint(&self.goal)?;
        if self.expert_path.first() != Some(&self.start) || self.expert_path.last() != Some(&self.goal) {
            return Err(bad("expert_path must run from start to goal"));
        }
        for pair in self.expert_path.windows(2) {
            if !scene.is_neighbor(&pair[0], &pair[1]) {
                return Err(bad(&format!(
                    "expert_path step {} -> {} is not an edge",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct EpisodeFile {
    schema_version: u32,
    episodes: Vec<Episode>,
}

pub fn episodes_from_json(text: &str) -> Result<Vec<Episode>, WorldError> {
    let file: EpisodeFile = serde_json::from_str(text)?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(WorldError::SchemaVersion(file.schema_version));
    }
    Ok(file.episodes)
}

pub fn episodes_to_json(episodes: &[Episode]) -> String {
    let file = EpisodeFile {
        schema_version: SCHEMA_VERSION,
        episodes: episodes.to_vec(),
    };
    serde_json::to_string_pretty(&file).expect("episodes serialize")
}

pub fn load_episodes(path: impl AsRef<Path>) -> Result<Vec<Episode>, WorldError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| WorldError::Io {
        path: path.display().to_string(),
        source,
    })?;
    episodes_from_json(&text)
}

/// Heading and elevation of a displacement, in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    /// Clockwise from north, in `[0, 2π)`.
    pub heading: f64,
    /// In `[-π/2, π/2]`.
    pub elevation: f64,
}

impl Direction {
    /// Direction of `delta`; `None` for a zero vector. Heading is 0 at the poles.
    pub fn of(delta: &Vector3<f64>) -> Option<Self> {
        let horizontal = delta.x.hypot(delta.y);
        if horizontal == 0.0 && delta.z == 0.0 {
            return None;
        }
        if horizontal == 0.0 {
            return Some(Self {
                heading: 0.0,
                elevation: FRAC_PI_2.copysign(delta.z),
            });
        }
        Some(Self {
            heading: normalize_heading(delta.x.atan2(delta.y)),
            elevation: delta.z.atan2(horizontal),
        })
    }
}

/// Maps any angle into `[0, 2π)`.
pub fn normalize_heading(theta: f64) -> f64 {
    let h = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if h >= TAU {
        0.0
    } else {
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Navigable {
    pub id: String,
    pub direction: Direction,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepObservation {
    pub current: String,
    pub navigable: Vec<Navigable>,
    pub visible_objects: Vec<String>,
}

pub fn observe(scene: &Scene, current: &str) -> Result<StepObservation, WorldError> {
    let vp = scene.viewpoint(current)?;
    let navigable = vp
        .neighbors
        .iter()
        .map(|n| {
            let delta = scene.position(n)? - vp.position;
            // coincident neighbors get the degenerate level/north direction
            let direction = Direction::of(&delta).unwrap_or(Direction {
                heading: 0.0,
                elevation: 0.0,
            });
            Ok(Navigable {
                id: n.clone(),
                direction,
                distance: delta.norm(),
            })
        })
        .collect::<Result<Vec<_>, WorldError>>()?;
    let mut visible_objects: Vec<String> = Vec::new();
    for obj in &vp.objects {
        if !visible_objects.contains(&obj.name) {
            visible_objects.push(obj.name.clone());
        }
    }
    Ok(StepObservation {
        current: current.to_string(),
        navigable,
        visible_objects,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Stop,
    MoveTo(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Moved(String),
    Stopped,
}

pub fn step(scene: &Scene, current: &str, action: &Action) -> Result<StepOutcome, WorldError> {
    scene.viewpoint(current)?;
    match action {
        Action::Stop => Ok(StepOutcome::Stopped),
        Action::MoveTo(to) if scene.is_neighbor(current, to) => Ok(StepOutcome::Moved(to.clone())),
        Action::MoveTo(to) => Err(WorldError::IllegalAction {
            from: current.to_string(),
            to: to.clone(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn vp(id: &str, pos: [f64; 3], neighbors: &[&str]) -> Viewpoint {
        Viewpoint {
            id: id.into(),
            position: Vector3::from(pos),
            neighbors: neighbors.iter().map(|s| s.to_string()).collect(),
            objects: vec![],
        }
    }

    #[test]
    fn minimal_scene_parses() {
        let text = r#"{"schema_version":1,"scene_id":"s","viewpoints":[
            {"id":"a","position":[0,0,0],"neighbors":["b"],"objects":[]},
            {"id":"b","position":[0,1,0],"neighbors":["a"],
             "objects":[{"name":"lamp","center":[0,1,1],"half_extents":[0.1,0.1,0.2],
                         "axes":[[1,0,0],[0,1,0],[0,0,1]]}]}]}"#;
        let scene = Scene::from_json(text).unwrap();
        assert_eq!(scene.len(), 2);
        assert_eq!(scene.edge_count(), 1);
        assert!(scene.is_neighbor("a", "b") && scene.is_neighbor("b", "a"));
        assert_eq!(Scene::from_json(text).unwrap(), scene);
    }

    #[test]
    fn dangling_neighbor_reports_id() {
        let err = Scene::new("s", vec![vp("a", [0.0; 3], &["ghost"])]).unwrap_err();
        match err {
            WorldError::DanglingNeighbor { from, to } => {
                assert_eq!(from, "a");
                assert_eq!(to, "ghost");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn asymmetric_edge_rejected() {
        let err = Scene::new("s", vec![vp("a", [0.0; 3], &["b"]), vp("b", [1.0, 0.0, 0.0], &[])]).unwrap_err();
        assert!(matches!(err, WorldError::AsymmetricEdge { ref from, .. } if from == "a"));
    }

    #[test]
    fn bad_schema_and_objects_rejected() {
        let text = r#"{"schema_version":2,"scene_id":"s","viewpoints":[]}"#;
        assert!(matches!(Scene::from_json(text), Err(WorldError::SchemaVersion(2))));

        let mut a = vp("a", [0.0; 3], &[]);
        a.objects.push(ObjectAnnotation::axis_aligned(
            "box",
            Vector3::zeros(),
            Vector3::new(1.0, 0.0, 1.0),
        ));
        assert!(matches!(
            Scene::new("s", vec![a.clone()]),
            Err(WorldError::InvalidObject { .. })
        ));

        a.objects[0].half_extents = Vector3::new(1.0, 1.0, 1.0);
        a.objects[0].axes[1] = Vector3::new(0.0, 1.0, 0.01);
        assert!(matches!(
            Scene::new("s", vec![a]),
            Err(WorldError::InvalidObject { .. })
        ));
    }

    #[test]
    fn observe_axis_conventions() {
        let scene = Scene::new(
            "s",
            vec![
                vp("o", [0.0, 0.0, 0.0], &["n", "up", "e"]),
                vp("n", [0.0, 2.0, 0.0], &["o"]),
                vp("up", [0.0, 0.0, 3.0], &["o"]),
                vp("e", [4.0, 0.0, 0.0], &["o"]),
            ],
        )
        .unwrap();
        let obs = observe(&scene, "o").unwrap();
        let ids: Vec<_> = obs.navigable.iter().map(|n| n.id.as_str()).collect();
        assert_eq!(ids, ["n", "up", "e"]);
        assert_eq!(
            obs.navigable[0].direction,
            Direction {
                heading: 0.0,
                elevation: 0.0
            }
        );
        assert_eq!(obs.navigable[0].distance, 2.0);
        assert_eq!(obs.navigable[1].direction.elevation, PI / 2.0);
        assert_eq!(obs.navigable[1].direction.heading, 0.0);
        assert!((obs.navigable[2].direction.heading - PI / 2.0).abs() < 1e-15);
        assert!(matches!(observe(&scene, "zz"), Err(WorldError::UnknownViewpoint(_))));
    }

    #[test]
    fn heading_renormalization_is_stable() {
        for &t in &[0.0, 0.3, PI, 5.9, TAU - 1e-12] {
            let h = normalize_heading(t);
            assert_eq!(normalize_heading(h), h);
            assert!((normalize_heading(h + TAU) - h).abs() < 1e-12);
        }
        assert!(normalize_heading(-1e-300) < TAU);
    }

    #[test]
    fn step_rules() {
        let scene = Scene::new(
            "s",
            vec![
                vp("a", [0.0; 3], &["b"]),
                vp("b", [0.0, 1.0, 0.0], &["a", "c"]),
                vp("c", [0.0, 2.0, 0.0], &["b"]),
            ],
        )
        .unwrap();
        assert_eq!(
            step(&scene, "a", &Action::MoveTo("b".into())).unwrap(),
            StepOutcome::Moved("b".into())
        );
        assert_eq!(step(&scene, "a", &Action::Stop).unwrap(), StepOutcome::Stopped);
        assert!(matches!(
            step(&scene, "a", &Action::MoveTo("c".into())),
            Err(WorldError::IllegalAction { .. })
        ));
        // observe after a move reports the new location
        if let StepOutcome::Moved(n) = step(&scene, "a", &Action::MoveTo("b".into())).unwrap() {
            assert_eq!(observe(&scene, &n).unwrap().current, "b");
        }
    }

    #[test]
    fn episode_validation() {
        let scene = Scene::new(
            "s",
            vec![
                vp("a", [0.0; 3], &["b"]),
                vp("b", [0.0, 1.0, 0.0], &["a", "c"]),
                vp("c", [0.0, 2.0, 0.0], &["b"]),
            ],
        )
        .unwrap();
        let mut ep = Episode {
            id: "e".into(),
            scene_id: "s".into(),
            instruction: "walk".into(),
            start: "a".into(),
            goal: "c".into(),
            expert_path: vec!["a".into(), "b".into(), "c".into()],
            goal_radius: 3.0,
            max_steps: 40,
        };
        ep.validate(&scene).unwrap();
        ep.expert_path = vec!["a".into(), "c".into()];
        assert!(ep.validate(&scene).is_err());
        ep.expert_path = vec!["a".into(), "b".into(), "c".into()];
        ep.goal_radius = 0.0;
        assert!(ep.validate(&scene).is_err());
    }

    #[test]
    fn episode_file_defaults() {
        let text = r#"{"schema_version":1,"episodes":[{"id":"e","scene_id":"s","instruction":"go",
            "start":"a","goal":"b","expert_path":["a","b"]}]}"#;
        let eps = episodes_from_json(text).unwrap();
        assert_eq!(eps[0].goal_radius, 3.0);
        assert_eq!(eps[0].max_steps, 40);
        assert_eq!(episodes_from_json(&episodes_to_json(&eps)).unwrap(), eps);
    }
}
