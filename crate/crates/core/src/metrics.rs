//! Navigation metrics (NE, SR, OSR, SPL, Map Efficiency) and extraction
//! metrics (F1 on direct, inferred and combined objects; binary-gain NDCG).

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::spatial::{normalize_name, Extraction, IoSample};
use crate::world::{Episode, Scene, WorldError};

/// Map-size penalty used by [`map_efficiency`] unless configured otherwise.
pub const DEFAULT_ME_ALPHA: f64 = 0.25;
/// Episodes with more steps than this count as long-horizon.
pub const LONG_HORIZON_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// The planner chose Stop.
    Stopped,
    /// The step budget ran out.
    MaxSteps,
    /// The planner chose a non-navigable viewpoint.
    IllegalAction,
    /// The planner kept failing and a stop was forced.
    PlannerFailure,
}

impl Termination {
    pub fn is_failure(self) -> bool {
        matches!(self, Termination::IllegalAction | Termination::PlannerFailure)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode_id: String,
    /// Every viewpoint occupied, starting with the start viewpoint.
    pub trajectory: Vec<String>,
    pub stopped_at: String,
    pub steps: usize,
    pub path_length: f64,
    /// Size of the agent's map when the episode ended.
    pub map_nodes: usize,
    pub min_goal_distance: f64,
    pub termination: Termination,
}

impl EpisodeResult {
    /// Builds a result from a trajectory, filling in the derived fields.
    pub fn from_trajectory(
        episode: &Episode,
        scene: &Scene,
        trajectory: Vec<String>,
        map_nodes: usize,
        termination: Termination,
    ) -> Result<Self, WorldError> {
        let goal = scene.position(&episode.goal)?;
        let mut path_length = 0.0;
        for pair in trajectory.windows(2) {
            path_length += scene.distance(&pair[0], &pair[1])?;
        }
        let mut min_goal_distance = f64::INFINITY;
        for id in &trajectory {
            min_goal_distance = min_goal_distance.min((scene.position(id)? - goal).norm());
        }
        Ok(Self {
            episode_id: episode.id.clone(),
            stopped_at: trajectory.last().cloned().unwrap_or_else(|| episode.start.clone()),
            steps: trajectory.len().saturating_sub(1),
            trajectory,
            path_length,
            map_nodes,
            min_goal_distance,
            termination,
        })
    }
}

pub fn navigation_error(result: &EpisodeResult, episode: &Episode, scene: &Scene) -> Result<f64, WorldError> {
    scene.distance(&result.stopped_at, &episode.goal)
}

/// Stopped within the goal radius without a planner failure.
pub fn success(result: &EpisodeResult, episode: &Episode, scene: &Scene) -> Result<bool, WorldError> {
    Ok(!result.termination.is_failure() && navigation_error(result, episode, scene)? <= episode.goal_radius)
}

/// Came within the goal radius at any point.
pub fn oracle_success(result: &EpisodeResult, episode: &Episode) -> bool {
    result.min_goal_distance <= episode.goal_radius
}

/// Success weighted by `l / max(p, l)` with `l` the metric shortest path.
pub fn spl(result: &EpisodeResult, episode: &Episode, scene: &Scene) -> Result<f64, WorldError> {
    if !success(result, episode, scene)? {
        return Ok(0.0);
    }
    let shortest = scene
        .shortest_path_length(&episode.start, &episode.goal)?
        .ok_or_else(|| WorldError::InvalidEpisode {
            episode: episode.id.clone(),
            reason: "goal unreachable from start".into(),
        })?;
    let denom = result.path_length.max(shortest);
    Ok(if denom == 0.0 { 1.0 } else { shortest / denom })
}

/// Expert-path coverage of the trajectory, discounted by map size:
/// `coverage / (1 + α·|map| / |expert|)`. Both paths are treated as sets.
///
/// Panics on an empty expert path.
pub fn map_efficiency(result: &EpisodeResult, episode: &Episode, alpha: f64) -> f64 {
    let expert: HashSet<&str> = episode.expert_path.iter().map(String::as_str).collect();
    assert!(!expert.is_empty(), "map efficiency needs a nonempty expert path");
    let visited: HashSet<&str> = result.trajectory.iter().map(String::as_str).collect();
    let expert_len = expert.len() as f64;
    let coverage = visited.intersection(&expert).count() as f64 / expert_len;
    coverage / (1.0 + alpha * result.map_nodes as f64 / expert_len)
}

fn name_set<S: AsRef<str>>(names: &[S]) -> HashSet<String> {
    names.iter().map(|n| normalize_name(n.as_ref())).collect()
}

/// Set F1; two empty sets score 1.
pub fn f1<S: AsRef<str>, T: AsRef<str>>(predicted: &[S], truth: &[T]) -> f64 {
    let p = name_set(predicted);
    let t = name_set(truth);
    if p.is_empty() && t.is_empty() {
        return 1.0;
    }
    let hits = p.intersection(&t).count() as f64;
    if hits == 0.0 {
        return 0.0;
    }
    let precision = hits / p.len() as f64;
    let recall = hits / t.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub direct: f64,
    pub inferred: f64,
    pub overall: f64,
}

pub fn f1_scores(predicted: &Extraction, truth: &IoSample) -> F1Scores {
    F1Scores {
        direct: f1(&predicted.direct, &truth.direct_objects),
        inferred: f1(&predicted.inferred, &truth.inferred_objects),
        overall: f1(&predicted.all_objects(), &truth.all_objects()),
    }
}

/// NDCG with binary relevance and `1 / log2(rank + 1)` discounts. Repeated
/// predictions count once, at their first rank.
pub fn ndcg<S: AsRef<str>, T: AsRef<str>>(predicted: &[S], truth: &[T]) -> f64 {
    let relevant = name_set(truth);
    let mut seen = HashSet::new();
    let ranked: Vec<String> = predicted
        .iter()
        .map(|p| normalize_name(p.as_ref()))
        .filter(|p| seen.insert(p.clone()))
        .collect();
    if relevant.is_empty() {
        return if ranked.is_empty() { 1.0 } else { 0.0 };
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .enumerate()
        .filter(|(_, p)| relevant.contains(*p))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let idcg: f64 = (1..=relevant.len()).map(discount).sum();
    dcg / idcg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode_id: String,
    pub navigation_error: f64,
    pub success: f64,
    pub oracle_success: f64,
    pub spl: f64,
    pub map_efficiency: f64,
    pub steps: usize,
    pub path_length: f64,
    pub map_nodes: usize,
    pub termination: Termination,
}

pub fn evaluate_episode(
    result: &EpisodeResult,
    episode: &Episode,
    scene: &Scene,
    alpha: f64,
) -> Result<EpisodeMetrics, WorldError> {
    let indicator = |b: bool| if b { 1.0 } else { 0.0 };
    Ok(EpisodeMetrics {
        episode_id: result.episode_id.clone(),
        navigation_error: navigation_error(result, episode, scene)?,
        success: indicator(success(result, episode, scene)?),
        oracle_success: indicator(oracle_success(result, episode)),
        spl: spl(result, episode, scene)?,
        map_efficiency: map_efficiency(result, episode, alpha),
        steps: result.steps,
        path_length: result.path_length,
        map_nodes: result.map_nodes,
        termination: result.termination,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub navigation_error: f64,
    pub success_rate: f64,
    pub oracle_success_rate: f64,
    pub spl: f64,
    pub map_efficiency: f64,
    pub mean_steps: f64,
    pub mean_path_length: f64,
}

impl Aggregate {
    pub fn of(episodes: &[EpisodeMetrics]) -> Self {
        if episodes.is_empty() {
            return Self::default();
        }
        let n = episodes.len() as f64;
        let mean = |f: fn(&EpisodeMetrics) -> f64| episodes.iter().map(f).sum::<f64>() / n;
        Self {
            count: episodes.len(),
            navigation_error: mean(|e| e.navigation_error),
            success_rate: mean(|e| e.success),
            oracle_success_rate: mean(|e| e.oracle_success),
            spl: mean(|e| e.spl),
            map_efficiency: mean(|e| e.map_efficiency),
            mean_steps: mean(|e| e.steps as f64),
            mean_path_length: mean(|e| e.path_length),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeError {
    pub episode_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub episodes: Vec<EpisodeMetrics>,
    pub aggregate: Aggregate,
    /// Episodes with more than [`LONG_HORIZON_STEPS`] steps.
    pub long_horizon_count: usize,
    /// True when the report covers no episodes.
    pub empty: bool,
    pub errors: Vec<EpisodeError>,
}

impl MetricReport {
    pub fn new(episodes: Vec<EpisodeMetrics>, errors: Vec<EpisodeError>) -> Self {
        Self {
            aggregate: Aggregate::of(&episodes),
            long_horizon_count: episodes.iter().filter(|e| e.steps > LONG_HORIZON_STEPS).count(),
            empty: episodes.is_empty(),
            episodes,
            errors,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per episode.
    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record([
            "episode_id",
            "navigation_error",
            "success",
            "oracle_success",
            "spl",
            "map_efficiency",
            "steps",
            "path_length",
            "map_nodes",
            "termination",
        ])?;
        for e in &self.episodes {
            writer.write_record([
                e.episode_id.clone(),
                e.navigation_error.to_string(),
                e.success.to_string(),
                e.oracle_success.to_string(),
                e.spl.to_string(),
                e.map_efficiency.to_string(),
                e.steps.to_string(),
                e.path_length.to_string(),
                e.map_nodes.to_string(),
                serde_json::to_value(e.termination)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default(),
            ])?;
        }
        let bytes = writer.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionMetrics {
    pub f1_direct: f64,
    pub f1_inferred: f64,
    pub f1: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub samples: Vec<ExtractionMetrics>,
    pub mean: ExtractionMetrics,
}

/// Pairs predictions with ground truth by position.
pub fn evaluate_extractions(predicted: &[Extraction], truth: &[IoSample]) -> ExtractionReport {
    let samples: Vec<ExtractionMetrics> = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let f = f1_scores(p, t);
            ExtractionMetrics {
                f1_direct: f.direct,
                f1_inferred: f.inferred,
                f1: f.overall,
                ndcg: ndcg(&p.all_objects(), &t.all_objects()),
            }
        })
        .collect();
    let n = samples.len().max(1) as f64;
    let mean = |f: fn(&ExtractionMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
    ExtractionReport {
        mean: ExtractionMetrics {
            f1_direct: mean(|s| s.f1_direct),
            f1_inferred: mean(|s| s.f1_inferred),
            f1: mean(|s| s.f1),
            ndcg: mean(|s| s.ndcg),
        },
        samples,
    }
}
