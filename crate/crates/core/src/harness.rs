//! Episode loop, corpus evaluation, iterative refinement, long-horizon
//! slicing and trace persistence.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{ChatClient, ChatConfig, HttpChatClient};
use crate::memgraph::{PruneConfig, PrunedNode, TopoMap};
use crate::metrics::{
    evaluate_episode, evaluate_extractions, EpisodeError, EpisodeMetrics, EpisodeResult, ExtractionReport,
    MetricReport, Termination, DEFAULT_ME_ALPHA, LONG_HORIZON_STEPS,
};
use crate::planner::{
    build_prompt, decide, ExternalPlanner, FrontierGreedyPlanner, OraclePlanner, Planner, PlannerInput, RandomPlanner,
    ReplayPlanner, TaskVariant, DEFAULT_MAX_RETRIES,
};
use crate::spatial::{
    enhance_observation, extract_objects_external, extract_objects_rule_based, Extraction, ExtractionError, IoSample,
};
use crate::viewgeom::CandidateCache;
use crate::world::{observe, step, Action, Episode, Scene, StepOutcome, WorldError};

/// Upper bound on worker threads when every step calls a remote model.
pub const EXTERNAL_PARALLELISM_CAP: usize = 8;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad trace line {line}: {source}")]
    Trace {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("episode {0} has no scene loaded")]
    MissingScene(String),
    #[error("{predictions} predictions for {samples} samples")]
    LengthMismatch { predictions: usize, samples: usize },
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    #[default]
    Oracle,
    Frontier,
    Random,
    Replay,
    External,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// Whole-word matches against the scene's object vocabulary.
    #[default]
    #[serde(alias = "rule-based")]
    RuleBased,
    /// The chat model lists direct and inferred objects.
    External,
    /// No task objects.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenes: Vec<PathBuf>,
    pub episodes: Option<PathBuf>,
    pub planner: PlannerKind,
    /// Trace file whose actions drive the replay planner.
    pub replay_trace: Option<PathBuf>,
    pub extractor: ExtractorKind,
    pub variant: TaskVariant,
    pub pruning: bool,
    pub prune: PruneConfig,
    pub seed: u64,
    /// Worker threads; defaults to the processor count.
    pub parallelism: Option<usize>,
    pub max_retries: u32,
    /// Overrides every episode's step budget.
    pub max_steps: Option<usize>,
    pub alpha: f64,
    pub output_dir: Option<PathBuf>,
    /// Gives the random planner a fresh seed in each refinement round.
    pub reseed_rounds: bool,
    pub chat: ChatConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenes: Vec::new(),
            episodes: None,
            planner: PlannerKind::default(),
            replay_trace: None,
            extractor: ExtractorKind::default(),
            variant: TaskVariant::default(),
            pruning: true,
            prune: PruneConfig::default(),
            seed: 0,
            parallelism: None,
            max_retries: DEFAULT_MAX_RETRIES,
            max_steps: None,
            alpha: DEFAULT_ME_ALPHA,
            output_dir: None,
            reseed_rounds: false,
            chat: ChatConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses the TOML key-value config format.
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(io_error(path))?)
    }

    pub fn settings(&self) -> EpisodeSettings {
        EpisodeSettings {
            variant: self.variant,
            prune: self.pruning.then(|| self.prune.clone()),
            max_retries: self.max_retries,
            max_steps: self.max_steps,
        }
    }

    pub fn worker_count(&self) -> usize {
        let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
        let requested = self.parallelism.unwrap_or(cpus).max(1);
        if self.planner == PlannerKind::External || self.extractor == ExtractorKind::External {
            requested.min(EXTERNAL_PARALLELISM_CAP)
        } else {
            requested
        }
    }

    /// Planner for refinement round `round` (1-based). Only the random
    /// planner reacts to the round, and only with `reseed_rounds` set.
    pub fn planner_for_round(
        &self,
        round: usize,
        chat: Option<&Arc<dyn ChatClient>>,
    ) -> Result<Box<dyn Planner>, HarnessError> {
        Ok(match self.planner {
            PlannerKind::Oracle => Box::new(OraclePlanner),
            PlannerKind::Frontier => Box::new(FrontierGreedyPlanner),
            PlannerKind::Random => {
                let seed = if self.reseed_rounds {
                    round_seed(self.seed, round)
                } else {
                    self.seed
                };
                Box::new(RandomPlanner { seed })
            }
            PlannerKind::Replay => {
                let path = self
                    .replay_trace
                    .as_ref()
                    .ok_or_else(|| HarnessError::Config("replay planner needs replay_trace".into()))?;
                Box::new(replay_planner(&read_traces(path)?))
            }
            PlannerKind::External => {
                Box::new(ExternalPlanner::new(Arc::clone(chat.ok_or_else(|| {
                    HarnessError::Config("external planner needs a chat client".into())
                })?)))
            }
        })
    }

    pub fn planner(&self, chat: Option<&Arc<dyn ChatClient>>) -> Result<Box<dyn Planner>, HarnessError> {
        self.planner_for_round(1, chat)
    }

    /// HTTP client when the planner or the extractor needs one.
    pub fn chat_client(&self) -> Option<Arc<dyn ChatClient>> {
        (self.planner == PlannerKind::External || self.extractor == ExtractorKind::External)
            .then(|| Arc::new(HttpChatClient::new(self.chat.clone())) as Arc<dyn ChatClient>)
    }

    pub fn extractor(&self, chat: Option<&Arc<dyn ChatClient>>) -> Result<Extractor, HarnessError> {
        Ok(match self.extractor {
            ExtractorKind::RuleBased => Extractor::RuleBased,
            ExtractorKind::None => Extractor::None,
            ExtractorKind::External => Extractor::External(Arc::clone(
                chat.ok_or_else(|| HarnessError::Config("external extractor needs a chat client".into()))?,
            )),
        })
    }
}

/// Seed used by refinement round `round`; round 1 keeps the base seed.
pub fn round_seed(base: u64, round: usize) -> u64 {
    base ^ (round.saturating_sub(1) as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[derive(Clone, Default)]
pub enum Extractor {
    #[default]
    RuleBased,
    External(Arc<dyn ChatClient>),
    None,
}

impl Extractor {
    pub fn extract(&self, instruction: &str, scene: &Scene) -> Result<Extraction, ExtractionError> {
        match self {
            Extractor::RuleBased => Ok(extract_objects_rule_based(instruction, &scene.object_vocabulary())),
            Extractor::External(client) => extract_objects_external(instruction, client.as_ref()),
            Extractor::None => Ok(Extraction::default()),
        }
    }
}

/// Per-episode knobs taken from [`RunConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSettings {
    pub variant: TaskVariant,
    /// `None` disables pruning.
    pub prune: Option<PruneConfig>,
    pub max_retries: u32,
    pub max_steps: Option<usize>,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        RunConfig::default().settings()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceOption {
    pub letter: char,
    pub action: Action,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub clock: usize,
    pub current: String,
    pub options: Vec<TraceOption>,
    pub action: Action,
    pub pruned: Vec<PrunedNode>,
    pub map_nodes: usize,
    pub map_lines: usize,
    pub prompt_bytes: usize,
    pub thought: String,
    pub attempts: u32,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub episode_id: String,
    pub scene_id: String,
    pub planner: String,
    pub extraction: Extraction,
    pub extraction_error: Option<String>,
    pub steps: Vec<StepRecord>,
    pub result: EpisodeResult,
}

impl TraceRecord {
    /// Actions in the order they were chosen.
    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action.clone()).collect()
    }
}

/// Runs one episode: observe, update the map, prune, discover candidates,
/// build the prompt, decide, act. Ends on Stop, on the step budget or on an
/// illegal choice.
pub fn run_episode(
    scene: &Scene,
    episode: &Episode,
    planner: &dyn Planner,
    extractor: &Extractor,
    settings: &EpisodeSettings,
) -> Result<TraceRecord, HarnessError> {
    episode.validate(scene)?;
    let max_steps = settings.max_steps.unwrap_or(episode.max_steps);
    let (extraction, extraction_error) = match extractor.extract(&episode.instruction, scene) {
        Ok(e) => (e, None),
        Err(e) => {
            log::warn!("episode {}: object extraction failed: {e}", episode.id);
            (Extraction::default(), Some(e.to_string()))
        }
    };
    let task_objects = extraction.all_objects();

    let mut map = TopoMap::new();
    let cache = CandidateCache::new();
    let mut current = episode.start.clone();
    let mut trajectory = vec![current.clone()];
    let mut history: Vec<Action> = Vec::new();
    let mut previous_plan: Option<String> = None;
    let mut steps: Vec<StepRecord> = Vec::new();

    let termination = loop {
        if trajectory.len() > max_steps {
            break Termination::MaxSteps;
        }
        let mut obs = observe(scene, &current)?;
        obs.visible_objects = enhance_observation(&obs.visible_objects, &task_objects);
        map.observe_and_update(&obs);
        let pruned = match &settings.prune {
            Some(cfg) => map.prune(cfg),
            None => Vec::new(),
        };
        let candidates = cache.discover_candidates(scene, &current)?;
        let bundle = build_prompt(
            settings.variant,
            episode,
            &map,
            &extraction,
            &candidates,
            &history,
            previous_plan.as_deref(),
        );
        let input = PlannerInput {
            scene,
            episode,
            map: &map,
            extraction: &extraction,
            bundle: &bundle,
            current: &current,
            step: steps.len(),
            attempt: 0,
        };
        let decided = decide(planner, &input, settings.max_retries);
        let mut record = StepRecord {
            clock: map.clock(),
            current: current.clone(),
            options: bundle
                .options
                .iter()
                .map(|o| TraceOption {
                    letter: o.letter,
                    action: o.action.clone(),
                    text: o.text.clone(),
                })
                .collect(),
            action: Action::Stop,
            pruned,
            map_nodes: map.len(),
            map_lines: bundle.memory.map_line_count(),
            prompt_bytes: bundle.byte_len(),
            thought: String::new(),
            attempts: 0,
            failure: None,
        };
        let outcome = match decided {
            Ok(outcome) => outcome,
            Err(illegal) => {
                log::warn!("episode {}: {illegal}", episode.id);
                record.action = illegal.action;
                record.attempts = 1;
                record.failure = Some(format!("illegal action: {}", illegal.raw));
                steps.push(record);
                break Termination::IllegalAction;
            }
        };
        record.action = outcome.decision.action.clone();
        record.thought = outcome.decision.thought.clone();
        record.attempts = outcome.attempts;
        record.failure = outcome.failure.clone();
        steps.push(record);

        match step(scene, &current, &outcome.decision.action)? {
            StepOutcome::Stopped if outcome.failure.is_some() => break Termination::PlannerFailure,
            StepOutcome::Stopped => break Termination::Stopped,
            StepOutcome::Moved(to) => {
                history.push(outcome.decision.action);
                if !outcome.decision.thought.is_empty() {
                    previous_plan = Some(outcome.decision.thought);
                }
                trajectory.push(to.clone());
                current = to;
            }
        }
    };

    let result = EpisodeResult::from_trajectory(episode, scene, trajectory, map.len(), termination)?;
    Ok(TraceRecord {
        episode_id: episode.id.clone(),
        scene_id: scene.id().to_string(),
        planner: planner.name().to_string(),
        extraction,
        extraction_error,
        steps,
        result,
    })
}

/// Replay planner that re-issues every action recorded in `traces`.
pub fn replay_planner(traces: &[TraceRecord]) -> ReplayPlanner {
    ReplayPlanner::new(traces.iter().map(|t| (t.episode_id.clone(), t.actions())).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRun {
    pub trace: TraceRecord,
    pub metrics: EpisodeMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRun {
    /// Finished episodes in corpus order.
    pub runs: Vec<EpisodeRun>,
    pub errors: Vec<EpisodeError>,
}

impl CorpusRun {
    pub fn traces(&self) -> Vec<&TraceRecord> {
        self.runs.iter().map(|r| &r.trace).collect()
    }

    pub fn report(&self) -> MetricReport {
        MetricReport::new(
            self.runs.iter().map(|r| r.metrics.clone()).collect(),
            self.errors.clone(),
        )
    }
}

/// Everything needed to run a corpus.
#[derive(Clone)]
pub struct Corpus {
    pub scenes: BTreeMap<String, Scene>,
    pub episodes: Vec<Episode>,
}

impl Corpus {
    pub fn new(scenes: impl IntoIterator<Item = Scene>, episodes: Vec<Episode>) -> Self {
        Self {
            scenes: scenes.into_iter().map(|s| (s.id().to_string(), s)).collect(),
            episodes,
        }
    }

    pub fn load(scene_paths: &[PathBuf], episodes: &Path) -> Result<Self, HarnessError> {
        let scenes = scene_paths
            .iter()
            .map(crate::world::load_scene)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(scenes, crate::world::load_episodes(episodes)?))
    }

    pub fn scene_for(&self, episode: &Episode) -> Result<&Scene, HarnessError> {
        self.scenes
            .get(&episode.scene_id)
            .ok_or_else(|| HarnessError::MissingScene(episode.id.clone()))
    }
}

fn run_one(
    corpus: &Corpus,
    episode: &Episode,
    planner: &dyn Planner,
    extractor: &Extractor,
    settings: &EpisodeSettings,
    alpha: f64,
) -> Result<EpisodeRun, HarnessError> {
    let scene = corpus.scene_for(episode)?;
    let trace = run_episode(scene, episode, planner, extractor, settings)?;
    let metrics = evaluate_episode(&trace.result, episode, scene, alpha)?;
    Ok(EpisodeRun { trace, metrics })
}

fn run_selected(
    corpus: &Corpus,
    selected: &[&Episode],
    planner: &dyn Planner,
    extractor: &Extractor,
    cfg: &RunConfig,
) -> Result<CorpusRun, HarnessError> {
    let settings = cfg.settings();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.worker_count())
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let outcomes: Vec<Result<EpisodeRun, HarnessError>> = pool.install(|| {
        selected
            .par_iter()
            .map(|ep| run_one(corpus, ep, planner, extractor, &settings, cfg.alpha))
            .collect()
    });
    let mut run = CorpusRun {
        runs: Vec::new(),
        errors: Vec::new(),
    };
    for (ep, outcome) in selected.iter().zip(outcomes) {
        match outcome {
            Ok(r) => run.runs.push(r),
            Err(e) => run.errors.push(EpisodeError {
                episode_id: ep.id.clone(),
                message: e.to_string(),
            }),
        }
    }
    Ok(run)
}

/// Runs every episode, in parallel up to the configured worker count.
/// Results keep corpus order; per-episode failures land in `errors`.
pub fn run_corpus(
    corpus: &Corpus,
    planner: &dyn Planner,
    extractor: &Extractor,
    cfg: &RunConfig,
) -> Result<CorpusRun, HarnessError> {
    let all: Vec<&Episode> = corpus.episodes.iter().collect();
    run_selected(corpus, &all, planner, extractor, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    /// Episodes re-run this round.
    pub rerun: Vec<String>,
    /// Cumulative results after this round.
    pub report: MetricReport,
}

/// Iterative refinement: round 1 runs the whole corpus, later rounds re-run
/// only episodes that are failed in the cumulative results and replace
/// their outcomes. `planner_for_round` receives the 1-based round number.
pub fn refine_rounds(
    corpus: &Corpus,
    rounds: usize,
    planner_for_round: &dyn Fn(usize) -> Result<Box<dyn Planner>, HarnessError>,
    extractor: &Extractor,
    cfg: &RunConfig,
) -> Result<(Vec<RoundReport>, CorpusRun), HarnessError> {
    if rounds == 0 {
        return Err(HarnessError::Config("refinement needs at least one round".into()));
    }
    let mut cumulative: BTreeMap<String, Result<EpisodeRun, EpisodeError>> = BTreeMap::new();
    let mut reports = Vec::new();
    for round in 1..=rounds {
        let selected: Vec<&Episode> = corpus
            .episodes
            .iter()
            .filter(|ep| match cumulative.get(&ep.id) {
                None => true,
                Some(Ok(run)) => run.metrics.success < 1.0,
                Some(Err(_)) => true,
            })
            .collect();
        let planner = planner_for_round(round)?;
        let run = run_selected(corpus, &selected, planner.as_ref(), extractor, cfg)?;
        for r in run.runs {
            cumulative.insert(r.trace.episode_id.clone(), Ok(r));
        }
        for e in run.errors {
            cumulative.insert(e.episode_id.clone(), Err(e));
        }
        let snapshot = ordered_run(corpus, &cumulative);
        reports.push(RoundReport {
            round,
            rerun: selected.iter().map(|e| e.id.clone()).collect(),
            report: snapshot.report(),
        });
    }
    Ok((reports, ordered_run(corpus, &cumulative)))
}

fn ordered_run(corpus: &Corpus, cumulative: &BTreeMap<String, Result<EpisodeRun, EpisodeError>>) -> CorpusRun {
    let mut run = CorpusRun {
        runs: Vec::new(),
        errors: Vec::new(),
    };
    for ep in &corpus.episodes {
        match cumulative.get(&ep.id) {
            Some(Ok(r)) => run.runs.push(r.clone()),
            Some(Err(e)) => run.errors.push(e.clone()),
            None => {}
        }
    }
    run
}

/// Episodes with more than `threshold` steps, aggregates recomputed.
pub fn slice_long_horizon(report: &MetricReport, threshold: usize) -> MetricReport {
    let kept = report
        .episodes
        .iter()
        .filter(|e| e.steps > threshold)
        .cloned()
        .collect();
    MetricReport::new(kept, Vec::new())
}

/// [`slice_long_horizon`] at the default threshold.
pub fn slice_default(report: &MetricReport) -> MetricReport {
    slice_long_horizon(report, LONG_HORIZON_STEPS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSimStep {
    pub clock: usize,
    pub current: String,
    /// Eligible nodes ranked by score before removal.
    pub scores: Vec<PrunedNode>,
    pub removed: Vec<PrunedNode>,
    pub map_nodes: usize,
}

/// Replays the locations of a trace through a fresh map and reports the
/// pruning scores at every step.
pub fn prune_sim(trace: &TraceRecord, scene: &Scene, cfg: &PruneConfig) -> Result<Vec<PruneSimStep>, HarnessError> {
    let task_objects = trace.extraction.all_objects();
    let mut map = TopoMap::new();
    let mut out = Vec::new();
    for s in &trace.steps {
        let mut obs = observe(scene, &s.current)?;
        obs.visible_objects = enhance_observation(&obs.visible_objects, &task_objects);
        map.observe_and_update(&obs);
        let scores = if map.clock() < cfg.t_start {
            Vec::new()
        } else {
            map.ranked_candidates(cfg)
        };
        let removed = map.prune(cfg);
        out.push(PruneSimStep {
            clock: map.clock(),
            current: s.current.clone(),
            scores,
            removed,
            map_nodes: map.len(),
        });
    }
    Ok(out)
}

/// Extraction metrics over predictions paired with samples by position.
pub fn ios_eval(predictions: &[Extraction], samples: &[IoSample]) -> Result<ExtractionReport, HarnessError> {
    if predictions.len() != samples.len() {
        return Err(HarnessError::LengthMismatch {
            predictions: predictions.len(),
            samples: samples.len(),
        });
    }
    Ok(evaluate_extractions(predictions, samples))
}

pub fn traces_to_jsonl<'a>(traces: impl IntoIterator<Item = &'a TraceRecord>) -> String {
    let mut out = String::new();
    for t in traces {
        out.push_str(&serde_json::to_string(t).expect("trace serializes"));
        out.push('\n');
    }
    out
}

pub fn write_traces<'a>(
    path: impl AsRef<Path>,
    traces: impl IntoIterator<Item = &'a TraceRecord>,
) -> Result<(), HarnessError> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(io_error(path))?;
    file.write_all(traces_to_jsonl(traces).as_bytes())
        .map_err(io_error(path))
}

pub fn read_traces(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>, HarnessError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_error(path))?;
    let mut traces = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_error(path))?;
        if line.trim().is_empty() {
            continue;
        }
        traces.push(serde_json::from_str(&line).map_err(|source| HarnessError::Trace { line: i + 1, source })?);
    }
    Ok(traces)
}

/// Writes `traces.jsonl`, `report.json` and `report.csv` into `dir`.
pub fn write_run_outputs(dir: impl AsRef<Path>, run: &CorpusRun) -> Result<MetricReport, HarnessError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    write_traces(dir.join("traces.jsonl"), run.traces())?;
    let report = run.report();
    write_report(dir, "report", &report)?;
    Ok(report)
}

/// Writes `{stem}.json` and `{stem}.csv` into `dir`.
pub fn write_report(dir: impl AsRef<Path>, stem: &str, report: &MetricReport) -> Result<(), HarnessError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    let json = dir.join(format!("{stem}.json"));
    fs::write(&json, report.to_json()).map_err(io_error(&json))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let csv = report.to_csv().map_err(|e| HarnessError::Config(e.to_string()))?;
    fs::write(&csv_path, csv).map_err(io_error(&csv_path))
}
