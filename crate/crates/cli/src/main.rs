use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use navmem::harness::{self, Corpus, ExtractorKind, PlannerKind, RunConfig};
use navmem::metrics::{MetricReport, LONG_HORIZON_STEPS};
use navmem::planner::TaskVariant;
use navmem::spatial::{load_io_samples, Extraction};
use navmem::world::{episodes_to_json, load_scene, synth};

#[derive(Parser)]
#[command(name = "navmem", version, about = "Topological-memory navigation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single episode and print its trace.
    Run {
        #[command(flatten)]
        run: RunArgs,
        /// Episode id; defaults to the first episode in the file.
        #[arg(long)]
        episode: Option<String>,
    },
    /// Run a corpus and write traces plus a metric report.
    Eval {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Re-run cumulatively failed episodes for several rounds.
    Refine {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 5)]
        rounds: usize,
    },
    /// Keep only episodes with more than `--min-steps` steps.
    Slice {
        /// Report JSON produced by `eval` or `refine`.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = LONG_HORIZON_STEPS)]
        min_steps: usize,
        /// Directory for slice.json and slice.csv; prints JSON when absent.
        #[arg(long, short)]
        output_dir: Option<PathBuf>,
    },
    /// Replay a trace through a fresh map and print per-step pruning scores.
    PruneSim {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        trace: PathBuf,
        /// Episode id inside the trace file; defaults to the first trace.
        #[arg(long)]
        episode: Option<String>,
    },
    /// F1 and NDCG of predicted object lists against I-O-S samples.
    IosEval {
        /// JSON array of `{direct, inferred, layout}` predictions.
        #[arg(long)]
        predictions: PathBuf,
        /// JSON array of I-O-S samples.
        #[arg(long)]
        samples: PathBuf,
    },
    /// Write a synthetic grid corpus (scenes plus episodes).
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        scenes: usize,
        #[arg(long, default_value_t = 6)]
        rows: usize,
        #[arg(long, default_value_t = 6)]
        cols: usize,
        #[arg(long, default_value_t = 10)]
        episodes_per_scene: usize,
        #[arg(long, default_value_t = 2)]
        min_hops: usize,
        #[arg(long, default_value_t = 8)]
        max_hops: usize,
        #[arg(long, short)]
        output_dir: PathBuf,
    },
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

/// Overrides for [`RunConfig`]; flags win over the config file.
#[derive(Args, Default)]
struct RunArgs {
    /// Key-value (TOML) config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene file; repeat for several scenes.
    #[arg(long = "scene")]
    scenes: Vec<PathBuf>,
    #[arg(long)]
    episodes: Option<PathBuf>,
    /// oracle, frontier, random, replay or external.
    #[arg(long, value_parser = parse_enum::<PlannerKind>)]
    planner: Option<PlannerKind>,
    #[arg(long)]
    replay_trace: Option<PathBuf>,
    /// rule-based, external or none.
    #[arg(long, value_parser = parse_enum::<ExtractorKind>)]
    extractor: Option<ExtractorKind>,
    /// r2r or reverie.
    #[arg(long, value_parser = parse_enum::<TaskVariant>)]
    variant: Option<TaskVariant>,
    #[arg(long)]
    no_pruning: bool,
    #[arg(long)]
    t_start: Option<usize>,
    #[arg(long)]
    theta_recent_visit: Option<usize>,
    #[arg(long)]
    theta_age: Option<usize>,
    #[arg(long)]
    n_remove: Option<usize>,
    #[arg(long)]
    lambda_t: Option<f64>,
    #[arg(long)]
    lambda_d: Option<f64>,
    #[arg(long)]
    lambda_f: Option<f64>,
    #[arg(long)]
    lambda_dist: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, short)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    reseed_rounds: bool,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if !self.scenes.is_empty() {
            cfg.scenes = self.scenes.clone();
        }
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v.into(); })*
            };
        }
        set! {
            episodes => cfg.episodes,
            planner => cfg.planner,
            replay_trace => cfg.replay_trace,
            extractor => cfg.extractor,
            variant => cfg.variant,
            t_start => cfg.prune.t_start,
            theta_recent_visit => cfg.prune.theta_recent_visit,
            theta_age => cfg.prune.theta_age,
            n_remove => cfg.prune.n_remove,
            lambda_t => cfg.prune.lambda_t,
            lambda_d => cfg.prune.lambda_d,
            lambda_f => cfg.prune.lambda_f,
            lambda_dist => cfg.prune.lambda_dist,
            seed => cfg.seed,
            parallelism => cfg.parallelism,
            max_retries => cfg.max_retries,
            max_steps => cfg.max_steps,
            alpha => cfg.alpha,
            output_dir => cfg.output_dir,
            model => cfg.chat.model,
            base_url => cfg.chat.base_url,
            temperature => cfg.chat.temperature,
        }
        if self.no_pruning {
            cfg.pruning = false;
        }
        if self.reseed_rounds {
            cfg.reseed_rounds = true;
        }
        Ok(cfg)
    }
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let episodes = cfg.episodes.as_ref().context("no episode file given (--episodes)")?;
    if cfg.scenes.is_empty() {
        bail!("no scene file given (--scene)");
    }
    Ok(Corpus::load(&cfg.scenes, episodes)?)
}

fn print_summary(report: &MetricReport) {
    let a = &report.aggregate;
    println!(
        "episodes {}  NE {:.3}  SR {:.3}  OSR {:.3}  SPL {:.3}  ME {:.3}  long-horizon {}  errors {}",
        a.count,
        a.navigation_error,
        a.success_rate,
        a.oracle_success_rate,
        a.spl,
        a.map_efficiency,
        report.long_horizon_count,
        report.errors.len()
    );
}

fn write_or_print(dir: Option<&Path>, stem: &str, report: &MetricReport) -> Result<()> {
    match dir {
        Some(dir) => {
            harness::write_report(dir, stem, report)?;
            print_summary(report);
        }
        None => println!("{}", report.to_json()),
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run { run, episode } => {
            let cfg = run.config()?;
            let corpus = load_corpus(&cfg)?;
            let ep = match &episode {
                Some(id) => corpus
                    .episodes
                    .iter()
                    .find(|e| &e.id == id)
                    .with_context(|| format!("no episode {id}"))?,
                None => corpus.episodes.first().context("episode file is empty")?,
            };
            let chat = cfg.chat_client();
            let planner = cfg.planner(chat.as_ref())?;
            let extractor = cfg.extractor(chat.as_ref())?;
            let trace = harness::run_episode(corpus.scene_for(ep)?, ep, planner.as_ref(), &extractor, &cfg.settings())?;
            match &cfg.output_dir {
                Some(dir) => {
                    fs::create_dir_all(dir)?;
                    harness::write_traces(dir.join("trace.jsonl"), [&trace])?;
                    println!(
                        "{}: {:?} after {} steps at {}",
                        trace.episode_id, trace.result.termination, trace.result.steps, trace.result.stopped_at
                    );
                }
                None => print!("{}", harness::traces_to_jsonl([&trace])),
            }
        }
        Command::Eval { run } => {
            let cfg = run.config()?;
            let corpus = load_corpus(&cfg)?;
            let chat = cfg.chat_client();
            let planner = cfg.planner(chat.as_ref())?;
            let extractor = cfg.extractor(chat.as_ref())?;
            let result = harness::run_corpus(&corpus, planner.as_ref(), &extractor, &cfg)?;
            match &cfg.output_dir {
                Some(dir) => print_summary(&harness::write_run_outputs(dir, &result)?),
                None => println!("{}", result.report().to_json()),
            }
        }
        Command::Refine { run, rounds } => {
            let cfg = run.config()?;
            let corpus = load_corpus(&cfg)?;
            let chat = cfg.chat_client();
            let extractor = cfg.extractor(chat.as_ref())?;
            let make = |round: usize| cfg.planner_for_round(round, chat.as_ref());
            let (reports, final_run) = harness::refine_rounds(&corpus, rounds, &make, &extractor, &cfg)?;
            for r in &reports {
                print!("round {} (re-ran {}): ", r.round, r.rerun.len());
                print_summary(&r.report);
            }
            if let Some(dir) = &cfg.output_dir {
                harness::write_run_outputs(dir, &final_run)?;
                fs::write(dir.join("rounds.json"), serde_json::to_string_pretty(&reports)?)?;
            }
        }
        Command::Slice {
            report,
            min_steps,
            output_dir,
        } => {
            let full: MetricReport = serde_json::from_str(&fs::read_to_string(&report)?)
                .with_context(|| format!("reading {}", report.display()))?;
            let slice = harness::slice_long_horizon(&full, min_steps);
            write_or_print(output_dir.as_deref(), "slice", &slice)?;
        }
        Command::PruneSim { run, trace, episode } => {
            let cfg = run.config()?;
            let traces = harness::read_traces(&trace)?;
            let t = match &episode {
                Some(id) => traces
                    .iter()
                    .find(|t| &t.episode_id == id)
                    .with_context(|| format!("no trace for {id}"))?,
                None => traces.first().context("trace file is empty")?,
            };
            let scene = cfg
                .scenes
                .iter()
                .map(load_scene)
                .find(|s| s.as_ref().map_or(true, |s| s.id() == t.scene_id))
                .with_context(|| format!("scene {} not given (--scene)", t.scene_id))??;
            for s in harness::prune_sim(t, &scene, &cfg.prune)? {
                let scores: Vec<String> = s.scores.iter().map(|p| format!("{}={:.3}", p.id, p.score)).collect();
                let removed: Vec<&str> = s.removed.iter().map(|p| p.id.as_str()).collect();
                println!(
                    "t={} at {} nodes={} scores [{}] removed [{}]",
                    s.clock,
                    s.current,
                    s.map_nodes,
                    scores.join(", "),
                    removed.join(", ")
                );
            }
        }
        Command::IosEval { predictions, samples } => {
            let preds: Vec<Extraction> = serde_json::from_str(&fs::read_to_string(&predictions)?)
                .with_context(|| format!("reading {}", predictions.display()))?;
            let truth = load_io_samples(&samples)?;
            let report = harness::ios_eval(&preds, &truth)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Synth {
            seed,
            scenes,
            rows,
            cols,
            episodes_per_scene,
            min_hops,
            max_hops,
            output_dir,
        } => {
            let (scene_list, episodes) =
                synth::grid_corpus(seed, scenes, rows, cols, episodes_per_scene, min_hops, max_hops);
            fs::create_dir_all(&output_dir)?;
            for s in &scene_list {
                fs::write(output_dir.join(format!("{}.json", s.id())), s.to_json())?;
            }
            fs::write(output_dir.join("episodes.json"), episodes_to_json(&episodes))?;
            println!(
                "wrote {} scenes and {} episodes to {}",
                scene_list.len(),
                episodes.len(),
                output_dir.display()
            );
        }
    }
    Ok(())
}
