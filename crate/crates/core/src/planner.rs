//! Decision making: prompt assembly, response parsing and planners.
//!
//! Every step the harness builds a [`PromptBundle`] from the instruction, the
//! rendered map memory, the predicted destination layout and the lettered
//! action options, then asks a [`Planner`] for a [`Decision`]. Reference
//! planners read the structured inputs directly; [`ExternalPlanner`] sends
//! the rendered prompt to a chat model and parses its `Action:` line.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{ChatClient, ChatError, ChatMessage};
use crate::memgraph::{place, MemoryContext, TopoMap};
use crate::spatial::{enhance_observation, normalize_name, Extraction};
use crate::viewgeom::{CandidateView, ViewGrid};
use crate::world::{hop_distances, Episode, Scene};

pub use crate::world::Action;

pub const DEFAULT_MAX_RETRIES: u32 = 2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskVariant {
    /// Step-by-step route instructions.
    #[default]
    R2r,
    /// Remote object-goal instructions.
    Reverie,
}

const SYSTEM_HEADER: &str = "\
You are an embodied agent navigating an indoor environment. The environment is a graph of places; \
at every step you may move to one of the neighboring places listed under 'Action Options' or stop.";

const R2R_INSTRUCTION_SECTION: &str = "\
'Instruction' is a step-by-step route description. Follow its landmarks and turns in order and stop \
once the described destination is reached.";

const REVERIE_INSTRUCTION_SECTION: &str = "\
'Instruction' names a target object somewhere in the building and serves as global guidance. Find the \
place where that object is and stop there; ignore any action the instruction asks you to perform on the \
object. Colors given for landmarks or the target may be wrong, so do not rely on them.";

const SYSTEM_FOOTER: &str = "\
'Trajectory' lists the places you have visited, in order. 'Map' lists how the places you remember are \
connected; old places may be forgotten to keep the map short. 'Supplementary Info' lists task-relevant \
objects seen at visited places. 'Possible Destination Info', when present, is a predicted description of \
the objects around the destination; treat it as a hint that can be wrong. 'History' lists your previous \
actions and 'Previous Planning' your latest plan. Stop only when you believe you are at the destination.";

pub const RESPONSE_FORMAT: &str = "\
Reply in exactly this format:
Thought: <your reasoning and updated plan>
Action: <the letter of one action option>";

impl TaskVariant {
    pub fn system_prompt(self) -> String {
        let instruction = match self {
            TaskVariant::R2r => R2R_INSTRUCTION_SECTION,
            TaskVariant::Reverie => REVERIE_INSTRUCTION_SECTION,
        };
        format!("{SYSTEM_HEADER}\n\n{instruction}\n\n{SYSTEM_FOOTER}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionOption {
    pub letter: char,
    pub action: Action,
    pub text: String,
    /// Task objects visible toward this option.
    pub enhanced_objects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub instruction: String,
    pub memory: MemoryContext,
    pub layout: Option<String>,
    pub history: Vec<String>,
    pub previous_plan: Option<String>,
    pub options: Vec<ActionOption>,
}

fn option_letter(i: usize) -> char {
    assert!(i < 26, "at most 26 action options");
    (b'A' + i as u8) as char
}

fn whole_degrees(rad: f64) -> i64 {
    rad.to_degrees().round() as i64
}

/// Assembles the prompt for one step.
pub fn build_prompt(
    variant: TaskVariant,
    episode: &Episode,
    map: &TopoMap,
    extraction: &Extraction,
    candidates: &[CandidateView],
    history: &[Action],
    previous_plan: Option<&str>,
) -> PromptBundle {
    let name = |id: &str| map.label(id).map(place).unwrap_or_else(|| id.to_string());
    let task_objects = extraction.all_objects();
    let grid = ViewGrid;

    let mut options: Vec<ActionOption> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let enhanced = enhance_observation(&c.objects, &task_objects);
            let view = grid.direction(c.optimized_view);
            let objects = if enhanced.is_empty() {
                "none".to_string()
            } else {
                enhanced.join(", ")
            };
            ActionOption {
                letter: option_letter(i),
                action: Action::MoveTo(c.target.clone()),
                text: format!(
                    "go to {} (view {}, heading {} degrees, elevation {} degrees, {:.1} m), highlighted objects: {}",
                    name(&c.target),
                    c.optimized_view,
                    whole_degrees(view.heading),
                    whole_degrees(view.elevation),
                    c.distance,
                    objects
                ),
                enhanced_objects: enhanced,
            }
        })
        .collect();
    options.push(ActionOption {
        letter: option_letter(candidates.len()),
        action: Action::Stop,
        text: "stop".into(),
        enhanced_objects: Vec::new(),
    });

    let history = history
        .iter()
        .enumerate()
        .map(|(i, a)| match a {
            Action::Stop => format!("step {}: stop", i + 1),
            Action::MoveTo(id) => format!("step {}: go to {}", i + 1, name(id)),
        })
        .collect();

    PromptBundle {
        system: variant.system_prompt(),
        instruction: episode.instruction.clone(),
        memory: map.render_map_context(),
        layout: extraction.layout.clone(),
        history,
        previous_plan: previous_plan.map(str::to_string),
        options,
    }
}

impl PromptBundle {
    /// The per-step (user) part of the prompt.
    pub fn user_prompt(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Instruction: {}", self.instruction);
        let _ = writeln!(out, "{}", self.memory);
        if let Some(layout) = &self.layout {
            let _ = writeln!(out, "Possible Destination Info: {layout}");
        }
        if self.history.is_empty() {
            let _ = writeln!(out, "History: none");
        } else {
            let _ = writeln!(out, "History: {}", self.history.join("; "));
        }
        let _ = writeln!(
            out,
            "Previous Planning: {}",
            self.previous_plan.as_deref().unwrap_or("none")
        );
        let _ = writeln!(out, "Action Options:");
        for o in &self.options {
            let _ = writeln!(out, "{}. {}", o.letter, o.text);
        }
        out.push_str(RESPONSE_FORMAT);
        out
    }

    /// System and per-step prompt joined by a blank line.
    pub fn render(&self) -> String {
        format!("{}\n\n{}", self.system, self.user_prompt())
    }

    pub fn messages(&self) -> [ChatMessage; 2] {
        [
            ChatMessage::system(self.system.clone()),
            ChatMessage::user(self.user_prompt()),
        ]
    }

    pub fn byte_len(&self) -> usize {
        self.system.len() + 2 + self.user_prompt().len()
    }

    pub fn option(&self, letter: char) -> Option<&ActionOption> {
        self.options.iter().find(|o| o.letter == letter.to_ascii_uppercase())
    }

    pub fn allows(&self, action: &Action) -> bool {
        self.options.iter().any(|o| &o.action == action)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub action: Action,
    pub thought: String,
    pub raw: String,
}

impl Decision {
    pub fn new(action: Action) -> Self {
        Self {
            action,
            thought: String::new(),
            raw: String::new(),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PlannerError {
    #[error(transparent)]
    Transport(#[from] ChatError),
    #[error("unparseable planner output ({reason})")]
    Parse { reason: String, raw: String },
}

/// Reads the final `Action:` line of a reply and maps it onto the options.
/// Returns the action and the accompanying `Thought:` text.
pub fn parse_response(raw: &str, options: &[ActionOption]) -> Result<(Action, String), PlannerError> {
    let fail = |reason: String| PlannerError::Parse {
        reason,
        raw: raw.to_string(),
    };
    let lines: Vec<String> = raw.lines().map(|l| l.trim().replace("**", "")).collect();
    let field = |line: &str, key: &str| -> Option<String> {
        let (k, v) = line.split_once(':')?;
        k.trim().eq_ignore_ascii_case(key).then(|| v.trim().to_string())
    };
    let (action_idx, value) = lines
        .iter()
        .enumerate()
        .rev()
        .find_map(|(i, l)| field(l, "action").map(|v| (i, v)))
        .ok_or_else(|| fail("no Action line".into()))?;

    let action = if value.to_lowercase().starts_with("stop") {
        Action::Stop
    } else {
        let mut chars = value.trim_start_matches(['(', '[']).chars();
        let letter = chars.next().filter(char::is_ascii_alphabetic);
        let terminated = chars.next().is_none_or(|c| !c.is_alphanumeric());
        match letter.filter(|_| terminated) {
            Some(l) => options
                .iter()
                .find(|o| o.letter == l.to_ascii_uppercase())
                .map(|o| o.action.clone())
                .ok_or_else(|| fail(format!("unknown option {l}")))?,
            None => return Err(fail(format!("unrecognized action {value:?}"))),
        }
    };

    let thought = lines[..action_idx]
        .iter()
        .rposition(|l| field(l, "thought").is_some())
        .map(|start| {
            let mut parts = vec![field(&lines[start], "thought").unwrap_or_default()];
            parts.extend(lines[start + 1..action_idx].iter().filter(|l| !l.is_empty()).cloned());
            parts.join(" ").trim().to_string()
        })
        .unwrap_or_default();
    Ok((action, thought))
}

/// Everything a planner may look at for one decision.
#[derive(Debug, Clone, Copy)]
pub struct PlannerInput<'a> {
    pub scene: &'a Scene,
    pub episode: &'a Episode,
    pub map: &'a TopoMap,
    pub extraction: &'a Extraction,
    pub bundle: &'a PromptBundle,
    pub current: &'a str,
    /// Zero-based step index within the episode.
    pub step: usize,
    /// Retry counter for the current step.
    pub attempt: u32,
}

pub trait Planner: Send + Sync {
    fn name(&self) -> &str;
    fn plan(&self, input: &PlannerInput<'_>) -> Result<Decision, PlannerError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecideOutcome {
    pub decision: Decision,
    pub attempts: u32,
    /// Set when retries were exhausted and the decision is a forced stop.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("planner chose {action:?}, which is not an available option")]
pub struct IllegalChoice {
    pub action: Action,
    pub raw: String,
}

/// Runs `planner` with up to `max_retries` retries on transport or parse
/// errors, falling back to a forced stop. A well-formed decision outside the
/// bundle's options is reported as [`IllegalChoice`].
pub fn decide(
    planner: &dyn Planner,
    input: &PlannerInput<'_>,
    max_retries: u32,
) -> Result<DecideOutcome, IllegalChoice> {
    let mut last_error = String::new();
    let mut last_raw = String::new();
    for attempt in 0..=max_retries {
        let mut attempt_input = *input;
        attempt_input.attempt = attempt;
        match planner.plan(&attempt_input) {
            Ok(decision) if input.bundle.allows(&decision.action) => {
                return Ok(DecideOutcome {
                    decision,
                    attempts: attempt + 1,
                    failure: None,
                })
            }
            Ok(decision) => {
                return Err(IllegalChoice {
                    action: decision.action,
                    raw: decision.raw,
                })
            }
            Err(e) => {
                log::debug!("{} attempt {} failed: {e}", planner.name(), attempt + 1);
                if let PlannerError::Parse { raw, .. } = &e {
                    last_raw = raw.clone();
                }
                last_error = e.to_string();
            }
        }
    }
    Ok(DecideOutcome {
        decision: Decision {
            action: Action::Stop,
            thought: String::new(),
            raw: last_raw,
        },
        attempts: max_retries + 1,
        failure: Some(last_error),
    })
}

/// Follows a shortest hop path on the full scene graph; ties go to the
/// smallest viewpoint id.
#[derive(Debug, Default, Clone)]
pub struct OraclePlanner;

impl Planner for OraclePlanner {
    fn name(&self) -> &str {
        "oracle"
    }

    fn plan(&self, input: &PlannerInput<'_>) -> Result<Decision, PlannerError> {
        if input.current == input.episode.goal {
            return Ok(Decision::new(Action::Stop));
        }
        let to_goal = hop_distances(input.scene, &input.episode.goal).unwrap_or_default();
        let next = to_goal.get(input.current).and_then(|&d| {
            input
                .scene
                .viewpoint(input.current)
                .ok()?
                .neighbors
                .iter()
                .filter(|n| to_goal.get(*n).is_some_and(|&dn| dn + 1 == d))
                .min()
                .cloned()
        });
        Ok(Decision::new(next.map_or(Action::Stop, Action::MoveTo)))
    }
}

/// Explores toward the nearest unvisited map node and stops once every
/// directly mentioned object is highlighted at the current place.
#[derive(Debug, Default, Clone)]
pub struct FrontierGreedyPlanner;

impl FrontierGreedyPlanner {
    fn goal_reached(input: &PlannerInput<'_>) -> bool {
        if input.extraction.direct.is_empty() {
            return false;
        }
        let here: BTreeSet<String> = input
            .map
            .node(input.current)
            .map(|n| n.annotation.iter().map(|a| normalize_name(a)).collect())
            .unwrap_or_default();
        input
            .extraction
            .direct
            .iter()
            .all(|d| here.contains(&normalize_name(d)))
    }

    /// First hop toward the closest unvisited node (fewest hops, then
    /// smallest label).
    fn frontier_step(map: &TopoMap, current: &str) -> Option<String> {
        let mut parent: BTreeMap<&str, &str> = BTreeMap::new();
        let mut depth: BTreeMap<&str, usize> = BTreeMap::from([(current, 0)]);
        let mut queue = VecDeque::from([current]);
        let mut best: Option<(usize, usize, &str)> = None;
        while let Some(id) = queue.pop_front() {
            let d = depth[id];
            if best.is_some_and(|(bd, _, _)| d > bd) {
                break;
            }
            if id != current && !map.is_visited(id) {
                let label = map.label(id).unwrap_or(usize::MAX);
                if best.is_none_or(|(bd, bl, _)| (d, label) < (bd, bl)) {
                    best = Some((d, label, id));
                }
                continue;
            }
            for n in map.neighbors(id) {
                if !depth.contains_key(n) {
                    depth.insert(n, d + 1);
                    parent.insert(n, id);
                    queue.push_back(n);
                }
            }
        }
        let (_, _, mut node) = best?;
        while parent[node] != current {
            node = parent[node];
        }
        Some(node.to_string())
    }
}

impl Planner for FrontierGreedyPlanner {
    fn name(&self) -> &str {
        "frontier"
    }

    fn plan(&self, input: &PlannerInput<'_>) -> Result<Decision, PlannerError> {
        if Self::goal_reached(input) {
            return Ok(Decision::new(Action::Stop));
        }
        let moves: Vec<&String> = input
            .bundle
            .options
            .iter()
            .filter_map(|o| match &o.action {
                Action::MoveTo(id) => Some(id),
                Action::Stop => None,
            })
            .collect();
        let target = Self::frontier_step(input.map, input.current)
            .filter(|t| moves.contains(&t))
            .or_else(|| {
                // nothing left to explore: revisit the stalest neighbor
                moves
                    .iter()
                    .min_by_key(|id| (input.map.node(id).and_then(|n| n.last_visit), id.as_str()))
                    .map(|id| id.to_string())
            });
        Ok(Decision::new(target.map_or(Action::Stop, Action::MoveTo)))
    }
}

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Uniform choice over all options, Stop included. The choice depends only
/// on the seed, the episode id, the step and the attempt.
#[derive(Debug, Clone)]
pub struct RandomPlanner {
    pub seed: u64,
}

impl Planner for RandomPlanner {
    fn name(&self) -> &str {
        "random"
    }

    fn plan(&self, input: &PlannerInput<'_>) -> Result<Decision, PlannerError> {
        let mixed = self.seed
            ^ fnv1a(&input.episode.id).rotate_left(17)
            ^ (input.step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ (input.attempt as u64).rotate_left(48);
        let mut rng = ChaCha8Rng::seed_from_u64(mixed);
        let choice = input.bundle.options.choose(&mut rng).expect("Stop is always an option");
        Ok(Decision::new(choice.action.clone()))
    }
}

/// Replays recorded actions. Scripts are looked up by episode id, falling
/// back to a default script; past the end of a script it stops.
#[derive(Debug, Clone, Default)]
pub struct ReplayPlanner {
    scripts: BTreeMap<String, Vec<Action>>,
    fallback: Vec<Action>,
}

impl ReplayPlanner {
    pub fn new(scripts: BTreeMap<String, Vec<Action>>) -> Self {
        Self {
            scripts,
            fallback: Vec::new(),
        }
    }

    /// One script for every episode.
    pub fn single(actions: Vec<Action>) -> Self {
        Self {
            scripts: BTreeMap::new(),
            fallback: actions,
        }
    }
}

impl Planner for ReplayPlanner {
    fn name(&self) -> &str {
        "replay"
    }

    fn plan(&self, input: &PlannerInput<'_>) -> Result<Decision, PlannerError> {
        let script = self.scripts.get(&input.episode.id).unwrap_or(&self.fallback);
        Ok(Decision::new(script.get(input.step).cloned().unwrap_or(Action::Stop)))
    }
}

/// Sends the rendered prompt to a chat model.
#[derive(Clone)]
pub struct ExternalPlanner {
    client: Arc<dyn ChatClient>,
}

impl ExternalPlanner {
    pub fn new(client: Arc<dyn ChatClient>) -> Self {
        Self { client }
    }
}

impl Planner for ExternalPlanner {
    fn name(&self) -> &str {
        "external"
    }

    fn plan(&self, input: &PlannerInput<'_>) -> Result<Decision, PlannerError> {
        let raw = self.client.complete(&input.bundle.messages())?;
        let (action, thought) = parse_response(&raw, &input.bundle.options)?;
        Ok(Decision { action, thought, raw })
    }
}
