//! Navigation harness with topological map memory.
//!
//! - [`world`]: scene graphs, episodes and the step simulator
//! - [`memgraph`]: the agent's map memory and its pruning
//! - [`viewgeom`]: discrete view selection and candidate caching
//! - [`spatial`]: object extraction, observation highlighting, box projection
//! - [`planner`]: prompt assembly and planners
//! - [`metrics`]: navigation and extraction metrics
//! - [`harness`]: episode loop, corpus evaluation, traces and reports

pub mod harness;
pub mod llm;
pub mod memgraph;
pub mod metrics;
pub mod planner;
pub mod spatial;
pub mod viewgeom;
pub mod world;
