//! Ensemble text-to-SQL engine.
//!
//! The crate is organised around the flow of a single benchmark item:
//!
//! * [`corpus`] loads Spider/BIRD-format benchmarks and persists run records,
//! * [`schema`] renders database schemas as prompt text and prunes them,
//! * [`linker`] extracts table/column references from candidate SQL,
//! * [`prompt`] assembles generation and refinement prompts,
//! * [`experts`] wraps chat-completion models and deterministic stand-ins,
//! * [`exec`] runs SQL read-only and compares results,
//! * [`refine`] drives execution-guided self-refinement,
//! * [`vote`] implements weighted-majority voting and its analytics,
//! * [`agent`] is the plan/critique/act/refine/validate loop,
//! * [`pipeline`] wires the above into staged experiments.

pub mod agent;
pub mod corpus;
pub mod exec;
pub mod experts;
pub mod linker;
pub mod pipeline;
pub mod prompt;
pub mod refine;
pub mod schema;
pub mod vote;

pub use exec::{Database, ErrorKind, ExecResult, Value};
pub use experts::{Expert, ExpertId, SqlCandidate};
pub use schema::{DatabaseSchema, LinkedSchema};
pub use vote::{VoteState, VoteStrategy};
