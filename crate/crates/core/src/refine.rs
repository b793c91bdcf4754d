//! Execution-guided self-refinement of a single candidate.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::exec::{Database, ErrorKind, ExecResult};
use crate::experts::{prompt_hash, CandidateStatus, Expert, RawResponse, SqlCandidate};
use crate::prompt::{build_prompt, GenerationParams, PromptSpec, RefineSection};

pub const DEFAULT_MAX_ITERATIONS: usize = 3;

const NO_SQL_MESSAGE: &str = "No SQL statement was found in the response.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Succeeded,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub prompt_hash: String,
    pub sql: String,
    pub exec: ExecResult,
}

/// Attempt 1 is the candidate's original execution; each later attempt is
/// one refinement call to the same expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub item_id: String,
    pub expert: String,
    pub attempts: Vec<Attempt>,
    pub terminal: Terminal,
    pub attempts_used: usize,
}

/// What the refinement prompt is built from.
#[derive(Debug, Clone)]
pub struct RefineContext {
    pub item_id: String,
    pub db_id: String,
    pub dialect: String,
    /// The generation prompt that produced the candidate.
    pub prior_prompt: String,
    pub params: GenerationParams,
    pub timeout: Duration,
}

fn needs_refinement(c: &SqlCandidate) -> bool {
    !matches!(c.status, CandidateStatus::Ok)
}

/// The (sql, exec) pair describing a candidate's current state.
fn current_attempt(c: &SqlCandidate) -> (String, ExecResult) {
    match (&c.sql, &c.exec) {
        (Some(sql), Some(exec)) => (sql.clone(), exec.clone()),
        (Some(sql), None) => (
            sql.clone(),
            ExecResult::error(ErrorKind::Other, "not executed"),
        ),
        (None, _) if c.status == CandidateStatus::GenFailed => (
            String::new(),
            ExecResult::error(
                ErrorKind::Other,
                c.failure
                    .clone()
                    .unwrap_or_else(|| "generation failed".into()),
            ),
        ),
        (None, _) => (
            c.raw_text.clone().unwrap_or_default(),
            ExecResult::error(ErrorKind::Syntax, NO_SQL_MESSAGE),
        ),
    }
}

fn failure_message(exec: &ExecResult) -> String {
    exec.error_message
        .clone()
        .unwrap_or_else(|| exec.observation(0))
}

/// Refine `candidate` until it returns rows or `max_iterations` attempts
/// have been used. The candidate is always returned, refined or not.
pub fn refine(
    candidate: &SqlCandidate,
    context: &RefineContext,
    expert: &dyn Expert,
    db: &Database,
    max_iterations: usize,
) -> (SqlCandidate, RefinementTrace) {
    let max_iterations = max_iterations.max(1);
    let mut current = candidate.clone();
    let (sql, exec) = current_attempt(&current);
    let mut trace = RefinementTrace {
        item_id: context.item_id.clone(),
        expert: candidate.expert.clone(),
        attempts: vec![Attempt {
            prompt_hash: candidate.prompt_hash.clone(),
            sql,
            exec,
        }],
        terminal: Terminal::Exhausted,
        attempts_used: 1,
    };
    // Generation failures carry no text to repair; retrying is the transport layer's job.
    let repairable = current.status != CandidateStatus::GenFailed;
    while needs_refinement(&current) && repairable && trace.attempts.len() < max_iterations {
        let last = trace.attempts.last().expect("at least one attempt");
        let error_kind = last.exec.failure_kind().unwrap_or(ErrorKind::Other);
        let section = RefineSection {
            dialect: context.dialect.clone(),
            db_id: context.db_id.clone(),
            prior_context: context.prior_prompt.clone(),
            original_sql: if last.sql.trim().is_empty() {
                "(empty response)".into()
            } else {
                last.sql.clone()
            },
            error_message: failure_message(&last.exec),
            error_kind,
            critique_feedback: None,
            linked_schema: None,
            expected_format: None,
            action_format: None,
        };
        let prompt =
            build_prompt(&PromptSpec::refinement(section)).expect("refine sections are populated");
        let hash = prompt_hash(&prompt, &context.params);
        let response: Result<RawResponse, _> = expert.generate(&prompt, &context.params);
        let mut next = SqlCandidate::from_generation(
            candidate.expert_index,
            &candidate.expert,
            candidate.phase,
            hash.clone(),
            response,
        );
        next.execute(db, context.timeout);
        let (sql, exec) = current_attempt(&next);
        trace.attempts.push(Attempt {
            prompt_hash: hash,
            sql,
            exec,
        });
        current = next;
        if current.status == CandidateStatus::GenFailed {
            break;
        }
    }
    trace.attempts_used = trace.attempts.len();
    if current.status == CandidateStatus::Ok {
        trace.terminal = Terminal::Succeeded;
    }
    (current, trace)
}
