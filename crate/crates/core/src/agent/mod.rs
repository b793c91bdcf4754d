//! The plan / critique / act / refine / validate agent loop.
//!
//! One episode answers one task. Every expert call goes through a
//! [`Caller`], which enforces the global call cap; schema exploration has
//! its own step budget and is not counted against it.

pub mod explore;
pub mod parse;
pub mod prompts;
pub mod retrieve;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::BenchmarkItem;
use crate::exec::{Database, ErrorKind, ExecResult, DEFAULT_TIMEOUT};
use crate::experts::{prompt_hash, Expert};
use crate::prompt::{GenerationParams, HashedBowSimilarity};
use crate::schema::{render_compact, sample_cells, DatabaseSchema};

pub use explore::{explore_schema, ExplorationOutcome, DEFAULT_EXPLORATION_STEPS};
pub use parse::{
    parse_action, parse_plan, parse_plan_verdict, parse_sql_critique, parse_validation, ActionKind,
    AgentAction, Dialect, ParseError, Plan, PlanVerdict, SqlCritique, ValidationVerdict,
};
pub use prompts::TaskContext;
pub use retrieve::{retrieve, Corpus, RetrievalKind, RetrieveError, Snippet};

use prompts::RefinerInput;

pub const DEFAULT_CALL_CAP: usize = 40;
pub const PLAN_CRITIQUE_CAP: usize = 3;
pub const RESULT_FILE: &str = "result.csv";

/// Rows shown to the actor after an execution.
const OBSERVATION_ROWS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentError {
    #[error("step cap of {0} expert calls exceeded")]
    StepCapExceeded(usize),
    #[error("expert failure: {0}")]
    ExpertFailure(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("cannot write result: {0}")]
    Output(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentMode {
    /// Act loop only: no planner, critiques, refiner or validator.
    Bare,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentCaps {
    pub max_calls: usize,
    pub plan_critique_rounds: usize,
    pub exploration_steps: usize,
    pub refine_iterations: usize,
    pub knowledge_k: usize,
    pub syntax_k: usize,
}

impl Default for AgentCaps {
    fn default() -> Self {
        AgentCaps {
            max_calls: DEFAULT_CALL_CAP,
            plan_critique_rounds: PLAN_CRITIQUE_CAP,
            exploration_steps: DEFAULT_EXPLORATION_STEPS,
            refine_iterations: crate::refine::DEFAULT_MAX_ITERATIONS,
            knowledge_k: 3,
            syntax_k: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub mode: AgentMode,
    pub caps: AgentCaps,
    pub dialect: Dialect,
    pub params: GenerationParams,
    pub timeout: Duration,
    pub project_info: Option<String>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            mode: AgentMode::Full,
            caps: AgentCaps::default(),
            dialect: Dialect::Sqlite,
            params: GenerationParams::default(),
            timeout: DEFAULT_TIMEOUT,
            project_info: None,
        }
    }
}

/// Everything an episode reads from or writes to.
pub struct AgentTask<'a> {
    pub item: &'a BenchmarkItem,
    pub db: &'a Database,
    /// Documentation directory for schema exploration, if any.
    pub env: Option<&'a Path>,
    pub knowledge: &'a Corpus,
    pub syntax: &'a Corpus,
    /// `result.csv` is written here.
    pub output_dir: &'a Path,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentPhase {
    Planning,
    PlanCritique,
    Acting,
    SqlCritique,
    Refining,
    SchemaLinking,
    Validating,
    Done,
    Failed,
}

/// Recoverable incidents, in order of occurrence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AgentEvent {
    KnowledgeRetrieved { count: usize },
    SyntaxRetrieved { count: usize },
    PlanParse { message: String },
    PlanFallback,
    VerdictParse { role: String, message: String },
    CritiqueParse { message: String },
    CritiqueRevised,
    InvalidAction { role: String, message: String },
    RepeatedAction { role: String },
    PrematureTerminate,
    ExecFailed { kind: ErrorKind, message: String },
    ValidationRejected { suggest_fix: String },
    Advisory { columns_not_needed: Vec<String> },
    ExplorationSkipped { reason: String },
    SandboxViolation { path: String },
    RefinerGaveUp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub call: usize,
    pub role: String,
    pub prompt_hash: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState {
    pub phase: AgentPhase,
    /// Expert calls made, exploration excluded.
    pub step_count: usize,
    pub plan: Option<Plan>,
    pub plan_critique_rounds: usize,
    pub history: Vec<HistoryEntry>,
    pub actions: Vec<AgentAction>,
    pub last_exec: Option<ExecResult>,
    pub knowledge: Vec<String>,
    pub syntax: Vec<String>,
    pub linked_schema: Option<String>,
    pub exploration: Option<ExplorationOutcome>,
    pub exploration_steps: usize,
    pub refinements: usize,
    pub events: Vec<AgentEvent>,
}

impl EpisodeState {
    fn new() -> Self {
        EpisodeState {
            phase: AgentPhase::Planning,
            step_count: 0,
            plan: None,
            plan_critique_rounds: 0,
            history: Vec::new(),
            actions: Vec::new(),
            last_exec: None,
            knowledge: Vec::new(),
            syntax: Vec::new(),
            linked_schema: None,
            exploration: None,
            exploration_steps: 0,
            refinements: 0,
            events: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task_id: String,
    pub final_sql: Option<String>,
    pub final_exec: Option<ExecResult>,
    pub final_csv: Option<String>,
    pub failure: Option<AgentError>,
    pub state: EpisodeState,
}

impl EpisodeResult {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none() && self.final_csv.is_some()
    }
}

/// Expert access with the global call cap and a call log.
pub struct Caller<'a> {
    expert: &'a dyn Expert,
    params: &'a GenerationParams,
    cap: usize,
    pub calls: usize,
    pub history: Vec<HistoryEntry>,
}

impl<'a> Caller<'a> {
    pub fn new(expert: &'a dyn Expert, params: &'a GenerationParams, cap: usize) -> Self {
        Caller {
            expert,
            params,
            cap,
            calls: 0,
            history: Vec::new(),
        }
    }

    pub fn call(&mut self, role: &str, prompt: &str) -> Result<String, AgentError> {
        if self.calls >= self.cap {
            return Err(AgentError::StepCapExceeded(self.cap));
        }
        self.calls += 1;
        let text = self
            .expert
            .generate(prompt, self.params)
            .map_err(|e| AgentError::ExpertFailure(e.to_string()))?
            .text;
        self.history.push(HistoryEntry {
            call: self.calls,
            role: role.to_string(),
            prompt_hash: prompt_hash(prompt, self.params),
            response: text.clone(),
        });
        Ok(text)
    }
}

/// Ask for a plan; a malformed answer gets one re-ask with the parse error.
pub fn make_plan(
    caller: &mut Caller<'_>,
    cx: &TaskContext,
    knowledge: &[String],
    schema_hint: Option<&str>,
    previous: Option<&Plan>,
    feedback: Option<&str>,
) -> Result<Plan, AgentError> {
    let prompt = prompts::planner(cx, knowledge, schema_hint, previous, feedback, None);
    let first = match parse_plan(&caller.call(prompts::PLANNER, &prompt)?) {
        Ok(p) => return Ok(p),
        Err(e) => e,
    };
    let prompt = prompts::planner(
        cx,
        knowledge,
        schema_hint,
        previous,
        feedback,
        Some(&first.to_string()),
    );
    Ok(parse_plan(&caller.call(prompts::PLANNER, &prompt)?)?)
}

pub fn critique_plan(
    caller: &mut Caller<'_>,
    cx: &TaskContext,
    plan: &Plan,
) -> Result<PlanVerdict, AgentError> {
    Ok(parse_plan_verdict(&caller.call(
        prompts::PLAN_CRITIQUE,
        &prompts::plan_critique(cx, plan),
    )?)?)
}

pub fn critique_sql(
    caller: &mut Caller<'_>,
    cx: &TaskContext,
    plan: Option<&Plan>,
    sql: &str,
) -> Result<SqlCritique, AgentError> {
    Ok(parse_sql_critique(
        &caller.call(prompts::SQL_CRITIQUE, &prompts::sql_critique(cx, plan, sql))?,
        cx.dialect,
    )?)
}

/// Validator verdict; an unparseable answer is retried once.
pub fn validate_result(
    caller: &mut Caller<'_>,
    cx: &TaskContext,
    sql: &str,
    result: &ExecResult,
) -> Result<ValidationVerdict, AgentError> {
    let first = match parse_validation(&caller.call(
        prompts::VALIDATOR,
        &prompts::validator(cx, sql, result, None),
    )?) {
        Ok(v) => return Ok(v),
        Err(e) => e,
    };
    let note = format!("Your previous response could not be parsed: {first}");
    Ok(parse_validation(&caller.call(
        prompts::VALIDATOR,
        &prompts::validator(cx, sql, result, Some(&note)),
    )?)?)
}

enum Refined {
    Fixed(String, ExecResult),
    GaveUp,
}

struct Episode<'a> {
    cfg: &'a AgentConfig,
    task: &'a AgentTask<'a>,
    expert: &'a dyn Expert,
    caller: Caller<'a>,
    cx: TaskContext,
    state: EpisodeState,
    /// SQL of the most recent ExecSql action, for the repetition guard.
    last_action_sql: Option<String>,
    /// Last rows outcome in bare mode, returned on Terminate.
    last_rows: Option<(String, ExecResult)>,
    critique_feedback: Option<String>,
    exploration_used: bool,
    final_answer: Option<(String, ExecResult, String)>,
}

/// Run one episode to Terminate or failure. Never panics on expert output.
pub fn run_episode(
    task: &AgentTask<'_>,
    expert: &dyn Expert,
    config: &AgentConfig,
) -> EpisodeResult {
    let cx = TaskContext {
        question: task.item.question.clone(),
        evidence: task.item.evidence.clone(),
        db_id: task.item.db_id.clone(),
        dialect: config.dialect,
        project_info: config.project_info.clone(),
    };
    let mut ep = Episode {
        cfg: config,
        task,
        expert,
        caller: Caller::new(expert, &config.params, config.caps.max_calls),
        cx,
        state: EpisodeState::new(),
        last_action_sql: None,
        last_rows: None,
        critique_feedback: None,
        exploration_used: false,
        final_answer: None,
    };
    let outcome = ep.run();
    let mut state = ep.state;
    state.step_count = ep.caller.calls;
    state.history = ep.caller.history;
    let failure = outcome.err();
    state.phase = if failure.is_none() {
        AgentPhase::Done
    } else {
        AgentPhase::Failed
    };
    let (final_sql, final_exec, final_csv) = match ep.final_answer {
        Some((s, e, c)) if failure.is_none() => (Some(s), Some(e), Some(c)),
        _ => (None, None, None),
    };
    EpisodeResult {
        task_id: task.item.item_id.clone(),
        final_sql,
        final_exec,
        final_csv,
        failure,
        state,
    }
}

impl Episode<'_> {
    fn full(&self) -> bool {
        self.cfg.mode == AgentMode::Full
    }

    fn event(&mut self, e: AgentEvent) {
        self.state.events.push(e);
    }

    fn run(&mut self) -> Result<(), AgentError> {
        if self.task.env.is_none_or(|e| !e.is_dir()) {
            self.state.linked_schema = compact_from_db(self.task.db);
        }
        if self.full() {
            self.prepare()?;
        }
        self.act()
    }

    /// Knowledge retrieval, planning, plan critique and the syntax gate.
    fn prepare(&mut self) -> Result<(), AgentError> {
        let provider = HashedBowSimilarity::default();
        if let Ok(snips) = retrieve(
            self.task.knowledge,
            &self.cx.question,
            self.cfg.caps.knowledge_k,
            &provider,
        ) {
            self.state.knowledge = snips.into_iter().map(|s| s.text).collect();
            self.event(AgentEvent::KnowledgeRetrieved {
                count: self.state.knowledge.len(),
            });
        }

        self.state.phase = AgentPhase::Planning;
        let mut plan = self.plan(None, None)?;
        while self.state.plan_critique_rounds < self.cfg.caps.plan_critique_rounds {
            self.state.phase = AgentPhase::PlanCritique;
            self.state.plan_critique_rounds += 1;
            let verdict = match critique_plan(&mut self.caller, &self.cx, &plan) {
                Ok(v) => v,
                Err(AgentError::Parse(e)) => {
                    // An unreadable critique cannot ask for changes.
                    self.event(AgentEvent::VerdictParse {
                        role: prompts::PLAN_CRITIQUE.into(),
                        message: e.to_string(),
                    });
                    break;
                }
                Err(e) => return Err(e),
            };
            if !verdict.update_plan {
                break;
            }
            self.state.phase = AgentPhase::Planning;
            plan = self.plan(Some(&plan), Some(&verdict.feedback))?;
        }
        self.state.plan = Some(plan.clone());

        if !self.task.syntax.is_empty() {
            let gate = self
                .caller
                .call(prompts::SYNTAX_GATE, &prompts::syntax_gate(&self.cx, &plan))?;
            if parse::gate_affirmative(&gate) {
                let query = format!("{}\n{}", self.cx.question, gate);
                if let Ok(snips) =
                    retrieve(self.task.syntax, &query, self.cfg.caps.syntax_k, &provider)
                {
                    self.state.syntax = snips.into_iter().map(|s| s.text).collect();
                    self.event(AgentEvent::SyntaxRetrieved {
                        count: self.state.syntax.len(),
                    });
                }
            }
        }
        Ok(())
    }

    fn plan(
        &mut self,
        previous: Option<&Plan>,
        feedback: Option<&str>,
    ) -> Result<Plan, AgentError> {
        let hint = self.state.linked_schema.clone();
        match make_plan(
            &mut self.caller,
            &self.cx,
            &self.state.knowledge,
            hint.as_deref(),
            previous,
            feedback,
        ) {
            Ok(p) => Ok(p),
            Err(AgentError::Parse(e)) => {
                self.event(AgentEvent::PlanParse {
                    message: e.to_string(),
                });
                self.event(AgentEvent::PlanFallback);
                Ok(previous.cloned().unwrap_or_else(|| Plan {
                    steps: vec![self.cx.question.clone()],
                    expected_csv_format: String::new(),
                }))
            }
            Err(e) => Err(e),
        }
    }

    fn execute(&self, sql: &str) -> ExecResult {
        match self.cfg.dialect {
            Dialect::Sqlite => self.task.db.execute(sql, self.cfg.timeout),
            other => ExecResult::error(
                ErrorKind::Other,
                format!(
                    "{} statements cannot be executed by the local engine",
                    other.label()
                ),
            ),
        }
    }

    fn act(&mut self) -> Result<(), AgentError> {
        let mut observation = String::new();
        let mut feedback: Option<String> = None;
        let mut step = 0usize;
        loop {
            self.state.phase = AgentPhase::Acting;
            let prompt = prompts::actor(
                &self.cx,
                self.state.plan.as_ref(),
                step,
                &observation,
                feedback.as_deref(),
                &self.state.syntax,
                self.state.linked_schema.as_deref(),
                RESULT_FILE,
            );
            let raw = self.caller.call(prompts::ACTOR, &prompt)?;
            let action = match parse_action(&raw, self.cfg.dialect) {
                Ok(a) => a,
                Err(e) => {
                    self.event(AgentEvent::InvalidAction {
                        role: prompts::ACTOR.into(),
                        message: e.to_string(),
                    });
                    if self.full() {
                        let sql = self.last_action_sql.clone().unwrap_or_default();
                        let err =
                            ExecResult::error(ErrorKind::Syntax, format!("Invalid action: {e}"));
                        if let Some(done) =
                            self.recover(&sql, err, &mut observation, &mut feedback)?
                        {
                            return Ok(done);
                        }
                    } else {
                        observation = format!("Invalid action: {e}");
                    }
                    continue;
                }
            };
            self.state.actions.push(action.clone());
            match action.kind {
                ActionKind::Terminate { .. } => {
                    if let Some((sql, exec)) = self.last_rows.clone() {
                        return self.finish(sql, exec);
                    }
                    self.event(AgentEvent::PrematureTerminate);
                    observation =
                        "Terminate rejected: no query has produced a validated result yet.".into();
                }
                ActionKind::ExecSql { sql, .. } => {
                    if self.last_action_sql.as_deref() == Some(sql.as_str()) {
                        self.event(AgentEvent::RepeatedAction {
                            role: prompts::ACTOR.into(),
                        });
                        let err = ExecResult::error(
                            ErrorKind::Other,
                            "Repeated action rejected: the SQL is identical to the previous action.",
                        );
                        if self.full() {
                            if let Some(done) =
                                self.recover(&sql, err, &mut observation, &mut feedback)?
                            {
                                return Ok(done);
                            }
                        } else {
                            observation = err.error_message.unwrap_or_default();
                        }
                        continue;
                    }
                    self.last_action_sql = Some(sql.clone());
                    let sql = if self.full() {
                        self.critique(&sql)?
                    } else {
                        sql
                    };
                    let exec = self.execute(&sql);
                    self.state.last_exec = Some(exec.clone());
                    step += 1;
                    if !self.full() {
                        if exec.is_rows() {
                            self.last_rows = Some((sql.clone(), exec.clone()));
                        }
                        observation = exec.observation(OBSERVATION_ROWS);
                        continue;
                    }
                    if exec.is_success() {
                        if self.validate(&sql, &exec, &mut feedback)? {
                            return Ok(());
                        }
                        observation = exec.observation(OBSERVATION_ROWS);
                    } else if let Some(done) =
                        self.recover(&sql, exec, &mut observation, &mut feedback)?
                    {
                        return Ok(done);
                    }
                }
            }
        }
    }

    /// Refine after a failure; `Some(())` when the episode is finished.
    fn recover(
        &mut self,
        sql: &str,
        exec: ExecResult,
        observation: &mut String,
        feedback: &mut Option<String>,
    ) -> Result<Option<()>, AgentError> {
        if let Some(kind) = exec.failure_kind() {
            self.event(AgentEvent::ExecFailed {
                kind,
                message: failure_text(&exec),
            });
        }
        match self.refine_loop(sql, exec.clone())? {
            Refined::Fixed(sql, exec) => {
                if self.validate(&sql, &exec, feedback)? {
                    return Ok(Some(()));
                }
                *observation = exec.observation(OBSERVATION_ROWS);
            }
            Refined::GaveUp => {
                *observation = format!(
                    "{}\nRefinement did not produce a working query.",
                    failure_text(&exec)
                );
            }
        }
        Ok(None)
    }

    fn critique(&mut self, sql: &str) -> Result<String, AgentError> {
        self.state.phase = AgentPhase::SqlCritique;
        match critique_sql(&mut self.caller, &self.cx, self.state.plan.as_ref(), sql) {
            Ok(c) => {
                self.critique_feedback = Some(c.reasoning).filter(|r| !r.is_empty());
                match c.revised_sql {
                    Some(r) if r.trim() != sql.trim() => {
                        self.event(AgentEvent::CritiqueRevised);
                        Ok(r)
                    }
                    _ => Ok(sql.to_string()),
                }
            }
            Err(AgentError::Parse(e)) => {
                self.event(AgentEvent::CritiqueParse {
                    message: e.to_string(),
                });
                Ok(sql.to_string())
            }
            Err(e) => Err(e),
        }
    }

    /// `Ok(true)` when the result was accepted and written.
    fn validate(
        &mut self,
        sql: &str,
        exec: &ExecResult,
        feedback: &mut Option<String>,
    ) -> Result<bool, AgentError> {
        self.state.phase = AgentPhase::Validating;
        let verdict = match validate_result(&mut self.caller, &self.cx, sql, exec) {
            Ok(v) => v,
            Err(AgentError::Parse(e)) => {
                self.event(AgentEvent::VerdictParse {
                    role: prompts::VALIDATOR.into(),
                    message: e.to_string(),
                });
                ValidationVerdict {
                    valid_result: false,
                    columns_not_needed: Vec::new(),
                    result_empty: exec.rows.is_empty(),
                    suggest_fix: "The validator response could not be parsed; re-check the query."
                        .into(),
                }
            }
            Err(e) => return Err(e),
        };
        if verdict.valid_result && !verdict.result_empty && !exec.rows.is_empty() {
            if !verdict.columns_not_needed.is_empty() {
                self.event(AgentEvent::Advisory {
                    columns_not_needed: verdict.columns_not_needed,
                });
            }
            self.finish(sql.to_string(), exec.clone())?;
            return Ok(true);
        }
        self.event(AgentEvent::ValidationRejected {
            suggest_fix: verdict.suggest_fix.clone(),
        });
        *feedback = Some(verdict.suggest_fix).filter(|f| !f.trim().is_empty());
        Ok(false)
    }

    fn link_schema(&mut self, error_message: &str) -> Result<(), AgentError> {
        if self.exploration_used {
            return Ok(());
        }
        self.exploration_used = true;
        self.state.phase = AgentPhase::SchemaLinking;
        let Some(env) = self.task.env.filter(|e| e.is_dir()) else {
            self.event(AgentEvent::ExplorationSkipped {
                reason: "no environment directory".into(),
            });
            return Ok(());
        };
        let out = explore_schema(
            env,
            &self.cx.question,
            error_message,
            self.expert,
            &self.cfg.params,
            self.cfg.caps.exploration_steps,
        )
        .map_err(|e| AgentError::ExpertFailure(e.to_string()))?;
        self.state.exploration_steps = out.steps.len();
        for v in &out.violations {
            self.state
                .events
                .push(AgentEvent::SandboxViolation { path: v.clone() });
        }
        if !out.schema_text.trim().is_empty() {
            self.state.linked_schema = Some(out.schema_text.clone());
        }
        self.state.exploration = Some(out);
        Ok(())
    }

    fn refine_loop(&mut self, sql: &str, exec: ExecResult) -> Result<Refined, AgentError> {
        let mut cur_sql = sql.to_string();
        let mut cur_exec = exec;
        for _ in 0..self.cfg.caps.refine_iterations {
            let kind = cur_exec.failure_kind().unwrap_or(ErrorKind::Other);
            let message = failure_text(&cur_exec);
            if kind.is_schema_error() {
                self.link_schema(&message)?;
            }
            self.state.phase = AgentPhase::Refining;
            let prior = self
                .state
                .plan
                .as_ref()
                .map(|p| p.steps.join("\n"))
                .unwrap_or_default();
            let expected = self
                .state
                .plan
                .as_ref()
                .map(|p| p.expected_csv_format.clone());
            let prompt = prompts::refiner(
                &self.cx,
                &RefinerInput {
                    sql: &cur_sql,
                    error_message: &message,
                    error_kind: kind,
                    prior_context: &prior,
                    critique_feedback: self.critique_feedback.as_deref(),
                    linked_schema: self.state.linked_schema.as_deref(),
                    expected_format: expected.as_deref(),
                    output: RESULT_FILE,
                },
            );
            let raw = self.caller.call(prompts::REFINER, &prompt)?;
            self.state.refinements += 1;
            match parse_action(&raw, self.cfg.dialect) {
                Err(e) => {
                    self.event(AgentEvent::InvalidAction {
                        role: prompts::REFINER.into(),
                        message: e.to_string(),
                    });
                    cur_exec = ExecResult::error(ErrorKind::Syntax, format!("Invalid action: {e}"));
                }
                Ok(AgentAction {
                    kind: ActionKind::Terminate { .. },
                    ..
                }) => break,
                Ok(AgentAction {
                    kind: ActionKind::ExecSql { sql, .. },
                    thought,
                }) => {
                    if sql == cur_sql || self.last_action_sql.as_deref() == Some(sql.as_str()) {
                        self.event(AgentEvent::RepeatedAction {
                            role: prompts::REFINER.into(),
                        });
                        cur_exec = ExecResult::error(
                            ErrorKind::Other,
                            "Repeated action rejected: the SQL is identical to the previous attempt.",
                        );
                        continue;
                    }
                    self.state.actions.push(AgentAction {
                        kind: ActionKind::ExecSql {
                            sql: sql.clone(),
                            save_path: None,
                        },
                        thought,
                    });
                    self.last_action_sql = Some(sql.clone());
                    let exec = self.execute(&sql);
                    self.state.last_exec = Some(exec.clone());
                    if exec.is_success() {
                        return Ok(Refined::Fixed(sql, exec));
                    }
                    if let Some(kind) = exec.failure_kind() {
                        self.event(AgentEvent::ExecFailed {
                            kind,
                            message: failure_text(&exec),
                        });
                    }
                    cur_sql = sql;
                    cur_exec = exec;
                }
            }
        }
        self.event(AgentEvent::RefinerGaveUp);
        Ok(Refined::GaveUp)
    }

    fn finish(&mut self, sql: String, exec: ExecResult) -> Result<(), AgentError> {
        let csv = exec
            .to_csv()
            .map_err(|e| AgentError::Output(e.to_string()))?;
        fs::create_dir_all(self.task.output_dir).map_err(|e| AgentError::Output(e.to_string()))?;
        let path: PathBuf = self.task.output_dir.join(RESULT_FILE);
        fs::write(&path, &csv)
            .map_err(|e| AgentError::Output(format!("{}: {e}", path.display())))?;
        self.final_answer = Some((sql, exec, csv));
        Ok(())
    }
}

fn failure_text(exec: &ExecResult) -> String {
    exec.error_message
        .clone()
        .unwrap_or_else(|| exec.observation(0))
}

/// Compact schema of the task database, used when there is no
/// documentation directory to explore.
fn compact_from_db(db: &Database) -> Option<String> {
    let schema = DatabaseSchema::introspect(db).ok()?;
    let samples = sample_cells(db, &schema, 3, 0).ok()?;
    let schema = schema.clone().with_samples(samples).unwrap_or(schema);
    Some(render_compact(&schema, 3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Difficulty;
    use crate::experts::ScriptedExpert;
    use std::collections::BTreeMap;

    fn db(dir: &Path) -> Database {
        let path = dir.join("t.sqlite");
        let conn = rusqlite::Connection::open(&path).unwrap();
        conn.execute_batch(
            "CREATE TABLE singer (singer_id INTEGER PRIMARY KEY, name TEXT, age INTEGER);
             INSERT INTO singer VALUES (1,'Joe',52),(2,'Ann',29),(3,'Tim',41);",
        )
        .unwrap();
        drop(conn);
        Database::open(&path).unwrap()
    }

    fn item() -> BenchmarkItem {
        BenchmarkItem {
            item_id: "local001".into(),
            db_id: "concert_singer".into(),
            question: "How many singers are there?".into(),
            gold_sql: None,
            difficulty: Difficulty::Easy,
            evidence: None,
        }
    }

    fn script(entries: &[(&str, &[&str])]) -> ScriptedExpert {
        let map: BTreeMap<String, Vec<String>> = entries
            .iter()
            .map(|(role, resp)| {
                (
                    role.to_string(),
                    resp.iter().map(|s| s.to_string()).collect(),
                )
            })
            .collect();
        ScriptedExpert::by_role("e", map)
    }

    const PLAN: &str =
        r#"{"plan":["count rows in singer"],"expected_csv_format":"count (integer)"}"#;
    const APPROVE: &str = r#"{"update_plan": false, "feedback": ""}"#;
    const VALID: &str = r#"{"valid_result": true, "columns_not_needed": [], "result_empty": false, "suggest_fix": ""}"#;
    const COUNT: &str = "Action: SQLITE_EXEC_SQL(sql_query=\"SELECT count(*) FROM singer\", save_path=\"result.csv\")";

    fn run(
        expert: &ScriptedExpert,
        env: Option<&Path>,
        mode: AgentMode,
    ) -> (tempfile::TempDir, EpisodeResult) {
        let dir = tempfile::tempdir().unwrap();
        let database = db(dir.path());
        let it = item();
        let empty = Corpus::default();
        let out = dir.path().join("out");
        let task = AgentTask {
            item: &it,
            db: &database,
            env,
            knowledge: &empty,
            syntax: &empty,
            output_dir: &out,
        };
        let cfg = AgentConfig {
            mode,
            ..AgentConfig::default()
        };
        let r = run_episode(&task, expert, &cfg);
        (dir, r)
    }

    #[test]
    fn happy_path() {
        let e = script(&[
            (prompts::PLANNER, &[PLAN]),
            (prompts::PLAN_CRITIQUE, &[APPROVE]),
            (prompts::ACTOR, &[COUNT]),
            (prompts::SQL_CRITIQUE, &["[Reasoning]\nCorrect."]),
            (prompts::VALIDATOR, &[VALID]),
        ]);
        let (dir, r) = run(&e, None, AgentMode::Full);
        assert!(r.succeeded(), "{:?}", r.failure);
        assert!(r.state.step_count <= 6);
        assert_eq!(r.final_csv.as_deref(), Some("count(*)\n3\n"));
        assert_eq!(
            fs::read_to_string(dir.path().join("out/result.csv")).unwrap(),
            "count(*)\n3\n"
        );
        assert_eq!(r.state.phase, AgentPhase::Done);
    }

    #[test]
    fn plan_critique_capped_at_three() {
        let reject = r#"{"update_plan": true, "feedback": "be more specific"}"#;
        let e = script(&[
            (prompts::PLANNER, &[PLAN]),
            (prompts::PLAN_CRITIQUE, &[reject]),
            (prompts::ACTOR, &[COUNT]),
            (prompts::SQL_CRITIQUE, &["[Reasoning] ok"]),
            (prompts::VALIDATOR, &[VALID]),
        ]);
        let (_d, r) = run(&e, None, AgentMode::Full);
        assert!(r.succeeded());
        assert_eq!(r.state.plan_critique_rounds, 3);
        let roles: Vec<&str> = r.state.history.iter().map(|h| h.role.as_str()).collect();
        assert_eq!(roles.iter().filter(|r| **r == prompts::PLANNER).count(), 4);
        assert_eq!(
            roles
                .iter()
                .filter(|r| **r == prompts::PLAN_CRITIQUE)
                .count(),
            3
        );
    }

    #[test]
    fn unknown_action_is_never_executed() {
        let e = script(&[
            (prompts::PLANNER, &[PLAN]),
            (prompts::PLAN_CRITIQUE, &[APPROVE]),
            (
                prompts::ACTOR,
                &["Action: DROP_TABLE(name=\"singer\")", COUNT],
            ),
            (
                prompts::REFINER,
                &["Action: Terminate(output=\"result.csv\")"],
            ),
            (prompts::SQL_CRITIQUE, &["[Reasoning] ok"]),
            (prompts::VALIDATOR, &[VALID]),
        ]);
        let (_d, r) = run(&e, None, AgentMode::Full);
        assert!(r.succeeded());
        assert!(matches!(
            r.state.events[0],
            AgentEvent::InvalidAction { .. }
        ));
        assert!(r.state.events.contains(&AgentEvent::RefinerGaveUp));
        assert_eq!(r.state.actions.len(), 1);
    }

    #[test]
    fn bare_mode_terminates_on_request() {
        let e = script(&[(
            prompts::ACTOR,
            &[COUNT, "Action: Terminate(output=\"result.csv\")"],
        )]);
        let (_d, r) = run(&e, None, AgentMode::Bare);
        assert!(r.succeeded());
        assert_eq!(r.state.step_count, 2);
        assert!(r.state.plan.is_none());
    }

    #[test]
    fn step_cap_fails_the_episode() {
        let e = script(&[
            (prompts::PLANNER, &[PLAN]),
            (prompts::PLAN_CRITIQUE, &[APPROVE]),
            (
                prompts::ACTOR,
                &["Action: Terminate(output=\"result.csv\")"],
            ),
        ]);
        let (_d, r) = run(&e, None, AgentMode::Full);
        assert_eq!(
            r.failure,
            Some(AgentError::StepCapExceeded(DEFAULT_CALL_CAP))
        );
        assert_eq!(r.state.step_count, DEFAULT_CALL_CAP);
        assert_eq!(r.state.phase, AgentPhase::Failed);
        assert!(r.final_csv.is_none());
    }

    #[test]
    fn schema_error_explores_once() {
        let env = tempfile::tempdir().unwrap();
        fs::write(
            env.path().join("DDL.csv"),
            "singer,CREATE TABLE singer (singer_id INTEGER)\n",
        )
        .unwrap();
        let e = script(&[
            (prompts::PLANNER, &[PLAN]),
            (prompts::PLAN_CRITIQUE, &[APPROVE]),
            (
                prompts::ACTOR,
                &["Action: SQLITE_EXEC_SQL(sql_query=\"SELECT count(*) FROM singers\")"],
            ),
            (prompts::SQL_CRITIQUE, &["[Reasoning] ok"]),
            (
                prompts::SCHEMA_LINKER,
                &[
                    "Action: CAT(path=\"DDL.csv\")",
                    "Action: Terminate(output=\"singer(singer_id:INTEGER[])\")",
                ],
            ),
            (prompts::REFINER, &[COUNT]),
            (prompts::VALIDATOR, &[VALID]),
        ]);
        let (_d, r) = run(&e, Some(env.path()), AgentMode::Full);
        assert!(r.succeeded(), "{:?}", r.failure);
        assert_eq!(
            r.state.exploration_steps,
            2,
            "{:?}",
            r.state.exploration.as_ref().map(|x| &x.steps[..3])
        );
        assert_eq!(
            r.state.linked_schema.as_deref(),
            Some("singer(singer_id:INTEGER[])")
        );
        let refine_prompt_hash = &r
            .state
            .history
            .iter()
            .find(|h| h.role == prompts::REFINER)
            .unwrap()
            .prompt_hash;
        assert!(!refine_prompt_hash.is_empty());
        assert_eq!(r.state.refinements, 1);
    }
}
