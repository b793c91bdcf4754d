//! Staged experiments: PreSQL, schema linking, PostSQL, refinement and
//! voting, wired per stage, plus the agent settings.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{run_episode, AgentConfig, AgentMode, AgentTask, Corpus, EpisodeResult};
use crate::corpus::{
    BenchmarkItem, BenchmarkSet, PhaseRecord, RunRecord, RunStore, StoreError, StrategyRecord,
};
use crate::exec::{execution_match, has_top_level_order_by, Database, ExecResult, DEFAULT_TIMEOUT};
use crate::experts::{query_ensemble, CandidateStatus, Expert, Phase, SqlCandidate};
use crate::linker::{extract_references, union_links};
use crate::prompt::{
    build_prompt, select_few_shots, Demonstration, GenerationParams, HashedBowSimilarity,
    PromptKind, PromptSpec, DEFAULT_K,
};
use crate::refine::{refine, RefineContext, RefinementTrace, DEFAULT_MAX_ITERATIONS};
use crate::schema::{
    prune, render_cell_samples, render_full_ddl, sample_cells, DatabaseSchema, LinkedSchema,
};
use crate::vote::{
    group_candidates, loss_vector, select, GroupingMode, LossMode, Schedule, VoteOutcome,
    VoteState, VoteStrategy,
};

pub const SAMPLE_ROWS_PER_TABLE: usize = 3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    S1,
    S2,
    S3,
    S4,
    S5,
    S6Wma,
    S6Rwma,
    S6Naive,
}

impl StageId {
    pub const ALL: [StageId; 8] = [
        StageId::S1,
        StageId::S2,
        StageId::S3,
        StageId::S4,
        StageId::S5,
        StageId::S6Wma,
        StageId::S6Rwma,
        StageId::S6Naive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageId::S1 => "s1",
            StageId::S2 => "s2",
            StageId::S3 => "s3",
            StageId::S4 => "s4",
            StageId::S5 => "s5",
            StageId::S6Wma => "s6_wma",
            StageId::S6Rwma => "s6_rwma",
            StageId::S6Naive => "s6_naive",
        }
    }

    pub fn refines(self) -> bool {
        !matches!(self, StageId::S1 | StageId::S2)
    }

    /// Strategy of the vote that picks the SQL to link from (s5/s6).
    fn intermediate_strategy(self, default: VoteStrategy) -> VoteStrategy {
        match self {
            StageId::S6Wma => VoteStrategy::Wma,
            StageId::S6Rwma => VoteStrategy::Rwma,
            StageId::S6Naive => VoteStrategy::Naive,
            _ => default,
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StageId::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s}"))
    }
}

#[derive(Debug, Clone)]
pub struct StageConfig {
    pub stage: StageId,
    pub k: usize,
    /// Must be `None` for stages without refinement.
    pub refine_cap: Option<usize>,
    /// Strategy for the intermediate vote of s5.
    pub vote_strategy: VoteStrategy,
    pub loss: LossMode,
    pub grouping: GroupingMode,
    pub seed: u64,
    pub timeout: Duration,
    pub params: GenerationParams,
    pub dialect: String,
}

impl StageConfig {
    pub fn new(stage: StageId) -> Self {
        StageConfig {
            stage,
            k: DEFAULT_K,
            refine_cap: None,
            vote_strategy: VoteStrategy::Wma,
            loss: LossMode::Supervised,
            grouping: GroupingMode::ByFingerprint,
            seed: 0,
            timeout: DEFAULT_TIMEOUT,
            params: GenerationParams::default(),
            dialect: "sqlite".into(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !self.stage.refines() && self.refine_cap.is_some() {
            return Err(PipelineError::Config(format!(
                "stage {} does not refine; drop the refinement cap",
                self.stage
            )));
        }
        if self.refine_cap == Some(0) {
            return Err(PipelineError::Config(
                "refinement cap must be at least 1".into(),
            ));
        }
        self.params
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    fn cap(&self) -> usize {
        self.refine_cap.unwrap_or(DEFAULT_MAX_ITERATIONS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub items: usize,
    pub failed_items: usize,
    /// Correct items per strategy, in [`VoteStrategy::ALL`] order.
    pub strategy_correct: Vec<(VoteStrategy, usize)>,
    pub expert_correct: Vec<(String, usize)>,
}

impl RunSummary {
    fn new(run_id: String, items: usize, experts: &[String]) -> Self {
        RunSummary {
            run_id,
            items,
            failed_items: 0,
            strategy_correct: VoteStrategy::ALL.iter().map(|&s| (s, 0)).collect(),
            expert_correct: experts.iter().map(|n| (n.clone(), 0)).collect(),
        }
    }

    fn tally(&mut self, record: &RunRecord) {
        for v in &record.votes {
            if v.correct {
                if let Some(c) = self
                    .strategy_correct
                    .iter_mut()
                    .find(|(s, _)| *s == v.strategy)
                {
                    c.1 += 1;
                }
            }
        }
        for (i, ok) in record.expert_correct.iter().enumerate() {
            self.expert_correct[i].1 += usize::from(*ok);
        }
        if record.failure.is_some() {
            self.failed_items += 1;
        }
    }

    pub fn accuracy(&self, strategy: VoteStrategy) -> f64 {
        let c = self
            .strategy_correct
            .iter()
            .find(|(s, _)| *s == strategy)
            .map_or(0, |(_, c)| *c);
        if self.items == 0 {
            0.0
        } else {
            c as f64 / self.items as f64
        }
    }
}

/// Stable id for a run over `items` with these settings.
pub fn run_id(label: &str, experts: &[String], items: &[BenchmarkItem], seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    for e in experts {
        h.update([0]);
        h.update(e.as_bytes());
    }
    for i in items {
        h.update([1]);
        h.update(i.item_id.as_bytes());
    }
    h.update(seed.to_le_bytes());
    format!("{}-{}", label, &hex::encode(h.finalize())[..12])
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// One vote state per strategy, updated once per item in item order.
pub struct VoteStates {
    pub states: Vec<(VoteStrategy, VoteState)>,
}

impl VoteStates {
    pub fn new(n_experts: usize, horizon: u64, seed: u64) -> Self {
        let states = VoteStrategy::ALL
            .iter()
            .map(|&s| {
                let st = match s {
                    VoteStrategy::Naive => VoteState::frozen(n_experts, seed),
                    _ => VoteState::new(n_experts, Schedule::KnownHorizon(horizon.max(1)), seed),
                };
                (s, st)
            })
            .collect();
        VoteStates { states }
    }

    pub fn get(&self, strategy: VoteStrategy) -> &VoteState {
        &self
            .states
            .iter()
            .find(|(s, _)| *s == strategy)
            .expect("all strategies present")
            .1
    }

    /// Vote with every strategy, score against gold and update.
    pub fn score(
        &mut self,
        final_candidates: &[SqlCandidate],
        gold: Option<&Gold>,
        loss: LossMode,
        grouping: GroupingMode,
    ) -> Vec<StrategyRecord> {
        let groups = group_candidates(final_candidates, grouping);
        let gold_exec = gold.map(|g| &g.exec);
        let order = gold.is_some_and(|g| g.order_sensitive);
        let losses = loss_vector(final_candidates, gold_exec, order, loss)
            .unwrap_or_else(|_| vec![1; final_candidates.len()]);
        let mut out = Vec::new();
        for (strategy, state) in &mut self.states {
            let outcome = select(*strategy, &groups, state);
            let chosen = &final_candidates[outcome.selected_expert];
            let correct = is_correct(chosen, gold);
            let algorithm_loss = match loss {
                LossMode::Supervised => !correct,
                LossMode::Unsupervised => losses[outcome.selected_expert] != 0,
            };
            state.update(&losses, algorithm_loss);
            out.push(StrategyRecord {
                strategy: *strategy,
                selected_sql: chosen.sql.clone(),
                outcome: Some(outcome),
                correct,
                losses: losses.clone(),
                algorithm_loss,
                weights_after: state.weights.clone(),
            });
        }
        out
    }

    /// Record for an item that could not be processed: scored wrong, no update.
    fn failed(&self) -> Vec<StrategyRecord> {
        self.states
            .iter()
            .map(|(s, st)| StrategyRecord {
                strategy: *s,
                outcome: None,
                selected_sql: None,
                correct: false,
                losses: Vec::new(),
                algorithm_loss: true,
                weights_after: st.weights.clone(),
            })
            .collect()
    }
}

/// Gold result of an item.
pub struct Gold {
    pub exec: ExecResult,
    pub order_sensitive: bool,
}

pub fn is_correct(candidate: &SqlCandidate, gold: Option<&Gold>) -> bool {
    match (gold, &candidate.exec) {
        (Some(g), Some(e)) => execution_match(e, &g.exec, g.order_sensitive),
        (None, Some(e)) => e.is_success(),
        _ => false,
    }
}

fn gold_of(item: &BenchmarkItem, db: &Database, timeout: Duration) -> Result<Option<Gold>, String> {
    let Some(sql) = &item.gold_sql else {
        return Ok(None);
    };
    let exec = db.execute(sql, timeout);
    if !exec.is_rows() {
        return Err(format!(
            "gold SQL failed: {}",
            exec.error_message.clone().unwrap_or_default()
        ));
    }
    Ok(Some(Gold {
        exec,
        order_sensitive: has_top_level_order_by(sql),
    }))
}

struct ItemContext<'a> {
    config: &'a StageConfig,
    item: &'a BenchmarkItem,
    schema: &'a DatabaseSchema,
    db: &'a Database,
    experts: &'a [Arc<dyn Expert>],
    demos: Vec<Demonstration>,
}

impl ItemContext<'_> {
    fn lineage(&self, phase: &str) -> String {
        format!("{}:{}", self.item.item_id, phase)
    }

    fn prompt(&self, kind: PromptKind, schema: &DatabaseSchema) -> Result<String, String> {
        let mut spec =
            PromptSpec::generation(kind, render_full_ddl(schema, false), &self.item.question);
        spec.cell_samples = render_cell_samples(schema);
        spec.demonstrations = self.demos.clone();
        spec.evidence = self.item.evidence.clone();
        build_prompt(&spec).map_err(|e| e.to_string())
    }

    fn generate(&self, prompt: &str, phase: Phase) -> Vec<SqlCandidate> {
        let prompts = vec![prompt.to_string(); self.experts.len()];
        let mut cands = query_ensemble(self.experts, &prompts, &self.config.params, phase);
        for c in &mut cands {
            c.execute(self.db, self.config.timeout);
        }
        cands
    }

    /// Refine every candidate against its own expert, concurrently.
    fn refine_all(
        &self,
        cands: &[SqlCandidate],
        prompt: &str,
    ) -> (Vec<SqlCandidate>, Vec<RefinementTrace>) {
        let ctx = RefineContext {
            item_id: self.item.item_id.clone(),
            db_id: self.item.db_id.clone(),
            dialect: self.config.dialect.clone(),
            prior_prompt: prompt.to_string(),
            params: self.config.params.clone(),
            timeout: self.config.timeout,
        };
        let path = self.db.path().to_path_buf();
        let cap = self.config.cap();
        let results: Vec<(SqlCandidate, RefinementTrace)> = thread::scope(|s| {
            let handles: Vec<_> = cands
                .iter()
                .map(|c| {
                    let ctx = &ctx;
                    let path = &path;
                    let expert = self.experts[c.expert_index].as_ref();
                    s.spawn(move || match Database::open(path) {
                        Ok(db) => refine(c, ctx, expert, &db, cap),
                        Err(e) => {
                            let mut failed = c.clone();
                            failed.failure = Some(e.to_string());
                            let trace = RefinementTrace {
                                item_id: ctx.item_id.clone(),
                                expert: c.expert.clone(),
                                attempts: Vec::new(),
                                terminal: crate::refine::Terminal::Exhausted,
                                attempts_used: 0,
                            };
                            (failed, trace)
                        }
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("refinement thread"))
                .collect()
        });
        results.into_iter().unzip()
    }

    /// Prune to what `sqls` reference; the full schema when nothing links.
    fn linked_schema(&self, sqls: &[&str]) -> DatabaseSchema {
        let refs: Vec<_> = sqls
            .iter()
            .filter_map(|s| extract_references(s, self.schema).ok())
            .collect();
        let linked: LinkedSchema = union_links(&refs, self.schema);
        prune(self.schema, &linked).unwrap_or_else(|_| self.schema.clone())
    }
}

fn sqls_of(cands: &[SqlCandidate]) -> Vec<&str> {
    cands.iter().filter_map(|c| c.sql.as_deref()).collect()
}

struct ItemRun {
    phases: Vec<PhaseRecord>,
    finals: Vec<SqlCandidate>,
}

fn phase_record(
    lineage_id: String,
    parent: Option<String>,
    phase: &str,
    candidates: Vec<SqlCandidate>,
    traces: Vec<RefinementTrace>,
) -> PhaseRecord {
    PhaseRecord {
        lineage_id,
        parent,
        phase: phase.to_string(),
        candidates,
        traces,
        vote: None,
    }
}

/// The stage dataflow for one item, up to (not including) the final vote.
fn run_item(cx: &ItemContext<'_>, states: &VoteStates) -> Result<ItemRun, String> {
    let stage = cx.config.stage;
    let pre_prompt = cx.prompt(PromptKind::PreSql, cx.schema)?;
    let pre = cx.generate(&pre_prompt, Phase::Pre);
    let mut phases = vec![phase_record(
        cx.lineage("pre"),
        None,
        "pre",
        pre.clone(),
        Vec::new(),
    )];

    let post_round = |source: &[&str],
                      parent: String,
                      phases: &mut Vec<PhaseRecord>|
     -> Result<(String, Vec<SqlCandidate>), String> {
        let pruned = cx.linked_schema(source);
        let prompt = cx.prompt(PromptKind::PostSql, &pruned)?;
        let post = cx.generate(&prompt, Phase::Post);
        phases.push(phase_record(
            cx.lineage("post"),
            Some(parent),
            "post",
            post.clone(),
            Vec::new(),
        ));
        Ok((prompt, post))
    };

    let finals = match stage {
        StageId::S1 => pre,
        StageId::S2 => post_round(&sqls_of(&pre), cx.lineage("pre"), &mut phases)?.1,
        StageId::S3 => {
            let (refined, traces) = cx.refine_all(&pre, &pre_prompt);
            phases.push(phase_record(
                cx.lineage("pre_refine"),
                Some(cx.lineage("pre")),
                "pre_refine",
                refined.clone(),
                traces,
            ));
            refined
        }
        StageId::S4 => {
            let (prompt, post) = post_round(&sqls_of(&pre), cx.lineage("pre"), &mut phases)?;
            let (refined, traces) = cx.refine_all(&post, &prompt);
            phases.push(phase_record(
                cx.lineage("post_refine"),
                Some(cx.lineage("post")),
                "post_refine",
                refined.clone(),
                traces,
            ));
            refined
        }
        StageId::S5 | StageId::S6Wma | StageId::S6Rwma | StageId::S6Naive => {
            let (refined, traces) = cx.refine_all(&pre, &pre_prompt);
            let strategy = stage.intermediate_strategy(cx.config.vote_strategy);
            let groups = group_candidates(&refined, cx.config.grouping);
            let vote: VoteOutcome = select(strategy, &groups, states.get(strategy));
            let winner = refined[vote.selected_expert].sql.clone();
            let mut rec = phase_record(
                cx.lineage("pre_refine"),
                Some(cx.lineage("pre")),
                "pre_refine",
                refined.clone(),
                traces,
            );
            rec.vote = Some(vote);
            phases.push(rec);
            // A winner without SQL links nothing; fall back to every candidate.
            let source: Vec<&str> = match &winner {
                Some(sql) => vec![sql.as_str()],
                None => sqls_of(&refined),
            };
            let (prompt, post) = post_round(&source, cx.lineage("pre_refine"), &mut phases)?;
            if stage == StageId::S5 {
                post
            } else {
                let (refined, traces) = cx.refine_all(&post, &prompt);
                phases.push(phase_record(
                    cx.lineage("post_refine"),
                    Some(cx.lineage("post")),
                    "post_refine",
                    refined.clone(),
                    traces,
                ));
                refined
            }
        }
    };
    Ok(ItemRun { phases, finals })
}

/// Cell samples drawn once per database.
fn schema_with_samples(schema: &DatabaseSchema, db: &Database, seed: u64) -> DatabaseSchema {
    sample_cells(db, schema, SAMPLE_ROWS_PER_TABLE, seed)
        .and_then(|s| schema.clone().with_samples(s))
        .unwrap_or_else(|_| schema.clone())
}

pub fn run_stage(
    config: &StageConfig,
    bench: &BenchmarkSet,
    experts: &[Arc<dyn Expert>],
    store: &mut RunStore,
) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    if experts.is_empty() {
        return Err(PipelineError::Config("no experts configured".into()));
    }
    let names: Vec<String> = experts.iter().map(|e| e.id().name.clone()).collect();
    let run = run_id(config.stage.name(), &names, &bench.items, config.seed);
    let mut states = VoteStates::new(experts.len(), bench.items.len() as u64, config.seed);
    let mut schemas: BTreeMap<String, DatabaseSchema> = BTreeMap::new();
    let provider = HashedBowSimilarity::default();
    let mut summary = RunSummary::new(run.clone(), bench.items.len(), &names);

    for item in &bench.items {
        let started_ms = now_ms();
        let mut record = RunRecord {
            run_id: run.clone(),
            item_id: item.item_id.clone(),
            stage: config.stage.name().to_string(),
            db_id: item.db_id.clone(),
            difficulty: item.difficulty,
            experts: names.clone(),
            phases: Vec::new(),
            votes: Vec::new(),
            expert_correct: vec![false; experts.len()],
            failure: None,
            episodes: Vec::new(),
            started_ms,
            finished_ms: 0,
        };
        let outcome = (|| -> Result<(Vec<PhaseRecord>, Vec<StrategyRecord>, Vec<bool>), String> {
            let path = bench
                .database_path(&item.db_id)
                .ok_or_else(|| format!("no database for {}", item.db_id))?;
            let db = Database::open(path).map_err(|e| e.to_string())?;
            let base = bench
                .catalog
                .get(&item.db_id)
                .ok_or_else(|| format!("no schema for {}", item.db_id))?;
            let schema = schemas
                .entry(item.db_id.clone())
                .or_insert_with(|| schema_with_samples(base, &db, config.seed))
                .clone();
            let gold = gold_of(item, &db, config.timeout)?;
            if config.loss == LossMode::Supervised && gold.is_none() {
                return Err("supervised loss needs gold SQL".into());
            }
            let cx = ItemContext {
                config,
                item,
                schema: &schema,
                db: &db,
                experts,
                demos: select_few_shots(&item.question, &bench.train_pool, config.k, &provider),
            };
            let run = run_item(&cx, &states)?;
            let votes = states.score(&run.finals, gold.as_ref(), config.loss, config.grouping);
            let per_expert = run
                .finals
                .iter()
                .map(|c| is_correct(c, gold.as_ref()))
                .collect();
            Ok((run.phases, votes, per_expert))
        })();
        match outcome {
            Ok((phases, votes, per_expert)) => {
                record.phases = phases;
                record.votes = votes;
                record.expert_correct = per_expert;
            }
            Err(msg) => {
                log::warn!("item {} failed: {msg}", item.item_id);
                record.failure = Some(msg);
                record.votes = states.failed();
            }
        }
        record.finished_ms = now_ms();
        summary.tally(&record);
        store.record_round(&record)?;
    }
    Ok(summary)
}

/// Agent settings: 1 and 3 are the bare act loop, 2 and 4 the full agent,
/// 5 and 6 the full agent once per expert with votes over the results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Setting(u8);

impl Setting {
    pub const ALL: [Setting; 6] = [
        Setting(1),
        Setting(2),
        Setting(3),
        Setting(4),
        Setting(5),
        Setting(6),
    ];

    pub fn new(id: u8) -> Result<Self, PipelineError> {
        if (1..=6).contains(&id) {
            Ok(Setting(id))
        } else {
            Err(PipelineError::Config(format!(
                "unknown setting id {id} (expected 1-6)"
            )))
        }
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn mode(self) -> AgentMode {
        match self.0 {
            1 | 3 => AgentMode::Bare,
            _ => AgentMode::Full,
        }
    }

    /// Strategy whose accuracy is the setting's headline number.
    pub fn strategy(self) -> VoteStrategy {
        match self.0 {
            6 => VoteStrategy::Rwma,
            _ => VoteStrategy::Wma,
        }
    }

    /// Indices of the experts that run episodes. Settings 1/2 use the first
    /// expert, 3/4 the second (the first if only one is configured).
    pub fn participants(self, n_experts: usize) -> Vec<usize> {
        match self.0 {
            1 | 2 => vec![0],
            3 | 4 => vec![usize::from(n_experts > 1)],
            _ => (0..n_experts).collect(),
        }
    }

    pub fn label(self) -> String {
        format!("setting{}", self.0)
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for Setting {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let digits = s.trim().trim_start_matches("setting");
        let id = digits
            .parse::<u8>()
            .map_err(|_| PipelineError::Config(format!("unknown setting id {s:?}")))?;
        Setting::new(id)
    }
}

#[derive(Debug, Clone)]
pub struct SettingConfig {
    pub setting: Setting,
    /// `mode` is overridden by the setting.
    pub agent: AgentConfig,
    pub loss: LossMode,
    pub grouping: GroupingMode,
    pub seed: u64,
    /// Holds one documentation directory per item id, if any.
    pub env_root: Option<PathBuf>,
    pub knowledge: Corpus,
    pub syntax: Corpus,
    /// `result.csv` files go to `<output_root>/setting<n>/<item>/<expert>/`.
    pub output_root: PathBuf,
}

impl SettingConfig {
    pub fn new(setting: Setting, output_root: PathBuf) -> Self {
        SettingConfig {
            setting,
            agent: AgentConfig::default(),
            loss: LossMode::Supervised,
            grouping: GroupingMode::ByFingerprint,
            seed: 0,
            env_root: None,
            knowledge: Corpus::default(),
            syntax: Corpus::default(),
            output_root,
        }
    }
}

/// Final candidate of an episode, for voting.
pub fn episode_candidate(index: usize, expert: &str, episode: &EpisodeResult) -> SqlCandidate {
    let hash = episode
        .state
        .history
        .last()
        .map(|h| h.prompt_hash.clone())
        .unwrap_or_default();
    let mut c = SqlCandidate {
        expert_index: index,
        expert: expert.to_string(),
        phase: Phase::Agent,
        prompt_hash: hash,
        raw_text: None,
        sql: episode.final_sql.clone(),
        exec: None,
        fingerprint: None,
        status: CandidateStatus::GenFailed,
        failure: None,
    };
    match (&episode.final_exec, &episode.failure) {
        (Some(exec), None) => c.set_exec(exec.clone()),
        (_, Some(e)) => c.failure = Some(e.to_string()),
        (None, None) => c.failure = Some("episode produced no result".into()),
    }
    c
}

pub fn run_setting(
    config: &SettingConfig,
    bench: &BenchmarkSet,
    experts: &[Arc<dyn Expert>],
    store: &mut RunStore,
) -> Result<RunSummary, PipelineError> {
    if experts.is_empty() {
        return Err(PipelineError::Config("no experts configured".into()));
    }
    let setting = config.setting;
    let chosen: Vec<Arc<dyn Expert>> = setting
        .participants(experts.len())
        .into_iter()
        .map(|i| experts[i].clone())
        .collect();
    let names: Vec<String> = chosen.iter().map(|e| e.id().name.clone()).collect();
    let label = setting.label();
    let run = run_id(&label, &names, &bench.items, config.seed);
    let mut states = VoteStates::new(chosen.len(), bench.items.len() as u64, config.seed);
    let mut summary = RunSummary::new(run.clone(), bench.items.len(), &names);
    let agent = AgentConfig {
        mode: setting.mode(),
        ..config.agent.clone()
    };

    for item in &bench.items {
        let mut record = RunRecord {
            run_id: run.clone(),
            item_id: item.item_id.clone(),
            stage: label.clone(),
            db_id: item.db_id.clone(),
            difficulty: item.difficulty,
            experts: names.clone(),
            phases: Vec::new(),
            votes: Vec::new(),
            expert_correct: vec![false; chosen.len()],
            failure: None,
            episodes: Vec::new(),
            started_ms: now_ms(),
            finished_ms: 0,
        };
        let outcome = (|| -> Result<(Vec<EpisodeResult>, Option<Gold>), String> {
            let path = bench
                .database_path(&item.db_id)
                .ok_or_else(|| format!("no database for {}", item.db_id))?;
            let gold = gold_of(
                item,
                &Database::open(path).map_err(|e| e.to_string())?,
                agent.timeout,
            )?;
            if config.loss == LossMode::Supervised && gold.is_none() {
                return Err("supervised loss needs gold SQL".into());
            }
            let dbs = chosen
                .iter()
                .map(|_| Database::open(path).map_err(|e| e.to_string()))
                .collect::<Result<Vec<_>, _>>()?;
            let env = config.env_root.as_ref().map(|r| r.join(&item.item_id));
            let item_out = config.output_root.join(&label).join(&item.item_id);
            let episodes = thread::scope(|s| {
                let handles: Vec<_> = chosen
                    .iter()
                    .zip(dbs)
                    .zip(&names)
                    .map(|((expert, db), name)| {
                        let (env, agent) = (env.as_deref(), &agent);
                        let out = item_out.join(name);
                        s.spawn(move || {
                            let task = AgentTask {
                                item,
                                db: &db,
                                env,
                                knowledge: &config.knowledge,
                                syntax: &config.syntax,
                                output_dir: &out,
                            };
                            run_episode(&task, expert.as_ref(), agent)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("episode thread panicked"))
                    .collect::<Vec<_>>()
            });
            Ok((episodes, gold))
        })();
        match outcome {
            Ok((episodes, gold)) => {
                let finals: Vec<SqlCandidate> = episodes
                    .iter()
                    .enumerate()
                    .map(|(i, e)| episode_candidate(i, &names[i], e))
                    .collect();
                record.votes = states.score(&finals, gold.as_ref(), config.loss, config.grouping);
                record.expert_correct = finals
                    .iter()
                    .map(|c| is_correct(c, gold.as_ref()))
                    .collect();
                record.phases = vec![PhaseRecord {
                    lineage_id: format!("{}:agent", item.item_id),
                    parent: None,
                    phase: "agent".into(),
                    candidates: finals,
                    traces: Vec::new(),
                    vote: None,
                }];
                record.episodes = episodes;
            }
            Err(msg) => {
                log::warn!("item {} failed: {msg}", item.item_id);
                record.failure = Some(msg);
                record.votes = states.failed();
            }
        }
        record.finished_ms = now_ms();
        summary.tally(&record);
        store.record_round(&record)?;
    }
    Ok(summary)
}
