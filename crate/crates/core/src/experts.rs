//! Experts: anything that maps a prompt to text. Live experts speak an
//! OpenAI-compatible chat-completion API; scripted and replay experts make
//! every run reproducible offline.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exec::{fingerprint, Database, ExecResult, ResultFingerprint};
use crate::prompt::GenerationParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    HttpChat,
    Scripted,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExpertId {
    pub name: String,
    pub backend: Backend,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResponse {
    pub text: String,
    #[serde(skip)]
    pub latency: Duration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<String>,
}

impl RawResponse {
    pub fn text(text: impl Into<String>) -> Self {
        RawResponse {
            text: text.into(),
            latency: Duration::ZERO,
            usage: None,
            finish_reason: None,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ExpertError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("authentication rejected: {0}")]
    AuthFailure(String),
    #[error("no transcript entry for expert {expert} and prompt {prompt_hash}")]
    TranscriptMiss { expert: String, prompt_hash: String },
    #[error("scripted expert failure: {0}")]
    Scripted(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("duplicate expert name: {0}")]
    DuplicateName(String),
}

pub trait Expert: Send + Sync {
    fn id(&self) -> &ExpertId;
    fn generate(&self, prompt: &str, params: &GenerationParams)
        -> Result<RawResponse, ExpertError>;
}

/// Replay key: SHA-256 over the prompt bytes, a NUL separator and the
/// canonical JSON of the generation parameters.
pub fn prompt_hash(prompt: &str, params: &GenerationParams) -> String {
    let mut h = Sha256::new();
    h.update(prompt.as_bytes());
    h.update([0u8]);
    h.update(serde_json::to_vec(params).expect("params serialize"));
    hex::encode(h.finalize())
}

/// First line of the form `[Agent] <Role>` names the role a prompt is for.
pub fn prompt_role(prompt: &str) -> Option<&str> {
    prompt
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("[Agent] "))
        .map(str::trim)
}

type ScriptFn = dyn Fn(&str, usize) -> Result<String, ExpertError> + Send + Sync;

/// Deterministic expert driven by a closure over (prompt, call index).
pub struct ScriptedExpert {
    id: ExpertId,
    calls: Mutex<usize>,
    script: Box<ScriptFn>,
}

impl ScriptedExpert {
    pub fn from_fn(
        name: impl Into<String>,
        f: impl Fn(&str, usize) -> Result<String, ExpertError> + Send + Sync + 'static,
    ) -> Self {
        ScriptedExpert {
            id: ExpertId {
                name: name.into(),
                backend: Backend::Scripted,
            },
            calls: Mutex::new(0),
            script: Box::new(f),
        }
    }

    pub fn constant(name: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        Self::from_fn(name, move |_, _| Ok(text.clone()))
    }

    /// Returns the responses in order, then repeats the last one.
    pub fn sequence(name: impl Into<String>, responses: Vec<String>) -> Self {
        Self::from_fn(name, move |_, i| {
            responses
                .get(i)
                .or_else(|| responses.last())
                .cloned()
                .ok_or_else(|| ExpertError::Scripted("empty sequence".into()))
        })
    }

    /// Per-role response queues keyed by [`prompt_role`]; prompts without a
    /// role use the `""` key. An exhausted queue repeats its last entry.
    pub fn by_role(name: impl Into<String>, script: BTreeMap<String, Vec<String>>) -> Self {
        let cursors: Mutex<HashMap<String, usize>> = Mutex::new(HashMap::new());
        Self::from_fn(name, move |prompt, _| {
            let role = prompt_role(prompt).unwrap_or("");
            let queue = script
                .get(role)
                .ok_or_else(|| ExpertError::Scripted(format!("no script for role {role:?}")))?;
            let mut cursors = cursors.lock().expect("cursor lock");
            let pos = cursors.entry(role.to_string()).or_insert(0);
            let out = queue.get(*pos).or_else(|| queue.last()).cloned();
            *pos += 1;
            out.ok_or_else(|| ExpertError::Scripted(format!("empty script for role {role:?}")))
        })
    }

    pub fn calls(&self) -> usize {
        *self.calls.lock().expect("call lock")
    }
}

impl Expert for ScriptedExpert {
    fn id(&self) -> &ExpertId {
        &self.id
    }

    fn generate(
        &self,
        prompt: &str,
        _params: &GenerationParams,
    ) -> Result<RawResponse, ExpertError> {
        let index = {
            let mut c = self.calls.lock().expect("call lock");
            let i = *c;
            *c += 1;
            i
        };
        (self.script)(prompt, index).map(RawResponse::text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub prompt_hash: String,
    pub expert: String,
    pub response_text: String,
    pub params: GenerationParams,
}

pub fn read_transcript(path: &Path) -> std::io::Result<Vec<TranscriptRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.display(), n + 1),
            )
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_transcript(path: &Path, records: &[TranscriptRecord]) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}

/// Answers from a recorded transcript. Repeated identical prompts consume
/// the recorded answers in order; once exhausted the last answer repeats.
pub struct ReplayExpert {
    id: ExpertId,
    entries: Mutex<HashMap<String, (Vec<String>, usize)>>,
}

impl ReplayExpert {
    pub fn new(name: impl Into<String>, records: &[TranscriptRecord]) -> Self {
        let name = name.into();
        let mut entries: HashMap<String, (Vec<String>, usize)> = HashMap::new();
        for r in records.iter().filter(|r| r.expert == name) {
            entries
                .entry(r.prompt_hash.clone())
                .or_default()
                .0
                .push(r.response_text.clone());
        }
        ReplayExpert {
            id: ExpertId {
                name,
                backend: Backend::Replay,
            },
            entries: Mutex::new(entries),
        }
    }
}

impl Expert for ReplayExpert {
    fn id(&self) -> &ExpertId {
        &self.id
    }

    fn generate(
        &self,
        prompt: &str,
        params: &GenerationParams,
    ) -> Result<RawResponse, ExpertError> {
        let hash = prompt_hash(prompt, params);
        let mut entries = self.entries.lock().expect("replay lock");
        let Some((answers, pos)) = entries.get_mut(&hash) else {
            return Err(ExpertError::TranscriptMiss {
                expert: self.id.name.clone(),
                prompt_hash: hash,
            });
        };
        let text = answers
            .get(*pos)
            .or_else(|| answers.last())
            .cloned()
            .unwrap_or_default();
        *pos += 1;
        Ok(RawResponse::text(text))
    }
}

/// Shared, append-only transcript sink.
#[derive(Debug, Clone, Default)]
pub struct TranscriptLog(Arc<Mutex<Vec<TranscriptRecord>>>);

impl TranscriptLog {
    pub fn push(&self, record: TranscriptRecord) {
        self.0.lock().expect("log lock").push(record);
    }

    pub fn records(&self) -> Vec<TranscriptRecord> {
        self.0.lock().expect("log lock").clone()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        write_transcript(path, &self.records())
    }
}

/// Wraps an expert and logs every successful exchange.
pub struct RecordingExpert {
    inner: Arc<dyn Expert>,
    log: TranscriptLog,
}

impl RecordingExpert {
    pub fn new(inner: Arc<dyn Expert>, log: TranscriptLog) -> Self {
        RecordingExpert { inner, log }
    }
}

impl Expert for RecordingExpert {
    fn id(&self) -> &ExpertId {
        self.inner.id()
    }

    fn generate(
        &self,
        prompt: &str,
        params: &GenerationParams,
    ) -> Result<RawResponse, ExpertError> {
        let resp = self.inner.generate(prompt, params)?;
        self.log.push(TranscriptRecord {
            prompt_hash: prompt_hash(prompt, params),
            expert: self.inner.id().name.clone(),
            response_text: resp.text.clone(),
            params: params.clone(),
        });
        Ok(resp)
    }
}

pub const DEFAULT_REQUEST_TIMEOUT: Duration = Duration::from_secs(120);
pub const DEFAULT_RETRIES: u32 = 3;

/// One entry of the experts config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub name: String,
    #[serde(default = "default_backend")]
    pub backend: Backend,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub params: Option<GenerationParams>,
    #[serde(default)]
    pub timeout_secs: Option<u64>,
    #[serde(default)]
    pub retries: Option<u32>,
    /// Scripted backend only: fixed response text.
    #[serde(default)]
    pub response: Option<String>,
}

fn default_backend() -> Backend {
    Backend::HttpChat
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertsFile {
    pub experts: Vec<ExpertConfig>,
}

impl ExpertsFile {
    pub fn load(path: &Path) -> Result<Self, ExpertError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExpertError::Config(format!("{}: {e}", path.display())))?;
        let file: ExpertsFile = serde_json::from_str(&text)
            .map_err(|e| ExpertError::Config(format!("{}: {e}", path.display())))?;
        let mut seen = HashSet::new();
        for e in &file.experts {
            if !seen.insert(e.name.as_str()) {
                return Err(ExpertError::DuplicateName(e.name.clone()));
            }
        }
        if file.experts.is_empty() {
            return Err(ExpertError::Config("no experts configured".into()));
        }
        Ok(file)
    }
}

/// How configured experts are instantiated.
#[derive(Debug, Clone)]
pub enum EnsembleMode {
    Live,
    Replay(Vec<TranscriptRecord>),
    Record(TranscriptLog),
}

pub fn build_ensemble(
    file: &ExpertsFile,
    mode: &EnsembleMode,
) -> Result<Vec<Arc<dyn Expert>>, ExpertError> {
    let mut out: Vec<Arc<dyn Expert>> = Vec::new();
    for cfg in &file.experts {
        if let EnsembleMode::Replay(records) = mode {
            out.push(Arc::new(ReplayExpert::new(cfg.name.clone(), records)));
            continue;
        }
        let expert: Arc<dyn Expert> = match cfg.backend {
            Backend::HttpChat => Arc::new(HttpChatExpert::from_config(cfg)?),
            Backend::Scripted => {
                let text = cfg.response.clone().ok_or_else(|| {
                    ExpertError::Config(format!("{}: scripted expert needs `response`", cfg.name))
                })?;
                Arc::new(ScriptedExpert::constant(cfg.name.clone(), text))
            }
            Backend::Replay => {
                return Err(ExpertError::Config(format!(
                    "{}: replay experts need a transcript",
                    cfg.name
                )));
            }
        };
        out.push(match mode {
            EnsembleMode::Record(log) => Arc::new(RecordingExpert::new(expert, log.clone())),
            _ => expert,
        });
    }
    Ok(out)
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct HttpChatExpert {
    id: ExpertId,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    retries: u32,
    backoff: Duration,
    client: reqwest::blocking::Client,
    in_flight: Mutex<()>,
}

impl HttpChatExpert {
    pub fn new(
        name: impl Into<String>,
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, ExpertError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ExpertError::Config(e.to_string()))?;
        Ok(HttpChatExpert {
            id: ExpertId {
                name: name.into(),
                backend: Backend::HttpChat,
            },
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            retries: DEFAULT_RETRIES,
            backoff: Duration::from_millis(500),
            client,
            in_flight: Mutex::new(()),
        })
    }

    pub fn from_config(cfg: &ExpertConfig) -> Result<Self, ExpertError> {
        let endpoint = cfg
            .endpoint
            .clone()
            .ok_or_else(|| ExpertError::Config(format!("{}: missing endpoint", cfg.name)))?;
        let model = cfg
            .model
            .clone()
            .ok_or_else(|| ExpertError::Config(format!("{}: missing model", cfg.name)))?;
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ExpertError::Config(format!("{}: environment variable {var} not set", cfg.name))
            })?),
            None => None,
        };
        let timeout = cfg
            .timeout_secs
            .map(Duration::from_secs)
            .unwrap_or(DEFAULT_REQUEST_TIMEOUT);
        let mut e = Self::new(cfg.name.clone(), endpoint, model, api_key, timeout)?;
        if let Some(r) = cfg.retries {
            e.retries = r;
        }
        Ok(e)
    }

    pub fn with_retries(mut self, retries: u32, backoff: Duration) -> Self {
        self.retries = retries;
        self.backoff = backoff;
        self
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<RawResponse, (bool, ExpertError)> {
        let started = Instant::now();
        let mut req = self
            .client
            .post(format!("{}/chat/completions", self.endpoint))
            .json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| (true, ExpertError::Transport(e.to_string())))?;
        let status = resp.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err((false, ExpertError::AuthFailure(format!("HTTP {status}"))));
        }
        if status.is_server_error() || status.as_u16() == 429 {
            return Err((true, ExpertError::Transport(format!("HTTP {status}"))));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err((
                false,
                ExpertError::Transport(format!("HTTP {status}: {text}")),
            ));
        }
        let payload: ChatResponse = resp
            .json()
            .map_err(|e| (false, ExpertError::Transport(e.to_string())))?;
        let choice = payload.choices.into_iter().next().ok_or_else(|| {
            (
                false,
                ExpertError::Transport("response has no choices".into()),
            )
        })?;
        Ok(RawResponse {
            text: choice.message.content.unwrap_or_default(),
            latency: started.elapsed(),
            usage: payload.usage.map(|u| TokenUsage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            }),
            finish_reason: choice.finish_reason,
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl Expert for HttpChatExpert {
    fn id(&self) -> &ExpertId {
        &self.id
    }

    fn generate(
        &self,
        prompt: &str,
        params: &GenerationParams,
    ) -> Result<RawResponse, ExpertError> {
        let _guard = self.in_flight.lock().expect("in-flight lock");
        let mut body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = serde_json::json!(seed);
        }
        let mut delay = self.backoff;
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Ok(r) => return Ok(r),
                Err((retryable, err)) => {
                    if !retryable || attempt >= self.retries {
                        return Err(err);
                    }
                    log::warn!("{}: {err}; retrying in {delay:?}", self.id.name);
                    thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ExtractError {
    #[error("no SQL found in response")]
    NoSqlFound,
}

/// Pull one SQL statement out of model output. The search region is the
/// first fenced block if there is one, else the whole text; the statement
/// runs from the first SELECT/WITH keyword to the first unquoted `;`.
pub fn extract_sql(raw: &str) -> Result<String, ExtractError> {
    let region = fenced_block(raw).unwrap_or(raw);
    let start = find_statement_start(region).ok_or(ExtractError::NoSqlFound)?;
    let body = &region[start..];
    let end = unquoted_semicolon(body).unwrap_or(body.len());
    let sql = body[..end].trim().trim_end_matches(';').trim();
    if sql.is_empty() {
        Err(ExtractError::NoSqlFound)
    } else {
        Ok(sql.to_string())
    }
}

fn fenced_block(text: &str) -> Option<&str> {
    let after = &text[text.find("```")? + 3..];
    let newline = after.find('\n').unwrap_or(after.len());
    let body = match after.find("```") {
        // Inline fence: ```SELECT 1```
        Some(close) if close < newline => return Some(&after[..close]),
        _ => &after[(newline + 1).min(after.len())..],
    };
    Some(&body[..body.find("```").unwrap_or(body.len())])
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

fn keyword_at(bytes: &[u8], i: usize, kw: &str) -> bool {
    let k = kw.as_bytes();
    i + k.len() <= bytes.len()
        && bytes[i..i + k.len()].eq_ignore_ascii_case(k)
        && (i == 0 || !is_word_byte(bytes[i - 1]))
        && (i + k.len() == bytes.len() || !is_word_byte(bytes[i + k.len()]))
}

/// `WITH [RECURSIVE] name [(cols)] AS (`; prose "with" does not match.
fn looks_like_cte(text: &str) -> bool {
    let mut rest = text[4..].trim_start();
    if rest.len() >= 9 && rest[..9].eq_ignore_ascii_case("recursive") {
        rest = rest[9..].trim_start();
    }
    let name_len = rest
        .char_indices()
        .find(|(_, c)| !(c.is_alphanumeric() || *c == '_' || *c == '"' || *c == '`'))
        .map(|(i, _)| i)
        .unwrap_or(rest.len());
    if name_len == 0 {
        return false;
    }
    rest = rest[name_len..].trim_start();
    if rest.starts_with('(') {
        match rest.find(')') {
            Some(i) => rest = rest[i + 1..].trim_start(),
            None => return false,
        }
    }
    rest.len() >= 2
        && rest[..2].eq_ignore_ascii_case("as")
        && rest[2..].trim_start().starts_with('(')
}

fn find_statement_start(text: &str) -> Option<usize> {
    let bytes = text.as_bytes();
    (0..bytes.len()).find(|&i| {
        text.is_char_boundary(i)
            && (keyword_at(bytes, i, "select")
                || (keyword_at(bytes, i, "with") && looks_like_cte(&text[i..])))
    })
}

fn unquoted_semicolon(text: &str) -> Option<usize> {
    let mut quote: Option<char> = None;
    for (i, c) in text.char_indices() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None if c == '\'' || c == '"' || c == '`' => quote = Some(c),
            None if c == ';' => return Some(i),
            None => {}
        }
    }
    None
}

/// Which round of the pipeline produced a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pre,
    Post,
    Agent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    /// Not executed yet.
    Pending,
    Ok,
    Empty,
    ExecError,
    NoSql,
    GenFailed,
}

/// One expert's SQL for one item at one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlCandidate {
    pub expert_index: usize,
    pub expert: String,
    pub phase: Phase,
    pub prompt_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sql: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exec: Option<ExecResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<ResultFingerprint>,
    pub status: CandidateStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl SqlCandidate {
    pub fn from_generation(
        expert_index: usize,
        expert: &str,
        phase: Phase,
        prompt_hash: String,
        result: Result<RawResponse, ExpertError>,
    ) -> Self {
        let mut c = SqlCandidate {
            expert_index,
            expert: expert.to_string(),
            phase,
            prompt_hash,
            raw_text: None,
            sql: None,
            exec: None,
            fingerprint: None,
            status: CandidateStatus::Pending,
            failure: None,
        };
        match result {
            Ok(resp) => {
                match extract_sql(&resp.text) {
                    Ok(sql) => c.sql = Some(sql),
                    Err(e) => {
                        c.status = CandidateStatus::NoSql;
                        c.failure = Some(e.to_string());
                    }
                }
                c.raw_text = Some(resp.text);
            }
            Err(e) => {
                c.status = CandidateStatus::GenFailed;
                c.failure = Some(e.to_string());
            }
        }
        c
    }

    /// Execute the SQL (if any) and set status and fingerprint. Fingerprints
    /// are order-insensitive so grouping never depends on row order.
    pub fn execute(&mut self, db: &Database, timeout: Duration) {
        let Some(sql) = &self.sql else { return };
        let result = db.execute(sql, timeout);
        self.set_exec(result);
    }

    pub fn set_exec(&mut self, result: ExecResult) {
        self.fingerprint = fingerprint(&result, false).ok();
        self.status = if !result.is_rows() {
            CandidateStatus::ExecError
        } else if result.rows.is_empty() {
            CandidateStatus::Empty
        } else {
            CandidateStatus::Ok
        };
        self.failure = result.error_message.clone();
        self.exec = Some(result);
    }

    pub fn succeeded(&self) -> bool {
        self.status == CandidateStatus::Ok
    }
}

/// Query every expert once, concurrently; slot `i` always holds expert `i`.
pub fn query_ensemble(
    experts: &[Arc<dyn Expert>],
    prompts: &[String],
    params: &GenerationParams,
    phase: Phase,
) -> Vec<SqlCandidate> {
    assert_eq!(experts.len(), prompts.len(), "one prompt per expert");
    thread::scope(|s| {
        let handles: Vec<_> = experts
            .iter()
            .zip(prompts)
            .enumerate()
            .map(|(i, (expert, prompt))| {
                s.spawn(move || {
                    let hash = prompt_hash(prompt, params);
                    let result = expert.generate(prompt, params);
                    SqlCandidate::from_generation(i, &expert.id().name, phase, hash, result)
                })
            })
            .collect();
        handles
            .into_iter()
            .enumerate()
            .map(|(i, h)| {
                h.join().unwrap_or_else(|_| {
                    SqlCandidate::from_generation(
                        i,
                        &experts[i].id().name,
                        phase,
                        prompt_hash(&prompts[i], params),
                        Err(ExpertError::Transport("expert thread panicked".into())),
                    )
                })
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Read;
    use std::net::TcpListener;

    #[test]
    fn extract_fenced_and_scanned() {
        assert_eq!(
            extract_sql("```sql\nSELECT a FROM t;\n```").unwrap(),
            "SELECT a FROM t"
        );
        assert_eq!(
            extract_sql("Sure! SELECT a FROM t").unwrap(),
            "SELECT a FROM t"
        );
        assert_eq!(
            extract_sql("I cannot answer."),
            Err(ExtractError::NoSqlFound)
        );
        assert_eq!(
            extract_sql("SELECT 'a;b' FROM t; SELECT 2").unwrap(),
            "SELECT 'a;b' FROM t"
        );
        assert_eq!(extract_sql("```SELECT 1```").unwrap(), "SELECT 1");
        assert_eq!(
            extract_sql("Here it is with a join: SELECT 1").unwrap(),
            "SELECT 1"
        );
        assert_eq!(
            extract_sql("with x as (select 1 as a) select a from x;").unwrap(),
            "with x as (select 1 as a) select a from x"
        );
        assert_eq!(extract_sql("```\n\n```"), Err(ExtractError::NoSqlFound));
        assert_eq!(
            extract_sql("selection is hard"),
            Err(ExtractError::NoSqlFound)
        );
    }

    #[test]
    fn extract_is_idempotent_on_examples() {
        for raw in [
            "```sql\n-- top\nSELECT a FROM t;\n```",
            "ok: WITH c AS (SELECT 1) SELECT * FROM c;;",
        ] {
            let once = extract_sql(raw).unwrap();
            assert_eq!(extract_sql(&once).unwrap(), once);
        }
    }

    #[test]
    fn scripted_variants() {
        let p = GenerationParams::default();
        let c = ScriptedExpert::constant("a", "SELECT 1");
        assert_eq!(c.generate("anything", &p).unwrap().text, "SELECT 1");
        let s = ScriptedExpert::sequence("b", vec!["x".into(), "y".into()]);
        let got: Vec<String> = (0..3).map(|_| s.generate("", &p).unwrap().text).collect();
        assert_eq!(got, ["x", "y", "y"]);
        let mut script = BTreeMap::new();
        script.insert(
            "Planner".to_string(),
            vec!["p1".to_string(), "p2".to_string()],
        );
        script.insert("Validator".to_string(), vec!["v".to_string()]);
        let r = ScriptedExpert::by_role("c", script);
        assert_eq!(r.generate("[Agent] Planner\n...", &p).unwrap().text, "p1");
        assert_eq!(r.generate("[Agent] Validator\n...", &p).unwrap().text, "v");
        assert_eq!(r.generate("[Agent] Planner\n...", &p).unwrap().text, "p2");
        assert!(r.generate("[Agent] Critic\n", &p).is_err());
        assert_eq!(r.calls(), 4);
    }

    #[test]
    fn record_then_replay() {
        let p = GenerationParams::default();
        let log = TranscriptLog::default();
        let live: Arc<dyn Expert> = Arc::new(ScriptedExpert::sequence(
            "m",
            vec!["one".into(), "two".into()],
        ));
        let rec = RecordingExpert::new(live, log.clone());
        rec.generate("q", &p).unwrap();
        rec.generate("q", &p).unwrap();
        rec.generate("other", &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        log.save(&path).unwrap();
        let records = read_transcript(&path).unwrap();
        assert_eq!(records, log.records());
        let replay = ReplayExpert::new("m", &records);
        assert_eq!(replay.generate("q", &p).unwrap().text, "one");
        assert_eq!(replay.generate("q", &p).unwrap().text, "two");
        assert_eq!(replay.generate("other", &p).unwrap().text, "two");
        assert!(matches!(
            replay.generate("unseen", &p),
            Err(ExpertError::TranscriptMiss { .. })
        ));
        let other_params = GenerationParams {
            seed: Some(1),
            ..Default::default()
        };
        assert!(replay.generate("q", &other_params).is_err());
    }

    #[test]
    fn ensemble_order_and_isolation() {
        let experts: Vec<Arc<dyn Expert>> = vec![
            Arc::new(ScriptedExpert::constant("a", "SELECT 1")),
            Arc::new(ScriptedExpert::from_fn("b", |_, _| {
                Err(ExpertError::Transport("down".into()))
            })),
            Arc::new(ScriptedExpert::constant("c", "no sql here")),
        ];
        let prompts = vec!["p".to_string(); 3];
        let c = query_ensemble(&experts, &prompts, &GenerationParams::default(), Phase::Pre);
        assert_eq!(
            c.iter().map(|c| c.expert.as_str()).collect::<Vec<_>>(),
            ["a", "b", "c"]
        );
        assert_eq!(c[0].sql.as_deref(), Some("SELECT 1"));
        assert_eq!(c[0].status, CandidateStatus::Pending);
        assert_eq!(c[1].status, CandidateStatus::GenFailed);
        assert_eq!(c[2].status, CandidateStatus::NoSql);
    }

    /// Serves canned HTTP responses, one per connection, in order.
    fn fake_server(responses: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = thread::spawn(move || {
            let mut requests = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                loop {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf);
                    if let Some(h) = text.find("\r\n\r\n") {
                        let len = text[..h]
                            .lines()
                            .find_map(|l| {
                                l.to_lowercase()
                                    .strip_prefix("content-length:")
                                    .map(|v| v.trim().to_string())
                            })
                            .and_then(|v| v.parse::<usize>().ok())
                            .unwrap_or(0);
                        if buf.len() >= h + 4 + len {
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                requests.push(String::from_utf8_lossy(&buf).into_owned());
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
            requests
        });
        (format!("http://{addr}/v1"), handle)
    }

    fn ok_body(text: &str) -> String {
        serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": 3, "completion_tokens": 2}
        })
        .to_string()
    }

    #[test]
    fn http_retries_then_succeeds() {
        let (url, server) = fake_server(vec![
            (503, "{}".into()),
            (429, "{}".into()),
            (200, ok_body("SELECT 7")),
        ]);
        let e = HttpChatExpert::new("h", url, "m", Some("k".into()), Duration::from_secs(5))
            .unwrap()
            .with_retries(3, Duration::from_millis(1));
        let r = e.generate("hello", &GenerationParams::default()).unwrap();
        assert_eq!(r.text, "SELECT 7");
        assert_eq!(r.finish_reason.as_deref(), Some("stop"));
        assert_eq!(
            r.usage,
            Some(TokenUsage {
                prompt_tokens: 3,
                completion_tokens: 2
            })
        );
        let reqs = server.join().unwrap();
        assert_eq!(reqs.len(), 3);
        assert!(reqs[0].starts_with("POST /v1/chat/completions"));
        assert!(reqs[0].to_lowercase().contains("authorization: bearer k"));
        assert!(reqs[0].contains("\"max_tokens\":200"));
    }

    #[test]
    fn http_auth_failure_is_not_retried() {
        let (url, server) = fake_server(vec![(401, "{}".into())]);
        let e = HttpChatExpert::new("h", url, "m", None, Duration::from_secs(5))
            .unwrap()
            .with_retries(3, Duration::from_millis(1));
        assert!(matches!(
            e.generate("x", &GenerationParams::default()),
            Err(ExpertError::AuthFailure(_))
        ));
        assert_eq!(server.join().unwrap().len(), 1);
    }

    #[test]
    fn http_gives_up_after_retries() {
        let (url, server) = fake_server(vec![(500, "{}".into()), (500, "{}".into())]);
        let e = HttpChatExpert::new("h", url, "m", None, Duration::from_secs(5))
            .unwrap()
            .with_retries(1, Duration::from_millis(1));
        assert!(matches!(
            e.generate("x", &GenerationParams::default()),
            Err(ExpertError::Transport(_))
        ));
        assert_eq!(server.join().unwrap().len(), 2);
    }

    #[test]
    fn config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("experts.json");
        fs::write(
            &path,
            r#"{"experts":[{"name":"a","backend":"scripted","response":"SELECT 1"},
                {"name":"b","endpoint":"http://localhost:1","model":"m"}]}"#,
        )
        .unwrap();
        let file = ExpertsFile::load(&path).unwrap();
        assert_eq!(file.experts[1].backend, Backend::HttpChat);
        let ensemble = build_ensemble(&file, &EnsembleMode::Live).unwrap();
        assert_eq!(ensemble.len(), 2);
        let replay = build_ensemble(&file, &EnsembleMode::Replay(vec![])).unwrap();
        assert_eq!(replay[0].id().backend, Backend::Replay);
        fs::write(&path, r#"{"experts":[{"name":"a"},{"name":"a"}]}"#).unwrap();
        assert_eq!(
            ExpertsFile::load(&path).unwrap_err(),
            ExpertError::DuplicateName("a".into())
        );
    }
}
