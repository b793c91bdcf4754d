//! Benchmark ingestion (Spider and BIRD layouts) and the append-only run
//! store with its CSV reports.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::agent::EpisodeResult;
use crate::experts::SqlCandidate;
use crate::prompt::Demonstration;
use crate::refine::RefinementTrace;
use crate::schema::{ColumnDef, DatabaseSchema, ForeignKey, TableDef};
use crate::vote::{VoteOutcome, VoteStrategy};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed catalog: {0}")]
    MalformedCatalog(String),
    #[error("unknown benchmark format: {0}")]
    UnknownFormat(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkFormat {
    Spider,
    Bird,
}

impl FromStr for BenchmarkFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "spider" => Ok(BenchmarkFormat::Spider),
            "bird" => Ok(BenchmarkFormat::Bird),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
    Unknown,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [
        Difficulty::Easy,
        Difficulty::Medium,
        Difficulty::Hard,
        Difficulty::Unknown,
    ];

    /// Spider hardness labels and BIRD difficulty labels.
    pub fn parse(label: &str) -> Difficulty {
        match label.trim().to_ascii_lowercase().as_str() {
            "easy" | "simple" => Difficulty::Easy,
            "medium" | "moderate" => Difficulty::Medium,
            "hard" | "extra" | "extra hard" | "challenging" => Difficulty::Hard,
            _ => Difficulty::Unknown,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
            Difficulty::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub item_id: String,
    pub db_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_sql: Option<String>,
    pub difficulty: Difficulty,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSet {
    pub format: BenchmarkFormat,
    pub root: PathBuf,
    pub items: Vec<BenchmarkItem>,
    pub catalog: BTreeMap<String, DatabaseSchema>,
    pub databases: BTreeMap<String, PathBuf>,
    /// Few-shot pool from the training split, empty when absent.
    pub train_pool: Vec<Demonstration>,
}

impl BenchmarkSet {
    pub fn database_path(&self, db_id: &str) -> Option<&Path> {
        self.databases.get(db_id).map(PathBuf::as_path)
    }
}

/// Guess the layout from the files present.
pub fn detect_format(root: &Path) -> Result<BenchmarkFormat, CorpusError> {
    if root.join("dev_tables.json").is_file() || root.join("dev_databases").is_dir() {
        Ok(BenchmarkFormat::Bird)
    } else if root.join("tables.json").is_file() {
        Ok(BenchmarkFormat::Spider)
    } else {
        Err(CorpusError::UnknownFormat(format!(
            "no catalog file under {}",
            root.display()
        )))
    }
}

fn read_json(path: &Path) -> Result<Json, CorpusError> {
    if !path.is_file() {
        return Err(CorpusError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| CorpusError::MalformedCatalog(format!("{}: {e}", path.display())))
}

fn first_existing(root: &Path, names: &[&str]) -> PathBuf {
    names
        .iter()
        .map(|n| root.join(n))
        .find(|p| p.exists())
        .unwrap_or_else(|| root.join(names[0]))
}

pub fn load_benchmark(root: &Path, format: BenchmarkFormat) -> Result<BenchmarkSet, CorpusError> {
    let (catalog_path, db_dir, train_path) = match format {
        BenchmarkFormat::Spider => (
            root.join("tables.json"),
            root.join("database"),
            root.join("train_spider.json"),
        ),
        BenchmarkFormat::Bird => (
            first_existing(root, &["dev_tables.json", "tables.json"]),
            first_existing(root, &["dev_databases", "database"]),
            root.join("train.json"),
        ),
    };
    let catalog = parse_catalog(&read_json(&catalog_path)?)?;
    let questions = read_json(&root.join("dev.json"))?;
    let items = parse_items(&questions, format)?;

    let mut databases = BTreeMap::new();
    let mut seen_ids = HashSet::new();
    for item in &items {
        if !seen_ids.insert(item.item_id.as_str()) {
            return Err(CorpusError::MalformedCatalog(format!(
                "duplicate item id {}",
                item.item_id
            )));
        }
        if !catalog.contains_key(&item.db_id) {
            return Err(CorpusError::MalformedCatalog(format!(
                "item {} uses unknown db_id {}",
                item.item_id, item.db_id
            )));
        }
        if !databases.contains_key(&item.db_id) {
            let path = db_dir
                .join(&item.db_id)
                .join(format!("{}.sqlite", item.db_id));
            if !path.is_file() {
                return Err(CorpusError::MissingFile(path));
            }
            databases.insert(item.db_id.clone(), path);
        }
    }
    let train_pool = if train_path.is_file() {
        parse_items(&read_json(&train_path)?, format)?
            .into_iter()
            .filter_map(|i| i.gold_sql.map(|sql| Demonstration::new(i.question, sql)))
            .collect()
    } else {
        Vec::new()
    };
    Ok(BenchmarkSet {
        format,
        root: root.to_path_buf(),
        items,
        catalog,
        databases,
        train_pool,
    })
}

fn as_array<'a>(v: &'a Json, what: &str) -> Result<&'a Vec<Json>, CorpusError> {
    v.as_array()
        .ok_or_else(|| CorpusError::MalformedCatalog(format!("{what} is not an array")))
}

fn str_field<'a>(v: &'a Json, key: &str, what: &str) -> Result<&'a str, CorpusError> {
    v.get(key)
        .and_then(Json::as_str)
        .ok_or_else(|| CorpusError::MalformedCatalog(format!("{what}: missing {key}")))
}

fn index(v: &Json, what: &str) -> Result<usize, CorpusError> {
    v.as_u64()
        .map(|i| i as usize)
        .ok_or_else(|| CorpusError::MalformedCatalog(format!("{what}: bad column index {v}")))
}

/// Parse a Spider-style `tables.json` array into schemas keyed by db_id.
pub fn parse_catalog(json: &Json) -> Result<BTreeMap<String, DatabaseSchema>, CorpusError> {
    let mut out = BTreeMap::new();
    for entry in as_array(json, "catalog")? {
        let db_id = str_field(entry, "db_id", "catalog entry")?.to_string();
        let what = format!("db {db_id}");
        let tables_key = if entry.get("table_names_original").is_some() {
            "table_names_original"
        } else {
            "table_names"
        };
        let columns_key = if entry.get("column_names_original").is_some() {
            "column_names_original"
        } else {
            "column_names"
        };
        let table_names: Vec<String> =
            as_array(entry.get(tables_key).unwrap_or(&Json::Null), &what)?
                .iter()
                .map(|t| t.as_str().map(str::to_string))
                .collect::<Option<_>>()
                .ok_or_else(|| {
                    CorpusError::MalformedCatalog(format!("{what}: table name not a string"))
                })?;
        let raw_columns = as_array(entry.get(columns_key).unwrap_or(&Json::Null), &what)?;
        let types = entry
            .get("column_types")
            .and_then(Json::as_array)
            .cloned()
            .unwrap_or_default();

        // (table index, column name, declared type) per global column index.
        let mut columns: Vec<Option<(usize, String, String)>> =
            Vec::with_capacity(raw_columns.len());
        for (ci, col) in raw_columns.iter().enumerate() {
            let pair = as_array(col, &what)?;
            let (Some(t), Some(name)) = (
                pair.first().and_then(Json::as_i64),
                pair.get(1).and_then(Json::as_str),
            ) else {
                return Err(CorpusError::MalformedCatalog(format!(
                    "{what}: bad column entry {col}"
                )));
            };
            if t < 0 {
                columns.push(None);
                continue;
            }
            let t = t as usize;
            if t >= table_names.len() {
                return Err(CorpusError::MalformedCatalog(format!(
                    "{what}: column {ci} references table {t}"
                )));
            }
            let ty = types
                .get(ci)
                .and_then(Json::as_str)
                .unwrap_or("")
                .to_string();
            columns.push(Some((t, name.to_string(), ty)));
        }
        let col = |i: usize| -> Result<&(usize, String, String), CorpusError> {
            columns.get(i).and_then(Option::as_ref).ok_or_else(|| {
                CorpusError::MalformedCatalog(format!("{what}: column index {i} out of range"))
            })
        };

        let mut pk: BTreeSet<usize> = BTreeSet::new();
        for p in entry
            .get("primary_keys")
            .and_then(Json::as_array)
            .into_iter()
            .flatten()
        {
            match p {
                Json::Array(parts) => {
                    for q in parts {
                        pk.insert(index(q, &what)?);
                    }
                }
                other => {
                    pk.insert(index(other, &what)?);
                }
            }
        }
        for &i in &pk {
            col(i)?;
        }

        let mut tables: Vec<TableDef> = table_names
            .iter()
            .map(|n| TableDef::new(n.clone(), Vec::new()))
            .collect();
        for (ci, c) in columns.iter().enumerate() {
            if let Some((t, name, ty)) = c {
                let mut def = ColumnDef::new(name.clone(), ty.clone());
                if pk.contains(&ci) {
                    def = def.primary();
                }
                tables[*t].columns.push(def);
            }
        }
        for fk in entry
            .get("foreign_keys")
            .and_then(Json::as_array)
            .into_iter()
            .flatten()
        {
            let pair = as_array(fk, &what)?;
            if pair.len() != 2 {
                return Err(CorpusError::MalformedCatalog(format!(
                    "{what}: foreign key {fk} is not a pair"
                )));
            }
            let (lt, lname, _) = col(index(&pair[0], &what)?)?;
            let (ft, fname, _) = col(index(&pair[1], &what)?)?;
            tables[*lt].foreign_keys.push(ForeignKey {
                column: lname.clone(),
                foreign_table: table_names[*ft].clone(),
                foreign_column: fname.clone(),
            });
        }
        let schema = DatabaseSchema::new(db_id.clone(), tables)
            .map_err(|e| CorpusError::MalformedCatalog(format!("{what}: {e}")))?;
        out.insert(db_id, schema);
    }
    Ok(out)
}

fn parse_items(json: &Json, format: BenchmarkFormat) -> Result<Vec<BenchmarkItem>, CorpusError> {
    let sql_keys: &[&str] = match format {
        BenchmarkFormat::Spider => &["query", "SQL"],
        BenchmarkFormat::Bird => &["SQL", "query"],
    };
    as_array(json, "question file")?
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let what = format!("question {i}");
            let item_id = match q.get("question_id") {
                Some(Json::String(s)) => s.clone(),
                Some(Json::Number(n)) => n.to_string(),
                _ => format!("dev_{i:04}"),
            };
            let difficulty = ["difficulty", "hardness"]
                .iter()
                .find_map(|k| q.get(*k).and_then(Json::as_str))
                .map(Difficulty::parse)
                .unwrap_or(Difficulty::Unknown);
            Ok(BenchmarkItem {
                item_id,
                db_id: str_field(q, "db_id", &what)?.to_string(),
                question: str_field(q, "question", &what)?.to_string(),
                gold_sql: sql_keys
                    .iter()
                    .find_map(|k| q.get(*k).and_then(Json::as_str))
                    .map(str::to_string),
                difficulty,
                evidence: q
                    .get("evidence")
                    .and_then(Json::as_str)
                    .filter(|e| !e.trim().is_empty())
                    .map(str::to_string),
            })
        })
        .collect()
}

/// Candidates and traces of one pipeline phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    /// `<item>/<stage>/<phase>`; lets later phases name their inputs.
    pub lineage_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    pub phase: String,
    pub candidates: Vec<SqlCandidate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub traces: Vec<RefinementTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vote: Option<VoteOutcome>,
}

/// Final vote of one strategy for one item, with its weight update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRecord {
    pub strategy: VoteStrategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<VoteOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_sql: Option<String>,
    pub correct: bool,
    pub losses: Vec<u8>,
    pub algorithm_loss: bool,
    pub weights_after: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub item_id: String,
    pub stage: String,
    pub db_id: String,
    pub difficulty: Difficulty,
    pub experts: Vec<String>,
    pub phases: Vec<PhaseRecord>,
    pub votes: Vec<StrategyRecord>,
    /// Per-expert correctness of that expert's final candidate.
    pub expert_correct: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    /// Agent settings only: one episode per participating expert.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub episodes: Vec<EpisodeResult>,
    pub started_ms: u64,
    pub finished_ms: u64,
}

impl RunRecord {
    pub fn vote(&self, strategy: VoteStrategy) -> Option<&StrategyRecord> {
        self.votes.iter().find(|v| v.strategy == strategy)
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage full: {0}")]
    StorageFull(std::io::Error),
    #[error("duplicate record for item {item_id} at stage {stage}")]
    DuplicateKey { item_id: String, stage: String },
    #[error("store I/O error: {0}")]
    Io(std::io::Error),
    #[error("corrupt store line {line}: {msg}")]
    Corrupt { line: usize, msg: String },
    #[error("store holds no complete stage")]
    EmptyStore,
}

fn io_err(e: std::io::Error) -> StoreError {
    if e.kind() == std::io::ErrorKind::StorageFull {
        StoreError::StorageFull(e)
    } else {
        StoreError::Io(e)
    }
}

/// One JSON record per line. Single writer; readers see a prefix.
pub struct RunStore {
    path: PathBuf,
    file: File,
    keys: HashSet<(String, String)>,
}

impl RunStore {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let mut keys = HashSet::new();
        if path.is_file() {
            for r in Self::read(path)? {
                keys.insert((r.item_id, r.stage));
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        Ok(RunStore {
            path: path.to_path_buf(),
            file,
            keys,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn record_round(&mut self, record: &RunRecord) -> Result<(), StoreError> {
        let key = (record.item_id.clone(), record.stage.clone());
        if self.keys.contains(&key) {
            return Err(StoreError::DuplicateKey {
                item_id: key.0,
                stage: key.1,
            });
        }
        let mut line = serde_json::to_vec(record).map_err(|e| StoreError::Io(e.into()))?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(io_err)?;
        self.file.sync_data().map_err(io_err)?;
        self.keys.insert(key);
        Ok(())
    }

    pub fn records(&self) -> Result<Vec<RunRecord>, StoreError> {
        Self::read(&self.path)
    }

    pub fn read(path: &Path) -> Result<Vec<RunRecord>, StoreError> {
        let reader = BufReader::new(File::open(path).map_err(io_err)?);
        let mut out = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
                    line: n + 1,
                    msg: e.to_string(),
                })?,
            );
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    AccuracyTable,
    WeightTrajectory,
    RegretSeries,
}

impl fmt::Display for ReportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportKind::AccuracyTable => "accuracy_table",
            ReportKind::WeightTrajectory => "weight_trajectory",
            ReportKind::RegretSeries => "regret_series",
        })
    }
}

impl FromStr for ReportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "accuracy_table" => Ok(ReportKind::AccuracyTable),
            "weight_trajectory" => Ok(ReportKind::WeightTrajectory),
            "regret_series" => Ok(ReportKind::RegretSeries),
            other => Err(format!("unknown report kind {other}")),
        }
    }
}

/// Which slice of the store a trajectory-style report reads.
#[derive(Debug, Clone, Default)]
pub struct ReportFilter {
    /// Defaults to the last stage present in the store.
    pub stage: Option<String>,
    /// Weight trajectory only; defaults to WMA.
    pub strategy: Option<VoteStrategy>,
}

fn stage_records<'a>(
    records: &'a [RunRecord],
    filter: &ReportFilter,
) -> Result<Vec<&'a RunRecord>, StoreError> {
    let stage = match &filter.stage {
        Some(s) => s.clone(),
        None => records
            .last()
            .map(|r| r.stage.clone())
            .ok_or(StoreError::EmptyStore)?,
    };
    let out: Vec<&RunRecord> = records.iter().filter(|r| r.stage == stage).collect();
    if out.is_empty() {
        Err(StoreError::EmptyStore)
    } else {
        Ok(out)
    }
}

fn csv_string(rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

/// Render a report as CSV text.
pub fn export_report(
    records: &[RunRecord],
    kind: ReportKind,
    filter: &ReportFilter,
) -> Result<String, StoreError> {
    if records.is_empty() {
        return Err(StoreError::EmptyStore);
    }
    match kind {
        ReportKind::AccuracyTable => Ok(accuracy_table(records)),
        ReportKind::WeightTrajectory => {
            let recs = stage_records(records, filter)?;
            let strategy = filter.strategy.unwrap_or(VoteStrategy::Wma);
            let mut rows = vec![std::iter::once("round".to_string())
                .chain(recs[0].experts.iter().cloned())
                .collect()];
            for (t, r) in recs.iter().enumerate() {
                let mut row = vec![(t + 1).to_string()];
                if let Some(v) = r.vote(strategy) {
                    row.extend(v.weights_after.iter().map(|w| format!("{w:.12}")));
                }
                rows.push(row);
            }
            Ok(csv_string(rows))
        }
        ReportKind::RegretSeries => {
            let recs = stage_records(records, filter)?;
            let n = recs[0].experts.len();
            let mut rows = vec![[
                "round",
                "algorithm",
                "mistakes",
                "best_expert_mistakes",
                "avg_regret",
            ]
            .map(String::from)
            .to_vec()];
            let mut alg = [0u64; 3];
            let mut per_expert = vec![[0u64; 3]; n];
            for (t, r) in recs.iter().enumerate() {
                let round = (t + 1) as u64;
                for (s, strategy) in VoteStrategy::ALL.iter().enumerate() {
                    let Some(v) = r.vote(*strategy) else { continue };
                    alg[s] += u64::from(v.algorithm_loss);
                    for (i, &l) in v.losses.iter().enumerate().take(n) {
                        per_expert[i][s] += u64::from(l);
                    }
                    let best = per_expert.iter().map(|m| m[s]).min().unwrap_or(0);
                    let avg = (alg[s] as f64 - best as f64) / round as f64;
                    rows.push(vec![
                        round.to_string(),
                        strategy.name().to_string(),
                        alg[s].to_string(),
                        best.to_string(),
                        format!("{avg:.6}"),
                    ]);
                }
            }
            Ok(csv_string(rows))
        }
    }
}

fn accuracy_table(records: &[RunRecord]) -> String {
    let mut stages: Vec<&str> = Vec::new();
    for r in records {
        if !stages.contains(&r.stage.as_str()) {
            stages.push(&r.stage);
        }
    }
    let mut rows = vec![[
        "stage",
        "system",
        "difficulty",
        "correct",
        "total",
        "accuracy",
    ]
    .map(String::from)
    .to_vec()];
    for stage in stages {
        let recs: Vec<&RunRecord> = records.iter().filter(|r| r.stage == stage).collect();
        let experts = &recs[0].experts;
        let mut systems: Vec<(String, Box<dyn Fn(&RunRecord) -> Option<bool>>)> = Vec::new();
        for (i, name) in experts.iter().enumerate() {
            systems.push((
                name.clone(),
                Box::new(move |r: &RunRecord| r.expert_correct.get(i).copied()),
            ));
        }
        for strategy in VoteStrategy::ALL {
            if recs.iter().any(|r| r.vote(strategy).is_some()) {
                systems.push((
                    strategy.name().to_string(),
                    Box::new(move |r: &RunRecord| r.vote(strategy).map(|v| v.correct)),
                ));
            }
        }
        for (system, score) in &systems {
            let mut buckets: Vec<(&str, Vec<&RunRecord>)> = Difficulty::ALL
                .iter()
                .map(|d| {
                    (
                        d.name(),
                        recs.iter()
                            .copied()
                            .filter(|r| r.difficulty == *d)
                            .collect(),
                    )
                })
                .filter(|(_, rs): &(&str, Vec<&RunRecord>)| !rs.is_empty())
                .collect();
            buckets.push(("all", recs.clone()));
            for (label, rs) in buckets {
                let total = rs.len();
                let correct = rs.iter().filter(|r| score(r) == Some(true)).count();
                rows.push(vec![
                    stage.to_string(),
                    system.clone(),
                    label.to_string(),
                    correct.to_string(),
                    total.to_string(),
                    format!("{:.4}", correct as f64 / total as f64),
                ]);
            }
        }
    }
    csv_string(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn write(path: &Path, v: &Json) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    }

    fn catalog() -> Json {
        json!([{
            "db_id": "concert_singer",
            "table_names_original": ["singer", "concert"],
            "table_names": ["singer", "concert"],
            "column_names_original": [[-1, "*"], [0, "Singer_ID"], [0, "Name"], [1, "concert_ID"], [1, "Singer_ID"]],
            "column_types": ["text", "number", "text", "number", "number"],
            "primary_keys": [1, 3],
            "foreign_keys": [[4, 1]]
        }])
    }

    fn spider_dir(questions: Json) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write(&dir.path().join("tables.json"), &catalog());
        write(&dir.path().join("dev.json"), &questions);
        let db = dir
            .path()
            .join("database/concert_singer/concert_singer.sqlite");
        fs::create_dir_all(db.parent().unwrap()).unwrap();
        rusqlite::Connection::open(&db)
            .unwrap()
            .execute_batch("CREATE TABLE singer (Singer_ID INT)")
            .unwrap();
        dir
    }

    #[test]
    fn spider_two_questions() {
        let dir = spider_dir(json!([
            {"db_id": "concert_singer", "question": "How many singers?", "query": "SELECT count(*) FROM singer"},
            {"db_id": "concert_singer", "question": "Names?", "query": "SELECT Name FROM singer", "hardness": "extra"}
        ]));
        assert_eq!(detect_format(dir.path()).unwrap(), BenchmarkFormat::Spider);
        let set = load_benchmark(dir.path(), BenchmarkFormat::Spider).unwrap();
        assert_eq!(set.items.len(), 2);
        assert_eq!(set.catalog.len(), 1);
        let item = &set.items[0];
        assert_eq!(item.item_id, "dev_0000");
        assert_eq!(
            item.gold_sql.as_deref(),
            Some("SELECT count(*) FROM singer")
        );
        assert_eq!(item.difficulty, Difficulty::Unknown);
        assert_eq!(set.items[1].difficulty, Difficulty::Hard);
        let schema = &set.catalog["concert_singer"];
        let concert = schema.table("concert").unwrap();
        assert_eq!(concert.foreign_keys[0].foreign_table, "singer");
        assert_eq!(concert.foreign_keys[0].foreign_column, "Singer_ID");
        assert!(
            schema
                .table("singer")
                .unwrap()
                .column("singer_id")
                .unwrap()
                .is_primary_key
        );
        assert_eq!(
            set,
            load_benchmark(dir.path(), BenchmarkFormat::Spider).unwrap()
        );
    }

    #[test]
    fn empty_questions_and_errors() {
        let dir = spider_dir(json!([]));
        assert!(load_benchmark(dir.path(), BenchmarkFormat::Spider)
            .unwrap()
            .items
            .is_empty());
        let mut bad = catalog();
        bad[0]["foreign_keys"] = json!([[999, 1]]);
        write(&dir.path().join("tables.json"), &bad);
        assert!(matches!(
            load_benchmark(dir.path(), BenchmarkFormat::Spider),
            Err(CorpusError::MalformedCatalog(_))
        ));
        write(&dir.path().join("tables.json"), &catalog());
        fs::remove_file(dir.path().join("dev.json")).unwrap();
        assert!(matches!(
            load_benchmark(dir.path(), BenchmarkFormat::Spider),
            Err(CorpusError::MissingFile(_))
        ));
        assert!(matches!(
            "sparql".parse::<BenchmarkFormat>(),
            Err(CorpusError::UnknownFormat(_))
        ));
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            detect_format(empty.path()),
            Err(CorpusError::UnknownFormat(_))
        ));
    }

    #[test]
    fn bird_layout() {
        let dir = tempfile::tempdir().unwrap();
        write(&dir.path().join("dev_tables.json"), &catalog());
        write(
            &dir.path().join("dev.json"),
            &json!([{"question_id": 7, "db_id": "concert_singer", "question": "q", "SQL": "SELECT 1",
                     "evidence": "singers are people", "difficulty": "challenging"}]),
        );
        let db = dir
            .path()
            .join("dev_databases/concert_singer/concert_singer.sqlite");
        fs::create_dir_all(db.parent().unwrap()).unwrap();
        rusqlite::Connection::open(&db)
            .unwrap()
            .execute_batch("CREATE TABLE t (a INT)")
            .unwrap();
        assert_eq!(detect_format(dir.path()).unwrap(), BenchmarkFormat::Bird);
        let set = load_benchmark(dir.path(), BenchmarkFormat::Bird).unwrap();
        let item = &set.items[0];
        assert_eq!(item.item_id, "7");
        assert_eq!(item.evidence.as_deref(), Some("singers are people"));
        assert_eq!(item.difficulty, Difficulty::Hard);
        assert_eq!(item.gold_sql.as_deref(), Some("SELECT 1"));
    }

    pub(crate) fn record(
        item: &str,
        stage: &str,
        weights: Vec<f64>,
        losses: Vec<u8>,
        alg: bool,
    ) -> RunRecord {
        RunRecord {
            run_id: "r".into(),
            item_id: item.into(),
            stage: stage.into(),
            db_id: "d".into(),
            difficulty: Difficulty::Easy,
            experts: vec!["a".into(), "b".into()],
            phases: Vec::new(),
            votes: VoteStrategy::ALL
                .iter()
                .map(|&s| StrategyRecord {
                    strategy: s,
                    outcome: None,
                    selected_sql: None,
                    correct: !alg,
                    losses: losses.clone(),
                    algorithm_loss: alg,
                    weights_after: weights.clone(),
                })
                .collect(),
            expert_correct: losses.iter().map(|&l| l == 0).collect(),
            failure: None,
            episodes: Vec::new(),
            started_ms: 0,
            finished_ms: 0,
        }
    }

    #[test]
    fn store_roundtrip_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let mut store = RunStore::open(&path).unwrap();
        let r = record("i0", "s1", vec![1.0, 0.9], vec![0, 1], false);
        store.record_round(&r).unwrap();
        assert_eq!(store.records().unwrap(), vec![r.clone()]);
        assert!(matches!(
            store.record_round(&r),
            Err(StoreError::DuplicateKey { .. })
        ));
        drop(store);
        let mut reopened = RunStore::open(&path).unwrap();
        assert!(matches!(
            reopened.record_round(&r),
            Err(StoreError::DuplicateKey { .. })
        ));
    }

    #[test]
    fn reports() {
        let recs = vec![
            record("i0", "s1", vec![1.0, 0.9], vec![0, 1], false),
            record("i1", "s1", vec![1.0, 0.81], vec![0, 1], true),
            record("i2", "s1", vec![0.9, 0.81], vec![1, 0], false),
        ];
        let traj = export_report(
            &recs,
            ReportKind::WeightTrajectory,
            &ReportFilter::default(),
        )
        .unwrap();
        let lines: Vec<&str> = traj.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "round,a,b");
        assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 3));
        let regret =
            export_report(&recs, ReportKind::RegretSeries, &ReportFilter::default()).unwrap();
        let lines: Vec<&str> = regret.lines().collect();
        assert_eq!(
            lines[0],
            "round,algorithm,mistakes,best_expert_mistakes,avg_regret"
        );
        assert_eq!(lines[4], "2,wma,1,0,0.500000");
        assert_eq!(lines[7], "3,wma,1,1,0.000000");
        let acc =
            export_report(&recs, ReportKind::AccuracyTable, &ReportFilter::default()).unwrap();
        assert!(acc.contains("s1,a,all,2,3,0.6667"));
        assert!(acc.contains("s1,wma,easy,2,3,0.6667"));
        assert!(matches!(
            export_report(&[], ReportKind::AccuracyTable, &ReportFilter::default()),
            Err(StoreError::EmptyStore)
        ));
    }
}
