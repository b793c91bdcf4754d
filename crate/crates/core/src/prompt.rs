//! Prompt assembly for PreSQL, PostSQL and refinement rounds, plus
//! few-shot demonstration selection.
//!
//! Generation prompts use fixed `### ` section headers in this order:
//! Instruction, Database Schema, Cell Value References, Examples, Question.
//! Refinement prompts use bracketed headers (`[Original SQL]`,
//! `[Previous Execution Result]`, `[Detected Error Type:]`, ...).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::ErrorKind;

pub const INSTRUCTION_HEADER: &str = "### Instruction";
pub const SCHEMA_HEADER: &str = "### Database Schema";
pub const CELLS_HEADER: &str = "### Cell Value References";
pub const EXAMPLES_HEADER: &str = "### Examples";
pub const QUESTION_HEADER: &str = "### Question";

pub const DEFAULT_K: usize = 9;

pub const DEFAULT_INSTRUCTION: &str = "\
Translate the question into one SQLite query over the database below.
Use only tables and columns that appear in the schema.
Among equivalent formulations, choose the one that minimizes SQL execution time.
Return only the SQL query inside a ```sql fenced block.";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("missing prompt section: {0}")]
    MissingSection(&'static str),
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    PreSql,
    PostSql,
    Refine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub question: String,
    pub sql: String,
}

impl Demonstration {
    pub fn new(question: impl Into<String>, sql: impl Into<String>) -> Self {
        Demonstration {
            question: question.into(),
            sql: sql.into(),
        }
    }
}

/// Error context for a refinement prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineSection {
    pub dialect: String,
    pub db_id: String,
    /// The prompt that produced the failing SQL.
    pub prior_context: String,
    pub original_sql: String,
    /// Engine error text, or the empty-result observation.
    pub error_message: String,
    pub error_kind: ErrorKind,
    pub critique_feedback: Option<String>,
    pub linked_schema: Option<String>,
    pub expected_format: Option<String>,
    /// Agent-only `[Required Action Format]` block.
    pub action_format: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub kind: PromptKind,
    pub instruction: String,
    pub schema_text: String,
    pub cell_samples: String,
    pub demonstrations: Vec<Demonstration>,
    pub question: String,
    pub evidence: Option<String>,
    pub refine: Option<RefineSection>,
}

impl PromptSpec {
    pub fn generation(
        kind: PromptKind,
        schema_text: impl Into<String>,
        question: impl Into<String>,
    ) -> Self {
        PromptSpec {
            kind,
            instruction: DEFAULT_INSTRUCTION.to_string(),
            schema_text: schema_text.into(),
            cell_samples: String::new(),
            demonstrations: Vec::new(),
            question: question.into(),
            evidence: None,
            refine: None,
        }
    }

    pub fn refinement(section: RefineSection) -> Self {
        PromptSpec {
            kind: PromptKind::Refine,
            instruction: String::new(),
            schema_text: String::new(),
            cell_samples: String::new(),
            demonstrations: Vec::new(),
            question: String::new(),
            evidence: None,
            refine: Some(section),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            temperature: 0.0,
            max_tokens: 200,
            seed: None,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), PromptError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(PromptError::InvalidParams(format!(
                "temperature {}",
                self.temperature
            )));
        }
        if self.max_tokens < 1 {
            return Err(PromptError::InvalidParams(
                "max_tokens must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

pub fn build_prompt(spec: &PromptSpec) -> Result<String, PromptError> {
    match spec.kind {
        PromptKind::PreSql | PromptKind::PostSql => render_generation(spec),
        PromptKind::Refine => {
            let section = spec
                .refine
                .as_ref()
                .ok_or(PromptError::MissingSection("refine"))?;
            render_refine(section)
        }
    }
}

fn render_generation(spec: &PromptSpec) -> Result<String, PromptError> {
    if spec.schema_text.trim().is_empty() {
        return Err(PromptError::MissingSection("schema"));
    }
    if spec.question.trim().is_empty() {
        return Err(PromptError::MissingSection("question"));
    }
    let mut out = String::new();
    out.push_str(INSTRUCTION_HEADER);
    out.push('\n');
    out.push_str(spec.instruction.trim_end());
    out.push_str("\n\n");
    out.push_str(SCHEMA_HEADER);
    out.push('\n');
    out.push_str(spec.schema_text.trim_end());
    out.push_str("\n\n");
    if !spec.cell_samples.trim().is_empty() {
        out.push_str(CELLS_HEADER);
        out.push('\n');
        out.push_str(spec.cell_samples.trim_end());
        out.push_str("\n\n");
    }
    if !spec.demonstrations.is_empty() {
        out.push_str(EXAMPLES_HEADER);
        out.push('\n');
        for d in &spec.demonstrations {
            out.push_str("-- Question: ");
            out.push_str(&one_line(&d.question));
            out.push('\n');
            out.push_str(d.sql.trim());
            out.push_str(";\n\n");
        }
    }
    out.push_str(QUESTION_HEADER);
    out.push('\n');
    if let Some(ev) = spec.evidence.as_deref().filter(|e| !e.trim().is_empty()) {
        out.push_str("-- Evidence: ");
        out.push_str(&one_line(ev));
        out.push('\n');
    }
    out.push_str("-- Question: ");
    out.push_str(&one_line(&spec.question));
    out.push('\n');
    Ok(out)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Strategy menu offered for each error class.
pub fn strategy_menu(kind: ErrorKind) -> &'static [&'static str] {
    match kind {
        ErrorKind::Syntax => &[
            "Check keyword spelling and clause order.",
            "Balance parentheses and quotes.",
            "Remove constructs the target dialect does not support.",
            "Rewrite the query in its simplest equivalent form.",
        ],
        ErrorKind::TableNotFound => &[
            "Compare every table name against the schema exactly.",
            "Replace misspelled or pluralized table names.",
            "Check that tables defined in WITH clauses are in scope where used.",
        ],
        ErrorKind::ColumnNotFound => &[
            "Verify each column belongs to the table it is qualified with.",
            "Add the join that provides the missing column.",
            "Check select-list aliases used in other clauses.",
        ],
        ErrorKind::TypeMismatch => &[
            "Cast operands to a common type.",
            "Compare dates and numbers in a consistent format.",
            "Quote text literals and leave numeric literals unquoted.",
        ],
        ErrorKind::AmbiguousColumn => &[
            "Qualify every column with its table alias.",
            "Check join conditions for column names shared by several tables.",
        ],
        ErrorKind::Timeout => &[
            "Remove unnecessary joins and subqueries.",
            "Filter rows before aggregating.",
            "Replace correlated subqueries with joins.",
        ],
        ErrorKind::NoResult => &[
            "Relax filtering conditions.",
            "Check literal values against the sampled cell values, including case.",
            "Verify the join keys connect the intended rows.",
            "Check LIKE patterns and date formats against stored data.",
        ],
        ErrorKind::Other => &[
            "Try simplifying query structure.",
            "Focus on filtering conditions.",
            "Try SELECT with minimal columns first.",
            "Double-check all referenced schema components.",
        ],
    }
}

/// One-line hint appended after the engine message.
pub fn error_hint(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Syntax => "The query could not be parsed.",
        ErrorKind::TableNotFound => "A referenced table does not exist in the database.",
        ErrorKind::ColumnNotFound => {
            "A referenced column does not exist in the table it was looked up in."
        }
        ErrorKind::TypeMismatch => "Operand types are incompatible.",
        ErrorKind::AmbiguousColumn => "A column name matches more than one table in scope.",
        ErrorKind::Timeout => "The query exceeded the execution time limit.",
        ErrorKind::NoResult => "The query ran but returned no rows.",
        ErrorKind::Other => {
            "The error did not match a known category. Re-check syntax and schema alignment."
        }
    }
}

fn render_refine(r: &RefineSection) -> Result<String, PromptError> {
    if r.original_sql.trim().is_empty() {
        return Err(PromptError::MissingSection("original SQL"));
    }
    if r.error_message.trim().is_empty() {
        return Err(PromptError::MissingSection("error message"));
    }
    let mut out = String::new();
    out.push_str(&format!(
        "-- Target SQL Dialect: {}\n",
        r.dialect.to_uppercase()
    ));
    out.push_str(&format!(
        "[Database Context]\nCurrent Database: {}\n\n",
        r.db_id
    ));
    if !r.prior_context.trim().is_empty() {
        out.push_str("[Prior Prompt]\n");
        out.push_str(r.prior_context.trim_end());
        out.push_str("\n\n");
    }
    if let Some(linked) = r.linked_schema.as_deref().filter(|s| !s.trim().is_empty()) {
        out.push_str("[Schema Linking]\nOnly these tables and columns are relevant:\n");
        out.push_str(linked.trim_end());
        out.push_str("\n\n");
    }
    out.push_str("[Original SQL]\n");
    out.push_str(r.original_sql.trim());
    out.push_str("\n\n[Previous Execution Result]\n");
    out.push_str(r.error_message.trim_end());
    out.push('\n');
    out.push_str(error_hint(r.error_kind));
    out.push_str("\n\n");
    if let Some(fb) = r
        .critique_feedback
        .as_deref()
        .filter(|s| !s.trim().is_empty())
    {
        out.push_str("[Critique Feedback]\n");
        out.push_str(fb.trim_end());
        out.push_str("\n\n");
    }
    out.push_str(&format!(
        "[Detected Error Type:] {}\n",
        r.error_kind.label()
    ));
    out.push_str("Select one of the following strategies to apply:\n");
    for (i, s) in strategy_menu(r.error_kind).iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, s));
    }
    out.push_str("Explain your strategy choice and apply it to refine the SQL.\n\n");
    out.push_str("[Expected Output Format]\n");
    match r
        .expected_format
        .as_deref()
        .filter(|s| !s.trim().is_empty())
    {
        Some(f) => {
            out.push_str(f.trim_end());
            out.push('\n');
        }
        None => out.push_str("Return the corrected SQL query inside a ```sql fenced block.\n"),
    }
    if let Some(action) = r.action_format.as_deref() {
        out.push_str("\n[Required Action Format]\n");
        out.push_str(action.trim_end());
        out.push('\n');
    }
    Ok(out)
}

/// Rough token count: whitespace-separated words.
pub fn approx_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Scores how similar a document is to a query; larger is more similar.
pub trait SimilarityProvider: Send + Sync {
    fn similarity(&self, query: &str, document: &str) -> f64;
}

/// Cosine similarity over hashed bag-of-words vectors. Tokens are
/// lowercase alphanumeric runs, hashed with FNV-1a into `dim` buckets.
#[derive(Debug, Clone)]
pub struct HashedBowSimilarity {
    pub dim: usize,
}

impl Default for HashedBowSimilarity {
    fn default() -> Self {
        HashedBowSimilarity { dim: 1024 }
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl HashedBowSimilarity {
    pub fn embed(&self, text: &str) -> Vec<f64> {
        let dim = self.dim.max(1);
        let mut v = vec![0.0; dim];
        for tok in tokenize(text) {
            v[(fnv1a(tok.as_bytes()) % dim as u64) as usize] += 1.0;
        }
        v
    }
}

impl SimilarityProvider for HashedBowSimilarity {
    fn similarity(&self, query: &str, document: &str) -> f64 {
        let a = self.embed(query);
        let b = self.embed(document);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }
}

/// Indices of the `k` highest-scoring documents, descending, ties by index.
pub fn rank_documents(
    query: &str,
    docs: &[&str],
    k: usize,
    provider: &dyn SimilarityProvider,
) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| (i, provider.similarity(query, d)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(i, _)| i).collect()
}

/// Top-k demonstrations by question similarity. A pool entry whose question
/// equals the target question exactly is never returned.
pub fn select_few_shots(
    question: &str,
    pool: &[Demonstration],
    k: usize,
    provider: &dyn SimilarityProvider,
) -> Vec<Demonstration> {
    let eligible: Vec<&Demonstration> = pool.iter().filter(|d| d.question != question).collect();
    let docs: Vec<&str> = eligible.iter().map(|d| d.question.as_str()).collect();
    rank_documents(question, &docs, k, provider)
        .into_iter()
        .map(|i| eligible[i].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool() -> Vec<Demonstration> {
        vec![
            Demonstration::new("How many singers are there?", "SELECT count(*) FROM singer"),
            Demonstration::new(
                "List the names of all stadiums.",
                "SELECT name FROM stadium",
            ),
            Demonstration::new(
                "How many concerts are there?",
                "SELECT count(*) FROM concert",
            ),
        ]
    }

    #[test]
    fn few_shot_excludes_exact_question() {
        let p = pool();
        let got = select_few_shots(
            "How many singers are there?",
            &p,
            1,
            &HashedBowSimilarity::default(),
        );
        assert_eq!(got, vec![p[2].clone()]);
        assert!(select_few_shots("x", &p, 0, &HashedBowSimilarity::default()).is_empty());
        assert_eq!(
            select_few_shots("anything", &p, DEFAULT_K, &HashedBowSimilarity::default()).len(),
            3
        );
    }

    #[test]
    fn ranking_prefers_overlap_then_index() {
        let docs = [
            "apples and pears",
            "sql join syntax for dates",
            "weather today",
        ];
        let order = rank_documents(
            "date syntax in sql",
            &docs,
            3,
            &HashedBowSimilarity::default(),
        );
        assert_eq!(order[0], 1);
        let tied = rank_documents("zzz", &docs, 3, &HashedBowSimilarity::default());
        assert_eq!(tied, vec![0, 1, 2]);
    }

    #[test]
    fn generation_layout() {
        let mut spec =
            PromptSpec::generation(PromptKind::PreSql, "CREATE TABLE t (a INT);", "What is a?");
        spec.demonstrations = pool()[..2].to_vec();
        let text = build_prompt(&spec).unwrap();
        let positions: Vec<usize> = [
            INSTRUCTION_HEADER,
            SCHEMA_HEADER,
            EXAMPLES_HEADER,
            QUESTION_HEADER,
        ]
        .iter()
        .map(|h| text.find(h).unwrap())
        .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(text.matches("-- Question:").count(), 3);
        assert!(text.contains("minimizes SQL execution time"));
        assert_eq!(text, build_prompt(&spec).unwrap());
        assert!(!text.contains(CELLS_HEADER));
    }

    #[test]
    fn generation_requires_schema() {
        let spec = PromptSpec::generation(PromptKind::PostSql, "  ", "q");
        assert_eq!(
            build_prompt(&spec),
            Err(PromptError::MissingSection("schema"))
        );
    }

    fn refine_section(kind: ErrorKind) -> RefineSection {
        RefineSection {
            dialect: "sqlite".into(),
            db_id: "concert_singer".into(),
            prior_context: "### Question\n-- Question: How many singers?".into(),
            original_sql: "SELECT count(*) FROM singers".into(),
            error_message: "no such table: singers".into(),
            error_kind: kind,
            critique_feedback: None,
            linked_schema: None,
            expected_format: None,
            action_format: None,
        }
    }

    #[test]
    fn refine_layout() {
        let text = build_prompt(&PromptSpec::refinement(refine_section(
            ErrorKind::TableNotFound,
        )))
        .unwrap();
        assert!(text.starts_with("-- Target SQL Dialect: SQLITE\n"));
        assert!(text.contains("no such table: singers"));
        assert!(text.contains("[Detected Error Type:] TableNotFound\n"));
        assert!(text.contains("[Original SQL]\nSELECT count(*) FROM singers\n"));
        assert!(!text.contains("[Required Action Format]"));
    }

    #[test]
    fn other_menu() {
        let text = build_prompt(&PromptSpec::refinement(refine_section(ErrorKind::Other))).unwrap();
        let expected = "[Detected Error Type:] OtherError\n\
            Select one of the following strategies to apply:\n\
            1. Try simplifying query structure.\n\
            2. Focus on filtering conditions.\n\
            3. Try SELECT with minimal columns first.\n\
            4. Double-check all referenced schema components.\n\
            Explain your strategy choice and apply it to refine the SQL.\n";
        assert!(text.contains(expected));
    }

    #[test]
    fn refine_requires_error() {
        let mut s = refine_section(ErrorKind::Syntax);
        s.error_message.clear();
        assert_eq!(
            build_prompt(&PromptSpec::refinement(s)),
            Err(PromptError::MissingSection("error message"))
        );
        let mut spec = PromptSpec::refinement(refine_section(ErrorKind::Syntax));
        spec.refine = None;
        assert!(build_prompt(&spec).is_err());
    }

    #[test]
    fn params() {
        assert!(GenerationParams::default().validate().is_ok());
        assert!(GenerationParams {
            temperature: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GenerationParams {
            max_tokens: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GenerationParams {
            temperature: f64::NAN,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
