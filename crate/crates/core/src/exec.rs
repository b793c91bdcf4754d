//! Read-only SQL execution, error taxonomy and execution-accuracy matching.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rusqlite::hooks::{AuthAction, AuthContext, Authorization};
use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sqlparser::ast::Statement;
use sqlparser::dialect::SQLiteDialect;
use sqlparser::parser::Parser;
use thiserror::Error;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_MAX_ROWS: usize = 1_000_000;

/// Relative tolerance used when deciding that a real is "really" an integer.
const INTEGRAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("database file not found: {0}")]
    NotFound(PathBuf),
    #[error("database unreachable: {0}")]
    Unreachable(String),
    #[error("result is not a rows outcome")]
    NotRows,
}

/// A single cell value as returned by the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob { blob: String },
}

impl Value {
    fn from_ref(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => Value::Null,
            ValueRef::Integer(i) => Value::Integer(i),
            ValueRef::Real(r) => Value::Real(r),
            ValueRef::Text(t) => Value::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Value::Blob {
                blob: hex::encode(b),
            },
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    /// Canonical encoding used for result comparison.
    ///
    /// Reals within `INTEGRAL_TOLERANCE` (relative) of a non-zero integer
    /// compare as that integer; other reals are rounded to seven significant
    /// digits. Text compares byte-wise and NULL only equals NULL.
    pub fn canonical(&self) -> String {
        match self {
            Value::Null => "N".to_string(),
            Value::Integer(i) => format!("I{i}"),
            Value::Real(x) => canonical_real(*x),
            Value::Text(s) => format!("T{}:{}", s.len(), s),
            Value::Blob { blob } => format!("B{blob}"),
        }
    }
}

fn canonical_real(x: f64) -> String {
    if !x.is_finite() {
        return format!("R{x}");
    }
    let rounded = x.round();
    let in_range = rounded.abs() < 9.2e18;
    if in_range
        && (x == rounded || (rounded != 0.0 && (x - rounded).abs() <= INTEGRAL_TOLERANCE * x.abs()))
    {
        return format!("I{}", rounded as i64);
    }
    format!("R{x:.6e}")
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("NULL"),
            Value::Integer(i) => write!(f, "{i}"),
            Value::Real(r) => write!(f, "{r}"),
            Value::Text(s) => f.write_str(s),
            Value::Blob { blob } => write!(f, "x'{blob}'"),
        }
    }
}

/// The error taxonomy shared by the refinement loop and the agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorKind {
    Syntax,
    TableNotFound,
    ColumnNotFound,
    TypeMismatch,
    AmbiguousColumn,
    Timeout,
    NoResult,
    Other,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 8] = [
        ErrorKind::Syntax,
        ErrorKind::TableNotFound,
        ErrorKind::ColumnNotFound,
        ErrorKind::TypeMismatch,
        ErrorKind::AmbiguousColumn,
        ErrorKind::Timeout,
        ErrorKind::NoResult,
        ErrorKind::Other,
    ];

    /// Label as it appears on the `[Detected Error Type:]` prompt line.
    pub fn label(self) -> &'static str {
        match self {
            ErrorKind::Syntax => "SyntaxError",
            ErrorKind::TableNotFound => "TableNotFound",
            ErrorKind::ColumnNotFound => "ColumnNotFound",
            ErrorKind::TypeMismatch => "TypeMismatch",
            ErrorKind::AmbiguousColumn => "AmbiguousColumn",
            ErrorKind::Timeout => "Timeout",
            ErrorKind::NoResult => "NoResult",
            ErrorKind::Other => "OtherError",
        }
    }

    pub fn is_schema_error(self) -> bool {
        matches!(self, ErrorKind::TableNotFound | ErrorKind::ColumnNotFound)
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Map an engine message (or a successful-but-empty execution) onto the
/// taxonomy. Total: anything unmatched is `Other`.
pub fn classify_error(message: &str, empty: bool) -> ErrorKind {
    if empty {
        return ErrorKind::NoResult;
    }
    let m = message.to_ascii_lowercase();
    let has = |needles: &[&str]| needles.iter().any(|n| m.contains(n));

    if has(&[
        "interrupted",
        "timed out",
        "timeout exceeded",
        "query timeout",
    ]) {
        ErrorKind::Timeout
    } else if has(&[
        "ambiguous column",
        "column reference is ambiguous",
        "is ambiguous",
    ]) {
        ErrorKind::AmbiguousColumn
    } else if has(&[
        "no such table",
        "table not found",
        "not found: table",
        "unknown table",
        "object does not exist",
    ]) || (m.contains("relation") && m.contains("does not exist"))
    {
        ErrorKind::TableNotFound
    } else if has(&[
        "no such column",
        "column not found",
        "unknown column",
        "unrecognized name",
        "invalid identifier",
    ]) || (m.contains("column") && m.contains("does not exist"))
    {
        ErrorKind::ColumnNotFound
    } else if has(&[
        "syntax error",
        "incomplete input",
        "unrecognized token",
        "parse error",
        "expected end of input",
    ]) {
        ErrorKind::Syntax
    } else if has(&[
        "datatype mismatch",
        "type mismatch",
        "cannot be cast",
        "could not cast",
        "invalid cast",
    ]) {
        ErrorKind::TypeMismatch
    } else {
        ErrorKind::Other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Rows,
    Error,
}

/// The result of running one statement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecResult {
    pub outcome: Outcome,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<ErrorKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
    /// Wall-clock time; diagnostic only, not persisted and not compared.
    #[serde(skip)]
    pub elapsed: Duration,
}

impl PartialEq for ExecResult {
    fn eq(&self, other: &Self) -> bool {
        self.outcome == other.outcome
            && self.columns == other.columns
            && self.rows == other.rows
            && self.error_kind == other.error_kind
            && self.error_message == other.error_message
            && self.truncated == other.truncated
    }
}

impl ExecResult {
    pub fn rows(columns: Vec<String>, rows: Vec<Vec<Value>>) -> Self {
        ExecResult {
            outcome: Outcome::Rows,
            columns,
            rows,
            error_kind: None,
            error_message: None,
            truncated: false,
            elapsed: Duration::ZERO,
        }
    }

    pub fn error(kind: ErrorKind, message: impl Into<String>) -> Self {
        ExecResult {
            outcome: Outcome::Error,
            columns: Vec::new(),
            rows: Vec::new(),
            error_kind: Some(kind),
            error_message: Some(message.into()),
            truncated: false,
            elapsed: Duration::ZERO,
        }
    }

    pub fn is_rows(&self) -> bool {
        self.outcome == Outcome::Rows
    }

    /// Rows outcome with at least one row: the only state that does not
    /// trigger refinement.
    pub fn is_success(&self) -> bool {
        self.is_rows() && !self.rows.is_empty()
    }

    /// Error kind including the `NoResult` pseudo-error for empty results.
    pub fn failure_kind(&self) -> Option<ErrorKind> {
        match self.outcome {
            Outcome::Error => Some(self.error_kind.unwrap_or(ErrorKind::Other)),
            Outcome::Rows if self.rows.is_empty() => Some(ErrorKind::NoResult),
            Outcome::Rows => None,
        }
    }

    /// Human-readable observation text for prompts.
    pub fn observation(&self, max_rows: usize) -> String {
        match self.outcome {
            Outcome::Error => self.error_message.clone().unwrap_or_default(),
            Outcome::Rows if self.rows.is_empty() => {
                "Query executed successfully but returned no rows.".to_string()
            }
            Outcome::Rows => {
                let mut out = self.columns.join(",");
                for row in self.rows.iter().take(max_rows) {
                    out.push('\n');
                    out.push_str(
                        &row.iter()
                            .map(Value::to_string)
                            .collect::<Vec<_>>()
                            .join(","),
                    );
                }
                if self.rows.len() > max_rows {
                    out.push_str(&format!("\n... ({} rows total)", self.rows.len()));
                }
                out
            }
        }
    }

    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| match v {
                Value::Null => String::new(),
                other => other.to_string(),
            }))?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

fn canonical_rows(result: &ExecResult, order_sensitive: bool) -> Vec<String> {
    let mut rows: Vec<String> = result
        .rows
        .iter()
        .map(|r| r.iter().map(Value::canonical).collect::<Vec<_>>().join("|"))
        .collect();
    if !order_sensitive {
        rows.sort();
    }
    rows
}

/// Execution-accuracy match: same column count and equal row multisets
/// (or sequences when `order_sensitive`), after value normalization.
pub fn execution_match(pred: &ExecResult, gold: &ExecResult, order_sensitive: bool) -> bool {
    if !pred.is_rows() || !gold.is_rows() {
        return false;
    }
    if pred.columns.len() != gold.columns.len() || pred.rows.len() != gold.rows.len() {
        return false;
    }
    canonical_rows(pred, order_sensitive) == canonical_rows(gold, order_sensitive)
}

/// Digest of a rows outcome; equal exactly when [`execution_match`] holds.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ResultFingerprint(pub String);

impl fmt::Display for ResultFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn fingerprint(
    result: &ExecResult,
    order_sensitive: bool,
) -> Result<ResultFingerprint, ExecError> {
    if !result.is_rows() {
        return Err(ExecError::NotRows);
    }
    let mut h = Sha256::new();
    h.update(if order_sensitive { b"seq\n" } else { b"set\n" });
    h.update(result.columns.len().to_le_bytes());
    for row in canonical_rows(result, order_sensitive) {
        h.update((row.len() as u64).to_le_bytes());
        h.update(row.as_bytes());
    }
    Ok(ResultFingerprint(hex::encode(h.finalize())))
}

/// True when the statement has an ORDER BY at its outermost level.
pub fn has_top_level_order_by(sql: &str) -> bool {
    if let Ok(stmts) = Parser::parse_sql(&SQLiteDialect {}, sql) {
        if let Some(Statement::Query(q)) = stmts.first() {
            return q.order_by.as_ref().is_some_and(|o| !o.exprs.is_empty());
        }
    }
    // Unparseable: look for ORDER BY outside parentheses and quotes.
    let lower = sql.to_ascii_lowercase();
    let bytes = lower.as_bytes();
    let mut depth = 0i32;
    let mut quote: Option<u8> = None;
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None => match c {
                b'\'' | b'"' | b'`' => quote = Some(c),
                b'(' => depth += 1,
                b')' => depth -= 1,
                b'o' if depth == 0 && lower[i..].starts_with("order") => {
                    let rest = lower[i + 5..].trim_start();
                    let boundary = i == 0 || !bytes[i - 1].is_ascii_alphanumeric();
                    if boundary && rest.starts_with("by") {
                        return true;
                    }
                }
                _ => {}
            },
        }
        i += 1;
    }
    false
}

#[derive(Debug, Clone, Copy)]
pub struct ExecLimits {
    pub timeout: Duration,
    pub max_rows: usize,
}

impl Default for ExecLimits {
    fn default() -> Self {
        ExecLimits {
            timeout: DEFAULT_TIMEOUT,
            max_rows: DEFAULT_MAX_ROWS,
        }
    }
}

/// Handle to a single-file SQLite database. Every query opens its own
/// read-only connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Database {
    path: PathBuf,
    pub max_rows: usize,
}

impl Database {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ExecError> {
        let path = path.as_ref().to_path_buf();
        if !path.is_file() {
            return Err(ExecError::NotFound(path));
        }
        let db = Database {
            path,
            max_rows: DEFAULT_MAX_ROWS,
        };
        db.connect()
            .map_err(|e| ExecError::Unreachable(e.to_string()))?;
        Ok(db)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub(crate) fn connect(&self) -> rusqlite::Result<Connection> {
        Connection::open_with_flags(
            &self.path,
            OpenFlags::SQLITE_OPEN_READ_ONLY
                | OpenFlags::SQLITE_OPEN_NO_MUTEX
                | OpenFlags::SQLITE_OPEN_URI,
        )
    }

    /// Run `sql` with a deadline. Never fails: every problem is encoded in the
    /// returned [`ExecResult`].
    pub fn execute(&self, sql: &str, timeout: Duration) -> ExecResult {
        self.execute_traced(sql, timeout).0
    }

    /// Like [`Database::execute`], also returning the base tables the engine
    /// actually read.
    pub fn execute_traced(&self, sql: &str, timeout: Duration) -> (ExecResult, BTreeSet<String>) {
        let start = Instant::now();
        let touched = Arc::new(Mutex::new(BTreeSet::new()));
        let mut result = self.run(sql, timeout, Arc::clone(&touched));
        result.elapsed = start.elapsed();
        let tables = touched.lock().map(|t| t.clone()).unwrap_or_default();
        (result, tables)
    }

    fn run(
        &self,
        sql: &str,
        timeout: Duration,
        touched: Arc<Mutex<BTreeSet<String>>>,
    ) -> ExecResult {
        let conn = match self.connect() {
            Ok(c) => c,
            Err(e) => {
                return ExecResult::error(ErrorKind::Other, format!("database unreachable: {e}"))
            }
        };

        let write_attempt = Arc::new(AtomicBool::new(false));
        let write_flag = Arc::clone(&write_attempt);
        conn.authorizer(Some(move |ctx: AuthContext<'_>| match ctx.action {
            AuthAction::Select | AuthAction::Function { .. } | AuthAction::Recursive => {
                Authorization::Allow
            }
            AuthAction::Read { table_name, .. } => {
                if let Ok(mut t) = touched.lock() {
                    t.insert(table_name.to_string());
                }
                Authorization::Allow
            }
            _ => {
                write_flag.store(true, Ordering::SeqCst);
                Authorization::Deny
            }
        }));

        let timed_out = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&timed_out);
        let deadline = Instant::now() + timeout;
        conn.progress_handler(
            1_000,
            Some(move || {
                if Instant::now() >= deadline {
                    flag.store(true, Ordering::SeqCst);
                    true
                } else {
                    false
                }
            }),
        );

        let fail = |e: rusqlite::Error| -> ExecResult {
            let msg = e.to_string();
            if timed_out.load(Ordering::SeqCst) {
                ExecResult::error(
                    ErrorKind::Timeout,
                    format!("query interrupted after {timeout:?}: {msg}"),
                )
            } else if write_attempt.load(Ordering::SeqCst) {
                ExecResult::error(
                    ErrorKind::Other,
                    format!("statement rejected (read-only database): {msg}"),
                )
            } else {
                ExecResult::error(classify_error(&msg, false), msg)
            }
        };

        let mut stmt = match conn.prepare(sql) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        if !stmt.readonly() {
            return ExecResult::error(
                ErrorKind::Other,
                "statement rejected (read-only database): not a query",
            );
        }
        let columns: Vec<String> = stmt
            .column_names()
            .into_iter()
            .map(str::to_string)
            .collect();
        let ncols = columns.len();
        let mut rows_iter = match stmt.query([]) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
        let mut rows = Vec::new();
        let mut truncated = false;
        loop {
            match rows_iter.next() {
                Ok(Some(row)) => {
                    if rows.len() >= self.max_rows {
                        truncated = true;
                        break;
                    }
                    let mut vals = Vec::with_capacity(ncols);
                    for i in 0..ncols {
                        match row.get_ref(i) {
                            Ok(v) => vals.push(Value::from_ref(v)),
                            Err(e) => return fail(e),
                        }
                    }
                    rows.push(vals);
                }
                Ok(None) => break,
                Err(e) => return fail(e),
            }
        }
        let mut out = ExecResult::rows(columns, rows);
        out.truncated = truncated;
        out
    }
}
