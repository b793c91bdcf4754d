//! Database schemas: catalog representation, prompt rendering, cell sampling
//! and pruning to a linked sub-schema.
//!
//! Identifiers are compared case-insensitively; original casing is kept for
//! rendering.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{Database, Value};

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("duplicate table name: {0}")]
    DuplicateTable(String),
    #[error("duplicate column {column} in table {table}")]
    DuplicateColumn { table: String, column: String },
    #[error(
        "foreign key {table}.{column} -> {foreign_table}.{foreign_column} has a missing endpoint"
    )]
    DanglingForeignKey {
        table: String,
        column: String,
        foreign_table: String,
        foreign_column: String,
    },
    #[error("sample row for table {table} has {got} values, expected {expected}")]
    SampleArity {
        table: String,
        got: usize,
        expected: usize,
    },
    #[error("database unreachable: {0}")]
    DatabaseUnreachable(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum PruneError {
    #[error("link set is empty; use the full schema instead")]
    EmptyLink,
    #[error("linked table not in schema: {0}")]
    UnknownTable(String),
    #[error("linked column not in schema: {0}.{1}")]
    UnknownColumn(String, String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub declared_type: String,
    pub is_primary_key: bool,
}

impl ColumnDef {
    pub fn new(name: impl Into<String>, declared_type: impl Into<String>) -> Self {
        ColumnDef {
            name: name.into(),
            declared_type: declared_type.into(),
            is_primary_key: false,
        }
    }

    pub fn primary(mut self) -> Self {
        self.is_primary_key = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKey {
    pub column: String,
    pub foreign_table: String,
    pub foreign_column: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
    #[serde(default)]
    pub foreign_keys: Vec<ForeignKey>,
    /// Sampled cell rows, one value per column.
    #[serde(default)]
    pub samples: Vec<Vec<Value>>,
}

impl TableDef {
    pub fn new(name: impl Into<String>, columns: Vec<ColumnDef>) -> Self {
        TableDef {
            name: name.into(),
            columns,
            foreign_keys: Vec::new(),
            samples: Vec::new(),
        }
    }

    pub fn with_foreign_key(
        mut self,
        column: &str,
        foreign_table: &str,
        foreign_column: &str,
    ) -> Self {
        self.foreign_keys.push(ForeignKey {
            column: column.to_string(),
            foreign_table: foreign_table.to_string(),
            foreign_column: foreign_column.to_string(),
        });
        self
    }

    pub fn column(&self, name: &str) -> Option<&ColumnDef> {
        self.columns
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
    }

    pub fn primary_key(&self) -> impl Iterator<Item = &ColumnDef> {
        self.columns.iter().filter(|c| c.is_primary_key)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseSchema {
    pub db_id: String,
    pub tables: Vec<TableDef>,
}

impl DatabaseSchema {
    /// Build and validate a schema.
    pub fn new(db_id: impl Into<String>, tables: Vec<TableDef>) -> Result<Self, SchemaError> {
        let schema = DatabaseSchema {
            db_id: db_id.into(),
            tables,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut seen = BTreeSet::new();
        for t in &self.tables {
            if !seen.insert(t.name.to_lowercase()) {
                return Err(SchemaError::DuplicateTable(t.name.clone()));
            }
            let mut cols = BTreeSet::new();
            for c in &t.columns {
                if !cols.insert(c.name.to_lowercase()) {
                    return Err(SchemaError::DuplicateColumn {
                        table: t.name.clone(),
                        column: c.name.clone(),
                    });
                }
            }
            for row in &t.samples {
                if row.len() != t.columns.len() {
                    return Err(SchemaError::SampleArity {
                        table: t.name.clone(),
                        got: row.len(),
                        expected: t.columns.len(),
                    });
                }
            }
        }
        for t in &self.tables {
            for fk in &t.foreign_keys {
                let ok = t.column(&fk.column).is_some()
                    && self
                        .table(&fk.foreign_table)
                        .and_then(|ft| ft.column(&fk.foreign_column))
                        .is_some();
                if !ok {
                    return Err(SchemaError::DanglingForeignKey {
                        table: t.name.clone(),
                        column: fk.column.clone(),
                        foreign_table: fk.foreign_table.clone(),
                        foreign_column: fk.foreign_column.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables
            .iter()
            .find(|t| t.name.eq_ignore_ascii_case(name))
    }

    /// Tables owning a column with this name, in catalog order.
    pub fn owners_of(&self, column: &str) -> Vec<&TableDef> {
        self.tables
            .iter()
            .filter(|t| t.column(column).is_some())
            .collect()
    }

    /// Read the schema straight from a SQLite file (tables, declared types,
    /// primary and foreign keys).
    pub fn introspect(db: &Database) -> Result<Self, SchemaError> {
        let unreachable = |e: rusqlite::Error| SchemaError::DatabaseUnreachable(e.to_string());
        let conn = db.connect().map_err(unreachable)?;
        let mut names = Vec::new();
        {
            let mut stmt = conn
                .prepare("SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid")
                .map_err(unreachable)?;
            let rows = stmt
                .query_map([], |r| r.get::<_, String>(0))
                .map_err(unreachable)?;
            for r in rows {
                names.push(r.map_err(unreachable)?);
            }
        }
        let mut tables = Vec::new();
        for name in names {
            let mut columns = Vec::new();
            let mut stmt = conn
                .prepare("SELECT name, type, pk FROM pragma_table_info(?1) ORDER BY cid")
                .map_err(unreachable)?;
            let rows = stmt
                .query_map([&name], |r| {
                    Ok((
                        r.get::<_, String>(0)?,
                        r.get::<_, String>(1)?,
                        r.get::<_, i64>(2)?,
                    ))
                })
                .map_err(unreachable)?;
            for r in rows {
                let (cname, ty, pk) = r.map_err(unreachable)?;
                columns.push(ColumnDef {
                    name: cname,
                    declared_type: ty,
                    is_primary_key: pk > 0,
                });
            }
            let mut table = TableDef::new(name.clone(), columns);
            let mut stmt = conn
                .prepare("SELECT \"from\", \"table\", \"to\" FROM pragma_foreign_key_list(?1) ORDER BY id, seq")
                .map_err(unreachable)?;
            let rows = stmt
                .query_map([&name], |r| {
                    Ok((
                        r.get::<_, String>(0)?,
                        r.get::<_, String>(1)?,
                        r.get::<_, Option<String>>(2)?,
                    ))
                })
                .map_err(unreachable)?;
            for r in rows {
                let (from, ftable, to) = r.map_err(unreachable)?;
                table.foreign_keys.push(ForeignKey {
                    column: from,
                    foreign_table: ftable,
                    foreign_column: to.unwrap_or_default(),
                });
            }
            tables.push(table);
        }
        // Foreign keys with an implicit target column point at the primary key.
        let snapshot = tables.clone();
        for t in &mut tables {
            for fk in &mut t.foreign_keys {
                if fk.foreign_column.is_empty() {
                    if let Some(ft) = snapshot
                        .iter()
                        .find(|x| x.name.eq_ignore_ascii_case(&fk.foreign_table))
                    {
                        if let Some(pk) = ft.primary_key().next() {
                            fk.foreign_column = pk.name.clone();
                        }
                    }
                }
            }
        }
        DatabaseSchema::new(
            db.path()
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            tables,
        )
    }

    /// Attach cell samples drawn by [`sample_cells`].
    pub fn with_samples(mut self, samples: Vec<Vec<Vec<Value>>>) -> Result<Self, SchemaError> {
        for (t, s) in self.tables.iter_mut().zip(samples) {
            t.samples = s;
        }
        self.validate()?;
        Ok(self)
    }
}

/// The set of schema elements deemed relevant by schema linking. Names use
/// the schema's original casing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedSchema {
    pub tables: BTreeSet<String>,
    pub columns: BTreeSet<(String, String)>,
}

impl LinkedSchema {
    pub fn is_empty(&self) -> bool {
        self.tables.is_empty() && self.columns.is_empty()
    }

    /// Every table and column of `schema`.
    pub fn full(schema: &DatabaseSchema) -> Self {
        let mut l = LinkedSchema::default();
        for t in &schema.tables {
            l.tables.insert(t.name.clone());
            for c in &t.columns {
                l.columns.insert((t.name.clone(), c.name.clone()));
            }
        }
        l
    }

    pub fn union(&mut self, other: &LinkedSchema) {
        self.tables.extend(other.tables.iter().cloned());
        self.columns.extend(other.columns.iter().cloned());
    }
}

fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

/// Draw up to `rows_per_table` rows per table. Sampling is driven by `seed`
/// so that a database always yields the same prompt bytes.
pub fn sample_cells(
    db: &Database,
    schema: &DatabaseSchema,
    rows_per_table: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec<Value>>>, SchemaError> {
    let unreachable = |e: rusqlite::Error| SchemaError::DatabaseUnreachable(e.to_string());
    let conn = db.connect().map_err(unreachable)?;
    let mut out = Vec::with_capacity(schema.tables.len());
    for table in &schema.tables {
        if rows_per_table == 0 || table.columns.is_empty() {
            out.push(Vec::new());
            continue;
        }
        let cols = table
            .columns
            .iter()
            .map(|c| quote_ident(&c.name))
            .collect::<Vec<_>>()
            .join(", ");
        let tname = quote_ident(&table.name);
        let count: i64 = conn
            .query_row(&format!("SELECT count(*) FROM {tname}"), [], |r| r.get(0))
            .map_err(unreachable)?;
        let count = count.max(0) as usize;
        let read_row = |r: &rusqlite::Row<'_>| -> rusqlite::Result<Vec<Value>> {
            (0..table.columns.len())
                .map(|i| Ok(value_of(r.get_ref(i)?)))
                .collect()
        };
        let mut rows = Vec::new();
        if count <= rows_per_table {
            let mut stmt = conn
                .prepare(&format!("SELECT {cols} FROM {tname}"))
                .map_err(unreachable)?;
            let it = stmt.query_map([], read_row).map_err(unreachable)?;
            for r in it {
                rows.push(r.map_err(unreachable)?);
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&table.name));
            let mut offsets = index::sample(&mut rng, count, rows_per_table).into_vec();
            offsets.sort_unstable();
            let mut stmt = conn
                .prepare(&format!("SELECT {cols} FROM {tname} LIMIT 1 OFFSET ?1"))
                .map_err(unreachable)?;
            for off in offsets {
                rows.push(
                    stmt.query_row([off as i64], read_row)
                        .map_err(unreachable)?,
                );
            }
        }
        out.push(rows);
    }
    Ok(out)
}

fn value_of(v: rusqlite::types::ValueRef<'_>) -> Value {
    use rusqlite::types::ValueRef;
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

fn name_hash(name: &str) -> u64 {
    // FNV-1a, stable across platforms and releases.
    name.to_lowercase()
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        })
}

/// One `CREATE TABLE` block per table, foreign keys as constraint comments.
/// With `include_samples`, each block is followed by its sample rows.
pub fn render_full_ddl(schema: &DatabaseSchema, include_samples: bool) -> String {
    let mut out = String::new();
    for (i, t) in schema.tables.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&render_table_ddl(t));
        if include_samples && !t.samples.is_empty() {
            out.push_str(&render_table_samples(t));
        }
    }
    out
}

fn render_table_ddl(t: &TableDef) -> String {
    let mut lines: Vec<String> = t
        .columns
        .iter()
        .map(|c| {
            if c.declared_type.is_empty() {
                format!("  {}", c.name)
            } else {
                format!("  {} {}", c.name, c.declared_type)
            }
        })
        .collect();
    let pk: Vec<&str> = t.primary_key().map(|c| c.name.as_str()).collect();
    if !pk.is_empty() {
        lines.push(format!("  PRIMARY KEY ({})", pk.join(", ")));
    }
    let mut s = format!("CREATE TABLE {} (\n{}", t.name, lines.join(",\n"));
    for fk in &t.foreign_keys {
        let _ = write!(
            s,
            "\n  -- FOREIGN KEY ({}) REFERENCES {} ({})",
            fk.column, fk.foreign_table, fk.foreign_column
        );
    }
    s.push_str("\n);\n");
    s
}

fn render_table_samples(t: &TableDef) -> String {
    let mut s = format!(
        "/*\n{} example rows from table {}:\n",
        t.samples.len(),
        t.name
    );
    s.push_str(
        &t.columns
            .iter()
            .map(|c| c.name.as_str())
            .collect::<Vec<_>>()
            .join("\t"),
    );
    s.push('\n');
    for row in &t.samples {
        s.push_str(
            &row.iter()
                .map(Value::to_string)
                .collect::<Vec<_>>()
                .join("\t"),
        );
        s.push('\n');
    }
    s.push_str("*/\n");
    s
}

/// Sample-row blocks for every table that has samples.
pub fn render_cell_samples(schema: &DatabaseSchema) -> String {
    let blocks: Vec<String> = schema
        .tables
        .iter()
        .filter(|t| !t.samples.is_empty())
        .map(render_table_samples)
        .collect();
    blocks.join("\n")
}

const COMPACT_SPECIAL: &[char] = &[',', '[', ']', '(', ')', ';', ':', '"', '\\', '\n'];

fn compact_value(v: &Value) -> String {
    let raw = v.to_string();
    if raw.is_empty() || raw.trim() != raw || raw.contains(COMPACT_SPECIAL) {
        let escaped = raw
            .replace('\\', "\\\\")
            .replace('"', "\\\"")
            .replace('\n', "\\n");
        format!("\"{escaped}\"")
    } else {
        raw
    }
}

/// `table1(col1:TYPE[v1,v2], col2:TYPE[v3]); table2(...)`, with up to
/// `values_per_column` distinct non-null sample values per column.
pub fn render_compact(schema: &DatabaseSchema, values_per_column: usize) -> String {
    schema
        .tables
        .iter()
        .map(|t| {
            let cols = t
                .columns
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    let mut vals: Vec<String> = Vec::new();
                    for row in &t.samples {
                        if vals.len() >= values_per_column {
                            break;
                        }
                        if let Some(v) = row.get(j).filter(|v| !v.is_null()) {
                            let s = compact_value(v);
                            if !vals.contains(&s) {
                                vals.push(s);
                            }
                        }
                    }
                    let ty = if c.declared_type.is_empty() {
                        "ANY"
                    } else {
                        c.declared_type.as_str()
                    };
                    format!("{}:{}[{}]", c.name, ty, vals.join(","))
                })
                .collect::<Vec<_>>()
                .join(", ");
            format!("{}({})", t.name, cols)
        })
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompactColumn {
    pub name: String,
    pub ty: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompactTable {
    pub name: String,
    pub columns: Vec<CompactColumn>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("compact schema parse error at byte {pos}: {msg}")]
pub struct CompactParseError {
    pub pos: usize,
    pub msg: &'static str,
}

/// Parse the compact schema grammar produced by [`render_compact`].
pub fn parse_compact(text: &str) -> Result<Vec<CompactTable>, CompactParseError> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    let err = |i: usize, msg| CompactParseError {
        pos: chars.get(i).map(|c| c.0).unwrap_or(text.len()),
        msg,
    };
    let skip_ws = |i: &mut usize| {
        while *i < chars.len() && chars[*i].1.is_whitespace() {
            *i += 1;
        }
    };
    let take_until = |i: &mut usize, stops: &[char]| -> String {
        let mut s = String::new();
        while *i < chars.len() && !stops.contains(&chars[*i].1) {
            s.push(chars[*i].1);
            *i += 1;
        }
        s.trim().to_string()
    };

    let mut tables = Vec::new();
    skip_ws(&mut i);
    if i == chars.len() {
        return Ok(tables);
    }
    loop {
        skip_ws(&mut i);
        let name = take_until(&mut i, &['(', ';']);
        if name.is_empty() || i >= chars.len() || chars[i].1 != '(' {
            return Err(err(i, "expected table name followed by '('"));
        }
        i += 1;
        let mut columns = Vec::new();
        skip_ws(&mut i);
        if i < chars.len() && chars[i].1 == ')' {
            i += 1;
        } else {
            loop {
                skip_ws(&mut i);
                let cname = take_until(&mut i, &[':', ')', ',', '[']);
                if cname.is_empty() || i >= chars.len() || chars[i].1 != ':' {
                    return Err(err(i, "expected column name followed by ':'"));
                }
                i += 1;
                let ty = take_until(&mut i, &['[', ',', ';']);
                if ty.is_empty() || i >= chars.len() || chars[i].1 != '[' {
                    return Err(err(i, "expected type followed by '['"));
                }
                i += 1;
                let mut values = Vec::new();
                skip_ws(&mut i);
                if i < chars.len() && chars[i].1 == ']' {
                    i += 1;
                } else {
                    loop {
                        skip_ws(&mut i);
                        if i < chars.len() && chars[i].1 == '"' {
                            i += 1;
                            let mut v = String::new();
                            loop {
                                match chars.get(i).map(|c| c.1) {
                                    None => return Err(err(i, "unterminated quoted value")),
                                    Some('"') => {
                                        i += 1;
                                        break;
                                    }
                                    Some('\\') => {
                                        match chars.get(i + 1).map(|c| c.1) {
                                            Some('n') => v.push('\n'),
                                            Some(c) => v.push(c),
                                            None => return Err(err(i, "dangling escape")),
                                        }
                                        i += 2;
                                    }
                                    Some(c) => {
                                        v.push(c);
                                        i += 1;
                                    }
                                }
                            }
                            values.push(v);
                            skip_ws(&mut i);
                        } else {
                            values.push(take_until(&mut i, &[',', ']']));
                        }
                        match chars.get(i).map(|c| c.1) {
                            Some(',') => i += 1,
                            Some(']') => {
                                i += 1;
                                break;
                            }
                            _ => return Err(err(i, "expected ',' or ']' in value list")),
                        }
                    }
                }
                columns.push(CompactColumn {
                    name: cname,
                    ty,
                    values,
                });
                skip_ws(&mut i);
                match chars.get(i).map(|c| c.1) {
                    Some(',') => i += 1,
                    Some(')') => {
                        i += 1;
                        break;
                    }
                    _ => return Err(err(i, "expected ',' or ')' after column")),
                }
            }
        }
        tables.push(CompactTable { name, columns });
        skip_ws(&mut i);
        match chars.get(i).map(|c| c.1) {
            None => break,
            Some(';') => i += 1,
            Some(_) => return Err(err(i, "expected ';' between tables")),
        }
        skip_ws(&mut i);
        if i == chars.len() {
            break;
        }
    }
    Ok(tables)
}

/// Keep the linked tables; within each, the linked columns, the primary key,
/// and foreign-key columns whose endpoint tables both survive.
pub fn prune(schema: &DatabaseSchema, linked: &LinkedSchema) -> Result<DatabaseSchema, PruneError> {
    if linked.tables.is_empty() && linked.columns.is_empty() {
        return Err(PruneError::EmptyLink);
    }
    let mut keep_tables = BTreeSet::new();
    for t in &linked.tables {
        let def = schema
            .table(t)
            .ok_or_else(|| PruneError::UnknownTable(t.clone()))?;
        keep_tables.insert(def.name.to_lowercase());
    }
    let mut keep_cols: BTreeSet<(String, String)> = BTreeSet::new();
    for (t, c) in &linked.columns {
        let def = schema
            .table(t)
            .ok_or_else(|| PruneError::UnknownTable(t.clone()))?;
        let col = def
            .column(c)
            .ok_or_else(|| PruneError::UnknownColumn(t.clone(), c.clone()))?;
        keep_tables.insert(def.name.to_lowercase());
        keep_cols.insert((def.name.to_lowercase(), col.name.to_lowercase()));
    }
    for t in &schema.tables {
        if !keep_tables.contains(&t.name.to_lowercase()) {
            continue;
        }
        for fk in &t.foreign_keys {
            if keep_tables.contains(&fk.foreign_table.to_lowercase()) {
                keep_cols.insert((t.name.to_lowercase(), fk.column.to_lowercase()));
                keep_cols.insert((
                    fk.foreign_table.to_lowercase(),
                    fk.foreign_column.to_lowercase(),
                ));
            }
        }
    }

    let mut tables = Vec::new();
    for t in &schema.tables {
        let tl = t.name.to_lowercase();
        if !keep_tables.contains(&tl) {
            continue;
        }
        let idx: Vec<usize> = t
            .columns
            .iter()
            .enumerate()
            .filter(|(_, c)| {
                c.is_primary_key || keep_cols.contains(&(tl.clone(), c.name.to_lowercase()))
            })
            .map(|(i, _)| i)
            .collect();
        let columns = idx
            .iter()
            .map(|&i| t.columns[i].clone())
            .collect::<Vec<_>>();
        let foreign_keys = t
            .foreign_keys
            .iter()
            .filter(|fk| keep_tables.contains(&fk.foreign_table.to_lowercase()))
            .cloned()
            .collect();
        let samples = t
            .samples
            .iter()
            .map(|row| idx.iter().map(|&i| row[i].clone()).collect())
            .collect();
        tables.push(TableDef {
            name: t.name.clone(),
            columns,
            foreign_keys,
            samples,
        });
    }
    let pruned = DatabaseSchema {
        db_id: schema.db_id.clone(),
        tables,
    };
    debug_assert!(pruned.validate().is_ok());
    Ok(pruned)
}
