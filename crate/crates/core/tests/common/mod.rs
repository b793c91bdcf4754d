#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sqlvote::corpus::{load_benchmark, BenchmarkFormat, BenchmarkSet};
use sqlvote::experts::ScriptedExpert;
use sqlvote::{Database, DatabaseSchema, Expert};

pub mod agent;

pub const DATABASES: [&str; 3] = ["concert_singer", "pets_1", "company"];

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Build `<name>.sqlite` in `dir` from the fixture script.
pub fn build_db(dir: &Path, name: &str) -> PathBuf {
    let script = fs::read_to_string(fixtures().join("db").join(format!("{name}.sql"))).unwrap();
    fs::create_dir_all(dir).unwrap();
    let path = dir.join(format!("{name}.sqlite"));
    let _ = fs::remove_file(&path);
    let conn = rusqlite::Connection::open(&path).unwrap();
    conn.execute_batch(&script).unwrap();
    path
}

pub fn open_db(dir: &Path, name: &str) -> (Database, DatabaseSchema) {
    let db = Database::open(build_db(dir, name)).unwrap();
    let schema = DatabaseSchema::introspect(&db).unwrap();
    (db, schema)
}

/// Spider directory layout under `dir` built from the fixtures.
pub fn spider_layout(dir: &Path) -> PathBuf {
    let root = dir.join("spider");
    fs::create_dir_all(&root).unwrap();
    for f in ["tables.json", "dev.json", "train_spider.json"] {
        fs::copy(fixtures().join("spider").join(f), root.join(f)).unwrap();
    }
    for name in DATABASES {
        build_db(&root.join("database").join(name), name);
    }
    root
}

pub fn spider_bench(dir: &Path, items: usize) -> BenchmarkSet {
    let mut b = load_benchmark(&spider_layout(dir), BenchmarkFormat::Spider).unwrap();
    b.items.truncate(items);
    b
}

/// Question of a generation or refinement prompt (the last one shown).
pub fn question_of(prompt: &str) -> &str {
    prompt
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix("-- Question: "))
        .unwrap_or("")
}

pub fn is_refinement(prompt: &str) -> bool {
    prompt.contains("[Detected Error Type:]")
}

/// Expert answering each question through `answer`.
pub fn question_expert(
    name: &str,
    answer: impl Fn(&str, bool) -> String + Send + Sync + 'static,
) -> Arc<dyn Expert> {
    Arc::new(ScriptedExpert::from_fn(name, move |prompt, _| {
        Ok(format!(
            "```sql\n{}\n```",
            answer(question_of(prompt), is_refinement(prompt))
        ))
    }))
}

pub fn gold_map(bench: &BenchmarkSet) -> BTreeMap<String, String> {
    bench
        .items
        .iter()
        .map(|i| (i.question.clone(), i.gold_sql.clone().unwrap()))
        .collect()
}
