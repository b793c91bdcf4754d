use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sqlvote::agent::{run_episode, AgentConfig, AgentTask, Corpus, EpisodeResult};
use sqlvote::corpus::{BenchmarkItem, Difficulty};
use sqlvote::experts::ScriptedExpert;
use sqlvote::Database;

use super::{build_db, fixtures};

pub const TASKS: [&str; 5] = [
    "t1_count",
    "t2_replan",
    "t3_explore",
    "t4_validator",
    "t5_syntax",
];

#[derive(Debug, Deserialize)]
pub struct FixtureTask {
    pub id: String,
    pub db: String,
    pub question: String,
    #[serde(default)]
    pub env: bool,
    #[serde(default)]
    pub syntax: bool,
}

pub struct TaskRun {
    pub result: EpisodeResult,
    pub output_dir: PathBuf,
    pub env_root: Option<PathBuf>,
    pub expected_csv: String,
}

pub fn task_dir(name: &str) -> PathBuf {
    fixtures().join("agent").join(name)
}

pub fn run_task(name: &str, work: &Path) -> TaskRun {
    let dir = task_dir(name);
    let task: FixtureTask =
        serde_json::from_str(&fs::read_to_string(dir.join("task.json")).unwrap()).unwrap();
    let script: BTreeMap<String, Vec<String>> =
        serde_json::from_str(&fs::read_to_string(dir.join("script.json")).unwrap()).unwrap();
    let expert = ScriptedExpert::by_role(task.id.clone(), script);
    let db = Database::open(build_db(&work.join("db"), &task.db)).unwrap();
    let item = BenchmarkItem {
        item_id: task.id.clone(),
        db_id: task.db.clone(),
        question: task.question.clone(),
        gold_sql: None,
        difficulty: Difficulty::Unknown,
        evidence: None,
    };
    let knowledge = Corpus::from_dir(&fixtures().join("agent/knowledge")).unwrap();
    let syntax = if task.syntax {
        Corpus::from_dir(&fixtures().join("agent/syntax")).unwrap()
    } else {
        Corpus::default()
    };
    let env_root = task.env.then(|| dir.join("env"));
    let output_dir = work.join("out").join(&task.id);
    let agent_task = AgentTask {
        item: &item,
        db: &db,
        env: env_root.as_deref(),
        knowledge: &knowledge,
        syntax: &syntax,
        output_dir: &output_dir,
    };
    let result = run_episode(&agent_task, &expert, &AgentConfig::default());
    TaskRun {
        result,
        output_dir,
        env_root,
        expected_csv: fs::read_to_string(dir.join("expected.csv")).unwrap(),
    }
}
