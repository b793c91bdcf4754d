use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn sqlvote(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqlvote"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Spider layout with the fixture databases.
fn spider(dir: &Path) -> PathBuf {
    let root = dir.join("spider");
    fs::create_dir_all(&root).unwrap();
    for f in ["tables.json", "dev.json", "train_spider.json"] {
        fs::copy(fixtures().join("spider").join(f), root.join(f)).unwrap();
    }
    for name in ["concert_singer", "pets_1", "company"] {
        let db_dir = root.join("database").join(name);
        fs::create_dir_all(&db_dir).unwrap();
        let script = fs::read_to_string(fixtures().join("db").join(format!("{name}.sql"))).unwrap();
        let conn = rusqlite::Connection::open(db_dir.join(format!("{name}.sqlite"))).unwrap();
        conn.execute_batch(&script).unwrap();
    }
    root
}

fn experts_file(dir: &Path) -> PathBuf {
    let path = dir.join("experts.json");
    fs::write(
        &path,
        r#"{"experts": [
            {"name": "counter", "backend": "scripted", "response": "```sql\nSELECT count(*) FROM singer\n```"},
            {"name": "zero", "backend": "scripted", "response": "SELECT 0"}
        ]}"#,
    )
    .unwrap();
    path
}

#[test]
fn load_summarizes_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let root = spider(dir.path());
    let out = sqlvote(&["load", "--benchmark", root.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("items: 30"), "{text}");
    assert!(text.contains("databases: 3"), "{text}");
}

#[test]
fn recorded_stage_replays_to_identical_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = spider(dir.path());
    let experts = experts_file(dir.path());
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let run = |store: &str, flag: &str| {
        let o = sqlvote(&[
            "run-stage",
            "--benchmark",
            root.to_str().unwrap(),
            "--experts",
            experts.to_str().unwrap(),
            "--store",
            &p(store),
            flag,
            &p("transcript.jsonl"),
            "--stage",
            "s6_wma",
            "--limit",
            "6",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run("live.jsonl", "--record");
    run("replayed.jsonl", "--replay");
    let report = |store: &str| {
        let o = sqlvote(&[
            "report",
            "--store",
            &p(store),
            "--kind",
            "weight_trajectory",
        ]);
        assert!(o.status.success());
        stdout(&o)
    };
    let live = report("live.jsonl");
    assert!(live.lines().count() > 1);
    assert_eq!(live, report("replayed.jsonl"));
}

#[test]
fn simulate_bounds_prints_csv() {
    let out = sqlvote(&[
        "simulate-bounds",
        "--num-experts",
        "3",
        "--rounds",
        "200",
        "--trials",
        "2",
        "--seeds",
        "5",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 5, "{text}");
}

#[test]
fn unknown_setting_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sqlvote(&[
        "run-setting",
        "--benchmark",
        dir.path().to_str().unwrap(),
        "--experts",
        "x.json",
        "--store",
        "s.jsonl",
        "--setting",
        "9",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("setting"));
}

#[test]
fn missing_store_reports_error() {
    let out = sqlvote(&["report", "--store", "/nonexistent/run.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
