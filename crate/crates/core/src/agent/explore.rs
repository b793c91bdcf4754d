//! Read-only exploration of a task's documentation directory.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::parse::{parse_call, Call};
use super::prompts;
use crate::experts::{Expert, ExpertError};
use crate::prompt::GenerationParams;
use crate::schema::parse_compact;

pub const DEFAULT_EXPLORATION_STEPS: usize = 30;

/// Bytes of one observation shown back to the expert.
const OBSERVATION_LIMIT: usize = 4000;
/// Bytes of accumulated notes returned on a forced stop.
const NOTES_LIMIT: usize = 8000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExploreCommand {
    Ls { path: String },
    Cat { path: String },
    Head { path: String, lines: usize },
    Grep { pattern: String, path: String },
    Terminate { output: String },
}

impl ExploreCommand {
    pub fn from_call(call: &Call) -> Result<Self, String> {
        let path = || call.arg(&["path", "file"]).unwrap_or(".").to_string();
        match call.name.to_ascii_uppercase().as_str() {
            "LS" => Ok(ExploreCommand::Ls { path: path() }),
            "CAT" => Ok(ExploreCommand::Cat {
                path: call
                    .arg(&["path", "file"])
                    .ok_or("CAT needs path")?
                    .to_string(),
            }),
            "HEAD" => {
                let lines = match call.arg(&["n", "lines"]) {
                    Some(n) => n.parse().map_err(|_| format!("bad line count {n}"))?,
                    None => 10,
                };
                Ok(ExploreCommand::Head {
                    path: call
                        .arg(&["path", "file"])
                        .ok_or("HEAD needs path")?
                        .to_string(),
                    lines,
                })
            }
            "GREP" => Ok(ExploreCommand::Grep {
                pattern: call
                    .arg(&["pattern"])
                    .ok_or("GREP needs pattern")?
                    .to_string(),
                path: path(),
            }),
            "TERMINATE" => Ok(ExploreCommand::Terminate {
                output: call
                    .arg(&["output"])
                    .ok_or("Terminate needs output")?
                    .to_string(),
            }),
            other => Err(format!("unknown command {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreStep {
    pub step: usize,
    pub command: Option<ExploreCommand>,
    pub observation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplorationOutcome {
    /// Compact schema text from the expert's Terminate, or the accumulated
    /// notes on a forced stop.
    pub schema_text: String,
    pub terminated: bool,
    pub steps: Vec<ExploreStep>,
    pub violations: Vec<String>,
    /// Every file opened, canonicalized, in order. Not serialized.
    #[serde(skip)]
    pub file_log: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SandboxError {
    Violation(String),
    NotFound(String),
}

/// A directory that can only be read below its root.
pub struct Sandbox {
    root: PathBuf,
    pub file_log: Vec<PathBuf>,
}

impl Sandbox {
    pub fn new(root: &Path) -> std::io::Result<Self> {
        Ok(Sandbox {
            root: root.canonicalize()?,
            file_log: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Resolve `rel` under the root. Absolute paths and any path that
    /// leaves the root (lexically or through a symlink) are violations.
    pub fn resolve(&self, rel: &str) -> Result<PathBuf, SandboxError> {
        let p = Path::new(rel.trim());
        if p.is_absolute() || p.components().any(|c| matches!(c, Component::Prefix(_))) {
            return Err(SandboxError::Violation(rel.to_string()));
        }
        let mut depth: i64 = 0;
        for c in p.components() {
            match c {
                Component::ParentDir => depth -= 1,
                Component::Normal(_) => depth += 1,
                _ => {}
            }
            if depth < 0 {
                return Err(SandboxError::Violation(rel.to_string()));
            }
        }
        let joined = self.root.join(p);
        let canonical = joined
            .canonicalize()
            .map_err(|_| SandboxError::NotFound(rel.to_string()))?;
        if !canonical.starts_with(&self.root) {
            return Err(SandboxError::Violation(rel.to_string()));
        }
        Ok(canonical)
    }

    fn display(&self, p: &Path) -> String {
        p.strip_prefix(&self.root)
            .map(|r| r.display().to_string())
            .unwrap_or_default()
    }

    fn open_lines(&mut self, path: &Path) -> Result<Vec<String>, String> {
        self.file_log.push(path.to_path_buf());
        let file = fs::File::open(path).map_err(|e| e.to_string())?;
        Ok(BufReader::new(file).lines().map_while(Result::ok).collect())
    }

    fn files_under(&self, dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            let Ok(entries) = fs::read_dir(&d) else {
                continue;
            };
            let mut entries: Vec<PathBuf> =
                entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
            entries.sort();
            for e in entries.into_iter().rev() {
                match e.canonicalize() {
                    Ok(c) if c.starts_with(&self.root) && c.is_dir() => stack.push(c),
                    Ok(c) if c.starts_with(&self.root) => out.push(c),
                    _ => {}
                }
            }
        }
        out.sort();
        out
    }

    /// Run one read command; errors are returned as observation text.
    pub fn run(&mut self, cmd: &ExploreCommand) -> Result<String, SandboxError> {
        match cmd {
            ExploreCommand::Terminate { .. } => Ok(String::new()),
            ExploreCommand::Ls { path } => {
                let dir = self.resolve(path)?;
                if !dir.is_dir() {
                    return Ok(format!("{path}: not a directory"));
                }
                let mut names: Vec<String> = fs::read_dir(&dir)
                    .map(|it| {
                        it.filter_map(|e| e.ok())
                            .map(|e| {
                                let name = e.file_name().to_string_lossy().into_owned();
                                if e.path().is_dir() {
                                    format!("{name}/")
                                } else {
                                    name
                                }
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                names.sort();
                Ok(names.join("\n"))
            }
            ExploreCommand::Cat { path } | ExploreCommand::Head { path, .. } => {
                let file = self.resolve(path)?;
                if !file.is_file() {
                    return Ok(format!("{path}: not a file"));
                }
                let lines = self.open_lines(&file).unwrap_or_else(|e| vec![e]);
                let n = match cmd {
                    ExploreCommand::Head { lines: n, .. } => *n,
                    _ => usize::MAX,
                };
                Ok(lines.into_iter().take(n).collect::<Vec<_>>().join("\n"))
            }
            ExploreCommand::Grep { pattern, path } => {
                let target = self.resolve(path)?;
                let files = if target.is_dir() {
                    self.files_under(&target)
                } else {
                    vec![target]
                };
                let needle = pattern.to_lowercase();
                let mut hits = Vec::new();
                for f in files {
                    let name = self.display(&f);
                    for (i, line) in self.open_lines(&f).unwrap_or_default().iter().enumerate() {
                        if line.to_lowercase().contains(&needle) {
                            hits.push(format!("{name}:{}:{line}", i + 1));
                        }
                    }
                }
                Ok(if hits.is_empty() {
                    "(no matches)".into()
                } else {
                    hits.join("\n")
                })
            }
        }
    }
}

fn truncate(s: &str, limit: usize) -> String {
    if s.len() <= limit {
        return s.to_string();
    }
    let mut end = limit;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}\n...(truncated)", &s[..end])
}

/// Let `expert` explore `env` with read commands for up to `max_steps`
/// steps. A path escape is refused and still consumes its step.
pub fn explore_schema(
    env: &Path,
    question: &str,
    error_message: &str,
    expert: &dyn Expert,
    params: &GenerationParams,
    max_steps: usize,
) -> Result<ExplorationOutcome, ExpertError> {
    let mut sandbox = Sandbox::new(env)
        .map_err(|e| ExpertError::Config(format!("env {}: {e}", env.display())))?;
    let mut steps: Vec<ExploreStep> = Vec::new();
    let mut violations = Vec::new();
    let mut notes = String::new();
    for step in 1..=max_steps {
        let prompt = prompts::explore(question, error_message, &steps);
        let raw = expert.generate(&prompt, params)?.text;
        let parsed = parse_call(&raw)
            .map_err(|e| e.to_string())
            .and_then(|(_, call)| ExploreCommand::from_call(&call));
        let cmd = match parsed {
            Ok(c) => c,
            Err(e) => {
                steps.push(ExploreStep {
                    step,
                    command: None,
                    observation: format!("Invalid command: {e}"),
                });
                continue;
            }
        };
        if let ExploreCommand::Terminate { output } = &cmd {
            match parse_compact(output) {
                Ok(_) => {
                    steps.push(ExploreStep {
                        step,
                        command: Some(cmd.clone()),
                        observation: String::new(),
                    });
                    return Ok(ExplorationOutcome {
                        schema_text: output.trim().to_string(),
                        terminated: true,
                        steps,
                        violations,
                        file_log: sandbox.file_log,
                    });
                }
                Err(e) => {
                    let obs = format!("Terminate output is not in compact schema format: {e:?}");
                    steps.push(ExploreStep {
                        step,
                        command: Some(cmd),
                        observation: obs,
                    });
                    continue;
                }
            }
        }
        let observation = match sandbox.run(&cmd) {
            Ok(text) => {
                if matches!(
                    cmd,
                    ExploreCommand::Cat { .. }
                        | ExploreCommand::Head { .. }
                        | ExploreCommand::Grep { .. }
                ) {
                    notes.push_str(&text);
                    notes.push('\n');
                }
                truncate(&text, OBSERVATION_LIMIT)
            }
            Err(SandboxError::Violation(p)) => {
                violations.push(p.clone());
                format!("Permission denied: {p} is outside the environment")
            }
            Err(SandboxError::NotFound(p)) => format!("{p}: no such file or directory"),
        };
        steps.push(ExploreStep {
            step,
            command: Some(cmd),
            observation,
        });
    }
    Ok(ExplorationOutcome {
        schema_text: truncate(notes.trim(), NOTES_LIMIT),
        terminated: false,
        steps,
        violations,
        file_log: sandbox.file_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::ScriptedExpert;

    fn env() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("DDL.csv"),
            "table_name,ddl\nt,\"CREATE TABLE t (a INTEGER)\"\n",
        )
        .unwrap();
        fs::create_dir(dir.path().join("docs")).unwrap();
        fs::write(
            dir.path().join("docs/README.md"),
            "Column a counts widgets.\n",
        )
        .unwrap();
        dir
    }

    #[test]
    fn two_step_transcript_yields_compact_schema() {
        let dir = env();
        let expert = ScriptedExpert::sequence(
            "e",
            vec![
                "Action: CAT(path=\"DDL.csv\")".into(),
                "Action: Terminate(output=\"t(a:INTEGER[1,2])\")".into(),
            ],
        );
        let out = explore_schema(
            dir.path(),
            "q",
            "no such table",
            &expert,
            &GenerationParams::default(),
            30,
        )
        .unwrap();
        assert!(out.terminated);
        assert_eq!(out.schema_text, "t(a:INTEGER[1,2])");
        assert_eq!(out.steps.len(), 2);
        assert!(out.steps[0].observation.contains("CREATE TABLE t"));
        assert_eq!(
            out.file_log,
            vec![dir.path().join("DDL.csv").canonicalize().unwrap()]
        );
    }

    #[test]
    fn never_terminating_stops_at_cap() {
        let dir = env();
        let expert = ScriptedExpert::constant("e", "Action: LS(path=\".\")");
        let out = explore_schema(
            dir.path(),
            "q",
            "e",
            &expert,
            &GenerationParams::default(),
            30,
        )
        .unwrap();
        assert!(!out.terminated);
        assert_eq!(out.steps.len(), 30);
        assert_eq!(expert.calls(), 30);
    }

    #[test]
    fn escapes_are_refused() {
        let dir = env();
        let expert = ScriptedExpert::sequence(
            "e",
            vec![
                "Action: CAT(path=\"../../etc/passwd\")".into(),
                "Action: LS(path=\"/etc\")".into(),
                "Action: GREP(pattern=\"widgets\", path=\"docs/../..\")".into(),
                "Action: GREP(pattern=\"widgets\", path=\".\")".into(),
                "Action: Terminate(output=\"t(a:INTEGER)\")".into(),
            ],
        );
        let out = explore_schema(
            dir.path(),
            "q",
            "e",
            &expert,
            &GenerationParams::default(),
            30,
        )
        .unwrap();
        assert_eq!(out.violations.len(), 3);
        assert!(out.steps[3].observation.contains("docs/README.md:1:"));
        let root = dir.path().canonicalize().unwrap();
        assert!(out.file_log.iter().all(|p| p.starts_with(&root)));
    }

    #[cfg(unix)]
    #[test]
    fn symlink_escape_is_refused() {
        let dir = env();
        let outside = tempfile::tempdir().unwrap();
        fs::write(outside.path().join("secret"), "x").unwrap();
        std::os::unix::fs::symlink(outside.path().join("secret"), dir.path().join("link")).unwrap();
        let mut sb = Sandbox::new(dir.path()).unwrap();
        assert!(matches!(
            sb.run(&ExploreCommand::Cat {
                path: "link".into()
            }),
            Err(SandboxError::Violation(_))
        ));
        assert!(sb.file_log.is_empty());
    }
}
