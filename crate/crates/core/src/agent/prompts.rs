//! Prompt text for each agent role. Every prompt starts with an
//! `[Agent] <Role>` line so transcripts can be keyed by role.

use std::fmt::Write;

use super::explore::{ExploreCommand, ExploreStep};
use super::parse::{Dialect, Plan};
use crate::exec::{ErrorKind, ExecResult, Value};
use crate::prompt::{build_prompt, PromptSpec, RefineSection};

pub const PLANNER: &str = "Planner";
pub const PLAN_CRITIQUE: &str = "PlanCritique";
pub const SYNTAX_GATE: &str = "SyntaxGate";
pub const ACTOR: &str = "Actor";
pub const SQL_CRITIQUE: &str = "SqlCritique";
pub const REFINER: &str = "Refiner";
pub const SCHEMA_LINKER: &str = "SchemaLinker";
pub const VALIDATOR: &str = "Validator";

/// Task facts shared by every prompt of an episode.
#[derive(Debug, Clone)]
pub struct TaskContext {
    pub question: String,
    pub evidence: Option<String>,
    pub db_id: String,
    pub dialect: Dialect,
    /// Project/dataset lines for cloud dialects.
    pub project_info: Option<String>,
}

fn header(role: &str) -> String {
    format!("[Agent] {role}\n")
}

fn section(out: &mut String, title: &str, body: &str) {
    if body.trim().is_empty() {
        return;
    }
    let _ = write!(out, "\n[{title}]\n{}\n", body.trim_end());
}

fn context(out: &mut String, cx: &TaskContext) {
    let mut q = cx.question.trim().to_string();
    if let Some(ev) = cx.evidence.as_deref().filter(|e| !e.trim().is_empty()) {
        let _ = write!(q, "\nEvidence: {}", ev.trim());
    }
    section(out, "User Question", &q);
    if cx.dialect != Dialect::Sqlite {
        section(
            out,
            "Project Information",
            cx.project_info.as_deref().unwrap_or(""),
        );
    }
    section(
        out,
        "Database Context",
        &format!(
            "Current Database: {}\nTarget SQL Dialect: {}",
            cx.db_id,
            cx.dialect.label()
        ),
    );
}

pub fn action_format(dialect: Dialect, output: &str) -> String {
    format!(
        "You must output exactly one of the following actions (no other text):\n\
         - Action: {}(sql_query=\"...\", is_save=True, save_path=\"{output}\")\n\
         - Action: Terminate(output=\"{output}\")\n\
         Important: When dealing with numerical results, DO NOT round the numbers. \
         Keep the full precision of the results.",
        dialect.exec_verb()
    )
}

fn plan_text(plan: &Plan) -> String {
    let mut s = String::new();
    for (i, step) in plan.steps.iter().enumerate() {
        let _ = writeln!(s, "{}. {}", i + 1, step);
    }
    let _ = write!(s, "Expected CSV format: {}", plan.expected_csv_format);
    s
}

pub fn planner(
    cx: &TaskContext,
    knowledge: &[String],
    schema_hint: Option<&str>,
    previous: Option<&Plan>,
    feedback: Option<&str>,
    parse_error: Option<&str>,
) -> String {
    let mut out = header(PLANNER);
    context(&mut out, cx);
    section(&mut out, "External Knowledge", &knowledge.join("\n---\n"));
    section(&mut out, "Schema", schema_hint.unwrap_or(""));
    if let Some(p) = previous {
        section(&mut out, "Previous Plan", &plan_text(p));
    }
    section(&mut out, "Critique Feedback", feedback.unwrap_or(""));
    if let Some(e) = parse_error {
        section(
            &mut out,
            "Format Error",
            &format!("Your previous response could not be parsed: {e}"),
        );
    }
    section(
        &mut out,
        "Task",
        "Do not write SQL. Produce only a step-by-step plan in strict JSON with exactly these keys:\n\
         {\"plan\": [\"step 1\", \"step 2\", ...], \"expected_csv_format\": \"column names with types\"}",
    );
    out
}

pub fn plan_critique(cx: &TaskContext, plan: &Plan) -> String {
    let mut out = header(PLAN_CRITIQUE);
    context(&mut out, cx);
    section(&mut out, "Plan", &plan_text(plan));
    section(
        &mut out,
        "Task",
        "Assess (1) whether the plan includes every step needed to answer the question and \
         (2) whether its reasoning is clear and coherent.\n\
         Reply in strict JSON: {\"update_plan\": true/false, \"feedback\": \"...\"}",
    );
    out
}

pub fn syntax_gate(cx: &TaskContext, plan: &Plan) -> String {
    let mut out = header(SYNTAX_GATE);
    context(&mut out, cx);
    section(&mut out, "Plan", &plan_text(plan));
    section(
        &mut out,
        "Task",
        &format!(
            "Do you need additional {} syntax documentation to implement this plan? \
             Answer \"yes\" followed by the functions or constructs you need, or \"no\".",
            cx.dialect.label()
        ),
    );
    out
}

#[allow(clippy::too_many_arguments)]
pub fn actor(
    cx: &TaskContext,
    plan: Option<&Plan>,
    step: usize,
    observation: &str,
    feedback: Option<&str>,
    syntax: &[String],
    linked_schema: Option<&str>,
    output: &str,
) -> String {
    let mut out = header(ACTOR);
    context(&mut out, cx);
    section(&mut out, "Schema Linking", linked_schema.unwrap_or(""));
    if let Some(p) = plan {
        section(&mut out, "Current Plan", &plan_text(p));
        let n = p.steps.len();
        let i = step.min(n - 1);
        section(
            &mut out,
            "Current Step",
            &format!("Step {} of {}: {}", i + 1, n, p.steps[i]),
        );
    }
    section(&mut out, "Critique Feedback", feedback.unwrap_or(""));
    section(
        &mut out,
        "Execution Result",
        if observation.trim().is_empty() {
            "You are in the folder now."
        } else {
            observation
        },
    );
    section(&mut out, "Reference Syntax", &syntax.join("\n---\n"));
    section(
        &mut out,
        "Required Action Format",
        &action_format(cx.dialect, output),
    );
    out.push_str("\nGenerate your next action.\n");
    out
}

pub fn sql_critique(cx: &TaskContext, plan: Option<&Plan>, sql: &str) -> String {
    let mut out = header(SQL_CRITIQUE);
    context(&mut out, cx);
    if let Some(p) = plan {
        section(&mut out, "Plan", &plan_text(p));
    }
    section(&mut out, "SQL", sql);
    section(
        &mut out,
        "Task",
        &format!(
            "Check the SQL for correctness, {} compliance and consistency with the plan.\n\
             Reply with two parts:\n[Reasoning]\nthe flaws you found, if any\n[SQL]\n\
             the corrected query as an {} action, or nothing if the SQL is already correct",
            cx.dialect.label(),
            cx.dialect.exec_verb()
        ),
    );
    out
}

pub struct RefinerInput<'a> {
    pub sql: &'a str,
    pub error_message: &'a str,
    pub error_kind: ErrorKind,
    pub prior_context: &'a str,
    pub critique_feedback: Option<&'a str>,
    pub linked_schema: Option<&'a str>,
    pub expected_format: Option<&'a str>,
    pub output: &'a str,
}

pub fn refiner(cx: &TaskContext, input: &RefinerInput<'_>) -> String {
    let expected = input
        .expected_format
        .filter(|f| !f.trim().is_empty())
        .map(|f| {
            format!(
                "CSV Format: {}\nEnsure the output matches this format exactly.",
                f.trim()
            )
        });
    let section = RefineSection {
        dialect: cx.dialect.label().to_string(),
        db_id: cx.db_id.clone(),
        prior_context: input.prior_context.to_string(),
        original_sql: if input.sql.trim().is_empty() {
            "(no executable SQL)".into()
        } else {
            input.sql.to_string()
        },
        error_message: input.error_message.to_string(),
        error_kind: input.error_kind,
        critique_feedback: input.critique_feedback.map(str::to_string),
        linked_schema: input.linked_schema.map(str::to_string),
        expected_format: expected,
        action_format: Some(action_format(cx.dialect, input.output)),
    };
    let body =
        build_prompt(&PromptSpec::refinement(section)).expect("refiner sections are populated");
    format!("{}{body}", header(REFINER))
}

pub fn explore(question: &str, error_message: &str, steps: &[ExploreStep]) -> String {
    let mut out = header(SCHEMA_LINKER);
    section(&mut out, "User Question", question);
    section(&mut out, "Triggering Error", error_message);
    let mut history = String::new();
    for s in steps {
        let cmd = match &s.command {
            Some(ExploreCommand::Ls { path }) => format!("LS({path})"),
            Some(ExploreCommand::Cat { path }) => format!("CAT({path})"),
            Some(ExploreCommand::Head { path, lines }) => format!("HEAD({path}, {lines})"),
            Some(ExploreCommand::Grep { pattern, path }) => format!("GREP({pattern}, {path})"),
            Some(ExploreCommand::Terminate { .. }) => "Terminate".to_string(),
            None => "(invalid)".to_string(),
        };
        let _ = write!(
            history,
            "Step {}: {cmd}\n{}\n",
            s.step,
            s.observation.trim_end()
        );
    }
    section(&mut out, "Exploration So Far", &history);
    section(
        &mut out,
        "Required Action Format",
        "Output exactly one action:\n\
         - Action: LS(path=\"dir\")\n\
         - Action: CAT(path=\"file\")\n\
         - Action: HEAD(path=\"file\", n=10)\n\
         - Action: GREP(pattern=\"text\", path=\"dir or file\")\n\
         - Action: Terminate(output=\"table1(col1:TYPE[val1,val2], col2:TYPE[val3]); table2(...)\")\n\
         Paths are relative to the environment root.",
    );
    out
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => "NULL".into(),
        Value::Integer(i) => i.to_string(),
        Value::Real(r) => r.to_string(),
        Value::Text(t) => t.clone(),
        Value::Blob { blob } => format!("x'{blob}'"),
    }
}

/// Column names, null counts per column, row count and the first three rows.
pub fn result_summary(result: &ExecResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Columns: {}", result.columns.join(", "));
    let nulls: Vec<String> = (0..result.columns.len())
        .map(|c| {
            let n = result
                .rows
                .iter()
                .filter(|r| r.get(c).is_none_or(Value::is_null))
                .count();
            format!("{}={n}", result.columns[c])
        })
        .collect();
    let _ = writeln!(s, "Null counts: {}", nulls.join(", "));
    let _ = writeln!(s, "Row count: {}", result.rows.len());
    s.push_str("Sample rows:");
    for r in result.rows.iter().take(3) {
        let _ = write!(
            s,
            "\n{}",
            r.iter().map(cell).collect::<Vec<_>>().join(" | ")
        );
    }
    s
}

pub fn validator(
    cx: &TaskContext,
    sql: &str,
    result: &ExecResult,
    retry_note: Option<&str>,
) -> String {
    let mut out = header(VALIDATOR);
    context(&mut out, cx);
    section(&mut out, "SQL", sql);
    section(&mut out, "Result Summary", &result_summary(result));
    if let Some(note) = retry_note {
        section(&mut out, "Format Error", note);
    }
    section(
        &mut out,
        "Task",
        "Identify unnecessary columns, missing filters or incomplete logic, and whether the result is empty \
         or uninformative; suggest a fix if anything is wrong.\nReply in strict JSON: {\"valid_result\": \
         true/false, \"columns_not_needed\": [...], \"result_empty\": true/false, \"suggest_fix\": \"...\"}",
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::prompt_role;

    fn cx() -> TaskContext {
        TaskContext {
            question: "How many singers?".into(),
            evidence: None,
            db_id: "concert_singer".into(),
            dialect: Dialect::Sqlite,
            project_info: None,
        }
    }

    #[test]
    fn roles_and_sections() {
        let plan = Plan {
            steps: vec!["count rows".into()],
            expected_csv_format: "count (integer)".into(),
        };
        let p = planner(&cx(), &[], None, Some(&plan), Some("add a filter"), None);
        assert_eq!(prompt_role(&p), Some(PLANNER));
        assert!(p.contains("[Critique Feedback]\nadd a filter"));
        let a = actor(&cx(), Some(&plan), 5, "", None, &[], None, "result.csv");
        assert_eq!(prompt_role(&a), Some(ACTOR));
        assert!(a.contains("Step 1 of 1: count rows"));
        assert!(a.contains("Action: SQLITE_EXEC_SQL(sql_query="));
        let r = refiner(
            &cx(),
            &RefinerInput {
                sql: "SELECT x FROM singers",
                error_message: "no such table: singers",
                error_kind: ErrorKind::TableNotFound,
                prior_context: "",
                critique_feedback: None,
                linked_schema: Some("singer(id:INTEGER)"),
                expected_format: Some("count (integer)"),
                output: "result.csv",
            },
        );
        assert_eq!(prompt_role(&r), Some(REFINER));
        assert!(r.contains("[Schema Linking]") && r.contains("[Required Action Format]"));
        assert!(r.contains("[Detected Error Type:] TableNotFound"));
    }

    #[test]
    fn summary_fields() {
        let res = ExecResult::rows(
            vec!["a".into(), "b".into()],
            (0..5)
                .map(|i| {
                    vec![
                        Value::Integer(i),
                        if i % 2 == 0 {
                            Value::Null
                        } else {
                            Value::Text("x".into())
                        },
                    ]
                })
                .collect(),
        );
        let s = result_summary(&res);
        assert!(s.contains("Columns: a, b"));
        assert!(s.contains("Null counts: a=0, b=3"));
        assert!(s.contains("Row count: 5"));
        assert_eq!(s.lines().count(), 3 + 1 + 3);
    }
}
