//! Parsers for agent responses: action lines, plans and JSON verdicts.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};
use thiserror::Error;

use crate::experts::extract_sql;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ParseError {
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("plan parse error: {0}")]
    PlanParse(String),
    #[error("verdict parse error: {0}")]
    VerdictParse(String),
    #[error("critique parse error: {0}")]
    CritiqueParse(String),
}

/// SQL dialect of the action verb.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dialect {
    Sqlite,
    Bigquery,
    Snowflake,
}

impl Dialect {
    pub const ALL: [Dialect; 3] = [Dialect::Sqlite, Dialect::Bigquery, Dialect::Snowflake];

    pub fn exec_verb(self) -> &'static str {
        match self {
            Dialect::Sqlite => "SQLITE_EXEC_SQL",
            Dialect::Bigquery => "BIGQUERY_EXEC_SQL",
            Dialect::Snowflake => "SNOWFLAKE_EXEC_SQL",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Dialect::Sqlite => "SQLITE",
            Dialect::Bigquery => "BIGQUERY",
            Dialect::Snowflake => "SNOWFLAKE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionKind {
    ExecSql {
        sql: String,
        save_path: Option<String>,
    },
    Terminate {
        output: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentAction {
    pub kind: ActionKind,
    /// Text before the action line.
    pub thought: String,
}

/// A parsed `NAME(key=value, ...)` call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Call {
    pub name: String,
    pub args: Vec<(String, String)>,
}

impl Call {
    pub fn arg(&self, keys: &[&str]) -> Option<&str> {
        self.args
            .iter()
            .find(|(k, _)| keys.contains(&k.as_str()))
            .map(|(_, v)| v.as_str())
    }
}

fn invalid(msg: impl Into<String>) -> ParseError {
    ParseError::InvalidAction(msg.into())
}

/// Locate the single `Action:` line and parse the call after it. Quoted
/// values may span lines. Returns the thought text and the call.
pub fn parse_call(raw: &str) -> Result<(String, Call), ParseError> {
    let mut starts = Vec::new();
    let mut offset = 0;
    let mut in_quote = false;
    for line in raw.split_inclusive('\n') {
        let mut scan_from = 0;
        if !in_quote {
            let trimmed = line.trim_start();
            let trimmed = trimmed.strip_prefix("- ").unwrap_or(trimmed);
            if trimmed.starts_with("Action:") {
                scan_from = line.len() - trimmed.len();
                starts.push(offset + scan_from);
            }
        }
        if starts.is_empty() {
            offset += line.len();
            continue;
        }
        // Track multi-line quoted values so that SQL text containing
        // "Action:" at a line start is not mistaken for a second action.
        let mut escaped = false;
        for c in line[scan_from..].chars() {
            match c {
                '\\' if in_quote && !escaped => escaped = true,
                '"' if !escaped => in_quote = !in_quote,
                _ => escaped = false,
            }
        }
        offset += line.len();
    }
    match starts.len() {
        0 => return Err(invalid("no Action line")),
        1 => {}
        n => return Err(invalid(format!("{n} Action lines"))),
    }
    let start = starts[0];
    let thought = raw[..start].trim().to_string();
    let body = raw[start + "Action:".len()..].trim_start();
    let (call, rest) = parse_call_body(body)?;
    let rest_of_line = rest.split('\n').next().unwrap_or("");
    if !rest_of_line.trim().is_empty() {
        return Err(invalid(format!(
            "trailing text after action: {}",
            rest_of_line.trim()
        )));
    }
    Ok((thought, call))
}

fn parse_call_body(body: &str) -> Result<(Call, &str), ParseError> {
    let open = body.find('(').ok_or_else(|| invalid("missing '('"))?;
    let name = body[..open].trim();
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(invalid(format!("bad action name {name:?}")));
    }
    let chars: Vec<(usize, char)> = body[open + 1..]
        .char_indices()
        .map(|(i, c)| (i + open + 1, c))
        .collect();
    let mut i = 0;
    let mut args = Vec::new();
    let skip_ws = |i: &mut usize| {
        while *i < chars.len() && chars[*i].1.is_whitespace() {
            *i += 1;
        }
    };
    loop {
        skip_ws(&mut i);
        if i >= chars.len() {
            return Err(invalid("unterminated argument list"));
        }
        if chars[i].1 == ')' {
            if !args.is_empty() {
                return Err(invalid("trailing comma"));
            }
            let end = chars[i].0 + 1;
            return Ok((
                Call {
                    name: name.to_string(),
                    args,
                },
                &body[end..],
            ));
        }
        let key_start = i;
        while i < chars.len() && (chars[i].1.is_ascii_alphanumeric() || chars[i].1 == '_') {
            i += 1;
        }
        let key: String = chars[key_start..i].iter().map(|(_, c)| c).collect();
        if key.is_empty() {
            return Err(invalid("expected argument name"));
        }
        skip_ws(&mut i);
        if i >= chars.len() || chars[i].1 != '=' {
            return Err(invalid(format!("expected '=' after {key}")));
        }
        i += 1;
        skip_ws(&mut i);
        if i >= chars.len() {
            return Err(invalid("missing value"));
        }
        let value = if matches!(chars[i].1, '"' | '\'') {
            let q = chars[i].1;
            i += 1;
            let mut v = String::new();
            loop {
                let Some(&(_, c)) = chars.get(i) else {
                    return Err(invalid("unterminated string"));
                };
                i += 1;
                match c {
                    '\\' => {
                        let Some(&(_, e)) = chars.get(i) else {
                            return Err(invalid("dangling escape"));
                        };
                        i += 1;
                        v.push(match e {
                            'n' => '\n',
                            't' => '\t',
                            'r' => '\r',
                            other => other,
                        });
                    }
                    c if c == q => break,
                    c => v.push(c),
                }
            }
            v
        } else {
            let s = i;
            while i < chars.len() && !matches!(chars[i].1, ',' | ')') && !chars[i].1.is_whitespace()
            {
                i += 1;
            }
            let v: String = chars[s..i].iter().map(|(_, c)| c).collect();
            if v.is_empty() {
                return Err(invalid(format!("empty value for {key}")));
            }
            v
        };
        if args.iter().any(|(k, _)| *k == key) {
            return Err(invalid(format!("duplicate argument {key}")));
        }
        args.push((key, value));
        skip_ws(&mut i);
        match chars.get(i).map(|(_, c)| *c) {
            Some(',') => i += 1,
            Some(')') => {
                let end = chars[i].0 + 1;
                return Ok((
                    Call {
                        name: name.to_string(),
                        args,
                    },
                    &body[end..],
                ));
            }
            _ => return Err(invalid("expected ',' or ')'")),
        }
    }
}

/// Parse a SQL action. Only the configured dialect's exec verb and
/// `Terminate` are accepted.
pub fn parse_action(raw: &str, dialect: Dialect) -> Result<AgentAction, ParseError> {
    let (thought, call) = parse_call(raw)?;
    let kind = if call.name == dialect.exec_verb() {
        let sql = call
            .arg(&["sql_query", "sql"])
            .ok_or_else(|| invalid("missing sql_query"))?;
        if sql.trim().is_empty() {
            return Err(invalid("empty sql_query"));
        }
        ActionKind::ExecSql {
            sql: sql.trim().to_string(),
            save_path: call.arg(&["save_path"]).map(str::to_string),
        }
    } else if call.name == "Terminate" {
        let output = call
            .arg(&["output", "output_path"])
            .ok_or_else(|| invalid("missing output"))?;
        ActionKind::Terminate {
            output: output.to_string(),
        }
    } else if Dialect::ALL.iter().any(|d| d.exec_verb() == call.name) {
        return Err(invalid(format!(
            "{} is not enabled for this episode",
            call.name
        )));
    } else {
        return Err(invalid(format!("unknown action {}", call.name)));
    };
    Ok(AgentAction { kind, thought })
}

/// JSON payload of a response: a fenced block if present, else the span
/// from the first `{` to the last `}`.
pub fn extract_json(raw: &str) -> Option<&str> {
    if let Some(start) = raw.find("```") {
        let after = &raw[start + 3..];
        let body_start = after.find('\n').map_or(0, |n| n + 1);
        let header = &after[..body_start];
        if header.trim().is_empty() || header.trim().eq_ignore_ascii_case("json") {
            let body = &after[body_start..];
            if let Some(end) = body.find("```") {
                return Some(body[..end].trim());
            }
        }
    }
    let open = raw.find('{')?;
    let close = raw.rfind('}')?;
    (close > open).then(|| &raw[open..=close])
}

fn json_object(raw: &str, err: fn(String) -> ParseError) -> Result<Map<String, Json>, ParseError> {
    let text = extract_json(raw).ok_or_else(|| err("no JSON object".into()))?;
    match serde_json::from_str::<Json>(text) {
        Ok(Json::Object(m)) => Ok(m),
        Ok(_) => Err(err("not a JSON object".into())),
        Err(e) => Err(err(e.to_string())),
    }
}

fn exact_keys(
    map: &Map<String, Json>,
    keys: &[&str],
    err: fn(String) -> ParseError,
) -> Result<(), ParseError> {
    for k in keys {
        if !map.contains_key(*k) {
            return Err(err(format!("missing key {k}")));
        }
    }
    if let Some(extra) = map.keys().find(|k| !keys.contains(&k.as_str())) {
        return Err(err(format!("unexpected key {extra}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<String>,
    pub expected_csv_format: String,
}

pub fn parse_plan(raw: &str) -> Result<Plan, ParseError> {
    let map = json_object(raw, ParseError::PlanParse)?;
    exact_keys(
        &map,
        &["plan", "expected_csv_format"],
        ParseError::PlanParse,
    )?;
    let steps: Vec<String> = match &map["plan"] {
        Json::Array(items) => items
            .iter()
            .map(|s| s.as_str().map(|s| s.trim().to_string()))
            .collect::<Option<_>>()
            .ok_or_else(|| ParseError::PlanParse("plan steps must be strings".into()))?,
        _ => return Err(ParseError::PlanParse("plan must be a list".into())),
    };
    if steps.is_empty() || steps.iter().any(String::is_empty) {
        return Err(ParseError::PlanParse(
            "plan needs at least one non-empty step".into(),
        ));
    }
    let expected_csv_format = map["expected_csv_format"]
        .as_str()
        .ok_or_else(|| ParseError::PlanParse("expected_csv_format must be a string".into()))?
        .to_string();
    Ok(Plan {
        steps,
        expected_csv_format,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanVerdict {
    pub update_plan: bool,
    pub feedback: String,
}

pub fn parse_plan_verdict(raw: &str) -> Result<PlanVerdict, ParseError> {
    let map = json_object(raw, ParseError::VerdictParse)?;
    if let Some(extra) = map
        .keys()
        .find(|k| !matches!(k.as_str(), "update_plan" | "feedback"))
    {
        return Err(ParseError::VerdictParse(format!("unexpected key {extra}")));
    }
    let update_plan = map
        .get("update_plan")
        .and_then(Json::as_bool)
        .ok_or_else(|| ParseError::VerdictParse("update_plan must be a boolean".into()))?;
    let feedback = match map.get("feedback") {
        None | Some(Json::Null) => String::new(),
        Some(Json::String(s)) => s.clone(),
        Some(other) => other.to_string(),
    };
    Ok(PlanVerdict {
        update_plan,
        feedback,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub valid_result: bool,
    pub columns_not_needed: Vec<String>,
    pub result_empty: bool,
    pub suggest_fix: String,
}

pub fn parse_validation(raw: &str) -> Result<ValidationVerdict, ParseError> {
    let map = json_object(raw, ParseError::VerdictParse)?;
    exact_keys(
        &map,
        &[
            "valid_result",
            "columns_not_needed",
            "result_empty",
            "suggest_fix",
        ],
        ParseError::VerdictParse,
    )?;
    let flag = |k: &str| {
        map[k]
            .as_bool()
            .ok_or_else(|| ParseError::VerdictParse(format!("{k} must be a boolean")))
    };
    let columns_not_needed = match &map["columns_not_needed"] {
        Json::Array(items) => items
            .iter()
            .map(|v| v.as_str().map(str::to_string))
            .collect::<Option<_>>()
            .ok_or_else(|| {
                ParseError::VerdictParse("columns_not_needed must list strings".into())
            })?,
        _ => {
            return Err(ParseError::VerdictParse(
                "columns_not_needed must be a list".into(),
            ))
        }
    };
    let suggest_fix = match &map["suggest_fix"] {
        Json::String(s) => s.clone(),
        Json::Null => String::new(),
        _ => {
            return Err(ParseError::VerdictParse(
                "suggest_fix must be a string".into(),
            ))
        }
    };
    Ok(ValidationVerdict {
        valid_result: flag("valid_result")?,
        columns_not_needed,
        result_empty: flag("result_empty")?,
        suggest_fix,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlCritique {
    pub reasoning: String,
    pub revised_sql: Option<String>,
}

/// `[Reasoning]` then an optional `[SQL]` section holding an action, a
/// fenced block or bare SQL.
pub fn parse_sql_critique(raw: &str, dialect: Dialect) -> Result<SqlCritique, ParseError> {
    let r = raw
        .find("[Reasoning]")
        .ok_or_else(|| ParseError::CritiqueParse("missing [Reasoning]".into()))?;
    let after = &raw[r + "[Reasoning]".len()..];
    let (reasoning, sql_part) = match after.find("[SQL]") {
        Some(s) => (&after[..s], Some(&after[s + "[SQL]".len()..])),
        None => (after, None),
    };
    let revised_sql = match sql_part.map(str::trim).filter(|s| !s.is_empty()) {
        None => None,
        Some(part) => match parse_action(part, dialect) {
            Ok(AgentAction {
                kind: ActionKind::ExecSql { sql, .. },
                ..
            }) => Some(sql),
            Ok(_) => {
                return Err(ParseError::CritiqueParse(
                    "[SQL] holds a non-SQL action".into(),
                ))
            }
            Err(_) => {
                Some(extract_sql(part).map_err(|e| ParseError::CritiqueParse(e.to_string()))?)
            }
        },
    };
    Ok(SqlCritique {
        reasoning: reasoning.trim().to_string(),
        revised_sql,
    })
}

/// Whether a syntax-gate answer asks for documentation.
pub fn gate_affirmative(raw: &str) -> bool {
    let t = raw.trim_start().to_ascii_lowercase();
    t.starts_with("yes") || t.starts_with("\"yes") || t.starts_with("[yes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn actions() {
        let a = parse_action("Action: Terminate(output=\"result.csv\")", Dialect::Sqlite).unwrap();
        assert_eq!(
            a.kind,
            ActionKind::Terminate {
                output: "result.csv".into()
            }
        );
        let a = parse_action(
            "Thought: count them\nAction: SQLITE_EXEC_SQL(sql_query=\"SELECT \\\"a\\\",\n 'x' FROM t\", is_save=True, save_path=\"/out/result.csv\")",
            Dialect::Sqlite,
        )
        .unwrap();
        assert_eq!(a.thought, "Thought: count them");
        assert_eq!(
            a.kind,
            ActionKind::ExecSql {
                sql: "SELECT \"a\",\n 'x' FROM t".into(),
                save_path: Some("/out/result.csv".into())
            }
        );
        let bq = "Action: BIGQUERY_EXEC_SQL(sql_query=\"SELECT 1\", is_save=False)";
        assert!(matches!(
            parse_action(bq, Dialect::Bigquery).unwrap().kind,
            ActionKind::ExecSql { .. }
        ));
        assert!(parse_action(bq, Dialect::Sqlite).is_err());
    }

    #[test]
    fn invalid_actions() {
        for bad in [
            "Action: DROP_TABLE(name=\"t\")",
            "no action here",
            "Action: Terminate(output=\"a\")\nAction: Terminate(output=\"b\")",
            "Action: SQLITE_EXEC_SQL(sql_query=\"SELECT 1)",
            "Action: SQLITE_EXEC_SQL(save_path=\"x\")",
            "Action: Terminate(output=\"a\") and more",
            "Action: Terminate output=a",
            "Action: SQLITE_EXEC_SQL(sql_query=\"\")",
            "Action: Terminate(output=\"a\", output=\"b\")",
        ] {
            assert!(
                matches!(
                    parse_action(bad, Dialect::Sqlite),
                    Err(ParseError::InvalidAction(_))
                ),
                "{bad}"
            );
        }
        // "Action:" inside a quoted value is not a second action line.
        let nested = "Action: SQLITE_EXEC_SQL(sql_query=\"SELECT 1\nAction: x\")";
        assert!(parse_action(nested, Dialect::Sqlite).is_ok());
    }

    #[test]
    fn plans() {
        let p = parse_plan(
            r#"{"plan":["find table","aggregate"],"expected_csv_format":"count (integer)"}"#,
        )
        .unwrap();
        assert_eq!(p.steps.len(), 2);
        let fenced = "Here you go:\n```json\n{\"plan\": [\"a\"], \"expected_csv_format\": \"x\"}\n```\nThanks";
        assert_eq!(parse_plan(fenced).unwrap().steps, vec!["a"]);
        assert!(parse_plan(r#"{"plan":["a"]}"#).is_err());
        assert!(parse_plan(r#"{"plan":[],"expected_csv_format":"x"}"#).is_err());
        assert!(parse_plan(r#"{"plan":["a"],"expected_csv_format":"x","extra":1}"#).is_err());
        assert!(parse_plan("no json").is_err());
    }

    #[test]
    fn verdicts() {
        let v = parse_validation(
            r#"{"valid_result": true, "columns_not_needed": [], "result_empty": false, "suggest_fix": ""}"#,
        )
        .unwrap();
        assert!(v.valid_result && !v.result_empty);
        assert!(parse_validation(r#"{"valid_result": true}"#).is_err());
        let c = parse_plan_verdict(r#"{"update_plan": true, "feedback": "add a filter"}"#).unwrap();
        assert!(c.update_plan);
        assert_eq!(c.feedback, "add a filter");
        assert!(parse_plan_verdict(r#"{"update_plan": "maybe"}"#).is_err());
    }

    #[test]
    fn sql_critiques() {
        let both =
            "[Reasoning]\nMissing filter.\n[SQL]\nAction: SQLITE_EXEC_SQL(sql_query=\"SELECT 2\")";
        assert_eq!(
            parse_sql_critique(both, Dialect::Sqlite)
                .unwrap()
                .revised_sql
                .as_deref(),
            Some("SELECT 2")
        );
        let fenced = "[Reasoning] ok\n[SQL]\n```sql\nSELECT 3;\n```";
        assert_eq!(
            parse_sql_critique(fenced, Dialect::Sqlite)
                .unwrap()
                .revised_sql
                .as_deref(),
            Some("SELECT 3")
        );
        let only = parse_sql_critique("[Reasoning] looks right", Dialect::Sqlite).unwrap();
        assert_eq!(only.revised_sql, None);
        assert!(parse_sql_critique("fine", Dialect::Sqlite).is_err());
        assert!(gate_affirmative("Yes, I need TIMESTAMP docs"));
        assert!(!gate_affirmative("No clarification needed"));
    }
}
