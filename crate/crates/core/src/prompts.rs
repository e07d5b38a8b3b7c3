//! Prompt templates and the parsers for what models send back.
//!
//! Templates live in `assets/templates/` with `{name}` placeholders and are
//! filled in a single pass, so braces inside substituted text are never
//! re-expanded.

use std::collections::HashMap;

use crate::error::GatewayError;
use crate::model::{Action, Document, Observation, Trajectory};

pub const TEMPLATE_VERSION: &str = "1";

pub const SELF_INSTRUCT_TEMPLATE: &str = include_str!("../assets/templates/self_instruct.txt");
pub const NEW_TASK_TEMPLATE: &str = include_str!("../assets/templates/new_task.txt");
pub const SUMMARIZE_TEMPLATE: &str = include_str!("../assets/templates/summarize.txt");
pub const FILTER_TEMPLATE: &str = include_str!("../assets/templates/filter.txt");
pub const ACT_TEMPLATE: &str = include_str!("../assets/templates/act.txt");
pub const QUERY_TEMPLATE: &str = include_str!("../assets/templates/query.txt");
const SYSTEM_TEMPLATE: &str = include_str!("../assets/templates/system.txt");

pub const REFERENCE_HEADER: &str = "ADDITIONAL INFORMATION FOR REFERENCE:";

/// Appended to a prompt when the first answer could not be parsed.
pub const FORMAT_REMINDER: &str =
    "\nRemember to answer exactly in the format:\nREASON:\n<your reason>\nACTION:\n<your action>\n";
pub const LIST_REMINDER: &str = "\nRemember to output every task on its own line starting with \"* \".\n";
pub const FENCE_REMINDER: &str = "\nRemember to wrap your answer with ```.\n";
pub const YES_NO_REMINDER: &str = "\nAnswer with a single word: yes or no.\n";

pub fn default_system_message() -> &'static str {
    SYSTEM_TEMPLATE.trim_end()
}

/// Fills `{name}` placeholders. Unknown placeholders are an error; braces
/// that do not enclose an identifier are copied through.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> Result<String, GatewayError> {
    let vars: HashMap<&str, &str> = vars.iter().copied().collect();
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let ident_len = after
            .find(|c: char| !(c.is_ascii_lowercase() || c == '_'))
            .unwrap_or(after.len());
        if ident_len > 0 && after[ident_len..].starts_with('}') {
            let name = &after[..ident_len];
            let value = vars
                .get(name)
                .ok_or_else(|| GatewayError::Template(format!("no value for {{{name}}}")))?;
            out.push_str(value);
            rest = &after[ident_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn fill_known(template: &str, vars: &[(&str, &str)]) -> String {
    fill(template, vars).expect("bundled template placeholders are all supplied")
}

/// Anything usable as one `(observation, action)` turn of interaction history.
pub trait HistoryTurn {
    fn observation_text(&self) -> &str;
    fn action_text(&self) -> &str;
}

impl HistoryTurn for (Observation, Action) {
    fn observation_text(&self) -> &str {
        &self.0.text
    }
    fn action_text(&self) -> &str {
        &self.1.raw
    }
}

impl HistoryTurn for (String, String) {
    fn observation_text(&self) -> &str {
        &self.0
    }
    fn action_text(&self) -> &str {
        &self.1
    }
}

impl HistoryTurn for (&str, &str) {
    fn observation_text(&self) -> &str {
        self.0
    }
    fn action_text(&self) -> &str {
        self.1
    }
}

/// `Observation k:` / `Action k+1:` entries, oldest first.
pub fn render_history<H: HistoryTurn>(history: &[H]) -> String {
    let mut out = String::new();
    for (k, turn) in history.iter().enumerate() {
        out.push_str(&format!(
            "Observation {k}:\n{}\nAction {}:\n{}\n",
            turn.observation_text(),
            k + 1,
            turn.action_text()
        ));
    }
    out
}

/// Self-instruct prompt asking for `count` starred tasks. `exemplars` are
/// optional high-quality tasks shown to the model.
pub fn render_self_instruct(doc: &Document, count: usize, exemplars: &[String]) -> String {
    let count = count.max(1);
    let noun = if count == 1 { "task" } else { "tasks" };
    let exemplars = if exemplars.is_empty() {
        String::new()
    } else {
        let mut s = String::from("Here are examples of good tasks:\n");
        for e in exemplars {
            s.push_str(&format!("* {e}\n"));
        }
        s.push('\n');
        s
    };
    fill_known(
        SELF_INSTRUCT_TEMPLATE,
        &[
            ("documentation", &doc.text),
            ("exemplars", &exemplars),
            ("count", &count.to_string()),
            ("task_noun", noun),
        ],
    )
}

/// Up to `limit` lines that start with `*`, with the marker stripped.
pub fn parse_starred_list(text: &str, limit: usize) -> Result<Vec<String>, GatewayError> {
    let items: Vec<String> = text
        .lines()
        .filter_map(|l| l.trim().strip_prefix('*'))
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .take(limit)
        .collect();
    if items.is_empty() {
        return Err(GatewayError::Parse("no starred list items".into()));
    }
    Ok(items)
}

pub fn render_new_task(traj: &Trajectory) -> String {
    fill_known(NEW_TASK_TEMPLATE, &[("trajectory", &traj.render())])
}

pub fn render_summarize(traj: &Trajectory) -> String {
    fill_known(SUMMARIZE_TEMPLATE, &[("trajectory", &traj.render())])
}

/// Payload of the first triple-backtick fence. A bare language tag on the
/// opening line is dropped.
pub fn extract_fenced(text: &str) -> Result<String, GatewayError> {
    let start = text
        .find("```")
        .ok_or_else(|| GatewayError::Parse("no ``` fence".into()))?;
    let body = &text[start + 3..];
    let end = body
        .find("```")
        .ok_or_else(|| GatewayError::Parse("unterminated ``` fence".into()))?;
    let mut payload = &body[..end];
    if let Some((first, rest)) = payload.split_once('\n') {
        let tag = first.trim();
        if !tag.is_empty() && !tag.contains(char::is_whitespace) && !rest.trim().is_empty() {
            payload = rest;
        }
    }
    let payload = payload.trim();
    if payload.is_empty() {
        return Err(GatewayError::Parse("empty ``` fence".into()));
    }
    Ok(payload.to_string())
}

pub fn render_filter(instruction: &str, traj: &Trajectory) -> String {
    fill_known(
        FILTER_TEMPLATE,
        &[("instruction", instruction), ("trajectory", &traj.render())],
    )
}

/// Reads a yes/no verdict from the first word of the answer.
pub fn parse_yes_no(text: &str) -> Result<bool, GatewayError> {
    let first: String = text
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    match first.as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(GatewayError::Parse(format!("expected yes or no, got {:?}", text.trim()))),
    }
}

/// Action-prediction prompt. With no `references` this is the plain
/// inference prompt; otherwise the rendered examples go in a reference block
/// ahead of the objective.
pub fn render_act<H: HistoryTurn>(
    system_message: &str,
    instruction: &str,
    history: &[H],
    observation: &str,
    references: &[String],
) -> String {
    let reference = if references.is_empty() {
        String::new()
    } else {
        format!("{REFERENCE_HEADER}\n{}\n", references.join("\n"))
    };
    fill_known(
        ACT_TEMPLATE,
        &[
            ("system_message", system_message),
            ("reference", &reference),
            ("instruction", instruction),
            ("history", &render_history(history)),
            ("observation", observation),
        ],
    )
}

pub fn render_query<H: HistoryTurn>(
    system_message: &str,
    instruction: &str,
    history: &[H],
    observation: &str,
) -> String {
    fill_known(
        QUERY_TEMPLATE,
        &[
            ("system_message", system_message),
            ("instruction", instruction),
            ("history", &render_history(history)),
            ("observation", observation),
        ],
    )
}

/// How a stored example is shown to the model as a reference.
pub fn render_reference(ordinal: usize, instruction: &str, traj: &Trajectory) -> String {
    format!("Example {ordinal}:\nTask: {instruction}\n{}", traj.render())
}

/// Splits a `REASON: ... ACTION: ...` answer on the last `ACTION:` marker.
pub fn parse_reason_action(text: &str) -> Result<(String, Action), GatewayError> {
    let pos = text
        .rfind("ACTION:")
        .ok_or_else(|| GatewayError::Parse("missing ACTION: marker".into()))?;
    let action = text[pos + "ACTION:".len()..].trim();
    if action.is_empty() {
        return Err(GatewayError::Parse("empty action".into()));
    }
    let head = &text[..pos];
    let reason = match head.find("REASON:") {
        Some(r) => &head[r + "REASON:".len()..],
        None => head,
    };
    Ok((reason.trim().to_string(), Action::parse(action)))
}

pub fn format_reason_action(reason: &str, action: &Action) -> String {
    format!("REASON:\n{reason}\nACTION:\n{}", action.raw)
}
