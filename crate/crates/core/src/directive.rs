//! Structured directive blocks embedded in manager output.
//!
//! A block is a fenced region that starts with a line `` ```tbc:<kind> `` and
//! ends with a line consisting of exactly `` ``` ``; both fences sit at column
//! zero. The body is a tiny YAML-like language:
//!
//! ````text
//! ```tbc:milestone
//! id: 1.2
//! title: Build parser
//! budget: 5
//! description: |
//!   Tokenizer plus recursive-descent parser.
//!   Error recovery is out of scope.
//! ```
//! ````
//!
//! `key: |` introduces a block value whose lines are indented two spaces past
//! the key. Trailing blank lines of a block value are dropped. List items in
//! `schedule` blocks start with `- ` and their keys are indented two spaces.
//!
//! Prose outside blocks is ignored. Malformed blocks produce a
//! [`ParseError`] and never abort extraction of the remaining blocks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AgentRole, MilestoneId, Outcome, Verdict};

const OPEN_PREFIX: &str = "```tbc:";
const FENCE: &str = "```";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectiveKind {
    Milestone,
    Schedule,
    Claim,
    Verdict,
    Complete,
}

impl DirectiveKind {
    pub const ALL: [DirectiveKind; 5] = [
        DirectiveKind::Milestone,
        DirectiveKind::Schedule,
        DirectiveKind::Claim,
        DirectiveKind::Verdict,
        DirectiveKind::Complete,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            DirectiveKind::Milestone => "milestone",
            DirectiveKind::Schedule => "schedule",
            DirectiveKind::Claim => "claim",
            DirectiveKind::Verdict => "verdict",
            DirectiveKind::Complete => "complete",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        DirectiveKind::ALL.into_iter().find(|k| k.tag() == tag)
    }
}

impl fmt::Display for DirectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MilestoneDirective {
    pub id: Option<MilestoneId>,
    pub title: String,
    pub description: String,
    pub cycle_budget: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisibilityMode {
    Full,
    Focused(Vec<u64>),
    Blind,
}

impl VisibilityMode {
    /// Whether an issue with this id is visible under the mode.
    pub fn admits(&self, issue_id: u64) -> bool {
        match self {
            VisibilityMode::Full => true,
            VisibilityMode::Blind => false,
            VisibilityMode::Focused(ids) => ids.contains(&issue_id),
        }
    }
}

impl fmt::Display for VisibilityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VisibilityMode::Full => f.write_str("full"),
            VisibilityMode::Blind => f.write_str("blind"),
            VisibilityMode::Focused(ids) => {
                f.write_str("focused=")?;
                for (i, id) in ids.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{id}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for VisibilityMode {
    type Err = String;

    /// Accepts `full`, `blind` and `focused=<id>[,<id>...]`, as used both in
    /// schedule blocks and in the `TBC_VISIBILITY` environment variable.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "full" => return Ok(VisibilityMode::Full),
            "blind" => return Ok(VisibilityMode::Blind),
            _ => {}
        }
        let Some(list) = lower.strip_prefix("focused=") else {
            return Err(format!("invalid visibility {s:?}"));
        };
        let ids = list
            .split(',')
            .map(|p| match p.trim().parse::<u64>() {
                Ok(n) if n >= 1 => Ok(n),
                _ => Err(format!("invalid issue id {p:?} in visibility")),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(VisibilityMode::Focused(ids))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScheduleItem {
    Task {
        worker_name: String,
        task: String,
        visibility: VisibilityMode,
        delay_before_seconds: u64,
    },
    Delay {
        duration_seconds: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Directive {
    Milestone(MilestoneDirective),
    Schedule { items: Vec<ScheduleItem> },
    CompletionClaim { summary: String },
    VerificationVerdict { verdict: Verdict },
    ProjectCompletion { summary: String },
}

impl Directive {
    pub fn kind(&self) -> DirectiveKind {
        match self {
            Directive::Milestone(_) => DirectiveKind::Milestone,
            Directive::Schedule { .. } => DirectiveKind::Schedule,
            Directive::CompletionClaim { .. } => DirectiveKind::Claim,
            Directive::VerificationVerdict { .. } => DirectiveKind::Verdict,
            Directive::ProjectCompletion { .. } => DirectiveKind::Complete,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("line {line}: {message}")]
pub struct ParseError {
    /// 1-based line of the block's opening fence.
    pub line: usize,
    pub kind: Option<DirectiveKind>,
    pub message: String,
}

/// Everything found in one piece of agent output.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub directives: Vec<Directive>,
    pub errors: Vec<ParseError>,
    pub warnings: Vec<String>,
}

/// Fence tag of shell-command blocks used by the LLM runner's tool loop.
/// They are not directives and are skipped silently.
pub const TOOL_TAG: &str = "cmd";

/// Canonical form of free text inside directives: no carriage returns and
/// no trailing whitespace-only lines. The serializer round-trips exactly
/// the texts that are already canonical.
pub fn normalize_text(text: &str) -> String {
    let cleaned = text.replace('\r', "");
    let mut lines: Vec<&str> = cleaned.split('\n').collect();
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    lines.join("\n")
}

pub fn is_valid_worker_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

/// Extracts every directive block in document order.
pub fn extract_directives(text: &str) -> Extraction {
    let lines: Vec<&str> = text
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .collect();
    let mut out = Extraction::default();
    let mut i = 0;
    while i < lines.len() {
        let Some(tag) = lines[i].trim_end().strip_prefix(OPEN_PREFIX) else {
            i += 1;
            continue;
        };
        let tag = tag.trim();
        let open_line = i + 1;
        let Some(close) = (i + 1..lines.len()).find(|&j| lines[j].trim_end() == FENCE) else {
            out.errors.push(ParseError {
                line: open_line,
                kind: DirectiveKind::from_tag(tag),
                message: "unterminated directive block".into(),
            });
            break;
        };
        let body = &lines[i + 1..close];
        i = close + 1;

        if tag == TOOL_TAG {
            continue;
        }
        let Some(kind) = DirectiveKind::from_tag(tag) else {
            out.errors.push(ParseError {
                line: open_line,
                kind: None,
                message: format!("unknown directive kind: {tag}"),
            });
            continue;
        };
        let mut warnings = Vec::new();
        let parsed = parse_body(body, open_line + 1)
            .and_then(|b| build_directive(kind, b, &mut warnings));
        for w in &warnings {
            tracing::warn!(line = open_line, kind = %kind, "{w}");
        }
        out.warnings
            .extend(warnings.into_iter().map(|w| format!("line {open_line}: {w}")));
        match parsed {
            Ok(d) => out.directives.push(d),
            Err(message) => out.errors.push(ParseError {
                line: open_line,
                kind: Some(kind),
                message,
            }),
        }
    }
    out
}

#[derive(Debug)]
struct Entry {
    key: String,
    value: String,
    line: usize,
}

#[derive(Debug, Default)]
struct Body {
    entries: Vec<Entry>,
    items: Vec<Vec<Entry>>,
}

fn indent(line: &str) -> usize {
    line.bytes().take_while(|&b| b == b' ').count()
}

fn parse_body(lines: &[&str], first_line: usize) -> Result<Body, String> {
    let mut body = Body::default();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        if line.trim().is_empty() {
            i += 1;
            continue;
        }
        if indent(line) != 0 {
            return Err(format!("line {}: unexpected indentation", first_line + i));
        }
        if let Some(rest) = line.strip_prefix("- ") {
            let mut group = Vec::new();
            let (entry, next) = parse_entry(lines, i, rest, 2, first_line)?;
            group.push(entry);
            i = next;
            while i < lines.len() {
                let l = lines[i];
                if l.trim().is_empty() {
                    i += 1;
                    continue;
                }
                match indent(l) {
                    0 => break,
                    2 => {
                        let (entry, next) = parse_entry(lines, i, &l[2..], 2, first_line)?;
                        group.push(entry);
                        i = next;
                    }
                    _ => {
                        return Err(format!("line {}: unexpected indentation", first_line + i))
                    }
                }
            }
            body.items.push(group);
        } else {
            let (entry, next) = parse_entry(lines, i, line, 0, first_line)?;
            body.entries.push(entry);
            i = next;
        }
    }
    Ok(body)
}

fn parse_entry(
    lines: &[&str],
    at: usize,
    text: &str,
    key_indent: usize,
    first_line: usize,
) -> Result<(Entry, usize), String> {
    let line_no = first_line + at;
    let Some((key, value)) = text.split_once(':') else {
        return Err(format!("line {line_no}: expected `key: value`"));
    };
    let key = key.trim();
    if key.is_empty()
        || !key
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
    {
        return Err(format!("line {line_no}: invalid key {key:?}"));
    }
    let value = value.trim();
    if value != "|" {
        let entry = Entry {
            key: key.to_string(),
            value: value.to_string(),
            line: line_no,
        };
        return Ok((entry, at + 1));
    }
    let content_indent = key_indent + 2;
    let mut collected = Vec::new();
    let mut j = at + 1;
    while j < lines.len() {
        let l = lines[j];
        let ind = indent(l);
        if ind >= content_indent {
            collected.push(&l[content_indent..]);
        } else if l.trim().is_empty() {
            collected.push("");
        } else {
            break;
        }
        j += 1;
    }
    while collected.last().is_some_and(|l| l.trim().is_empty()) {
        collected.pop();
    }
    let entry = Entry {
        key: key.to_string(),
        value: collected.join("\n"),
        line: line_no,
    };
    Ok((entry, j))
}

/// Key lookup over one group of entries. Duplicate keys resolve to the last
/// occurrence; keys not named in `known` are reported as warnings.
struct Fields<'a> {
    entries: &'a [Entry],
}

impl<'a> Fields<'a> {
    fn new(entries: &'a [Entry], known: &[&str], warnings: &mut Vec<String>) -> Self {
        for (idx, e) in entries.iter().enumerate() {
            if !known.contains(&e.key.as_str()) {
                warnings.push(format!("ignoring unknown key `{}` (line {})", e.key, e.line));
            } else if entries[idx + 1..].iter().any(|later| later.key == e.key) {
                warnings.push(format!("duplicate key `{}` (line {}); last wins", e.key, e.line));
            }
        }
        Fields { entries }
    }

    fn get(&self, key: &str) -> Option<&'a str> {
        self.entries
            .iter()
            .rev()
            .find(|e| e.key == key)
            .map(|e| e.value.as_str())
    }

    fn require(&self, key: &str) -> Result<&'a str, String> {
        self.get(key).ok_or_else(|| format!("missing key: {key}"))
    }
}

fn parse_uint<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| format!("{key} must be a non-negative integer, got {value:?}"))
}

fn build_directive(
    kind: DirectiveKind,
    body: Body,
    warnings: &mut Vec<String>,
) -> Result<Directive, String> {
    if kind != DirectiveKind::Schedule && !body.items.is_empty() {
        return Err(format!("unexpected list item in {kind} block"));
    }
    match kind {
        DirectiveKind::Milestone => {
            let f = Fields::new(&body.entries, &["id", "title", "budget", "description"], warnings);
            let id = match f.get("id").map(str::trim) {
                None | Some("") => None,
                Some(text) => Some(
                    text.parse::<MilestoneId>()
                        .map_err(|_| format!("invalid milestone id {text:?}"))?,
                ),
            };
            let title = f.require("title")?;
            if title.trim().is_empty() {
                return Err("milestone title is empty".into());
            }
            let cycle_budget: u32 = parse_uint("budget", f.require("budget")?)?;
            if cycle_budget < 1 {
                return Err("budget must be >= 1".into());
            }
            Ok(Directive::Milestone(MilestoneDirective {
                id,
                title: title.to_string(),
                description: f.get("description").unwrap_or_default().to_string(),
                cycle_budget,
            }))
        }
        DirectiveKind::Schedule => {
            if !body.entries.is_empty() {
                for e in &body.entries {
                    warnings.push(format!("ignoring top-level key `{}` in schedule", e.key));
                }
            }
            if body.items.is_empty() {
                return Err("schedule has no items".into());
            }
            let items = body
                .items
                .iter()
                .map(|group| build_schedule_item(group, warnings))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Directive::Schedule { items })
        }
        DirectiveKind::Claim | DirectiveKind::Complete => {
            let f = Fields::new(&body.entries, &["summary"], warnings);
            let summary = f.get("summary").unwrap_or_default().to_string();
            Ok(if kind == DirectiveKind::Claim {
                Directive::CompletionClaim { summary }
            } else {
                Directive::ProjectCompletion { summary }
            })
        }
        DirectiveKind::Verdict => {
            let f = Fields::new(&body.entries, &["outcome", "feedback"], warnings);
            let outcome = match f.require("outcome")?.trim().to_ascii_lowercase().as_str() {
                "pass" => Outcome::Pass,
                "fail" => Outcome::Fail,
                other => return Err(format!("outcome must be pass or fail, got {other:?}")),
            };
            let feedback = f.get("feedback").unwrap_or_default().to_string();
            if outcome == Outcome::Fail && feedback.trim().is_empty() {
                return Err("fail verdict requires feedback".into());
            }
            Ok(Directive::VerificationVerdict {
                verdict: Verdict { outcome, feedback },
            })
        }
    }
}

fn build_schedule_item(group: &[Entry], warnings: &mut Vec<String>) -> Result<ScheduleItem, String> {
    let first = &group[0];
    match first.key.as_str() {
        "worker" => {
            let f = Fields::new(group, &["worker", "task", "visibility", "delay"], warnings);
            let worker_name = f.require("worker")?.trim().to_string();
            if !is_valid_worker_name(&worker_name) {
                return Err(format!("invalid worker name {worker_name:?}"));
            }
            let task = f.require("task")?;
            if task.trim().is_empty() {
                return Err(format!("empty task for worker {worker_name}"));
            }
            let visibility = match f.get("visibility") {
                None => VisibilityMode::Full,
                Some(v) => v.parse()?,
            };
            let delay_before_seconds = match f.get("delay") {
                None => 0,
                Some(v) => parse_uint("delay", v)?,
            };
            Ok(ScheduleItem::Task {
                worker_name,
                task: task.to_string(),
                visibility,
                delay_before_seconds,
            })
        }
        "delay" => {
            let f = Fields::new(group, &["delay"], warnings);
            let duration_seconds: u64 = parse_uint("delay", f.require("delay")?)?;
            if duration_seconds < 1 {
                return Err("delay item must be >= 1 second".into());
            }
            Ok(ScheduleItem::Delay { duration_seconds })
        }
        other => Err(format!(
            "schedule item must start with `worker` or `delay`, got `{other}`"
        )),
    }
}

/// Writes `key: value`, switching to a `|` block when the value would not
/// survive inline parsing.
fn write_field(out: &mut String, indent: usize, key: &str, value: &str) {
    let pad = " ".repeat(indent);
    let inline_ok = !value.contains('\n') && value == value.trim() && value != "|";
    if inline_ok {
        if value.is_empty() {
            out.push_str(&format!("{pad}{key}:\n"));
        } else {
            out.push_str(&format!("{pad}{key}: {value}\n"));
        }
        return;
    }
    out.push_str(&format!("{pad}{key}: |\n"));
    let content_pad = " ".repeat(indent + 2);
    for line in value.split('\n') {
        if line.is_empty() {
            out.push('\n');
        } else {
            out.push_str(&content_pad);
            out.push_str(line);
            out.push('\n');
        }
    }
}

/// Renders `d` as a canonical block that [`extract_directives`] parses back to
/// exactly `[d]`, provided every text field is in [`normalize_text`] form.
pub fn serialize_directive(d: &Directive) -> String {
    let mut out = format!("{OPEN_PREFIX}{}\n", d.kind().tag());
    match d {
        Directive::Milestone(m) => {
            if let Some(id) = &m.id {
                out.push_str(&format!("id: {id}\n"));
            }
            write_field(&mut out, 0, "title", &m.title);
            out.push_str(&format!("budget: {}\n", m.cycle_budget));
            write_field(&mut out, 0, "description", &m.description);
        }
        Directive::Schedule { items } => {
            for item in items {
                match item {
                    ScheduleItem::Task {
                        worker_name,
                        task,
                        visibility,
                        delay_before_seconds,
                    } => {
                        out.push_str(&format!("- worker: {worker_name}\n"));
                        write_field(&mut out, 2, "task", task);
                        out.push_str(&format!("  visibility: {visibility}\n"));
                        if *delay_before_seconds > 0 {
                            out.push_str(&format!("  delay: {delay_before_seconds}\n"));
                        }
                    }
                    ScheduleItem::Delay { duration_seconds } => {
                        out.push_str(&format!("- delay: {duration_seconds}\n"));
                    }
                }
            }
        }
        Directive::CompletionClaim { summary } | Directive::ProjectCompletion { summary } => {
            write_field(&mut out, 0, "summary", summary);
        }
        Directive::VerificationVerdict { verdict } => {
            let outcome = match verdict.outcome {
                Outcome::Pass => "pass",
                Outcome::Fail => "fail",
            };
            out.push_str(&format!("outcome: {outcome}\n"));
            write_field(&mut out, 0, "feedback", &verdict.feedback);
        }
    }
    out.push_str(FENCE);
    out.push('\n');
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{role} may not emit {kind} directives")]
pub struct RoleViolation {
    pub role: AgentRole,
    pub kind: DirectiveKind,
}

/// Directive kinds each role is allowed to emit.
pub fn allowed_kinds(role: AgentRole) -> &'static [DirectiveKind] {
    match role {
        AgentRole::StrategyManager => &[DirectiveKind::Milestone, DirectiveKind::Complete],
        AgentRole::ExecutionManager => &[DirectiveKind::Schedule, DirectiveKind::Claim],
        AgentRole::VerificationManager => &[DirectiveKind::Schedule, DirectiveKind::Verdict],
        AgentRole::Worker { .. } => &[],
    }
}

pub fn validate_for_role(d: &Directive, role: AgentRole) -> Result<(), RoleViolation> {
    let kind = d.kind();
    if allowed_kinds(role).contains(&kind) {
        Ok(())
    } else {
        Err(RoleViolation { role, kind })
    }
}

/// The decision carried by one response after resolving repeats: the last
/// milestone/claim/verdict/completion wins, schedules concatenate.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Consolidated {
    /// `(position, directive)`; position is the index in the input list.
    pub milestone: Option<(usize, MilestoneDirective)>,
    pub completion: Option<(usize, String)>,
    pub claim: Option<String>,
    pub verdict: Option<Verdict>,
    pub schedule: Vec<ScheduleItem>,
}

impl Consolidated {
    pub fn from_directives(directives: &[Directive]) -> Self {
        let mut c = Consolidated::default();
        for (pos, d) in directives.iter().enumerate() {
            match d {
                Directive::Milestone(m) => c.milestone = Some((pos, m.clone())),
                Directive::ProjectCompletion { summary } => c.completion = Some((pos, summary.clone())),
                Directive::CompletionClaim { summary } => c.claim = Some(summary.clone()),
                Directive::VerificationVerdict { verdict } => c.verdict = Some(verdict.clone()),
                Directive::Schedule { items } => c.schedule.extend(items.iter().cloned()),
            }
        }
        c
    }
}
