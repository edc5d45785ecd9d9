//! Durable per-project store.
//!
//! One SQLite database per project directory holds the issue tracker,
//! agent reports, milestone history, agent registry, the cost ledger, the
//! lifecycle event log and orchestration-state snapshots. The orchestrator
//! is the main writer; agent subprocesses open the same file through
//! `tbc-db`. WAL mode gives readers a consistent committed view.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, SecondsFormat, Utc};
use rusqlite::{params, Connection, OptionalExtension, Transaction};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::budget::CostEntry;
use crate::directive::{Directive, VisibilityMode};
use crate::domain::{AgentRole, Milestone, MilestoneId, OrchestrationState, Phase, Verdict};

pub const DB_FILE: &str = "tbc.sqlite3";
/// Largest raw output kept per report.
pub const MAX_RAW_OUTPUT: usize = 4 * 1024 * 1024;
pub const TRUNCATION_MARKER: &str = "\n[...truncated by store]";
/// Snapshots older than this many generations are pruned.
const SNAPSHOT_GENERATIONS: i64 = 64;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store unavailable: {0}")]
    Unavailable(String),
    #[error("no such issue #{0}")]
    NoSuchIssue(u64),
    #[error("no snapshot recorded yet")]
    NoSnapshot,
    #[error("no such milestone {0}")]
    NoSuchMilestone(MilestoneId),
    #[error("active agent named {0} already registered")]
    DuplicateAgent(String),
    #[error("no active agent named {0}")]
    NoSuchAgent(String),
    #[error("corrupt record: {0}")]
    Corrupt(String),
}

impl From<rusqlite::Error> for StoreError {
    fn from(e: rusqlite::Error) -> Self {
        StoreError::Unavailable(e.to_string())
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

fn ts(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn parse_ts(s: &str) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| StoreError::Corrupt(format!("timestamp {s:?}: {e}")))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| StoreError::Corrupt(e.to_string()))
}

fn from_json<T: DeserializeOwned>(s: &str) -> Result<T> {
    serde_json::from_str(s).map_err(|e| StoreError::Corrupt(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueStatus {
    Open,
    Closed,
}

impl IssueStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            IssueStatus::Open => "open",
            IssueStatus::Closed => "closed",
        }
    }
}

impl FromStr for IssueStatus {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "open" => Ok(IssueStatus::Open),
            "closed" => Ok(IssueStatus::Closed),
            other => Err(format!("unknown issue status {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub id: u64,
    pub title: String,
    pub body: String,
    pub status: IssueStatus,
    pub author: String,
    pub assignee: Option<String>,
    /// Pull-request URL attached by an agent, if any.
    pub pr_url: Option<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comment {
    pub id: u64,
    pub issue_id: u64,
    pub author: String,
    pub body: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IssueFilter {
    pub status: Option<IssueStatus>,
    pub assignee: Option<String>,
    pub limit: Option<usize>,
}

impl IssueFilter {
    pub fn open() -> Self {
        IssueFilter {
            status: Some(IssueStatus::Open),
            ..Default::default()
        }
    }

    fn matches(&self, issue: &Issue) -> bool {
        self.status.is_none_or(|s| issue.status == s)
            && self
                .assignee
                .as_ref()
                .is_none_or(|a| issue.assignee.as_deref() == Some(a.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "detail", rename_all = "snake_case")]
pub enum ExitStatus {
    Ok,
    Timeout,
    Error(String),
}

impl ExitStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, ExitStatus::Ok)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentReport {
    pub agent: String,
    pub role: AgentRole,
    pub phase: Phase,
    pub cycle: u32,
    pub milestone_id: Option<MilestoneId>,
    pub raw_output: String,
    pub directives: Vec<Directive>,
    pub token_usage: crate::budget::TokenUsage,
    pub duration_seconds: f64,
    pub exit_status: ExitStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredReport {
    pub id: u64,
    pub created_at: DateTime<Utc>,
    #[serde(flatten)]
    pub report: AgentReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedVerdict {
    pub verdict: Verdict,
    pub at: DateTime<Utc>,
}

/// A milestone plus everything that happened to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MilestoneRecord {
    pub milestone: Milestone,
    pub verdict_history: Vec<TimedVerdict>,
    /// Starts at the granted cycle budget; each later entry halves the last.
    pub budget_history: Vec<u32>,
    /// Why the milestone was closed without a verdict (budget expiry, reset).
    pub closed_reason: Option<String>,
}

impl MilestoneRecord {
    pub fn new(milestone: Milestone) -> Self {
        let budget_history = vec![milestone.cycle_budget];
        MilestoneRecord {
            milestone,
            verdict_history: Vec::new(),
            budget_history,
            closed_reason: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub name: String,
    pub role: AgentRole,
    pub skill_file_path: Option<PathBuf>,
    pub hired_at: DateTime<Utc>,
    pub retired_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredEvent<E> {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub event: E,
}

const SCHEMA: &str = r#"
CREATE TABLE IF NOT EXISTS issues (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    title TEXT NOT NULL,
    body TEXT NOT NULL,
    status TEXT NOT NULL,
    author TEXT NOT NULL,
    assignee TEXT,
    pr_url TEXT,
    created_at TEXT NOT NULL,
    updated_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS issue_events (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    issue_id INTEGER NOT NULL REFERENCES issues(id),
    kind TEXT NOT NULL,
    actor TEXT NOT NULL,
    at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS comments (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    issue_id INTEGER NOT NULL REFERENCES issues(id),
    author TEXT NOT NULL,
    body TEXT NOT NULL,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS reports (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    agent TEXT NOT NULL,
    created_at TEXT NOT NULL,
    report TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS reports_agent ON reports(agent);
CREATE TABLE IF NOT EXISTS milestones (
    id TEXT PRIMARY KEY,
    record TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS registry (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    name TEXT NOT NULL,
    role TEXT NOT NULL,
    skill_file_path TEXT,
    hired_at TEXT NOT NULL,
    retired_at TEXT
);
CREATE UNIQUE INDEX IF NOT EXISTS registry_active_name ON registry(name) WHERE retired_at IS NULL;
CREATE TABLE IF NOT EXISTS cost (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    entry TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS events (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    at TEXT NOT NULL,
    event TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS snapshots (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    taken_at TEXT NOT NULL,
    state TEXT NOT NULL,
    checksum TEXT NOT NULL
);
"#;

pub struct Store {
    dir: PathBuf,
    conn: Mutex<Connection>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("dir", &self.dir).finish()
    }
}

impl Store {
    /// Opens (creating if needed) the store in `dir`.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)
            .map_err(|e| StoreError::Unavailable(format!("{}: {e}", dir.display())))?;
        let conn = Connection::open(dir.join(DB_FILE))?;
        conn.busy_timeout(Duration::from_secs(10))?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "FULL")?;
        conn.pragma_update(None, "foreign_keys", "ON")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Store {
            dir,
            conn: Mutex::new(conn),
        })
    }

    /// A private in-memory store, for tests and dry runs.
    pub fn in_memory() -> Result<Self> {
        let conn = Connection::open_in_memory()?;
        conn.pragma_update(None, "foreign_keys", "ON")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Store {
            dir: PathBuf::from(":memory:"),
            conn: Mutex::new(conn),
        })
    }

    /// Opens an existing store without creating anything.
    pub fn open_existing(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.join(DB_FILE).is_file() {
            return Err(StoreError::Unavailable(format!(
                "no store at {}",
                dir.display()
            )));
        }
        Self::open(dir)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn conn(&self) -> std::sync::MutexGuard<'_, Connection> {
        // A poisoned lock only means another thread panicked mid-call; the
        // connection itself is still transactionally consistent.
        self.conn.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Runs `f` inside one write transaction; nothing is visible to readers
    /// unless `f` returns `Ok`.
    pub fn write<T>(&self, f: impl FnOnce(&Tx<'_>) -> Result<T>) -> Result<T> {
        let mut conn = self.conn();
        let tx = conn.transaction_with_behavior(rusqlite::TransactionBehavior::Immediate)?;
        let out = f(&Tx(&tx))?;
        tx.commit()?;
        Ok(out)
    }

    fn read<T>(&self, f: impl FnOnce(&Connection) -> Result<T>) -> Result<T> {
        let conn = self.conn();
        f(&conn)
    }

    // Issues

    pub fn open_issue(
        &self,
        title: &str,
        body: &str,
        author: &str,
        assignee: Option<&str>,
        now: DateTime<Utc>,
    ) -> Result<Issue> {
        self.write(|tx| tx.open_issue(title, body, author, assignee, None, now))
    }

    pub fn get_issue(&self, id: u64) -> Result<Issue> {
        self.read(|c| get_issue(c, id)?.ok_or(StoreError::NoSuchIssue(id)))
    }

    /// Issues matching `filter` and visible under `visibility`, by id.
    pub fn list_issues(&self, filter: &IssueFilter, visibility: &VisibilityMode) -> Result<Vec<Issue>> {
        if *visibility == VisibilityMode::Blind {
            return Ok(Vec::new());
        }
        let all = self.read(|c| {
            let mut stmt = c.prepare("SELECT * FROM issues ORDER BY id")?;
            let rows = stmt.query_map([], issue_from_row)?;
            rows.collect::<Result<Vec<_>, _>>().map_err(StoreError::from)
        })?;
        let mut out: Vec<Issue> = all
            .into_iter()
            .filter(|i| visibility.admits(i.id) && filter.matches(i))
            .collect();
        if let Some(limit) = filter.limit {
            out.truncate(limit);
        }
        Ok(out)
    }

    pub fn add_comment(&self, issue_id: u64, author: &str, body: &str, now: DateTime<Utc>) -> Result<Comment> {
        self.write(|tx| tx.add_comment(issue_id, author, body, now))
    }

    pub fn comments(&self, issue_id: u64) -> Result<Vec<Comment>> {
        self.read(|c| {
            get_issue(c, issue_id)?.ok_or(StoreError::NoSuchIssue(issue_id))?;
            let mut stmt = c.prepare(
                "SELECT id, issue_id, author, body, created_at FROM comments WHERE issue_id = ?1 ORDER BY id",
            )?;
            let rows = stmt.query_map([issue_id as i64], |r| {
                Ok((r.get::<_, i64>(0)?, r.get::<_, i64>(1)?, r.get(2)?, r.get(3)?, r.get::<_, String>(4)?))
            })?;
            rows.map(|row| {
                let (id, issue_id, author, body, at) = row?;
                Ok(Comment {
                    id: id as u64,
                    issue_id: issue_id as u64,
                    author,
                    body,
                    created_at: parse_ts(&at)?,
                })
            })
            .collect()
        })
    }

    pub fn close_issue(&self, id: u64, actor: &str, now: DateTime<Utc>) -> Result<Issue> {
        self.write(|tx| tx.set_issue_status(id, IssueStatus::Closed, actor, now))
    }

    /// Reopens a closed issue, recording a `reopen` event.
    pub fn reopen_issue(&self, id: u64, actor: &str, now: DateTime<Utc>) -> Result<Issue> {
        self.write(|tx| tx.set_issue_status(id, IssueStatus::Open, actor, now))
    }

    /// `(kind, actor, at)` status events for an issue, oldest first.
    pub fn issue_events(&self, id: u64) -> Result<Vec<(String, String, DateTime<Utc>)>> {
        self.read(|c| {
            let mut stmt =
                c.prepare("SELECT kind, actor, at FROM issue_events WHERE issue_id = ?1 ORDER BY id")?;
            let rows = stmt.query_map([id as i64], |r| Ok((r.get(0)?, r.get(1)?, r.get::<_, String>(2)?)))?;
            rows.map(|row| {
                let (k, a, at) = row?;
                Ok((k, a, parse_ts(&at)?))
            })
            .collect()
        })
    }

    // Reports

    pub fn record_report(&self, report: &AgentReport, now: DateTime<Utc>) -> Result<u64> {
        self.write(|tx| tx.record_report(report, now))
    }

    pub fn list_reports(&self, agent: Option<&str>, limit: Option<usize>) -> Result<Vec<StoredReport>> {
        self.read(|c| {
            let limit = limit.map_or(-1, |l| l as i64);
            let mut stmt = c.prepare(
                "SELECT id, created_at, report FROM reports WHERE (?1 IS NULL OR agent = ?1) ORDER BY id LIMIT ?2",
            )?;
            let rows = stmt.query_map(params![agent, limit], |r| {
                Ok((r.get::<_, i64>(0)?, r.get::<_, String>(1)?, r.get::<_, String>(2)?))
            })?;
            rows.map(|row| {
                let (id, at, json) = row?;
                Ok(StoredReport {
                    id: id as u64,
                    created_at: parse_ts(&at)?,
                    report: from_json(&json)?,
                })
            })
            .collect()
        })
    }

    // Milestones

    pub fn put_milestone(&self, record: &MilestoneRecord) -> Result<()> {
        self.write(|tx| tx.put_milestone(record))
    }

    pub fn milestone(&self, id: &MilestoneId) -> Result<MilestoneRecord> {
        self.read(|c| get_milestone(c, id)?.ok_or_else(|| StoreError::NoSuchMilestone(id.clone())))
    }

    /// All milestone records, ordered by id.
    pub fn milestones(&self) -> Result<Vec<MilestoneRecord>> {
        self.read(|c| {
            let mut stmt = c.prepare("SELECT record FROM milestones")?;
            let rows = stmt.query_map([], |r| r.get::<_, String>(0))?;
            let mut out = rows
                .map(|r| from_json::<MilestoneRecord>(&r?))
                .collect::<Result<Vec<_>>>()?;
            out.sort_by(|a, b| a.milestone.id.cmp(&b.milestone.id));
            Ok(out)
        })
    }

    // Registry

    pub fn register_agent(&self, entry: &RegistryEntry) -> Result<()> {
        self.write(|tx| tx.register_agent(entry))
    }

    pub fn retire_agent(&self, name: &str, now: DateTime<Utc>) -> Result<()> {
        self.write(|tx| tx.retire_agent(name, now))
    }

    pub fn active_agents(&self) -> Result<Vec<RegistryEntry>> {
        Ok(self.registry()?.into_iter().filter(|e| e.retired_at.is_none()).collect())
    }

    /// Every registry entry, retired ones included, in hiring order.
    pub fn registry(&self) -> Result<Vec<RegistryEntry>> {
        self.read(|c| {
            let mut stmt =
                c.prepare("SELECT name, role, skill_file_path, hired_at, retired_at FROM registry ORDER BY id")?;
            let rows = stmt.query_map([], |r| {
                Ok((
                    r.get::<_, String>(0)?,
                    r.get::<_, String>(1)?,
                    r.get::<_, Option<String>>(2)?,
                    r.get::<_, String>(3)?,
                    r.get::<_, Option<String>>(4)?,
                ))
            })?;
            rows.map(|row| {
                let (name, role, path, hired, retired) = row?;
                Ok(RegistryEntry {
                    name,
                    role: from_json(&role)?,
                    skill_file_path: path.map(PathBuf::from),
                    hired_at: parse_ts(&hired)?,
                    retired_at: retired.as_deref().map(parse_ts).transpose()?,
                })
            })
            .collect()
        })
    }

    // Cost ledger

    pub fn append_cost(&self, entry: &CostEntry) -> Result<()> {
        self.write(|tx| tx.append_cost(entry))
    }

    pub fn cost_entries(&self) -> Result<Vec<CostEntry>> {
        self.read(|c| {
            let mut stmt = c.prepare("SELECT entry FROM cost ORDER BY id")?;
            let rows = stmt.query_map([], |r| r.get::<_, String>(0))?;
            rows.map(|r| from_json(&r?)).collect()
        })
    }

    // Event log and snapshots

    pub fn events<E: DeserializeOwned>(&self) -> Result<Vec<StoredEvent<E>>> {
        self.events_after(0)
    }

    pub fn events_after<E: DeserializeOwned>(&self, after_seq: u64) -> Result<Vec<StoredEvent<E>>> {
        self.read(|c| {
            let mut stmt = c.prepare("SELECT seq, at, event FROM events WHERE seq > ?1 ORDER BY seq")?;
            let rows = stmt.query_map([after_seq as i64], |r| {
                Ok((r.get::<_, i64>(0)?, r.get::<_, String>(1)?, r.get::<_, String>(2)?))
            })?;
            rows.map(|row| {
                let (seq, at, json) = row?;
                Ok(StoredEvent {
                    seq: seq as u64,
                    at: parse_ts(&at)?,
                    event: from_json(&json)?,
                })
            })
            .collect()
        })
    }

    pub fn snapshot_state(&self, state: &OrchestrationState, now: DateTime<Utc>) -> Result<()> {
        self.write(|tx| tx.snapshot_state(state, now))
    }

    /// Latest snapshot whose checksum verifies. A damaged latest snapshot
    /// falls back to the previous generation.
    pub fn load_state(&self) -> Result<OrchestrationState> {
        self.read(|c| {
            let mut stmt = c.prepare("SELECT state, checksum FROM snapshots ORDER BY seq DESC")?;
            let mut rows = stmt.query([])?;
            let mut seen = false;
            while let Some(row) = rows.next()? {
                seen = true;
                let state: String = row.get(0)?;
                let checksum: String = row.get(1)?;
                if checksum_of(&state) != checksum {
                    tracing::warn!("skipping damaged state snapshot");
                    continue;
                }
                if let Ok(s) = serde_json::from_str(&state) {
                    return Ok(s);
                }
            }
            if seen {
                Err(StoreError::Corrupt("no readable state snapshot".into()))
            } else {
                Err(StoreError::NoSnapshot)
            }
        })
    }
}

fn checksum_of(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Write access inside one transaction.
pub struct Tx<'a>(&'a Transaction<'a>);

impl Tx<'_> {
    pub fn open_issue(
        &self,
        title: &str,
        body: &str,
        author: &str,
        assignee: Option<&str>,
        pr_url: Option<&str>,
        now: DateTime<Utc>,
    ) -> Result<Issue> {
        let at = ts(now);
        self.0.execute(
            "INSERT INTO issues (title, body, status, author, assignee, pr_url, created_at, updated_at)
             VALUES (?1, ?2, 'open', ?3, ?4, ?5, ?6, ?6)",
            params![title, body, author, assignee, pr_url, at],
        )?;
        let id = self.0.last_insert_rowid() as u64;
        self.0.execute(
            "INSERT INTO issue_events (issue_id, kind, actor, at) VALUES (?1, 'open', ?2, ?3)",
            params![id as i64, author, at],
        )?;
        get_issue(self.0, id)?.ok_or(StoreError::NoSuchIssue(id))
    }

    pub fn add_comment(&self, issue_id: u64, author: &str, body: &str, now: DateTime<Utc>) -> Result<Comment> {
        get_issue(self.0, issue_id)?.ok_or(StoreError::NoSuchIssue(issue_id))?;
        let at = ts(now);
        self.0.execute(
            "INSERT INTO comments (issue_id, author, body, created_at) VALUES (?1, ?2, ?3, ?4)",
            params![issue_id as i64, author, body, at],
        )?;
        let id = self.0.last_insert_rowid() as u64;
        self.0.execute(
            "UPDATE issues SET updated_at = ?2 WHERE id = ?1",
            params![issue_id as i64, at],
        )?;
        Ok(Comment {
            id,
            issue_id,
            author: author.to_string(),
            body: body.to_string(),
            created_at: parse_ts(&at)?,
        })
    }

    pub fn set_issue_status(&self, id: u64, status: IssueStatus, actor: &str, now: DateTime<Utc>) -> Result<Issue> {
        let issue = get_issue(self.0, id)?.ok_or(StoreError::NoSuchIssue(id))?;
        if issue.status == status {
            return Ok(issue);
        }
        let kind = match status {
            IssueStatus::Open => "reopen",
            IssueStatus::Closed => "close",
        };
        let at = ts(now);
        self.0.execute(
            "UPDATE issues SET status = ?2, updated_at = ?3 WHERE id = ?1",
            params![id as i64, status.as_str(), at],
        )?;
        self.0.execute(
            "INSERT INTO issue_events (issue_id, kind, actor, at) VALUES (?1, ?2, ?3, ?4)",
            params![id as i64, kind, actor, at],
        )?;
        get_issue(self.0, id)?.ok_or(StoreError::NoSuchIssue(id))
    }

    pub fn record_report(&self, report: &AgentReport, now: DateTime<Utc>) -> Result<u64> {
        let mut report = report.clone();
        if report.raw_output.len() > MAX_RAW_OUTPUT {
            let mut cut = MAX_RAW_OUTPUT - TRUNCATION_MARKER.len();
            while !report.raw_output.is_char_boundary(cut) {
                cut -= 1;
            }
            report.raw_output.truncate(cut);
            report.raw_output.push_str(TRUNCATION_MARKER);
        }
        self.0.execute(
            "INSERT INTO reports (agent, created_at, report) VALUES (?1, ?2, ?3)",
            params![report.agent, ts(now), to_json(&report)?],
        )?;
        Ok(self.0.last_insert_rowid() as u64)
    }

    pub fn put_milestone(&self, record: &MilestoneRecord) -> Result<()> {
        self.0.execute(
            "INSERT INTO milestones (id, record) VALUES (?1, ?2)
             ON CONFLICT(id) DO UPDATE SET record = excluded.record",
            params![record.milestone.id.to_string(), to_json(record)?],
        )?;
        Ok(())
    }

    pub fn milestone(&self, id: &MilestoneId) -> Result<Option<MilestoneRecord>> {
        get_milestone(self.0, id)
    }

    pub fn register_agent(&self, entry: &RegistryEntry) -> Result<()> {
        let active: Option<i64> = self
            .0
            .query_row(
                "SELECT id FROM registry WHERE name = ?1 AND retired_at IS NULL",
                [&entry.name],
                |r| r.get(0),
            )
            .optional()?;
        if active.is_some() {
            return Err(StoreError::DuplicateAgent(entry.name.clone()));
        }
        self.0.execute(
            "INSERT INTO registry (name, role, skill_file_path, hired_at, retired_at) VALUES (?1, ?2, ?3, ?4, ?5)",
            params![
                entry.name,
                to_json(&entry.role)?,
                entry.skill_file_path.as_ref().map(|p| p.to_string_lossy().into_owned()),
                ts(entry.hired_at),
                entry.retired_at.map(ts),
            ],
        )?;
        Ok(())
    }

    pub fn retire_agent(&self, name: &str, now: DateTime<Utc>) -> Result<()> {
        let n = self.0.execute(
            "UPDATE registry SET retired_at = ?2 WHERE name = ?1 AND retired_at IS NULL",
            params![name, ts(now)],
        )?;
        if n == 0 {
            return Err(StoreError::NoSuchAgent(name.to_string()));
        }
        Ok(())
    }

    pub fn append_cost(&self, entry: &CostEntry) -> Result<()> {
        self.0
            .execute("INSERT INTO cost (entry) VALUES (?1)", [to_json(entry)?])?;
        Ok(())
    }

    pub fn append_event<E: Serialize>(&self, event: &E, now: DateTime<Utc>) -> Result<u64> {
        self.0.execute(
            "INSERT INTO events (at, event) VALUES (?1, ?2)",
            params![ts(now), to_json(event)?],
        )?;
        Ok(self.0.last_insert_rowid() as u64)
    }

    pub fn snapshot_state(&self, state: &OrchestrationState, now: DateTime<Utc>) -> Result<()> {
        let json = to_json(state)?;
        self.0.execute(
            "INSERT INTO snapshots (taken_at, state, checksum) VALUES (?1, ?2, ?3)",
            params![ts(now), json, checksum_of(&json)],
        )?;
        let latest = self.0.last_insert_rowid();
        self.0.execute(
            "DELETE FROM snapshots WHERE seq <= ?1",
            [latest - SNAPSHOT_GENERATIONS],
        )?;
        Ok(())
    }
}

fn issue_from_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<Issue> {
    let status: String = r.get("status")?;
    let created: String = r.get("created_at")?;
    let updated: String = r.get("updated_at")?;
    let bad = |e: String| rusqlite::Error::FromSqlConversionFailure(0, rusqlite::types::Type::Text, e.into());
    Ok(Issue {
        id: r.get::<_, i64>("id")? as u64,
        title: r.get("title")?,
        body: r.get("body")?,
        status: status.parse().map_err(bad)?,
        author: r.get("author")?,
        assignee: r.get("assignee")?,
        pr_url: r.get("pr_url")?,
        created_at: parse_ts(&created).map_err(|e| bad(e.to_string()))?,
        updated_at: parse_ts(&updated).map_err(|e| bad(e.to_string()))?,
    })
}

fn get_issue(c: &Connection, id: u64) -> Result<Option<Issue>> {
    Ok(c
        .query_row("SELECT * FROM issues WHERE id = ?1", [id as i64], issue_from_row)
        .optional()?)
}

fn get_milestone(c: &Connection, id: &MilestoneId) -> Result<Option<MilestoneRecord>> {
    let json: Option<String> = c
        .query_row(
            "SELECT record FROM milestones WHERE id = ?1",
            [id.to_string()],
            |r| r.get(0),
        )
        .optional()?;
    json.as_deref().map(from_json).transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn now() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2026, 5, 1, 9, 30, 0).unwrap()
    }

    fn store() -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        (dir, store)
    }

    #[test]
    fn issue_ids_are_monotonic() {
        let (_d, s) = store();
        let a = s.open_issue("first", "", "Athena", None, now()).unwrap();
        let b = s.open_issue("second", "", "human", Some("dev"), now()).unwrap();
        assert_eq!((a.id, b.id), (1, 2));
        assert_eq!(a.status, IssueStatus::Open);
        assert_eq!(b.author, "human");
        assert_eq!(b.assignee.as_deref(), Some("dev"));
    }

    #[test]
    fn comments_append_in_order() {
        let (_d, s) = store();
        let i = s.open_issue("x", "", "Ares", None, now()).unwrap();
        s.add_comment(i.id, "dev", "started", now()).unwrap();
        let later = now() + chrono::Duration::minutes(5);
        s.add_comment(i.id, "dev", "done", later).unwrap();
        let thread = s.comments(i.id).unwrap();
        assert_eq!(thread.iter().map(|c| c.body.as_str()).collect::<Vec<_>>(), ["started", "done"]);
        assert_eq!(s.get_issue(i.id).unwrap().updated_at, later);
        assert!(matches!(
            s.add_comment(99, "dev", "?", now()),
            Err(StoreError::NoSuchIssue(99))
        ));
    }

    #[test]
    fn visibility_modes() {
        let (_d, s) = store();
        for t in ["a", "b", "c"] {
            s.open_issue(t, "", "Ares", None, now()).unwrap();
        }
        let open = IssueFilter::open();
        assert!(s.list_issues(&open, &VisibilityMode::Blind).unwrap().is_empty());
        let focused = s.list_issues(&open, &VisibilityMode::Focused(vec![2])).unwrap();
        assert_eq!(focused.iter().map(|i| i.id).collect::<Vec<_>>(), [2]);
        s.close_issue(3, "Ares", now()).unwrap();
        let full = s.list_issues(&open, &VisibilityMode::Full).unwrap();
        assert_eq!(full.iter().map(|i| i.id).collect::<Vec<_>>(), [1, 2]);
    }

    #[test]
    fn reopen_is_recorded() {
        let (_d, s) = store();
        let i = s.open_issue("x", "", "Ares", None, now()).unwrap();
        s.close_issue(i.id, "Ares", now()).unwrap();
        let i = s.reopen_issue(i.id, "human", now()).unwrap();
        assert_eq!(i.status, IssueStatus::Open);
        let kinds: Vec<_> = s.issue_events(i.id).unwrap().into_iter().map(|e| e.0).collect();
        assert_eq!(kinds, ["open", "close", "reopen"]);
    }

    fn report(agent: &str, directives: Vec<Directive>, exit: ExitStatus) -> AgentReport {
        AgentReport {
            agent: agent.into(),
            role: AgentRole::StrategyManager,
            phase: Phase::Strategy,
            cycle: 0,
            milestone_id: None,
            raw_output: "out".into(),
            directives,
            token_usage: Default::default(),
            duration_seconds: 1.5,
            exit_status: exit,
        }
    }

    #[test]
    fn reports_roundtrip_and_filter() {
        let (_d, s) = store();
        let ds = vec![
            Directive::CompletionClaim { summary: "a".into() },
            Directive::ProjectCompletion { summary: "b".into() },
        ];
        let r1 = report("Athena", ds.clone(), ExitStatus::Ok);
        s.record_report(&r1, now()).unwrap();
        s.record_report(&report("Ares", vec![], ExitStatus::Timeout), now()).unwrap();
        s.record_report(&report("Athena", vec![], ExitStatus::Error("boom".into())), now()).unwrap();

        let all = s.list_reports(None, None).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[0].report, r1);
        assert_eq!(all[1].report.exit_status, ExitStatus::Timeout);
        let athena = s.list_reports(Some("Athena"), None).unwrap();
        let brute: Vec<_> = all.iter().filter(|r| r.report.agent == "Athena").cloned().collect();
        assert_eq!(athena, brute);
        assert_eq!(s.list_reports(None, Some(1)).unwrap().len(), 1);
    }

    #[test]
    fn oversized_output_is_truncated() {
        let (_d, s) = store();
        let mut r = report("w", vec![], ExitStatus::Ok);
        r.raw_output = "é".repeat(MAX_RAW_OUTPUT);
        s.record_report(&r, now()).unwrap();
        let got = &s.list_reports(None, None).unwrap()[0].report.raw_output;
        assert!(got.len() <= MAX_RAW_OUTPUT);
        assert!(got.ends_with(TRUNCATION_MARKER));
    }

    #[test]
    fn snapshot_roundtrip() {
        let (_d, s) = store();
        assert!(matches!(s.load_state(), Err(StoreError::NoSnapshot)));
        let mut st = OrchestrationState::fresh("p");
        st.phase = Phase::Execution;
        st.cycle = 3;
        s.snapshot_state(&st, now()).unwrap();
        assert_eq!(s.load_state().unwrap(), st);
    }

    #[test]
    fn registry_unique_active_names() {
        let (_d, s) = store();
        let e = RegistryEntry {
            name: "dev".into(),
            role: AgentRole::Worker { manager: crate::domain::ManagerRole::Execution },
            skill_file_path: None,
            hired_at: now(),
            retired_at: None,
        };
        s.register_agent(&e).unwrap();
        assert!(matches!(s.register_agent(&e), Err(StoreError::DuplicateAgent(_))));
        s.retire_agent("dev", now()).unwrap();
        assert!(matches!(s.retire_agent("dev", now()), Err(StoreError::NoSuchAgent(_))));
        s.register_agent(&e).unwrap();
        assert_eq!(s.registry().unwrap().len(), 2);
        assert_eq!(s.active_agents().unwrap().len(), 1);
    }

    #[test]
    fn milestones_sorted_by_id() {
        let (_d, s) = store();
        for id in ["2", "1.10", "1.2", "1"] {
            let m = Milestone::new(id.parse().unwrap(), id.into(), String::new(), 3);
            s.put_milestone(&MilestoneRecord::new(m)).unwrap();
        }
        let ids: Vec<String> = s.milestones().unwrap().iter().map(|r| r.milestone.id.to_string()).collect();
        assert_eq!(ids, ["1", "1.2", "1.10", "2"]);
    }

    #[test]
    fn failed_transaction_leaves_nothing() {
        let (_d, s) = store();
        let r: Result<()> = s.write(|tx| {
            tx.open_issue("ghost", "", "Ares", None, None, now())?;
            Err(StoreError::Unavailable("injected".into()))
        });
        assert!(r.is_err());
        assert!(s.list_issues(&IssueFilter::default(), &VisibilityMode::Full).unwrap().is_empty());
    }
}
