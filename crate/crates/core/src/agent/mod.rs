//! Agents: skill files, context assembly and the runner contract.
//!
//! A [`Runner`] turns an [`Invocation`] into text. [`invoke`] wraps it with
//! retry, timeout, directive extraction and role validation, and never
//! fails: every problem ends up in [`AgentResult::exit_status`].

mod context;
mod llm;
mod scripted;
mod skill;

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use context::{
    build_context, compact_context, estimate_tokens, manager_prompt, AgentContext, ContextInputs, Counters,
    DigestEntry, OverLimit, TRUNCATED,
};
pub use llm::{LlmConfig, LlmRunner, TierModels, MAX_COMMAND_OUTPUT, MAX_TOOL_ITERATIONS};
pub use scripted::{RecordedCall, ScriptError, ScriptStep, ScriptedExit, ScriptedRunner, WriteFile};
pub use skill::{ensure_managers, hire_worker, resolve_worker, retire_worker, sync_skills, SkillFile, SyncReport};

use crate::budget::TokenUsage;
use crate::clock::Clock;
use crate::directive::{extract_directives, validate_for_role, Directive, ParseError, RoleViolation, VisibilityMode};
use crate::domain::AgentRole;
use crate::store::{ExitStatus, StoreError};

pub const DEFAULT_TIMEOUT_SECONDS: u64 = 900;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTier {
    High,
    #[default]
    Standard,
    Light,
}

impl ModelTier {
    pub const ALL: [ModelTier; 3] = [ModelTier::High, ModelTier::Standard, ModelTier::Light];
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("an active agent named {0} already exists")]
    DuplicateName(String),
    #[error("unknown manager {0:?}")]
    InvalidManager(String),
    #[error("invalid agent name {0:?}")]
    InvalidName(String),
    #[error("no active agent named {0}")]
    NoSuchAgent(String),
    #[error("{0} is a permanent manager and cannot be retired")]
    CannotRetireManager(String),
    #[error("malformed skill file: {0}")]
    MalformedSkill(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Filesystem layout of a project workspace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn skills_dir(&self) -> PathBuf {
        self.root.join(".tbc").join("skills")
    }

    pub fn retired_dir(&self) -> PathBuf {
        self.skills_dir().join("retired")
    }

    pub fn skill_path(&self, name: &str) -> PathBuf {
        self.skills_dir().join(format!("{name}.md"))
    }

    pub fn note_path(&self, agent: &str) -> PathBuf {
        self.root.join(".tbc").join("notes").join(agent).join("note.md")
    }

    /// The agent's note.md, or `None` if it has none yet.
    pub fn read_note(&self, agent: &str) -> Option<String> {
        std::fs::read_to_string(self.note_path(agent)).ok()
    }
}

/// One request to a runner.
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub agent: String,
    pub role: AgentRole,
    pub tier: ModelTier,
    pub system_context: String,
    /// Exactly one task.
    pub task: String,
    pub visibility: VisibilityMode,
    pub workspace: PathBuf,
    /// Store directory exported as `TBC_PROJECT`.
    pub store_dir: PathBuf,
    pub timeout_seconds: u64,
}

impl Invocation {
    /// Environment injected into every agent process.
    pub fn env(&self) -> Vec<(&'static str, String)> {
        vec![
            ("TBC_PROJECT", self.store_dir.to_string_lossy().into_owned()),
            ("TBC_AGENT", self.agent.clone()),
            ("TBC_VISIBILITY", self.visibility.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunOutput {
    pub text: String,
    pub usage: TokenUsage,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RunnerError {
    /// Worth retrying: rate limits, dropped connections, 5xx.
    #[error("transient: {0}")]
    Transient(String),
    #[error("{0}")]
    Fatal(String),
}

/// Something that can play an agent. Must be usable from several projects
/// at once.
#[async_trait]
pub trait Runner: Send + Sync {
    /// Produces the agent's text. Output should also be passed to
    /// `on_chunk` as it appears.
    async fn run(&self, invocation: &Invocation, on_chunk: &(dyn for<'s> Fn(&'s str) + Send + Sync))
        -> Result<RunOutput, RunnerError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_seconds: f64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay_seconds: 2.0,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `k + 1` (`k` counts from 0).
    pub fn delay(&self, k: u32) -> Duration {
        let secs = self.base_delay_seconds * self.multiplier.powi(k as i32);
        Duration::from_secs_f64(secs.max(0.0))
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_attempts < 1 {
            return Err("retry.max_attempts must be at least 1".into());
        }
        if !(self.base_delay_seconds >= 0.0 && self.multiplier >= 0.0) {
            return Err("retry delays must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunnerKind {
    Scripted { script: PathBuf },
    Llm(LlmConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerConfig {
    #[serde(flatten)]
    pub kind: RunnerKind,
    #[serde(default)]
    pub retry: RetryPolicy,
}

/// Model name configured for `tier`.
pub fn route_model(config: &LlmConfig, tier: ModelTier) -> &str {
    config.models.get(tier)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentResult {
    pub raw_text: String,
    /// Extracted and accepted for the agent's role. Empty unless ok.
    pub directives: Vec<Directive>,
    pub rejected: Vec<RoleViolation>,
    pub parse_errors: Vec<ParseError>,
    pub token_usage: TokenUsage,
    pub duration_seconds: f64,
    pub exit_status: ExitStatus,
    pub attempts: u32,
}

/// Runs `invocation` with retry and timeout; never returns an error.
pub async fn invoke(
    runner: &dyn Runner,
    invocation: &Invocation,
    retry: &RetryPolicy,
    clock: &dyn Clock,
    on_chunk: &(dyn for<'s> Fn(&'s str) + Send + Sync),
) -> AgentResult {
    let started = tokio::time::Instant::now();
    let partial = Mutex::new(String::new());
    let attempts = Mutex::new(0u32);
    let tee = |chunk: &str| {
        partial.lock().expect("partial output").push_str(chunk);
        on_chunk(chunk);
    };
    let max = retry.max_attempts.max(1);
    let attempt_loop = async {
        let mut k = 0;
        loop {
            *attempts.lock().expect("attempts") += 1;
            partial.lock().expect("partial output").clear();
            match runner.run(invocation, &tee).await {
                Err(RunnerError::Transient(msg)) if k + 1 < max => {
                    tracing::warn!(agent = %invocation.agent, attempt = k + 1, "transient runner failure: {msg}");
                    clock.sleep(retry.delay(k)).await;
                    k += 1;
                }
                other => return other,
            }
        }
    };
    let outcome = tokio::time::timeout(Duration::from_secs(invocation.timeout_seconds), attempt_loop).await;
    let duration_seconds = started.elapsed().as_secs_f64();
    let attempts = *attempts.lock().expect("attempts");

    let (raw_text, usage, exit_status) = match outcome {
        Err(_) => (
            partial.into_inner().expect("partial output"),
            TokenUsage::default(),
            ExitStatus::Timeout,
        ),
        Ok(Err(e)) => (
            partial.into_inner().expect("partial output"),
            TokenUsage::default(),
            ExitStatus::Error(e.to_string()),
        ),
        Ok(Ok(out)) => (out.text, out.usage, ExitStatus::Ok),
    };

    let mut result = AgentResult {
        raw_text,
        directives: Vec::new(),
        rejected: Vec::new(),
        parse_errors: Vec::new(),
        token_usage: usage,
        duration_seconds,
        exit_status,
        attempts,
    };
    if result.exit_status.is_ok() {
        let extraction = extract_directives(&result.raw_text);
        for w in &extraction.warnings {
            tracing::warn!(agent = %invocation.agent, "directive warning: {w}");
        }
        for e in &extraction.errors {
            tracing::warn!(agent = %invocation.agent, "malformed directive: {e}");
        }
        result.parse_errors = extraction.errors;
        for d in extraction.directives {
            match validate_for_role(&d, invocation.role) {
                Ok(()) => result.directives.push(d),
                Err(v) => {
                    tracing::warn!(agent = %invocation.agent, "rejected directive: {v}");
                    result.rejected.push(v);
                }
            }
        }
    }
    result
}
