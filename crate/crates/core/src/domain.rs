//! Core value types shared by every other module.
//!
//! Everything here is plain data: cheap to clone, `Send + Sync`, and
//! serializable so it can be snapshotted by the store and shipped over the API.

use std::cmp::Ordering;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::BudgetConfig;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("malformed milestone id {0:?}")]
    MalformedId(String),
    #[error("child index must be >= 1, got {0}")]
    BadIndex(u32),
    #[error("illegal phase transition {from} -> {to}")]
    IllegalTransition { from: Phase, to: Phase },
    #[error("invalid project spec: {0}")]
    InvalidSpec(String),
    #[error("fail verdict requires non-empty feedback")]
    EmptyFailFeedback,
}

/// What the user asked for when registering a project.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectSpec {
    pub goal: String,
    pub success_criteria: String,
    pub repo_path: PathBuf,
    pub budget: BudgetConfig,
}

impl ProjectSpec {
    /// Checks the registration-time invariants.
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.goal.trim().is_empty() {
            return Err(DomainError::InvalidSpec("goal is empty".into()));
        }
        if self.success_criteria.trim().is_empty() {
            return Err(DomainError::InvalidSpec("success criteria are empty".into()));
        }
        if !self.repo_path.is_dir() {
            return Err(DomainError::InvalidSpec(format!(
                "repository path {} is not a directory",
                self.repo_path.display()
            )));
        }
        self.budget
            .validate()
            .map_err(|e| DomainError::InvalidSpec(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Strategy,
    Execution,
    Verification,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Strategy, Phase::Execution, Phase::Verification];

    /// Legal moves: S->E, E->V, V->E (fix round), V->S, E->S (budget
    /// expired), and any->S (bootstrap).
    pub fn can_transition(self, to: Phase) -> bool {
        use Phase::*;
        matches!(
            (self, to),
            (Strategy, Execution)
                | (Execution, Verification)
                | (Verification, Execution)
                | (_, Strategy)
        )
    }

    pub fn transition(self, to: Phase) -> Result<Phase, DomainError> {
        if self.can_transition(to) {
            Ok(to)
        } else {
            Err(DomainError::IllegalTransition { from: self, to })
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Strategy => "strategy",
            Phase::Execution => "execution",
            Phase::Verification => "verification",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hierarchical milestone identifier such as `1.1.2`.
///
/// Ordering is lexicographic over the integer segments, so `1.2 < 1.10` and a
/// prefix sorts before its extensions (`1 < 1.1`).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MilestoneId(Vec<u32>);

impl MilestoneId {
    pub fn new(segments: Vec<u32>) -> Result<Self, DomainError> {
        if segments.is_empty() || segments.contains(&0) {
            return Err(DomainError::MalformedId(format!("{segments:?}")));
        }
        Ok(MilestoneId(segments))
    }

    pub fn root(n: u32) -> Result<Self, DomainError> {
        Self::new(vec![n])
    }

    pub fn segments(&self) -> &[u32] {
        &self.0
    }

    /// Appends `index` to this id; `index` must be at least 1.
    pub fn child(&self, index: u32) -> Result<Self, DomainError> {
        if index < 1 {
            return Err(DomainError::BadIndex(index));
        }
        let mut segments = self.0.clone();
        segments.push(index);
        Ok(MilestoneId(segments))
    }

    /// Next unused top-level id given the ids already allocated.
    pub fn next_root<'a>(existing: impl IntoIterator<Item = &'a MilestoneId>) -> MilestoneId {
        let max = existing.into_iter().map(|id| id.0[0]).max().unwrap_or(0);
        MilestoneId(vec![max.saturating_add(1)])
    }
}

pub fn parse_milestone_id(text: &str) -> Result<MilestoneId, DomainError> {
    text.parse()
}

pub fn compare_milestone_ids(a: &MilestoneId, b: &MilestoneId) -> Ordering {
    a.cmp(b)
}

pub fn child_id(parent: &MilestoneId, index: u32) -> Result<MilestoneId, DomainError> {
    parent.child(index)
}

impl FromStr for MilestoneId {
    type Err = DomainError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let malformed = || DomainError::MalformedId(text.to_string());
        if text.is_empty() {
            return Err(malformed());
        }
        let mut segments = Vec::new();
        for part in text.split('.') {
            if part.is_empty() || !part.bytes().all(|b| b.is_ascii_digit()) {
                return Err(malformed());
            }
            // Leading zeros would break render(parse(s)) = s.
            if part.len() > 1 && part.starts_with('0') {
                return Err(malformed());
            }
            let n: u32 = part.parse().map_err(|_| malformed())?;
            if n == 0 {
                return Err(malformed());
            }
            segments.push(n);
        }
        Ok(MilestoneId(segments))
    }
}

impl fmt::Display for MilestoneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

impl PartialOrd for MilestoneId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for MilestoneId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.cmp(&other.0)
    }
}

impl Serialize for MilestoneId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MilestoneId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MilestoneStatus {
    Planned,
    InProgress,
    AwaitingVerification,
    Passed,
    Failed,
}

impl MilestoneStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, MilestoneStatus::Passed | MilestoneStatus::Failed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MilestoneStatus::Planned => "planned",
            MilestoneStatus::InProgress => "in_progress",
            MilestoneStatus::AwaitingVerification => "awaiting_verification",
            MilestoneStatus::Passed => "passed",
            MilestoneStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Milestone {
    pub id: MilestoneId,
    pub title: String,
    pub description: String,
    pub cycle_budget: u32,
    pub status: MilestoneStatus,
    pub fix_round: u32,
    /// Budget granted to the current round; halves on every failed verdict.
    pub budget_remaining: u32,
}

impl Milestone {
    pub fn new(id: MilestoneId, title: String, description: String, cycle_budget: u32) -> Self {
        Milestone {
            id,
            title,
            description,
            cycle_budget,
            status: MilestoneStatus::Planned,
            fix_round: 0,
            budget_remaining: cycle_budget,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManagerRole {
    Strategy,
    Execution,
    Verification,
}

impl ManagerRole {
    pub const ALL: [ManagerRole; 3] = [
        ManagerRole::Strategy,
        ManagerRole::Execution,
        ManagerRole::Verification,
    ];

    /// The permanent agent name for this manager.
    pub fn agent_name(self) -> &'static str {
        match self {
            ManagerRole::Strategy => "Athena",
            ManagerRole::Execution => "Ares",
            ManagerRole::Verification => "Apollo",
        }
    }

    pub fn from_name(name: &str) -> Option<ManagerRole> {
        ManagerRole::ALL
            .into_iter()
            .find(|m| m.agent_name().eq_ignore_ascii_case(name))
    }

    pub fn phase(self) -> Phase {
        match self {
            ManagerRole::Strategy => Phase::Strategy,
            ManagerRole::Execution => Phase::Execution,
            ManagerRole::Verification => Phase::Verification,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    StrategyManager,
    ExecutionManager,
    VerificationManager,
    Worker { manager: ManagerRole },
}

impl AgentRole {
    pub fn manager(role: ManagerRole) -> AgentRole {
        match role {
            ManagerRole::Strategy => AgentRole::StrategyManager,
            ManagerRole::Execution => AgentRole::ExecutionManager,
            ManagerRole::Verification => AgentRole::VerificationManager,
        }
    }

    /// `Some` for the three permanent managers.
    pub fn as_manager(self) -> Option<ManagerRole> {
        match self {
            AgentRole::StrategyManager => Some(ManagerRole::Strategy),
            AgentRole::ExecutionManager => Some(ManagerRole::Execution),
            AgentRole::VerificationManager => Some(ManagerRole::Verification),
            AgentRole::Worker { .. } => None,
        }
    }

    pub fn is_manager(self) -> bool {
        self.as_manager().is_some()
    }

    /// Grouping key used by cost breakdowns: the manager's name, or `worker`.
    pub fn cost_key(self) -> &'static str {
        match self.as_manager() {
            Some(m) => m.agent_name(),
            None => "worker",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentRole::Worker { manager } => write!(f, "worker({})", manager.agent_name()),
            other => f.write_str(other.as_manager().map(|m| m.agent_name()).unwrap_or("")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub outcome: Outcome,
    pub feedback: String,
}

impl Verdict {
    pub fn pass(feedback: impl Into<String>) -> Self {
        Verdict {
            outcome: Outcome::Pass,
            feedback: feedback.into(),
        }
    }

    pub fn fail(feedback: impl Into<String>) -> Result<Self, DomainError> {
        let feedback = feedback.into();
        if feedback.trim().is_empty() {
            return Err(DomainError::EmptyFailFeedback);
        }
        Ok(Verdict {
            outcome: Outcome::Fail,
            feedback,
        })
    }

    pub fn is_pass(&self) -> bool {
        self.outcome == Outcome::Pass
    }
}

/// Durable orchestration state for one project.
///
/// Snapshotted after every committed lifecycle step; everything needed to
/// resume mid-cycle lives here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrchestrationState {
    pub project_id: String,
    pub phase: Phase,
    pub current_milestone: Option<Milestone>,
    /// Cycle within the current execution round; 0 before the first cycle.
    pub cycle: u32,
    pub total_cycles: u64,
    pub failed_cycles: u64,
    pub last_verification_feedback: Option<String>,
    pub paused: bool,
    #[serde(default)]
    pub consecutive_failures: u32,
    #[serde(default)]
    pub progress: Option<StepProgress>,
}

/// In-flight work within a cycle or a verification attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepProgress {
    Cycle {
        /// Schedule issued by the execution manager; `None` until it has run.
        schedule: Option<Vec<crate::directive::ScheduleItem>>,
        next_item: usize,
        /// Some item named a worker that could not be resolved.
        #[serde(default)]
        skipped: bool,
        #[serde(default)]
        tasks_ok: u32,
        #[serde(default)]
        tasks_failed: u32,
    },
    Verification {
        attempt: u32,
        schedule: Vec<crate::directive::ScheduleItem>,
        next_item: usize,
        pending_verdict: Option<Verdict>,
        /// True once the manager has been invoked for `attempt`.
        invoked: bool,
        /// Issue collecting QA findings for this verification.
        #[serde(default)]
        qa_issue: Option<u64>,
    },
}

impl OrchestrationState {
    /// State for a project that has never run.
    pub fn fresh(project_id: impl Into<String>) -> Self {
        OrchestrationState {
            project_id: project_id.into(),
            phase: Phase::Strategy,
            current_milestone: None,
            cycle: 0,
            total_cycles: 0,
            failed_cycles: 0,
            last_verification_feedback: None,
            paused: false,
            consecutive_failures: 0,
            progress: None,
        }
    }

    /// The milestone currently being worked on, if it is not terminal.
    pub fn active_milestone(&self) -> Option<&Milestone> {
        self.current_milestone
            .as_ref()
            .filter(|m| !m.status.is_terminal())
    }

    /// Checks the cross-field invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.phase == Phase::Strategy && self.active_milestone().is_some() {
            return Err("strategy phase with an active milestone".into());
        }
        if self.phase == Phase::Execution {
            let m = self
                .current_milestone
                .as_ref()
                .ok_or("execution phase without a milestone")?;
            if self.cycle > m.budget_remaining {
                return Err(format!(
                    "cycle {} exceeds budget {}",
                    self.cycle, m.budget_remaining
                ));
            }
        }
        if let Some(m) = &self.current_milestone {
            if m.budget_remaining > m.cycle_budget {
                return Err("budget_remaining exceeds cycle_budget".into());
            }
        }
        if self.failed_cycles > self.total_cycles {
            return Err("more failed cycles than total cycles".into());
        }
        Ok(())
    }
}
