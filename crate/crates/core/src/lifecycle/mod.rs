//! The project lifecycle as a resumable state machine.
//!
//! [`next_action`] reads the durable [`OrchestrationState`] and names the
//! single next step. The transition functions here are pure: each takes the
//! current state plus the outcome of that step and returns the events to
//! append together with the successor state. The orchestrator commits both
//! in one store transaction, so a crash at any point resumes from the last
//! committed step without repeating or skipping events.

mod orchestrator;
mod vcs;

use serde::{Deserialize, Serialize};

pub use orchestrator::{
    bootstrap_offline, commit, LifecycleError, NoopObserver, Observer, Orchestrator, OrchestratorConfig, Project,
    ProjectControl, RunOutcome,
};
pub use vcs::{Git, NoVcs, Vcs};

use crate::directive::ScheduleItem;
use crate::domain::{Milestone, MilestoneId, MilestoneStatus, OrchestrationState, Phase, StepProgress, Verdict};
use crate::store::ExitStatus;

pub const DEFAULT_FAILURE_THRESHOLD: u32 = 3;
pub const NO_VERDICT_FEEDBACK: &str = "verification produced no verdict";
pub const BOOTSTRAP_REASON: &str = "bootstrap reset";
pub const BUDGET_EXPIRED_REASON: &str = "cycle budget expired without a completion claim";
pub const BUDGET_EXHAUSTED_REASON: &str = "verification failed with no cycle budget left";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum ItemResult {
    Completed { agent: String, exit_status: ExitStatus },
    Waited,
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Failure {
    AgentTimeout { agent: String },
    AgentError { agent: String, message: String },
    NoDirective { agent: String },
    UnknownWorker { name: String },
    NoVerdict,
    Escalation { consecutive: u32 },
}

impl Failure {
    /// The failure for a non-ok invocation of `agent`.
    pub fn from_exit(agent: &str, exit: &ExitStatus) -> Option<Failure> {
        match exit {
            ExitStatus::Ok => None,
            ExitStatus::Timeout => Some(Failure::AgentTimeout { agent: agent.into() }),
            ExitStatus::Error(message) => Some(Failure::AgentError {
                agent: agent.into(),
                message: message.clone(),
            }),
        }
    }

    pub fn agent(&self) -> Option<&str> {
        match self {
            Failure::AgentTimeout { agent } | Failure::AgentError { agent, .. } | Failure::NoDirective { agent } => {
                Some(agent)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LifecycleEvent {
    PhaseEntered {
        phase: Phase,
    },
    MilestoneDefined {
        milestone: Milestone,
    },
    CycleStarted {
        cycle: u32,
    },
    ScheduleItemRun {
        item: ScheduleItem,
        index: usize,
        of: usize,
        result: ItemResult,
    },
    CompletionClaimed {
        summary: String,
    },
    VerdictIssued {
        verdict: Verdict,
    },
    FixRoundStarted {
        budget: u32,
    },
    MilestoneClosed {
        id: MilestoneId,
        status: MilestoneStatus,
        reason: Option<String>,
    },
    ProjectCompleted {
        summary: String,
    },
    BootstrapReset,
    FailureEpisode {
        failure: Failure,
    },
}

impl LifecycleEvent {
    pub fn name(&self) -> &'static str {
        match self {
            LifecycleEvent::PhaseEntered { .. } => "phase_entered",
            LifecycleEvent::MilestoneDefined { .. } => "milestone_defined",
            LifecycleEvent::CycleStarted { .. } => "cycle_started",
            LifecycleEvent::ScheduleItemRun { .. } => "schedule_item_run",
            LifecycleEvent::CompletionClaimed { .. } => "completion_claimed",
            LifecycleEvent::VerdictIssued { .. } => "verdict_issued",
            LifecycleEvent::FixRoundStarted { .. } => "fix_round_started",
            LifecycleEvent::MilestoneClosed { .. } => "milestone_closed",
            LifecycleEvent::ProjectCompleted { .. } => "project_completed",
            LifecycleEvent::BootstrapReset => "bootstrap_reset",
            LifecycleEvent::FailureEpisode { .. } => "failure_episode",
        }
    }
}

/// Events plus the state they lead to.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub events: Vec<LifecycleEvent>,
    pub state: OrchestrationState,
}

impl Transition {
    fn new(state: OrchestrationState) -> Self {
        Transition {
            events: Vec::new(),
            state,
        }
    }

    fn push(&mut self, e: LifecycleEvent) {
        self.events.push(e);
    }

    fn enter(&mut self, phase: Phase) {
        self.state.phase = phase;
        self.push(LifecycleEvent::PhaseEntered { phase });
    }
}

/// The next step the orchestrator must take.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Escalate,
    Plan,
    StartCycle,
    ExpireBudget,
    Assess,
    RunItem { item: ScheduleItem, index: usize, of: usize },
    Verify { attempt: u32 },
    RetryVerification,
    GiveUpVerification,
    ApplyVerdict(Verdict),
}

pub fn next_action(state: &OrchestrationState, failure_threshold: u32) -> Action {
    if state.consecutive_failures >= failure_threshold.max(1) {
        return Action::Escalate;
    }
    let Some(m) = state.active_milestone() else {
        return Action::Plan;
    };
    match (&state.phase, &state.progress) {
        (Phase::Strategy, _) => Action::Plan,
        (Phase::Execution, None) => {
            if state.cycle < m.budget_remaining {
                Action::StartCycle
            } else {
                Action::ExpireBudget
            }
        }
        (Phase::Execution, Some(StepProgress::Cycle { schedule, next_item, .. })) => match schedule {
            None => Action::Assess,
            Some(items) => match items.get(*next_item) {
                Some(item) => Action::RunItem {
                    item: item.clone(),
                    index: *next_item,
                    of: items.len(),
                },
                // Not reachable through the transitions below.
                None => Action::StartCycle,
            },
        },
        (Phase::Verification, Some(StepProgress::Verification {
            attempt,
            schedule,
            next_item,
            pending_verdict,
            invoked,
            ..
        })) => {
            if !invoked {
                Action::Verify { attempt: *attempt }
            } else if let Some(item) = schedule.get(*next_item) {
                Action::RunItem {
                    item: item.clone(),
                    index: *next_item,
                    of: schedule.len(),
                }
            } else if let Some(v) = pending_verdict {
                Action::ApplyVerdict(v.clone())
            } else if *attempt == 0 {
                Action::RetryVerification
            } else {
                Action::GiveUpVerification
            }
        }
        // A verification state without progress starts a fresh attempt.
        (Phase::Verification, _) => Action::Verify { attempt: 0 },
        (Phase::Execution, Some(StepProgress::Verification { .. })) => Action::Assess,
    }
}

/// Very first step of a project that has never run.
pub fn begin(project_id: &str) -> Transition {
    let mut t = Transition::new(OrchestrationState::fresh(project_id));
    t.push(LifecycleEvent::PhaseEntered {
        phase: Phase::Strategy,
    });
    t
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanOutcome {
    Milestone(Milestone),
    Complete(String),
    Failed(Failure),
}

pub fn on_plan(state: &OrchestrationState, outcome: PlanOutcome) -> Transition {
    let mut t = Transition::new(state.clone());
    match outcome {
        PlanOutcome::Milestone(mut m) => {
            m.status = MilestoneStatus::InProgress;
            m.fix_round = 0;
            m.budget_remaining = m.cycle_budget;
            t.state.current_milestone = Some(m.clone());
            t.state.cycle = 0;
            t.state.progress = None;
            t.state.consecutive_failures = 0;
            t.push(LifecycleEvent::MilestoneDefined { milestone: m });
            t.enter(Phase::Execution);
        }
        PlanOutcome::Complete(summary) => {
            t.state.paused = true;
            t.state.consecutive_failures = 0;
            t.push(LifecycleEvent::ProjectCompleted { summary });
        }
        PlanOutcome::Failed(f) => {
            t.state.consecutive_failures += 1;
            t.push(LifecycleEvent::FailureEpisode { failure: f });
        }
    }
    t
}

pub fn start_cycle(state: &OrchestrationState) -> Transition {
    let mut t = Transition::new(state.clone());
    t.state.cycle += 1;
    t.state.total_cycles += 1;
    t.state.progress = Some(StepProgress::Cycle {
        schedule: None,
        next_item: 0,
        skipped: false,
        tasks_ok: 0,
        tasks_failed: 0,
    });
    t.push(LifecycleEvent::CycleStarted { cycle: t.state.cycle });
    t
}

fn close_milestone(t: &mut Transition, status: MilestoneStatus, reason: Option<&str>) {
    if let Some(m) = t.state.current_milestone.as_mut() {
        m.status = status;
        let id = m.id.clone();
        t.push(LifecycleEvent::MilestoneClosed {
            id,
            status,
            reason: reason.map(str::to_string),
        });
    }
    t.state.progress = None;
}

pub fn expire_budget(state: &OrchestrationState) -> Transition {
    let mut t = Transition::new(state.clone());
    close_milestone(&mut t, MilestoneStatus::Failed, Some(BUDGET_EXPIRED_REASON));
    t.enter(Phase::Strategy);
    t
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AssessOutcome {
    Claim(String),
    Schedule(Vec<ScheduleItem>),
    /// The manager ran fine but asked for nothing this cycle.
    Idle,
    Failed(Failure),
}

pub fn on_assess(state: &OrchestrationState, outcome: AssessOutcome) -> Transition {
    let mut t = Transition::new(state.clone());
    match outcome {
        AssessOutcome::Claim(summary) => {
            t.state.consecutive_failures = 0;
            if let Some(m) = t.state.current_milestone.as_mut() {
                m.status = MilestoneStatus::AwaitingVerification;
            }
            t.state.progress = Some(fresh_verification(0));
            t.push(LifecycleEvent::CompletionClaimed { summary });
            t.enter(Phase::Verification);
        }
        AssessOutcome::Schedule(items) if !items.is_empty() => {
            t.state.consecutive_failures = 0;
            if let Some(StepProgress::Cycle { schedule, next_item, .. }) = t.state.progress.as_mut() {
                *schedule = Some(items);
                *next_item = 0;
            }
        }
        AssessOutcome::Schedule(_) | AssessOutcome::Idle => {
            t.state.consecutive_failures = 0;
            t.state.progress = None;
        }
        AssessOutcome::Failed(f) => {
            t.state.consecutive_failures += 1;
            t.state.failed_cycles += 1;
            t.state.progress = None;
            t.push(LifecycleEvent::FailureEpisode { failure: f });
        }
    }
    t
}

fn fresh_verification(attempt: u32) -> StepProgress {
    StepProgress::Verification {
        attempt,
        schedule: Vec::new(),
        next_item: 0,
        pending_verdict: None,
        invoked: false,
        qa_issue: None,
    }
}

/// Result of running one schedule item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ItemOutcome {
    Ran { agent: String, exit_status: ExitStatus },
    Waited,
    Skipped { worker: String },
}

pub fn on_item(state: &OrchestrationState, item: &ScheduleItem, index: usize, of: usize, outcome: ItemOutcome) -> Transition {
    let mut t = Transition::new(state.clone());
    let result = match &outcome {
        ItemOutcome::Ran { agent, exit_status } => {
            if let Some(f) = Failure::from_exit(agent, exit_status) {
                t.state.consecutive_failures += 1;
                t.push(LifecycleEvent::FailureEpisode { failure: f });
            } else {
                t.state.consecutive_failures = 0;
            }
            ItemResult::Completed {
                agent: agent.clone(),
                exit_status: exit_status.clone(),
            }
        }
        ItemOutcome::Waited => ItemResult::Waited,
        ItemOutcome::Skipped { worker } => {
            t.push(LifecycleEvent::FailureEpisode {
                failure: Failure::UnknownWorker { name: worker.clone() },
            });
            ItemResult::Skipped {
                reason: format!("no active worker named {worker} reports to this manager"),
            }
        }
    };
    t.push(LifecycleEvent::ScheduleItemRun {
        item: item.clone(),
        index,
        of,
        result,
    });

    let mut cycle_failed = None;
    match t.state.progress.as_mut() {
        Some(StepProgress::Cycle {
            schedule,
            next_item,
            skipped,
            tasks_ok,
            tasks_failed,
        }) => {
            match &outcome {
                ItemOutcome::Ran { exit_status, .. } if exit_status.is_ok() => *tasks_ok += 1,
                ItemOutcome::Ran { .. } => *tasks_failed += 1,
                ItemOutcome::Skipped { .. } => *skipped = true,
                ItemOutcome::Waited => {}
            }
            *next_item = index + 1;
            let len = schedule.as_ref().map_or(0, Vec::len);
            if *next_item >= len {
                cycle_failed = Some(*skipped || (*tasks_ok == 0 && *tasks_failed > 0));
            }
        }
        Some(StepProgress::Verification { next_item, .. }) => *next_item = index + 1,
        None => {}
    }
    if let Some(failed) = cycle_failed {
        if failed {
            t.state.failed_cycles += 1;
        }
        t.state.progress = None;
    }
    t
}

/// What the verification manager's invocation produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyOutcome {
    pub schedule: Vec<ScheduleItem>,
    pub verdict: Option<Verdict>,
    pub failure: Option<Failure>,
}

pub fn on_verify(state: &OrchestrationState, outcome: VerifyOutcome) -> Transition {
    let mut t = Transition::new(state.clone());
    match outcome.failure {
        Some(f) => {
            t.state.consecutive_failures += 1;
            t.push(LifecycleEvent::FailureEpisode { failure: f });
        }
        None => t.state.consecutive_failures = 0,
    }
    let attempt = match &state.progress {
        Some(StepProgress::Verification { attempt, .. }) => *attempt,
        _ => 0,
    };
    let qa_issue = match &state.progress {
        Some(StepProgress::Verification { qa_issue, .. }) => *qa_issue,
        _ => None,
    };
    t.state.progress = Some(StepProgress::Verification {
        attempt,
        schedule: outcome.schedule,
        next_item: 0,
        pending_verdict: outcome.verdict,
        invoked: true,
        qa_issue,
    });
    t
}

pub fn retry_verification(state: &OrchestrationState) -> Transition {
    let mut t = Transition::new(state.clone());
    let qa = match &state.progress {
        Some(StepProgress::Verification { qa_issue, .. }) => *qa_issue,
        _ => None,
    };
    let mut p = fresh_verification(1);
    if let StepProgress::Verification { qa_issue, .. } = &mut p {
        *qa_issue = qa;
    }
    t.state.progress = Some(p);
    t
}

pub fn give_up_verification(state: &OrchestrationState) -> Transition {
    let verdict = Verdict::fail(NO_VERDICT_FEEDBACK).expect("non-empty feedback");
    let mut t = apply_verdict(state, verdict);
    t.events.insert(
        0,
        LifecycleEvent::FailureEpisode {
            failure: Failure::NoVerdict,
        },
    );
    t
}

pub fn apply_verdict(state: &OrchestrationState, verdict: Verdict) -> Transition {
    let mut t = Transition::new(state.clone());
    t.push(LifecycleEvent::VerdictIssued {
        verdict: verdict.clone(),
    });
    if verdict.is_pass() {
        t.state.last_verification_feedback = None;
        close_milestone(&mut t, MilestoneStatus::Passed, None);
        t.enter(Phase::Strategy);
        return t;
    }
    t.state.last_verification_feedback = Some(verdict.feedback.clone());
    let budget = match t.state.current_milestone.as_mut() {
        Some(m) => {
            m.fix_round += 1;
            m.budget_remaining /= 2;
            m.budget_remaining
        }
        None => 0,
    };
    if budget == 0 {
        close_milestone(&mut t, MilestoneStatus::Failed, Some(BUDGET_EXHAUSTED_REASON));
        t.enter(Phase::Strategy);
    } else {
        if let Some(m) = t.state.current_milestone.as_mut() {
            m.status = MilestoneStatus::InProgress;
        }
        t.state.cycle = 0;
        t.state.progress = None;
        t.push(LifecycleEvent::FixRoundStarted { budget });
        t.enter(Phase::Execution);
    }
    t
}

/// Abandons the current attempt after too many consecutive failures.
pub fn escalate(state: &OrchestrationState) -> Transition {
    let mut t = Transition::new(state.clone());
    let consecutive = state.consecutive_failures;
    t.push(LifecycleEvent::FailureEpisode {
        failure: Failure::Escalation { consecutive },
    });
    if state.active_milestone().is_some() {
        let reason = format!("escalated after {consecutive} consecutive failures");
        close_milestone(&mut t, MilestoneStatus::Failed, Some(&reason));
    }
    if state.phase != Phase::Strategy {
        t.enter(Phase::Strategy);
    }
    t.state.progress = None;
    t.state.consecutive_failures = 0;
    t
}

pub fn bootstrap(state: &OrchestrationState) -> Transition {
    let mut t = Transition::new(state.clone());
    if state.active_milestone().is_some() {
        close_milestone(&mut t, MilestoneStatus::Failed, Some(BOOTSTRAP_REASON));
    }
    if state.phase != Phase::Strategy {
        t.enter(Phase::Strategy);
    }
    t.state.progress = None;
    t.state.consecutive_failures = 0;
    t.push(LifecycleEvent::BootstrapReset);
    t
}

/// The part of [`OrchestrationState`] that the event log determines.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Replayed {
    pub phase: Option<Phase>,
    pub current_milestone: Option<Milestone>,
    pub cycle: u32,
    pub total_cycles: u64,
    pub failed_cycles: u64,
    pub last_verification_feedback: Option<String>,
}

impl Replayed {
    pub fn of(state: &OrchestrationState) -> Self {
        Replayed {
            phase: Some(state.phase),
            current_milestone: state.current_milestone.clone(),
            cycle: state.cycle,
            total_cycles: state.total_cycles,
            failed_cycles: state.failed_cycles,
            last_verification_feedback: state.last_verification_feedback.clone(),
        }
    }
}

/// Rebuilds state from the event log alone.
pub fn replay<'a>(events: impl IntoIterator<Item = &'a LifecycleEvent>) -> Replayed {
    let mut r = Replayed::default();
    let mut cycle_open = false;
    let (mut ok, mut failed, mut skipped) = (0u32, 0u32, false);
    for e in events {
        match e {
            LifecycleEvent::PhaseEntered { phase } => r.phase = Some(*phase),
            LifecycleEvent::MilestoneDefined { milestone } => {
                r.current_milestone = Some(milestone.clone());
                r.cycle = 0;
            }
            LifecycleEvent::CycleStarted { cycle } => {
                r.cycle = *cycle;
                r.total_cycles += 1;
                cycle_open = true;
                (ok, failed, skipped) = (0, 0, false);
            }
            LifecycleEvent::ScheduleItemRun { index, of, result, .. } => {
                if r.phase == Some(Phase::Execution) && cycle_open {
                    match result {
                        ItemResult::Completed { exit_status, .. } if exit_status.is_ok() => ok += 1,
                        ItemResult::Completed { .. } => failed += 1,
                        ItemResult::Skipped { .. } => skipped = true,
                        ItemResult::Waited => {}
                    }
                    if index + 1 >= *of {
                        if skipped || (ok == 0 && failed > 0) {
                            r.failed_cycles += 1;
                        }
                        cycle_open = false;
                    }
                }
            }
            LifecycleEvent::CompletionClaimed { .. } => {
                cycle_open = false;
                if let Some(m) = r.current_milestone.as_mut() {
                    m.status = MilestoneStatus::AwaitingVerification;
                }
            }
            LifecycleEvent::VerdictIssued { verdict } => {
                if verdict.is_pass() {
                    r.last_verification_feedback = None;
                } else {
                    r.last_verification_feedback = Some(verdict.feedback.clone());
                    if let Some(m) = r.current_milestone.as_mut() {
                        m.fix_round += 1;
                        m.budget_remaining /= 2;
                    }
                }
            }
            LifecycleEvent::FixRoundStarted { budget } => {
                if let Some(m) = r.current_milestone.as_mut() {
                    m.budget_remaining = *budget;
                    m.status = MilestoneStatus::InProgress;
                }
                r.cycle = 0;
            }
            LifecycleEvent::MilestoneClosed { status, .. } => {
                cycle_open = false;
                if let Some(m) = r.current_milestone.as_mut() {
                    m.status = *status;
                }
            }
            LifecycleEvent::FailureEpisode { failure } => {
                let by_ares = failure.agent() == Some("Ares")
                    && !matches!(failure, Failure::NoDirective { .. });
                if by_ares && cycle_open && r.phase == Some(Phase::Execution) {
                    r.failed_cycles += 1;
                    cycle_open = false;
                }
            }
            LifecycleEvent::ProjectCompleted { .. } | LifecycleEvent::BootstrapReset => {}
        }
    }
    r
}
