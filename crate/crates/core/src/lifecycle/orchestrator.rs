//! The async loop that drives one project.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use rust_decimal::Decimal;
use thiserror::Error;
use tokio::sync::watch;

use super::*;
use crate::agent::{
    build_context, compact_context, ensure_managers, invoke, manager_prompt, resolve_worker, sync_skills, AgentError,
    AgentResult, ContextInputs, Counters, Invocation, ModelTier, RetryPolicy, Runner, SkillFile, Workspace,
    DEFAULT_TIMEOUT_SECONDS,
};
use crate::budget::{throttle_decision, BudgetError, CostEntry, CostLedger, ThrottleDecision};
use crate::clock::Clock;
use crate::directive::{Consolidated, VisibilityMode};
use crate::domain::{AgentRole, ManagerRole, ProjectSpec};
use crate::store::{AgentReport, IssueFilter, MilestoneRecord, Store, StoreError, StoredEvent, TimedVerdict, Tx};

/// A registered project: what to build and where its state lives.
#[derive(Debug, Clone)]
pub struct Project {
    pub id: String,
    pub spec: ProjectSpec,
    pub store: Arc<Store>,
}

impl Project {
    pub fn workspace(&self) -> Workspace {
        Workspace::new(&self.spec.repo_path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrchestratorConfig {
    pub failure_threshold: u32,
    pub timeout_seconds: u64,
    pub retry: RetryPolicy,
    pub manager_tier: ModelTier,
    /// Context size limit in estimated tokens, per tier.
    pub context_limits: BTreeMap<ModelTier, usize>,
    /// Return from [`Orchestrator::run`] once the project is complete
    /// instead of waiting for a resume.
    pub exit_on_completion: bool,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        OrchestratorConfig {
            failure_threshold: DEFAULT_FAILURE_THRESHOLD,
            timeout_seconds: DEFAULT_TIMEOUT_SECONDS,
            retry: RetryPolicy::default(),
            manager_tier: ModelTier::High,
            context_limits: BTreeMap::from([
                (ModelTier::High, 200_000),
                (ModelTier::Standard, 128_000),
                (ModelTier::Light, 64_000),
            ]),
            exit_on_completion: false,
        }
    }
}

/// Receives everything the orchestrator does, e.g. to stream it.
/// Implementations must not block.
#[allow(unused_variables)]
pub trait Observer: Send + Sync {
    fn lifecycle(&self, project: &str, event: &StoredEvent<LifecycleEvent>) {}
    fn agent_started(&self, project: &str, agent: &str, role: AgentRole, task: &str) {}
    fn agent_output(&self, project: &str, agent: &str, chunk: &str) {}
    fn agent_finished(&self, project: &str, agent: &str, role: AgentRole, report_id: u64, result: &AgentResult) {}
    fn cost_recorded(&self, project: &str, entry: &CostEntry, rolling_spend: Decimal) {}
    fn paused_changed(&self, project: &str, paused: bool) {}
    fn throttled(&self, project: &str, decision: &ThrottleDecision) {}
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NoopObserver;

impl Observer for NoopObserver {}

struct ControlInner {
    paused: watch::Sender<bool>,
    bootstrap: watch::Sender<u64>,
    stop: watch::Sender<bool>,
}

/// Handle for steering a running project from elsewhere.
#[derive(Clone)]
pub struct ProjectControl {
    inner: Arc<ControlInner>,
}

impl std::fmt::Debug for ProjectControl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProjectControl")
            .field("paused", &self.is_paused())
            .finish_non_exhaustive()
    }
}

impl Default for ProjectControl {
    fn default() -> Self {
        Self::new()
    }
}

impl ProjectControl {
    pub fn new() -> Self {
        ProjectControl {
            inner: Arc::new(ControlInner {
                paused: watch::channel(false).0,
                bootstrap: watch::channel(0).0,
                stop: watch::channel(false).0,
            }),
        }
    }

    /// Takes effect at the next step boundary.
    pub fn pause(&self) {
        self.inner.paused.send_replace(true);
    }

    pub fn resume(&self) {
        self.inner.paused.send_replace(false);
    }

    pub fn is_paused(&self) -> bool {
        *self.inner.paused.borrow()
    }

    /// Interrupts the running step and resets the project to Strategy.
    pub fn bootstrap(&self) -> u64 {
        let mut gen = 0;
        self.inner.bootstrap.send_modify(|g| {
            *g += 1;
            gen = *g;
        });
        gen
    }

    pub fn stop(&self) {
        self.inner.stop.send_replace(true);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    Completed,
    Stopped,
}

#[derive(Debug, Error)]
pub enum LifecycleError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error("injected crash after event {seq}")]
    InjectedCrash { seq: u64 },
}

/// Appends `events`, updates milestone records and snapshots `state`, all
/// in one transaction.
pub fn commit(
    store: &Store,
    events: &[LifecycleEvent],
    state: &OrchestrationState,
    now: DateTime<Utc>,
    extra: impl FnOnce(&Tx<'_>) -> Result<(), StoreError>,
) -> Result<Vec<StoredEvent<LifecycleEvent>>, StoreError> {
    store.write(|tx| {
        let mut stored = Vec::with_capacity(events.len());
        for e in events {
            let seq = tx.append_event(e, now)?;
            update_records(tx, e, state, now)?;
            stored.push(StoredEvent {
                seq,
                at: now,
                event: e.clone(),
            });
        }
        if let Some(m) = &state.current_milestone {
            if let Some(mut rec) = tx.milestone(&m.id)? {
                if rec.milestone != *m {
                    rec.milestone = m.clone();
                    tx.put_milestone(&rec)?;
                }
            }
        }
        extra(tx)?;
        tx.snapshot_state(state, now)?;
        Ok(stored)
    })
}

fn update_records(tx: &Tx<'_>, e: &LifecycleEvent, state: &OrchestrationState, now: DateTime<Utc>) -> Result<(), StoreError> {
    let current = || state.current_milestone.as_ref().map(|m| m.id.clone());
    match e {
        LifecycleEvent::MilestoneDefined { milestone } => tx.put_milestone(&MilestoneRecord::new(milestone.clone())),
        LifecycleEvent::VerdictIssued { verdict } => {
            let Some(id) = current() else { return Ok(()) };
            let Some(mut rec) = tx.milestone(&id)? else { return Ok(()) };
            rec.verdict_history.push(TimedVerdict {
                verdict: verdict.clone(),
                at: now,
            });
            if !verdict.is_pass() {
                let last = rec.budget_history.last().copied().unwrap_or(0);
                rec.budget_history.push(last / 2);
            }
            tx.put_milestone(&rec)
        }
        LifecycleEvent::MilestoneClosed { id, reason, .. } => {
            let Some(mut rec) = tx.milestone(id)? else { return Ok(()) };
            rec.closed_reason = reason.clone();
            tx.put_milestone(&rec)
        }
        _ => Ok(()),
    }
}

/// Bootstrap reset for a project whose loop is not running.
pub fn bootstrap_offline(
    store: &Store,
    project_id: &str,
    now: DateTime<Utc>,
) -> Result<Vec<StoredEvent<LifecycleEvent>>, StoreError> {
    let (mut events, state) = match store.load_state() {
        Ok(s) => (Vec::new(), s),
        Err(StoreError::NoSnapshot) => {
            let t = begin(project_id);
            (t.events, t.state)
        }
        Err(e) => return Err(e),
    };
    let t = bootstrap(&state);
    events.extend(t.events);
    commit(store, &events, &t.state, now, |_| Ok(()))
}

/// Who is being invoked and how.
struct Agent {
    name: String,
    role: AgentRole,
    tier: ModelTier,
    instructions: String,
}

pub struct Orchestrator {
    project: Project,
    workspace: Workspace,
    runner: Arc<dyn Runner>,
    clock: Arc<dyn Clock>,
    observer: Arc<dyn Observer>,
    vcs: Arc<dyn Vcs>,
    config: OrchestratorConfig,
    control: ProjectControl,
    state: OrchestrationState,
    ledger: CostLedger,
    crash_after: Option<u64>,
    completed: bool,
}

impl Orchestrator {
    pub fn new(project: Project, runner: Arc<dyn Runner>, clock: Arc<dyn Clock>) -> Self {
        let state = OrchestrationState::fresh(&project.id);
        Orchestrator {
            workspace: project.workspace(),
            project,
            runner,
            clock,
            observer: Arc::new(NoopObserver),
            vcs: Arc::new(Git),
            config: OrchestratorConfig::default(),
            control: ProjectControl::new(),
            state,
            ledger: CostLedger::new(),
            crash_after: None,
            completed: false,
        }
    }

    pub fn with_config(mut self, config: OrchestratorConfig) -> Self {
        self.config = config;
        self
    }

    pub fn with_observer(mut self, observer: Arc<dyn Observer>) -> Self {
        self.observer = observer;
        self
    }

    pub fn with_vcs(mut self, vcs: Arc<dyn Vcs>) -> Self {
        self.vcs = vcs;
        self
    }

    pub fn with_control(mut self, control: ProjectControl) -> Self {
        self.control = control;
        self
    }

    /// Fault injection: fail with [`LifecycleError::InjectedCrash`] right
    /// after the commit that makes event `seq` durable.
    pub fn with_crash_after(mut self, seq: u64) -> Self {
        self.crash_after = Some(seq);
        self
    }

    pub fn control(&self) -> &ProjectControl {
        &self.control
    }

    pub fn state(&self) -> &OrchestrationState {
        &self.state
    }

    fn pid(&self) -> &str {
        &self.project.id
    }

    fn store(&self) -> &Store {
        &self.project.store
    }

    /// Loads durable state, or records the first event for a new project.
    pub fn start(&mut self) -> Result<(), LifecycleError> {
        match self.store().load_state() {
            Ok(s) => self.state = s,
            Err(StoreError::NoSnapshot) => {
                let t = begin(&self.project.id);
                self.apply(t, |_| Ok(()))?;
            }
            Err(e) => return Err(e.into()),
        }
        let now = self.clock.now();
        ensure_managers(self.store(), now)?;
        sync_skills(&self.workspace, self.store(), now)?;
        self.ledger = CostLedger::from_entries(self.store().cost_entries()?)?;
        if self.state.paused {
            self.control.pause();
        }
        Ok(())
    }

    fn apply(
        &mut self,
        t: Transition,
        extra: impl FnOnce(&Tx<'_>) -> Result<(), StoreError>,
    ) -> Result<(), LifecycleError> {
        let now = self.clock.now();
        let stored = commit(self.store(), &t.events, &t.state, now, extra)?;
        self.state = t.state;
        for e in &stored {
            if matches!(e.event, LifecycleEvent::ProjectCompleted { .. }) {
                self.completed = true;
                self.control.pause();
            }
            self.observer.lifecycle(&self.project.id, e);
        }
        if let (Some(limit), Some(last)) = (self.crash_after, stored.last()) {
            if last.seq >= limit {
                return Err(LifecycleError::InjectedCrash { seq: last.seq });
            }
        }
        Ok(())
    }

    /// Runs until completion (with `exit_on_completion`), stop, or a store
    /// failure.
    pub async fn run(&mut self) -> Result<RunOutcome, LifecycleError> {
        self.start()?;
        let control = self.control.clone();
        let mut pause_rx = control.inner.paused.subscribe();
        let mut boot_rx = control.inner.bootstrap.subscribe();
        let mut stop_rx = control.inner.stop.subscribe();
        let mut seen_boot = *boot_rx.borrow_and_update();
        loop {
            if *stop_rx.borrow_and_update() {
                return Ok(RunOutcome::Stopped);
            }
            let gen = *boot_rx.borrow_and_update();
            if gen != seen_boot {
                seen_boot = gen;
                let t = bootstrap(&self.state);
                self.apply(t, |_| Ok(()))?;
                continue;
            }
            let want_pause = *pause_rx.borrow_and_update();
            if want_pause != self.state.paused {
                let mut s = self.state.clone();
                s.paused = want_pause;
                self.apply(Transition::new(s), |_| Ok(()))?;
                self.observer.paused_changed(&self.project.id, want_pause);
            }
            if self.state.paused {
                if self.config.exit_on_completion && self.completed {
                    return Ok(RunOutcome::Completed);
                }
                tokio::select! {
                    _ = pause_rx.changed() => {}
                    _ = boot_rx.changed() => {}
                    _ = stop_rx.changed() => {}
                }
                continue;
            }
            tokio::select! {
                biased;
                _ = boot_rx.changed() => {}
                _ = stop_rx.changed() => {}
                r = self.step() => r?,
            }
        }
    }

    /// Performs exactly one action and commits its outcome.
    pub async fn step(&mut self) -> Result<(), LifecycleError> {
        let action = next_action(&self.state, self.config.failure_threshold);
        tracing::debug!(project = %self.project.id, ?action, "step");
        match action {
            Action::Escalate => self.escalate(),
            Action::Plan => self.plan().await,
            Action::StartCycle => self.apply(start_cycle(&self.state), |_| Ok(())),
            Action::ExpireBudget => self.apply(expire_budget(&self.state), |_| Ok(())),
            Action::Assess => self.assess().await,
            Action::RunItem { item, index, of } => self.run_item(item, index, of).await,
            Action::Verify { attempt } => self.verify(attempt).await,
            Action::RetryVerification => self.apply(retry_verification(&self.state), |_| Ok(())),
            Action::GiveUpVerification => self.apply(give_up_verification(&self.state), |_| Ok(())),
            Action::ApplyVerdict(v) => self.apply(apply_verdict(&self.state, v), |_| Ok(())),
        }
    }

    fn escalate(&mut self) -> Result<(), LifecycleError> {
        let n = self.state.consecutive_failures;
        let phase = self.state.phase;
        let milestone = self
            .state
            .active_milestone()
            .map(|m| format!("milestone {} ({})", m.id, m.title))
            .unwrap_or_else(|| "no active milestone".into());
        let recent: Vec<String> = self
            .store()
            .events::<LifecycleEvent>()?
            .iter()
            .rev()
            .filter_map(|e| match &e.event {
                LifecycleEvent::FailureEpisode { failure } => Some(format!("- {}: {failure:?}", e.at.to_rfc3339())),
                _ => None,
            })
            .take(n as usize)
            .collect();
        let title = format!("Escalation: {n} consecutive failures during {phase}");
        let body = format!(
            "The orchestrator abandoned the current {phase} attempt on {milestone} after {n} consecutive failed invocations.\n\nRecent failures:\n{}",
            recent.into_iter().rev().collect::<Vec<_>>().join("\n")
        );
        let now = self.clock.now();
        let t = escalate(&self.state);
        self.apply(t, |tx| tx.open_issue(&title, &body, "orchestrator", None, None, now).map(|_| ()))
    }

    fn manager(&self, role: ManagerRole) -> Agent {
        Agent {
            name: role.agent_name().to_string(),
            role: AgentRole::manager(role),
            tier: self.config.manager_tier,
            instructions: manager_prompt(role),
        }
    }

    async fn throttle(&self) {
        let budget = &self.project.spec.budget;
        loop {
            let now = self.clock.now();
            let avg = self.ledger.avg_recent_cost(budget.default_invocation_cost);
            let decision = throttle_decision(budget, &self.ledger, now, avg);
            match decision {
                ThrottleDecision::Proceed => return,
                ThrottleDecision::Sleep { seconds } => {
                    self.observer.throttled(self.pid(), &decision);
                    self.clock.sleep(Duration::from_secs(seconds)).await;
                    return;
                }
                ThrottleDecision::PauseUntil { until } => {
                    self.observer.throttled(self.pid(), &decision);
                    if until > now {
                        self.clock.sleep_until(until).await;
                    } else {
                        self.clock.sleep(Duration::from_secs(1)).await;
                    }
                }
            }
        }
    }

    fn history(&self) -> Result<Option<String>, LifecycleError> {
        let records = self.store().milestones()?;
        let closed: Vec<&MilestoneRecord> = records.iter().filter(|r| r.milestone.status.is_terminal()).collect();
        if closed.is_empty() {
            return Ok(None);
        }
        let mut lines = vec!["Milestone history:".to_string()];
        for r in closed.iter().rev().take(10).rev() {
            let mut line = format!("- {} {}: {}", r.milestone.id, r.milestone.title, r.milestone.status.as_str());
            if let Some(reason) = &r.closed_reason {
                line.push_str(&format!(" ({reason})"));
            }
            lines.push(line);
        }
        if let Some(fb) = closed
            .last()
            .and_then(|r| r.verdict_history.last())
            .filter(|v| !v.verdict.is_pass())
        {
            lines.push(format!("Last verification feedback:\n{}", fb.verdict.feedback));
        }
        Ok(Some(lines.join("\n")))
    }

    async fn run_agent(
        &mut self,
        agent: &Agent,
        task: &str,
        visibility: VisibilityMode,
    ) -> Result<AgentResult, LifecycleError> {
        self.throttle().await;
        let issues = self.store().list_issues(&IssueFilter::open(), &visibility)?;
        let note = self.workspace.read_note(&agent.name);
        let history = if agent.role == AgentRole::StrategyManager {
            self.history()?
        } else {
            None
        };
        let inputs = ContextInputs {
            agent: &agent.name,
            role: agent.role,
            instructions: &agent.instructions,
            spec: &self.project.spec,
            note: note.as_deref(),
            issues: &issues,
            milestone: self.state.current_milestone.as_ref(),
            counters: Counters {
                phase: Some(self.state.phase),
                cycle: self.state.cycle,
                total_cycles: self.state.total_cycles,
                failed_cycles: self.state.failed_cycles,
            },
            verification_feedback: self.state.last_verification_feedback.as_deref(),
            history: history.as_deref(),
        };
        let full = build_context(&inputs);
        let limit = self.config.context_limits.get(&agent.tier).copied().unwrap_or(usize::MAX);
        let context = match compact_context(&full, limit) {
            Ok(c) => c,
            Err(e) => {
                tracing::warn!(agent = %agent.name, "context over limit, sending uncompacted: {e}");
                full
            }
        };
        let invocation = Invocation {
            agent: agent.name.clone(),
            role: agent.role,
            tier: agent.tier,
            system_context: context.render(),
            task: task.to_string(),
            visibility,
            workspace: self.workspace.root().to_path_buf(),
            store_dir: self.store().dir().to_path_buf(),
            timeout_seconds: self.config.timeout_seconds,
        };
        self.observer.agent_started(self.pid(), &agent.name, agent.role, task);
        let observer = self.observer.clone();
        let pid = self.project.id.clone();
        let name = agent.name.clone();
        let on_chunk = move |chunk: &str| observer.agent_output(&pid, &name, chunk);
        let result = invoke(
            self.runner.as_ref(),
            &invocation,
            &self.config.retry,
            self.clock.as_ref(),
            &on_chunk,
        )
        .await;

        let now = self.clock.now();
        let report = AgentReport {
            agent: agent.name.clone(),
            role: agent.role,
            phase: self.state.phase,
            cycle: self.state.cycle,
            milestone_id: self.state.current_milestone.as_ref().map(|m| m.id.clone()),
            raw_output: result.raw_text.clone(),
            directives: result.directives.clone(),
            token_usage: result.token_usage,
            duration_seconds: result.duration_seconds,
            exit_status: result.exit_status.clone(),
        };
        let usd = self.project.spec.budget.price(agent.tier, result.token_usage);
        let timestamp = self.ledger.entries().last().map_or(now, |e| e.timestamp.max(now));
        let entry = CostEntry {
            timestamp,
            agent: agent.name.clone(),
            role: agent.role,
            tokens_in: result.token_usage.input,
            tokens_out: result.token_usage.output,
            tokens_cached: result.token_usage.cached,
            usd,
        };
        let report_id = self.store().write(|tx| {
            let id = tx.record_report(&report, now)?;
            tx.append_cost(&entry)?;
            Ok(id)
        })?;
        self.ledger.record(entry.clone())?;
        self.observer.agent_finished(self.pid(), &agent.name, agent.role, report_id, &result);
        self.observer.cost_recorded(self.pid(), &entry, self.ledger.rolling_spend(now));
        if agent.role.is_manager() {
            sync_skills(&self.workspace, self.store(), self.clock.now())?;
        }
        Ok(result)
    }

    async fn plan(&mut self) -> Result<(), LifecycleError> {
        let athena = self.manager(ManagerRole::Strategy);
        let task = "Assess the project's progress and open issues (human-filed issues first), then define the next milestone or declare the project complete.";
        let result = self.run_agent(&athena, task, VisibilityMode::Full).await?;
        let outcome = if let Some(f) = Failure::from_exit(&athena.name, &result.exit_status) {
            PlanOutcome::Failed(f)
        } else {
            let c = Consolidated::from_directives(&result.directives);
            match (c.milestone, c.completion) {
                (Some((mp, _)), Some((cp, summary))) if cp > mp => PlanOutcome::Complete(summary),
                (None, Some((_, summary))) => PlanOutcome::Complete(summary),
                (Some((_, m)), _) => {
                    let existing: Vec<MilestoneId> =
                        self.store().milestones()?.into_iter().map(|r| r.milestone.id).collect();
                    let id = match m.id {
                        Some(id) if !existing.contains(&id) => id,
                        Some(id) => {
                            tracing::warn!(%id, "milestone id already used, assigning a new one");
                            MilestoneId::next_root(&existing)
                        }
                        None => MilestoneId::next_root(&existing),
                    };
                    PlanOutcome::Milestone(Milestone::new(id, m.title, m.description, m.cycle_budget))
                }
                (None, None) => PlanOutcome::Failed(Failure::NoDirective { agent: athena.name.clone() }),
            }
        };
        self.apply(on_plan(&self.state, outcome), |_| Ok(()))
    }

    async fn assess(&mut self) -> Result<(), LifecycleError> {
        let ares = self.manager(ManagerRole::Execution);
        let (id, budget) = self
            .state
            .active_milestone()
            .map(|m| (m.id.to_string(), m.budget_remaining))
            .unwrap_or_default();
        let task = format!(
            "Cycle {} of {budget} for milestone {id}. Assess progress, then either claim completion with evidence or schedule your workers for this cycle.",
            self.state.cycle
        );
        let result = self.run_agent(&ares, &task, VisibilityMode::Full).await?;
        let outcome = if let Some(f) = Failure::from_exit(&ares.name, &result.exit_status) {
            AssessOutcome::Failed(f)
        } else {
            let c = Consolidated::from_directives(&result.directives);
            match c.claim {
                Some(summary) => {
                    if !c.schedule.is_empty() {
                        tracing::warn!("completion claim and schedule in one response; the claim wins");
                    }
                    AssessOutcome::Claim(summary)
                }
                None if !c.schedule.is_empty() => AssessOutcome::Schedule(c.schedule),
                None => AssessOutcome::Idle,
            }
        };
        self.apply(on_assess(&self.state, outcome), |_| Ok(()))
    }

    async fn verify(&mut self, attempt: u32) -> Result<(), LifecycleError> {
        let apollo = self.manager(ManagerRole::Verification);
        let id = self
            .state
            .current_milestone
            .as_ref()
            .map(|m| m.id.to_string())
            .unwrap_or_default();
        let qa_issue = match &self.state.progress {
            Some(StepProgress::Verification { qa_issue, .. }) => *qa_issue,
            _ => None,
        };
        let task = match (attempt, qa_issue) {
            (0, _) => format!(
                "The execution team claims milestone {id} is complete. Verify it independently and deliver a verdict, optionally scheduling QA workers first."
            ),
            (_, Some(issue)) => format!(
                "QA findings for milestone {id} are posted on issue #{issue}. Deliver your verdict now."
            ),
            (_, None) => format!(
                "Your previous response for milestone {id} contained no verdict. Deliver a verdict block now."
            ),
        };
        let result = self.run_agent(&apollo, &task, VisibilityMode::Full).await?;
        let outcome = match Failure::from_exit(&apollo.name, &result.exit_status) {
            Some(f) => VerifyOutcome {
                schedule: Vec::new(),
                verdict: None,
                failure: Some(f),
            },
            None => {
                let c = Consolidated::from_directives(&result.directives);
                if c.verdict.is_some() && !c.schedule.is_empty() {
                    tracing::info!("verification schedule and verdict in one response; schedule runs first");
                }
                VerifyOutcome {
                    schedule: c.schedule,
                    verdict: c.verdict,
                    failure: None,
                }
            }
        };
        self.apply(on_verify(&self.state, outcome), |_| Ok(()))
    }

    async fn run_item(&mut self, item: ScheduleItem, index: usize, of: usize) -> Result<(), LifecycleError> {
        let manager = match self.state.phase {
            Phase::Verification => ManagerRole::Verification,
            _ => ManagerRole::Execution,
        };
        let (worker_name, task, visibility, delay) = match &item {
            ScheduleItem::Delay { duration_seconds } => {
                self.clock.sleep(Duration::from_secs(*duration_seconds)).await;
                let t = on_item(&self.state, &item, index, of, ItemOutcome::Waited);
                return self.apply(t, |_| Ok(()));
            }
            ScheduleItem::Task {
                worker_name,
                task,
                visibility,
                delay_before_seconds,
            } => (worker_name.clone(), task.clone(), visibility.clone(), *delay_before_seconds),
        };
        let skill = match resolve_worker(&self.workspace, self.store(), &worker_name, manager) {
            Ok(s) => s,
            Err(e) => {
                tracing::warn!(worker = %worker_name, "skipping schedule item: {e}");
                let t = on_item(&self.state, &item, index, of, ItemOutcome::Skipped { worker: worker_name });
                return self.apply(t, |_| Ok(()));
            }
        };
        if delay > 0 {
            self.clock.sleep(Duration::from_secs(delay)).await;
        }
        let agent = worker(&skill);
        let result = self.run_agent(&agent, &task, visibility).await?;
        self.commit_early(&agent.name);

        let mut t = on_item(
            &self.state,
            &item,
            index,
            of,
            ItemOutcome::Ran {
                agent: agent.name.clone(),
                exit_status: result.exit_status.clone(),
            },
        );
        if manager == ManagerRole::Verification {
            let now = self.clock.now();
            let id = self.state.current_milestone.as_ref().map(|m| m.id.to_string()).unwrap_or_default();
            let existing = match &self.state.progress {
                Some(StepProgress::Verification { qa_issue, .. }) => *qa_issue,
                _ => None,
            };
            let issue = match existing {
                Some(n) => n,
                None => {
                    self.store()
                        .open_issue(
                            &format!("Verification of milestone {id}"),
                            "QA findings collected during verification.",
                            "Apollo",
                            None,
                            now,
                        )?
                        .id
                }
            };
            if let Some(StepProgress::Verification { qa_issue, .. }) = t.state.progress.as_mut() {
                *qa_issue = Some(issue);
            }
            let body = qa_comment(&result);
            self.apply(t, |tx| tx.add_comment(issue, &agent.name, &body, now).map(|_| ()))
        } else {
            self.apply(t, |_| Ok(()))
        }
    }

    fn commit_early(&self, worker: &str) {
        let Some(m) = &self.state.current_milestone else { return };
        let tag = format!("tbc/{}/c{}", m.id, self.state.cycle);
        let message = format!("{tag}: {worker}");
        match self.vcs.commit_progress(self.workspace.root(), &message, &tag) {
            Ok(true) => tracing::info!(%tag, "committed workspace progress"),
            Ok(false) => {}
            Err(e) => tracing::warn!("commit-early failed: {e}"),
        }
    }
}

fn worker(skill: &SkillFile) -> Agent {
    Agent {
        name: skill.name.clone(),
        role: skill.role(),
        tier: skill.model_tier,
        instructions: format!("Role: {}\n\n{}", skill.role_title, skill.instructions),
    }
}

const QA_COMMENT_LIMIT: usize = 4000;

fn qa_comment(result: &AgentResult) -> String {
    let status = match &result.exit_status {
        crate::store::ExitStatus::Ok => "ok".to_string(),
        crate::store::ExitStatus::Timeout => "timeout".to_string(),
        crate::store::ExitStatus::Error(e) => format!("error: {e}"),
    };
    let mut text = result.raw_text.trim().to_string();
    if text.len() > QA_COMMENT_LIMIT {
        let mut end = QA_COMMENT_LIMIT;
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        text.truncate(end);
        text.push_str("\n[...truncated]");
    }
    format!("[{status}]\n{text}")
}
