//! Per-project event buses feeding the SSE stream.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};

use botforge_core::agent::AgentResult;
use botforge_core::lifecycle::{LifecycleEvent, Observer};
use botforge_core::store::StoredEvent;
use botforge_core::{AgentRole, CostEntry, Phase, ThrottleDecision};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast;

/// Events retained per project for `Last-Event-ID` replay.
pub const BUFFER_SIZE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    PhaseChange,
    MilestoneUpdate,
    CycleStarted,
    AgentStarted,
    AgentOutputChunk,
    AgentFinished,
    Verdict,
    CostUpdate,
    Failure,
    ProjectCompleted,
    Bootstrap,
}

impl EventType {
    pub fn as_str(self) -> &'static str {
        match self {
            EventType::PhaseChange => "phase_change",
            EventType::MilestoneUpdate => "milestone_update",
            EventType::CycleStarted => "cycle_started",
            EventType::AgentStarted => "agent_started",
            EventType::AgentOutputChunk => "agent_output_chunk",
            EventType::AgentFinished => "agent_finished",
            EventType::Verdict => "verdict",
            EventType::CostUpdate => "cost_update",
            EventType::Failure => "failure",
            EventType::ProjectCompleted => "project_completed",
            EventType::Bootstrap => "bootstrap",
        }
    }

    /// The stream type a lifecycle event is published as.
    pub fn of(event: &LifecycleEvent) -> EventType {
        match event {
            LifecycleEvent::PhaseEntered { .. } => EventType::PhaseChange,
            LifecycleEvent::MilestoneDefined { .. }
            | LifecycleEvent::CompletionClaimed { .. }
            | LifecycleEvent::FixRoundStarted { .. }
            | LifecycleEvent::MilestoneClosed { .. } => EventType::MilestoneUpdate,
            LifecycleEvent::CycleStarted { .. } => EventType::CycleStarted,
            LifecycleEvent::ScheduleItemRun { .. } => EventType::AgentFinished,
            LifecycleEvent::VerdictIssued { .. } => EventType::Verdict,
            LifecycleEvent::ProjectCompleted { .. } => EventType::ProjectCompleted,
            LifecycleEvent::BootstrapReset => EventType::Bootstrap,
            LifecycleEvent::FailureEpisode { .. } => EventType::Failure,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiEvent {
    pub event_type: EventType,
    pub project_id: String,
    pub payload: Value,
    pub seq: u64,
}

impl ApiEvent {
    /// The lifecycle event this was published for, if any.
    pub fn lifecycle(&self) -> Option<(u64, LifecycleEvent)> {
        let seq = self.payload.get("lifecycle_seq")?.as_u64()?;
        let event = serde_json::from_value(self.payload.get("event")?.clone()).ok()?;
        Some((seq, event))
    }
}

struct Ring {
    next_seq: u64,
    buffer: VecDeque<ApiEvent>,
}

/// Ordered fan-out for one project. Publishing never waits on readers.
pub struct EventBus {
    project_id: String,
    ring: Mutex<Ring>,
    tx: broadcast::Sender<ApiEvent>,
}

impl EventBus {
    pub fn new(project_id: &str) -> Self {
        EventBus {
            project_id: project_id.to_string(),
            ring: Mutex::new(Ring {
                next_seq: 1,
                buffer: VecDeque::with_capacity(BUFFER_SIZE),
            }),
            tx: broadcast::channel(BUFFER_SIZE).0,
        }
    }

    fn ring(&self) -> std::sync::MutexGuard<'_, Ring> {
        self.ring.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn publish(&self, event_type: EventType, payload: Value) -> ApiEvent {
        let mut ring = self.ring();
        let event = ApiEvent {
            event_type,
            project_id: self.project_id.clone(),
            payload,
            seq: ring.next_seq,
        };
        ring.next_seq += 1;
        if ring.buffer.len() == BUFFER_SIZE {
            ring.buffer.pop_front();
        }
        ring.buffer.push_back(event.clone());
        // Sent under the lock so subscribers see buffer and live events in one order.
        let _ = self.tx.send(event.clone());
        event
    }

    /// Buffered events after `after` plus a receiver for everything newer.
    pub fn subscribe(&self, after: Option<u64>) -> (Vec<ApiEvent>, broadcast::Receiver<ApiEvent>) {
        let ring = self.ring();
        let backlog = match after {
            Some(n) => ring.buffer.iter().filter(|e| e.seq > n).cloned().collect(),
            None => Vec::new(),
        };
        (backlog, self.tx.subscribe())
    }

    pub fn buffered(&self) -> Vec<ApiEvent> {
        self.ring().buffer.iter().cloned().collect()
    }

    pub fn last_seq(&self) -> u64 {
        self.ring().next_seq - 1
    }
}

/// All project buses; also the orchestrator's observer.
#[derive(Default)]
pub struct EventHub {
    buses: Mutex<BTreeMap<String, Arc<EventBus>>>,
}

impl EventHub {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bus(&self, project_id: &str) -> Arc<EventBus> {
        let mut buses = self.buses.lock().unwrap_or_else(|p| p.into_inner());
        buses
            .entry(project_id.to_string())
            .or_insert_with(|| Arc::new(EventBus::new(project_id)))
            .clone()
    }

    pub fn publish_lifecycle(&self, project: &str, event: &StoredEvent<LifecycleEvent>) -> ApiEvent {
        let mut payload = json!({
            "lifecycle_seq": event.seq,
            "at": event.at,
            "event": event.event,
        });
        if matches!(event.event, LifecycleEvent::BootstrapReset) {
            payload["phase"] = json!(Phase::Strategy);
        }
        self.bus(project).publish(EventType::of(&event.event), payload)
    }
}

impl Observer for EventHub {
    fn lifecycle(&self, project: &str, event: &StoredEvent<LifecycleEvent>) {
        self.publish_lifecycle(project, event);
    }

    fn agent_started(&self, project: &str, agent: &str, role: AgentRole, task: &str) {
        self.bus(project).publish(
            EventType::AgentStarted,
            json!({"agent": agent, "role": role, "task": task}),
        );
    }

    fn agent_output(&self, project: &str, agent: &str, chunk: &str) {
        self.bus(project)
            .publish(EventType::AgentOutputChunk, json!({"agent": agent, "chunk": chunk}));
    }

    fn agent_finished(&self, project: &str, agent: &str, role: AgentRole, report_id: u64, result: &AgentResult) {
        // Worker runs finish through their schedule_item_run event.
        if !role.is_manager() {
            return;
        }
        self.bus(project).publish(
            EventType::AgentFinished,
            json!({
                "agent": agent,
                "role": role,
                "report_id": report_id,
                "exit_status": result.exit_status,
                "directives": result.directives.len(),
                "duration_seconds": result.duration_seconds,
            }),
        );
    }

    fn cost_recorded(&self, project: &str, entry: &CostEntry, rolling_spend: Decimal) {
        self.bus(project).publish(
            EventType::CostUpdate,
            json!({"entry": entry, "rolling_spend": rolling_spend}),
        );
    }

    fn paused_changed(&self, project: &str, paused: bool) {
        self.bus(project).publish(EventType::PhaseChange, json!({"paused": paused}));
    }

    fn throttled(&self, project: &str, decision: &ThrottleDecision) {
        self.bus(project)
            .publish(EventType::CostUpdate, json!({"throttle": decision}));
    }
}
