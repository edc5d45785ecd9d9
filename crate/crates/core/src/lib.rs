//! Milestone-driven orchestration of a self-organizing agent team.
//!
//! A project moves through Strategy, Execution and Verification phases. The
//! strategy manager defines one milestone at a time, the execution manager
//! schedules workers cycle by cycle until it claims completion, and the
//! verification manager passes or fails the claim. A failed milestone goes
//! back to execution with half the cycle budget.

pub mod agent;
pub mod budget;
pub mod clock;
pub mod directive;
pub mod domain;
pub mod lifecycle;
pub mod store;

pub use budget::{BudgetConfig, CostEntry, CostLedger, ThrottleDecision, TokenUsage};
pub use clock::{Clock, SystemClock, VirtualClock};
pub use directive::{Directive, ScheduleItem, VisibilityMode};
pub use domain::{AgentRole, ManagerRole, Milestone, MilestoneId, OrchestrationState, Phase, ProjectSpec, Verdict};
pub use store::{Store, StoreError};
pub use lifecycle::{LifecycleEvent, Orchestrator, OrchestratorConfig, Project, ProjectControl, RunOutcome};
