use std::sync::Arc;

use botforge_core::agent::{ModelTier, ScriptStep, ScriptedRunner, SkillFile, Workspace};
use botforge_core::directive::{serialize_directive, Directive, MilestoneDirective};
use botforge_core::domain::{ManagerRole, Verdict};
use botforge_core::lifecycle::{LifecycleError, LifecycleEvent, NoVcs, Orchestrator, OrchestratorConfig, Project};
use botforge_core::{BudgetConfig, ProjectSpec, ScheduleItem, Store, VirtualClock, VisibilityMode};
use chrono::{DateTime, TimeZone, Utc};
use rust_decimal::Decimal;
use tempfile::TempDir;

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap()
}

/// A current-thread runtime with paused time, so sleeps are instant.
pub fn paused_runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .start_paused(true)
        .build()
        .expect("runtime")
}

pub fn milestone(title: &str, budget: u32) -> String {
    serialize_directive(&Directive::Milestone(MilestoneDirective {
        id: None,
        title: title.into(),
        description: format!("Deliver {title}."),
        cycle_budget: budget,
    }))
}

pub fn complete(summary: &str) -> String {
    serialize_directive(&Directive::ProjectCompletion { summary: summary.into() })
}

pub fn claim(summary: &str) -> String {
    serialize_directive(&Directive::CompletionClaim { summary: summary.into() })
}

pub fn pass() -> String {
    serialize_directive(&Directive::VerificationVerdict {
        verdict: Verdict::pass("looks good"),
    })
}

pub fn fail(feedback: &str) -> String {
    serialize_directive(&Directive::VerificationVerdict {
        verdict: Verdict::fail(feedback).unwrap(),
    })
}

pub fn task(worker: &str, task: &str) -> ScheduleItem {
    ScheduleItem::Task {
        worker_name: worker.into(),
        task: task.into(),
        visibility: VisibilityMode::Full,
        delay_before_seconds: 0,
    }
}

pub fn schedule(items: Vec<ScheduleItem>) -> String {
    serialize_directive(&Directive::Schedule { items })
}

pub struct Harness {
    pub dir: TempDir,
    pub project: Project,
    pub runner: Arc<ScriptedRunner>,
    pub clock: Arc<VirtualClock>,
    pub config: OrchestratorConfig,
}

impl Harness {
    /// A project whose workspace already holds skill files for `workers`.
    /// Must be called inside a tokio runtime.
    pub fn new(steps: Vec<ScriptStep>, workers: &[(&str, ManagerRole)]) -> Harness {
        let dir = tempfile::tempdir().unwrap();
        let repo = dir.path().join("repo");
        std::fs::create_dir_all(&repo).unwrap();
        let ws = Workspace::new(&repo);
        std::fs::create_dir_all(ws.skills_dir()).unwrap();
        for (name, manager) in workers {
            let skill = SkillFile::new(name, "engineer", manager.agent_name(), ModelTier::Standard, "Do the task.\n")
                .unwrap();
            std::fs::write(ws.skill_path(name), skill.render()).unwrap();
        }
        let store = Store::open(dir.path().join("store")).unwrap();
        let project = Project {
            id: "demo".into(),
            spec: ProjectSpec {
                goal: "Build a tiny key-value store".into(),
                success_criteria: "All tests pass".into(),
                repo_path: repo,
                budget: BudgetConfig::new(Decimal::from(100)),
            },
            store: Arc::new(store),
        };
        Harness {
            dir,
            project,
            runner: Arc::new(ScriptedRunner::new(steps).unwrap()),
            clock: Arc::new(VirtualClock::starting_at(t0())),
            config: OrchestratorConfig {
                exit_on_completion: true,
                ..OrchestratorConfig::default()
            },
        }
    }

    pub fn orchestrator(&self) -> Orchestrator {
        Orchestrator::new(self.project.clone(), self.runner.clone(), self.clock.clone())
            .with_config(self.config.clone())
            .with_vcs(Arc::new(NoVcs))
    }

    /// Same project, store reopened from disk as a restarted process would.
    pub fn reopened(&self) -> Orchestrator {
        let mut project = self.project.clone();
        project.store = Arc::new(Store::open(self.dir.path().join("store")).unwrap());
        Orchestrator::new(project, self.runner.clone(), self.clock.clone())
            .with_config(self.config.clone())
            .with_vcs(Arc::new(NoVcs))
    }

    pub fn events(&self) -> Vec<LifecycleEvent> {
        self.project
            .store
            .events::<LifecycleEvent>()
            .unwrap()
            .into_iter()
            .map(|e| e.event)
            .collect()
    }

    pub fn contexts_of(&self, agent: &str) -> Vec<String> {
        self.runner
            .calls()
            .into_iter()
            .filter(|c| c.agent == agent)
            .map(|c| c.system_context)
            .collect()
    }
}

/// Loads state and steps until the project completes. Fails after
/// `max_steps` so a broken script cannot loop forever.
pub async fn drive(orch: &mut Orchestrator, max_steps: usize) -> Result<(), LifecycleError> {
    orch.start()?;
    for _ in 0..max_steps {
        if orch.state().paused {
            return Ok(());
        }
        orch.step().await?;
    }
    panic!("project did not complete within {max_steps} steps; state: {:?}", orch.state());
}
