//! `botforge` subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use botforge_api::{AppState, EventHub, ProjectHandle};
use botforge_core::agent::{LlmRunner, Runner, RunnerKind, ScriptedRunner};
use botforge_core::budget::{compute_metrics, ledger_to_csv};
use botforge_core::domain::MilestoneStatus;
use botforge_core::lifecycle::{begin, bootstrap_offline, commit};
use botforge_core::{
    BudgetConfig, Clock, CostLedger, OrchestrationState, Orchestrator, Project, ProjectControl, RunOutcome, Store,
    StoreError, SystemClock,
};
use clap::{Parser, Subcommand};
use rust_decimal::Decimal;

use crate::config::{Loaded, ProjectEntry};

pub const DEFAULT_CONFIG: &str = "botforge.toml";

#[derive(Parser, Debug)]
#[command(name = "botforge", version, about = "Run milestone-driven agent teams")]
pub struct Cli {
    #[arg(long, global = true, default_value = DEFAULT_CONFIG)]
    pub config: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Start every configured project and the API server.
    Run {
        /// Overrides `api.bind`.
        #[arg(long)]
        bind: Option<std::net::SocketAddr>,
        /// Return once every project has completed instead of serving on.
        #[arg(long)]
        exit_when_done: bool,
    },
    #[command(subcommand)]
    Project(ProjectCmd),
    /// Halt the project's agents and reset it to the Strategy phase.
    Bootstrap {
        #[arg(long)]
        project: String,
    },
    Status {
        #[arg(long)]
        project: String,
    },
    #[command(subcommand)]
    Cost(CostCmd),
}

#[derive(Subcommand, Debug)]
pub enum ProjectCmd {
    /// Register a project in the config file and create its store.
    Add {
        #[arg(long)]
        goal: String,
        #[arg(long)]
        success: String,
        #[arg(long)]
        repo: PathBuf,
        #[arg(long)]
        daily_limit: Decimal,
        /// Defaults to the repository directory name.
        #[arg(long)]
        id: Option<String>,
    },
}

#[derive(Subcommand, Debug)]
pub enum CostCmd {
    /// Ledger as CSV.
    Export {
        #[arg(long)]
        project: String,
        /// Write here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

pub async fn dispatch(cli: Cli, out: &mut (dyn Write + Send)) -> Result<()> {
    match cli.command {
        Command::Run { bind, exit_when_done } => run(&cli.config, bind, exit_when_done, out).await,
        Command::Project(ProjectCmd::Add {
            goal,
            success,
            repo,
            daily_limit,
            id,
        }) => project_add(&cli.config, goal, success, repo, daily_limit, id, out),
        Command::Bootstrap { project } => bootstrap(&cli.config, &project, out).await,
        Command::Status { project } => status(&cli.config, &project, out),
        Command::Cost(CostCmd::Export { project, output }) => cost_export(&cli.config, &project, output, out),
    }
}

fn slug(s: &str) -> String {
    let mut out = String::new();
    for c in s.chars() {
        if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

fn load_state(store: &Store, id: &str) -> Result<OrchestrationState> {
    match store.load_state() {
        Ok(s) => Ok(s),
        Err(StoreError::NoSnapshot) => Ok(OrchestrationState::fresh(id)),
        Err(e) => Err(e.into()),
    }
}

fn open_store(loaded: &Loaded, id: &str) -> Result<Store> {
    loaded.project(id)?;
    Store::open(loaded.store_dir(id)).with_context(|| format!("opening store for {id}"))
}

pub fn project_add(
    config: &Path,
    goal: String,
    success: String,
    repo: PathBuf,
    daily_limit: Decimal,
    id: Option<String>,
    out: &mut dyn Write,
) -> Result<()> {
    let mut loaded = Loaded::read_or_default(config)?;
    let repo = std::path::absolute(&repo)?;
    let id = match id {
        Some(id) => id,
        None => slug(&repo.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()),
    };
    if id.is_empty() || slug(&id) != id {
        bail!("project id {id:?} must be lowercase letters, digits, '-' or '_'");
    }
    if loaded.config.projects.iter().any(|p| p.id == id) {
        bail!("project {id:?} already exists");
    }
    let entry = ProjectEntry {
        id: id.clone(),
        goal,
        success_criteria: success,
        repo,
        budget: BudgetConfig::new(daily_limit),
    };
    loaded.spec(&entry).validate()?;
    let store = Store::open(loaded.store_dir(&id))?;
    if matches!(store.load_state(), Err(StoreError::NoSnapshot)) {
        let t = begin(&id);
        commit(&store, &t.events, &t.state, SystemClock.now(), |_| Ok(()))?;
    }
    loaded.config.projects.push(entry);
    loaded.save()?;
    writeln!(out, "added project {id} (store {})", loaded.store_dir(&id).display())?;
    Ok(())
}

pub fn status(config: &Path, id: &str, out: &mut dyn Write) -> Result<()> {
    let loaded = Loaded::read(config)?;
    let entry = loaded.project(id)?;
    let store = open_store(&loaded, id)?;
    let state = load_state(&store, id)?;
    let ledger = CostLedger::from_entries(store.cost_entries()?)?;
    let passed = store
        .milestones()?
        .iter()
        .filter(|r| r.milestone.status == MilestoneStatus::Passed)
        .count() as u64;
    let metrics = compute_metrics(state.total_cycles, state.failed_cycles, passed, &ledger);
    writeln!(out, "project: {id}")?;
    writeln!(out, "goal: {}", entry.goal)?;
    writeln!(out, "phase: {}", state.phase)?;
    match &state.current_milestone {
        Some(m) => writeln!(
            out,
            "milestone: {} {} [{}] cycle {}/{} (fix round {})",
            m.id,
            m.title,
            m.status.as_str(),
            state.cycle,
            m.budget_remaining,
            m.fix_round
        )?,
        None => writeln!(out, "milestone: -")?,
    }
    writeln!(
        out,
        "cycles: {} total, {} failed, waste {}",
        state.total_cycles,
        state.failed_cycles,
        metrics.waste_ratio.percent_display()
    )?;
    writeln!(out, "milestones passed: {passed}")?;
    writeln!(
        out,
        "spend (24h): ${:.4} of ${}",
        ledger.rolling_spend(SystemClock.now()),
        entry.budget.daily_limit_usd
    )?;
    writeln!(out, "paused: {}", if state.paused { "yes" } else { "no" })?;
    Ok(())
}

pub fn cost_export(config: &Path, id: &str, output: Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let loaded = Loaded::read(config)?;
    let store = open_store(&loaded, id)?;
    let csv = ledger_to_csv(&CostLedger::from_entries(store.cost_entries()?)?);
    match output {
        Some(path) => std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => out.write_all(csv.as_bytes())?,
    }
    Ok(())
}

/// Asks a running server first so the live loop is interrupted; falls back
/// to resetting the store directly.
pub async fn bootstrap(config: &Path, id: &str, out: &mut (dyn Write + Send)) -> Result<()> {
    let loaded = Loaded::read(config)?;
    loaded.project(id)?;
    let url = format!("http://{}/api/projects/{id}/bootstrap", loaded.config.api.bind);
    let client = reqwest::Client::builder().timeout(Duration::from_secs(5)).build()?;
    match client.post(&url).send().await {
        Ok(resp) if resp.status().is_success() => {
            writeln!(out, "bootstrap requested from running server")?;
            return Ok(());
        }
        Ok(resp) => bail!("server refused bootstrap: {}", resp.status()),
        Err(e) if e.is_connect() => {}
        Err(e) => return Err(e.into()),
    }
    let store = open_store(&loaded, id)?;
    let events = bootstrap_offline(&store, id, SystemClock.now())?;
    writeln!(out, "bootstrap reset applied ({} events)", events.len())?;
    Ok(())
}

pub fn build_runner(loaded: &Loaded) -> Result<Arc<dyn Runner>> {
    let runner = loaded.runner()?;
    Ok(match runner.kind {
        RunnerKind::Scripted { script } => Arc::new(
            ScriptedRunner::from_file(&script).with_context(|| format!("loading script {}", script.display()))?,
        ),
        RunnerKind::Llm(config) => Arc::new(LlmRunner::new(config)),
    })
}

pub async fn run(
    config: &Path,
    bind: Option<std::net::SocketAddr>,
    exit_when_done: bool,
    out: &mut (dyn Write + Send),
) -> Result<()> {
    let loaded = Loaded::read(config)?;
    if loaded.config.projects.is_empty() {
        bail!("{} lists no projects", config.display());
    }
    let runner = build_runner(&loaded)?;
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let hub = Arc::new(EventHub::new());
    let mut orch_config = loaded.orchestrator_config();
    orch_config.exit_on_completion = exit_when_done;

    let mut handles = Vec::new();
    let mut loops = Vec::new();
    for entry in &loaded.config.projects {
        let spec = loaded.spec(entry);
        spec.validate().with_context(|| format!("project {}", entry.id))?;
        let store = Arc::new(Store::open(loaded.store_dir(&entry.id))?);
        let project = Project {
            id: entry.id.clone(),
            spec,
            store,
        };
        let control = ProjectControl::new();
        handles.push(ProjectHandle {
            project: project.clone(),
            control: Some(control.clone()),
        });
        if exit_when_done && load_state(&project.store, &project.id)?.paused {
            writeln!(out, "{}: paused, not started", project.id)?;
            continue;
        }
        let mut orch = Orchestrator::new(project.clone(), runner.clone(), clock.clone())
            .with_config(orch_config.clone())
            .with_observer(hub.clone())
            .with_control(control.clone());
        let id = project.id.clone();
        loops.push((id, control, tokio::spawn(async move { orch.run().await })));
    }

    let mut state = AppState::new(handles, hub, clock);
    if let Some(dir) = &loaded.config.api.static_dir {
        state = state.with_static_dir(loaded.resolve(dir));
    }
    let listener = botforge_api::bind(bind.unwrap_or(loaded.config.api.bind)).await?;
    writeln!(out, "listening on http://{}", listener.local_addr()?)?;
    out.flush()?;
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(botforge_api::serve(listener, state, async {
        let _ = stop_rx.await;
    }));

    if !exit_when_done {
        tokio::signal::ctrl_c().await?;
        writeln!(out, "shutting down")?;
        for (_, control, _) in &loops {
            control.stop();
        }
    }
    let mut failed = 0;
    for (id, _, task) in loops {
        match task.await? {
            Ok(RunOutcome::Completed) => writeln!(out, "{id}: completed")?,
            Ok(RunOutcome::Stopped) => writeln!(out, "{id}: stopped")?,
            Err(e) => {
                failed += 1;
                writeln!(out, "{id}: failed: {e}")?;
            }
        }
    }
    let _ = stop_tx.send(());
    server.await??;
    if failed > 0 {
        bail!("{failed} project(s) failed");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::slug;

    #[test]
    fn slugs() {
        assert_eq!(slug("My Repo!"), "my-repo");
        assert_eq!(slug("kv_store"), "kv_store");
    }
}
