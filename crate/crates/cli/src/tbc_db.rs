//! `tbc-db`: the issue-tracker CLI agents call from their workspace.
//!
//! The project store, caller name and visibility come from `TBC_PROJECT`,
//! `TBC_AGENT` and `TBC_VISIBILITY`. Output is plain text, one record per
//! line, at most 200 rows unless `--limit` says otherwise.

use std::io::Write;
use std::path::PathBuf;

use botforge_core::store::{Issue, IssueFilter, IssueStatus};
use botforge_core::{Store, StoreError, VisibilityMode};
use chrono::{DateTime, SecondsFormat, Utc};
use clap::{Parser, Subcommand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NOT_FOUND: i32 = 2;
pub const EXIT_UNAVAILABLE: i32 = 3;

pub const DEFAULT_LIMIT: usize = 200;

/// Caller context, normally read from the environment.
#[derive(Debug, Clone, Default)]
pub struct Env {
    pub project: Option<PathBuf>,
    pub agent: Option<String>,
    pub visibility: Option<String>,
}

impl Env {
    pub fn from_process() -> Env {
        Env {
            project: std::env::var_os("TBC_PROJECT").map(PathBuf::from),
            agent: std::env::var("TBC_AGENT").ok(),
            visibility: std::env::var("TBC_VISIBILITY").ok(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "tbc-db", about = "Read and write the project issue tracker")]
struct Cli {
    /// Store directory; defaults to $TBC_PROJECT.
    #[arg(long, global = true)]
    project: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    #[command(subcommand)]
    Issue(IssueCmd),
    #[command(subcommand)]
    Report(ReportCmd),
    #[command(subcommand)]
    Milestone(MilestoneCmd),
}

#[derive(Subcommand, Debug)]
enum IssueCmd {
    /// One issue per line.
    List {
        #[arg(long)]
        status: Option<IssueStatus>,
        #[arg(long)]
        assignee: Option<String>,
        #[arg(long, default_value_t = DEFAULT_LIMIT)]
        limit: usize,
    },
    Create {
        #[arg(long)]
        title: String,
        #[arg(long, default_value = "")]
        body: String,
        #[arg(long)]
        assignee: Option<String>,
    },
    /// Title, body, then comments oldest first.
    Show { id: u64 },
    Comment {
        id: u64,
        #[arg(long)]
        body: String,
    },
    Close { id: u64 },
}

#[derive(Subcommand, Debug)]
enum ReportCmd {
    List {
        #[arg(long)]
        agent: Option<String>,
        #[arg(long, default_value_t = DEFAULT_LIMIT)]
        limit: usize,
    },
}

#[derive(Subcommand, Debug)]
enum MilestoneCmd {
    List {
        #[arg(long, default_value_t = DEFAULT_LIMIT)]
        limit: usize,
    },
}

fn ts(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// `#<id> [<status>] <title> (assignee: <name|->)`
pub fn issue_line(issue: &Issue) -> String {
    format!(
        "#{} [{}] {} (assignee: {})",
        issue.id,
        issue.status.as_str(),
        issue.title,
        issue.assignee.as_deref().unwrap_or("-")
    )
}

enum Failure {
    Usage(String),
    NotFound(String),
    Unavailable(String),
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NoSuchIssue(_) | StoreError::NoSuchMilestone(_) => Failure::NotFound(e.to_string()),
            other => Failure::Unavailable(other.to_string()),
        }
    }
}

/// Runs one command; returns the exit code. `args` includes the program name.
pub fn run(args: &[String], env: &Env, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match execute(cli, env, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (EXIT_USAGE, m),
                Failure::NotFound(m) => (EXIT_NOT_FOUND, m),
                Failure::Unavailable(m) => (EXIT_UNAVAILABLE, m),
            };
            let _ = writeln!(err, "tbc-db: {msg}");
            code
        }
    }
}

fn execute(cli: Cli, env: &Env, out: &mut dyn Write) -> Result<(), Failure> {
    let dir = cli
        .project
        .or_else(|| env.project.clone())
        .ok_or_else(|| Failure::Usage("no project store: set TBC_PROJECT or pass --project".into()))?;
    let visibility: VisibilityMode = match &env.visibility {
        Some(v) => v.parse().map_err(|e| Failure::Usage(format!("TBC_VISIBILITY: {e}")))?,
        None => VisibilityMode::Full,
    };
    let author = env.agent.clone().unwrap_or_else(|| "human".into());
    let store = Store::open_existing(&dir).map_err(|e| Failure::Unavailable(e.to_string()))?;
    let now = Utc::now();
    let visible = |id: u64| {
        if visibility.admits(id) {
            Ok(())
        } else {
            Err(Failure::NotFound(format!("issue #{id} is not visible to {author}")))
        }
    };
    let io = |e: std::io::Error| Failure::Unavailable(format!("output: {e}"));

    match cli.command {
        Command::Issue(IssueCmd::List { status, assignee, limit }) => {
            let filter = IssueFilter {
                status,
                assignee,
                limit: Some(limit),
            };
            for issue in store.list_issues(&filter, &visibility)? {
                writeln!(out, "{}", issue_line(&issue)).map_err(io)?;
            }
        }
        Command::Issue(IssueCmd::Create { title, body, assignee }) => {
            if title.trim().is_empty() {
                return Err(Failure::Usage("--title must not be empty".into()));
            }
            let issue = store.open_issue(&title, &body, &author, assignee.as_deref(), now)?;
            writeln!(out, "created #{}", issue.id).map_err(io)?;
        }
        Command::Issue(IssueCmd::Show { id }) => {
            visible(id)?;
            let issue = store.get_issue(id)?;
            writeln!(out, "{}", issue_line(&issue)).map_err(io)?;
            writeln!(out, "author: {}  created: {}", issue.author, ts(issue.created_at)).map_err(io)?;
            if let Some(pr) = &issue.pr_url {
                writeln!(out, "pr: {pr}").map_err(io)?;
            }
            writeln!(out).map_err(io)?;
            writeln!(out, "{}", issue.body.trim_end()).map_err(io)?;
            for c in store.comments(id)? {
                writeln!(out).map_err(io)?;
                writeln!(out, "--- {} at {}", c.author, ts(c.created_at)).map_err(io)?;
                writeln!(out, "{}", c.body.trim_end()).map_err(io)?;
            }
        }
        Command::Issue(IssueCmd::Comment { id, body }) => {
            visible(id)?;
            store.add_comment(id, &author, &body, now)?;
            writeln!(out, "commented on #{id}").map_err(io)?;
        }
        Command::Issue(IssueCmd::Close { id }) => {
            visible(id)?;
            store.close_issue(id, &author, now)?;
            writeln!(out, "closed #{id}").map_err(io)?;
        }
        Command::Report(ReportCmd::List { agent, limit }) => {
            for r in store.list_reports(agent.as_deref(), Some(limit))? {
                let rep = &r.report;
                let milestone = rep.milestone_id.as_ref().map_or("-".to_string(), |m| m.to_string());
                writeln!(
                    out,
                    "#{} {} {} {} milestone {} cycle {} {} ({} directives)",
                    r.id,
                    ts(r.created_at),
                    rep.agent,
                    rep.phase,
                    milestone,
                    rep.cycle,
                    exit_label(&rep.exit_status),
                    rep.directives.len()
                )
                .map_err(io)?;
            }
        }
        Command::Milestone(MilestoneCmd::List { limit }) => {
            for rec in store.milestones()?.into_iter().take(limit) {
                let m = &rec.milestone;
                writeln!(
                    out,
                    "{} [{}] {} (budget {}, remaining {}, fix round {})",
                    m.id, m.status.as_str(), m.title, m.cycle_budget, m.budget_remaining, m.fix_round
                )
                .map_err(io)?;
            }
        }
    }
    Ok(())
}

fn exit_label(s: &botforge_core::store::ExitStatus) -> String {
    use botforge_core::store::ExitStatus;
    match s {
        ExitStatus::Ok => "ok".into(),
        ExitStatus::Timeout => "timeout".into(),
        ExitStatus::Error(m) => format!("error: {}", m.lines().next().unwrap_or("")),
    }
}
