//! The `botforge` config file.
//!
//! ```toml
//! data_dir = ".botforge"
//!
//! [api]
//! bind = "127.0.0.1:8420"
//!
//! [runner]
//! kind = "scripted"
//! script = "script.toml"
//!
//! [[projects]]
//! id = "kv"
//! goal = "Build a key-value store"
//! success_criteria = "All tests pass"
//! repo = "kv"
//! budget = { daily_limit_usd = "25" }
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use botforge_core::agent::{ModelTier, RunnerConfig, RunnerKind};
use botforge_core::{BudgetConfig, OrchestratorConfig, ProjectSpec};
use serde::{Deserialize, Serialize};

pub const DEFAULT_BIND: &str = "127.0.0.1:8420";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default)]
    pub api: ApiConfig,
    pub runner: Option<RunnerConfig>,
    #[serde(default)]
    pub orchestrator: Thresholds,
    #[serde(default)]
    pub projects: Vec<ProjectEntry>,
}

fn default_data_dir() -> PathBuf {
    PathBuf::from(".botforge")
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data_dir: default_data_dir(),
            api: ApiConfig::default(),
            runner: None,
            orchestrator: Thresholds::default(),
            projects: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiConfig {
    pub bind: SocketAddr,
    /// Built dashboard bundle served at `/`.
    pub static_dir: Option<PathBuf>,
}

impl Default for ApiConfig {
    fn default() -> Self {
        ApiConfig {
            bind: DEFAULT_BIND.parse().expect("default bind address"),
            static_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub failure_threshold: u32,
    pub timeout_seconds: u64,
    pub manager_tier: ModelTier,
}

impl Default for Thresholds {
    fn default() -> Self {
        let d = OrchestratorConfig::default();
        Thresholds {
            failure_threshold: d.failure_threshold,
            timeout_seconds: d.timeout_seconds,
            manager_tier: d.manager_tier,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectEntry {
    pub id: String,
    pub goal: String,
    pub success_criteria: String,
    pub repo: PathBuf,
    pub budget: BudgetConfig,
}

/// A config file plus the directory its relative paths hang off.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub path: PathBuf,
    pub config: Config,
}

impl Loaded {
    pub fn read(path: &Path) -> Result<Loaded> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config: Config = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let mut seen = std::collections::BTreeSet::new();
        for p in &config.projects {
            if !seen.insert(&p.id) {
                bail!("project id {:?} appears twice in {}", p.id, path.display());
            }
        }
        Ok(Loaded {
            path: path.to_path_buf(),
            config,
        })
    }

    /// Reads `path`, or starts an empty config if it does not exist.
    pub fn read_or_default(path: &Path) -> Result<Loaded> {
        if path.exists() {
            Self::read(path)
        } else {
            Ok(Loaded {
                path: path.to_path_buf(),
                config: Config::default(),
            })
        }
    }

    pub fn save(&self) -> Result<()> {
        let text = toml::to_string_pretty(&self.config)?;
        std::fs::write(&self.path, text).with_context(|| format!("writing {}", self.path.display()))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            return p.to_path_buf();
        }
        self.path.parent().unwrap_or(Path::new(".")).join(p)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.resolve(&self.config.data_dir)
    }

    pub fn store_dir(&self, project_id: &str) -> PathBuf {
        self.data_dir().join(project_id)
    }

    pub fn project(&self, id: &str) -> Result<&ProjectEntry> {
        match self.config.projects.iter().find(|p| p.id == id) {
            Some(p) => Ok(p),
            None => bail!("no project {id:?} in {}", self.path.display()),
        }
    }

    pub fn spec(&self, entry: &ProjectEntry) -> ProjectSpec {
        ProjectSpec {
            goal: entry.goal.clone(),
            success_criteria: entry.success_criteria.clone(),
            repo_path: self.resolve(&entry.repo),
            budget: entry.budget.clone(),
        }
    }

    /// The runner config with its script path resolved.
    pub fn runner(&self) -> Result<RunnerConfig> {
        let Some(mut runner) = self.config.runner.clone() else {
            bail!("{} has no [runner] section", self.path.display());
        };
        if let RunnerKind::Scripted { script } = &mut runner.kind {
            *script = self.resolve(script);
        }
        Ok(runner)
    }

    pub fn orchestrator_config(&self) -> OrchestratorConfig {
        let t = &self.config.orchestrator;
        OrchestratorConfig {
            failure_threshold: t.failure_threshold,
            timeout_seconds: t.timeout_seconds,
            retry: self.config.runner.as_ref().map(|r| r.retry).unwrap_or_default(),
            manager_tier: t.manager_tier,
            ..OrchestratorConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_documented_example() {
        let text = r#"
data_dir = "state"

[api]
bind = "127.0.0.1:9000"

[runner]
kind = "llm"
endpoint = "http://localhost:8000/v1/chat/completions"
api_key_env = "LLM_KEY"
models = { high = "big", standard = "mid", light = "small" }
retry = { max_attempts = 5, base_delay_seconds = 1.0, multiplier = 2.0 }

[orchestrator]
failure_threshold = 4

[[projects]]
id = "kv"
goal = "Build a key-value store"
success_criteria = "All tests pass"
repo = "kv"
budget = { daily_limit_usd = "25" }
"#;
        let config: Config = toml::from_str(text).unwrap();
        assert_eq!(config.api.bind.port(), 9000);
        assert_eq!(config.orchestrator.failure_threshold, 4);
        assert_eq!(config.orchestrator.timeout_seconds, 900);
        let runner = config.runner.as_ref().unwrap();
        assert_eq!(runner.retry.max_attempts, 5);
        assert!(matches!(&runner.kind, RunnerKind::Llm(c) if c.models.light == "small"));
        assert_eq!(config.projects[0].budget.daily_limit_usd, rust_decimal::Decimal::from(25));

        let loaded = Loaded {
            path: PathBuf::from("/etc/botforge/botforge.toml"),
            config,
        };
        assert_eq!(loaded.store_dir("kv"), PathBuf::from("/etc/botforge/state/kv"));
        assert_eq!(loaded.spec(loaded.project("kv").unwrap()).repo_path, PathBuf::from("/etc/botforge/kv"));
        assert_eq!(loaded.orchestrator_config().retry.max_attempts, 5);
    }

    #[test]
    fn save_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut loaded = Loaded::read_or_default(&dir.path().join("b.toml")).unwrap();
        loaded.config.projects.push(ProjectEntry {
            id: "p".into(),
            goal: "g".into(),
            success_criteria: "s".into(),
            repo: "r".into(),
            budget: BudgetConfig::new(rust_decimal::Decimal::from(3)),
        });
        loaded.save().unwrap();
        let again = Loaded::read(&loaded.path).unwrap();
        assert_eq!(again.config, loaded.config);
    }
}
