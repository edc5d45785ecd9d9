//! Deterministic runner that replays canned outputs from a script.
//!
//! A script is an ordered list of steps. Each invocation consumes the first
//! unconsumed step whose `agent` glob matches the agent name.
//!
//! ````toml
//! [[step]]
//! agent = "Athena"
//! output = '''
//! ```tbc:milestone
//! title: Parser
//! budget: 2
//! ```
//! '''
//!
//! [[step]]
//! agent = "dev-*"
//! output = "done"
//! repeat = true
//! writes = [{ path = "src/lib.rs", content = "// parser\n" }]
//! ````

use std::path::{Component, Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Invocation, RunOutput, Runner, RunnerError};
use crate::budget::TokenUsage;
use crate::directive::VisibilityMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedExit {
    #[default]
    Ok,
    /// Fails without retry.
    Error,
    /// Fails in a way the retry loop will retry.
    Transient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteFile {
    pub path: PathBuf,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub agent: String,
    #[serde(default)]
    pub output: String,
    #[serde(default)]
    pub exit: ScriptedExit,
    #[serde(default)]
    pub message: Option<String>,
    #[serde(default)]
    pub sleep_seconds: u64,
    #[serde(default)]
    pub tokens_in: u64,
    #[serde(default)]
    pub tokens_out: u64,
    #[serde(default)]
    pub tokens_cached: u64,
    #[serde(default)]
    pub writes: Vec<WriteFile>,
    /// Never consumed; matches every time it is reached.
    #[serde(default)]
    pub repeat: bool,
}

impl ScriptStep {
    pub fn new(agent: &str, output: impl Into<String>) -> Self {
        ScriptStep {
            agent: agent.to_string(),
            output: output.into(),
            exit: ScriptedExit::Ok,
            message: None,
            sleep_seconds: 0,
            tokens_in: 0,
            tokens_out: 0,
            tokens_cached: 0,
            writes: Vec::new(),
            repeat: false,
        }
    }

    pub fn error(agent: &str, message: &str) -> Self {
        ScriptStep {
            exit: ScriptedExit::Error,
            message: Some(message.to_string()),
            ..ScriptStep::new(agent, "")
        }
    }

    pub fn transient(agent: &str, message: &str) -> Self {
        ScriptStep {
            exit: ScriptedExit::Transient,
            message: Some(message.to_string()),
            ..ScriptStep::new(agent, "")
        }
    }

    pub fn sleeping(mut self, seconds: u64) -> Self {
        self.sleep_seconds = seconds;
        self
    }

    pub fn usage(mut self, input: u64, output: u64) -> Self {
        self.tokens_in = input;
        self.tokens_out = output;
        self
    }

    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }

    pub fn writing(mut self, path: &str, content: &str) -> Self {
        self.writes.push(WriteFile {
            path: path.into(),
            content: content.into(),
        });
        self
    }
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("cannot read script {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid script: {0}")]
    Invalid(String),
}

#[derive(Deserialize)]
struct ScriptFile {
    #[serde(default)]
    step: Vec<ScriptStep>,
}

/// What the runner was asked to do, for assertions in tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordedCall {
    pub agent: String,
    pub task: String,
    pub system_context: String,
    pub visibility: VisibilityMode,
}

struct Entry {
    step: ScriptStep,
    pattern: glob::Pattern,
    used: bool,
}

pub struct ScriptedRunner {
    entries: Mutex<Vec<Entry>>,
    calls: Mutex<Vec<RecordedCall>>,
}

impl std::fmt::Debug for ScriptedRunner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedRunner").finish_non_exhaustive()
    }
}

impl ScriptedRunner {
    pub fn new(steps: Vec<ScriptStep>) -> Result<Self, ScriptError> {
        let entries = steps
            .into_iter()
            .map(|step| {
                let pattern = glob::Pattern::new(&step.agent)
                    .map_err(|e| ScriptError::Invalid(format!("agent pattern {:?}: {e}", step.agent)))?;
                for w in &step.writes {
                    if !is_relative_inside(&w.path) {
                        return Err(ScriptError::Invalid(format!(
                            "write path {} must stay inside the workspace",
                            w.path.display()
                        )));
                    }
                }
                Ok(Entry {
                    step,
                    pattern,
                    used: false,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ScriptedRunner {
            entries: Mutex::new(entries),
            calls: Mutex::new(Vec::new()),
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, ScriptError> {
        let file: ScriptFile = toml::from_str(text).map_err(|e| ScriptError::Invalid(e.to_string()))?;
        Self::new(file.step)
    }

    pub fn from_file(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn calls(&self) -> Vec<RecordedCall> {
        self.calls.lock().expect("calls").clone()
    }

    /// Non-repeating steps not consumed yet.
    pub fn remaining(&self) -> usize {
        self.entries
            .lock()
            .expect("entries")
            .iter()
            .filter(|e| !e.used && !e.step.repeat)
            .count()
    }

    fn take(&self, agent: &str) -> Option<ScriptStep> {
        let mut entries = self.entries.lock().expect("entries");
        let entry = entries.iter_mut().find(|e| !e.used && e.pattern.matches(agent))?;
        if !entry.step.repeat {
            entry.used = true;
        }
        Some(entry.step.clone())
    }
}

fn is_relative_inside(p: &Path) -> bool {
    p.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir)) && p.components().next().is_some()
}

#[async_trait]
impl Runner for ScriptedRunner {
    async fn run(
        &self,
        invocation: &Invocation,
        on_chunk: &(dyn for<'s> Fn(&'s str) + Send + Sync),
    ) -> Result<RunOutput, RunnerError> {
        self.calls.lock().expect("calls").push(RecordedCall {
            agent: invocation.agent.clone(),
            task: invocation.task.clone(),
            system_context: invocation.system_context.clone(),
            visibility: invocation.visibility.clone(),
        });
        let step = self
            .take(&invocation.agent)
            .ok_or_else(|| RunnerError::Fatal(format!("script exhausted for {}", invocation.agent)))?;
        if step.sleep_seconds > 0 {
            tokio::time::sleep(Duration::from_secs(step.sleep_seconds)).await;
        }
        match step.exit {
            ScriptedExit::Ok => {}
            ScriptedExit::Error => {
                return Err(RunnerError::Fatal(step.message.unwrap_or_else(|| "scripted error".into())))
            }
            ScriptedExit::Transient => {
                return Err(RunnerError::Transient(
                    step.message.unwrap_or_else(|| "scripted transient error".into()),
                ))
            }
        }
        for w in &step.writes {
            let path = invocation.workspace.join(&w.path);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| RunnerError::Fatal(e.to_string()))?;
            }
            std::fs::write(&path, &w.content).map_err(|e| RunnerError::Fatal(e.to_string()))?;
        }
        for line in step.output.split_inclusive('\n') {
            on_chunk(line);
        }
        Ok(RunOutput {
            text: step.output,
            usage: TokenUsage {
                input: step.tokens_in,
                output: step.tokens_out,
                cached: step.tokens_cached,
            },
        })
    }
}
