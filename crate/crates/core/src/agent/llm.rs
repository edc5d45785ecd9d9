//! Runner backed by a chat-completion HTTP endpoint.
//!
//! The model acts through a bounded tool loop: a reply containing a
//! `tbc:cmd` block has that command run with `sh -c` in the workspace, and
//! the output is sent back as the next user message.

use std::process::Stdio;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Invocation, ModelTier, RunOutput, Runner, RunnerError};
use crate::budget::TokenUsage;

pub const MAX_TOOL_ITERATIONS: usize = 32;
pub const MAX_COMMAND_OUTPUT: usize = 16 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierModels {
    pub high: String,
    pub standard: String,
    pub light: String,
}

impl TierModels {
    pub fn get(&self, tier: ModelTier) -> &str {
        match tier {
            ModelTier::High => &self.high,
            ModelTier::Standard => &self.standard,
            ModelTier::Light => &self.light,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub endpoint: String,
    pub models: TierModels,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
}

#[derive(Debug, Clone)]
pub struct LlmRunner {
    config: LlmConfig,
    client: reqwest::Client,
}

impl LlmRunner {
    pub fn new(config: LlmConfig) -> Self {
        LlmRunner {
            config,
            client: reqwest::Client::new(),
        }
    }

    async fn complete(&self, model: &str, messages: &[Value]) -> Result<(String, TokenUsage), RunnerError> {
        let mut req = self.client.post(&self.config.endpoint).json(&json!({
            "model": model,
            "messages": messages,
        }));
        if let Ok(key) = std::env::var(&self.config.api_key_env) {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| RunnerError::Transient(format!("request failed: {e}")))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(RunnerError::Transient(format!("endpoint returned {status}")));
        }
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(RunnerError::Fatal(format!("endpoint returned {status}: {body}")));
        }
        let body: Value = resp
            .json()
            .await
            .map_err(|e| RunnerError::Transient(format!("bad response body: {e}")))?;
        parse_completion(&body)
    }
}

/// Pulls the reply text and token counts out of a completion response.
pub(crate) fn parse_completion(body: &Value) -> Result<(String, TokenUsage), RunnerError> {
    let text = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| RunnerError::Fatal("response has no choices[0].message.content".into()))?
        .to_string();
    let n = |p: &str| body.pointer(p).and_then(Value::as_u64).unwrap_or(0);
    let usage = TokenUsage {
        input: n("/usage/prompt_tokens"),
        output: n("/usage/completion_tokens"),
        cached: n("/usage/prompt_tokens_details/cached_tokens"),
    };
    Ok((text, usage))
}

/// Body of the first `tbc:cmd` block, if any.
pub(crate) fn find_command(text: &str) -> Option<String> {
    let mut lines = text.lines();
    while let Some(line) = lines.next() {
        if line.trim_end() == "```tbc:cmd" {
            let body: Vec<&str> = lines.by_ref().take_while(|l| l.trim_end() != "```").collect();
            let cmd = body.join("\n");
            return (!cmd.trim().is_empty()).then_some(cmd);
        }
    }
    None
}

pub(crate) fn truncate_output(s: &str, max: usize) -> String {
    if s.len() <= max {
        return s.to_string();
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}\n{}", &s[..end], super::TRUNCATED)
}

async fn run_command(cmd: &str, invocation: &Invocation) -> String {
    let out = tokio::process::Command::new("sh")
        .arg("-c")
        .arg(cmd)
        .current_dir(&invocation.workspace)
        .envs(invocation.env())
        .stdin(Stdio::null())
        .kill_on_drop(true)
        .output()
        .await;
    match out {
        Ok(out) => {
            let mut text = String::from_utf8_lossy(&out.stdout).into_owned();
            text.push_str(&String::from_utf8_lossy(&out.stderr));
            let code = out.status.code().map_or("signal".to_string(), |c| c.to_string());
            format!("exit {code}\n{}", truncate_output(&text, MAX_COMMAND_OUTPUT))
        }
        Err(e) => format!("failed to start command: {e}"),
    }
}

#[async_trait]
impl Runner for LlmRunner {
    async fn run(
        &self,
        invocation: &Invocation,
        on_chunk: &(dyn for<'s> Fn(&'s str) + Send + Sync),
    ) -> Result<RunOutput, RunnerError> {
        let model = super::route_model(&self.config, invocation.tier);
        let mut messages = vec![
            json!({"role": "system", "content": invocation.system_context}),
            json!({"role": "user", "content": invocation.task}),
        ];
        let mut transcript = Vec::new();
        let mut usage = TokenUsage::default();
        for _ in 0..MAX_TOOL_ITERATIONS {
            let (reply, u) = self.complete(model, &messages).await?;
            usage.input += u.input;
            usage.output += u.output;
            usage.cached += u.cached;
            on_chunk(&reply);
            on_chunk("\n");
            let cmd = find_command(&reply);
            messages.push(json!({"role": "assistant", "content": reply}));
            transcript.push(reply);
            let Some(cmd) = cmd else {
                return Ok(RunOutput {
                    text: transcript.join("\n"),
                    usage,
                });
            };
            let output = run_command(&cmd, invocation).await;
            on_chunk(&output);
            on_chunk("\n");
            messages.push(json!({"role": "user", "content": format!("Command output, {output}")}));
        }
        tracing::warn!(agent = %invocation.agent, "tool loop limit reached");
        Ok(RunOutput {
            text: transcript.join("\n"),
            usage,
        })
    }
}
