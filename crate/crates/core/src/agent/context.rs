//! System-context assembly and compaction.

use thiserror::Error;

use crate::domain::{AgentRole, ManagerRole, Milestone, Phase, ProjectSpec};
use crate::store::Issue;

pub const TRUNCATED: &str = "[...truncated]";

const ATHENA: &str = include_str!("../../prompts/athena.md");
const ARES: &str = include_str!("../../prompts/ares.md");
const APOLLO: &str = include_str!("../../prompts/apollo.md");
const GRAMMAR: &str = include_str!("../../prompts/directives.md");
const MILESTONE: &str = include_str!("../../prompts/directive_milestone.md");
const COMPLETE: &str = include_str!("../../prompts/directive_complete.md");
const SCHEDULE: &str = include_str!("../../prompts/directive_schedule.md");
const CLAIM: &str = include_str!("../../prompts/directive_claim.md");
const VERDICT: &str = include_str!("../../prompts/directive_verdict.md");

/// Built-in prompt for a manager, including the directive grammar for the
/// kinds it may emit.
pub fn manager_prompt(role: ManagerRole) -> String {
    let (base, kinds): (&str, &[&str]) = match role {
        ManagerRole::Strategy => (ATHENA, &[MILESTONE, COMPLETE]),
        ManagerRole::Execution => (ARES, &[SCHEDULE, CLAIM]),
        ManagerRole::Verification => (APOLLO, &[SCHEDULE, VERDICT]),
    };
    let mut out = format!("{base}\n{GRAMMAR}");
    for k in kinds {
        out.push('\n');
        out.push_str(k);
    }
    out
}

/// Counters shown in the milestone section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub phase: Option<Phase>,
    pub cycle: u32,
    pub total_cycles: u64,
    pub failed_cycles: u64,
}

/// Everything [`build_context`] needs, already read from the store.
#[derive(Debug, Clone)]
pub struct ContextInputs<'a> {
    pub agent: &'a str,
    pub role: AgentRole,
    /// Skill-file body for workers, built-in prompt for managers.
    pub instructions: &'a str,
    pub spec: &'a ProjectSpec,
    pub note: Option<&'a str>,
    /// Open issues after visibility filtering.
    pub issues: &'a [Issue],
    pub milestone: Option<&'a Milestone>,
    pub counters: Counters,
    pub verification_feedback: Option<&'a str>,
    /// Extra lines for the milestone section, e.g. the previous outcome.
    pub history: Option<&'a str>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DigestEntry {
    pub issue_id: u64,
    pub text: String,
}

/// An assembled system context, kept in sections so it can be compacted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentContext {
    pub role: String,
    pub project: String,
    pub note: String,
    pub note_truncated: bool,
    pub issues: Vec<DigestEntry>,
    pub issues_omitted: usize,
    pub feedback: Option<String>,
    pub milestone: String,
}

/// Rough token estimate: one token per four bytes, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

fn digest_entry(issue: &Issue) -> DigestEntry {
    let mut text = format!(
        "#{} [{}] {} (author: {}, assignee: {})",
        issue.id,
        issue.status.as_str(),
        issue.title,
        issue.author,
        issue.assignee.as_deref().unwrap_or("-")
    );
    for line in issue.body.lines() {
        text.push_str("\n  ");
        text.push_str(line);
    }
    DigestEntry {
        issue_id: issue.id,
        text,
    }
}

pub fn build_context(inputs: &ContextInputs<'_>) -> AgentContext {
    let mut issues: Vec<&Issue> = inputs.issues.iter().collect();
    issues.sort_by_key(|i| i.id);
    if inputs.role == AgentRole::StrategyManager {
        // User requests come first for the strategist.
        issues.sort_by_key(|i| i.author != "human");
    }
    let fix_round = inputs.milestone.map_or(0, |m| m.fix_round);
    let feedback = match inputs.role {
        AgentRole::ExecutionManager if fix_round >= 1 => inputs.verification_feedback.map(str::to_string),
        _ => None,
    };

    let mut milestone = match inputs.milestone {
        Some(m) => format!(
            "{} {} [{}]\n{}\n\nCycle budget: {} (this round: {}), fix round: {}",
            m.id,
            m.title,
            m.status.as_str(),
            m.description.trim_end(),
            m.cycle_budget,
            m.budget_remaining,
            m.fix_round
        ),
        None => "No active milestone.".to_string(),
    };
    let c = inputs.counters;
    if let Some(phase) = c.phase {
        milestone.push_str(&format!("\nPhase: {phase}"));
    }
    milestone.push_str(&format!(
        "\nCycle: {}, total cycles: {}, failed cycles: {}",
        c.cycle, c.total_cycles, c.failed_cycles
    ));
    if let Some(h) = inputs.history {
        milestone.push_str("\n\n");
        milestone.push_str(h.trim_end());
    }

    AgentContext {
        role: format!("You are {} ({}).\n\n{}", inputs.agent, inputs.role, inputs.instructions.trim_end()),
        project: format!(
            "Goal:\n{}\n\nSuccess criteria:\n{}",
            inputs.spec.goal.trim_end(),
            inputs.spec.success_criteria.trim_end()
        ),
        note: inputs.note.unwrap_or("").to_string(),
        note_truncated: false,
        issues: issues.into_iter().map(digest_entry).collect(),
        issues_omitted: 0,
        feedback,
        milestone,
    }
}

impl AgentContext {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("# Role\n\n");
        out.push_str(&self.role);
        out.push_str("\n\n# Project\n\n");
        out.push_str(&self.project);
        out.push_str("\n\n# Notes (note.md)\n\n");
        out.push_str(&self.note);
        if self.note_truncated {
            if !self.note.is_empty() && !self.note.ends_with('\n') {
                out.push('\n');
            }
            out.push_str(TRUNCATED);
        }
        out.push_str("\n\n# Open issues\n\n");
        if self.issues_omitted > 0 {
            out.push_str(&format!("{TRUNCATED} {} older issues omitted\n", self.issues_omitted));
        }
        if self.issues.is_empty() {
            out.push_str("(none)");
        } else {
            let lines: Vec<&str> = self.issues.iter().map(|e| e.text.as_str()).collect();
            out.push_str(&lines.join("\n"));
        }
        if let Some(fb) = &self.feedback {
            out.push_str("\n\n# Verification feedback\n\n");
            out.push_str(fb);
        }
        out.push_str("\n\n# Current milestone\n\n");
        out.push_str(&self.milestone);
        out.push('\n');
        out
    }

    pub fn estimated_tokens(&self) -> usize {
        estimate_tokens(&self.render())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("protected context sections need {needed} tokens, limit is {limit}")]
pub struct OverLimit {
    pub needed: usize,
    pub limit: usize,
}

/// Shrinks `ctx` to fit `limit_tokens`: oldest issues go first, then the
/// tail of note.md. Role, project, feedback and milestone are never cut.
pub fn compact_context(ctx: &AgentContext, limit_tokens: usize) -> Result<AgentContext, OverLimit> {
    if ctx.estimated_tokens() <= limit_tokens {
        return Ok(ctx.clone());
    }
    let mut floor = ctx.clone();
    floor.issues_omitted += floor.issues.len();
    floor.issues.clear();
    floor.note_truncated = !ctx.note.is_empty() || ctx.note_truncated;
    floor.note.clear();
    let needed = floor.estimated_tokens();
    if needed > limit_tokens {
        return Err(OverLimit {
            needed,
            limit: limit_tokens,
        });
    }

    let mut out = ctx.clone();
    // Oldest means lowest id, wherever it sits in the digest order.
    let mut by_age: Vec<u64> = out.issues.iter().map(|e| e.issue_id).collect();
    by_age.sort_unstable();
    let mut age = by_age.into_iter();
    while out.estimated_tokens() > limit_tokens {
        let Some(oldest) = age.next() else { break };
        out.issues.retain(|e| e.issue_id != oldest);
        out.issues_omitted += 1;
    }
    if out.estimated_tokens() <= limit_tokens {
        return Ok(out);
    }

    // Longest note prefix that fits; the floor above guarantees the empty
    // prefix does.
    let note = std::mem::take(&mut out.note);
    out.note_truncated = true;
    let bounds: Vec<usize> = note.char_indices().map(|(i, _)| i).chain([note.len()]).collect();
    let (mut lo, mut hi) = (0usize, bounds.len() - 1);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        out.note = note[..bounds[mid]].to_string();
        if out.estimated_tokens() <= limit_tokens {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    out.note = note[..bounds[lo]].to_string();
    Ok(out)
}
