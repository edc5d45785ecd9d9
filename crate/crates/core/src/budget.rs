//! Cost ledger, 24-hour rolling spend, throttling and project metrics.
//!
//! Money is a [`Decimal`] rounded to 4 places. The rolling window is the
//! half-open interval `(now - 24h, now]`: an entry exactly 24 hours old has
//! already aged out.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, Utc};
use num_rational::Ratio;
use rust_decimal::prelude::ToPrimitive;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::ModelTier;
use crate::domain::AgentRole;

pub const WINDOW_SECONDS: i64 = 24 * 60 * 60;
/// Number of most recent entries averaged for the per-invocation estimate.
pub const RECENT_ENTRIES: usize = 10;

pub fn window() -> Duration {
    Duration::seconds(WINDOW_SECONDS)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BudgetError {
    #[error("entry at {entry} is earlier than the last ledger entry at {last}")]
    NonMonotonicTimestamp {
        entry: DateTime<Utc>,
        last: DateTime<Utc>,
    },
    #[error("invalid budget config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input: u64,
    pub output: u64,
    pub cached: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TierPrice {
    /// USD per million input tokens.
    pub input_per_mtok: Decimal,
    /// USD per million output tokens.
    pub output_per_mtok: Decimal,
}

fn default_threshold() -> Decimal {
    Decimal::new(2, 1)
}

fn default_invocation_cost() -> Decimal {
    Decimal::new(10, 2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub daily_limit_usd: Decimal,
    #[serde(default = "default_threshold")]
    pub safety_threshold_fraction: Decimal,
    /// Prices are zero unless configured.
    #[serde(default)]
    pub price_table: BTreeMap<ModelTier, TierPrice>,
    /// Per-invocation estimate used until the ledger has enough history.
    #[serde(default = "default_invocation_cost")]
    pub default_invocation_cost: Decimal,
}

impl BudgetConfig {
    pub fn new(daily_limit_usd: Decimal) -> Self {
        BudgetConfig {
            daily_limit_usd,
            safety_threshold_fraction: default_threshold(),
            price_table: BTreeMap::new(),
            default_invocation_cost: default_invocation_cost(),
        }
    }

    pub fn validate(&self) -> Result<(), BudgetError> {
        if self.daily_limit_usd <= Decimal::ZERO {
            return Err(BudgetError::InvalidConfig("daily limit must be positive".into()));
        }
        if self.safety_threshold_fraction <= Decimal::ZERO
            || self.safety_threshold_fraction >= Decimal::ONE
        {
            return Err(BudgetError::InvalidConfig(
                "safety threshold must lie strictly between 0 and 1".into(),
            ));
        }
        if self.default_invocation_cost <= Decimal::ZERO {
            return Err(BudgetError::InvalidConfig(
                "default invocation cost must be positive".into(),
            ));
        }
        Ok(())
    }

    /// USD for one call at `tier`, rounded to 4 decimal places. Cached
    /// tokens are not billed separately.
    pub fn price(&self, tier: ModelTier, usage: TokenUsage) -> Decimal {
        let p = self.price_table.get(&tier).copied().unwrap_or_default();
        let million = Decimal::from(1_000_000u32);
        let usd = (Decimal::from(usage.input) * p.input_per_mtok
            + Decimal::from(usage.output) * p.output_per_mtok)
            / million;
        usd.round_dp(4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub timestamp: DateTime<Utc>,
    pub agent: String,
    pub role: AgentRole,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub tokens_cached: u64,
    pub usd: Decimal,
}

/// Append-only, timestamp-ordered list of cost entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostLedger {
    entries: Vec<CostEntry>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a ledger from persisted entries, re-checking ordering.
    pub fn from_entries(entries: Vec<CostEntry>) -> Result<Self, BudgetError> {
        let mut ledger = CostLedger::new();
        for e in entries {
            ledger.record(e)?;
        }
        Ok(ledger)
    }

    pub fn entries(&self) -> &[CostEntry] {
        &self.entries
    }

    pub fn record(&mut self, mut entry: CostEntry) -> Result<(), BudgetError> {
        if let Some(last) = self.entries.last() {
            if entry.timestamp < last.timestamp {
                return Err(BudgetError::NonMonotonicTimestamp {
                    entry: entry.timestamp,
                    last: last.timestamp,
                });
            }
        }
        entry.usd = entry.usd.round_dp(4);
        self.entries.push(entry);
        Ok(())
    }

    /// Entries with timestamp in `(now - 24h, now]`.
    pub fn in_window(&self, now: DateTime<Utc>) -> &[CostEntry] {
        let start = now - window();
        // Entries are sorted, so the window is a contiguous slice.
        let lo = self.entries.partition_point(|e| e.timestamp <= start);
        let hi = self.entries.partition_point(|e| e.timestamp <= now);
        &self.entries[lo..hi.max(lo)]
    }

    pub fn rolling_spend(&self, now: DateTime<Utc>) -> Decimal {
        self.in_window(now).iter().map(|e| e.usd).sum()
    }

    pub fn total(&self) -> Decimal {
        self.entries.iter().map(|e| e.usd).sum()
    }

    /// Mean cost of the last [`RECENT_ENTRIES`] entries, or `default` when
    /// there is less history than that or the mean is not positive.
    pub fn avg_recent_cost(&self, default: Decimal) -> Decimal {
        if self.entries.len() < RECENT_ENTRIES {
            return default;
        }
        let recent = &self.entries[self.entries.len() - RECENT_ENTRIES..];
        let mean = recent.iter().map(|e| e.usd).sum::<Decimal>() / Decimal::from(RECENT_ENTRIES);
        if mean > Decimal::ZERO {
            mean
        } else {
            default
        }
    }

    pub fn max_entry_cost(&self) -> Decimal {
        self.entries.iter().map(|e| e.usd).max().unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum ThrottleDecision {
    Proceed,
    Sleep { seconds: u64 },
    PauseUntil { until: DateTime<Utc> },
}

/// Decides whether the next invocation may run now.
///
/// Exhausted budget pauses until the oldest in-window entry ages out. Below
/// the safety threshold the time left in the window is spread evenly over
/// the invocations the remaining money can still pay for.
pub fn throttle_decision(
    config: &BudgetConfig,
    ledger: &CostLedger,
    now: DateTime<Utc>,
    avg_recent_cost: Decimal,
) -> ThrottleDecision {
    let in_window = ledger.in_window(now);
    let spent: Decimal = in_window.iter().map(|e| e.usd).sum();
    let remaining = config.daily_limit_usd - spent;
    let oldest = in_window.first().map(|e| e.timestamp);

    if remaining <= Decimal::ZERO {
        // An exhausted budget implies at least one in-window entry.
        let until = oldest.map_or(now, |t| t + window());
        return ThrottleDecision::PauseUntil { until };
    }
    if remaining / config.daily_limit_usd >= config.safety_threshold_fraction {
        return ThrottleDecision::Proceed;
    }
    let window_left = oldest
        .map(|t| (t + window() - now).num_seconds())
        .unwrap_or(WINDOW_SECONDS)
        .clamp(0, WINDOW_SECONDS) as u64;
    let avg = if avg_recent_cost > Decimal::ZERO {
        avg_recent_cost
    } else {
        config.default_invocation_cost
    };
    let affordable = (remaining / avg).floor().to_u64().unwrap_or(u64::MAX).max(1);
    ThrottleDecision::Sleep {
        seconds: (window_left / affordable).min(window_left),
    }
}

/// Failed cycles over total cycles, kept as an exact fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WasteRatio {
    pub failed: u64,
    pub total: u64,
}

impl WasteRatio {
    pub fn exact(self) -> Ratio<u64> {
        if self.total == 0 {
            Ratio::from_integer(0)
        } else {
            Ratio::new(self.failed, self.total)
        }
    }

    pub fn value(self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.failed as f64 / self.total as f64
        }
    }

    /// Percentage rounded to one decimal place, e.g. `6.9%`.
    pub fn percent_display(self) -> String {
        format!("{:.1}%", self.value() * 100.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectMetrics {
    pub waste_ratio: WasteRatio,
    pub waste_ratio_value: f64,
    /// Absent when no milestone has passed yet.
    pub cost_per_milestone: Option<Decimal>,
    /// Share of total cost per role key (`Athena`, `Ares`, `Apollo`, `worker`).
    pub cost_by_role: BTreeMap<String, f64>,
    pub total_cycles: u64,
    pub failed_cycles: u64,
    pub completed_milestones: u64,
    pub total_cost: Decimal,
}

pub fn compute_metrics(
    total_cycles: u64,
    failed_cycles: u64,
    completed_milestones: u64,
    ledger: &CostLedger,
) -> ProjectMetrics {
    let waste_ratio = WasteRatio {
        failed: failed_cycles,
        total: total_cycles,
    };
    let total_cost = ledger.total();
    let cost_per_milestone =
        (completed_milestones > 0).then(|| total_cost / Decimal::from(completed_milestones));

    let mut by_role: BTreeMap<String, Decimal> = BTreeMap::new();
    for e in ledger.entries() {
        *by_role.entry(e.role.cost_key().to_string()).or_default() += e.usd;
    }
    let cost_by_role = if total_cost > Decimal::ZERO {
        by_role
            .into_iter()
            .map(|(k, v)| (k, (v / total_cost).to_f64().unwrap_or(0.0)))
            .collect()
    } else {
        BTreeMap::new()
    };

    ProjectMetrics {
        waste_ratio,
        waste_ratio_value: waste_ratio.value(),
        cost_per_milestone,
        cost_by_role,
        total_cycles,
        failed_cycles,
        completed_milestones,
        total_cost,
    }
}

pub const CSV_HEADER: [&str; 7] = [
    "timestamp",
    "agent",
    "role",
    "tokens_in",
    "tokens_out",
    "tokens_cached",
    "usd",
];

/// Renders the ledger as CSV with [`CSV_HEADER`] columns.
pub fn ledger_to_csv(ledger: &CostLedger) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for e in ledger.entries() {
        w.write_record([
            e.timestamp.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            e.agent.clone(),
            e.role.to_string(),
            e.tokens_in.to_string(),
            e.tokens_out.to_string(),
            e.tokens_cached.to_string(),
            format!("{:.4}", e.usd),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}
