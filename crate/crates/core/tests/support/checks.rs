//! One function per acceptance criterion. Each returns a short summary on
//! success and a description of the first discrepancy on failure.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use botforge_core::agent::{Invocation, RunOutput, Runner, RunnerError, ScriptStep};
use botforge_core::budget::{compute_metrics, throttle_decision, ThrottleDecision};
use botforge_core::directive::{
    allowed_kinds, extract_directives, normalize_text, serialize_directive, validate_for_role, Directive,
    DirectiveKind, MilestoneDirective,
};
use botforge_core::domain::{AgentRole, ManagerRole, MilestoneId, Phase, Verdict};
use botforge_core::lifecycle::{
    next_action, replay, Action, Failure, LifecycleError, LifecycleEvent, NoVcs, Orchestrator, OrchestratorConfig,
    Replayed,
};
use botforge_core::store::{IssueFilter, IssueStatus};
use botforge_core::{BudgetConfig, CostEntry, CostLedger, ScheduleItem, Store, VisibilityMode};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rust_decimal::Decimal;

use super::harness::*;
use super::oracle::{random_scenario, run_oracle};

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

// Budget halving

pub fn budget_halving() -> Check {
    let rt = paused_runtime();
    for b in 1..=16u32 {
        let history = rt.block_on(async {
            let steps = vec![
                ScriptStep::new("Athena", milestone("Halving", b)),
                ScriptStep::new("Athena", complete("done")),
                ScriptStep::new("Ares", claim("ready")).repeating(),
                ScriptStep::new("Apollo", fail("still broken")).repeating(),
            ];
            let h = Harness::new(steps, &[]);
            let mut orch = h.orchestrator();
            drive(&mut orch, 500).await.map_err(|e| e.to_string())?;
            let rec = h.project.store.milestone(&MilestoneId::root(1).unwrap()).map_err(|e| e.to_string())?;
            Ok::<_, String>(rec.budget_history)
        })?;
        let mut expected = vec![b];
        while *expected.last().unwrap() > 0 {
            expected.push(expected.last().unwrap() / 2);
        }
        ensure(history == expected, || format!("b={b}: budget_history {history:?}, expected {expected:?}"))?;
    }
    Ok("16 budgets, histories b, b/2, ..., 0".into())
}

// Oracle equivalence

pub fn oracle_equivalence(fixtures: usize, seed: u64) -> Check {
    let rt = paused_runtime();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut total_events = 0;
    for n in 0..fixtures {
        let scenario = random_scenario(&mut rng);
        let expected = run_oracle(&scenario);
        let actual = rt.block_on(async {
            let h = Harness::new(
                expected.script.clone(),
                &[("dev", ManagerRole::Execution), ("qa", ManagerRole::Verification)],
            );
            let mut orch = h.orchestrator();
            drive(&mut orch, 10_000).await.map_err(|e| e.to_string())?;
            ensure(h.runner.remaining() == 0, || {
                format!("fixture {n}: {} scripted steps left unused", h.runner.remaining())
            })?;
            let events = h.events();
            ensure(replay(&events) == Replayed::of(orch.state()), || {
                format!("fixture {n}: replayed state differs from snapshot")
            })?;
            Ok::<_, String>(events)
        })?;
        if actual != expected.events {
            let at = actual.iter().zip(&expected.events).position(|(a, e)| a != e).unwrap_or(actual.len().min(expected.events.len()));
            return Err(format!(
                "fixture {n} ({scenario:?}) diverges at event {at}: got {:?}, oracle {:?}",
                actual.get(at),
                expected.events.get(at)
            ));
        }
        total_events += actual.len();
    }
    Ok(format!("{fixtures} fixtures, {total_events} events identical"))
}

// Crash-resume

/// Lifecycle log of the crash fixture; exactly twelve events.
pub fn crash_fixture() -> Vec<ScriptStep> {
    vec![
        ScriptStep::new("Athena", milestone("Storage engine", 2)),
        ScriptStep::new("Ares", schedule(vec![task("dev", "write the pager")])),
        ScriptStep::new("dev", "pager written"),
        ScriptStep::new("Ares", claim("pager done")),
        ScriptStep::new("Apollo", pass()),
        ScriptStep::new("Athena", complete("shipped")),
    ]
}

/// Checks that `events` is a legal log: phases follow the allowed
/// transitions and cycles within each round count 1, 2, ... without repeats.
pub fn check_legal(events: &[LifecycleEvent]) -> Result<(), String> {
    let mut phase: Option<Phase> = None;
    let mut last_cycle = 0;
    for (i, e) in events.iter().enumerate() {
        match e {
            LifecycleEvent::PhaseEntered { phase: p } => {
                if let Some(prev) = phase {
                    ensure(prev.can_transition(*p), || format!("event {i}: illegal phase change {prev} -> {p}"))?;
                } else {
                    ensure(*p == Phase::Strategy, || format!("log starts in {p}"))?;
                }
                phase = Some(*p);
            }
            LifecycleEvent::MilestoneDefined { .. } | LifecycleEvent::FixRoundStarted { .. } => last_cycle = 0,
            LifecycleEvent::CycleStarted { cycle } => {
                ensure(phase == Some(Phase::Execution), || format!("event {i}: cycle outside execution"))?;
                ensure(*cycle == last_cycle + 1, || {
                    format!("event {i}: CycleStarted({cycle}) after cycle {last_cycle}")
                })?;
                last_cycle = *cycle;
            }
            LifecycleEvent::CompletionClaimed { .. } => {
                ensure(phase == Some(Phase::Execution), || format!("event {i}: claim outside execution"))?;
            }
            LifecycleEvent::VerdictIssued { .. } => {
                ensure(phase == Some(Phase::Verification), || format!("event {i}: verdict outside verification"))?;
            }
            _ => {}
        }
    }
    Ok(())
}

/// Delegates to the scripted runner, except that call number `hang_on`
/// never returns, like a process killed mid-invocation.
struct HangingRunner {
    inner: Arc<dyn Runner>,
    hang_on: usize,
    calls: AtomicUsize,
}

#[async_trait]
impl Runner for HangingRunner {
    async fn run(
        &self,
        invocation: &Invocation,
        on_chunk: &(dyn for<'s> Fn(&'s str) + Send + Sync),
    ) -> Result<RunOutput, RunnerError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) + 1 == self.hang_on {
            std::future::pending::<()>().await;
        }
        self.inner.run(invocation, on_chunk).await
    }
}

pub fn crash_resume() -> Check {
    let rt = paused_runtime();
    let baseline = rt.block_on(async {
        let h = Harness::new(crash_fixture(), &[("dev", ManagerRole::Execution)]);
        let mut orch = h.orchestrator();
        drive(&mut orch, 100).await.map_err(|e| e.to_string())?;
        Ok::<_, String>(h.events())
    })?;
    ensure(baseline.len() == 12, || format!("fixture produced {} events, not 12", baseline.len()))?;
    check_legal(&baseline)?;
    let invocations = 6;

    let mut points = 0;
    for k in 1..=baseline.len() as u64 {
        rt.block_on(async {
            let h = Harness::new(crash_fixture(), &[("dev", ManagerRole::Execution)]);
            let mut orch = h.orchestrator().with_crash_after(k);
            match drive(&mut orch, 100).await {
                Err(LifecycleError::InjectedCrash { .. }) => {}
                other => return Err(format!("crash after event {k}: expected injected crash, got {other:?}")),
            }
            drop(orch);
            let mut resumed = h.reopened();
            drive(&mut resumed, 100).await.map_err(|e| format!("resume after event {k}: {e}"))?;
            verify_resumed(&h, resumed.state(), &baseline, &format!("crash after event {k}"))
        })?;
        points += 1;
    }
    for hang_on in 1..=invocations {
        rt.block_on(async {
            let h = Harness::new(crash_fixture(), &[("dev", ManagerRole::Execution)]);
            let hanging = Arc::new(HangingRunner {
                inner: h.runner.clone(),
                hang_on,
                calls: AtomicUsize::new(0),
            });
            let mut orch = Orchestrator::new(h.project.clone(), hanging, h.clock.clone())
                .with_config(OrchestratorConfig {
                    timeout_seconds: 3600,
                    ..h.config.clone()
                })
                .with_vcs(Arc::new(NoVcs));
            let killed = tokio::time::timeout(Duration::from_secs(60), drive(&mut orch, 100)).await;
            ensure(killed.is_err(), || format!("invocation {hang_on} did not hang"))?;
            drop(orch);
            let mut resumed = h.reopened();
            drive(&mut resumed, 100).await.map_err(|e| format!("resume after kill in call {hang_on}: {e}"))?;
            verify_resumed(&h, resumed.state(), &baseline, &format!("kill during invocation {hang_on}"))
        })?;
        points += 1;
    }
    Ok(format!("{points} injection points ({} event boundaries, {invocations} mid-invocation), all legal", baseline.len()))
}

fn verify_resumed(
    h: &Harness,
    state: &botforge_core::OrchestrationState,
    baseline: &[LifecycleEvent],
    label: &str,
) -> Result<(), String> {
    let events = h.events();
    check_legal(&events).map_err(|e| format!("{label}: {e}"))?;
    ensure(events == baseline, || format!("{label}: log differs from uninterrupted run: {events:?}"))?;
    ensure(replay(&events) == Replayed::of(state), || format!("{label}: replay differs from snapshot"))?;
    let cycles = events.iter().filter(|e| matches!(e, LifecycleEvent::CycleStarted { .. })).count() as u64;
    ensure(state.total_cycles == cycles, || format!("{label}: total_cycles {} vs {cycles} CycleStarted", state.total_cycles))
}

// Waste ratio

pub fn waste_ratio() -> Check {
    let rust_latex = compute_metrics(392, 27, 95, &CostLedger::new());
    let exact = rust_latex.waste_ratio.exact();
    ensure(*exact.numer() == 27 && *exact.denom() == 392, || format!("waste ratio {exact}"))?;
    let shown = rust_latex.waste_ratio.percent_display();
    ensure(shown == "6.9%", || format!("waste ratio displayed as {shown}"))?;

    let mut ledger = CostLedger::new();
    for (i, usd) in ["12.50", "8.00", "7.25", "5.25"].iter().enumerate() {
        ledger
            .record(CostEntry {
                timestamp: t0() + chrono::Duration::hours(i as i64),
                agent: "Athena".into(),
                role: AgentRole::StrategyManager,
                tokens_in: 0,
                tokens_out: 0,
                tokens_cached: 0,
                usd: usd.parse().unwrap(),
            })
            .map_err(|e| e.to_string())?;
    }
    let ground_db = compute_metrics(17, 0, 4, &ledger);
    ensure(ground_db.total_cost == Decimal::from(33), || format!("total {}", ground_db.total_cost))?;
    let cpm = ground_db.cost_per_milestone;
    ensure(cpm == Some(Decimal::new(825, 2)), || format!("cost per milestone {cpm:?}"))?;
    Ok(format!("27/392 = {shown}, $33/4 = ${}", cpm.unwrap()))
}

// Rolling budget

pub fn rolling_budget(invocations: usize, seed: u64) -> Check {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut config = BudgetConfig::new(Decimal::from(10));
    config.default_invocation_cost = Decimal::new(25, 2);
    let mut ledger = CostLedger::new();
    let mut now = t0();
    let mut pauses = 0;
    let mut sleeps = 0;
    while ledger.entries().len() < invocations {
        let avg = ledger.avg_recent_cost(config.default_invocation_cost);
        match throttle_decision(&config, &ledger, now, avg) {
            ThrottleDecision::Proceed => {}
            ThrottleDecision::Sleep { seconds } => {
                sleeps += 1;
                ensure(seconds <= 86_400, || format!("sleep of {seconds}s exceeds the window"))?;
                now += chrono::Duration::seconds(seconds as i64);
            }
            ThrottleDecision::PauseUntil { until } => {
                pauses += 1;
                ensure(until <= now + chrono::Duration::hours(24), || "pause beyond 24h".to_string())?;
                now = until.max(now + chrono::Duration::seconds(1));
                continue;
            }
        }
        let usd = Decimal::new(rng.random_range(1..=150), 2);
        ledger
            .record(CostEntry {
                timestamp: now,
                agent: "dev".into(),
                role: AgentRole::Worker {
                    manager: ManagerRole::Execution,
                },
                tokens_in: 0,
                tokens_out: 0,
                tokens_cached: 0,
                usd,
            })
            .map_err(|e| e.to_string())?;
        now += chrono::Duration::seconds(rng.random_range(0..=900));
    }

    // Worst 24h window, scanning every window that ends on an entry.
    let bound = config.daily_limit_usd + ledger.max_entry_cost();
    let entries = ledger.entries();
    let mut lo = 0;
    let mut sum = Decimal::ZERO;
    let mut worst = Decimal::ZERO;
    for hi in 0..entries.len() {
        sum += entries[hi].usd;
        while entries[lo].timestamp <= entries[hi].timestamp - chrono::Duration::hours(24) {
            sum -= entries[lo].usd;
            lo += 1;
        }
        worst = worst.max(sum);
        ensure(sum <= bound, || format!("window ending {} spent {sum} > {bound}", entries[hi].timestamp))?;
    }
    Ok(format!(
        "{invocations} invocations, worst window ${worst} <= ${bound} ({pauses} pauses, {sleeps} spread sleeps)"
    ))
}

// Visibility

#[derive(Debug, Clone)]
struct Board {
    issues: Vec<(bool, Option<&'static str>)>,
    status: Option<IssueStatus>,
    assignee: Option<&'static str>,
    focus: Vec<u64>,
}

fn board() -> impl Strategy<Value = Board> {
    let assignee = prop_oneof![Just(None), Just(Some("dev")), Just(Some("qa"))];
    let status = prop_oneof![Just(None), Just(Some(IssueStatus::Open)), Just(Some(IssueStatus::Closed))];
    (
        prop::collection::vec((any::<bool>(), assignee.clone()), 0..25),
        status,
        assignee,
        prop::collection::vec(1u64..30, 1..6),
    )
        .prop_map(|(issues, status, assignee, focus)| Board {
            issues,
            status,
            assignee,
            focus,
        })
}

pub fn visibility(cases: u32) -> Check {
    runner(cases)
        .run(&board(), |b| {
            let store = Store::in_memory().unwrap();
            for (i, (open, assignee)) in b.issues.iter().enumerate() {
                let issue = store
                    .open_issue(&format!("issue {}", i + 1), "", "human", *assignee, t0())
                    .unwrap();
                if !open {
                    store.close_issue(issue.id, "human", t0()).unwrap();
                }
            }
            let filter = IssueFilter {
                status: b.status,
                assignee: b.assignee.map(str::to_string),
                limit: None,
            };
            let ids = |v: &VisibilityMode| -> Vec<u64> {
                store.list_issues(&filter, v).unwrap().into_iter().map(|i| i.id).collect()
            };
            let brute: Vec<u64> = b
                .issues
                .iter()
                .enumerate()
                .filter(|(_, (open, a))| {
                    let st = if *open { IssueStatus::Open } else { IssueStatus::Closed };
                    b.status.is_none_or(|s| s == st) && b.assignee.is_none_or(|x| *a == Some(x))
                })
                .map(|(i, _)| i as u64 + 1)
                .collect();
            let full = ids(&VisibilityMode::Full);
            let focused = ids(&VisibilityMode::Focused(b.focus.clone()));
            prop_assert!(ids(&VisibilityMode::Blind).is_empty());
            prop_assert_eq!(&full, &brute);
            let expected: Vec<u64> = brute.iter().copied().filter(|id| b.focus.contains(id)).collect();
            prop_assert_eq!(&focused, &expected);
            prop_assert!(focused.iter().all(|id| full.contains(id)));
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{cases} random boards"))
}

// Directive round-trip

fn text(min_len: usize) -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 :|#`\\-\n\t.,é✓]{0,60}".prop_map(move |s| {
        let t = normalize_text(&s);
        if t.trim().len() < min_len {
            format!("text{t}")
        } else {
            t
        }
    })
}

fn visibility_mode() -> impl Strategy<Value = VisibilityMode> {
    prop_oneof![
        Just(VisibilityMode::Full),
        Just(VisibilityMode::Blind),
        prop::collection::vec(1u64..10_000, 1..5).prop_map(VisibilityMode::Focused),
    ]
}

fn schedule_item() -> impl Strategy<Value = ScheduleItem> {
    prop_oneof![
        ("[a-z0-9_-]{1,12}", text(1), visibility_mode(), 0u64..5000).prop_map(|(w, t, v, d)| ScheduleItem::Task {
            worker_name: w,
            task: t,
            visibility: v,
            delay_before_seconds: d,
        }),
        (1u64..100_000).prop_map(|d| ScheduleItem::Delay { duration_seconds: d }),
    ]
}

pub fn directive() -> impl Strategy<Value = Directive> {
    let id = prop::option::of(prop::collection::vec(1u32..200, 1..4).prop_map(|s| MilestoneId::new(s).unwrap()));
    prop_oneof![
        (id, text(1), text(0), 1u32..1000).prop_map(|(id, title, description, cycle_budget)| {
            Directive::Milestone(MilestoneDirective {
                id,
                title,
                description,
                cycle_budget,
            })
        }),
        prop::collection::vec(schedule_item(), 1..6).prop_map(|items| Directive::Schedule { items }),
        text(0).prop_map(|summary| Directive::CompletionClaim { summary }),
        text(0).prop_map(|summary| Directive::ProjectCompletion { summary }),
        text(0).prop_map(|f| Directive::VerificationVerdict { verdict: Verdict::pass(f) }),
        text(1).prop_map(|f| Directive::VerificationVerdict {
            verdict: Verdict::fail(f).unwrap()
        }),
    ]
}

fn fuzz_input() -> impl Strategy<Value = String> {
    let fragment = prop_oneof![
        Just("```tbc:milestone\n".to_string()),
        Just("```tbc:schedule\n".to_string()),
        Just("```tbc:claim\n".to_string()),
        Just("```tbc:verdict\n".to_string()),
        Just("```tbc:complete\n".to_string()),
        Just("```tbc:cmd\n".to_string()),
        Just("```tbc:\n".to_string()),
        Just("```\n".to_string()),
        Just("- worker: dev\n".to_string()),
        Just("- delay: 0\n".to_string()),
        Just("  task: |\n".to_string()),
        Just("    body line\n".to_string()),
        Just("budget: 99999999999999999999\n".to_string()),
        Just("title: x\n".to_string()),
        Just("outcome: fail\n".to_string()),
        Just("visibility: focused=\n".to_string()),
        Just("id: 1..2\n".to_string()),
        Just(":\n".to_string()),
        Just("\r\n".to_string()),
        any::<String>(),
        prop::collection::vec(any::<u8>(), 0..40).prop_map(|b| String::from_utf8_lossy(&b).into_owned()),
    ];
    prop::collection::vec(fragment, 0..30).prop_map(|f| f.concat())
}

pub fn directive_roundtrip(generated: u32, fuzzed: u32) -> Check {
    let kinds = std::sync::Mutex::new(std::collections::BTreeSet::new());
    runner(generated)
        .run(&directive(), |d| {
            kinds.lock().unwrap().insert(d.kind().tag());
            let text = serialize_directive(&d);
            let x = extract_directives(&text);
            prop_assert!(x.errors.is_empty(), "errors {:?} for {:?}", x.errors, text);
            prop_assert_eq!(x.directives, vec![d]);
            Ok(())
        })
        .map_err(|e| format!("round-trip: {e}"))?;
    let kinds = kinds.into_inner().unwrap();
    ensure(kinds.len() == 5, || format!("only kinds {kinds:?} were generated"))?;
    runner(fuzzed)
        .run(&fuzz_input(), |input| {
            let x = extract_directives(&input);
            for d in &x.directives {
                match d {
                    Directive::Milestone(m) => prop_assert!(m.cycle_budget >= 1),
                    Directive::Schedule { items } => prop_assert!(!items.is_empty()),
                    Directive::VerificationVerdict { verdict } if !verdict.is_pass() => {
                        prop_assert!(!verdict.feedback.trim().is_empty())
                    }
                    _ => {}
                }
            }
            Ok(())
        })
        .map_err(|e| format!("fuzz: {e}"))?;
    Ok(format!("{generated} generated directives over 5 kinds, {fuzzed} fuzz inputs"))
}

// Role gating

pub fn role_gating() -> Check {
    use DirectiveKind::*;
    let table: [(AgentRole, &[DirectiveKind]); 4] = [
        (AgentRole::StrategyManager, &[Milestone, Complete]),
        (AgentRole::ExecutionManager, &[Schedule, Claim]),
        (AgentRole::VerificationManager, &[Schedule, Verdict]),
        (
            AgentRole::Worker {
                manager: ManagerRole::Execution,
            },
            &[],
        ),
    ];
    let sample = |k: DirectiveKind| match k {
        Milestone => Directive::Milestone(MilestoneDirective {
            id: None,
            title: "t".into(),
            description: String::new(),
            cycle_budget: 1,
        }),
        Schedule => Directive::Schedule {
            items: vec![ScheduleItem::Delay { duration_seconds: 1 }],
        },
        Claim => Directive::CompletionClaim { summary: "s".into() },
        Verdict => Directive::VerificationVerdict {
            verdict: botforge_core::Verdict::pass(""),
        },
        Complete => Directive::ProjectCompletion { summary: "s".into() },
    };
    let mut assertions = 0;
    for (role, allowed) in table {
        for kind in DirectiveKind::ALL {
            let accepted = validate_for_role(&sample(kind), role).is_ok();
            ensure(accepted == allowed.contains(&kind), || {
                format!("{kind} for {role}: accepted={accepted}, expected {}", allowed.contains(&kind))
            })?;
            ensure(allowed_kinds(role).contains(&kind) == accepted, || format!("allowed_kinds disagrees for {role}"))?;
            assertions += 1;
        }
    }
    Ok(format!("{assertions} (kind, role) assertions"))
}

// Feedback injection

pub const FEEDBACK: &str = "X: the parser panics on empty input";

pub fn feedback_injection() -> Check {
    let rt = paused_runtime();
    rt.block_on(async {
        let steps = vec![
            ScriptStep::new("Athena", milestone("Parser", 4)),
            ScriptStep::new("Ares", claim("parser done")),
            ScriptStep::new("Apollo", fail(FEEDBACK)),
            ScriptStep::new("Ares", claim("fixed")),
            ScriptStep::new("Apollo", pass()),
            ScriptStep::new("Athena", milestone("Printer", 1)),
            ScriptStep::new("Ares", claim("printer done")),
            ScriptStep::new("Apollo", fail(FEEDBACK)),
            ScriptStep::new("Athena", milestone("Linker", 2)),
            ScriptStep::new("Ares", claim("linker done")),
            ScriptStep::new("Apollo", pass()),
            ScriptStep::new("Athena", complete("done")),
        ];
        let h = Harness::new(steps, &[]);
        let mut orch = h.orchestrator();
        drive(&mut orch, 200).await.map_err(|e| e.to_string())?;
        let ares = h.contexts_of("Ares");
        ensure(ares.len() == 4, || format!("Ares ran {} times, expected 4", ares.len()))?;
        ensure(ares[1].contains(FEEDBACK), || "fix-round context lacks the fail feedback".to_string())?;
        for (i, fix_round_zero) in [0usize, 2, 3].into_iter().enumerate() {
            ensure(!ares[fix_round_zero].contains(FEEDBACK), || {
                format!("fix_round = 0 context #{i} contains the feedback")
            })?;
        }
        Ok("feedback present in fix round 1, absent in 3 fix_round = 0 contexts".into())
    })
}

// Escalation

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Res {
    Ok,
    Error,
    Timeout,
}

fn sequences(alphabet: &[Res], max_len: usize) -> Vec<Vec<Res>> {
    let mut out = Vec::new();
    let mut layer: Vec<Vec<Res>> = vec![Vec::new()];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|s| {
                alphabet.iter().map(move |r| {
                    let mut s = s.clone();
                    s.push(*r);
                    s
                })
            })
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

/// Expected counter after each result and the 1-based positions at which
/// escalation fires.
fn expected_monitor(seq: &[Res], threshold: u32) -> (Vec<u32>, Vec<usize>) {
    let mut c = 0;
    let mut counters = Vec::new();
    let mut fired = Vec::new();
    for (i, r) in seq.iter().enumerate() {
        c = if *r == Res::Ok { 0 } else { c + 1 };
        counters.push(c);
        if c == threshold {
            fired.push(i + 1);
            c = 0;
        }
    }
    (counters, fired)
}

pub fn escalation() -> Check {
    const THRESHOLD: u32 = 3;
    let rt = paused_runtime();
    let all = sequences(&[Res::Ok, Res::Error, Res::Timeout], 6);
    let mut fired_total = 0;
    for seq in &all {
        let (counters, fired) = expected_monitor(seq, THRESHOLD);
        rt.block_on(async {
            let mut steps = vec![ScriptStep::new("Athena", milestone("Work", 50)).repeating()];
            for r in seq {
                steps.push(match r {
                    Res::Ok => ScriptStep::new("Ares", "Nothing to schedule yet."),
                    Res::Error => ScriptStep::error("Ares", "runner crashed"),
                    Res::Timeout => ScriptStep::new("Ares", "").sleeping(120),
                });
            }
            let mut h = Harness::new(steps, &[]);
            h.config.timeout_seconds = 60;
            h.config.failure_threshold = THRESHOLD;
            let mut orch = h.orchestrator();
            orch.start().map_err(|e| e.to_string())?;
            let mut seen_counters = Vec::new();
            let mut seen_fired = Vec::new();
            let mut calls = 0;
            loop {
                let action = next_action(orch.state(), THRESHOLD);
                if action == Action::Assess && calls == seq.len() {
                    break;
                }
                orch.step().await.map_err(|e| e.to_string())?;
                match action {
                    Action::Assess => {
                        calls += 1;
                        seen_counters.push(orch.state().consecutive_failures);
                    }
                    Action::Escalate => seen_fired.push(calls),
                    _ => {}
                }
            }
            ensure(seen_counters == counters, || {
                format!("{seq:?}: counters {seen_counters:?}, expected {counters:?}")
            })?;
            ensure(seen_fired == fired, || format!("{seq:?}: escalations after {seen_fired:?}, expected {fired:?}"))?;
            let episodes = h
                .events()
                .iter()
                .filter(|e| matches!(e, LifecycleEvent::FailureEpisode { failure: Failure::Escalation { .. } }))
                .count();
            ensure(episodes == fired.len(), || format!("{seq:?}: {episodes} escalation events"))?;
            let issues = h
                .project
                .store
                .list_issues(&IssueFilter::default(), &VisibilityMode::Full)
                .map_err(|e| e.to_string())?
                .into_iter()
                .filter(|i| i.author == "orchestrator")
                .count();
            ensure(issues == fired.len(), || format!("{seq:?}: {issues} escalation issues"))?;
            Ok::<_, String>(())
        })?;
        fired_total += fired.len();
    }
    Ok(format!("{} result sequences, {fired_total} escalations, each exactly at the threshold", all.len()))
}
