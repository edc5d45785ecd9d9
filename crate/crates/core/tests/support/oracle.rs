//! Reference step-through of the project loop, written as straight-line
//! nested loops in the shape of the published algorithms. It shares no code
//! with the state machine; it only uses the event and domain types so the
//! two logs can be compared with `==`.

use botforge_core::agent::ScriptStep;
use botforge_core::domain::{Milestone, MilestoneId, MilestoneStatus, Phase, Verdict};
use botforge_core::lifecycle::{
    Failure, ItemResult, LifecycleEvent, BUDGET_EXHAUSTED_REASON, BUDGET_EXPIRED_REASON,
};
use botforge_core::store::ExitStatus;
use botforge_core::ScheduleItem;
use rand::Rng;

use super::harness::{claim, complete, fail, milestone, pass, schedule, task};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Work {
    Ok,
    Err,
    Wait(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AresAct {
    Claim,
    Idle,
    Schedule(Vec<Work>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ApolloAct {
    pub qa: bool,
    pub pass: bool,
}

/// Inputs for one scripted project. The act streams are consumed in order;
/// an exhausted stream falls back to claiming and passing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub budgets: Vec<u32>,
    pub ares: Vec<AresAct>,
    pub apollo: Vec<ApolloAct>,
    pub threshold: u32,
}

#[derive(Debug)]
pub struct Expected {
    pub events: Vec<LifecycleEvent>,
    pub script: Vec<ScriptStep>,
}

const WORKER: &str = "dev";
const QA: &str = "qa";
const WORKER_ERROR: &str = "worker crashed";

fn phase(p: Phase) -> LifecycleEvent {
    LifecycleEvent::PhaseEntered { phase: p }
}

fn closed(id: &MilestoneId, status: MilestoneStatus, reason: Option<String>) -> LifecycleEvent {
    LifecycleEvent::MilestoneClosed {
        id: id.clone(),
        status,
        reason,
    }
}

pub fn run_oracle(s: &Scenario) -> Expected {
    let mut ev = Vec::new();
    let mut script = Vec::new();
    let mut ares = s.ares.iter().cloned();
    let mut apollo = s.apollo.iter().copied();
    let mut n_ares = 0;
    let mut n_qa = 0;

    ev.push(phase(Phase::Strategy));
    for (k, &b) in s.budgets.iter().enumerate() {
        // Plan: Athena defines the milestone.
        let title = format!("Milestone {}", k + 1);
        script.push(ScriptStep::new("Athena", milestone(&title, b)));
        let id = MilestoneId::root(k as u32 + 1).unwrap();
        let mut m = Milestone::new(id.clone(), title.clone(), format!("Deliver {title}."), b);
        m.status = MilestoneStatus::InProgress;
        ev.push(LifecycleEvent::MilestoneDefined { milestone: m });
        ev.push(phase(Phase::Execution));

        let mut budget = b;
        let mut failures;
        'rounds: loop {
            // Execute: for cycle = 1..budget.
            let mut claimed = false;
            for cycle in 1..=budget {
                ev.push(LifecycleEvent::CycleStarted { cycle });
                n_ares += 1;
                let act = ares.next().unwrap_or(AresAct::Claim);
                failures = 0;
                match act {
                    AresAct::Claim => {
                        let summary = format!("claim {n_ares}");
                        script.push(ScriptStep::new("Ares", claim(&summary)));
                        ev.push(LifecycleEvent::CompletionClaimed { summary });
                        ev.push(phase(Phase::Verification));
                        claimed = true;
                        break;
                    }
                    AresAct::Idle => script.push(ScriptStep::new("Ares", "Nothing to schedule this cycle.")),
                    AresAct::Schedule(work) => {
                        let items: Vec<ScheduleItem> = work
                            .iter()
                            .enumerate()
                            .map(|(j, w)| match w {
                                Work::Wait(secs) => ScheduleItem::Delay { duration_seconds: *secs },
                                _ => task(WORKER, &format!("task {n_ares}.{j}")),
                            })
                            .collect();
                        script.push(ScriptStep::new("Ares", schedule(items.clone())));
                        for (j, (w, item)) in work.iter().zip(&items).enumerate() {
                            let result = match w {
                                Work::Wait(_) => ItemResult::Waited,
                                Work::Ok => {
                                    script.push(ScriptStep::new(WORKER, "done"));
                                    failures = 0;
                                    ItemResult::Completed {
                                        agent: WORKER.into(),
                                        exit_status: ExitStatus::Ok,
                                    }
                                }
                                Work::Err => {
                                    script.push(ScriptStep::error(WORKER, WORKER_ERROR));
                                    failures += 1;
                                    ev.push(LifecycleEvent::FailureEpisode {
                                        failure: Failure::AgentError {
                                            agent: WORKER.into(),
                                            message: WORKER_ERROR.into(),
                                        },
                                    });
                                    ItemResult::Completed {
                                        agent: WORKER.into(),
                                        exit_status: ExitStatus::Error(WORKER_ERROR.into()),
                                    }
                                }
                            };
                            ev.push(LifecycleEvent::ScheduleItemRun {
                                item: item.clone(),
                                index: j,
                                of: items.len(),
                                result,
                            });
                            if failures >= s.threshold {
                                ev.push(LifecycleEvent::FailureEpisode {
                                    failure: Failure::Escalation { consecutive: failures },
                                });
                                ev.push(closed(
                                    &id,
                                    MilestoneStatus::Failed,
                                    Some(format!("escalated after {failures} consecutive failures")),
                                ));
                                ev.push(phase(Phase::Strategy));
                                break 'rounds;
                            }
                        }
                    }
                }
            }
            if !claimed {
                ev.push(closed(&id, MilestoneStatus::Failed, Some(BUDGET_EXPIRED_REASON.into())));
                ev.push(phase(Phase::Strategy));
                break;
            }

            // Verify.
            let act = apollo.next().unwrap_or(ApolloAct { qa: false, pass: true });
            let verdict = if act.pass {
                Verdict::pass("looks good")
            } else {
                Verdict::fail(format!("round {} is not done", budget)).unwrap()
            };
            let verdict_text = if act.pass { pass() } else { fail(&verdict.feedback) };
            if act.qa {
                n_qa += 1;
                let item = task(QA, &format!("check {n_qa}"));
                script.push(ScriptStep::new("Apollo", format!("{}\n{}", schedule(vec![item.clone()]), verdict_text)));
                script.push(ScriptStep::new(QA, "all checks ran"));
                ev.push(LifecycleEvent::ScheduleItemRun {
                    item,
                    index: 0,
                    of: 1,
                    result: ItemResult::Completed {
                        agent: QA.into(),
                        exit_status: ExitStatus::Ok,
                    },
                });
            } else {
                script.push(ScriptStep::new("Apollo", verdict_text));
            }
            ev.push(LifecycleEvent::VerdictIssued { verdict: verdict.clone() });
            if verdict.is_pass() {
                ev.push(closed(&id, MilestoneStatus::Passed, None));
                ev.push(phase(Phase::Strategy));
                break;
            }
            // budget <- floor(budget / 2); until verdict = pass or budget = 0
            budget /= 2;
            if budget == 0 {
                ev.push(closed(&id, MilestoneStatus::Failed, Some(BUDGET_EXHAUSTED_REASON.into())));
                ev.push(phase(Phase::Strategy));
                break;
            }
            ev.push(LifecycleEvent::FixRoundStarted { budget });
            ev.push(phase(Phase::Execution));
        }
    }
    script.push(ScriptStep::new("Athena", complete("all milestones delivered")));
    ev.push(LifecycleEvent::ProjectCompleted {
        summary: "all milestones delivered".into(),
    });
    Expected { events: ev, script }
}

pub fn random_scenario(rng: &mut impl Rng) -> Scenario {
    let budgets = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=6)).collect();
    let ares = (0..40)
        .map(|_| match rng.random_range(0..100) {
            0..35 => AresAct::Claim,
            35..50 => AresAct::Idle,
            _ => AresAct::Schedule(
                (0..rng.random_range(1..=4))
                    .map(|_| match rng.random_range(0..10) {
                        0..6 => Work::Ok,
                        6..9 => Work::Err,
                        _ => Work::Wait(rng.random_range(1..=120)),
                    })
                    .collect(),
            ),
        })
        .collect();
    let apollo = (0..20)
        .map(|_| ApolloAct {
            qa: rng.random_bool(0.3),
            pass: rng.random_bool(0.5),
        })
        .collect();
    Scenario {
        budgets,
        ares,
        apollo,
        threshold: 3,
    }
}
