//! Deterministic weighted round-robin driver. Actors are step closures over
//! the shared memory system; time advances only through the operations they
//! issue. One actor steps at a time, in a fixed order, so a run is exactly
//! reproducible and a recorded trace replays to the same state.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::mem::MemorySystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    /// The actor has more work.
    Ready,
    /// The actor is finished and must not be stepped again.
    Done,
}

#[derive(Debug, Error)]
pub enum SchedError {
    #[error("actor `{actor}` failed: {source}")]
    Step {
        actor: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

pub type StepFn = Box<dyn FnMut(&mut MemorySystem) -> Result<StepStatus, SchedError>>;

pub struct ScheduledActor {
    pub name: String,
    /// Consecutive steps this actor gets per scheduling round.
    pub weight: u32,
    pub step: StepFn,
}

impl ScheduledActor {
    pub fn new(
        name: &str,
        weight: u32,
        step: impl FnMut(&mut MemorySystem) -> Result<StepStatus, SchedError> + 'static,
    ) -> Self {
        ScheduledActor { name: name.to_string(), weight, step: Box::new(step) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopCondition {
    /// Stop when every actor has reported `Done`.
    AllDone,
    /// Stop as soon as any actor reports `Done`.
    AnyDone,
    /// Stop at the first round boundary where the clock has reached this.
    TimeLimit(u64),
}

pub struct Schedule {
    pub actors: Vec<ScheduledActor>,
    pub stop: StopCondition,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps_per_actor: BTreeMap<String, u64>,
    pub rounds: u64,
    pub final_clock: u64,
}

/// Helper for errors raised inside step closures.
pub fn step_err(
    actor: &str,
    e: impl std::error::Error + Send + Sync + 'static,
) -> SchedError {
    SchedError::Step { actor: actor.to_string(), source: Box::new(e) }
}

/// Runs the schedule to its stop condition. Each round walks the actors in
/// registration order, giving each `weight` consecutive steps; finished
/// actors are skipped. The observer sees the system after every round, which
/// is where a monitoring detector samples counters.
pub fn run_observed(
    sys: &mut MemorySystem,
    schedule: &mut Schedule,
    mut observer: impl FnMut(&MemorySystem, u64),
) -> Result<RunSummary, SchedError> {
    let n = schedule.actors.len();
    let mut done = vec![false; n];
    let mut steps: Vec<u64> = vec![0; n];
    let mut rounds = 0u64;

    'outer: loop {
        match schedule.stop {
            StopCondition::AllDone if done.iter().all(|&d| d) => break,
            StopCondition::AnyDone if done.iter().any(|&d| d) => break,
            StopCondition::TimeLimit(t) if sys.clock() >= t => break,
            _ => {}
        }
        if n == 0 {
            break;
        }
        let before = sys.clock();
        for i in 0..n {
            if done[i] {
                continue;
            }
            for _ in 0..schedule.actors[i].weight {
                let status = (schedule.actors[i].step)(sys)?;
                steps[i] += 1;
                if status == StepStatus::Done {
                    done[i] = true;
                    break;
                }
            }
            if schedule.stop == StopCondition::AnyDone && done[i] {
                break;
            }
        }
        rounds += 1;
        observer(sys, rounds);
        // A round that moved nothing and finished nobody would spin forever.
        if sys.clock() == before && !done.iter().any(|&d| d) {
            break 'outer;
        }
    }

    Ok(RunSummary {
        steps_per_actor: schedule
            .actors
            .iter()
            .zip(&steps)
            .map(|(a, &s)| (a.name.clone(), s))
            .collect(),
        rounds,
        final_clock: sys.clock(),
    })
}

pub fn run(sys: &mut MemorySystem, schedule: &mut Schedule) -> Result<RunSummary, SchedError> {
    run_observed(sys, schedule, |_, _| {})
}
