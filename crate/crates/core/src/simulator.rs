//! The closed plan/act loop with failure injection.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{derive_seed, expand_task, Episode, ModalityMask, Scene};
use crate::encoders::Observation;
use crate::error::{Error, Result};
use crate::heads::{decode_subgoal, Action, SubGoal};
use crate::model::PlannerModel;
use crate::world::{class_index, receptacle_object, Cell, Outcome, Task, WorldState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureKind {
    /// The agent ends up somewhere other than next to its destination.
    NavigationError,
    /// The agent drops what it is holding.
    ManipulationError,
}

impl FailureKind {
    pub fn name(self) -> &'static str {
        match self {
            FailureKind::NavigationError => "navigation_error",
            FailureKind::ManipulationError => "manipulation_error",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "navigation_error" => Ok(FailureKind::NavigationError),
            "manipulation_error" => Ok(FailureKind::ManipulationError),
            other => Err(Error::Validation(format!("unknown failure kind {other}"))),
        }
    }
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A failure armed from record index `step` on. It fires on the first
/// step at or after `step` where it applies: a successful `Navigate` for
/// navigation errors, a successful step that leaves the agent holding
/// something for manipulation errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledFailure {
    pub step: usize,
    pub kind: FailureKind,
}

impl ScheduledFailure {
    /// Parses `kind@step`, e.g. `navigation_error@2`.
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, step) = s
            .split_once('@')
            .ok_or_else(|| Error::Validation(format!("expected kind@step, got {s}")))?;
        let step = step
            .parse()
            .map_err(|_| Error::Validation(format!("bad step in {s}")))?;
        Ok(Self {
            step,
            kind: FailureKind::from_name(kind)?,
        })
    }
}

impl fmt::Display for ScheduledFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.kind, self.step)
    }
}

#[derive(Clone, Debug)]
pub struct FailureInjector {
    schedule: Vec<ScheduledFailure>,
    fired: Vec<bool>,
    rng: ChaCha8Rng,
}

impl FailureInjector {
    pub fn new(schedule: Vec<ScheduledFailure>, seed: u64) -> Self {
        Self {
            fired: vec![false; schedule.len()],
            schedule,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn none() -> Self {
        Self::new(Vec::new(), 0)
    }

    pub fn schedule(&self) -> &[ScheduledFailure] {
        &self.schedule
    }

    pub fn fired(&self) -> usize {
        self.fired.iter().filter(|f| **f).count()
    }

    /// Corrupts the world after a step, if a pending failure applies.
    pub fn after_step(&mut self, index: usize, g: &SubGoal, outcome: Outcome, state: &mut WorldState) -> Option<FailureKind> {
        if outcome != Outcome::Success {
            return None;
        }
        for (k, f) in self.schedule.iter().enumerate() {
            if self.fired[k] || f.step > index {
                continue;
            }
            let applied = match f.kind {
                FailureKind::NavigationError if g.action == Action::Navigate => {
                    let target = state
                        .navigation_target(g.object)
                        .and_then(|(i, _)| state.item_cell(i));
                    let rng = &mut self.rng;
                    target.map_or(false, |cell| state.teleport_away(cell, |n| rng.gen_range(0..n)))
                }
                FailureKind::ManipulationError if state.held.is_some() => state.drop_held(),
                _ => continue,
            };
            if applied {
                self.fired[k] = true;
                return Some(f.kind);
            }
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub observation: Observation,
    pub subgoal: SubGoal,
    pub outcome: Outcome,
    pub injected: Option<FailureKind>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminalStatus {
    Success,
    StopWithoutSuccess,
    StepLimit,
}

impl TerminalStatus {
    pub fn name(self) -> &'static str {
        match self {
            TerminalStatus::Success => "success",
            TerminalStatus::StopWithoutSuccess => "stop_without_success",
            TerminalStatus::StepLimit => "step_limit",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "success" => Ok(TerminalStatus::Success),
            "stop_without_success" => Ok(TerminalStatus::StopWithoutSuccess),
            "step_limit" => Ok(TerminalStatus::StepLimit),
            other => Err(Error::Validation(format!("unknown terminal status {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub scene_id: u32,
    pub instruction: String,
    pub task: Task,
    pub agent_start: Cell,
    pub seed: u64,
    pub schedule: Vec<ScheduledFailure>,
    pub records: Vec<TrajectoryRecord>,
    pub status: TerminalStatus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSummary {
    pub status: TerminalStatus,
    pub steps: usize,
    pub failures_injected: usize,
    pub failures_recovered: usize,
}

impl Trajectory {
    pub fn summary(&self) -> RunSummary {
        let injected = self.records.iter().filter(|r| r.injected.is_some()).count();
        RunSummary {
            status: self.status,
            steps: self.records.len(),
            failures_injected: injected,
            failures_recovered: if self.status == TerminalStatus::Success { injected } else { 0 },
        }
    }

    pub fn subgoals(&self) -> Vec<SubGoal> {
        self.records.iter().map(|r| r.subgoal).collect()
    }
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "status={} steps={} failures_injected={} failures_recovered={}",
            self.status.name(),
            self.steps,
            self.failures_injected,
            self.failures_recovered
        )
    }
}

/// What a policy may look at when choosing the next sub-goal. Learned
/// policies only use the instruction, the observation and the records;
/// scripted oracles may also read the world state.
pub struct PolicyContext<'a> {
    pub instruction: &'a str,
    pub observation: &'a Observation,
    pub records: &'a [TrajectoryRecord],
    pub state: &'a WorldState,
    pub task: &'a Task,
}

pub trait Policy {
    fn next_subgoal(&mut self, ctx: &PolicyContext) -> Result<SubGoal>;
}

/// Replays a fixed plan, then stops.
#[derive(Clone, Debug)]
pub struct ScriptedPolicy {
    plan: Vec<SubGoal>,
    cursor: usize,
}

impl ScriptedPolicy {
    pub fn new(plan: Vec<SubGoal>) -> Self {
        Self { plan, cursor: 0 }
    }
}

impl Policy for ScriptedPolicy {
    fn next_subgoal(&mut self, _ctx: &PolicyContext) -> Result<SubGoal> {
        let g = self.plan.get(self.cursor).copied().unwrap_or_else(SubGoal::stop);
        self.cursor += 1;
        Ok(g)
    }
}

/// Follows the expert plan; after a failed sub-goal `X` it re-plans with
/// the fewest corrective sub-goals: fetch the required object again if it
/// is no longer held, walk back to `X`'s target, then retry `X`.
#[derive(Clone, Debug)]
pub struct RecoveryOracle {
    queue: VecDeque<SubGoal>,
}

impl RecoveryOracle {
    pub fn new(plan: Vec<SubGoal>) -> Self {
        Self { queue: plan.into() }
    }

    pub fn for_task(task: &Task) -> Self {
        Self::new(expand_task(task))
    }
}

/// Object the agent must hold for `g`, if any.
fn required_held(g: &SubGoal) -> Option<usize> {
    match g.action {
        Action::Put => Some(g.object),
        Action::Slice => class_index("Knife"),
        _ => None,
    }
}

/// Where the agent must stand (object-vocabulary class) for `g`.
fn target_of(g: &SubGoal) -> usize {
    match g.action {
        Action::Put => receptacle_object(g.receptacle),
        _ => g.object,
    }
}

impl Policy for RecoveryOracle {
    fn next_subgoal(&mut self, ctx: &PolicyContext) -> Result<SubGoal> {
        if let Some(last) = ctx.records.last() {
            if last.outcome == Outcome::Failed && last.subgoal.action != Action::Stop {
                let x = last.subgoal;
                let mut fix = Vec::with_capacity(4);
                if let Some(need) = required_held(&x) {
                    if ctx.state.held_class() != Some(need) {
                        fix.push(SubGoal::new(Action::Navigate, need, 0));
                        fix.push(SubGoal::new(Action::PickUp, need, 0));
                    }
                }
                fix.push(SubGoal::new(Action::Navigate, target_of(&x), 0));
                if x.action != Action::Navigate {
                    fix.push(x);
                }
                for g in fix.into_iter().rev() {
                    self.queue.push_front(g);
                }
            }
        }
        Ok(self.queue.pop_front().unwrap_or_else(SubGoal::stop))
    }
}

/// A trained planner in the loop. Each decision is the teacher-forced
/// prediction for the last step of the rollout so far, with the executed
/// sub-goals as history.
pub struct ModelPolicy<'m> {
    model: &'m PlannerModel,
    mask: ModalityMask,
    observations: Vec<Observation>,
}

impl<'m> ModelPolicy<'m> {
    pub fn new(model: &'m PlannerModel, mask: ModalityMask) -> Self {
        Self {
            model,
            mask,
            observations: Vec::new(),
        }
    }
}

impl Policy for ModelPolicy<'_> {
    fn next_subgoal(&mut self, ctx: &PolicyContext) -> Result<SubGoal> {
        self.observations.push(ctx.observation.clone());
        let executed: Vec<SubGoal> = ctx.records.iter().map(|r| r.subgoal).collect();
        let ep = self.model.prepare(ctx.instruction, &self.observations, &executed)?;
        let logits = self.model.predict_last(&ep, &self.mask)?;
        Ok(decode_subgoal(&logits).subgoal)
    }
}

/// Runs the loop: render, ask the policy, execute, maybe corrupt, record,
/// until `Stop` or `step_limit` records.
pub fn run_agent(
    policy: &mut dyn Policy,
    start: &WorldState,
    instruction: &str,
    task: &Task,
    injector: &mut FailureInjector,
    step_limit: usize,
    seed: u64,
) -> Result<Trajectory> {
    if step_limit == 0 {
        return Err(Error::Config("step limit must be positive".into()));
    }
    let mut state = start.clone();
    let mut records: Vec<TrajectoryRecord> = Vec::new();
    let mut status = TerminalStatus::StepLimit;
    while records.len() < step_limit {
        let observation = state.render();
        let g = policy.next_subgoal(&PolicyContext {
            instruction,
            observation: &observation,
            records: &records,
            state: &state,
            task,
        })?;
        let outcome = state.step(&g, Some(task));
        let injected = injector.after_step(records.len(), &g, outcome, &mut state);
        records.push(TrajectoryRecord {
            observation,
            subgoal: g,
            outcome,
            injected,
        });
        if g.action == Action::Stop {
            status = if outcome == Outcome::Success {
                TerminalStatus::Success
            } else {
                TerminalStatus::StopWithoutSuccess
            };
            break;
        }
    }
    Ok(Trajectory {
        scene_id: start.scene.id,
        instruction: instruction.into(),
        task: *task,
        agent_start: start.agent,
        seed,
        schedule: injector.schedule().to_vec(),
        records,
        status,
    })
}

/// Default step limit: three times the expert plan length.
pub fn default_step_limit(task: &Task) -> usize {
    3 * expand_task(task).len()
}

/// Re-executes a logged trajectory's sub-goals with the same injector
/// schedule and seed.
pub fn replay(scene: &Scene, log: &Trajectory) -> Result<Trajectory> {
    let mut start = WorldState::new(scene);
    start.agent = log.agent_start;
    let mut injector = FailureInjector::new(log.schedule.clone(), log.seed);
    let mut policy = ScriptedPolicy::new(log.subgoals());
    run_agent(
        &mut policy,
        &start,
        &log.instruction,
        &log.task,
        &mut injector,
        log.records.len().max(1),
        log.seed,
    )
}

/// Learned-model recovery statistics over runs with one injected failure.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RecoveryStats {
    pub runs: usize,
    pub injected: usize,
    pub recovered: usize,
}

impl RecoveryStats {
    pub fn rate(&self) -> f64 {
        if self.injected == 0 {
            0.0
        } else {
            self.recovered as f64 / self.injected as f64
        }
    }
}

/// Runs `policy_for` on `runs` episodes (cycled), each with one failure of
/// a seeded kind at a seeded step.
pub fn recovery_trials<'a, P: Policy>(
    episodes: &[&Episode],
    scenes: &[Scene],
    runs: usize,
    seed: u64,
    mut policy_for: impl FnMut() -> P,
) -> Result<RecoveryStats> {
    let mut stats = RecoveryStats::default();
    if episodes.is_empty() {
        return Ok(stats);
    }
    for k in 0..runs {
        let ep = episodes[k % episodes.len()];
        let scene = scenes
            .iter()
            .find(|s| s.id == ep.scene_id)
            .ok_or_else(|| Error::Validation(format!("unknown scene {}", ep.scene_id)))?;
        let run_seed = derive_seed(seed, k as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
        let kind = if rng.gen_bool(0.5) {
            FailureKind::NavigationError
        } else {
            FailureKind::ManipulationError
        };
        let at = rng.gen_range(0..ep.steps.len().saturating_sub(1).max(1));
        let mut injector = FailureInjector::new(vec![ScheduledFailure { step: at, kind }], run_seed);
        let mut policy = policy_for();
        let traj = run_agent(
            &mut policy,
            &ep.initial_state(scene),
            &ep.instruction,
            &ep.task,
            &mut injector,
            default_step_limit(&ep.task),
            run_seed,
        )?;
        let s = traj.summary();
        stats.runs += 1;
        if s.failures_injected > 0 {
            stats.injected += 1;
            if s.status == TerminalStatus::Success {
                stats.recovered += 1;
            }
        }
    }
    Ok(stats)
}
