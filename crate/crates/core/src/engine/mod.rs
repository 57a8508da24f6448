//! Tick-driven simulation of the whole cooperation loop.
//!
//! Every tick runs the same fixed sequence: task arrivals, status gossip,
//! selection (when something changed), formation for newcomers, routing with
//! conflict handling, energy charges, then completion and timeout checks.

mod knowledge;
pub mod metrics;
pub mod trace;

pub use knowledge::{Knowledge, RobotStatus};
pub use metrics::RunMetrics;
pub use trace::{EventKind, TraceEvent};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

use crate::cata::{cata_select, utility, CataWeights};
use crate::comms::{build_graph, dcm, CommError, CommGraph};
use crate::energy::{ChargeKind, CommPurpose, EnergyLedger};
use crate::formation::{formation_assign, DistanceMatrix};
use crate::geometry::{euclidean, polygon_vertices, Position};
use crate::needs::{compile_law, settle_queue, PriorityLaw, RobotKey, TaskRanking};
use crate::negotiation::{negotiate, Negotiation, NegotiationError, Payload, Phase};
use crate::routing::{
    cluster_conflicts, detect_conflicts, execute_safely, next_step, resolve_cluster, ConflictQueue,
    Motion, MotionAction, StepOutcome,
};
use crate::scenario::{Scenario, ScenarioError};
use crate::selection::{select_at, SelectionContext};
use crate::world::{RobotId, RobotState, Task, TaskId};

/// A robot counts as on its vertex within this distance.
pub const SLOT_TOLERANCE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobotPhase {
    Idle,
    Selecting,
    Forming,
    Routing,
    AtSlot,
    Dead,
}

impl RobotPhase {
    pub fn name(self) -> &'static str {
        match self {
            RobotPhase::Idle => "idle",
            RobotPhase::Selecting => "selecting",
            RobotPhase::Forming => "forming",
            RobotPhase::Routing => "routing",
            RobotPhase::AtSlot => "at_slot",
            RobotPhase::Dead => "dead",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            RobotPhase::Idle,
            RobotPhase::Selecting,
            RobotPhase::Forming,
            RobotPhase::Routing,
            RobotPhase::AtSlot,
            RobotPhase::Dead,
        ]
        .into_iter()
        .find(|p| p.name() == s)
    }

    /// Whether `self -> next` is a legal transition.
    pub fn can_become(self, next: RobotPhase) -> bool {
        use RobotPhase::*;
        match (self, next) {
            (Dead, _) => false,
            (_, Dead) => true,
            // a new task pulls every robot not yet in place back into selection
            (Idle | Forming | Routing, Selecting) => true,
            (Selecting, Forming | Idle) => true,
            (Forming, Routing | Idle) => true,
            (Routing, AtSlot | Idle) => true,
            (AtSlot, Idle) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Waiting,
    Active,
    Completed,
    TimedOut,
}

/// Why selection runs again.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Reselect {
    /// Free robots top up tasks that lost or never had members.
    Refill,
    /// A task arrived: every robot not yet on its vertex chooses again.
    Preempt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskState {
    pub task: Task,
    pub status: TaskStatus,
    pub vertices: Vec<Position>,
    /// Consecutive ticks with every vertex occupied.
    pub held_for: u64,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("tick {tick}: {source}")]
    Comm {
        tick: u64,
        #[source]
        source: CommError,
    },
    #[error("tick {tick}: {phase:?} negotiation failed: {source}")]
    Negotiation {
        tick: u64,
        phase: Phase,
        #[source]
        source: NegotiationError,
    },
    #[error("task {0} already exists")]
    DuplicateTask(TaskId),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NegotiationStats {
    pub count: u64,
    pub max_iterations: u32,
    /// Negotiations that agreed beyond the first criterion.
    pub escalated: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub trace: Vec<TraceEvent>,
    pub ledger: EnergyLedger,
    pub robots: Vec<RobotState>,
    pub phases: BTreeMap<RobotId, RobotPhase>,
    pub tasks: BTreeMap<TaskId, TaskStatus>,
    pub negotiations: NegotiationStats,
    /// Smallest pairwise distance between live robots seen at any tick end.
    pub min_separation: f64,
    pub detours: u64,
}

pub struct Simulation {
    scenario: Scenario,
    ranking: TaskRanking,
    robots: Vec<RobotState>,
    phases: Vec<RobotPhase>,
    views: BTreeMap<RobotId, Knowledge>,
    tasks: BTreeMap<TaskId, TaskState>,
    ledger: EnergyLedger,
    trace: Vec<TraceEvent>,
    tick: u64,
    clock: u64,
    pending: Option<Reselect>,
    conflicts: u64,
    distance: f64,
    min_separation: f64,
    negotiations: NegotiationStats,
    detours: u64,
}

/// Sort keys for grouped robots as seen in `statuses`.
fn need_keys(
    ids: &[RobotId],
    statuses: &BTreeMap<RobotId, &RobotStatus>,
    tasks: &BTreeMap<TaskId, Task>,
    ranking: &TaskRanking,
    weights: &CataWeights,
    safety_radius: f64,
) -> BTreeMap<RobotId, RobotKey> {
    ids.iter()
        .map(|id| {
            let s = statuses[id];
            let mut key = RobotKey::new(*id, s.battery);
            if let Some(task) = s.group.and_then(|g| tasks.get(&g)) {
                key.task_rank = ranking.rank(task.id);
                let others: Vec<(Position, Position)> = statuses
                    .values()
                    .filter(|o| o.id != *id)
                    .map(|o| (o.pos, o.goal.unwrap_or(o.pos)))
                    .collect();
                key.utility = utility(s.pos, task, &others, weights, safety_radius);
            }
            (*id, key)
        })
        .collect()
}

/// The selection instance a member derives from its view: participating
/// robots, and open tasks with the demand left after the members that stay
/// put, most urgent first, kept only while the participants can cover them.
fn selection_problem(
    view: &Knowledge,
    tick: u64,
    participants: &BTreeSet<RobotId>,
    ranking: &TaskRanking,
) -> (Vec<RobotState>, Vec<Task>) {
    let robots: Vec<RobotState> = view
        .fresh(tick)
        .filter(|s| participants.contains(&s.id))
        .map(RobotStatus::as_state)
        .collect();
    let mut open: Vec<&Task> = view.open_tasks().collect();
    ranking.sorted(&mut open, |t| t.id);
    let mut budget = robots.len();
    let mut tasks = Vec::new();
    for t in open {
        let held = view
            .fresh(tick)
            .filter(|s| s.group == Some(t.id) && !participants.contains(&s.id))
            .count();
        let demand = t.required.saturating_sub(held);
        if demand > 0 && demand <= budget {
            budget -= demand;
            tasks.push(Task {
                required: demand,
                ..t.clone()
            });
        }
    }
    (robots, tasks)
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Self, EngineError> {
        scenario.validate()?;
        let mut robots: Vec<RobotState> = scenario
            .robots
            .iter()
            .map(|r| RobotState::new(r.id, r.pos, r.battery))
            .collect();
        robots.sort_by_key(|r| r.id);
        let phases = robots
            .iter()
            .map(|r| if r.alive { RobotPhase::Idle } else { RobotPhase::Dead })
            .collect();
        let tasks = scenario
            .tasks
            .iter()
            .map(|t| {
                (
                    t.id,
                    TaskState {
                        task: t.clone(),
                        status: TaskStatus::Waiting,
                        vertices: polygon_vertices(t.center, t.required, scenario.formation_radius),
                        held_for: 0,
                    },
                )
            })
            .collect();
        let ranking = TaskRanking::new(
            scenario.tasks.iter().map(|t| t.id),
            scenario.task_priority_order.as_deref(),
        );
        let views = robots.iter().map(|r| (r.id, Knowledge::default())).collect();
        let ledger = EnergyLedger::new(&robots);
        let mut sim = Self {
            scenario,
            ranking,
            robots,
            phases,
            views,
            tasks,
            ledger,
            trace: Vec::new(),
            tick: 0,
            clock: 0,
            pending: None,
            conflicts: 0,
            distance: 0.0,
            min_separation: f64::INFINITY,
            negotiations: NegotiationStats::default(),
            detours: 0,
        };
        sim.track_separation();
        Ok(sim)
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn robots(&self) -> &[RobotState] {
        &self.robots
    }

    pub fn robot(&self, id: RobotId) -> Option<&RobotState> {
        self.index(id).map(|i| &self.robots[i])
    }

    pub fn phase(&self, id: RobotId) -> Option<RobotPhase> {
        self.index(id).map(|i| self.phases[i])
    }

    pub fn task(&self, id: TaskId) -> Option<&TaskState> {
        self.tasks.get(&id)
    }

    pub fn view(&self, id: RobotId) -> Option<&Knowledge> {
        self.views.get(&id)
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn ledger(&self) -> &EnergyLedger {
        &self.ledger
    }

    pub fn is_finished(&self) -> bool {
        let all_closed = !self.tasks.is_empty()
            && self
                .tasks
                .values()
                .all(|t| matches!(t.status, TaskStatus::Completed | TaskStatus::TimedOut));
        all_closed || self.tick >= self.scenario.max_ticks || self.alive_ids().is_empty()
    }

    /// Advance one tick.
    pub fn step(&mut self) -> Result<(), EngineError> {
        self.perceive();
        let arriving: Vec<TaskId> = self
            .tasks
            .values()
            .filter(|t| t.status == TaskStatus::Waiting && t.task.arrival_tick <= self.tick)
            .map(|t| t.task.id)
            .collect();
        for id in arriving {
            self.activate(id);
        }
        self.gossip()?;
        if let Some(mode) = self.pending.take() {
            self.selection(mode)?;
        }
        self.formation()?;
        self.routing()?;
        self.check_tasks();
        self.track_separation();
        self.tick += 1;
        Ok(())
    }

    /// Inject a task right now; every robot not yet holding a vertex is
    /// pulled back into selection.
    pub fn preempt(&mut self, mut task: Task) -> Result<(), EngineError> {
        if self.tasks.contains_key(&task.id) {
            return Err(EngineError::DuplicateTask(task.id));
        }
        task.arrival_tick = self.tick;
        let id = task.id;
        self.tasks.insert(
            id,
            TaskState {
                vertices: polygon_vertices(task.center, task.required, self.scenario.formation_radius),
                task,
                status: TaskStatus::Waiting,
                held_for: 0,
            },
        );
        self.ranking = TaskRanking::new(
            self.tasks.keys().copied(),
            self.scenario.task_priority_order.as_deref(),
        );
        self.perceive();
        self.activate(id);
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<(), EngineError> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(self) -> RunOutput {
        let count = |s: TaskStatus| self.tasks.values().filter(|t| t.status == s).count() as u32;
        let metrics = RunMetrics::collect(
            &self.ledger,
            &self.robots,
            self.conflicts,
            self.distance,
            self.tick,
            count(TaskStatus::Completed),
            count(TaskStatus::TimedOut),
        );
        RunOutput {
            metrics,
            phases: self.robots.iter().map(|r| r.id).zip(self.phases.iter().copied()).collect(),
            tasks: self.tasks.iter().map(|(id, t)| (*id, t.status)).collect(),
            trace: self.trace,
            ledger: self.ledger,
            robots: self.robots,
            negotiations: self.negotiations,
            min_separation: self.min_separation,
            detours: self.detours,
        }
    }

    // ---- bookkeeping ----

    fn index(&self, id: RobotId) -> Option<usize> {
        self.robots.binary_search_by_key(&id, |r| r.id).ok()
    }

    fn alive_ids(&self) -> Vec<RobotId> {
        self.robots.iter().filter(|r| r.alive).map(|r| r.id).collect()
    }

    fn emit(&mut self, kind: EventKind, subjects: Vec<RobotId>, task: Option<TaskId>) -> &mut TraceEvent {
        let seq = self.trace.len() as u64;
        self.trace.push(TraceEvent {
            tick: self.tick,
            seq,
            kind,
            subjects,
            task,
            positions: Vec::new(),
            rounds: None,
            summary: String::new(),
        });
        self.trace.last_mut().expect("just pushed")
    }

    /// Move `ids` to phase `to`, one trace event per source phase.
    fn set_phases(&mut self, ids: &[RobotId], to: RobotPhase) {
        let mut by_source: BTreeMap<&'static str, (RobotPhase, Vec<RobotId>)> = BTreeMap::new();
        for id in ids {
            let ix = self.index(*id).expect("known robot");
            let from = self.phases[ix];
            if from == to || from == RobotPhase::Dead {
                continue;
            }
            debug_assert!(from.can_become(to), "{id}: {from:?} -> {to:?}");
            self.phases[ix] = to;
            by_source.entry(from.name()).or_insert((from, Vec::new())).1.push(*id);
        }
        for (_, (from, who)) in by_source {
            let e = self.emit(EventKind::PhaseChanged, who, None);
            e.summary = format!("{}->{}", from.name(), to.name());
        }
    }

    fn status(&mut self, ix: usize) -> RobotStatus {
        self.clock += 1;
        RobotStatus::of(&self.robots[ix], self.phases[ix], self.tick, self.clock)
    }

    fn request(&mut self, mode: Reselect) {
        self.pending = self.pending.max(Some(mode));
    }

    /// Every live robot refreshes its own entry. Robots that ran low on
    /// battery before reaching their vertex leave their group here.
    fn perceive(&mut self) {
        let threshold = self.scenario.low_battery_threshold;
        for ix in 0..self.robots.len() {
            if !self.robots[ix].alive {
                continue;
            }
            let r = &self.robots[ix];
            if r.group.is_some() && r.battery < threshold && self.phases[ix] != RobotPhase::AtSlot {
                let id = r.id;
                self.robots[ix].release();
                self.set_phases(&[id], RobotPhase::Idle);
                self.request(Reselect::Refill);
            }
            let s = self.status(ix);
            self.views.get_mut(&s.id).expect("view").observe(s);
        }
    }

    /// Make the current state of `among` known to each of them; used once a
    /// plan has been agreed, since every member holds the same plan.
    fn share(&mut self, among: &BTreeSet<RobotId>) {
        let statuses: Vec<RobotStatus> = among
            .iter()
            .filter_map(|id| self.index(*id))
            .collect::<Vec<_>>()
            .into_iter()
            .map(|ix| self.status(ix))
            .collect();
        for id in among {
            let view = self.views.get_mut(id).expect("view");
            for s in &statuses {
                view.observe(s.clone());
            }
        }
    }

    fn charge(&mut self, id: RobotId, kind: ChargeKind, times: u32) {
        let ix = self.index(id).expect("known robot");
        for _ in 0..times {
            if !self.robots[ix].alive {
                break;
            }
            self.ledger.charge(&mut self.robots[ix], kind, &self.scenario.energy);
        }
        if !self.robots[ix].alive && self.phases[ix] != RobotPhase::Dead {
            if self.robots[ix].group.is_some() {
                self.request(Reselect::Refill);
            }
            self.robots[ix].release();
            self.set_phases(&[id], RobotPhase::Dead);
            self.emit(EventKind::RobotDead, vec![id], None);
        }
    }

    fn graph(&self) -> Result<CommGraph, EngineError> {
        let alive: Vec<RobotState> = self.robots.iter().filter(|r| r.alive).cloned().collect();
        build_graph(&alive, self.scenario.comm_range).map_err(|source| EngineError::Comm {
            tick: self.tick,
            source,
        })
    }

    fn track_separation(&mut self) {
        let alive: Vec<Position> = self.robots.iter().filter(|r| r.alive).map(|r| r.pos).collect();
        for (i, a) in alive.iter().enumerate() {
            for b in &alive[i + 1..] {
                self.min_separation = self.min_separation.min(euclidean(*a, *b));
            }
        }
    }

    fn record(&mut self, phase: Phase, group: &BTreeSet<RobotId>, task: Option<TaskId>, n: &Negotiation) {
        self.negotiations.count += 1;
        self.negotiations.max_iterations = self.negotiations.max_iterations.max(n.iterations);
        if n.depth > 0 {
            self.negotiations.escalated += 1;
        }
        let e = self.emit(EventKind::Negotiate, group.iter().copied().collect(), task);
        e.rounds = Some(n.rounds);
        e.summary = format!(
            "{phase:?} iterations={} depth={} exchanges={}",
            n.iterations, n.depth, n.exchanges
        )
        .to_lowercase();
        for id in group {
            self.charge(*id, ChargeKind::CommRound(CommPurpose::Negotiation), n.rounds);
        }
    }

    fn criteria(&self, phase: Phase) -> usize {
        match (phase, self.scenario.law) {
            (Phase::Selection, PriorityLaw::CataU) => compile_law(PriorityLaw::LowE).len(),
            (_, law) => compile_law(law).len(),
        }
    }

    fn negotiation_error(&self, phase: Phase) -> impl Fn(NegotiationError) -> EngineError {
        let tick = self.tick;
        move |source| EngineError::Negotiation { tick, phase, source }
    }

    // ---- tick phases ----

    /// A task becomes active and is first sensed by the nearest live robot.
    fn activate(&mut self, id: TaskId) {
        let Some(state) = self.tasks.get_mut(&id) else {
            return;
        };
        state.status = TaskStatus::Active;
        let task = state.task.clone();
        let finder = self
            .robots
            .iter()
            .filter(|r| r.alive)
            .min_by(|a, b| {
                euclidean(a.pos, task.center)
                    .total_cmp(&euclidean(b.pos, task.center))
                    .then(a.id.cmp(&b.id))
            })
            .map(|r| r.id);
        if let Some(f) = finder {
            self.views.get_mut(&f).expect("view").learn_task(task);
        }
        self.emit(EventKind::TaskArrived, finder.into_iter().collect(), Some(id));
        self.request(Reselect::Preempt);
    }

    /// Status and task gossip across every live robot, while anyone knows
    /// of an open task.
    fn gossip(&mut self) -> Result<(), EngineError> {
        let alive: BTreeSet<RobotId> = self.alive_ids().into_iter().collect();
        let anything_open = alive.iter().any(|id| self.views[id].open_tasks().next().is_some());
        if !anything_open {
            return Ok(());
        }
        let graph = self.graph()?;
        let datagrams: BTreeMap<RobotId, Knowledge> = alive
            .iter()
            .map(|id| {
                let v = &self.views[id];
                let own = Knowledge {
                    robots: v.robots.get(id).map(|s| (*id, s.clone())).into_iter().collect(),
                    tasks: v.tasks.clone(),
                    closed: v.closed.clone(),
                };
                (*id, own)
            })
            .collect();
        let eq = dcm(&datagrams, &graph, &alive).map_err(|source| EngineError::Comm {
            tick: self.tick,
            source,
        })?;
        for (member, ks) in &eq.knowledge {
            let view = self.views.get_mut(member).expect("view");
            for item in ks.items.values() {
                crate::negotiation::View::merge(view, item);
            }
        }
        let e = self.emit(EventKind::Gossip, alive.iter().copied().collect(), None);
        e.rounds = Some(eq.rounds);
        for id in &alive {
            self.charge(*id, ChargeKind::CommRound(CommPurpose::Gossip), eq.rounds);
        }
        Ok(())
    }

    fn selection(&mut self, mode: Reselect) -> Result<(), EngineError> {
        let threshold = self.scenario.low_battery_threshold;
        let participants: BTreeSet<RobotId> = self
            .robots
            .iter()
            .zip(&self.phases)
            .filter(|(r, phase)| {
                r.alive
                    && r.battery >= threshold
                    && match mode {
                        Reselect::Preempt => **phase != RobotPhase::AtSlot,
                        Reselect::Refill => **phase == RobotPhase::Idle,
                    }
            })
            .map(|(r, _)| r.id)
            .collect();
        let Some(first) = participants.first() else {
            return Ok(());
        };
        let (_, tasks) = selection_problem(&self.views[first], self.tick, &participants, &self.ranking);
        if tasks.is_empty() {
            return Ok(());
        }
        let ids: Vec<RobotId> = participants.iter().copied().collect();
        self.set_phases(&ids, RobotPhase::Selecting);
        // the members' own entries now say "selecting"; make that common
        self.share(&participants);

        let graph = self.graph()?;
        let criteria = self.criteria(Phase::Selection);
        let tick = self.tick;
        let sc = &self.scenario;
        let ranking = &self.ranking;
        let planner = |_: RobotId, view: &Knowledge, depth: usize| {
            let (robots, tasks) = selection_problem(view, tick, &participants, ranking);
            let ctx = SelectionContext {
                model: sc.energy,
                step_length: sc.step_length,
                ranking,
            };
            let out = if sc.law == PriorityLaw::CataU {
                cata_select(&robots, &tasks, &ctx, &sc.cata, sc.safety_radius, depth)
            } else {
                select_at(&robots, &tasks, sc.law, &ctx, depth)
            }?;
            Ok::<_, crate::selection::SelectionError>((Payload::Selection(out.plan), out.depth))
        };
        let n = negotiate(Phase::Selection, &participants, &graph, &mut self.views, criteria, planner)
            .map_err(self.negotiation_error(Phase::Selection))?;
        let Payload::Selection(plan) = &n.payload else {
            unreachable!("selection negotiation yields a selection plan")
        };

        let mut forming = Vec::new();
        let mut idle = Vec::new();
        for id in &participants {
            let ix = self.index(*id).expect("known");
            let r = &mut self.robots[ix];
            r.release();
            match plan.task_of(*id) {
                Some(t) => {
                    r.group = Some(t);
                    forming.push(*id);
                }
                None => idle.push(*id),
            }
        }
        let summary: Vec<String> = plan
            .assignment
            .iter()
            .map(|(r, a)| match a {
                crate::selection::Assignment::Task(t) => format!("{r}->{t}"),
                crate::selection::Assignment::Unassigned => format!("{r}->none"),
            })
            .collect();
        self.set_phases(&forming, RobotPhase::Forming);
        self.set_phases(&idle, RobotPhase::Idle);
        self.emit(EventKind::Agree, ids, None).summary = summary.join(" ");
        self.record(Phase::Selection, &participants, None, &n);
        self.share(&participants);
        Ok(())
    }

    fn formation(&mut self) -> Result<(), EngineError> {
        let mut active: Vec<TaskId> = self
            .tasks
            .values()
            .filter(|t| t.status == TaskStatus::Active)
            .map(|t| t.task.id)
            .collect();
        self.ranking.sorted(&mut active, |t| *t);
        for task_id in active {
            let members: BTreeSet<RobotId> = self
                .robots
                .iter()
                .filter(|r| r.alive && r.group == Some(task_id))
                .map(|r| r.id)
                .collect();
            let newcomers = self
                .robots
                .iter()
                .any(|r| members.contains(&r.id) && r.formation_slot.is_none());
            if !newcomers {
                continue;
            }
            let graph = self.graph()?;
            let criteria = self.criteria(Phase::Formation);
            let tick = self.tick;
            let sc = &self.scenario;
            let ranking = &self.ranking;
            let order = compile_law(sc.law);
            let planner = |_: RobotId, view: &Knowledge, depth: usize| {
                let task = view.tasks.get(&task_id).ok_or("task unknown")?;
                let statuses: BTreeMap<RobotId, &RobotStatus> =
                    view.fresh(tick).map(|s| (s.id, s)).collect();
                let group: Vec<&RobotStatus> = statuses
                    .values()
                    .copied()
                    .filter(|s| members.contains(&s.id) && s.group == Some(task_id))
                    .collect();
                let new: Vec<RobotId> =
                    group.iter().filter(|s| s.slot.is_none()).map(|s| s.id).collect();
                let taken: BTreeSet<usize> = group.iter().filter_map(|s| s.slot).collect();
                let keys = need_keys(&new, &statuses, &view.tasks, ranking, &sc.cata, sc.safety_radius);
                let (queue, d) = settle_queue(&new, &keys, &order, depth).map_err(|e| e.to_string())?;
                let free: Vec<(usize, Position)> =
                    polygon_vertices(task.center, task.required, sc.formation_radius)
                        .into_iter()
                        .enumerate()
                        .filter(|(k, _)| !taken.contains(k))
                        .collect();
                let rows: Vec<(RobotId, Position)> =
                    queue.iter().map(|id| (*id, statuses[id].pos)).collect();
                let matrix = DistanceMatrix::build(&rows, &free);
                let plan = formation_assign(task_id, &queue, &matrix).map_err(|e| e.to_string())?;
                Ok::<_, String>((Payload::Formation(plan), d))
            };
            let n = negotiate(Phase::Formation, &members, &graph, &mut self.views, criteria, planner)
                .map_err(self.negotiation_error(Phase::Formation))?;
            let Payload::Formation(plan) = &n.payload else {
                unreachable!("formation negotiation yields a formation plan")
            };
            let vertices = self.tasks[&task_id].vertices.clone();
            let mut routed = Vec::new();
            for (id, v) in &plan.slot_of {
                let ix = self.index(*id).expect("known");
                let r = &mut self.robots[ix];
                r.formation_slot = Some(*v);
                r.path = vec![vertices[*v]];
                routed.push(*id);
            }
            self.set_phases(&routed, RobotPhase::Routing);
            let summary: Vec<String> = plan.slot_of.iter().map(|(r, v)| format!("{r}@{v}")).collect();
            self.emit(EventKind::Agree, routed, Some(task_id)).summary = summary.join(" ");
            self.record(Phase::Formation, &members, Some(task_id), &n);
            self.share(&members);
        }
        Ok(())
    }

    /// Priority order over a conflict cluster as a member would compute it.
    fn cluster_order(
        view_statuses: &BTreeMap<RobotId, &RobotStatus>,
        members: &[RobotId],
        tasks: &BTreeMap<TaskId, Task>,
        ranking: &TaskRanking,
        sc: &Scenario,
        depth: usize,
    ) -> Result<(Vec<RobotId>, usize), String> {
        if let Some(m) = members.iter().find(|m| !view_statuses.contains_key(m)) {
            return Err(format!("no status for {m}"));
        }
        let keys = need_keys(members, view_statuses, tasks, ranking, &sc.cata, sc.safety_radius);
        settle_queue(members, &keys, &compile_law(sc.law), depth).map_err(|e| e.to_string())
    }

    fn routing(&mut self) -> Result<(), EngineError> {
        let step = self.scenario.step_length;
        let radius = self.scenario.safety_radius;
        let mut motions: BTreeMap<RobotId, Motion> = BTreeMap::new();
        let mut movers: BTreeSet<RobotId> = BTreeSet::new();
        for (ix, r) in self.robots.iter().enumerate() {
            if !r.alive {
                continue;
            }
            let m = match (self.phases[ix], r.path.first()) {
                (RobotPhase::Routing, Some(goal)) => Motion {
                    from: r.pos,
                    to: next_step(r.pos, *goal, step),
                },
                _ => Motion::stay(r.pos),
            };
            if m.is_move() {
                movers.insert(r.id);
            }
            motions.insert(r.id, m);
        }

        let pairs = detect_conflicts(&motions, radius);
        let clusters = cluster_conflicts(&pairs, self.tick);
        self.conflicts += clusters.len() as u64;
        for c in &clusters {
            let e = self.emit(EventKind::ConflictDetected, c.members.iter().copied().collect(), None);
            e.summary = format!("{} robots", c.members.len());
        }

        let orders = self.cluster_orders(&clusters, &movers, &pairs)?;

        let in_cluster: BTreeSet<RobotId> =
            clusters.iter().flat_map(|c| c.members.iter().copied()).collect();
        let positions: BTreeMap<RobotId, Position> =
            motions.iter().map(|(id, m)| (*id, m.from)).collect();
        // A cluster winner with no safe step, or one that could only detour,
        // yields to the next mover in the agreed order; this keeps a robot
        // parked in someone's way from being held forever. If nobody in the
        // cluster can go straight, the first detour stands.
        let mut stalled: BTreeSet<RobotId> = BTreeSet::new();
        let mut fallback: BTreeMap<usize, RobotId> = BTreeMap::new();
        let executed = loop {
            let eligible: BTreeSet<RobotId> = movers.difference(&stalled).copied().collect();
            let mut granted: Vec<(RobotId, Motion)> = Vec::new();
            let mut winners = Vec::new();
            for (ci, (c, order)) in clusters.iter().zip(&orders).enumerate() {
                let winner = resolve_cluster(c, order, &eligible)
                    .into_iter()
                    .find(|(_, a)| *a == MotionAction::MoveStep)
                    .map(|(id, _)| id);
                match winner {
                    Some(id) => {
                        granted.push((id, motions[&id]));
                        winners.push((ci, id));
                    }
                    None => {
                        if let Some(id) = fallback.get(&ci) {
                            granted.push((*id, motions[id]));
                        }
                    }
                }
            }
            for id in &movers {
                if !in_cluster.contains(id) {
                    granted.push((*id, motions[id]));
                }
            }
            let executed = execute_safely(&positions, &granted, 2.0 * radius);
            let mut progress = false;
            for (ci, id) in winners {
                let yields = match executed[&id].1 {
                    StepOutcome::Blocked => true,
                    StepOutcome::Detour => {
                        let others = clusters[ci]
                            .members
                            .iter()
                            .any(|m| *m != id && eligible.contains(m));
                        if others {
                            fallback.entry(ci).or_insert(id);
                        }
                        others
                    }
                    _ => false,
                };
                if yields {
                    stalled.insert(id);
                    progress = true;
                }
            }
            if !progress {
                break executed;
            }
        };

        let mut moved = Vec::new();
        let mut moved_to = Vec::new();
        let mut still = Vec::new();
        let mut arrived = Vec::new();
        for (id, (to, outcome)) in &executed {
            let ix = self.index(*id).expect("known");
            if *outcome == StepOutcome::Detour {
                self.detours += 1;
            }
            let r = &mut self.robots[ix];
            let d = euclidean(r.pos, *to);
            r.pos = *to;
            if d > 0.0 {
                self.distance += d;
                moved.push(*id);
                moved_to.push(*to);
            } else {
                still.push(*id);
            }
            if self.phases[ix] == RobotPhase::Routing {
                if let Some(goal) = r.path.first() {
                    if euclidean(r.pos, *goal) <= 1e-9 {
                        r.path.remove(0);
                    }
                }
                if r.path.is_empty() {
                    arrived.push(*id);
                }
            }
        }
        if !moved.is_empty() {
            let e = self.emit(EventKind::Move, moved.clone(), None);
            e.positions = moved_to;
        }
        if !still.is_empty() {
            self.emit(EventKind::Stop, still.clone(), None);
        }
        self.set_phases(&arrived, RobotPhase::AtSlot);
        for id in moved {
            self.charge(id, ChargeKind::Move, 1);
        }
        for id in still {
            self.charge(id, ChargeKind::Idle, 1);
        }
        Ok(())
    }

    /// Agree a priority order for every cluster. With conflict negotiation
    /// on, the conflict lists are first shared among everyone involved and
    /// each cluster then negotiates its order; otherwise the order is read
    /// straight off the robots' states.
    fn cluster_orders(
        &mut self,
        clusters: &[ConflictQueue],
        movers: &BTreeSet<RobotId>,
        pairs: &BTreeSet<(RobotId, RobotId)>,
    ) -> Result<Vec<Vec<RobotId>>, EngineError> {
        let sc = &self.scenario;
        let tasks: BTreeMap<TaskId, Task> =
            self.tasks.iter().map(|(id, t)| (*id, t.task.clone())).collect();
        if !sc.conflict_negotiation {
            let statuses: Vec<RobotStatus> = (0..self.robots.len())
                .filter(|ix| self.robots[*ix].alive)
                .map(|ix| RobotStatus::of(&self.robots[ix], self.phases[ix], self.tick, 0))
                .collect();
            let by_id: BTreeMap<RobotId, &RobotStatus> = statuses.iter().map(|s| (s.id, s)).collect();
            return clusters
                .iter()
                .map(|c| {
                    let members: Vec<RobotId> = c.members.iter().copied().collect();
                    Self::cluster_order(&by_id, &members, &tasks, &self.ranking, sc, 0)
                        .map(|(q, _)| q)
                        .map_err(|e| EngineError::Negotiation {
                            tick: self.tick,
                            phase: Phase::Routing,
                            source: NegotiationError::Planner(e),
                        })
                })
                .collect();
        }
        if movers.is_empty() {
            return Ok(Vec::new());
        }

        // everyone with a pending step, plus anyone they might hit
        let mut group: BTreeSet<RobotId> = movers.clone();
        for c in clusters {
            group.extend(c.members.iter().copied());
        }
        let graph = self.graph()?;
        let datagrams: BTreeMap<RobotId, Vec<(RobotId, RobotId)>> = group
            .iter()
            .map(|id| {
                let mine = pairs.iter().filter(|(a, b)| a == id || b == id).copied().collect();
                (*id, mine)
            })
            .collect();
        let eq = dcm(&datagrams, &graph, &group).map_err(|source| EngineError::Comm {
            tick: self.tick,
            source,
        })?;
        let e = self.emit(EventKind::Negotiate, group.iter().copied().collect(), None);
        e.rounds = Some(eq.rounds);
        e.summary = "conflict lists".into();
        for id in &group {
            self.charge(*id, ChargeKind::CommRound(CommPurpose::Negotiation), eq.rounds);
        }

        let mut orders = Vec::with_capacity(clusters.len());
        for c in clusters {
            let members: BTreeSet<RobotId> =
                c.members.iter().copied().filter(|id| self.index(*id).is_some_and(|ix| self.robots[ix].alive)).collect();
            if members.is_empty() {
                orders.push(Vec::new());
                continue;
            }
            let graph = self.graph()?;
            let criteria = self.criteria(Phase::Routing);
            let tick = self.tick;
            let sc = &self.scenario;
            let ranking = &self.ranking;
            let member_list: Vec<RobotId> = members.iter().copied().collect();
            let planner = |_: RobotId, view: &Knowledge, depth: usize| {
                let statuses: BTreeMap<RobotId, &RobotStatus> =
                    view.fresh(tick).map(|s| (s.id, s)).collect();
                Self::cluster_order(&statuses, &member_list, &view.tasks, ranking, sc, depth)
                    .map(|(q, d)| (Payload::Routing(q), d))
            };
            let n = negotiate(Phase::Routing, &members, &graph, &mut self.views, criteria, planner)
                .map_err(self.negotiation_error(Phase::Routing))?;
            let Payload::Routing(order) = n.payload.clone() else {
                unreachable!("routing negotiation yields an order")
            };
            self.record(Phase::Routing, &members, None, &n);
            orders.push(order);
        }
        Ok(orders)
    }

    fn check_tasks(&mut self) {
        let mut active: Vec<TaskId> = self
            .tasks
            .values()
            .filter(|t| t.status == TaskStatus::Active)
            .map(|t| t.task.id)
            .collect();
        self.ranking.sorted(&mut active, |t| *t);
        for id in active {
            let state = &self.tasks[&id];
            let in_place = self
                .robots
                .iter()
                .enumerate()
                .filter(|(ix, r)| {
                    r.alive
                        && r.group == Some(id)
                        && self.phases[*ix] == RobotPhase::AtSlot
                        && r.formation_slot
                            .is_some_and(|k| euclidean(r.pos, state.vertices[k]) <= SLOT_TOLERANCE)
                })
                .count();
            let full = in_place == state.task.required;
            let state = self.tasks.get_mut(&id).expect("active task");
            state.held_for = if full { state.held_for + 1 } else { 0 };
            let outcome = if full && state.held_for >= state.task.duration {
                Some((TaskStatus::Completed, EventKind::TaskCompleted))
            } else if self.tick - state.task.arrival_tick >= state.task.timeout {
                Some((TaskStatus::TimedOut, EventKind::TaskTimedOut))
            } else {
                None
            };
            let Some((status, kind)) = outcome else {
                continue;
            };
            state.status = status;
            let members: Vec<RobotId> = self
                .robots
                .iter()
                .filter(|r| r.alive && r.group == Some(id))
                .map(|r| r.id)
                .collect();
            for m in &members {
                let ix = self.index(*m).expect("known");
                self.robots[ix].release();
                self.views.get_mut(m).expect("view").closed.insert(id);
            }
            self.set_phases(&members, RobotPhase::Idle);
            self.emit(kind, members, Some(id));
            self.request(Reselect::Refill);
        }
    }
}

/// Run a scenario to completion.
pub fn run(scenario: &Scenario) -> Result<RunOutput, EngineError> {
    let mut sim = Simulation::new(scenario.clone())?;
    sim.run_to_end()?;
    Ok(sim.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_transitions() {
        use RobotPhase::*;
        assert!(Idle.can_become(Selecting));
        assert!(Selecting.can_become(Forming));
        assert!(Forming.can_become(Routing));
        assert!(Routing.can_become(AtSlot));
        assert!(Routing.can_become(Selecting));
        assert!(AtSlot.can_become(Idle));
        assert!(Routing.can_become(Dead));
        assert!(!AtSlot.can_become(Selecting));
        assert!(!Idle.can_become(Routing));
        assert!(!Dead.can_become(Idle));
        for p in [Idle, Selecting, Forming, Routing, AtSlot, Dead] {
            assert_eq!(RobotPhase::from_name(p.name()), Some(p));
        }
    }
}
