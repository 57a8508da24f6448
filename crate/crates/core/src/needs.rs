//! Robot needs hierarchy compiled into deterministic priority queues.
//!
//! Safety is enforced as a veto during routing, never as a sort key. Energy
//! (basic needs) and task rank (capability) become lexicographic criteria;
//! robot id closes every queue so the order is always total.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use crate::world::{RobotId, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NeedLevel {
    Safety = 1,
    Basic = 2,
    Capability = 3,
    Team = 4,
    SelfUpgrade = 5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorityLaw {
    HighE,
    LowE,
    #[serde(rename = "t_high_e")]
    TPlusHighE,
    #[serde(rename = "t_low_e")]
    TPlusLowE,
    CataU,
}

impl PriorityLaw {
    pub const ALL: [PriorityLaw; 5] = [
        PriorityLaw::HighE,
        PriorityLaw::LowE,
        PriorityLaw::TPlusHighE,
        PriorityLaw::TPlusLowE,
        PriorityLaw::CataU,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PriorityLaw::HighE => "high_e",
            PriorityLaw::LowE => "low_e",
            PriorityLaw::TPlusHighE => "t_high_e",
            PriorityLaw::TPlusLowE => "t_low_e",
            PriorityLaw::CataU => "cata_u",
        }
    }
}

impl fmt::Display for PriorityLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PriorityLaw {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PriorityLaw::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| format!("unknown priority law `{s}` (expected high_e, low_e, t_high_e, t_low_e or cata_u)"))
    }
}

/// A single sort key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    BatteryAscending,
    BatteryDescending,
    TaskRankAscending,
    UtilityDescending,
    IdAscending,
}

impl Criterion {
    pub fn level(&self) -> Option<NeedLevel> {
        match self {
            Criterion::BatteryAscending | Criterion::BatteryDescending => Some(NeedLevel::Basic),
            Criterion::TaskRankAscending => Some(NeedLevel::Capability),
            Criterion::UtilityDescending => Some(NeedLevel::Team),
            Criterion::IdAscending => None,
        }
    }

    fn compare(&self, a: &RobotKey, b: &RobotKey) -> Ordering {
        match self {
            Criterion::BatteryAscending => a.battery.total_cmp(&b.battery),
            Criterion::BatteryDescending => b.battery.total_cmp(&a.battery),
            Criterion::TaskRankAscending => a.task_rank.cmp(&b.task_rank),
            Criterion::UtilityDescending => b.utility.total_cmp(&a.utility),
            Criterion::IdAscending => a.id.cmp(&b.id),
        }
    }
}

/// Ordered criteria; the last one is always [`Criterion::IdAscending`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeedsOrderQueue(Vec<Criterion>);

impl NeedsOrderQueue {
    pub fn new(mut criteria: Vec<Criterion>) -> Self {
        criteria.retain(|c| *c != Criterion::IdAscending);
        criteria.push(Criterion::IdAscending);
        Self(criteria)
    }

    pub fn criteria(&self) -> &[Criterion] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn compile_law(law: PriorityLaw) -> NeedsOrderQueue {
    use Criterion::*;
    NeedsOrderQueue::new(match law {
        PriorityLaw::HighE => vec![BatteryDescending],
        PriorityLaw::LowE => vec![BatteryAscending],
        PriorityLaw::TPlusHighE => vec![TaskRankAscending, BatteryDescending],
        PriorityLaw::TPlusLowE => vec![TaskRankAscending, BatteryAscending],
        PriorityLaw::CataU => vec![UtilityDescending, BatteryAscending],
    })
}

/// Per-robot data the criteria read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotKey {
    pub id: RobotId,
    pub battery: f64,
    /// Rank of the task the robot is tied to; `u32::MAX` when none.
    pub task_rank: u32,
    pub utility: f64,
}

impl RobotKey {
    pub fn new(id: RobotId, battery: f64) -> Self {
        Self {
            id,
            battery,
            task_rank: u32::MAX,
            utility: 0.0,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NeedsError {
    #[error("criterion depth {depth} exhausts a queue of {len} criteria")]
    ExhaustedCriteria { depth: usize, len: usize },
    #[error("no key data for {0}")]
    MissingKey(RobotId),
}

fn compare_upto(order: &NeedsOrderQueue, depth: usize, a: &RobotKey, b: &RobotKey) -> Ordering {
    order.0[..=depth]
        .iter()
        .map(|c| c.compare(a, b))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn collect_keys(
    candidates: &[RobotId],
    keys: &BTreeMap<RobotId, RobotKey>,
) -> Result<Vec<RobotKey>, NeedsError> {
    let unique: BTreeSet<RobotId> = candidates.iter().copied().collect();
    unique
        .into_iter()
        .map(|id| keys.get(&id).copied().ok_or(NeedsError::MissingKey(id)))
        .collect()
}

/// Order `candidates` by `order[0..=depth]`, falling back to id.
pub fn sort_queue(
    candidates: &[RobotId],
    keys: &BTreeMap<RobotId, RobotKey>,
    order: &NeedsOrderQueue,
    depth: usize,
) -> Result<Vec<RobotId>, NeedsError> {
    if depth >= order.len() {
        return Err(NeedsError::ExhaustedCriteria {
            depth,
            len: order.len(),
        });
    }
    let mut rows = collect_keys(candidates, keys)?;
    rows.sort_by(|a, b| compare_upto(order, depth, a, b).then(a.id.cmp(&b.id)));
    Ok(rows.into_iter().map(|k| k.id).collect())
}

/// Escalate from `min_depth` through the criteria until the queue has no
/// ties, returning the queue and the depth at which it became unique.
pub fn settle_queue(
    candidates: &[RobotId],
    keys: &BTreeMap<RobotId, RobotKey>,
    order: &NeedsOrderQueue,
    min_depth: usize,
) -> Result<(Vec<RobotId>, usize), NeedsError> {
    if min_depth >= order.len() {
        return Err(NeedsError::ExhaustedCriteria {
            depth: min_depth,
            len: order.len(),
        });
    }
    let rows = collect_keys(candidates, keys)?;
    for depth in min_depth..order.len() {
        let mut sorted = rows.clone();
        sorted.sort_by(|a, b| compare_upto(order, depth, a, b).then(a.id.cmp(&b.id)));
        let unique = sorted
            .windows(2)
            .all(|w| compare_upto(order, depth, &w[0], &w[1]).is_ne());
        if unique {
            return Ok((sorted.into_iter().map(|k| k.id).collect(), depth));
        }
    }
    unreachable!("id criterion always separates distinct robots")
}

/// Task priority ranks: 0 is the most urgent.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TaskRanking {
    ranks: BTreeMap<TaskId, u32>,
}

impl TaskRanking {
    /// Explicit order first, then any remaining tasks by ascending id.
    pub fn new(tasks: impl IntoIterator<Item = TaskId>, explicit: Option<&[TaskId]>) -> Self {
        let all: BTreeSet<TaskId> = tasks.into_iter().collect();
        let mut ordered: Vec<TaskId> = explicit
            .unwrap_or_default()
            .iter()
            .copied()
            .filter(|t| all.contains(t))
            .collect();
        let listed: BTreeSet<TaskId> = ordered.iter().copied().collect();
        ordered.extend(all.iter().copied().filter(|t| !listed.contains(t)));
        Self {
            ranks: ordered.into_iter().zip(0u32..).collect(),
        }
    }

    pub fn rank(&self, task: TaskId) -> u32 {
        self.ranks.get(&task).copied().unwrap_or(u32::MAX - 1)
    }

    /// Tasks sorted most urgent first.
    pub fn sorted<T: Copy>(&self, tasks: &mut [T], id_of: impl Fn(&T) -> TaskId) {
        tasks.sort_by_key(|t| (self.rank(id_of(t)), id_of(t)));
    }
}
