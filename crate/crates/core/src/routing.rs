//! Per-tick motion: straight-line steps, conflict detection and clustering,
//! priority resolution, and the separation veto that keeps every executed
//! step collision free.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::geometry::{euclidean, segment_distance, Position};
use crate::world::RobotId;

/// Slack added to the separation threshold when vetting a step, so rounding
/// in the segment test cannot let an endpoint land a hair inside the limit.
pub const SEPARATION_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MotionAction {
    MoveStep,
    Stop,
}

/// Robots whose planned steps are linked by conflicts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictQueue {
    pub members: BTreeSet<RobotId>,
    pub tick: u64,
}

/// A robot's current position and the position it intends to reach this tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Motion {
    pub from: Position,
    pub to: Position,
}

impl Motion {
    pub fn stay(at: Position) -> Self {
        Self { from: at, to: at }
    }

    pub fn is_move(&self) -> bool {
        self.from != self.to
    }
}

/// Advance `step_length` toward `goal`, landing exactly on it when closer.
pub fn next_step(pos: Position, goal: Position, step_length: f64) -> Position {
    let d = euclidean(pos, goal);
    if d <= step_length {
        return goal;
    }
    let k = step_length / d;
    Position::new(pos.x + (goal.x - pos.x) * k, pos.y + (goal.y - pos.y) * k)
}

/// Pairs whose end positions are closer than `2 * safety_radius`, or whose
/// swept segments come that close.
pub fn detect_conflicts(
    proposed: &BTreeMap<RobotId, Motion>,
    safety_radius: f64,
) -> BTreeSet<(RobotId, RobotId)> {
    let limit = 2.0 * safety_radius;
    let entries: Vec<(&RobotId, &Motion)> = proposed.iter().collect();
    let mut pairs = BTreeSet::new();
    for (i, (a, ma)) in entries.iter().enumerate() {
        for (b, mb) in &entries[i + 1..] {
            if !ma.is_move() && !mb.is_move() {
                continue;
            }
            let end = euclidean(ma.to, mb.to);
            if end < limit || segment_distance(ma.from, ma.to, mb.from, mb.to) < limit {
                pairs.insert((**a, **b));
            }
        }
    }
    pairs
}

struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        if self.rank[a] < self.rank[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        if self.rank[a] == self.rank[b] {
            self.rank[a] += 1;
        }
    }
}

/// Connected components of the conflict relation, ordered by smallest member.
pub fn cluster_conflicts(pairs: &BTreeSet<(RobotId, RobotId)>, tick: u64) -> Vec<ConflictQueue> {
    let nodes: Vec<RobotId> = pairs
        .iter()
        .flat_map(|(a, b)| [*a, *b])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<RobotId, usize> = nodes.iter().enumerate().map(|(i, r)| (*r, i)).collect();
    let mut sets = DisjointSet::new(nodes.len());
    for (a, b) in pairs {
        sets.union(index[a], index[b]);
    }
    let mut groups: BTreeMap<usize, BTreeSet<RobotId>> = BTreeMap::new();
    for (i, r) in nodes.iter().enumerate() {
        groups.entry(sets.find(i)).or_default().insert(*r);
    }
    let mut out: Vec<ConflictQueue> = groups
        .into_values()
        .map(|members| ConflictQueue { members, tick })
        .collect();
    out.sort_by_key(|q| *q.members.iter().next().expect("nonempty"));
    out
}

/// The first robot in `order` that still has somewhere to go moves; every
/// other member stops this tick.
///
/// `order` is the agreed priority queue over the cluster and `movers` the
/// members with a pending step.
pub fn resolve_cluster(
    cluster: &ConflictQueue,
    order: &[RobotId],
    movers: &BTreeSet<RobotId>,
) -> BTreeMap<RobotId, MotionAction> {
    let winner = order
        .iter()
        .find(|r| cluster.members.contains(r) && movers.contains(r));
    cluster
        .members
        .iter()
        .map(|r| {
            let action = if Some(r) == winner {
                MotionAction::MoveStep
            } else {
                MotionAction::Stop
            };
            (*r, action)
        })
        .collect()
}

/// How a granted step was finally carried out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepOutcome {
    Straight,
    /// Straight step vetoed; moved along a rotated heading instead.
    Detour,
    /// No safe step existed; stayed put.
    Blocked,
    /// Not granted a move.
    Held,
}

/// Headings tried when the straight step is vetoed, in degrees relative to
/// the goal direction (negative is clockwise).
const DETOUR_ANGLES: [f64; 10] = [
    -30.0, -60.0, -90.0, 30.0, 60.0, 90.0, -120.0, 120.0, -150.0, 150.0,
];

/// Turn granted moves into executed positions without ever placing two
/// robots closer than `min_separation`.
///
/// `granted` lists moving robots in processing order with their planned step;
/// everyone else in `positions` stays put. A granted robot whose straight step
/// would violate separation tries the detour headings and otherwise stops.
/// Safety holds provided the starting positions already respect the limit.
pub fn execute_safely(
    positions: &BTreeMap<RobotId, Position>,
    granted: &[(RobotId, Motion)],
    min_separation: f64,
) -> BTreeMap<RobotId, (Position, StepOutcome)> {
    let limit = min_separation + SEPARATION_SLACK;
    let moving: BTreeSet<RobotId> = granted.iter().map(|(r, _)| *r).collect();
    // robots whose segment is final
    let mut decided: BTreeMap<RobotId, (Position, Position)> = positions
        .iter()
        .filter(|(r, _)| !moving.contains(r))
        .map(|(r, p)| (*r, (*p, *p)))
        .collect();
    let mut out: BTreeMap<RobotId, (Position, StepOutcome)> = decided
        .iter()
        .map(|(r, (p, _))| (*r, (*p, StepOutcome::Held)))
        .collect();
    let mut pending: BTreeSet<RobotId> = moving.clone();

    for (id, motion) in granted {
        pending.remove(id);
        let safe = |to: Position| {
            decided
                .iter()
                .all(|(_, (a, b))| segment_distance(motion.from, to, *a, *b) >= limit)
                && pending.iter().all(|other| {
                    let p = positions[other];
                    crate::geometry::point_segment_distance(p, motion.from, to) >= limit
                })
        };
        let step = euclidean(motion.from, motion.to);
        let (to, outcome) = if safe(motion.to) {
            (motion.to, StepOutcome::Straight)
        } else {
            let heading = (motion.to.y - motion.from.y).atan2(motion.to.x - motion.from.x);
            DETOUR_ANGLES
                .iter()
                .map(|deg| {
                    let a = heading + deg.to_radians();
                    motion.from.translate(step * a.cos(), step * a.sin())
                })
                .find(|p| safe(*p))
                .map_or((motion.from, StepOutcome::Blocked), |p| (p, StepOutcome::Detour))
        };
        decided.insert(*id, (motion.from, to));
        out.insert(*id, (to, outcome));
    }
    out
}
