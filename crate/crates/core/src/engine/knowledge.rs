//! What a robot believes about its peers and the open tasks.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::geometry::Position;
use crate::negotiation::View;
use crate::world::{RobotId, RobotState, Task, TaskId};

use super::RobotPhase;

/// A robot's self-report. `tick` is when it was taken; `stamp` orders reports
/// taken within the same tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotStatus {
    pub id: RobotId,
    pub pos: Position,
    pub battery: f64,
    pub group: Option<TaskId>,
    pub slot: Option<usize>,
    pub goal: Option<Position>,
    pub phase: RobotPhase,
    pub tick: u64,
    pub stamp: u64,
}

impl RobotStatus {
    pub fn of(robot: &RobotState, phase: RobotPhase, tick: u64, stamp: u64) -> Self {
        Self {
            id: robot.id,
            pos: robot.pos,
            battery: robot.battery,
            group: robot.group,
            slot: robot.formation_slot,
            goal: robot.path.last().copied(),
            phase,
            tick,
            stamp,
        }
    }

    /// Rebuild the state a planner works from.
    pub fn as_state(&self) -> RobotState {
        let mut r = RobotState::new(self.id, self.pos, self.battery);
        r.alive = true;
        r.group = self.group;
        r.formation_slot = self.slot;
        r.path = self.goal.into_iter().collect();
        r
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Knowledge {
    pub robots: BTreeMap<RobotId, RobotStatus>,
    pub tasks: BTreeMap<TaskId, Task>,
    /// Tasks known to be finished or abandoned.
    pub closed: BTreeSet<TaskId>,
}

impl Knowledge {
    pub fn observe(&mut self, status: RobotStatus) {
        self.robots.insert(status.id, status);
    }

    pub fn learn_task(&mut self, task: Task) {
        self.tasks.entry(task.id).or_insert(task);
    }

    /// Statuses heard at `tick`.
    pub fn fresh(&self, tick: u64) -> impl Iterator<Item = &RobotStatus> {
        self.robots.values().filter(move |s| s.tick == tick)
    }

    /// Known tasks not yet closed.
    pub fn open_tasks(&self) -> impl Iterator<Item = &Task> {
        self.tasks.values().filter(|t| !self.closed.contains(&t.id))
    }
}

fn encode(s: &RobotStatus) -> Vec<u8> {
    serde_json::to_vec(s).expect("status serializes")
}

impl View for Knowledge {
    fn merge(&mut self, other: &Self) -> bool {
        let mut changed = false;
        for (id, s) in &other.robots {
            // same-stamp disagreements resolve to the larger encoding so that
            // repeated merging converges
            let newer = self.robots.get(id).is_none_or(|mine| {
                s.stamp > mine.stamp
                    || (s.stamp == mine.stamp && encode(s) > encode(mine))
            });
            if newer {
                self.robots.insert(*id, s.clone());
                changed = true;
            }
        }
        for (id, t) in &other.tasks {
            if !self.tasks.contains_key(id) {
                self.tasks.insert(*id, t.clone());
                changed = true;
            }
        }
        for id in &other.closed {
            changed |= self.closed.insert(*id);
        }
        changed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn status(id: u32, stamp: u64, battery: f64) -> RobotStatus {
        let r = RobotState::new(RobotId(id), Position::new(id as f64, 0.0), battery);
        RobotStatus::of(&r, RobotPhase::Idle, 0, stamp)
    }

    #[test]
    fn merge_prefers_newer_reports_and_unions_tasks() {
        let mut a = Knowledge::default();
        a.observe(status(1, 5, 50.0));
        let mut b = Knowledge::default();
        b.observe(status(1, 4, 60.0));
        b.observe(status(2, 4, 70.0));
        b.learn_task(Task {
            id: TaskId(3),
            center: Position::new(0.0, 0.0),
            required: 1,
            duration: 1,
            timeout: 10,
            arrival_tick: 0,
        });
        assert!(a.merge(&b));
        assert_eq!(a.robots[&RobotId(1)].battery, 50.0);
        assert_eq!(a.robots[&RobotId(2)].battery, 70.0);
        assert!(a.tasks.contains_key(&TaskId(3)));
        assert!(!a.merge(&b));
    }

    #[test]
    fn same_stamp_disagreement_converges() {
        let mut a = Knowledge::default();
        a.observe(status(1, 5, 50.0));
        let mut b = Knowledge::default();
        b.observe(status(1, 5, 60.0));
        let (a0, b0) = (a.clone(), b.clone());
        a.merge(&b0);
        b.merge(&a0);
        assert_eq!(a, b);
        assert!(!a.merge(&b));
    }
}
