//! Robot and task records shared across planners and the engine.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::geometry::Position;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct RobotId(pub u32);

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TaskId(pub u32);

impl fmt::Display for RobotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R{}", self.0)
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

/// Physical and assignment state of one robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub id: RobotId,
    pub pos: Position,
    /// Percent, 0..=100.
    pub battery: f64,
    pub group: Option<TaskId>,
    pub formation_slot: Option<usize>,
    /// Remaining waypoints; the last one is the formation vertex.
    pub path: Vec<Position>,
    pub alive: bool,
}

impl RobotState {
    pub fn new(id: RobotId, pos: Position, battery: f64) -> Self {
        Self {
            id,
            pos,
            battery,
            group: None,
            formation_slot: None,
            path: Vec::new(),
            alive: battery > 0.0,
        }
    }

    /// Drop group, slot and path.
    pub fn release(&mut self) {
        self.group = None;
        self.formation_slot = None;
        self.path.clear();
    }
}

/// A task to be surrounded by `required` robots in a regular polygon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub center: Position,
    pub required: usize,
    /// Consecutive ticks the full formation has to be held.
    pub duration: u64,
    /// Ticks after arrival before the task is abandoned.
    pub timeout: u64,
    #[serde(default)]
    pub arrival_tick: u64,
}
