//! Scenario documents: everything a run needs, read from JSON.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use thiserror::Error;

use crate::cata::CataWeights;
use crate::comms::CommRange;
use crate::energy::EnergyModel;
use crate::geometry::{euclidean, Position};
use crate::needs::PriorityLaw;
use crate::world::{RobotId, Task, TaskId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotSpec {
    pub id: RobotId,
    pub pos: Position,
    pub battery: f64,
}

fn default_step() -> f64 {
    1.0
}
fn default_safety() -> f64 {
    0.5
}
fn default_formation() -> f64 {
    5.0
}
fn default_max_ticks() -> u64 {
    10_000
}
fn default_true() -> bool {
    true
}
fn default_low_battery() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub world_size: f64,
    pub robots: Vec<RobotSpec>,
    pub tasks: Vec<Task>,
    pub law: PriorityLaw,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_priority_order: Option<Vec<TaskId>>,
    #[serde(default)]
    pub comm_range: CommRange,
    #[serde(default)]
    pub energy: EnergyModel,
    #[serde(default = "default_step")]
    pub step_length: f64,
    #[serde(default = "default_safety")]
    pub safety_radius: f64,
    #[serde(default = "default_formation")]
    pub formation_radius: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_ticks")]
    pub max_ticks: u64,
    #[serde(default)]
    pub cata: CataWeights,
    /// Negotiate routing conflicts over the network (and pay for it). When
    /// off, conflicts are still resolved by the same priority rule.
    #[serde(default = "default_true")]
    pub conflict_negotiation: bool,
    /// Robots below this battery percent withdraw from selection.
    #[serde(default = "default_low_battery")]
    pub low_battery_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
}

impl Scenario {
    /// Minimal scenario with defaults everywhere else.
    pub fn new(world_size: f64, robots: Vec<RobotSpec>, tasks: Vec<Task>, law: PriorityLaw) -> Self {
        Self {
            world_size,
            robots,
            tasks,
            law,
            task_priority_order: None,
            comm_range: CommRange::Complete,
            energy: EnergyModel::default(),
            step_length: default_step(),
            safety_radius: default_safety(),
            formation_radius: default_formation(),
            seed: 0,
            max_ticks: default_max_ticks(),
            cata: CataWeights::default(),
            conflict_negotiation: true,
            low_battery_threshold: default_low_battery(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut errs = Vec::new();
        let mut err = |field: String, message: String| errs.push(FieldError { field, message });

        if !(self.world_size.is_finite() && self.world_size > 0.0) {
            err("world_size".into(), "must be positive".into());
        }
        for (name, v) in [
            ("step_length", self.step_length),
            ("safety_radius", self.safety_radius),
            ("formation_radius", self.formation_radius),
        ] {
            if !(v.is_finite() && v > 0.0) {
                err(name.into(), "must be positive".into());
            }
        }
        if !self.energy.is_valid() {
            err("energy".into(), "costs must be finite and non-negative".into());
        }
        if !(self.low_battery_threshold.is_finite() && self.low_battery_threshold >= 0.0) {
            err("low_battery_threshold".into(), "must be non-negative".into());
        }
        if let CommRange::Range(r) = self.comm_range {
            if !(r.is_finite() && r > 0.0) {
                err("comm_range".into(), "must be positive or \"complete\"".into());
            }
        }
        if ![self.cata.base, self.cata.w_d, self.cata.w_c].iter().all(|w| w.is_finite() && *w > 0.0) {
            err("cata".into(), "weights must be positive".into());
        }
        if self.robots.is_empty() {
            err("robots".into(), "at least one robot is required".into());
        }

        let mut ids = BTreeSet::new();
        for (i, r) in self.robots.iter().enumerate() {
            if !ids.insert(r.id) {
                err(format!("robots[{i}].id"), format!("duplicate id {}", r.id.0));
            }
            if !r.pos.is_finite() || !self.in_bounds(r.pos) {
                err(format!("robots[{i}].pos"), "outside the world".into());
            }
            if !(0.0..=100.0).contains(&r.battery) {
                err(format!("robots[{i}].battery"), "must be within [0, 100]".into());
            }
        }
        let min_sep = 2.0 * self.safety_radius;
        for (i, a) in self.robots.iter().enumerate() {
            for b in &self.robots[i + 1..] {
                if euclidean(a.pos, b.pos) < min_sep {
                    err(
                        "robots".into(),
                        format!("{} and {} start closer than {min_sep} m", a.id, b.id),
                    );
                }
            }
        }

        let mut task_ids = BTreeSet::new();
        let mut last_arrival = 0;
        for (i, t) in self.tasks.iter().enumerate() {
            if !task_ids.insert(t.id) {
                err(format!("tasks[{i}].id"), format!("duplicate id {}", t.id.0));
            }
            if !t.center.is_finite() || !self.in_bounds(t.center) {
                err(format!("tasks[{i}].center"), "outside the world".into());
            }
            if t.required == 0 {
                err(format!("tasks[{i}].required"), "must be at least 1".into());
            }
            if t.required > self.robots.len() {
                err(format!("tasks[{i}].required"), "exceeds the number of robots".into());
            }
            if t.duration > t.timeout {
                err(format!("tasks[{i}].duration"), "exceeds timeout".into());
            }
            if t.arrival_tick < last_arrival {
                err(format!("tasks[{i}].arrival_tick"), "arrival ticks must not decrease".into());
            }
            last_arrival = t.arrival_tick;
            if t.required >= 2 {
                let side = 2.0 * self.formation_radius * (std::f64::consts::PI / t.required as f64).sin();
                if side < min_sep {
                    err(
                        format!("tasks[{i}].required"),
                        format!("polygon side {side:.3} m is below the {min_sep} m separation"),
                    );
                }
            }
        }
        if let Some(order) = &self.task_priority_order {
            let listed: BTreeSet<TaskId> = order.iter().copied().collect();
            if listed.len() != order.len() || listed != task_ids {
                err("task_priority_order".into(), "must be a permutation of the task ids".into());
            }
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(errs))
        }
    }

    fn in_bounds(&self, p: Position) -> bool {
        (0.0..=self.world_size).contains(&p.x) && (0.0..=self.world_size).contains(&p.y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Scenario {
        Scenario::new(
            50.0,
            vec![
                RobotSpec { id: RobotId(0), pos: Position::new(1.0, 1.0), battery: 90.0 },
                RobotSpec { id: RobotId(1), pos: Position::new(3.0, 1.0), battery: 80.0 },
            ],
            vec![Task {
                id: TaskId(1),
                center: Position::new(20.0, 20.0),
                required: 2,
                duration: 5,
                timeout: 200,
                arrival_tick: 0,
            }],
            PriorityLaw::LowE,
        )
    }

    #[test]
    fn valid_sample_round_trips() {
        let s = sample();
        s.validate().unwrap();
        let back = Scenario::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn defaults_fill_in() {
        let text = r#"{
            "world_size": 10,
            "robots": [{"id": 0, "pos": {"x": 1, "y": 1}, "battery": 50}],
            "tasks": [],
            "law": "t_low_e"
        }"#;
        let s = Scenario::from_json(text).unwrap();
        assert_eq!(s.law, PriorityLaw::TPlusLowE);
        assert_eq!(s.comm_range, CommRange::Complete);
        assert_eq!(s.max_ticks, 10_000);
        assert_eq!(s.formation_radius, 5.0);
        assert!(s.conflict_negotiation);
    }

    #[test]
    fn reports_every_bad_field() {
        let mut s = sample();
        s.robots[1].id = RobotId(0);
        s.robots[1].battery = 120.0;
        s.tasks[0].duration = 500;
        s.task_priority_order = Some(vec![TaskId(7)]);
        let Err(ScenarioError::Invalid(errs)) = s.validate() else {
            panic!("expected invalid");
        };
        let fields: Vec<&str> = errs.iter().map(|e| e.field.as_str()).collect();
        assert!(fields.contains(&"robots[1].id"));
        assert!(fields.contains(&"robots[1].battery"));
        assert!(fields.contains(&"tasks[0].duration"));
        assert!(fields.contains(&"task_priority_order"));
    }

    #[test]
    fn crowded_start_and_tight_polygon_are_rejected() {
        let mut s = sample();
        s.robots[1].pos = Position::new(1.5, 1.0);
        s.formation_radius = 0.2;
        let Err(ScenarioError::Invalid(errs)) = s.validate() else {
            panic!("expected invalid");
        };
        assert!(errs.iter().any(|e| e.message.contains("start closer")));
        assert!(errs.iter().any(|e| e.message.contains("polygon side")));
    }

    #[test]
    fn unknown_law_fails_to_parse() {
        let text = r#"{"world_size": 10, "robots": [], "tasks": [], "law": "fastest"}"#;
        assert!(matches!(Scenario::from_json(text), Err(ScenarioError::Parse(_))));
    }
}
