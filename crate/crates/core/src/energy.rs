//! Battery costs and the per-robot energy ledger.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::world::{RobotId, RobotState, TaskId};

/// Percent of battery spent per action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    /// Per tick spent moving.
    pub move_cost: f64,
    /// Per synchronous communication round.
    pub comm_cost: f64,
    /// Per tick spent stationary.
    pub idle_cost: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self {
            move_cost: 0.1,
            comm_cost: 0.01,
            idle_cost: 0.04,
        }
    }
}

impl EnergyModel {
    pub fn is_valid(&self) -> bool {
        [self.move_cost, self.comm_cost, self.idle_cost]
            .iter()
            .all(|c| c.is_finite() && *c >= 0.0)
    }
}

/// Which communication budget a round is booked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CommPurpose {
    /// Knowledge sharing before planning.
    Gossip,
    /// Plan exchange while negotiating an agreement.
    Negotiation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChargeKind {
    Move,
    Idle,
    CommRound(CommPurpose),
}

/// Result of a single charge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Charge {
    /// Amount actually deducted (may be less than the cost when clamped at zero).
    Applied(f64),
    /// The robot was already dead.
    Dropped,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RobotEnergy {
    pub initial: f64,
    pub moving: f64,
    pub idle: f64,
    pub comm_gossip: f64,
    pub comm_negotiation: f64,
    pub dropped_actions: u64,
}

impl RobotEnergy {
    pub fn comm(&self) -> f64 {
        self.comm_gossip + self.comm_negotiation
    }

    pub fn spent(&self) -> f64 {
        self.moving + self.idle + self.comm()
    }
}

/// Accumulates every deduction so battery drain can be audited afterwards.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub robots: BTreeMap<RobotId, RobotEnergy>,
    pub per_task_comm: BTreeMap<TaskId, f64>,
}

impl EnergyLedger {
    pub fn new<'a>(robots: impl IntoIterator<Item = &'a RobotState>) -> Self {
        let robots = robots
            .into_iter()
            .map(|r| {
                (
                    r.id,
                    RobotEnergy {
                        initial: r.battery,
                        ..Default::default()
                    },
                )
            })
            .collect();
        Self {
            robots,
            per_task_comm: BTreeMap::new(),
        }
    }

    /// Deduct the cost of `kind` from `robot`, clamping at zero.
    ///
    /// A robot whose battery reaches zero is marked dead. Charging a dead robot
    /// changes nothing except the dropped-action counter.
    pub fn charge(&mut self, robot: &mut RobotState, kind: ChargeKind, model: &EnergyModel) -> Charge {
        let entry = self.robots.entry(robot.id).or_insert_with(|| RobotEnergy {
            initial: robot.battery,
            ..Default::default()
        });
        if !robot.alive {
            entry.dropped_actions += 1;
            return Charge::Dropped;
        }
        let cost = match kind {
            ChargeKind::Move => model.move_cost,
            ChargeKind::Idle => model.idle_cost,
            ChargeKind::CommRound(_) => model.comm_cost,
        };
        let amount = cost.min(robot.battery);
        robot.battery -= amount;
        if robot.battery <= 0.0 {
            robot.battery = 0.0;
            robot.alive = false;
        }
        match kind {
            ChargeKind::Move => entry.moving += amount,
            ChargeKind::Idle => entry.idle += amount,
            ChargeKind::CommRound(CommPurpose::Gossip) => entry.comm_gossip += amount,
            ChargeKind::CommRound(CommPurpose::Negotiation) => entry.comm_negotiation += amount,
        }
        if let (ChargeKind::CommRound(_), Some(task)) = (kind, robot.group) {
            *self.per_task_comm.entry(task).or_insert(0.0) += amount;
        }
        Charge::Applied(amount)
    }

    /// Largest |initial - current - spent| over the given robots.
    pub fn conservation_error<'a>(&self, robots: impl IntoIterator<Item = &'a RobotState>) -> f64 {
        robots
            .into_iter()
            .map(|r| match self.robots.get(&r.id) {
                Some(e) => (e.initial - r.battery - e.spent()).abs(),
                None => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }

    pub fn total_moving(&self) -> f64 {
        self.robots.values().map(|e| e.moving).sum()
    }

    pub fn total_idle(&self) -> f64 {
        self.robots.values().map(|e| e.idle).sum()
    }

    pub fn total_comm(&self) -> f64 {
        self.robots.values().map(RobotEnergy::comm).sum()
    }

    pub fn total_comm_negotiation(&self) -> f64 {
        self.robots.values().map(|e| e.comm_negotiation).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Position;

    fn robot(battery: f64) -> RobotState {
        RobotState::new(RobotId(1), Position::default(), battery)
    }

    #[test]
    fn move_costs_a_tenth() {
        let mut r = robot(90.0);
        let mut ledger = EnergyLedger::new([&r]);
        ledger.charge(&mut r, ChargeKind::Move, &EnergyModel::default());
        assert!((r.battery - 89.9).abs() < 1e-12);
    }

    #[test]
    fn idle_costs_four_hundredths() {
        let mut r = robot(100.0);
        let mut ledger = EnergyLedger::new([&r]);
        ledger.charge(&mut r, ChargeKind::Idle, &EnergyModel::default());
        assert!((r.battery - 99.96).abs() < 1e-12);
    }

    #[test]
    fn clamps_and_kills() {
        let mut r = robot(0.05);
        let mut ledger = EnergyLedger::new([&r]);
        let c = ledger.charge(&mut r, ChargeKind::Move, &EnergyModel::default());
        assert_eq!(c, Charge::Applied(0.05));
        assert_eq!(r.battery, 0.0);
        assert!(!r.alive);

        let c = ledger.charge(&mut r, ChargeKind::Idle, &EnergyModel::default());
        assert_eq!(c, Charge::Dropped);
        assert_eq!(ledger.robots[&r.id].dropped_actions, 1);
        assert_eq!(ledger.conservation_error([&r]), 0.0);
    }

    #[test]
    fn comm_is_split_by_purpose_and_task() {
        let mut r = robot(50.0);
        r.group = Some(TaskId(3));
        let mut ledger = EnergyLedger::new([&r]);
        let m = EnergyModel::default();
        ledger.charge(&mut r, ChargeKind::CommRound(CommPurpose::Gossip), &m);
        ledger.charge(&mut r, ChargeKind::CommRound(CommPurpose::Negotiation), &m);
        ledger.charge(&mut r, ChargeKind::CommRound(CommPurpose::Negotiation), &m);
        let e = &ledger.robots[&r.id];
        assert!((e.comm_gossip - 0.01).abs() < 1e-15);
        assert!((e.comm_negotiation - 0.02).abs() < 1e-15);
        assert!((ledger.per_task_comm[&TaskId(3)] - 0.03).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ledger_balances_any_charge_sequence(
                start in 0.0..100.0f64,
                kinds in proptest::collection::vec(0u8..4, 0..3000),
            ) {
                let mut r = robot(start);
                let mut ledger = EnergyLedger::new([&r]);
                let m = EnergyModel::default();
                let mut last = r.battery;
                for k in kinds {
                    let kind = match k {
                        0 => ChargeKind::Move,
                        1 => ChargeKind::Idle,
                        2 => ChargeKind::CommRound(CommPurpose::Gossip),
                        _ => ChargeKind::CommRound(CommPurpose::Negotiation),
                    };
                    ledger.charge(&mut r, kind, &m);
                    prop_assert!(r.battery <= last);
                    prop_assert!(r.battery >= 0.0);
                    last = r.battery;
                }
                prop_assert!(ledger.conservation_error([&r]) < 1e-9);
            }
        }
    }
}
