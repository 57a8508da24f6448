use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::energy::EnergyLedger;
use crate::world::{RobotState, TaskId};

/// Per-run figures reported by sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Conflict clusters detected over the run.
    pub conflict_frequency: u64,
    pub energy_moving: f64,
    pub energy_idle: f64,
    /// All communication, gossip and negotiation together.
    pub energy_comm: f64,
    pub energy_comm_negotiation: f64,
    pub total_distance: f64,
    pub per_task_comm: BTreeMap<TaskId, f64>,
    pub residual_max: f64,
    pub residual_min: f64,
    pub residual_mean: f64,
    pub ticks_elapsed: u64,
    pub tasks_completed: u32,
    pub tasks_timed_out: u32,
}

impl RunMetrics {
    pub(crate) fn collect(
        ledger: &EnergyLedger,
        robots: &[RobotState],
        conflicts: u64,
        distance: f64,
        ticks: u64,
        completed: u32,
        timed_out: u32,
    ) -> Self {
        let residual: Vec<f64> = robots.iter().map(|r| r.battery).collect();
        let n = residual.len().max(1) as f64;
        Self {
            conflict_frequency: conflicts,
            energy_moving: ledger.total_moving(),
            energy_idle: ledger.total_idle(),
            energy_comm: ledger.total_comm(),
            energy_comm_negotiation: ledger.total_comm_negotiation(),
            total_distance: distance,
            per_task_comm: ledger.per_task_comm.clone(),
            residual_max: residual.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0),
            residual_min: residual.iter().copied().fold(f64::INFINITY, f64::min).min(100.0),
            residual_mean: residual.iter().sum::<f64>() / n,
            ticks_elapsed: ticks,
            tasks_completed: completed,
            tasks_timed_out: timed_out,
        }
    }

    /// Share of communication energy spent negotiating.
    pub fn negotiation_share(&self) -> f64 {
        if self.energy_comm > 0.0 {
            self.energy_comm_negotiation / self.energy_comm
        } else {
            0.0
        }
    }
}
