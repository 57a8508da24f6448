//! Seeded scenario generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cata::CataWeights;
use crate::comms::CommRange;
use crate::energy::EnergyModel;
use crate::geometry::{euclidean, Position};
use crate::needs::PriorityLaw;
use crate::scenario::{RobotSpec, Scenario, ScenarioError};
use crate::world::{RobotId, Task, TaskId};

pub const BATTERY_FLOOR: f64 = 50.0;
pub const BATTERY_CEIL: f64 = 100.0;
const PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub required: usize,
    pub duration: u64,
    pub timeout: u64,
    #[serde(default)]
    pub arrival_tick: u64,
    /// Sampled when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Position>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub world_size: f64,
    pub robots: usize,
    /// Fixed start positions; sampled when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robot_positions: Option<Vec<Position>>,
    pub tasks: Vec<TaskTemplate>,
    pub law: PriorityLaw,
    pub battery_mean: f64,
    pub battery_sd: f64,
    /// Minimum distance between sampled robot starts.
    pub robot_spacing: f64,
    #[serde(default)]
    pub comm_range: CommRange,
    #[serde(default)]
    pub energy: EnergyModel,
    pub step_length: f64,
    pub safety_radius: f64,
    pub formation_radius: f64,
    pub max_ticks: u64,
    #[serde(default)]
    pub cata: CataWeights,
    pub conflict_negotiation: bool,
    pub low_battery_threshold: f64,
}

impl Default for Template {
    fn default() -> Self {
        Self {
            world_size: 60.0,
            robots: 20,
            robot_positions: None,
            tasks: Vec::new(),
            law: PriorityLaw::TPlusLowE,
            battery_mean: 90.0,
            battery_sd: 10.0,
            robot_spacing: 2.0,
            comm_range: CommRange::Complete,
            energy: EnergyModel::default(),
            step_length: 1.0,
            safety_radius: 0.5,
            formation_radius: 5.0,
            max_ticks: 10_000,
            cata: CataWeights::default(),
            conflict_negotiation: true,
            low_battery_threshold: 5.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

/// Battery levels drawn from a normal distribution and clamped to the
/// generator's range. Clamping narrows the spread below `sd`.
pub fn sample_batteries(rng: &mut impl Rng, n: usize, mean: f64, sd: f64) -> Result<Vec<f64>, GenerateError> {
    if !(mean.is_finite() && sd.is_finite() && sd >= 0.0) {
        return Err(GenerateError::InvalidTemplate(format!(
            "battery distribution needs a finite mean and sd >= 0, got {mean} and {sd}"
        )));
    }
    let normal = Normal::new(mean, sd).map_err(|e| GenerateError::InvalidTemplate(format!("battery distribution: {e}")))?;
    Ok((0..n)
        .map(|_| normal.sample(rng).clamp(BATTERY_FLOOR, BATTERY_CEIL))
        .collect())
}

fn sample_point(rng: &mut impl Rng, lo: f64, hi: f64) -> Position {
    Position::new(rng.random_range(lo..=hi), rng.random_range(lo..=hi))
}

pub fn generate(template: &Template, seed: u64) -> Result<Scenario, GenerateError> {
    let t = template;
    if t.robots == 0 {
        return Err(GenerateError::InvalidTemplate("no robots".into()));
    }
    if let Some(p) = &t.robot_positions {
        if p.len() != t.robots {
            return Err(GenerateError::InvalidTemplate(format!(
                "{} robot positions for {} robots",
                p.len(),
                t.robots
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // task sites keep their whole polygon inside the world and apart
    let r = t.formation_radius;
    let mut centers: Vec<Position> = t.tasks.iter().filter_map(|k| k.center).collect();
    let mut task_centers = Vec::with_capacity(t.tasks.len());
    for k in &t.tasks {
        let c = match k.center {
            Some(c) => c,
            None => {
                let margin = r + 1.0;
                if 2.0 * margin >= t.world_size {
                    return Err(GenerateError::InvalidTemplate("world too small for a formation".into()));
                }
                let c = (0..PLACEMENT_ATTEMPTS)
                    .map(|_| sample_point(&mut rng, margin, t.world_size - margin))
                    .find(|c| centers.iter().all(|o| euclidean(*c, *o) >= 2.0 * r + 4.0))
                    .ok_or_else(|| GenerateError::InvalidTemplate("cannot place task sites".into()))?;
                centers.push(c);
                c
            }
        };
        task_centers.push(c);
    }

    let positions = match &t.robot_positions {
        Some(p) => p.clone(),
        None => {
            let mut placed: Vec<Position> = Vec::with_capacity(t.robots);
            for _ in 0..t.robots {
                let p = (0..PLACEMENT_ATTEMPTS)
                    .map(|_| sample_point(&mut rng, 0.0, t.world_size))
                    .find(|p| {
                        placed.iter().all(|o| euclidean(*p, *o) >= t.robot_spacing)
                            && task_centers.iter().all(|c| euclidean(*p, *c) >= r + 2.0)
                    })
                    .ok_or_else(|| GenerateError::InvalidTemplate("cannot place robots".into()))?;
                placed.push(p);
            }
            placed
        }
    };
    let batteries = sample_batteries(&mut rng, t.robots, t.battery_mean, t.battery_sd)?;

    let robots = positions
        .into_iter()
        .zip(batteries)
        .zip(0u32..)
        .map(|((pos, battery), i)| RobotSpec {
            id: RobotId(i),
            pos,
            battery,
        })
        .collect();
    let tasks = t
        .tasks
        .iter()
        .zip(task_centers)
        .zip(1u32..)
        .map(|((k, center), i)| Task {
            id: TaskId(i),
            center,
            required: k.required,
            duration: k.duration,
            timeout: k.timeout,
            arrival_tick: k.arrival_tick,
        })
        .collect();
    let scenario = Scenario {
        world_size: t.world_size,
        robots,
        tasks,
        law: t.law,
        task_priority_order: None,
        comm_range: t.comm_range,
        energy: t.energy,
        step_length: t.step_length,
        safety_radius: t.safety_radius,
        formation_radius: t.formation_radius,
        seed,
        max_ticks: t.max_ticks,
        cata: t.cata,
        conflict_negotiation: t.conflict_negotiation,
        low_battery_threshold: t.low_battery_threshold,
    };
    scenario.validate()?;
    Ok(scenario)
}
