//! Collision-aware utility baseline (CATA_U).
//!
//! Each robot scores every task with a surrogate reward: a fixed base, minus
//! a distance charge, minus a charge per peer whose straight route would pass
//! too close to the robot's own. Robots then claim tasks greedily in
//! low-energy order. The resulting plan goes through the same formation,
//! routing and negotiation machinery as every other law.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::geometry::{euclidean, segment_distance, Position};
use crate::needs::{compile_law, settle_queue, PriorityLaw, RobotKey};
use crate::selection::{
    plan_cost, Assignment, SelectionContext, SelectionError, SelectionOutcome, SelectionPlan,
};
use crate::world::{RobotId, RobotState, Task, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CataWeights {
    pub base: f64,
    /// Per meter to the task.
    pub w_d: f64,
    /// Per conflicting peer.
    pub w_c: f64,
}

impl Default for CataWeights {
    fn default() -> Self {
        Self {
            base: 100.0,
            w_d: 1.0,
            w_c: 10.0,
        }
    }
}

/// Robots × tasks utilities.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityMatrix {
    pub rows: Vec<RobotId>,
    pub cols: Vec<TaskId>,
    pub entries: Vec<Vec<f64>>,
}

/// 1 when the straight routes `from_i -> goal_i` and `from_j -> goal_j` come
/// within `2 * safety_radius` of each other.
pub fn collision_penalty(
    from_i: Position,
    goal_i: Position,
    from_j: Position,
    goal_j: Position,
    safety_radius: f64,
) -> u32 {
    u32::from(segment_distance(from_i, goal_i, from_j, goal_j) < 2.0 * safety_radius)
}

/// Surrogate reward for `robot` taking `task`, given the routes of `others`
/// as `(position, goal)` pairs.
pub fn utility(
    robot: Position,
    task: &Task,
    others: &[(Position, Position)],
    weights: &CataWeights,
    safety_radius: f64,
) -> f64 {
    let conflicts: u32 = others
        .iter()
        .map(|(p, g)| collision_penalty(robot, task.center, *p, *g, safety_radius))
        .sum();
    weights.base - weights.w_d * euclidean(robot, task.center) - weights.w_c * conflicts as f64
}

/// The route a robot is currently known to follow: toward the end of its
/// path, or nowhere if it has none.
pub fn current_route(robot: &RobotState) -> (Position, Position) {
    (robot.pos, robot.path.last().copied().unwrap_or(robot.pos))
}

pub fn utility_matrix(
    robots: &[RobotState],
    tasks: &[Task],
    weights: &CataWeights,
    safety_radius: f64,
) -> UtilityMatrix {
    let entries = robots
        .iter()
        .map(|r| {
            let others: Vec<(Position, Position)> = robots
                .iter()
                .filter(|o| o.id != r.id)
                .map(current_route)
                .collect();
            tasks
                .iter()
                .map(|t| utility(r.pos, t, &others, weights, safety_radius))
                .collect()
        })
        .collect();
    UtilityMatrix {
        rows: robots.iter().map(|r| r.id).collect(),
        cols: tasks.iter().map(|t| t.id).collect(),
        entries,
    }
}

/// Greedy max-utility claims in low-energy order.
///
/// Peers that already claimed a task count with their route to that task;
/// the rest with their current route.
pub fn cata_select(
    robots: &[RobotState],
    tasks: &[Task],
    ctx: &SelectionContext<'_>,
    weights: &CataWeights,
    safety_radius: f64,
    min_depth: usize,
) -> Result<SelectionOutcome, SelectionError> {
    if tasks.is_empty() {
        return Err(SelectionError::NoTasks);
    }
    let alive: Vec<&RobotState> = robots.iter().filter(|r| r.alive).collect();
    let needed: usize = tasks.iter().map(|t| t.required).sum();
    if needed > alive.len() {
        return Err(SelectionError::InsufficientRobots {
            needed,
            available: alive.len(),
        });
    }
    let keys: BTreeMap<RobotId, RobotKey> = alive
        .iter()
        .map(|r| (r.id, RobotKey::new(r.id, r.battery)))
        .collect();
    let ids: Vec<RobotId> = alive.iter().map(|r| r.id).collect();
    let (queue, depth) = settle_queue(&ids, &keys, &compile_law(PriorityLaw::LowE), min_depth)?;

    let mut routes: BTreeMap<RobotId, (Position, Position)> =
        alive.iter().map(|r| (r.id, current_route(r))).collect();
    let mut open: BTreeMap<TaskId, usize> = tasks.iter().map(|t| (t.id, t.required)).collect();
    let mut assignment = BTreeMap::new();
    for id in &queue {
        let here = routes[id].0;
        let others: Vec<(Position, Position)> = routes
            .iter()
            .filter(|(o, _)| *o != id)
            .map(|(_, r)| *r)
            .collect();
        let best = tasks
            .iter()
            .filter(|t| open[&t.id] > 0)
            .map(|t| (utility(here, t, &others, weights, safety_radius), t))
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.id.cmp(&a.1.id)));
        match best {
            Some((_, task)) => {
                *open.get_mut(&task.id).expect("known task") -= 1;
                routes.insert(*id, (here, task.center));
                assignment.insert(*id, Assignment::Task(task.id));
            }
            None => {
                assignment.insert(*id, Assignment::Unassigned);
            }
        }
    }
    let plan = SelectionPlan { assignment };
    let owned: Vec<RobotState> = alive.into_iter().cloned().collect();
    let cost = plan_cost(&plan, &owned, tasks, ctx);
    Ok(SelectionOutcome {
        plan,
        cost,
        queue,
        depth,
    })
}
