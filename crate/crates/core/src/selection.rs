//! Group selection: split the robots into one group per task.
//!
//! Robots are lined up by the active priority law and tasks by their
//! priority rank; the line is then cut into consecutive blocks, one per
//! task, each exactly as long as the task's demand. Whatever is left at the
//! tail of the line stays unassigned.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::energy::EnergyModel;
use crate::geometry::euclidean;
use crate::needs::{compile_law, settle_queue, NeedsError, PriorityLaw, RobotKey, TaskRanking};
use crate::world::{RobotId, RobotState, Task, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    Task(TaskId),
    Unassigned,
}

/// Which task each robot joins.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub assignment: BTreeMap<RobotId, Assignment>,
}

impl SelectionPlan {
    pub fn members(&self, task: TaskId) -> Vec<RobotId> {
        self.assignment
            .iter()
            .filter(|(_, a)| **a == Assignment::Task(task))
            .map(|(r, _)| *r)
            .collect()
    }

    pub fn task_of(&self, robot: RobotId) -> Option<TaskId> {
        match self.assignment.get(&robot) {
            Some(Assignment::Task(t)) => Some(*t),
            _ => None,
        }
    }

    /// Check the per-task head counts against `tasks`.
    pub fn is_feasible(&self, tasks: &[Task]) -> bool {
        tasks.iter().all(|t| self.members(t.id).len() == t.required)
            && self.assignment.values().all(|a| match a {
                Assignment::Task(id) => tasks.iter().any(|t| t.id == *id),
                Assignment::Unassigned => true,
            })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("tasks need {needed} robots but only {available} are available")]
    InsufficientRobots { needed: usize, available: usize },
    #[error("no tasks to select for")]
    NoTasks,
    #[error("oracle limited to {max_robots} robots and {max_tasks} tasks")]
    TooLarge { max_robots: usize, max_tasks: usize },
    #[error(transparent)]
    Needs(#[from] NeedsError),
}

/// Parameters shared by selection planners.
#[derive(Debug, Clone, Copy)]
pub struct SelectionContext<'a> {
    pub model: EnergyModel,
    pub step_length: f64,
    pub ranking: &'a TaskRanking,
}

/// Estimated battery spent driving straight to the task center.
pub fn estimate_cost(robot: &RobotState, task: &Task, model: &EnergyModel, step_length: f64) -> f64 {
    let steps = (euclidean(robot.pos, task.center) / step_length).ceil();
    model.move_cost * steps
}

/// The task the robot would naturally serve: its current group, otherwise the
/// cheapest task to reach (ties go to the more urgent task).
pub fn preferred_task(
    robot: &RobotState,
    tasks: &[Task],
    ctx: &SelectionContext<'_>,
) -> Option<TaskId> {
    if let Some(g) = robot.group.filter(|g| tasks.iter().any(|t| t.id == *g)) {
        return Some(g);
    }
    tasks
        .iter()
        .map(|t| {
            (
                estimate_cost(robot, t, &ctx.model, ctx.step_length),
                ctx.ranking.rank(t.id),
                t.id,
            )
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)))
        .map(|(_, _, id)| id)
}

/// Sort keys for selection: battery plus the rank of the preferred task.
pub fn selection_keys(
    robots: &[RobotState],
    tasks: &[Task],
    ctx: &SelectionContext<'_>,
) -> BTreeMap<RobotId, RobotKey> {
    robots
        .iter()
        .map(|r| {
            let mut key = RobotKey::new(r.id, r.battery);
            if let Some(t) = preferred_task(r, tasks, ctx) {
                key.task_rank = ctx.ranking.rank(t);
            }
            (r.id, key)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    pub plan: SelectionPlan,
    pub cost: f64,
    /// Robots in the order they were lined up.
    pub queue: Vec<RobotId>,
    /// Criterion depth at which the queue became unique.
    pub depth: usize,
}

fn check_feasible(robots: &[RobotState], tasks: &[Task]) -> Result<(), SelectionError> {
    if tasks.is_empty() {
        return Err(SelectionError::NoTasks);
    }
    let needed: usize = tasks.iter().map(|t| t.required).sum();
    let available = robots.iter().filter(|r| r.alive).count();
    if needed > available {
        return Err(SelectionError::InsufficientRobots { needed, available });
    }
    Ok(())
}

/// Total estimated cost of a plan.
pub fn plan_cost(
    plan: &SelectionPlan,
    robots: &[RobotState],
    tasks: &[Task],
    ctx: &SelectionContext<'_>,
) -> f64 {
    robots
        .iter()
        .filter_map(|r| {
            let t = plan.task_of(r.id)?;
            let task = tasks.iter().find(|x| x.id == t)?;
            Some(estimate_cost(r, task, &ctx.model, ctx.step_length))
        })
        .sum()
}

/// Partition alive `robots` over `tasks` under `law`, starting the queue
/// escalation at `min_depth`.
pub fn select_at(
    robots: &[RobotState],
    tasks: &[Task],
    law: PriorityLaw,
    ctx: &SelectionContext<'_>,
    min_depth: usize,
) -> Result<SelectionOutcome, SelectionError> {
    check_feasible(robots, tasks)?;
    let alive: Vec<RobotState> = robots.iter().filter(|r| r.alive).cloned().collect();
    let keys = selection_keys(&alive, tasks, ctx);
    let ids: Vec<RobotId> = alive.iter().map(|r| r.id).collect();
    let (queue, depth) = settle_queue(&ids, &keys, &compile_law(law), min_depth)?;

    let mut ordered_tasks: Vec<&Task> = tasks.iter().collect();
    ctx.ranking.sorted(&mut ordered_tasks, |t| t.id);

    // Block sizes are fixed by demand, so the cut points are forced: task k
    // takes the `required` robots that follow task k-1's block.
    let mut assignment: BTreeMap<RobotId, Assignment> = BTreeMap::new();
    let mut cursor = queue.iter();
    for task in &ordered_tasks {
        for robot in cursor.by_ref().take(task.required) {
            assignment.insert(*robot, Assignment::Task(task.id));
        }
    }
    for robot in cursor {
        assignment.insert(*robot, Assignment::Unassigned);
    }
    let plan = SelectionPlan { assignment };
    let cost = plan_cost(&plan, &alive, tasks, ctx);
    Ok(SelectionOutcome {
        plan,
        cost,
        queue,
        depth,
    })
}

pub fn select(
    robots: &[RobotState],
    tasks: &[Task],
    law: PriorityLaw,
    ctx: &SelectionContext<'_>,
) -> Result<SelectionOutcome, SelectionError> {
    select_at(robots, tasks, law, ctx, 0)
}

/// Exhaustive minimum-cost assignment used to measure how far the
/// law-ordered partition is from optimal.
pub mod oracle {
    use super::*;

    pub const MAX_ROBOTS: usize = 10;
    pub const MAX_TASKS: usize = 3;

    /// Enumerate every assignment honoring the head counts (not only
    /// contiguous ones) and return the cheapest.
    pub fn selection_oracle(
        robots: &[RobotState],
        tasks: &[Task],
        ctx: &SelectionContext<'_>,
    ) -> Result<(SelectionPlan, f64), SelectionError> {
        check_feasible(robots, tasks)?;
        let alive: Vec<&RobotState> = robots.iter().filter(|r| r.alive).collect();
        if alive.len() > MAX_ROBOTS || tasks.len() > MAX_TASKS {
            return Err(SelectionError::TooLarge {
                max_robots: MAX_ROBOTS,
                max_tasks: MAX_TASKS,
            });
        }
        let costs: Vec<Vec<f64>> = alive
            .iter()
            .map(|r| {
                tasks
                    .iter()
                    .map(|t| estimate_cost(r, t, &ctx.model, ctx.step_length))
                    .collect()
            })
            .collect();
        let spare = alive.len() - tasks.iter().map(|t| t.required).sum::<usize>();
        let mut remaining: Vec<usize> = tasks.iter().map(|t| t.required).collect();
        let mut choice = vec![None; alive.len()];
        let mut best: Option<(f64, Vec<Option<usize>>)> = None;
        search(0, 0.0, spare, &costs, &mut remaining, &mut choice, &mut best);
        let (cost, choice) = best.expect("feasible instance has a solution");
        let assignment = alive
            .iter()
            .zip(choice)
            .map(|(r, c)| {
                (
                    r.id,
                    c.map_or(Assignment::Unassigned, |k| Assignment::Task(tasks[k].id)),
                )
            })
            .collect();
        Ok((SelectionPlan { assignment }, cost))
    }

    fn search(
        i: usize,
        acc: f64,
        spare: usize,
        costs: &[Vec<f64>],
        remaining: &mut [usize],
        choice: &mut [Option<usize>],
        best: &mut Option<(f64, Vec<Option<usize>>)>,
    ) {
        if i == costs.len() {
            if best.as_ref().is_none_or(|(c, _)| acc < *c) {
                *best = Some((acc, choice.to_vec()));
            }
            return;
        }
        for k in 0..remaining.len() {
            if remaining[k] > 0 {
                remaining[k] -= 1;
                choice[i] = Some(k);
                search(i + 1, acc + costs[i][k], spare, costs, remaining, choice, best);
                remaining[k] += 1;
            }
        }
        if spare > 0 {
            choice[i] = None;
            search(i + 1, acc, spare - 1, costs, remaining, choice, best);
        }
    }
}
