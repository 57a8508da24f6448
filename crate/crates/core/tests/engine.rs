use std::collections::BTreeMap;

use swarm_core::engine::{run, EventKind, RobotPhase, Simulation, TaskStatus, TraceEvent};
use swarm_core::geometry::{euclidean, Position};
use swarm_core::needs::PriorityLaw;
use swarm_core::scenario::{RobotSpec, Scenario};
use swarm_core::world::{RobotId, Task, TaskId};

fn robot(id: u32, x: f64, y: f64, battery: f64) -> RobotSpec {
    RobotSpec {
        id: RobotId(id),
        pos: Position::new(x, y),
        battery,
    }
}

fn task(id: u32, x: f64, y: f64, required: usize, arrival: u64) -> Task {
    Task {
        id: TaskId(id),
        center: Position::new(x, y),
        required,
        duration: 5,
        timeout: 400,
        arrival_tick: arrival,
    }
}

fn line_scenario(law: PriorityLaw) -> Scenario {
    let robots = (0..4).map(|i| robot(i, 2.0 + 3.0 * i as f64, 2.0, 60.0 + 5.0 * i as f64)).collect();
    Scenario::new(40.0, robots, vec![task(1, 25.0, 25.0, 4, 0)], law)
}

/// Replays move events from the start positions.
fn replay(start: &[RobotSpec], trace: &[TraceEvent]) -> Vec<BTreeMap<RobotId, Position>> {
    let mut pos: BTreeMap<RobotId, Position> = start.iter().map(|r| (r.id, r.pos)).collect();
    let mut frames = Vec::new();
    let mut tick = None;
    for e in trace {
        if tick.is_some_and(|t| t != e.tick) {
            frames.push(pos.clone());
        }
        tick = Some(e.tick);
        match e.kind {
            EventKind::Move => {
                for (id, p) in e.subjects.iter().zip(&e.positions) {
                    pos.insert(*id, *p);
                }
            }
            EventKind::RobotDead => {
                for id in &e.subjects {
                    pos.remove(id);
                }
            }
            _ => {}
        }
    }
    frames.push(pos);
    frames
}

#[test]
fn single_task_completes_under_every_law() {
    for law in PriorityLaw::ALL {
        let sc = line_scenario(law);
        let out = run(&sc).unwrap();
        assert_eq!(out.tasks[&TaskId(1)], TaskStatus::Completed, "{law}");
        assert_eq!(out.metrics.tasks_completed, 1);
        assert!(out.metrics.energy_moving > 0.0);
        assert!(out.metrics.energy_comm > 0.0);
        assert!(out.metrics.energy_comm_negotiation > 0.0);
        assert!(out.min_separation >= 1.0 - 1e-9, "{law}: {}", out.min_separation);
        assert!(out.ledger.conservation_error(&out.robots) < 1e-9);
        assert!(out.phases.values().all(|p| *p == RobotPhase::Idle));
    }
}

#[test]
fn runs_are_deterministic() {
    let sc = line_scenario(PriorityLaw::TPlusLowE);
    let a = run(&sc).unwrap();
    let b = run(&sc).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.trace, b.trace);
}

#[test]
fn trace_positions_replay_to_final_state_and_stay_separated() {
    let sc = line_scenario(PriorityLaw::HighE);
    let out = run(&sc).unwrap();
    let frames = replay(&sc.robots, &out.trace);
    for f in &frames {
        let ps: Vec<Position> = f.values().copied().collect();
        for (i, a) in ps.iter().enumerate() {
            for b in &ps[i + 1..] {
                assert!(euclidean(*a, *b) >= 1.0 - 1e-9);
            }
        }
    }
    let last = frames.last().unwrap();
    for r in &out.robots {
        assert_eq!(last[&r.id], r.pos);
    }
}

#[test]
fn phase_changes_are_legal() {
    let sc = line_scenario(PriorityLaw::LowE);
    let out = run(&sc).unwrap();
    let mut phase: BTreeMap<RobotId, RobotPhase> =
        sc.robots.iter().map(|r| (r.id, RobotPhase::Idle)).collect();
    for e in out.trace.iter().filter(|e| e.kind == EventKind::PhaseChanged) {
        let (from, to) = e.summary.split_once("->").unwrap();
        let (from, to) = (RobotPhase::from_name(from).unwrap(), RobotPhase::from_name(to).unwrap());
        for id in &e.subjects {
            assert_eq!(phase[id], from);
            assert!(from.can_become(to), "{from:?} -> {to:?}");
            phase.insert(*id, to);
        }
    }
}

#[test]
fn energy_charges_match_trace() {
    let sc = line_scenario(PriorityLaw::TPlusHighE);
    let out = run(&sc).unwrap();
    let moves: usize = out.trace.iter().filter(|e| e.kind == EventKind::Move).map(|e| e.subjects.len()).sum();
    let stops: usize = out.trace.iter().filter(|e| e.kind == EventKind::Stop).map(|e| e.subjects.len()).sum();
    let gossip: f64 = out
        .trace
        .iter()
        .filter(|e| e.kind == EventKind::Gossip)
        .map(|e| e.subjects.len() as f64 * e.rounds.unwrap() as f64)
        .sum();
    let negotiation: f64 = out
        .trace
        .iter()
        .filter(|e| e.kind == EventKind::Negotiate)
        .map(|e| e.subjects.len() as f64 * e.rounds.unwrap() as f64)
        .sum();
    assert!((out.metrics.energy_moving - 0.1 * moves as f64).abs() < 1e-6);
    assert!((out.metrics.energy_idle - 0.04 * stops as f64).abs() < 1e-6);
    assert!((out.metrics.energy_comm_negotiation - 0.01 * negotiation).abs() < 1e-6);
    assert!((out.metrics.energy_comm - 0.01 * (gossip + negotiation)).abs() < 1e-6);
}

#[test]
fn new_task_preempts_robots_still_on_the_way() {
    let robots = (0..6).map(|i| robot(i, 2.0 + 3.0 * i as f64, 2.0, 50.0 + i as f64)).collect();
    let sc = Scenario::new(60.0, robots, vec![task(1, 40.0, 40.0, 3, 0)], PriorityLaw::TPlusLowE);
    let mut sim = Simulation::new(sc).unwrap();
    for _ in 0..5 {
        sim.step().unwrap();
    }
    let routing = sim.robots().iter().filter(|r| sim.phase(r.id) == Some(RobotPhase::Routing)).count();
    assert_eq!(routing, 3);
    sim.preempt(task(2, 10.0, 40.0, 3, 0)).unwrap();
    sim.step().unwrap();
    let tick = sim.tick() - 1;
    let pulled: usize = sim
        .trace()
        .iter()
        .filter(|e| e.tick == tick && e.kind == EventKind::PhaseChanged && e.summary == "routing->selecting")
        .map(|e| e.subjects.len())
        .sum();
    assert_eq!(pulled, 3);
    let groups: Vec<Option<TaskId>> = sim.robots().iter().map(|r| r.group).collect();
    assert_eq!(groups.iter().filter(|g| **g == Some(TaskId(1))).count(), 3);
    assert_eq!(groups.iter().filter(|g| **g == Some(TaskId(2))).count(), 3);
    sim.run_to_end().unwrap();
    let out = sim.finish();
    assert_eq!(out.metrics.tasks_completed, 2);
}

#[test]
fn staggered_tasks_reuse_freed_robots() {
    let robots = (0..3).map(|i| robot(i, 2.0 + 3.0 * i as f64, 2.0, 80.0)).collect();
    let tasks = vec![task(1, 20.0, 20.0, 3, 0), task(2, 5.0, 30.0, 3, 10)];
    let sc = Scenario::new(40.0, robots, tasks, PriorityLaw::LowE);
    let out = run(&sc).unwrap();
    assert_eq!(out.metrics.tasks_completed, 2);
    let done: Vec<u64> = out
        .trace
        .iter()
        .filter(|e| e.kind == EventKind::TaskCompleted)
        .map(|e| e.tick)
        .collect();
    assert_eq!(done.len(), 2);
}

#[test]
fn unreachable_demand_times_out() {
    let robots = (0..2).map(|i| robot(i, 2.0 + 3.0 * i as f64, 2.0, 80.0)).collect();
    let mut t = task(1, 20.0, 20.0, 2, 0);
    t.duration = 5;
    t.timeout = 10;
    let sc = Scenario::new(40.0, robots, vec![t], PriorityLaw::LowE);
    let out = run(&sc).unwrap();
    assert_eq!(out.tasks[&TaskId(1)], TaskStatus::TimedOut);
    assert_eq!(out.metrics.ticks_elapsed, 11);
}

#[test]
fn flat_batteries_kill_robots_and_end_the_run() {
    let robots = vec![robot(0, 2.0, 2.0, 0.5), robot(1, 6.0, 2.0, 0.3)];
    let sc = Scenario::new(40.0, robots, vec![task(1, 30.0, 30.0, 2, 0)], PriorityLaw::LowE);
    let out = run(&sc).unwrap();
    assert!(out.phases.values().all(|p| *p == RobotPhase::Dead));
    assert!(out.robots.iter().all(|r| r.battery == 0.0));
    assert!(out.trace.iter().any(|e| e.kind == EventKind::RobotDead));
    assert!(out.ledger.conservation_error(&out.robots) < 1e-9);
}

#[test]
fn no_tasks_idles_until_max_ticks() {
    let mut sc = Scenario::new(40.0, vec![robot(0, 2.0, 2.0, 50.0)], vec![], PriorityLaw::HighE);
    sc.max_ticks = 20;
    let out = run(&sc).unwrap();
    assert_eq!(out.metrics.ticks_elapsed, 20);
    assert!((out.metrics.energy_idle - 20.0 * 0.04).abs() < 1e-9);
    assert_eq!(out.metrics.energy_comm, 0.0);
}

#[test]
fn lone_robot_three_steps_from_its_vertex_arrives_in_three_ticks() {
    // one-vertex formation: the vertex sits due North of the center
    let sc = Scenario::new(40.0, vec![robot(0, 20.0, 28.0, 80.0)], vec![task(1, 20.0, 20.0, 1, 0)], PriorityLaw::LowE);
    let mut sim = Simulation::new(sc).unwrap();
    for _ in 0..2 {
        sim.step().unwrap();
        assert_eq!(sim.phase(RobotId(0)), Some(RobotPhase::Routing));
    }
    sim.step().unwrap();
    assert_eq!(sim.phase(RobotId(0)), Some(RobotPhase::AtSlot));
    assert!(euclidean(sim.robot(RobotId(0)).unwrap().pos, Position::new(20.0, 25.0)) < 1e-9);
}

#[test]
fn arriving_task_reaches_one_robot_then_everyone() {
    let robots = vec![robot(0, 2.0, 2.0, 80.0), robot(1, 30.0, 30.0, 80.0), robot(2, 10.0, 2.0, 80.0)];
    let sc = Scenario::new(40.0, robots, vec![task(1, 25.0, 25.0, 1, 4)], PriorityLaw::LowE);
    let mut sim = Simulation::new(sc).unwrap();
    for _ in 0..5 {
        sim.step().unwrap();
    }
    let arrived: Vec<&TraceEvent> = sim.trace().iter().filter(|e| e.kind == EventKind::TaskArrived).collect();
    assert_eq!(arrived.len(), 1);
    assert_eq!(arrived[0].tick, 4);
    assert_eq!(arrived[0].subjects, vec![RobotId(1)]);
    for id in 0..3 {
        assert!(sim.view(RobotId(id)).unwrap().tasks.contains_key(&TaskId(1)));
    }
}

#[test]
fn staggered_style_injects_at_configured_ticks() {
    use swarm_core::sweep::{Scale, Style, SweepSpec, Variation};
    let spec = SweepSpec::dynamic(PriorityLaw::TPlusLowE, 1);
    let v = Variation {
        law: PriorityLaw::TPlusLowE,
        scale: Scale::new(20, 3),
        style: Style::OneOneOne,
        trial: 0,
        seed: 1,
    };
    let sc = spec.scenario(&v).unwrap();
    let expected: Vec<u64> = sc.tasks.iter().map(|t| t.arrival_tick).collect();
    assert_eq!(expected, vec![0, spec.arrival_gap, 2 * spec.arrival_gap]);
    let out = run(&sc).unwrap();
    let got: Vec<u64> = out.trace.iter().filter(|e| e.kind == EventKind::TaskArrived).map(|e| e.tick).collect();
    assert_eq!(got, expected);
}

#[test]
fn third_task_makes_both_groups_reselect() {
    let robots = (0..6).map(|i| robot(i, 2.0 + 3.0 * i as f64, 2.0, 50.0 + i as f64)).collect();
    let tasks = vec![task(1, 40.0, 40.0, 2, 0), task(2, 15.0, 45.0, 2, 0)];
    let sc = Scenario::new(60.0, robots, tasks, PriorityLaw::TPlusHighE);
    let mut sim = Simulation::new(sc).unwrap();
    for _ in 0..4 {
        sim.step().unwrap();
    }
    let en_route = sim.robots().iter().filter(|r| sim.phase(r.id) == Some(RobotPhase::Routing)).count();
    assert_eq!(en_route, 4);
    sim.preempt(task(3, 45.0, 10.0, 2, 0)).unwrap();
    sim.step().unwrap();
    let tick = sim.tick() - 1;
    let reselected: usize = sim
        .trace()
        .iter()
        .filter(|e| e.tick == tick && e.kind == EventKind::PhaseChanged && e.summary.ends_with("->selecting"))
        .map(|e| e.subjects.len())
        .sum();
    assert_eq!(reselected, 6);
    for t in 1..=3 {
        assert_eq!(sim.robots().iter().filter(|r| r.group == Some(TaskId(t))).count(), 2);
    }
    sim.run_to_end().unwrap();
    assert_eq!(sim.finish().metrics.tasks_completed, 3);
}
