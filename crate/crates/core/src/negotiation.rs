//! Negotiation and agreement without a leader.
//!
//! Each group member proposes a plan from its own view, the proposals are
//! gossiped to equilibrium, and every member checks whether all of them are
//! identical. On disagreement members merge the views they received and
//! replan; if the views were already identical the sort criteria escalate one
//! level instead.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

use crate::comms::{dcm, CommError, CommGraph};
use crate::formation::FormationPlan;
use crate::needs::NeedsError;
use crate::selection::SelectionPlan;
use crate::world::RobotId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Selection,
    Formation,
    Routing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Selection(SelectionPlan),
    Formation(FormationPlan),
    /// Agreed priority order over a conflict cluster.
    Routing(Vec<RobotId>),
}

impl Payload {
    pub fn phase(&self) -> Phase {
        match self {
            Payload::Selection(_) => Phase::Selection,
            Payload::Formation(_) => Phase::Formation,
            Payload::Routing(_) => Phase::Routing,
        }
    }

    /// Serialization used for equality: maps are ordered and plans carry no
    /// floating point values, so equal plans give equal bytes.
    pub fn canonical(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("payloads always serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proposal {
    pub phase: Phase,
    pub proposer: RobotId,
    pub payload: Payload,
    pub criterion_depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgreementOutcome {
    /// All plans match; execute.
    End,
    /// Plans differ; negotiate again.
    Conflict,
}

#[derive(Debug, Error, PartialEq)]
pub enum NegotiationError {
    #[error("no proposals to compare")]
    Empty,
    #[error("proposals mix phases {0:?} and {1:?}")]
    PhaseMismatch(Phase, Phase),
    #[error("negotiation group is empty")]
    EmptyGroup,
    #[error("{0} has no local view")]
    MissingView(RobotId),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Needs(#[from] NeedsError),
    #[error("planner failed: {0}")]
    Planner(String),
}

/// Compare every proposal against the first.
pub fn agreement(proposals: &[Proposal]) -> Result<AgreementOutcome, NegotiationError> {
    let first = proposals.first().ok_or(NegotiationError::Empty)?;
    for p in proposals {
        if p.phase != first.phase {
            return Err(NegotiationError::PhaseMismatch(first.phase, p.phase));
        }
        if p.payload.phase() != p.phase {
            return Err(NegotiationError::PhaseMismatch(p.phase, p.payload.phase()));
        }
    }
    let reference = first.payload.canonical();
    let distinct = proposals
        .iter()
        .filter(|p| p.payload.canonical() != reference)
        .count();
    Ok(if distinct == 0 {
        AgreementOutcome::End
    } else {
        AgreementOutcome::Conflict
    })
}

/// A member's local knowledge, mergeable with a peer's.
pub trait View: Clone {
    /// Fold `other` into `self`; returns whether anything changed.
    fn merge(&mut self, other: &Self) -> bool;
}

/// What a finished negotiation produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Negotiation {
    pub payload: Payload,
    /// Propose/gossip/compare cycles run.
    pub iterations: u32,
    /// Criterion depth of the agreed plan.
    pub depth: usize,
    /// Gossip rounds summed over every exchange; each member pays this many.
    pub rounds: u32,
    pub exchanges: u32,
}

/// Run propose → gossip → agree until every member holds the same plan.
///
/// `planner(member, view, min_depth)` returns the member's plan and the
/// criterion depth it settled at. `criteria` is the length of the active
/// order queue and bounds escalation.
pub fn negotiate<V, F, E>(
    phase: Phase,
    group: &BTreeSet<RobotId>,
    graph: &CommGraph,
    views: &mut BTreeMap<RobotId, V>,
    criteria: usize,
    planner: F,
) -> Result<Negotiation, NegotiationError>
where
    V: View,
    F: Fn(RobotId, &V, usize) -> Result<(Payload, usize), E>,
    E: std::fmt::Display,
{
    if group.is_empty() {
        return Err(NegotiationError::EmptyGroup);
    }
    if let Some(m) = group.iter().find(|m| !views.contains_key(m)) {
        return Err(NegotiationError::MissingView(*m));
    }
    let mut min_depth = 0;
    let mut iterations = 0;
    let mut rounds = 0;
    let mut exchanges = 0;
    loop {
        if min_depth >= criteria {
            return Err(NeedsError::ExhaustedCriteria {
                depth: min_depth,
                len: criteria,
            }
            .into());
        }
        iterations += 1;
        let mut datagrams: BTreeMap<RobotId, (Proposal, V)> = BTreeMap::new();
        for &member in group {
            let view = &views[&member];
            let (payload, depth) = planner(member, view, min_depth)
                .map_err(|e| NegotiationError::Planner(e.to_string()))?;
            let proposal = Proposal {
                phase,
                proposer: member,
                payload,
                criterion_depth: depth,
            };
            datagrams.insert(member, (proposal, view.clone()));
        }
        let eq = dcm(&datagrams, graph, group)?;
        rounds += eq.rounds;
        exchanges += 1;

        // every member decides on its own copy of the gathered proposals
        let mut verdicts = BTreeSet::new();
        for ks in eq.knowledge.values() {
            let gathered: Vec<Proposal> = ks.items.values().map(|(p, _)| p.clone()).collect();
            verdicts.insert(agreement(&gathered)? == AgreementOutcome::End);
        }
        debug_assert_eq!(verdicts.len(), 1, "members compared different multisets");
        if verdicts.contains(&true) {
            let (first, _) = datagrams.values().next().expect("nonempty group");
            return Ok(Negotiation {
                payload: first.payload.clone(),
                iterations,
                depth: datagrams.values().map(|(p, _)| p.criterion_depth).max().unwrap_or(0),
                rounds,
                exchanges,
            });
        }

        let mut learned = false;
        for (member, ks) in &eq.knowledge {
            let view = views.get_mut(member).expect("checked");
            for (_, peer_view) in ks.items.values() {
                learned |= view.merge(peer_view);
            }
        }
        if !learned {
            min_depth = datagrams.values().map(|(p, _)| p.criterion_depth).max().unwrap_or(0) + 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::Assignment;
    use crate::world::TaskId;

    fn plan(pairs: &[(u32, u32)]) -> Payload {
        Payload::Selection(SelectionPlan {
            assignment: pairs
                .iter()
                .map(|&(r, t)| (RobotId(r), Assignment::Task(TaskId(t))))
                .collect(),
        })
    }

    fn proposal(proposer: u32, payload: Payload) -> Proposal {
        Proposal {
            phase: payload.phase(),
            proposer: RobotId(proposer),
            payload,
            criterion_depth: 0,
        }
    }

    #[test]
    fn identical_plans_end() {
        let ps: Vec<_> = (0..3).map(|i| proposal(i, plan(&[(1, 1), (2, 2)]))).collect();
        assert_eq!(agreement(&ps).unwrap(), AgreementOutcome::End);
    }

    #[test]
    fn one_robot_in_another_group_conflicts() {
        let ps = vec![proposal(0, plan(&[(1, 1), (2, 2)])), proposal(1, plan(&[(1, 1), (2, 1)]))];
        assert_eq!(agreement(&ps).unwrap(), AgreementOutcome::Conflict);
    }

    #[test]
    fn lone_proposal_ends() {
        assert_eq!(
            agreement(&[proposal(0, Payload::Routing(vec![RobotId(3)]))]).unwrap(),
            AgreementOutcome::End
        );
    }

    #[test]
    fn mixed_phases_are_rejected() {
        let ps = vec![proposal(0, plan(&[])), proposal(1, Payload::Routing(vec![]))];
        assert_eq!(
            agreement(&ps).unwrap_err(),
            NegotiationError::PhaseMismatch(Phase::Selection, Phase::Routing)
        );
        assert_eq!(agreement(&[]).unwrap_err(), NegotiationError::Empty);
    }

    /// Known task ids plus per-robot batteries.
    #[derive(Debug, Clone, PartialEq)]
    struct Known {
        tasks: BTreeSet<u32>,
        batteries: BTreeMap<RobotId, f64>,
    }

    impl View for Known {
        fn merge(&mut self, other: &Self) -> bool {
            let before = self.tasks.len();
            self.tasks.extend(other.tasks.iter().copied());
            before != self.tasks.len()
        }
    }

    /// Send every robot to the highest known task id, ordered low-energy first.
    fn planner(_: RobotId, v: &Known, depth: usize) -> Result<(Payload, usize), String> {
        let target = *v.tasks.iter().max().ok_or("no tasks")?;
        let keys = v
            .batteries
            .iter()
            .map(|(id, b)| (*id, crate::needs::RobotKey::new(*id, *b)))
            .collect();
        let ids: Vec<RobotId> = v.batteries.keys().copied().collect();
        let (queue, d) = crate::needs::settle_queue(
            &ids,
            &keys,
            &crate::needs::compile_law(crate::needs::PriorityLaw::LowE),
            depth,
        )
        .map_err(|e| e.to_string())?;
        Ok((
            Payload::Selection(SelectionPlan {
                assignment: queue
                    .into_iter()
                    .map(|r| (r, Assignment::Task(TaskId(target))))
                    .collect(),
            }),
            d,
        ))
    }

    fn setup(batteries: &[f64], tasks: &[&[u32]]) -> (BTreeSet<RobotId>, CommGraph, BTreeMap<RobotId, Known>) {
        let ids: BTreeSet<RobotId> = (0..batteries.len() as u32).map(RobotId).collect();
        let graph = CommGraph::from_edges(
            ids.iter().copied(),
            ids.iter().zip(ids.iter().skip(1)).map(|(a, b)| (*a, *b)),
        );
        let bat: BTreeMap<RobotId, f64> = ids.iter().copied().zip(batteries.iter().copied()).collect();
        let views = ids
            .iter()
            .zip(tasks)
            .map(|(id, t)| {
                (
                    *id,
                    Known {
                        tasks: t.iter().copied().collect(),
                        batteries: bat.clone(),
                    },
                )
            })
            .collect();
        (ids, graph, views)
    }

    #[test]
    fn shared_views_agree_first_time() {
        let (group, graph, mut views) = setup(&[50.0, 60.0, 70.0], &[&[1], &[1], &[1]]);
        let out = negotiate(Phase::Selection, &group, &graph, &mut views, 2, planner).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.exchanges, 1);
        assert_eq!(out.depth, 0);
        // line of three
        assert_eq!(out.rounds, 2);
    }

    #[test]
    fn late_task_spreads_then_agrees_at_depth_zero() {
        // robot 2 alone has heard of task 5
        let (group, graph, mut views) = setup(&[50.0, 60.0, 70.0], &[&[1], &[1], &[1, 5]]);
        let out = negotiate(Phase::Selection, &group, &graph, &mut views, 2, planner).unwrap();
        assert_eq!(out.iterations, 2);
        assert_eq!(out.depth, 0);
        assert_eq!(out.rounds, 4);
        assert!(views.values().all(|v| v.tasks.contains(&5)));
        match out.payload {
            Payload::Selection(p) => assert!(p.assignment.values().all(|a| *a == Assignment::Task(TaskId(5)))),
            _ => panic!("wrong phase"),
        }
    }

    #[test]
    fn equal_batteries_settle_on_ids() {
        let (group, graph, mut views) = setup(&[40.0, 40.0, 40.0], &[&[2], &[2], &[2]]);
        let out = negotiate(Phase::Selection, &group, &graph, &mut views, 2, planner).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.depth, 1);
    }

    #[test]
    fn stubborn_disagreement_exhausts_criteria() {
        let (group, graph, mut views) = setup(&[40.0, 41.0], &[&[2], &[2]]);
        let contrary = |m: RobotId, _: &Known, d: usize| -> Result<(Payload, usize), String> {
            Ok((Payload::Routing(vec![m]), d))
        };
        let err = negotiate(Phase::Routing, &group, &graph, &mut views, 2, contrary).unwrap_err();
        assert_eq!(
            err,
            NegotiationError::Needs(NeedsError::ExhaustedCriteria { depth: 2, len: 2 })
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn end_iff_every_payload_matches(choices in proptest::collection::vec(0u8..3, 1..10)) {
                let payloads = [
                    plan(&[(1, 1)]),
                    plan(&[(1, 2)]),
                    Payload::Selection(SelectionPlan {
                        assignment: BTreeMap::from([(RobotId(1), Assignment::Unassigned)]),
                    }),
                ];
                let ps: Vec<Proposal> = choices
                    .iter()
                    .enumerate()
                    .map(|(i, c)| proposal(i as u32, payloads[*c as usize].clone()))
                    .collect();
                let all_same = choices.iter().all(|c| *c == choices[0]);
                let got = agreement(&ps).unwrap();
                prop_assert_eq!(got == AgreementOutcome::End, all_same);
            }
        }
    }
}
