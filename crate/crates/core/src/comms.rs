//! Communication graph and synchronous gossip to information equilibrium.
//!
//! Every robot starts with its own datagram. In each round all robots
//! simultaneously merge the sets held by their neighbours; the exchange ends
//! once each member of the group holds one datagram from every member.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use thiserror::Error;

use crate::geometry::euclidean;
use crate::world::{RobotId, RobotState};

#[derive(Debug, Error, PartialEq)]
pub enum CommError {
    #[error("no alive robots to connect")]
    Empty,
    #[error("communication graph is disconnected: {unreachable:?} unreachable from {root}")]
    DisconnectedGraph {
        root: RobotId,
        unreachable: Vec<RobotId>,
    },
    #[error("{0} has no datagram to share")]
    MissingDatagram(RobotId),
    #[error("{0} is not a node of the communication graph")]
    UnknownRobot(RobotId),
    #[error("gossip did not reach equilibrium within {rounds} rounds")]
    NonTermination { rounds: u32 },
}

/// How robots decide who they can talk to.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum CommRange {
    /// Every pair of alive robots is linked.
    #[default]
    Complete,
    /// Link iff the pair is at most this many meters apart.
    Range(f64),
}

impl Serialize for CommRange {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            CommRange::Complete => s.serialize_str("complete"),
            CommRange::Range(r) => s.serialize_f64(*r),
        }
    }
}

impl<'de> Deserialize<'de> for CommRange {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Name(String),
            Range(f64),
        }
        match Repr::deserialize(d)? {
            Repr::Name(n) if n == "complete" => Ok(CommRange::Complete),
            Repr::Name(n) => Err(serde::de::Error::custom(format!(
                "unknown comm_range `{n}`, expected a distance or \"complete\""
            ))),
            Repr::Range(r) => Ok(CommRange::Range(r)),
        }
    }
}

/// Undirected adjacency over robot ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CommGraph {
    adjacency: BTreeMap<RobotId, BTreeSet<RobotId>>,
}

impl CommGraph {
    /// Graph with the given nodes and edges; self-loops are ignored.
    pub fn from_edges(
        nodes: impl IntoIterator<Item = RobotId>,
        edges: impl IntoIterator<Item = (RobotId, RobotId)>,
    ) -> Self {
        let mut adjacency: BTreeMap<RobotId, BTreeSet<RobotId>> =
            nodes.into_iter().map(|n| (n, BTreeSet::new())).collect();
        for (a, b) in edges {
            if a == b {
                continue;
            }
            adjacency.entry(a).or_default().insert(b);
            adjacency.entry(b).or_default().insert(a);
        }
        Self { adjacency }
    }

    pub fn complete(nodes: impl IntoIterator<Item = RobotId>) -> Self {
        let nodes: Vec<RobotId> = nodes.into_iter().collect();
        let adjacency = nodes
            .iter()
            .map(|&n| (n, nodes.iter().copied().filter(|&m| m != n).collect()))
            .collect();
        Self { adjacency }
    }

    pub fn nodes(&self) -> impl Iterator<Item = RobotId> + '_ {
        self.adjacency.keys().copied()
    }

    pub fn neighbors(&self, id: RobotId) -> Option<&BTreeSet<RobotId>> {
        self.adjacency.get(&id)
    }

    pub fn contains(&self, id: RobotId) -> bool {
        self.adjacency.contains_key(&id)
    }

    pub fn has_edge(&self, a: RobotId, b: RobotId) -> bool {
        self.adjacency.get(&a).is_some_and(|n| n.contains(&b))
    }

    pub fn edges(&self) -> Vec<(RobotId, RobotId)> {
        self.adjacency
            .iter()
            .flat_map(|(&a, ns)| ns.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
            .collect()
    }

    /// Members of `group` that cannot be reached from its smallest id using
    /// only edges inside `group`.
    pub fn unreachable_within(&self, group: &BTreeSet<RobotId>) -> Vec<RobotId> {
        let Some(&root) = group.iter().next() else {
            return Vec::new();
        };
        let mut seen = BTreeSet::from([root]);
        let mut queue = VecDeque::from([root]);
        while let Some(n) = queue.pop_front() {
            for &m in self.adjacency.get(&n).into_iter().flatten() {
                if group.contains(&m) && seen.insert(m) {
                    queue.push_back(m);
                }
            }
        }
        group.iter().copied().filter(|g| !seen.contains(g)).collect()
    }
}

/// Link alive robots by range (or all pairs) and require the result to be connected.
pub fn build_graph(robots: &[RobotState], range: CommRange) -> Result<CommGraph, CommError> {
    let alive: Vec<&RobotState> = robots.iter().filter(|r| r.alive).collect();
    if alive.is_empty() {
        return Err(CommError::Empty);
    }
    let ids = alive.iter().map(|r| r.id);
    let graph = match range {
        CommRange::Complete => CommGraph::complete(ids),
        CommRange::Range(limit) => {
            let mut edges = Vec::new();
            for (i, a) in alive.iter().enumerate() {
                for b in &alive[i + 1..] {
                    if euclidean(a.pos, b.pos) <= limit {
                        edges.push((a.id, b.id));
                    }
                }
            }
            CommGraph::from_edges(ids, edges)
        }
    };
    let all: BTreeSet<RobotId> = graph.nodes().collect();
    let unreachable = graph.unreachable_within(&all);
    if !unreachable.is_empty() {
        return Err(CommError::DisconnectedGraph {
            root: *all.iter().next().expect("nonempty"),
            unreachable,
        });
    }
    Ok(graph)
}

/// One robot's collected datagrams, keyed by the robot they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeSet<T> {
    pub owner: RobotId,
    pub items: BTreeMap<RobotId, T>,
}

impl<T> KnowledgeSet<T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn origins(&self) -> BTreeSet<RobotId> {
        self.items.keys().copied().collect()
    }
}

/// Round-by-round gossip state over the origin ids each member has heard from.
///
/// Datagrams never change during an exchange, so tracking origins is enough to
/// reconstruct every knowledge set.
#[derive(Debug, Clone)]
pub struct Gossip<'g> {
    graph: &'g CommGraph,
    group: BTreeSet<RobotId>,
    known: BTreeMap<RobotId, BTreeSet<RobotId>>,
    rounds: u32,
}

impl<'g> Gossip<'g> {
    pub fn new(graph: &'g CommGraph, group: &BTreeSet<RobotId>) -> Result<Self, CommError> {
        if let Some(&missing) = group.iter().find(|g| !graph.contains(**g)) {
            return Err(CommError::UnknownRobot(missing));
        }
        let known = group.iter().map(|&g| (g, BTreeSet::from([g]))).collect();
        Ok(Self {
            graph,
            group: group.clone(),
            known,
            rounds: 0,
        })
    }

    pub fn rounds(&self) -> u32 {
        self.rounds
    }

    pub fn known(&self, id: RobotId) -> Option<&BTreeSet<RobotId>> {
        self.known.get(&id)
    }

    pub fn at_equilibrium(&self) -> bool {
        let n = self.group.len();
        self.known.values().all(|k| k.len() == n)
    }

    /// Run one synchronous union step. Returns whether any set grew.
    pub fn step(&mut self) -> bool {
        let previous = self.known.clone();
        let mut grew = false;
        for (&id, set) in self.known.iter_mut() {
            for n in self.graph.neighbors(id).into_iter().flatten() {
                if let Some(theirs) = previous.get(n) {
                    let before = set.len();
                    set.extend(theirs.iter().copied());
                    grew |= set.len() != before;
                }
            }
        }
        self.rounds += 1;
        grew
    }
}

/// Result of a gossip exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium<T> {
    pub knowledge: BTreeMap<RobotId, KnowledgeSet<T>>,
    pub rounds: u32,
}

/// Spread each member's datagram through `graph` (restricted to `group`)
/// until everyone holds all of them.
///
/// Energy is not charged here; callers bill `rounds` per member.
pub fn dcm<T: Clone>(
    payloads: &BTreeMap<RobotId, T>,
    graph: &CommGraph,
    group: &BTreeSet<RobotId>,
) -> Result<Equilibrium<T>, CommError> {
    if let Some(&missing) = group.iter().find(|g| !payloads.contains_key(g)) {
        return Err(CommError::MissingDatagram(missing));
    }
    let members: BTreeSet<RobotId> = group.clone();
    let restricted = restrict(graph, &members)?;
    let mut gossip = Gossip::new(&restricted, &members)?;
    let bound = members.len() as u32;
    while !gossip.at_equilibrium() {
        if gossip.rounds() >= bound || !gossip.step() {
            return Err(CommError::NonTermination {
                rounds: gossip.rounds(),
            });
        }
    }
    let knowledge = members
        .iter()
        .map(|&owner| {
            let items = gossip.known(owner).expect("member").iter().map(|o| (*o, payloads[o].clone())).collect();
            (owner, KnowledgeSet { owner, items })
        })
        .collect();
    Ok(Equilibrium {
        knowledge,
        rounds: gossip.rounds(),
    })
}

fn restrict(graph: &CommGraph, group: &BTreeSet<RobotId>) -> Result<CommGraph, CommError> {
    let mut edges = Vec::new();
    for &a in group {
        let ns = graph.neighbors(a).ok_or(CommError::UnknownRobot(a))?;
        edges.extend(ns.iter().filter(|b| group.contains(b) && a < **b).map(|&b| (a, b)));
    }
    Ok(CommGraph::from_edges(group.iter().copied(), edges))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Position;

    fn r(id: u32, x: f64, y: f64) -> RobotState {
        RobotState::new(RobotId(id), Position::new(x, y), 100.0)
    }

    fn ids(v: &[u32]) -> BTreeSet<RobotId> {
        v.iter().map(|&i| RobotId(i)).collect()
    }

    #[test]
    fn range_graph_on_a_line() {
        let robots = [r(0, 0.0, 0.0), r(1, 5.0, 0.0), r(2, 10.0, 0.0)];
        let g = build_graph(&robots, CommRange::Range(6.0)).unwrap();
        assert_eq!(
            g.edges(),
            vec![(RobotId(0), RobotId(1)), (RobotId(1), RobotId(2))]
        );
    }

    #[test]
    fn complete_pair() {
        let robots = [r(0, 0.0, 0.0), r(1, 100.0, 0.0)];
        let g = build_graph(&robots, CommRange::Complete).unwrap();
        assert_eq!(g.edges(), vec![(RobotId(0), RobotId(1))]);
    }

    #[test]
    fn out_of_range_pair_is_disconnected() {
        let robots = [r(0, 0.0, 0.0), r(1, 10.0, 0.0)];
        let err = build_graph(&robots, CommRange::Range(5.0)).unwrap_err();
        assert!(matches!(err, CommError::DisconnectedGraph { .. }));
    }

    #[test]
    fn dead_robots_are_left_out() {
        let mut robots = vec![r(0, 0.0, 0.0), r(1, 5.0, 0.0), r(2, 50.0, 0.0)];
        robots[2].alive = false;
        let g = build_graph(&robots, CommRange::Range(6.0)).unwrap();
        assert!(!g.contains(RobotId(2)));
    }

    #[test]
    fn line_needs_two_rounds() {
        let g = CommGraph::from_edges(
            [RobotId(0), RobotId(1), RobotId(2)],
            [(RobotId(0), RobotId(1)), (RobotId(1), RobotId(2))],
        );
        let payloads: BTreeMap<_, _> = (0..3).map(|i| (RobotId(i), i * 10)).collect();
        let eq = dcm(&payloads, &g, &ids(&[0, 1, 2])).unwrap();
        assert_eq!(eq.rounds, 2);
        for ks in eq.knowledge.values() {
            assert_eq!(ks.items.values().copied().collect::<Vec<_>>(), vec![0, 10, 20]);
        }
    }

    #[test]
    fn complete_graph_needs_one_round() {
        for n in 2..8u32 {
            let g = CommGraph::complete((0..n).map(RobotId));
            let payloads: BTreeMap<_, _> = (0..n).map(|i| (RobotId(i), ())).collect();
            let group = (0..n).map(RobotId).collect();
            assert_eq!(dcm(&payloads, &g, &group).unwrap().rounds, 1);
        }
    }

    #[test]
    fn singleton_needs_no_rounds() {
        let g = CommGraph::complete([RobotId(4)]);
        let payloads = BTreeMap::from([(RobotId(4), "x")]);
        let eq = dcm(&payloads, &g, &ids(&[4])).unwrap();
        assert_eq!(eq.rounds, 0);
        assert_eq!(eq.knowledge[&RobotId(4)].len(), 1);
    }

    #[test]
    fn group_uses_only_internal_links() {
        // 0 and 2 only connect through 1, which is outside the group
        let g = CommGraph::from_edges(
            [RobotId(0), RobotId(1), RobotId(2)],
            [(RobotId(0), RobotId(1)), (RobotId(1), RobotId(2))],
        );
        let payloads: BTreeMap<_, _> = (0..3).map(|i| (RobotId(i), i)).collect();
        let err = dcm(&payloads, &g, &ids(&[0, 2])).unwrap_err();
        assert!(matches!(err, CommError::NonTermination { .. }));
    }

    #[test]
    fn missing_datagram_is_reported() {
        let g = CommGraph::complete([RobotId(0), RobotId(1)]);
        let payloads = BTreeMap::from([(RobotId(0), 1)]);
        assert_eq!(
            dcm(&payloads, &g, &ids(&[0, 1])).unwrap_err(),
            CommError::MissingDatagram(RobotId(1))
        );
    }

    #[test]
    fn comm_range_json_forms() {
        let c: CommRange = serde_json::from_str("\"complete\"").unwrap();
        assert_eq!(c, CommRange::Complete);
        let c: CommRange = serde_json::from_str("12.5").unwrap();
        assert_eq!(c, CommRange::Range(12.5));
        assert_eq!(serde_json::to_string(&CommRange::Complete).unwrap(), "\"complete\"");
        assert!(serde_json::from_str::<CommRange>("\"mesh\"").is_err());
    }
}
