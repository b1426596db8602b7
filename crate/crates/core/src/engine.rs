//! Synchronous round scheduler.
//!
//! Each round applies churn events and then runs five phases: acks, weight
//! assignment with departure detection, `diameter_bound` max-consensus
//! iterations, data exchange, and the local update. Agents only ever see
//! their own state and the messages delivered to them.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::agent::{
    detect_departures, max_consensus_step, AckMap, AgentError, AgentState, Contribution,
    DataMessage, DetectionMessage, PushWeights,
};
use crate::costs::{ClusterObjective, CostError, CostFunction};
use crate::oracle::lemma1_residual;
use crate::topology::{
    active_subgraph, clusters, ActivationVector, ClusterPartition, MaximalDigraph, NodeId, NodeSet,
    TopologyError,
};

/// Numerator of the automatic step size `AUTO_STEP_SCALE / max L`.
pub const AUTO_STEP_SCALE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("round {round}: {source}")]
    Agent { round: usize, source: AgentError },
    #[error("round {round}, cluster {members}: {source}")]
    Cluster {
        round: usize,
        members: String,
        source: CostError,
    },
    #[error("event {index} (round {round}, {agent}): {reason}")]
    InvalidEvent {
        index: usize,
        round: usize,
        agent: NodeId,
        reason: String,
    },
}

#[derive(Clone, Debug)]
pub enum EventKind {
    Join { x_hat: f64, cost: CostFunction },
    Leave,
}

#[derive(Clone, Debug)]
pub struct ChurnEvent {
    pub round: usize,
    pub agent: NodeId,
    pub kind: EventKind,
}

impl ChurnEvent {
    pub fn is_leave(&self) -> bool {
        matches!(self.kind, EventKind::Leave)
    }
}

/// An agent active from round 0.
#[derive(Clone, Debug)]
pub struct Arrival {
    pub agent: NodeId,
    pub x_hat: f64,
    pub cost: CostFunction,
}

/// A fully concrete run: every random draw already resolved.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub graph: MaximalDigraph,
    pub gamma: f64,
    pub rounds: usize,
    pub seed: u64,
    pub initial: Vec<Arrival>,
    /// Listed in round order; within a round, leaves are applied before joins.
    pub events: Vec<ChurnEvent>,
}

impl Experiment {
    pub fn new(
        graph: MaximalDigraph,
        gamma: f64,
        rounds: usize,
        seed: u64,
        mut initial: Vec<Arrival>,
        events: Vec<ChurnEvent>,
    ) -> Self {
        initial.sort_by_key(|a| a.agent);
        Experiment {
            graph,
            gamma,
            rounds,
            seed,
            initial,
            events,
        }
    }

    pub fn events_at(&self, round: usize) -> &[ChurnEvent] {
        let start = self.events.partition_point(|e| e.round < round);
        let end = self.events.partition_point(|e| e.round <= round);
        &self.events[start..end]
    }

    pub fn initial_activation(&self) -> ActivationVector {
        ActivationVector::from_active(
            self.graph.node_count(),
            self.initial.iter().map(|a| a.agent),
        )
    }

    /// Activation vectors for rounds `0..=rounds`, assuming a valid schedule.
    pub fn activations(&self) -> Vec<ActivationVector> {
        let mut current = self.initial_activation();
        let mut out = vec![current.clone()];
        for round in 1..=self.rounds {
            for e in self.events_at(round) {
                current.set(e.agent, !e.is_leave());
            }
            out.push(current.clone());
        }
        out
    }

    /// Every inconsistency of the churn schedule, in event order.
    pub fn schedule_issues(&self) -> Vec<EngineError> {
        let n = self.graph.node_count();
        let mut issues = Vec::new();
        let mut seen = BTreeSet::new();
        for a in &self.initial {
            if a.agent.index() >= n || !seen.insert(a.agent) {
                issues.push(EngineError::InvalidEvent {
                    index: 0,
                    round: 0,
                    agent: a.agent,
                    reason: "initial agent is out of range or listed twice".into(),
                });
            }
        }
        let mut active = vec![false; n];
        for a in self.initial.iter().filter(|a| a.agent.index() < n) {
            active[a.agent.index()] = true;
        }
        let mut touched: BTreeSet<(usize, NodeId)> = BTreeSet::new();
        for (index, e) in self.events.iter().enumerate() {
            let fail = |reason: &str| EngineError::InvalidEvent {
                index,
                round: e.round,
                agent: e.agent,
                reason: reason.into(),
            };
            if e.agent.index() >= n {
                issues.push(fail("agent is not a node of the graph"));
                continue;
            }
            if e.round == 0 {
                issues.push(fail(
                    "events start at round 1; use the initial activation for round 0",
                ));
                continue;
            }
            if index > 0 && e.round < self.events[index - 1].round {
                issues.push(fail("events must be listed in round order"));
                continue;
            }
            if e.round > self.rounds {
                issues.push(fail("event is scheduled after the last round"));
                continue;
            }
            if !touched.insert((e.round, e.agent)) {
                issues.push(fail("agent has more than one event in the same round"));
                continue;
            }
            let slot = &mut active[e.agent.index()];
            match (&e.kind, *slot) {
                (EventKind::Leave, false) => issues.push(fail("leaves while inactive")),
                (EventKind::Join { .. }, true) => issues.push(fail("joins while already active")),
                (EventKind::Leave, true) => *slot = false,
                (EventKind::Join { .. }, false) => *slot = true,
            }
        }
        issues
    }
}

/// `AUTO_STEP_SCALE / max L` over the given Lipschitz constants.
pub fn auto_step_size(lipschitz: impl IntoIterator<Item = f64>) -> f64 {
    let max = lipschitz.into_iter().fold(0.0_f64, f64::max);
    AUTO_STEP_SCALE / max
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EngineOptions {
    /// When false, agents ignore the agreed departure flag and never restart
    /// their trackers. Only useful as a negative control.
    pub reset_gate: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions { reset_gate: true }
    }
}

/// Remaining, joining and departing agents between two rounds.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Population {
    pub remaining: NodeSet,
    pub joining: NodeSet,
    pub departing: NodeSet,
}

pub fn partition_population(
    prev: &ActivationVector,
    curr: &ActivationVector,
) -> Result<Population, TopologyError> {
    if prev.len() != curr.len() {
        return Err(TopologyError::LengthMismatch {
            expected: prev.len(),
            got: curr.len(),
        });
    }
    let mut p = Population::default();
    for (i, (&was, &is)) in prev.bits().iter().zip(curr.bits()).enumerate() {
        let id = NodeId::new(i);
        match (was, is) {
            (true, true) => p.remaining.insert(id),
            (false, true) => p.joining.insert(id),
            (true, false) => p.departing.insert(id),
            (false, false) => false,
        };
    }
    Ok(p)
}

#[derive(Clone, Debug)]
pub struct WorldState {
    pub round: usize,
    pub activation: ActivationVector,
    pub prev_activation: ActivationVector,
    /// Active agents only.
    pub agents: BTreeMap<NodeId, AgentState>,
    pub partition: ClusterPartition,
}

/// What happened inside one round, for diagnostics and cross-checks.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionReport {
    pub population: Population,
    /// Weights assigned by each remaining agent.
    pub weights: BTreeMap<NodeId, PushWeights>,
    /// Agents whose initial detection bit was 1.
    pub detectors: NodeSet,
    /// Detection bit of every active agent after the max-consensus phase.
    pub flags: BTreeMap<NodeId, bool>,
}

pub struct Engine<'g> {
    graph: &'g MaximalDigraph,
    gamma: f64,
    options: EngineOptions,
}

impl<'g> Engine<'g> {
    pub fn new(graph: &'g MaximalDigraph, gamma: f64, options: EngineOptions) -> Self {
        Engine {
            graph,
            gamma,
            options,
        }
    }

    pub fn graph(&self) -> &MaximalDigraph {
        self.graph
    }

    /// Round 0: every initial agent arrives.
    pub fn initial_world(&self, initial: &[Arrival]) -> Result<WorldState, EngineError> {
        let n = self.graph.node_count();
        let activation = ActivationVector::from_active(n, initial.iter().map(|a| a.agent));
        let mut agents = BTreeMap::new();
        for a in initial {
            let state = AgentState::arrive(a.agent, a.x_hat, a.cost.clone(), self.gamma)
                .map_err(|source| EngineError::Agent { round: 0, source })?;
            agents.insert(a.agent, state);
        }
        let partition = clusters(
            &active_subgraph(self.graph, &activation)?,
            &activation.active_nodes(),
        );
        Ok(WorldState {
            round: 0,
            activation,
            prev_activation: ActivationVector::none(n),
            agents,
            partition,
        })
    }

    /// Advances `world` from round k to k+1, applying the events of k+1.
    pub fn run_round(
        &self,
        world: &WorldState,
        events: &[ChurnEvent],
    ) -> Result<(WorldState, TransitionReport), EngineError> {
        let round = world.round + 1;
        let agent_err = |source| EngineError::Agent { round, source };

        // Churn: leaves first, then joins.
        let mut activation = world.activation.clone();
        for (index, e) in events.iter().enumerate() {
            let ok = activation.is_active(e.agent) == e.is_leave();
            if !ok {
                return Err(EngineError::InvalidEvent {
                    index,
                    round,
                    agent: e.agent,
                    reason: if e.is_leave() {
                        "leaves while inactive".into()
                    } else {
                        "joins while already active".into()
                    },
                });
            }
        }
        for e in events.iter().filter(|e| e.is_leave()) {
            activation.set(e.agent, false);
        }
        for e in events.iter().filter(|e| !e.is_leave()) {
            activation.set(e.agent, true);
        }
        let population = partition_population(&world.activation, &activation)?;
        let remaining = &population.remaining;

        // Phase 1: remaining agents acknowledge to their potential
        // in-neighbors; only remaining in-neighbors hear it.
        let mut heard: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
        for &l in remaining {
            let ack = world.agents[&l].ack();
            for &i in self.graph.in_neighbors(l) {
                if remaining.contains(&i) {
                    heard.entry(i).or_default().insert(ack.from);
                }
            }
        }

        // Phase 2: departure detection on the old history, then weights.
        let mut states: BTreeMap<NodeId, AgentState> = BTreeMap::new();
        let mut weights = BTreeMap::new();
        let mut detectors = NodeSet::new();
        for &j in remaining {
            let mut state = world.agents[&j].clone();
            let potential: BTreeSet<NodeId> = self.graph.out_neighbors(j).iter().copied().collect();
            let acks = heard.remove(&j).unwrap_or_default();
            let current: AckMap = potential.iter().map(|&l| (l, acks.contains(&l))).collect();
            if detect_departures(&state.prev_acks, &current) {
                detectors.insert(j);
            }
            weights.insert(j, state.assign_push_weights(&potential, &acks));
            states.insert(j, state);
        }

        // Phase 3: max-consensus on the detection bit over current active
        // links. Joiners start at 0 and relay.
        let active_edges = active_subgraph(self.graph, &activation)?;
        let mut flags: BTreeMap<NodeId, bool> = activation
            .active_nodes()
            .into_iter()
            .map(|j| (j, detectors.contains(&j)))
            .collect();
        for _ in 0..self.graph.diameter_bound() {
            let mut inbox: BTreeMap<NodeId, Vec<DetectionMessage>> = BTreeMap::new();
            for &(from, to) in &active_edges {
                inbox.entry(to).or_default().push(DetectionMessage {
                    from,
                    hbar: flags[&from],
                });
            }
            flags = flags
                .iter()
                .map(|(&j, &own)| {
                    let incoming = inbox.get(&j).into_iter().flatten().map(|m| m.hbar);
                    (j, max_consensus_step(own, incoming))
                })
                .collect();
        }

        // Phase 4: push scaled values along acknowledged links.
        let mut retained: BTreeMap<NodeId, Contribution> = BTreeMap::new();
        let mut inbox: BTreeMap<NodeId, Vec<DataMessage>> = BTreeMap::new();
        for (&j, state) in states.iter_mut() {
            state.h = flags[&j];
            let pw = &weights[&j];
            let out = state.make_outbound(pw.weight, &pw.active_out);
            retained.insert(j, out.retained);
            for m in out.messages {
                inbox.entry(m.to).or_default().push(m);
            }
        }

        // Phase 5: local updates.
        let mut agents = BTreeMap::new();
        for (&j, state) in &states {
            let h_k = flags[&j] && self.options.reset_gate;
            let inbound = inbox.get(&j).map(Vec::as_slice).unwrap_or(&[]);
            let next = state
                .apply_update(retained[&j], inbound, h_k, &state.cost)
                .map_err(agent_err)?;
            agents.insert(j, next);
        }
        for e in events {
            if let EventKind::Join { x_hat, cost } = &e.kind {
                let cost = cost.clone().with_valid_from(round);
                let state =
                    AgentState::arrive(e.agent, *x_hat, cost, self.gamma).map_err(agent_err)?;
                agents.insert(e.agent, state);
            }
        }

        let partition = clusters(&active_edges, &activation.active_nodes());
        let next = WorldState {
            round,
            prev_activation: world.activation.clone(),
            activation,
            agents,
            partition,
        };
        let report = TransitionReport {
            population,
            weights,
            detectors,
            flags,
        };
        Ok((next, report))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentRecord {
    pub agent: NodeId,
    pub cluster: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub h: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterRecord {
    pub index: usize,
    pub members: NodeSet,
    pub minimizer: f64,
    /// `|| z^q - 1 x* ||_2` over the cluster members.
    pub error: f64,
    /// `| sum w - sum grad f(z) |` over the cluster members.
    pub lemma1_residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub activation: ActivationVector,
    pub partition: ClusterPartition,
    pub agents: Vec<AgentRecord>,
    pub clusters: Vec<ClusterRecord>,
    /// The round that produced this state; `None` for round 0.
    pub transition: Option<TransitionReport>,
}

impl RoundRecord {
    pub fn agent(&self, id: NodeId) -> Option<&AgentRecord> {
        self.agents
            .binary_search_by_key(&id, |a| a.agent)
            .ok()
            .map(|i| &self.agents[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub seed: u64,
    pub gamma: f64,
    pub lambda: usize,
    pub records: Vec<RoundRecord>,
}

/// Summarizes a world state into a trace record.
pub fn record_round(
    world: &WorldState,
    transition: Option<TransitionReport>,
) -> Result<RoundRecord, EngineError> {
    let agents = world
        .agents
        .values()
        .map(|s| AgentRecord {
            agent: s.id,
            cluster: world
                .partition
                .cluster_of(s.id)
                .expect("active agent has a cluster"),
            x: s.x,
            y: s.y,
            z: s.z,
            w: s.w,
            h: s.h,
        })
        .collect();
    let mut cluster_records = Vec::new();
    for (index, members) in world.partition.clusters().iter().enumerate() {
        let cluster_err = |source| EngineError::Cluster {
            round: world.round,
            members: format_members(members),
            source,
        };
        let objective = ClusterObjective::new(
            members
                .iter()
                .map(|id| (*id, world.agents[id].cost.clone())),
            None,
        )
        .map_err(cluster_err)?;
        let minimizer = objective.minimizer().map_err(cluster_err)?;
        let error = members
            .iter()
            .map(|id| (world.agents[id].z - minimizer).powi(2))
            .sum::<f64>()
            .sqrt();
        let residual = lemma1_residual(world, members).map_err(cluster_err)?;
        cluster_records.push(ClusterRecord {
            index,
            members: members.clone(),
            minimizer,
            error,
            lemma1_residual: residual,
        });
    }
    Ok(RoundRecord {
        round: world.round,
        activation: world.activation.clone(),
        partition: world.partition.clone(),
        agents,
        clusters: cluster_records,
        transition,
    })
}

pub fn format_members(members: &NodeSet) -> String {
    let labels: Vec<String> = members.iter().map(|m| m.to_string()).collect();
    format!("{{{}}}", labels.join(","))
}

/// Runs rounds `0..=rounds` and records every round.
pub fn run(experiment: &Experiment, options: EngineOptions) -> Result<Trace, EngineError> {
    if let Some(first) = experiment.schedule_issues().into_iter().next() {
        return Err(first);
    }
    let engine = Engine::new(&experiment.graph, experiment.gamma, options);
    let mut world = engine.initial_world(&experiment.initial)?;
    let mut records = vec![record_round(&world, None)?];
    for round in 1..=experiment.rounds {
        let (next, report) = engine.run_round(&world, experiment.events_at(round))?;
        records.push(record_round(&next, Some(report))?);
        world = next;
    }
    Ok(Trace {
        seed: experiment.seed,
        gamma: experiment.gamma,
        lambda: experiment.graph.diameter_bound(),
        records,
    })
}
