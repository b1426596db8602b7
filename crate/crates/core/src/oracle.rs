//! Stacked matrix form of the protocol, written independently of the
//! message-passing engine so the two can be compared round by round.
//!
//! Inactive agents are kept as zero coordinates of every vector.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::agent::PushWeights;
use crate::costs::{CostError, CostFunction};
use crate::engine::{EventKind, Experiment, Trace, WorldState};
use crate::topology::{ActivationVector, MaximalDigraph, NodeId, NodeSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("push-sum weight of {agent} is non-positive ({y})")]
    NonPositiveWeight { agent: NodeId, y: f64 },
    #[error("{agent}: {source}")]
    Cost { agent: NodeId, source: CostError },
    #[error("{0} has no cost function")]
    MissingCost(NodeId),
}

/// Collects the weights assigned by each sender into `C`, with
/// `C[(l, j)] = c_lj` including the diagonal self weights.
pub fn build_weight_matrix(n: usize, weights: &BTreeMap<NodeId, PushWeights>) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(n, n);
    for (&j, pw) in weights {
        c[(j.index(), j.index())] = pw.weight;
        for &l in &pw.active_out {
            c[(l.index(), j.index())] = pw.weight;
        }
    }
    c
}

/// Weight matrix derived straight from the graph: every agent present in
/// both rounds pushes `1 / (1 + d)` to itself and to each of its `d`
/// out-neighbors that are also present in both rounds.
pub fn weight_matrix_from_activation(graph: &MaximalDigraph, remaining: &NodeSet) -> DMatrix<f64> {
    let n = graph.node_count();
    let mut c = DMatrix::zeros(n, n);
    for &j in remaining {
        let outs: Vec<NodeId> = graph
            .out_neighbors(j)
            .iter()
            .copied()
            .filter(|l| remaining.contains(l))
            .collect();
        let weight = 1.0 / (1 + outs.len()) as f64;
        c[(j.index(), j.index())] = weight;
        for l in outs {
            c[(l.index(), j.index())] = weight;
        }
    }
    c
}

/// Column sums of `c`.
pub fn column_sums(c: &DMatrix<f64>) -> Vec<f64> {
    c.column_iter().map(|col| col.sum()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackedState {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    pub w: DVector<f64>,
    pub active: ActivationVector,
}

impl StackedState {
    pub fn empty(n: usize) -> Self {
        StackedState {
            x: DVector::zeros(n),
            y: DVector::zeros(n),
            z: DVector::zeros(n),
            w: DVector::zeros(n),
            active: ActivationVector::none(n),
        }
    }
}

/// Per-round inputs of the stacked recursion.
#[derive(Clone, Debug)]
pub struct StackedInputs {
    pub c: DMatrix<f64>,
    /// Arrival triggers at k+1.
    pub psi: Vec<bool>,
    /// Agreed departure flags used in the k -> k+1 update.
    pub h: Vec<bool>,
    pub x_hat: DVector<f64>,
    pub active_next: ActivationVector,
}

/// One step of the stacked recursion:
///
/// ```text
/// x+ = (I - Psi) C (x - gamma w) + Psi x_hat
/// y+ = (I - Psi) C y + Psi 1
/// z+ = diag(y+)^-1 x+
/// w+ = (I - H)(C w - g_k) + g_{k+1}
/// ```
///
/// `grad_prev(i, z)` and `grad_next(i, z)` evaluate agent `i`'s gradient
/// with the costs of round k and k+1.
pub fn stacked_step<P, N>(
    s: &StackedState,
    inputs: &StackedInputs,
    grad_prev: P,
    grad_next: N,
    gamma: f64,
) -> Result<StackedState, OracleError>
where
    P: Fn(usize, f64) -> Result<f64, OracleError>,
    N: Fn(usize, f64) -> Result<f64, OracleError>,
{
    let n = s.x.len();
    let mut g_prev = DVector::zeros(n);
    for i in 0..n {
        if s.active.bits()[i] {
            g_prev[i] = grad_prev(i, s.z[i])?;
        }
    }
    let mixed_x = &inputs.c * (&s.x - gamma * &s.w);
    let mixed_y = &inputs.c * &s.y;
    let mixed_w = &inputs.c * &s.w;

    let mut next = StackedState::empty(n);
    next.active = inputs.active_next.clone();
    for i in 0..n {
        if !inputs.active_next.bits()[i] {
            continue;
        }
        let (x, y) = if inputs.psi[i] {
            (inputs.x_hat[i], 1.0)
        } else {
            (mixed_x[i], mixed_y[i])
        };
        if !(y > 0.0) {
            return Err(OracleError::NonPositiveWeight {
                agent: NodeId::new(i),
                y,
            });
        }
        let z = x / y;
        let keep = if inputs.h[i] { 0.0 } else { 1.0 };
        next.x[i] = x;
        next.y[i] = y;
        next.z[i] = z;
        next.w[i] = keep * (mixed_w[i] - g_prev[i]) + grad_next(i, z)?;
    }
    Ok(next)
}

/// State of the agents of one cluster, in the order of the cluster's
/// member list.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterVectors {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    pub w: DVector<f64>,
}

/// One Push-DIGing step on a fixed cluster with column-stochastic `c`.
pub fn push_diging_step<G>(
    s: &ClusterVectors,
    c: &DMatrix<f64>,
    grad: G,
    gamma: f64,
) -> Result<ClusterVectors, OracleError>
where
    G: Fn(usize, f64) -> Result<f64, OracleError>,
{
    let x = c * (&s.x - gamma * &s.w);
    let y = c * &s.y;
    let mut z = DVector::zeros(x.len());
    let mut w = c * &s.w;
    for i in 0..x.len() {
        if !(y[i] > 0.0) {
            return Err(OracleError::NonPositiveWeight {
                agent: NodeId::new(i),
                y: y[i],
            });
        }
        z[i] = x[i] / y[i];
        w[i] += grad(i, z[i])? - grad(i, s.z[i])?;
    }
    Ok(ClusterVectors { x, y, z, w })
}

/// `| sum w_j - sum grad f_j(z_j) |` over `cluster`.
pub fn lemma1_residual(world: &WorldState, cluster: &NodeSet) -> Result<f64, CostError> {
    let mut w_sum = 0.0;
    let mut g_sum = 0.0;
    for id in cluster {
        let s = &world.agents[id];
        w_sum += s.w;
        g_sum += s.cost.gradient(s.z)?;
    }
    Ok((w_sum - g_sum).abs())
}

/// Agreed departure flags for the transition into round k+1, from the
/// activations of rounds k-1, k and k+1.
///
/// An agent present in rounds k and k+1 (and already in k-1, so it holds an
/// acknowledgement history) detects when one of its out-neighbors that was
/// present in k-1 and k is gone at k+1. Flags then spread along active links
/// for `lambda` hops.
pub fn departure_flags(
    graph: &MaximalDigraph,
    before: &ActivationVector,
    prev: &ActivationVector,
    curr: &ActivationVector,
    lambda: usize,
) -> Vec<bool> {
    let n = graph.node_count();
    let both = |a: &ActivationVector, b: &ActivationVector, i: usize| a.bits()[i] && b.bits()[i];
    let mut flag = DVector::from_fn(n, |j, _| {
        let detector = both(prev, curr, j)
            && before.bits()[j]
            && graph
                .out_neighbors(NodeId::new(j))
                .iter()
                .any(|l| both(before, prev, l.index()) && !curr.bits()[l.index()]);
        if detector {
            1.0
        } else {
            0.0
        }
    });
    // reach = I + A with A[to, from] = 1 on active links
    let mut reach = DMatrix::<f64>::identity(n, n);
    for &(from, to) in graph.edges() {
        if curr.bits()[from.index()] && curr.bits()[to.index()] {
            reach[(to.index(), from.index())] = 1.0;
        }
    }
    for _ in 0..lambda {
        flag = (&reach * &flag).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    }
    (0..n).map(|i| curr.bits()[i] && flag[i] > 0.0).collect()
}

/// Iterates the stacked recursion over a whole experiment. Entry k is the
/// state at round k.
pub fn simulate(exp: &Experiment) -> Result<Vec<StackedState>, OracleError> {
    let n = exp.graph.node_count();
    let activations = exp.activations();
    let mut costs: Vec<Option<CostFunction>> = vec![None; n];
    let mut x_hat = DVector::zeros(n);
    for a in &exp.initial {
        costs[a.agent.index()] = Some(a.cost.clone());
        x_hat[a.agent.index()] = a.x_hat;
    }
    let grad_with = |costs: &[Option<CostFunction>], i: usize, z: f64| {
        let agent = NodeId::new(i);
        costs[i]
            .as_ref()
            .ok_or(OracleError::MissingCost(agent))?
            .gradient(z)
            .map_err(|source| OracleError::Cost { agent, source })
    };

    let arrival = StackedInputs {
        c: DMatrix::zeros(n, n),
        psi: activations[0].bits().to_vec(),
        h: vec![false; n],
        x_hat: x_hat.clone(),
        active_next: activations[0].clone(),
    };
    let first = stacked_step(
        &StackedState::empty(n),
        &arrival,
        |_, _| Ok(0.0),
        |i, z| grad_with(&costs, i, z),
        exp.gamma,
    )?;
    let mut states = vec![first];

    let none = ActivationVector::none(n);
    for k in 0..exp.rounds {
        let before = if k == 0 { &none } else { &activations[k - 1] };
        let prev = &activations[k];
        let curr = &activations[k + 1];
        let mut next_costs = costs.clone();
        for e in exp.events_at(k + 1) {
            if let EventKind::Join { x_hat: xh, cost } = &e.kind {
                next_costs[e.agent.index()] = Some(cost.clone());
                x_hat[e.agent.index()] = *xh;
            }
        }
        let remaining: NodeSet = (0..n)
            .filter(|&i| prev.bits()[i] && curr.bits()[i])
            .map(NodeId::new)
            .collect();
        let inputs = StackedInputs {
            c: weight_matrix_from_activation(&exp.graph, &remaining),
            psi: (0..n).map(|i| curr.bits()[i] && !prev.bits()[i]).collect(),
            h: departure_flags(&exp.graph, before, prev, curr, exp.graph.diameter_bound()),
            x_hat: x_hat.clone(),
            active_next: curr.clone(),
        };
        let next = stacked_step(
            &states[k],
            &inputs,
            |i, z| grad_with(&costs, i, z),
            |i, z| grad_with(&next_costs, i, z),
            exp.gamma,
        )?;
        states.push(next);
        costs = next_costs;
    }
    Ok(states)
}

/// Largest absolute difference in x, y, z or w between an engine trace and
/// the stacked states, per round. A round where the two disagree on which
/// agents are active gives `f64::INFINITY`.
pub fn trace_deviation(trace: &Trace, states: &[StackedState]) -> Vec<f64> {
    trace
        .records
        .iter()
        .zip(states)
        .map(|(r, s)| {
            if r.activation != s.active {
                return f64::INFINITY;
            }
            r.agents.iter().fold(0.0_f64, |m, a| {
                let i = a.agent.index();
                m.max((a.x - s.x[i]).abs())
                    .max((a.y - s.y[i]).abs())
                    .max((a.z - s.z[i]).abs())
                    .max((a.w - s.w[i]).abs())
            })
        })
        .collect()
}
