//! Random scenario generation and brute-force reference implementations
//! shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use opengt::costs::CostFunction;
use opengt::engine::{auto_step_size, Arrival, ChurnEvent, EventKind, Experiment};
use opengt::topology::{ActivationVector, EdgeSet, MaximalDigraph, NodeId, NodeSet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MAX_NODES: usize = 8;

pub fn v(label: usize) -> NodeId {
    NodeId::from_label(label).unwrap()
}

/// Transitive closure by Floyd-Warshall on booleans. `reach[i][j]` means a
/// directed path from `i` to `j` exists among `nodes` (every node reaches
/// itself).
pub fn reachability(n: usize, nodes: &NodeSet, edges: &EdgeSet) -> Vec<Vec<bool>> {
    let mut reach = vec![vec![false; n]; n];
    for &i in nodes {
        reach[i.index()][i.index()] = true;
    }
    for &(a, b) in edges {
        if nodes.contains(&a) && nodes.contains(&b) {
            reach[a.index()][b.index()] = true;
        }
    }
    for k in nodes {
        for i in nodes {
            for j in nodes {
                if reach[i.index()][k.index()] && reach[k.index()][j.index()] {
                    reach[i.index()][j.index()] = true;
                }
            }
        }
    }
    reach
}

/// Strongly connected components from mutual reachability, sorted by
/// smallest member.
pub fn scc_bruteforce(n: usize, nodes: &NodeSet, edges: &EdgeSet) -> Vec<NodeSet> {
    let reach = reachability(n, nodes, edges);
    let mut out: Vec<NodeSet> = Vec::new();
    let mut seen = NodeSet::new();
    for &i in nodes {
        if seen.contains(&i) {
            continue;
        }
        let comp: NodeSet = nodes
            .iter()
            .copied()
            .filter(|j| reach[i.index()][j.index()] && reach[j.index()][i.index()])
            .collect();
        seen.extend(comp.iter().copied());
        out.push(comp);
    }
    out
}

/// Hop distances from `src` over `edges` restricted to `nodes`.
pub fn bfs(n: usize, nodes: &NodeSet, edges: &EdgeSet, src: NodeId) -> Vec<Option<usize>> {
    let mut dist = vec![None; n];
    dist[src.index()] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        let d = dist[u.index()].unwrap();
        for &(a, b) in edges {
            if a == u && nodes.contains(&b) && dist[b.index()].is_none() {
                dist[b.index()] = Some(d + 1);
                queue.push_back(b);
            }
        }
    }
    dist
}

/// Longest shortest path among `nodes`; `None` if some pair is unreachable.
pub fn diameter_bruteforce(n: usize, nodes: &NodeSet, edges: &EdgeSet) -> Option<usize> {
    let mut best = 0;
    for &s in nodes {
        let dist = bfs(n, nodes, edges, s);
        for &t in nodes {
            best = best.max(dist[t.index()]?);
        }
    }
    Some(best)
}

pub fn active_edges(graph: &MaximalDigraph, a: &ActivationVector) -> EdgeSet {
    graph
        .edges()
        .iter()
        .copied()
        .filter(|&(x, y)| a.is_active(x) && a.is_active(y))
        .collect()
}

/// Agents whose detection bit starts at 1 in the transition into round
/// k+1: present in k-1, k and k+1, with an out-neighbor present in k-1 and
/// k but gone at k+1.
pub fn detectors_bruteforce(
    graph: &MaximalDigraph,
    before: &ActivationVector,
    prev: &ActivationVector,
    curr: &ActivationVector,
) -> NodeSet {
    graph
        .nodes()
        .filter(|&j| before.is_active(j) && prev.is_active(j) && curr.is_active(j))
        .filter(|&j| {
            graph.edges().iter().any(|&(a, l)| {
                a == j && before.is_active(l) && prev.is_active(l) && !curr.is_active(l)
            })
        })
        .collect()
}

/// Active agents reachable from some detector within `lambda` hops over
/// active links.
pub fn flagged_bruteforce(
    graph: &MaximalDigraph,
    curr: &ActivationVector,
    detectors: &NodeSet,
    lambda: usize,
) -> NodeSet {
    let n = graph.node_count();
    let nodes = curr.active_nodes();
    let edges = active_edges(graph, curr);
    let mut out = NodeSet::new();
    for &d in detectors {
        for (i, dist) in bfs(n, &nodes, &edges, d).into_iter().enumerate() {
            if dist.is_some_and(|h| h <= lambda) {
                out.insert(NodeId::new(i));
            }
        }
    }
    out
}

/// True when every active link stays inside one strongly connected
/// component of the active subgraph.
pub fn is_closed(graph: &MaximalDigraph, a: &ActivationVector) -> bool {
    let nodes = a.active_nodes();
    let edges = active_edges(graph, a);
    let reach = reachability(graph.node_count(), &nodes, &edges);
    edges.iter().all(|&(x, y)| reach[y.index()][x.index()])
}

/// Random strongly connected digraph on `n` nodes built from one to three
/// groups. Each group is a directed cycle with random chords, and
/// neighboring groups are joined by a two-way link, so removing a linking
/// node can split the network.
pub fn random_graph(rng: &mut impl Rng, n: usize) -> MaximalDigraph {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let groups = rng.gen_range(1..=3.min(n));
    let mut cuts: Vec<usize> = (1..n).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(groups - 1).collect();
    cuts.sort_unstable();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(n);

    let mut edges = BTreeSet::new();
    let parts: Vec<&[usize]> = bounds.windows(2).map(|w| &order[w[0]..w[1]]).collect();
    for part in &parts {
        if part.len() > 1 {
            for i in 0..part.len() {
                edges.insert((part[i], part[(i + 1) % part.len()]));
            }
        }
        for &a in part.iter() {
            for &b in part.iter() {
                if a != b && rng.gen_bool(0.25) {
                    edges.insert((a, b));
                }
            }
        }
    }
    for pair in parts.windows(2) {
        let a = *pair[0].choose(rng).unwrap();
        let b = *pair[1].choose(rng).unwrap();
        edges.insert((a, b));
        edges.insert((b, a));
    }
    let edges = edges
        .into_iter()
        .map(|(a, b)| (NodeId::new(a), NodeId::new(b)));
    MaximalDigraph::new(n, edges, Some(n - 1)).unwrap()
}

pub fn random_cost(rng: &mut impl Rng) -> CostFunction {
    CostFunction::quadratic(rng.gen_range(0.1..=10.0), rng.gen_range(-5.0..=5.0)).unwrap()
}

/// Chance of attempting an event in a round.
#[derive(Clone, Copy, Debug)]
pub struct ChurnProfile {
    pub rate: f64,
}

impl Default for ChurnProfile {
    fn default() -> Self {
        ChurnProfile { rate: 0.05 }
    }
}

/// Random scenario on at most `MAX_NODES` agents whose active subgraph
/// splits into closed clusters in every round: no active link ever runs
/// between two clusters. At most one event happens per round.
pub fn random_experiment(seed: u64, rounds: usize, churn: ChurnProfile) -> Experiment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=MAX_NODES);
    let graph = random_graph(&mut rng, n);

    let mut active = ActivationVector::all(n);
    if rng.gen_bool(0.3) {
        let drop = NodeId::new(rng.gen_range(0..n));
        active.set(drop, false);
        if !is_closed(&graph, &active) {
            active.set(drop, true);
        }
    }
    let initial: Vec<Arrival> = active
        .active_nodes()
        .into_iter()
        .map(|agent| Arrival {
            agent,
            x_hat: rng.gen_range(1.0..=5.0),
            cost: random_cost(&mut rng),
        })
        .collect();
    let mut lipschitz: Vec<f64> = initial.iter().map(|a| a.cost.lipschitz()).collect();

    let mut events = Vec::new();
    for round in 1..=rounds {
        if !rng.gen_bool(churn.rate) {
            continue;
        }
        let agent = NodeId::new(rng.gen_range(0..n));
        let leaving = active.is_active(agent);
        let mut next = active.clone();
        next.set(agent, !leaving);
        if next.active_count() == 0 || !is_closed(&graph, &next) {
            continue;
        }
        let kind = if leaving {
            EventKind::Leave
        } else {
            let cost = random_cost(&mut rng);
            lipschitz.push(cost.lipschitz());
            EventKind::Join {
                x_hat: rng.gen_range(1.0..=5.0),
                cost,
            }
        };
        events.push(ChurnEvent { round, agent, kind });
        active = next;
    }
    let gamma = auto_step_size(lipschitz);
    Experiment::new(graph, gamma, rounds, seed, initial, events)
}
