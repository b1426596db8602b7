//! Maximal digraph, activation-induced subgraphs and cluster detection.
//!
//! An edge `(from, to)` means `to` receives information from `from`. Every
//! runtime graph is the subgraph of the maximal digraph induced by the
//! currently active agents; clusters are the strongly connected components
//! of that subgraph.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

/// Agent identifier. Stored as a zero-based index, displayed and serialized
/// with its one-based label (`v1`, `v2`, ...).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub const fn new(index: usize) -> Self {
        NodeId(index)
    }

    /// Builds an id from its one-based label. Returns `None` for label 0.
    pub fn from_label(label: usize) -> Option<Self> {
        label.checked_sub(1).map(NodeId)
    }

    pub const fn index(self) -> usize {
        self.0
    }

    pub const fn label(self) -> usize {
        self.0 + 1
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.label())
    }
}

/// Directed edge `(from, to)`.
pub type Edge = (NodeId, NodeId);
pub type EdgeSet = BTreeSet<Edge>;
pub type NodeSet = BTreeSet<NodeId>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("graph must have at least one node")]
    Empty,
    #[error("edge {from}->{to} references a node outside v1..v{node_count}")]
    EdgeOutOfRange {
        from: NodeId,
        to: NodeId,
        node_count: usize,
    },
    #[error("self-loop on {0}; the self weight is implicit")]
    SelfLoop(NodeId),
    #[error("activation vector has length {got}, graph has {expected} nodes")]
    LengthMismatch { expected: usize, got: usize },
    #[error("graph is not strongly connected: {to} is unreachable from {from}")]
    NotStronglyConnected { from: NodeId, to: NodeId },
    #[error("diameter bound {bound} is below the exact diameter {exact}")]
    DiameterBoundTooSmall { bound: usize, exact: usize },
}

/// The full potential network together with the diameter bound used as the
/// number of max-consensus iterations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaximalDigraph {
    node_count: usize,
    edges: EdgeSet,
    out_adj: Vec<Vec<NodeId>>,
    in_adj: Vec<Vec<NodeId>>,
    diameter_bound: usize,
}

impl MaximalDigraph {
    /// Builds the graph and fixes its diameter bound.
    ///
    /// With `diameter_bound == None` the bound is the exact diameter, which
    /// requires a strongly connected graph. An explicit bound is checked
    /// against the exact diameter whenever the latter exists.
    pub fn new(
        node_count: usize,
        edges: impl IntoIterator<Item = Edge>,
        diameter_bound: Option<usize>,
    ) -> Result<Self, TopologyError> {
        if node_count == 0 {
            return Err(TopologyError::Empty);
        }
        let mut set = EdgeSet::new();
        for (from, to) in edges {
            if from.index() >= node_count || to.index() >= node_count {
                return Err(TopologyError::EdgeOutOfRange {
                    from,
                    to,
                    node_count,
                });
            }
            if from == to {
                return Err(TopologyError::SelfLoop(from));
            }
            set.insert((from, to));
        }
        let mut out_adj = vec![Vec::new(); node_count];
        let mut in_adj = vec![Vec::new(); node_count];
        for &(from, to) in &set {
            out_adj[from.index()].push(to);
            in_adj[to.index()].push(from);
        }
        let mut graph = MaximalDigraph {
            node_count,
            edges: set,
            out_adj,
            in_adj,
            diameter_bound: 0,
        };
        graph.diameter_bound = match (diameter_bound, exact_diameter(&graph)) {
            (None, exact) => exact?,
            (Some(bound), Ok(exact)) if bound < exact => {
                return Err(TopologyError::DiameterBoundTooSmall { bound, exact })
            }
            (Some(bound), _) => bound,
        };
        Ok(graph)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &EdgeSet {
        &self.edges
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.node_count).map(NodeId::new)
    }

    /// Potential out-neighbors, sorted by id.
    pub fn out_neighbors(&self, node: NodeId) -> &[NodeId] {
        &self.out_adj[node.index()]
    }

    /// Potential in-neighbors, sorted by id.
    pub fn in_neighbors(&self, node: NodeId) -> &[NodeId] {
        &self.in_adj[node.index()]
    }

    pub fn has_edge(&self, from: NodeId, to: NodeId) -> bool {
        self.edges.contains(&(from, to))
    }

    /// Number of max-consensus iterations agents run per round.
    pub fn diameter_bound(&self) -> usize {
        self.diameter_bound
    }
}

/// Indicator of which agents are active at a given round.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ActivationVector(Vec<bool>);

impl ActivationVector {
    pub fn new(bits: Vec<bool>) -> Self {
        ActivationVector(bits)
    }

    pub fn all(n: usize) -> Self {
        ActivationVector(vec![true; n])
    }

    pub fn none(n: usize) -> Self {
        ActivationVector(vec![false; n])
    }

    pub fn from_active(n: usize, active: impl IntoIterator<Item = NodeId>) -> Self {
        let mut bits = vec![false; n];
        for id in active {
            bits[id.index()] = true;
        }
        ActivationVector(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_active(&self, id: NodeId) -> bool {
        self.0.get(id.index()).copied().unwrap_or(false)
    }

    pub fn set(&mut self, id: NodeId, active: bool) {
        self.0[id.index()] = active;
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn active_nodes(&self) -> NodeSet {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| NodeId::new(i))
            .collect()
    }
}

/// Partition of the active agents into clusters (strongly connected
/// components of the activation-induced subgraph).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClusterPartition {
    clusters: Vec<NodeSet>,
    cluster_of: BTreeMap<NodeId, usize>,
}

impl ClusterPartition {
    /// Clusters ordered by their smallest member.
    pub fn from_components(mut components: Vec<NodeSet>) -> Self {
        components.retain(|c| !c.is_empty());
        components.sort_by_key(|c| c.first().copied());
        let mut cluster_of = BTreeMap::new();
        for (q, members) in components.iter().enumerate() {
            for &id in members {
                cluster_of.insert(id, q);
            }
        }
        ClusterPartition {
            clusters: components,
            cluster_of,
        }
    }

    pub fn clusters(&self) -> &[NodeSet] {
        &self.clusters
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn cluster_of(&self, id: NodeId) -> Option<usize> {
        self.cluster_of.get(&id).copied()
    }
}

/// Edges of the maximal graph whose endpoints are both active.
pub fn active_subgraph(
    graph: &MaximalDigraph,
    activation: &ActivationVector,
) -> Result<EdgeSet, TopologyError> {
    if activation.len() != graph.node_count() {
        return Err(TopologyError::LengthMismatch {
            expected: graph.node_count(),
            got: activation.len(),
        });
    }
    Ok(graph
        .edges()
        .iter()
        .filter(|(from, to)| activation.is_active(*from) && activation.is_active(*to))
        .copied()
        .collect())
}

fn adjacency(nodes: &NodeSet, edges: &EdgeSet) -> BTreeMap<NodeId, Vec<NodeId>> {
    let mut adj: BTreeMap<NodeId, Vec<NodeId>> = nodes.iter().map(|&n| (n, Vec::new())).collect();
    for &(from, to) in edges {
        if nodes.contains(&from) && nodes.contains(&to) {
            adj.get_mut(&from).expect("node present").push(to);
        }
    }
    adj
}

/// Strongly connected components of `(active, edges)` via iterative Tarjan.
/// Edges with an endpoint outside `active` are ignored.
pub fn clusters(edges: &EdgeSet, active: &NodeSet) -> ClusterPartition {
    let adj = adjacency(active, edges);
    let nodes: Vec<NodeId> = active.iter().copied().collect();
    let pos: BTreeMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let succ: Vec<Vec<usize>> = nodes
        .iter()
        .map(|n| adj[n].iter().map(|m| pos[m]).collect())
        .collect();

    const UNVISITED: usize = usize::MAX;
    let count = nodes.len();
    let mut index = vec![UNVISITED; count];
    let mut low = vec![0; count];
    let mut on_stack = vec![false; count];
    let mut stack = Vec::new();
    let mut next_index = 0;
    let mut components = Vec::new();

    for root in 0..count {
        if index[root] != UNVISITED {
            continue;
        }
        // (node, next successor position)
        let mut call: Vec<(usize, usize)> = vec![(root, 0)];
        index[root] = next_index;
        low[root] = next_index;
        next_index += 1;
        stack.push(root);
        on_stack[root] = true;

        while let Some(&mut (v, ref mut i)) = call.last_mut() {
            if *i < succ[v].len() {
                let w = succ[v][*i];
                *i += 1;
                if index[w] == UNVISITED {
                    index[w] = next_index;
                    low[w] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                call.pop();
                if let Some(&(parent, _)) = call.last() {
                    low[parent] = low[parent].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut component = NodeSet::new();
                    loop {
                        let w = stack.pop().expect("tarjan stack");
                        on_stack[w] = false;
                        component.insert(nodes[w]);
                        if w == v {
                            break;
                        }
                    }
                    components.push(component);
                }
            }
        }
    }
    ClusterPartition::from_components(components)
}

/// Active edges that join two different clusters. Mass leaks across such
/// edges, so per-cluster conservation only holds when this is empty.
pub fn cross_cluster_edges(edges: &EdgeSet, partition: &ClusterPartition) -> Vec<Edge> {
    edges
        .iter()
        .filter(
            |(from, to)| match (partition.cluster_of(*from), partition.cluster_of(*to)) {
                (Some(a), Some(b)) => a != b,
                _ => false,
            },
        )
        .copied()
        .collect()
}

fn bfs_distances(adj: &BTreeMap<NodeId, Vec<NodeId>>, source: NodeId) -> BTreeMap<NodeId, usize> {
    let mut dist = BTreeMap::new();
    dist.insert(source, 0);
    let mut queue = VecDeque::from([source]);
    while let Some(v) = queue.pop_front() {
        let d = dist[&v];
        for &w in &adj[&v] {
            if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(w) {
                e.insert(d + 1);
                queue.push_back(w);
            }
        }
    }
    dist
}

/// Diameter of the subgraph induced by `nodes`: the longest shortest
/// directed path over ordered pairs. Errors on the first unreachable pair.
pub fn subgraph_diameter(nodes: &NodeSet, edges: &EdgeSet) -> Result<usize, TopologyError> {
    let adj = adjacency(nodes, edges);
    let mut diameter = 0;
    for &source in nodes {
        let dist = bfs_distances(&adj, source);
        for &target in nodes {
            match dist.get(&target) {
                Some(&d) => diameter = diameter.max(d),
                None => {
                    return Err(TopologyError::NotStronglyConnected {
                        from: source,
                        to: target,
                    })
                }
            }
        }
    }
    Ok(diameter)
}

/// Exact diameter of the whole maximal graph.
pub fn exact_diameter(graph: &MaximalDigraph) -> Result<usize, TopologyError> {
    let nodes: NodeSet = graph.nodes().collect();
    subgraph_diameter(&nodes, graph.edges())
}

/// Whether `(nodes, edges)` is strongly connected. The empty set and
/// singletons count as strongly connected.
pub fn is_strongly_connected(nodes: &NodeSet, edges: &EdgeSet) -> bool {
    let Some(&first) = nodes.first() else {
        return true;
    };
    let forward = adjacency(nodes, edges);
    let reversed: EdgeSet = edges.iter().map(|&(a, b)| (b, a)).collect();
    let backward = adjacency(nodes, &reversed);
    bfs_distances(&forward, first).len() == nodes.len()
        && bfs_distances(&backward, first).len() == nodes.len()
}

/// Checks that, for every aligned window of `beta` consecutive rounds, the
/// union of the rounds' edge sets is strongly connected on `nodes`.
/// A trailing partial window is ignored.
pub fn is_beta_strongly_connected(rounds: &[EdgeSet], beta: usize, nodes: &NodeSet) -> bool {
    if beta == 0 || rounds.len() < beta {
        return false;
    }
    rounds.chunks_exact(beta).all(|window| {
        let union: EdgeSet = window.iter().flatten().copied().collect();
        is_strongly_connected(nodes, &union)
    })
}

/// The shipped seven-agent maximal graph: two triangles with chords joined
/// only through `v4`, so removing `v4` always leaves two separate clusters.
pub fn default_digraph() -> MaximalDigraph {
    let labelled = [
        (1, 2),
        (2, 3),
        (3, 1),
        (2, 1),
        (5, 6),
        (6, 7),
        (7, 5),
        (7, 6),
        (2, 4),
        (4, 6),
        (7, 4),
        (4, 1),
    ];
    let edges = labelled
        .iter()
        .map(|&(a, b)| (NodeId::new(a - 1), NodeId::new(b - 1)));
    MaximalDigraph::new(7, edges, None).expect("default graph is strongly connected")
}
