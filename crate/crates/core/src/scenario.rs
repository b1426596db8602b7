//! JSON scenario files: schema, validation and resolution into a concrete
//! [`Experiment`].
//!
//! Agent ids in scenario files are one-based labels (`1..=nodes`). An edge
//! `[i, j]` means agent `j` receives from agent `i`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costs::{check_gradient, CostFunction};
use crate::engine::{auto_step_size, Arrival, ChurnEvent, EngineError, EventKind, Experiment};
use crate::topology::{
    active_subgraph, clusters, cross_cluster_edges, exact_diameter, is_beta_strongly_connected,
    subgraph_diameter, EdgeSet, MaximalDigraph, NodeId, NodeSet,
};

/// Range of the uniform draw for `"x_hat": "random"`.
pub const RANDOM_X_HAT: (f64, f64) = (1.0, 5.0);
const GRADIENT_CHECK_POINTS: usize = 100;
const GRADIENT_CHECK_TOLERANCE: f64 = 1e-5;
const GRADIENT_CHECK_SEED: u64 = 0x6772_6164;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum NumberOrWord {
    Number(f64),
    Word(String),
}

/// Step size: a fixed positive value or `"auto"`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NumberOrWord", into = "NumberOrWord")]
pub enum StepSize {
    #[default]
    Auto,
    Fixed(f64),
}

impl TryFrom<NumberOrWord> for StepSize {
    type Error = String;

    fn try_from(v: NumberOrWord) -> Result<Self, Self::Error> {
        match v {
            NumberOrWord::Number(x) => Ok(StepSize::Fixed(x)),
            NumberOrWord::Word(w) if w == "auto" => Ok(StepSize::Auto),
            NumberOrWord::Word(w) => Err(format!("expected a number or \"auto\", got \"{w}\"")),
        }
    }
}

impl From<StepSize> for NumberOrWord {
    fn from(s: StepSize) -> Self {
        match s {
            StepSize::Auto => NumberOrWord::Word("auto".into()),
            StepSize::Fixed(x) => NumberOrWord::Number(x),
        }
    }
}

/// Initial estimate of a (re)joining agent: fixed, or `"random"`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NumberOrWord", into = "NumberOrWord")]
pub enum InitialValue {
    #[default]
    Random,
    Fixed(f64),
}

impl TryFrom<NumberOrWord> for InitialValue {
    type Error = String;

    fn try_from(v: NumberOrWord) -> Result<Self, Self::Error> {
        match v {
            NumberOrWord::Number(x) => Ok(InitialValue::Fixed(x)),
            NumberOrWord::Word(w) if w == "random" => Ok(InitialValue::Random),
            NumberOrWord::Word(w) => Err(format!("expected a number or \"random\", got \"{w}\"")),
        }
    }
}

impl From<InitialValue> for NumberOrWord {
    fn from(v: InitialValue) -> Self {
        match v {
            InitialValue::Random => NumberOrWord::Word("random".into()),
            InitialValue::Fixed(x) => NumberOrWord::Number(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub nodes: usize,
    pub edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diameter_bound: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostSpec {
    /// `a/2 (x - b)^2`
    Quadratic { a: f64, b: f64 },
    /// `scale * ln cosh(x - center)`
    LogCosh { scale: f64, center: f64 },
}

impl CostSpec {
    pub fn build(&self) -> Result<CostFunction, crate::costs::CostError> {
        match *self {
            CostSpec::Quadratic { a, b } => CostFunction::quadratic(a, b),
            CostSpec::LogCosh { scale, center } => CostFunction::log_cosh(scale, center),
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub id: usize,
    pub cost: CostSpec,
    /// Active at round 0.
    #[serde(default = "yes")]
    pub active: bool,
    #[serde(default)]
    pub x_hat: InitialValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventAction {
    Join {
        #[serde(default)]
        x_hat: InitialValue,
        /// New cost on rejoin; defaults to the agent's listed cost.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cost: Option<CostSpec>,
    },
    Leave,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub round: usize,
    pub agent: usize,
    #[serde(flatten)]
    pub action: EventAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Validators {
    /// Window length for the per-cluster joint strong connectivity check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<usize>,
    /// Finite-difference check of non-quadratic cost gradients.
    #[serde(default = "yes")]
    pub gradient_check: bool,
}

impl Default for Validators {
    fn default() -> Self {
        Validators {
            beta: None,
            gradient_check: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub graph: GraphSpec,
    #[serde(default)]
    pub gamma: StepSize,
    pub rounds: usize,
    #[serde(default)]
    pub seed: u64,
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub events: Vec<EventSpec>,
    #[serde(default)]
    pub validators: Validators,
}

/// One validation failure, tied to the offending field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Issue {
    pub field: String,
    pub message: String,
}

impl Issue {
    fn new(field: impl Into<String>, message: impl fmt::Display) -> Self {
        Issue {
            field: field.into(),
            message: message.to_string(),
        }
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}:{line}:{column}: {field}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        /// Dotted path of the offending field, `.` at the top level.
        field: String,
        message: String,
    },
    #[error("invalid scenario:\n{}", format_issues(.0))]
    Invalid(Vec<Issue>),
}

fn format_issues(issues: &[Issue]) -> String {
    let lines: Vec<String> = issues.iter().map(|i| format!("  {i}")).collect();
    lines.join("\n")
}

/// A scenario that passed validation, with the diameter bound and step size
/// filled in.
#[derive(Clone, Debug)]
pub struct ValidatedScenario {
    pub scenario: Scenario,
    pub graph: MaximalDigraph,
    pub gamma: f64,
    pub warnings: Vec<String>,
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<ValidatedScenario, ScenarioError> {
    validate(read_scenario(path)?)
}

/// Reads and parses a scenario file without validating it.
pub fn read_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_unvalidated(&text, path)
}

pub fn parse_scenario(text: &str, path: &Path) -> Result<ValidatedScenario, ScenarioError> {
    validate(parse_unvalidated(text, path)?)
}

fn parse_unvalidated(text: &str, path: &Path) -> Result<Scenario, ScenarioError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let scenario: Scenario = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        let message = inner.to_string();
        let message = match message.rfind(" at line ") {
            Some(i) => message[..i].to_string(),
            None => message,
        };
        ScenarioError::Parse {
            path: path.to_path_buf(),
            line: inner.line(),
            column: inner.column(),
            field,
            message,
        }
    })?;
    de.end().map_err(|e| ScenarioError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        field: ".".into(),
        message: "trailing characters after the scenario".into(),
    })?;
    Ok(scenario)
}

impl GraphSpec {
    /// Exact diameter of the listed graph, ignoring `diameter_bound`.
    pub fn exact_diameter(&self) -> Result<usize, ScenarioError> {
        let mut edges = Vec::new();
        for (i, &[from, to]) in self.edges.iter().enumerate() {
            let (Some(a), Some(b)) = (node(from, self.nodes), node(to, self.nodes)) else {
                return Err(ScenarioError::Invalid(vec![Issue::new(
                    format!("graph.edges[{i}]"),
                    format!(
                        "[{from}, {to}] references an agent outside 1..={}",
                        self.nodes
                    ),
                )]));
            };
            edges.push((a, b));
        }
        MaximalDigraph::new(self.nodes, edges, None)
            .and_then(|g| exact_diameter(&g))
            .map_err(|e| ScenarioError::Invalid(vec![Issue::new("graph", e)]))
    }
}

fn node(label: usize, n: usize) -> Option<NodeId> {
    NodeId::from_label(label).filter(|id| id.index() < n)
}

/// Checks every constraint and reports all failures at once.
pub fn validate(mut scenario: Scenario) -> Result<ValidatedScenario, ScenarioError> {
    let mut issues = Vec::new();
    let mut warnings = Vec::new();
    let n = scenario.graph.nodes;

    if n == 0 {
        issues.push(Issue::new("graph.nodes", "must be at least 1"));
    }
    let mut edges = Vec::new();
    for (i, &[from, to]) in scenario.graph.edges.iter().enumerate() {
        match (node(from, n), node(to, n)) {
            (Some(a), Some(b)) if a != b => edges.push((a, b)),
            (Some(_), Some(_)) => issues.push(Issue::new(
                format!("graph.edges[{i}]"),
                format!("self-loop on agent {from}"),
            )),
            _ => issues.push(Issue::new(
                format!("graph.edges[{i}]"),
                format!("[{from}, {to}] references an agent outside 1..={n}"),
            )),
        }
    }
    let graph = if n > 0 && issues.is_empty() {
        match MaximalDigraph::new(n, edges, scenario.graph.diameter_bound) {
            Ok(g) => Some(g),
            Err(e) => {
                issues.push(Issue::new("graph.diameter_bound", e));
                None
            }
        }
    } else {
        None
    };

    if scenario.rounds == 0 {
        issues.push(Issue::new("rounds", "must be at least 1"));
    }
    if let StepSize::Fixed(g) = scenario.gamma {
        if !(g.is_finite() && g > 0.0) {
            issues.push(Issue::new("gamma", format!("must be positive, got {g}")));
        }
    }

    // Agents: one entry per node with a valid cost.
    let mut costs: BTreeMap<NodeId, CostFunction> = BTreeMap::new();
    let mut custom: Vec<(String, CostFunction)> = Vec::new();
    for (i, a) in scenario.agents.iter().enumerate() {
        let field = format!("agents[{i}]");
        let Some(id) = node(a.id, n) else {
            issues.push(Issue::new(
                format!("{field}.id"),
                format!("{} is outside 1..={n}", a.id),
            ));
            continue;
        };
        if costs.contains_key(&id) {
            issues.push(Issue::new(
                format!("{field}.id"),
                format!("agent {} listed twice", a.id),
            ));
            continue;
        }
        match a.cost.build() {
            Ok(c) => {
                if c.as_quadratic().is_none() {
                    custom.push((format!("{field}.cost"), c.clone()));
                }
                costs.insert(id, c);
            }
            Err(e) => issues.push(Issue::new(format!("{field}.cost"), e)),
        }
        if let InitialValue::Fixed(x) = a.x_hat {
            if !x.is_finite() {
                issues.push(Issue::new(format!("{field}.x_hat"), "must be finite"));
            }
        }
    }
    let missing: Vec<String> = (1..=n)
        .filter(|&l| !scenario.agents.iter().any(|a| a.id == l))
        .map(|l| l.to_string())
        .collect();
    if !missing.is_empty() {
        issues.push(Issue::new(
            "agents",
            format!("no entry for agent(s) {}", missing.join(", ")),
        ));
    }

    let mut lipschitz: Vec<f64> = costs.values().map(CostFunction::lipschitz).collect();
    for (i, e) in scenario.events.iter().enumerate() {
        if let EventAction::Join { x_hat, cost } = &e.action {
            if let Some(spec) = cost {
                match spec.build() {
                    Ok(c) => {
                        lipschitz.push(c.lipschitz());
                        if c.as_quadratic().is_none() {
                            custom.push((format!("events[{i}].cost"), c));
                        }
                    }
                    Err(err) => issues.push(Issue::new(format!("events[{i}].cost"), err)),
                }
            }
            if let InitialValue::Fixed(x) = x_hat {
                if !x.is_finite() {
                    issues.push(Issue::new(format!("events[{i}].x_hat"), "must be finite"));
                }
            }
        }
    }
    if !custom.is_empty() {
        warnings.push(
            "non-quadratic costs present: strong convexity of cluster objectives is not verified"
                .to_string(),
        );
    }
    if scenario.validators.gradient_check {
        let mut rng = ChaCha8Rng::seed_from_u64(GRADIENT_CHECK_SEED);
        for (field, c) in &custom {
            let points: Vec<f64> = (0..GRADIENT_CHECK_POINTS)
                .map(|_| rng.gen_range(-10.0..10.0))
                .collect();
            if let Err(e) = check_gradient(c, points, GRADIENT_CHECK_TOLERANCE) {
                issues.push(Issue::new(field.clone(), e));
            }
        }
    }

    let gamma = match scenario.gamma {
        StepSize::Fixed(g) => g,
        StepSize::Auto => auto_step_size(lipschitz),
    };

    // Schedule and per-round structure need a usable graph and costs.
    if let Some(graph) = &graph {
        if issues.is_empty() {
            let placeholder = skeleton(&scenario, graph, gamma, &costs);
            let schedule = placeholder.schedule_issues();
            for e in &schedule {
                let field = match e {
                    EngineError::InvalidEvent { index, .. } => format!("events[{index}]"),
                    _ => "events".to_string(),
                };
                issues.push(Issue::new(field, e));
            }
            if schedule.is_empty() {
                structure_checks(&scenario, &placeholder, &mut issues, &mut warnings);
            }
        }
    }

    if !issues.is_empty() {
        return Err(ScenarioError::Invalid(issues));
    }
    let graph = graph.expect("validated graph");
    scenario.graph.diameter_bound = Some(graph.diameter_bound());
    scenario.gamma = StepSize::Fixed(gamma);
    Ok(ValidatedScenario {
        scenario,
        graph,
        gamma,
        warnings,
    })
}

/// Experiment with every random value replaced by 0, for structural checks.
fn skeleton(
    scenario: &Scenario,
    graph: &MaximalDigraph,
    gamma: f64,
    costs: &BTreeMap<NodeId, CostFunction>,
) -> Experiment {
    let n = graph.node_count();
    let initial = scenario
        .agents
        .iter()
        .filter(|a| a.active)
        .filter_map(|a| node(a.id, n))
        .map(|agent| Arrival {
            agent,
            x_hat: 0.0,
            cost: costs[&agent].clone(),
        })
        .collect();
    let events = scenario
        .events
        .iter()
        .map(|e| ChurnEvent {
            round: e.round,
            agent: NodeId::from_label(e.agent).unwrap_or(NodeId::new(n)),
            kind: match &e.action {
                EventAction::Leave => EventKind::Leave,
                EventAction::Join { .. } => EventKind::Join {
                    x_hat: 0.0,
                    cost: node(e.agent, n)
                        .and_then(|id| costs.get(&id).cloned())
                        .unwrap_or_else(|| CostFunction::quadratic(1.0, 0.0).expect("valid")),
                },
            },
        })
        .collect();
    Experiment::new(
        graph.clone(),
        gamma,
        scenario.rounds,
        scenario.seed,
        initial,
        events,
    )
}

/// Per-round checks on a valid schedule: cluster diameters against the
/// bound, cross-cluster links, and the optional joint connectivity window.
fn structure_checks(
    scenario: &Scenario,
    exp: &Experiment,
    issues: &mut Vec<Issue>,
    warnings: &mut Vec<String>,
) {
    let graph = &exp.graph;
    let bound = graph.diameter_bound();
    let mut seen_diameter: BTreeSet<NodeSet> = BTreeSet::new();
    let mut leaky_rounds = Vec::new();
    let mut round_edges: Vec<EdgeSet> = Vec::new();
    let mut memberships: BTreeSet<NodeSet> = BTreeSet::new();
    let activations = exp.activations();
    for (round, activation) in activations.iter().enumerate() {
        let edges = active_subgraph(graph, activation).expect("lengths agree");
        let partition = clusters(&edges, &activation.active_nodes());
        for members in partition.clusters() {
            if seen_diameter.insert(members.clone()) {
                let d =
                    subgraph_diameter(members, &edges).expect("clusters are strongly connected");
                if d > bound {
                    issues.push(Issue::new(
                        "graph.diameter_bound",
                        format!(
                            "cluster {} at round {round} has diameter {d}, above the bound {bound}",
                            crate::engine::format_members(members)
                        ),
                    ));
                }
            }
            memberships.insert(members.clone());
        }
        if !cross_cluster_edges(&edges, &partition).is_empty() {
            leaky_rounds.push(round);
        }
        round_edges.push(edges);
    }
    if let Some(&first) = leaky_rounds.first() {
        warnings.push(format!(
            "{} round(s) have links between different clusters (first at round {first}); \
             per-cluster tracking is not conserved there",
            leaky_rounds.len()
        ));
    }
    if let Some(beta) = scenario.validators.beta {
        if beta == 0 {
            issues.push(Issue::new("validators.beta", "must be at least 1"));
            return;
        }
        for members in &memberships {
            let present: Vec<EdgeSet> = activations
                .iter()
                .zip(&round_edges)
                .filter(|(a, _)| members.iter().all(|&m| a.is_active(m)))
                .map(|(_, edges)| {
                    edges
                        .iter()
                        .filter(|(f, t)| members.contains(f) && members.contains(t))
                        .copied()
                        .collect()
                })
                .collect();
            if present.len() >= beta && !is_beta_strongly_connected(&present, beta, members) {
                issues.push(Issue::new(
                    "validators.beta",
                    format!(
                        "cluster {} is not jointly strongly connected over windows of {beta} rounds",
                        crate::engine::format_members(members)
                    ),
                ));
            }
        }
    }
}

impl ValidatedScenario {
    /// Resolves every `"random"` initial value with a generator seeded by
    /// `seed` (or the scenario's own seed). Draw order: initially active
    /// agents by id, then join events in file order.
    pub fn experiment(&self, seed: Option<u64>) -> Experiment {
        let seed = seed.unwrap_or(self.scenario.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = RANDOM_X_HAT;
        let mut draw = |v: InitialValue| match v {
            InitialValue::Fixed(x) => x,
            InitialValue::Random => rng.gen_range(lo..=hi),
        };
        let n = self.graph.node_count();
        let mut agents: Vec<&AgentSpec> = self.scenario.agents.iter().collect();
        agents.sort_by_key(|a| a.id);
        let base: BTreeMap<usize, CostFunction> = agents
            .iter()
            .map(|a| (a.id, a.cost.build().expect("validated cost")))
            .collect();
        let initial = agents
            .iter()
            .filter(|a| a.active)
            .map(|a| Arrival {
                agent: node(a.id, n).expect("validated id"),
                x_hat: draw(a.x_hat),
                cost: base[&a.id].clone(),
            })
            .collect();
        let events = self
            .scenario
            .events
            .iter()
            .map(|e| ChurnEvent {
                round: e.round,
                agent: node(e.agent, n).expect("validated id"),
                kind: match &e.action {
                    EventAction::Leave => EventKind::Leave,
                    EventAction::Join { x_hat, cost } => EventKind::Join {
                        x_hat: draw(*x_hat),
                        cost: match cost {
                            Some(spec) => spec.build().expect("validated cost"),
                            None => base[&e.agent].clone(),
                        },
                    },
                },
            })
            .collect();
        Experiment::new(
            self.graph.clone(),
            self.gamma,
            self.scenario.rounds,
            seed,
            initial,
            events,
        )
    }
}

/// The shipped seven-agent scenario.
///
/// Costs are `1/2 (x - j)^2` for agent `j`, so the full network minimizes at
/// 4 and the two halves left when `v4` is away at 2 and 6. Only `v3`, `v4`
/// and `v5` churn:
///
/// | round | event      | clusters (minimizer)                  |
/// |-------|------------|---------------------------------------|
/// | 0     | all active | {1..7} (4)                            |
/// | 81    | v4 leaves  | {1,2,3} (2), {5,6,7} (6)              |
/// | 150   | v3 leaves  | {1,2} (1.5), {5,6,7} (6)              |
/// | 220   | v5 leaves  | {1,2} (1.5), {6,7} (6.5)              |
/// | 260   | v3 joins   | {1,2,3} (2), {6,7} (6.5)              |
/// | 310   | v4 joins   | {1,2,3,4,6,7} (23/6)                  |
///
/// The intermediate rounds are illustrative.
pub fn default_scenario() -> Scenario {
    let edges = [
        [1, 2],
        [2, 3],
        [3, 1],
        [2, 1],
        [5, 6],
        [6, 7],
        [7, 5],
        [7, 6],
        [2, 4],
        [4, 6],
        [7, 4],
        [4, 1],
    ];
    let join = |round, agent| EventSpec {
        round,
        agent,
        action: EventAction::Join {
            x_hat: InitialValue::Random,
            cost: None,
        },
    };
    let leave = |round, agent| EventSpec {
        round,
        agent,
        action: EventAction::Leave,
    };
    Scenario {
        name: Some("seven-agent churn".into()),
        graph: GraphSpec {
            nodes: 7,
            edges: edges.to_vec(),
            diameter_bound: None,
        },
        gamma: StepSize::Auto,
        rounds: 420,
        seed: 2025,
        agents: (1..=7)
            .map(|j| AgentSpec {
                id: j,
                cost: CostSpec::Quadratic {
                    a: 1.0,
                    b: j as f64,
                },
                active: true,
                x_hat: InitialValue::Random,
            })
            .collect(),
        events: vec![
            leave(81, 4),
            leave(150, 3),
            leave(220, 5),
            join(260, 3),
            join(310, 4),
        ],
        validators: Validators::default(),
    }
}
