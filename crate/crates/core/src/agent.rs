//! Per-agent protocol steps. Every operation is a pure function of the
//! agent's own state and the messages it received in the previous phase.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::costs::{CostError, CostFunction};
use crate::topology::NodeId;

/// Last observed acknowledgement bit per potential out-neighbor. Missing
/// entries read as 0.
pub type AckMap = BTreeMap<NodeId, bool>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("{agent}: step size must be positive and finite, got {gamma}")]
    BadStepSize { agent: NodeId, gamma: f64 },
    #[error("{agent}: {source}")]
    Cost { agent: NodeId, source: CostError },
    #[error("{agent}: push-sum weight became non-positive ({y})")]
    NonPositiveWeight { agent: NodeId, y: f64 },
}

#[derive(Clone, Debug)]
pub struct AgentState {
    pub id: NodeId,
    /// Numerator of the estimate.
    pub x: f64,
    /// Push-sum weight, always positive.
    pub y: f64,
    /// Estimate `x / y`.
    pub z: f64,
    /// Gradient tracker.
    pub w: f64,
    /// Departure flag agreed on in the last round.
    pub h: bool,
    pub prev_acks: AckMap,
    pub cost: CostFunction,
    pub gamma: f64,
}

/// Scaled triple `(c (x - gamma w), c y, c w)` pushed along one link or
/// kept as the self term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    pub sx: f64,
    pub sy: f64,
    pub sw: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataMessage {
    pub from: NodeId,
    pub to: NodeId,
    pub sx: f64,
    pub sy: f64,
    pub sw: f64,
    /// Carried on the wire but never read by the receiver; the agreed flag
    /// comes from max-consensus.
    pub h: bool,
}

impl DataMessage {
    pub fn contribution(&self) -> Contribution {
        Contribution {
            sx: self.sx,
            sy: self.sy,
            sw: self.sw,
        }
    }
}

/// One-bit liveness signal on the reverse control channel. Absence means 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AckMessage {
    pub from: NodeId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DetectionMessage {
    pub from: NodeId,
    pub hbar: bool,
}

/// Outcome of the weight assignment for one sender.
#[derive(Clone, Debug, PartialEq)]
pub struct PushWeights {
    pub out_degree: usize,
    /// `1 / (1 + out_degree)`, applied to self and every active out-neighbor.
    pub weight: f64,
    pub active_out: BTreeSet<NodeId>,
}

/// Outbound traffic of one sender plus the share it keeps for itself.
#[derive(Clone, Debug, PartialEq)]
pub struct Outbound {
    pub retained: Contribution,
    pub messages: Vec<DataMessage>,
}

impl AgentState {
    /// Arrival initialization: `x = x_hat`, `y = 1`, `w = grad f(x_hat)`,
    /// `h = 0`, no acknowledgement history.
    pub fn arrive(
        id: NodeId,
        x_hat: f64,
        cost: CostFunction,
        gamma: f64,
    ) -> Result<Self, AgentError> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(AgentError::BadStepSize { agent: id, gamma });
        }
        let w = cost
            .gradient(x_hat)
            .map_err(|source| AgentError::Cost { agent: id, source })?;
        Ok(AgentState {
            id,
            x: x_hat,
            y: 1.0,
            z: x_hat,
            w,
            h: false,
            prev_acks: AckMap::new(),
            cost,
            gamma,
        })
    }

    /// Counts acknowledgements and records them as the history for the next
    /// round's departure check. Must run after [`detect_departures`] has read
    /// the previous history.
    pub fn assign_push_weights(
        &mut self,
        potential_out: &BTreeSet<NodeId>,
        acks_received: &BTreeSet<NodeId>,
    ) -> PushWeights {
        debug_assert!(acks_received.is_subset(potential_out));
        self.prev_acks = potential_out
            .iter()
            .map(|&l| (l, acks_received.contains(&l)))
            .collect();
        let out_degree = acks_received.len();
        PushWeights {
            out_degree,
            weight: 1.0 / (1 + out_degree) as f64,
            active_out: acks_received.clone(),
        }
    }

    /// Splits `(x - gamma w, y, w)` by `weight` into one message per active
    /// out-neighbor and the locally retained self term.
    pub fn make_outbound(&self, weight: f64, active_out: &BTreeSet<NodeId>) -> Outbound {
        debug_assert!(weight > 0.0 && weight <= 1.0);
        let retained = Contribution {
            sx: weight * (self.x - self.gamma * self.w),
            sy: weight * self.y,
            sw: weight * self.w,
        };
        let messages = active_out
            .iter()
            .map(|&to| DataMessage {
                from: self.id,
                to,
                sx: retained.sx,
                sy: retained.sy,
                sw: retained.sw,
                h: self.h,
            })
            .collect();
        Outbound { retained, messages }
    }

    /// Gradient-tracking update from the retained share and the inbound
    /// messages. With `h_k` set the tracker restarts from the fresh gradient.
    pub fn apply_update(
        &self,
        retained: Contribution,
        inbound: &[DataMessage],
        h_k: bool,
        cost_next: &CostFunction,
    ) -> Result<AgentState, AgentError> {
        let agent = self.id;
        let cost_err = |source| AgentError::Cost { agent, source };
        let mut x = retained.sx;
        let mut y = retained.sy;
        let mut mixed_w = retained.sw;
        for m in inbound {
            x += m.sx;
            y += m.sy;
            mixed_w += m.sw;
        }
        if !(y > 0.0) {
            return Err(AgentError::NonPositiveWeight { agent, y });
        }
        let z = x / y;
        let g_prev = self.cost.gradient(self.z).map_err(cost_err)?;
        let g_next = cost_next.gradient(z).map_err(cost_err)?;
        let w = if h_k {
            g_next
        } else {
            g_next + (mixed_w - g_prev)
        };
        Ok(AgentState {
            id: agent,
            x,
            y,
            z,
            w,
            h: h_k,
            prev_acks: self.prev_acks.clone(),
            cost: cost_next.clone(),
            gamma: self.gamma,
        })
    }

    pub fn ack(&self) -> AckMessage {
        AckMessage { from: self.id }
    }
}

/// Initial detection bit: 1 iff some out-neighbor that acknowledged last
/// round is silent now.
pub fn detect_departures(prev_acks: &AckMap, curr_acks: &AckMap) -> bool {
    prev_acks
        .iter()
        .any(|(l, &was)| was && !curr_acks.get(l).copied().unwrap_or(false))
}

/// One max-consensus iteration over the bits heard from in-neighbors.
pub fn max_consensus_step(own: bool, incoming: impl IntoIterator<Item = bool>) -> bool {
    own || incoming.into_iter().any(|b| b)
}
