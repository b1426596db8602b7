//! Gradient-tracking distributed optimization over open directed networks.
//!
//! Agents join and leave a fixed maximal digraph over time. Each active
//! agent runs push-sum gradient tracking with its active out-neighbors,
//! learns its out-degree from one-bit acknowledgements, and floods a
//! departure bit by max-consensus so that every cluster (strongly connected
//! component of the active subgraph) restarts its trackers together. Each
//! cluster then converges to the minimizer of the sum of its members' costs.
//!
//! - [`topology`]: maximal digraph, activation, clusters, diameters
//! - [`costs`]: local costs and cluster minimizers
//! - [`agent`]: per-agent protocol steps
//! - [`engine`]: synchronous round scheduler and trace
//! - [`oracle`]: stacked matrix form used to cross-check the engine
//! - [`scenario`] and [`output`]: JSON scenarios and CSV traces

pub mod agent;
pub mod costs;
pub mod engine;
pub mod oracle;
pub mod output;
pub mod scenario;
pub mod topology;
