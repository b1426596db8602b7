//! CSV trace and metrics files.
//!
//! Floats are written with 17 significant digits, so reading a file back
//! reproduces the in-memory values exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Trace;

pub const TRACE_HEADER: [&str; 9] = [
    "round", "agent", "active", "cluster", "x", "y", "z", "w", "h",
];
pub const METRICS_HEADER: [&str; 6] = [
    "round",
    "cluster",
    "size",
    "minimizer",
    "error",
    "lemma1_residual",
];

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("trace has no rounds")]
    EmptyTrace,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One agent in one round. `agent` is the one-based label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub agent: usize,
    pub active: u8,
    pub cluster: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub h: u8,
}

/// One cluster in one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub cluster: usize,
    pub size: usize,
    pub minimizer: f64,
    pub error: f64,
    pub lemma1_residual: f64,
}

/// Run parameters written next to the CSV files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub seed: u64,
    pub gamma: f64,
    pub lambda: usize,
    pub rounds: usize,
}

pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn trace_rows(trace: &Trace) -> Vec<TraceRow> {
    trace
        .records
        .iter()
        .flat_map(|r| {
            r.agents.iter().map(move |a| TraceRow {
                round: r.round,
                agent: a.agent.label(),
                active: 1,
                cluster: a.cluster,
                x: a.x,
                y: a.y,
                z: a.z,
                w: a.w,
                h: a.h as u8,
            })
        })
        .collect()
}

pub fn metrics_rows(trace: &Trace) -> Vec<MetricsRow> {
    trace
        .records
        .iter()
        .flat_map(|r| {
            r.clusters.iter().map(move |c| MetricsRow {
                round: r.round,
                cluster: c.index,
                size: c.members.len(),
                minimizer: c.minimizer,
                error: c.error,
                lemma1_residual: c.lemma1_residual,
            })
        })
        .collect()
}

pub fn write_trace<W: Write>(trace: &Trace, out: W) -> Result<(), OutputError> {
    if trace.records.is_empty() {
        return Err(OutputError::EmptyTrace);
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for row in trace_rows(trace) {
        w.write_record([
            row.round.to_string(),
            row.agent.to_string(),
            row.active.to_string(),
            row.cluster.to_string(),
            format_float(row.x),
            format_float(row.y),
            format_float(row.z),
            format_float(row.w),
            row.h.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics<W: Write>(trace: &Trace, out: W) -> Result<(), OutputError> {
    if trace.records.is_empty() {
        return Err(OutputError::EmptyTrace);
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for row in metrics_rows(trace) {
        w.write_record([
            row.round.to_string(),
            row.cluster.to_string(),
            row.size.to_string(),
            format_float(row.minimizer),
            format_float(row.error),
            format_float(row.lemma1_residual),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<(), OutputError> {
    write_trace(trace, BufWriter::new(File::create(path)?))
}

pub fn emit_metrics(trace: &Trace, path: impl AsRef<Path>) -> Result<(), OutputError> {
    write_metrics(trace, BufWriter::new(File::create(path)?))
}

pub fn emit_metadata(meta: &Metadata, path: impl AsRef<Path>) -> Result<(), OutputError> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, meta)?;
    writeln!(f)?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRow>, OutputError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>, OutputError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::CostFunction;
    use crate::engine::{run, Arrival, EngineOptions, Experiment};
    use crate::topology::{MaximalDigraph, NodeId};

    fn lone_agent(rounds: usize) -> Trace {
        let exp = Experiment::new(
            MaximalDigraph::new(1, [], None).unwrap(),
            0.1,
            rounds,
            0,
            vec![Arrival {
                agent: NodeId::new(0),
                x_hat: 1.0 / 3.0,
                cost: CostFunction::quadratic(1.0, 5.0).unwrap(),
            }],
            vec![],
        );
        run(&exp, EngineOptions::default()).unwrap()
    }

    #[test]
    fn one_row_per_agent_round() {
        let trace = lone_agent(1);
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "round,agent,active,cluster,x,y,z,w,h");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,1,1,0,3.3333333333333331e-1,"));
    }

    #[test]
    fn metrics_header() {
        let mut buf = Vec::new();
        write_metrics(&lone_agent(2), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("round,cluster,size,minimizer,error,lemma1_residual\n"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn empty_trace_is_rejected() {
        let trace = Trace {
            seed: 0,
            gamma: 0.1,
            lambda: 0,
            records: vec![],
        };
        assert!(matches!(
            write_trace(&trace, Vec::new()),
            Err(OutputError::EmptyTrace)
        ));
    }

    #[test]
    fn floats_round_trip() {
        for v in [
            0.1,
            1.0 / 3.0,
            -2.7e-300,
            6.02214076e23,
            f64::MIN_POSITIVE,
            4.0,
        ] {
            assert_eq!(format_float(v).parse::<f64>().unwrap(), v);
        }
    }
}
