//! Serialization: circuit files, score logs, DOT export, trace/report CSVs.
//!
//! Every writer is deterministic byte-for-byte given identical inputs:
//! struct fields serialize in a fixed order, node lists in topological
//! order, edges in canonical edge order, and scores rounded to six
//! significant digits before formatting.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::discovery::ScoredEdge;
use crate::error::{Error, Result};
use crate::eval::{CompletenessReport, IclReport};
use crate::graph::{Circuit, ComputationGraph, NodeId, Provenance};
use crate::lens::LensTrace;

pub const CIRCUIT_SCHEMA_VERSION: u32 = 1;

/// Rounds to six significant digits (score storage precision).
pub fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { 0.0 } else { x };
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CircuitFileEdge {
    pub src: String,
    pub dst: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CircuitFileConfig {
    pub tau: Option<f64>,
    pub metric: String,
    pub ablation: String,
    pub dataset_id: String,
}

/// On-disk circuit schema. Node names follow the `a{l}.h{h}` / `m{l}`
/// convention; `L{l}H{h}` / `MLP{l}` aliases are accepted on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CircuitFile {
    pub schema_version: u32,
    pub model_id: String,
    pub config: CircuitFileConfig,
    pub created_at: String,
    pub nodes: Vec<String>,
    pub edges: Vec<CircuitFileEdge>,
}

impl CircuitFile {
    pub fn from_circuit(
        circuit: &Circuit,
        scores: Option<&[ScoredEdge]>,
        model_id: &str,
    ) -> Self {
        let graph = &circuit.graph;
        let score_of = |src: &str, dst: &str| -> Option<f64> {
            scores.and_then(|list| {
                list.iter()
                    .find(|s| s.src == src && s.dst == dst)
                    .map(|s| round_sig6(s.score))
            })
        };
        let nodes: Vec<String> = circuit
            .node_set()
            .iter()
            .map(|&idx| graph.node(idx).to_string())
            .collect();
        let edges: Vec<CircuitFileEdge> = circuit
            .kept_edge_ids()
            .map(|eid| {
                let (s, d) = graph.edge_nodes(eid);
                let (src, dst) = (s.to_string(), d.to_string());
                let score = score_of(&src, &dst);
                CircuitFileEdge { src, dst, score }
            })
            .collect();
        CircuitFile {
            schema_version: CIRCUIT_SCHEMA_VERSION,
            model_id: model_id.to_owned(),
            config: CircuitFileConfig {
                tau: circuit.provenance.tau,
                metric: circuit.provenance.metric.clone(),
                ablation: circuit.provenance.ablation.clone(),
                dataset_id: circuit.provenance.dataset_id.clone(),
            },
            created_at: circuit.provenance.timestamp.clone(),
            nodes,
            edges,
        }
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("serializable");
        out.push('\n');
        out
    }

    /// Reconstructs the circuit against a graph, validating names, ranges,
    /// and that every edge endpoint appears in the node list.
    pub fn into_circuit(self, graph: Arc<ComputationGraph>) -> Result<(Circuit, Vec<ScoredEdge>)> {
        if self.schema_version != CIRCUIT_SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported schema_version {} (expected {CIRCUIT_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let mut node_ids = Vec::with_capacity(self.nodes.len());
        for name in &self.nodes {
            let node: NodeId = name.parse()?;
            graph
                .node_index(node)
                .map_err(|_| Error::Schema(format!("node `{name}` out of range for this graph")))?;
            node_ids.push(node);
        }
        let mut circuit = Circuit::empty(Arc::clone(&graph));
        let mut scores = Vec::with_capacity(self.edges.len());
        for (i, e) in self.edges.iter().enumerate() {
            let src: NodeId = e.src.parse()?;
            let dst: NodeId = e.dst.parse()?;
            if !node_ids.contains(&src) || !node_ids.contains(&dst) {
                return Err(Error::Schema(format!(
                    "edge {} -> {} references an endpoint missing from `nodes`",
                    e.src, e.dst
                )));
            }
            let eid = graph.edge_id(src, dst).map_err(|_| {
                Error::Schema(format!("edge {} -> {} is not in the graph", e.src, e.dst))
            })?;
            circuit.insert(eid);
            if let Some(score) = e.score {
                scores.push(ScoredEdge {
                    src: src.to_string(),
                    dst: dst.to_string(),
                    score,
                    kept: true,
                    order: i,
                });
            }
        }
        circuit.provenance = Provenance {
            tau: self.config.tau,
            metric: self.config.metric,
            ablation: self.config.ablation,
            dataset_id: self.config.dataset_id,
            timestamp: self.created_at,
        };
        Ok((circuit, scores))
    }
}

pub fn save_circuit(
    circuit: &Circuit,
    scores: Option<&[ScoredEdge]>,
    model_id: &str,
    path: impl AsRef<Path>,
) -> Result<()> {
    let file = CircuitFile::from_circuit(circuit, scores, model_id);
    std::fs::write(path.as_ref(), file.to_json())?;
    Ok(())
}

pub fn load_circuit(
    path: impl AsRef<Path>,
    graph: Arc<ComputationGraph>,
) -> Result<(Circuit, CircuitFile)> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let file: CircuitFile = serde_json::from_str(&text)?;
    let reparsed = file.clone();
    let (circuit, _) = file.into_circuit(graph)?;
    Ok((circuit, reparsed))
}

// ---------------------------------------------------------------------------
// score log (JSON lines)
// ---------------------------------------------------------------------------

pub fn score_log_to_jsonl(scores: &[ScoredEdge]) -> String {
    let mut out = String::new();
    for s in scores {
        let line = serde_json::json!({
            "src": s.src,
            "dst": s.dst,
            "score": round_sig6(s.score),
            "kept": s.kept,
            "order": s.order,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

pub fn load_score_log(path: impl AsRef<Path>) -> Result<Vec<ScoredEdge>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// DOT export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct DotOptions {
    /// Replace runs of MLP->MLP edges through otherwise-unused MLPs with a
    /// single dashed skip edge.
    pub collapse_mlp_chains: bool,
    /// Edges whose |score| falls below this render dashed gray.
    pub score_threshold_display: Option<f64>,
}

/// Renders a circuit as DOT, nodes ranked by layer.
pub fn export_dot(circuit: &Circuit, scores: Option<&[ScoredEdge]>, options: DotOptions) -> String {
    let graph = &circuit.graph;
    let node_name = |idx: usize| graph.node(idx).to_string();
    let score_of = |src: &str, dst: &str| -> Option<f64> {
        scores.and_then(|list| {
            list.iter()
                .find(|s| s.src == src && s.dst == dst)
                .map(|s| s.score)
        })
    };

    let nodes = circuit.node_set();
    let mut kept: Vec<(usize, usize)> = circuit
        .kept_edge_ids()
        .map(|eid| graph.edge(eid))
        .collect();

    let mut hidden_nodes: std::collections::BTreeSet<usize> = std::collections::BTreeSet::new();
    let mut skip_edges: Vec<(usize, usize)> = Vec::new();
    if options.collapse_mlp_chains {
        // interior MLPs whose only kept edges are one MLP in, one MLP out
        let is_mlp = |idx: usize| matches!(graph.node(idx), NodeId::Mlp { .. });
        let candidates: Vec<usize> = nodes.iter().copied().filter(|&i| is_mlp(i)).collect();
        for idx in candidates {
            let ins: Vec<(usize, usize)> = kept.iter().copied().filter(|&(_, d)| d == idx).collect();
            let outs: Vec<(usize, usize)> = kept.iter().copied().filter(|&(s, _)| s == idx).collect();
            if ins.len() == 1 && outs.len() == 1 && is_mlp(ins[0].0) && is_mlp(outs[0].1) {
                hidden_nodes.insert(idx);
                kept.retain(|&(s, d)| !(d == idx || s == idx));
                skip_edges.push((ins[0].0, outs[0].1));
            }
        }
    }

    let mut out = String::new();
    out.push_str("digraph circuit {\n");
    out.push_str("  rankdir=BT;\n");
    out.push_str("  node [shape=box, fontsize=10];\n");
    // rank groups per layer
    out.push_str("  { rank=source; \"input\"; }\n");
    let n_layers = graph.n_layers();
    for layer in 0..n_layers {
        let members: Vec<String> = nodes
            .iter()
            .filter(|&&idx| !hidden_nodes.contains(&idx))
            .filter(|&&idx| graph.node(idx).layer() == Some(layer))
            .map(|&idx| format!("\"{}\"", node_name(idx)))
            .collect();
        if !members.is_empty() {
            out.push_str(&format!("  {{ rank=same; {}; }}\n", members.join("; ")));
        }
    }
    out.push_str("  { rank=sink; \"output\"; }\n");
    for &idx in &nodes {
        if !hidden_nodes.contains(&idx) {
            out.push_str(&format!("  \"{}\";\n", node_name(idx)));
        }
    }
    for &(s, d) in &kept {
        let (sn, dn) = (node_name(s), node_name(d));
        let mut attrs: Vec<String> = Vec::new();
        if let Some(score) = score_of(&sn, &dn) {
            attrs.push(format!("label=\"{}\"", format_score(score)));
            if let Some(thr) = options.score_threshold_display {
                if score.abs() < thr {
                    attrs.push("style=dashed".to_owned());
                    attrs.push("color=gray".to_owned());
                }
            }
        }
        if attrs.is_empty() {
            out.push_str(&format!("  \"{sn}\" -> \"{dn}\";\n"));
        } else {
            out.push_str(&format!("  \"{sn}\" -> \"{dn}\" [{}];\n", attrs.join(", ")));
        }
    }
    for &(s, d) in &skip_edges {
        out.push_str(&format!(
            "  \"{}\" -> \"{}\" [style=dashed];\n",
            node_name(s),
            node_name(d)
        ));
    }
    out.push_str("}\n");
    out
}

fn format_score(score: f64) -> String {
    format!("{}", round_sig6(score))
}

// ---------------------------------------------------------------------------
// CSV writers
// ---------------------------------------------------------------------------

/// `layer,position,rank,prob` rows.
pub fn trace_to_csv(trace: &LensTrace) -> String {
    let mut out = String::from("layer,position,rank,prob\n");
    for p in &trace.points {
        out.push_str(&format!("{},{},{},{}\n", p.layer, p.position, p.rank, p.prob));
    }
    out
}

/// Matrix CSV with a header row of column indices (attention heatmaps etc.).
pub fn matrix_to_csv(matrix: &ndarray::Array2<f32>) -> String {
    let mut out = String::new();
    let cols = matrix.ncols();
    out.push_str(
        &(0..cols)
            .map(|c| format!("c{c}"))
            .collect::<Vec<_>>()
            .join(","),
    );
    out.push('\n');
    for row in matrix.rows() {
        out.push_str(
            &row.iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        out.push('\n');
    }
    out
}

/// One-row CSV mirroring the completeness table layout.
pub fn completeness_to_csv(report: &CompletenessReport) -> String {
    let mut out = String::from(
        "knowledge,edges,tau,val_original,val_circuit,test_original,test_random,test_circuit\n",
    );
    out.push_str(&format!(
        "{},{},{},{},{},{},{},{}\n",
        report.dataset_id,
        report.edge_count,
        report.tau.map_or(String::new(), |t| t.to_string()),
        report.val.full,
        report.val.circuit,
        report.test.full,
        report.test.random,
        report.test.circuit,
    ));
    out
}

/// One-row CSV mirroring the in-context ablation table layout.
pub fn icl_to_csv(report: &IclReport) -> String {
    let mut out = String::from("knowledge,original,ablate_extra,ablate_random\n");
    out.push_str(&format!(
        "{},{:.2},{:.2},{:.2}\n",
        report.dataset_id, report.original_pct, report.ablate_extra_pct, report.ablate_random_pct,
    ));
    out
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path.as_ref(), text)?;
    Ok(())
}

pub use crate::lens::LensPosition as TracePosition;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{random_circuit, ComputationGraph};

    #[test]
    fn save_load_save_is_byte_identical() {
        let graph = ComputationGraph::build_dims(3, 2);
        let mut circuit = random_circuit(Arc::clone(&graph), 12, 9, 1000).unwrap();
        circuit.provenance.tau = Some(0.012345678);
        circuit.provenance.dataset_id = "demo".to_owned();
        circuit.provenance.timestamp = "2024-05-01T00:00:00Z".to_owned();
        let scores: Vec<ScoredEdge> = circuit
            .kept_edge_ids()
            .enumerate()
            .map(|(i, eid)| {
                let (s, d) = graph.edge_nodes(eid);
                ScoredEdge {
                    src: s.to_string(),
                    dst: d.to_string(),
                    score: 0.001234567 * (i as f64 + 1.0),
                    kept: true,
                    order: i,
                }
            })
            .collect();
        let json1 = CircuitFile::from_circuit(&circuit, Some(&scores), "toy").to_json();
        let file: CircuitFile = serde_json::from_str(&json1).unwrap();
        let (loaded, _) = file.clone().into_circuit(Arc::clone(&graph)).unwrap();
        assert_eq!(loaded.kept_mask(), circuit.kept_mask());
        assert_eq!(loaded.provenance, circuit.provenance);
        let rescored: Vec<ScoredEdge> = file.clone().into_circuit(Arc::clone(&graph)).unwrap().1;
        let json2 = CircuitFile::from_circuit(&loaded, Some(&rescored), "toy").to_json();
        assert_eq!(json1, json2);
    }

    #[test]
    fn load_rejects_out_of_range_and_unknown_names() {
        let graph = ComputationGraph::build_dims(2, 2);
        let bad_head = r#"{
            "schema_version": 1, "model_id": "t",
            "config": {"tau": null, "metric": "match_nll", "ablation": "zero", "dataset_id": ""},
            "created_at": "",
            "nodes": ["input", "a13.h99", "output"],
            "edges": [{"src": "input", "dst": "a13.h99"}]
        }"#;
        let file: CircuitFile = serde_json::from_str(bad_head).unwrap();
        assert!(file.into_circuit(Arc::clone(&graph)).is_err());

        let unknown = r#"{
            "schema_version": 1, "model_id": "t",
            "config": {"tau": null, "metric": "match_nll", "ablation": "zero", "dataset_id": ""},
            "created_at": "",
            "nodes": ["input", "zz9", "output"],
            "edges": []
        }"#;
        let file: CircuitFile = serde_json::from_str(unknown).unwrap();
        assert!(file.into_circuit(Arc::clone(&graph)).is_err());

        let wrong_version = r#"{
            "schema_version": 2, "model_id": "t",
            "config": {"tau": null, "metric": "match_nll", "ablation": "zero", "dataset_id": ""},
            "created_at": "", "nodes": [], "edges": []
        }"#;
        let file: CircuitFile = serde_json::from_str(wrong_version).unwrap();
        assert!(matches!(
            file.into_circuit(graph),
            Err(Error::Schema(msg)) if msg.contains("schema_version")
        ));
    }

    #[test]
    fn legacy_names_normalize_on_load() {
        let graph = ComputationGraph::build_dims(16, 12);
        let legacy = r#"{
            "schema_version": 1, "model_id": "t",
            "config": {"tau": null, "metric": "match_nll", "ablation": "zero", "dataset_id": ""},
            "created_at": "",
            "nodes": ["input", "L15H0", "MLP15", "output"],
            "edges": [{"src": "L15H0", "dst": "MLP15"}]
        }"#;
        let file: CircuitFile = serde_json::from_str(legacy).unwrap();
        let (circuit, _) = file.into_circuit(Arc::clone(&graph)).unwrap();
        let rewritten = CircuitFile::from_circuit(&circuit, None, "t");
        assert!(rewritten.nodes.contains(&"a15.h0".to_owned()));
        assert!(rewritten.nodes.contains(&"m15".to_owned()));
        assert_eq!(rewritten.edges[0].src, "a15.h0");
        assert_eq!(rewritten.edges[0].dst, "m15");
    }

    #[test]
    fn empty_circuit_dot_has_endpoints_only() {
        let graph = ComputationGraph::build_dims(2, 2);
        let circuit = crate::graph::Circuit::empty(graph);
        let dot = export_dot(&circuit, None, DotOptions::default());
        assert!(dot.contains("\"input\";"));
        assert!(dot.contains("\"output\";"));
        assert!(!dot.contains("->"));
    }

    #[test]
    fn round_sig6_is_idempotent() {
        for x in [0.0, 1.0, -0.012345678, 3.14159265e-7, 123456.789] {
            let once = round_sig6(x);
            assert_eq!(once, round_sig6(once));
        }
    }
}
