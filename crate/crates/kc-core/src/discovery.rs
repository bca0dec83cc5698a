//! Edge-ablation circuit discovery.
//!
//! Destination nodes are visited in reverse topological order; each incoming
//! edge (sources in descending topological order) is scored against the
//! current pruned mask by the drop in target log-probability its removal
//! causes, averaged over the batch. Edges scoring below the threshold are
//! removed immediately, so later scores are computed under the already
//! pruned mask. Removal convention: an edge is removed when `score < tau`,
//! which also removes edges whose removal *helps* (negative scores).
//!
//! Per prompt, the engine caches every node output under the current mask;
//! testing an edge recomputes only nodes downstream of the edge's
//! destination whose inputs actually changed, and the output node is
//! re-evaluated at the last position only. Assembly always sums in the same
//! fixed order as a from-scratch masked run, so incremental and from-scratch
//! results are identical.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TokenizedPrompt;
use crate::error::{Error, Result};
use crate::graph::{Circuit, ConnectivityRule, NodeId, Provenance};
use crate::model::{Ablation, Model, NodeEval, ReferenceMeans, RunOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Zero,
    Mean,
}

impl std::fmt::Display for AblationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AblationKind::Zero => write!(f, "zero"),
            AblationKind::Mean => write!(f, "mean"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscoveryConfig {
    /// Pruning threshold; edges with score below it are removed.
    pub tau: f64,
    pub ablation: AblationKind,
    /// Record every evaluated edge for replay/plotting.
    pub log_scores: bool,
    /// Identifier echoed into the circuit provenance.
    pub dataset_id: String,
    /// RFC 3339 timestamp for the provenance; when `None`, taken from
    /// `SOURCE_DATE_EPOCH` or the current time.
    pub timestamp: Option<String>,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig {
            tau: 0.02,
            ablation: AblationKind::Zero,
            log_scores: true,
            dataset_id: String::new(),
            timestamp: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredEdge {
    pub src: String,
    pub dst: String,
    pub score: f64,
    pub kept: bool,
    pub order: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiscoveryStats {
    pub tau: f64,
    pub ablation: AblationKind,
    pub metric: String,
    pub dataset_id: String,
    pub batch_size: usize,
    pub edges_evaluated: usize,
    /// Candidate masked-forward evaluations (edges × batch).
    pub forward_passes: usize,
    pub wall_time_secs: f64,
    pub connected: bool,
}

#[derive(Debug, Clone)]
pub struct DiscoveryResult {
    pub circuit: Circuit,
    scored: Option<Vec<ScoredEdge>>,
    pub stats: DiscoveryStats,
}

impl DiscoveryResult {
    /// Ordered (edge, score, kept) log in evaluation order. Errors when the
    /// run did not record scores.
    pub fn progress(&self) -> Result<&[ScoredEdge]> {
        self.scored
            .as_deref()
            .ok_or_else(|| Error::invalid("discovery ran with score logging disabled"))
    }
}

/// Per-prompt incremental engine state: node outputs under the current mask
/// and the target's log-probability at the last position.
struct PromptEngine {
    tokens: Vec<u32>,
    target: u32,
    outputs: Vec<Array2<f32>>,
    logp: f64,
}

/// Candidate state produced by testing one edge removal.
struct Candidate {
    logp: f64,
    changed: HashMap<usize, Array2<f32>>,
}

impl PromptEngine {
    fn init(
        model: &Model,
        prompt: &TokenizedPrompt,
        mask: &Circuit,
        means: Option<&ReferenceMeans>,
    ) -> Result<Self> {
        if prompt.target_first_token as usize >= model.config.vocab_size {
            return Err(Error::invalid("target token out of vocabulary"));
        }
        let opts = RunOptions {
            ablation: means.map_or(Ablation::Zero, Ablation::Mean),
            keep_attn: false,
        };
        let (logits, cache) = model.run_masked_opts(&prompt.tokens, mask, &opts)?;
        let node_count = model.graph.node_count();
        let outputs = (0..node_count - 1)
            .map(|idx| cache.output_by_index(idx).clone())
            .collect();
        let logp = crate::lens::log_prob_of(
            logits.row(prompt.tokens.len() - 1),
            prompt.target_first_token,
        );
        Ok(PromptEngine {
            tokens: prompt.tokens.clone(),
            target: prompt.target_first_token,
            outputs,
            logp,
        })
    }

    fn node_out<'a>(&'a self, changed: &'a HashMap<usize, Array2<f32>>, idx: usize) -> &'a Array2<f32> {
        changed.get(&idx).unwrap_or(&self.outputs[idx])
    }

    /// Assembles a node input under `mask`, optionally skipping one edge
    /// (the candidate removal), reading updated outputs where present.
    /// Summation order matches `Model::assemble_input`.
    fn assemble(
        &self,
        model: &Model,
        mask: &Circuit,
        skip_edge: Option<usize>,
        changed: &HashMap<usize, Array2<f32>>,
        dst: usize,
        means: Option<&ReferenceMeans>,
    ) -> Array2<f32> {
        let seq = self.tokens.len();
        let node = model.graph.node(dst);
        let mut acc = Array2::zeros((seq, model.config.d_model));
        acc += model.bias_to_date(node);
        for eid in model.graph.in_edge_ids(dst) {
            let (src, _) = model.graph.edge(eid);
            let removed = Some(eid) == skip_edge || !mask.contains(eid);
            if !removed {
                acc += self.node_out(changed, src);
            } else if let Some(m) = means {
                acc += &m.mean_rows(src, seq, model.config.d_model);
            }
        }
        acc
    }

    /// Last-position input of the output node (enough for scoring).
    fn assemble_output_last(
        &self,
        model: &Model,
        mask: &Circuit,
        skip_edge: Option<usize>,
        changed: &HashMap<usize, Array2<f32>>,
        means: Option<&ReferenceMeans>,
    ) -> Array1<f32> {
        let last = self.tokens.len() - 1;
        let out_idx = model.graph.output_index();
        let mut acc = model.bias_to_date(NodeId::Output).clone();
        for eid in model.graph.in_edge_ids(out_idx) {
            let (src, _) = model.graph.edge(eid);
            let removed = Some(eid) == skip_edge || !mask.contains(eid);
            if !removed {
                acc += &self.node_out(changed, src).row(last);
            } else if let Some(m) = means {
                acc += &m
                    .mean_rows(src, self.tokens.len(), model.config.d_model)
                    .row(last);
            }
        }
        acc
    }

    fn logp_from_output_input(&self, model: &Model, input_last: Array1<f32>) -> f64 {
        let mat = input_last.insert_axis(ndarray::Axis(0));
        let logits = model.unembed_rows(mat.view());
        crate::lens::log_prob_of(logits.row(0), self.target)
    }

    /// Tests removing `edge_id` under `mask`: recomputes the edge's
    /// destination and every downstream node whose input changed, stopping
    /// where outputs are bit-identical. Returns the candidate target
    /// log-probability and the changed node outputs.
    fn try_remove(
        &self,
        model: &Model,
        mask: &Circuit,
        edge_id: usize,
        means: Option<&ReferenceMeans>,
    ) -> Result<Candidate> {
        let (src, dst) = model.graph.edge(edge_id);
        let mut changed: HashMap<usize, Array2<f32>> = HashMap::new();
        // Removing an edge whose source output is exactly zero is a no-op
        // under zero ablation.
        if means.is_none() && self.outputs[src].iter().all(|&v| v == 0.0) {
            return Ok(Candidate {
                logp: self.logp,
                changed,
            });
        }
        let out_idx = model.graph.output_index();
        for idx in dst..=out_idx {
            let skip = (idx == dst).then_some(edge_id);
            let needs = idx == dst
                || model.graph.in_edge_ids(idx).any(|eid| {
                    let (u, _) = model.graph.edge(eid);
                    mask.contains(eid) && changed.contains_key(&u)
                });
            if !needs {
                continue;
            }
            if idx == out_idx {
                let input_last = self.assemble_output_last(model, mask, skip, &changed, means);
                let logp = self.logp_from_output_input(model, input_last);
                return Ok(Candidate { logp, changed });
            }
            let input = self.assemble(model, mask, skip, &changed, idx, means);
            let node = model.graph.node(idx);
            let out = match model.node_forward(node, input.view())? {
                NodeEval::Stream { output, .. } => output,
                _ => unreachable!("mid nodes produce stream outputs"),
            };
            if out != self.outputs[idx] {
                changed.insert(idx, out);
            }
        }
        // nothing downstream of dst changed the output node's input
        Ok(Candidate {
            logp: self.logp,
            changed,
        })
    }

    fn commit(&mut self, candidate: Candidate) {
        for (idx, out) in candidate.changed {
            self.outputs[idx] = out;
        }
        self.logp = candidate.logp;
    }
}

fn provenance_timestamp(explicit: &Option<String>) -> String {
    if let Some(t) = explicit {
        return t.clone();
    }
    if let Ok(epoch) = std::env::var("SOURCE_DATE_EPOCH") {
        if let Ok(secs) = epoch.parse::<i64>() {
            if let Some(dt) = chrono::DateTime::from_timestamp(secs, 0) {
                return dt.to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
            }
        }
    }
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Scores one edge against `mask`: the mean over the batch of
/// `log p(target | mask) - log p(target | mask without edge)`, probabilities
/// taken at the last prompt position for the target's first token. Positive
/// scores mean removing the edge hurts.
pub fn edge_score(
    model: &Model,
    mask: &Circuit,
    edge: (NodeId, NodeId),
    batch: &[TokenizedPrompt],
    ablation: AblationKind,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let edge_id = model.graph.edge_id(edge.0, edge.1)?;
    if !mask.contains(edge_id) {
        return Err(Error::invalid(format!(
            "edge {} -> {} is not kept by the mask",
            edge.0, edge.1
        )));
    }
    let means = match ablation {
        AblationKind::Zero => None,
        AblationKind::Mean => Some(ReferenceMeans::collect(
            model,
            &batch.iter().map(|p| p.tokens.clone()).collect::<Vec<_>>(),
        )?),
    };
    let engines: Vec<PromptEngine> = batch
        .par_iter()
        .map(|p| PromptEngine::init(model, p, mask, means.as_ref()))
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = engines
        .par_iter()
        .map(|e| {
            e.try_remove(model, mask, edge_id, means.as_ref())
                .map(|c| e.logp - c.logp)
        })
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Runs the full discovery procedure and returns the pruned circuit with
/// per-edge scores and run statistics.
pub fn discover(
    model: &Model,
    batch: &[TokenizedPrompt],
    config: &DiscoveryConfig,
) -> Result<DiscoveryResult> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if !(config.tau > 0.0) {
        return Err(Error::invalid("tau must be positive"));
    }
    let start = Instant::now();
    let means = match config.ablation {
        AblationKind::Zero => None,
        AblationKind::Mean => Some(ReferenceMeans::collect(
            model,
            &batch.iter().map(|p| p.tokens.clone()).collect::<Vec<_>>(),
        )?),
    };
    let mut mask = Circuit::full(Arc::clone(&model.graph));
    let mut engines: Vec<PromptEngine> = batch
        .par_iter()
        .map(|p| PromptEngine::init(model, p, &mask, means.as_ref()))
        .collect::<Result<_>>()?;

    let mut scored: Vec<ScoredEdge> = Vec::with_capacity(model.graph.edge_count());
    let mut order = 0usize;
    let node_count = model.graph.node_count();
    for dst in (1..node_count).rev() {
        let edge_ids: Vec<usize> = model.graph.in_edge_ids(dst).rev().collect();
        for eid in edge_ids {
            let candidates: Vec<Candidate> = engines
                .par_iter()
                .map(|e| e.try_remove(model, &mask, eid, means.as_ref()))
                .collect::<Result<_>>()?;
            let score = engines
                .iter()
                .zip(&candidates)
                .map(|(e, c)| e.logp - c.logp)
                .sum::<f64>()
                / engines.len() as f64;
            let kept = score >= config.tau;
            if !kept {
                mask.remove(eid);
                for (engine, cand) in engines.iter_mut().zip(candidates) {
                    engine.commit(cand);
                }
            }
            if config.log_scores {
                let (s, d) = model.graph.edge_nodes(eid);
                scored.push(ScoredEdge {
                    src: s.to_string(),
                    dst: d.to_string(),
                    score,
                    kept,
                    order,
                });
            }
            order += 1;
        }
    }

    let connected = mask.is_connected(ConnectivityRule::InputOutputPath);
    if !connected {
        log::warn!("discovered circuit has no input-to-output path");
    }
    mask.provenance = Provenance {
        tau: Some(config.tau),
        metric: "match_nll".to_owned(),
        ablation: config.ablation.to_string(),
        dataset_id: config.dataset_id.clone(),
        timestamp: provenance_timestamp(&config.timestamp),
    };
    let stats = DiscoveryStats {
        tau: config.tau,
        ablation: config.ablation,
        metric: "match_nll".to_owned(),
        dataset_id: config.dataset_id.clone(),
        batch_size: batch.len(),
        edges_evaluated: order,
        forward_passes: order * batch.len(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        connected,
    };
    Ok(DiscoveryResult {
        circuit: mask,
        scored: config.log_scores.then_some(scored),
        stats,
    })
}
