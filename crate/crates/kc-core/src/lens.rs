//! Logit-lens projections, rank/probability traces, attention-pattern
//! profiles, and head classification.
//!
//! All lens projections use the model's *final* norm (not the sublayer
//! norms) before the unembedding. Early-layer readings are therefore
//! distorted relative to what those layers "see" locally; this is inherent
//! to the method and is not corrected here.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::Serialize;

use crate::bpe::BpeTokenizer;
use crate::config::NormKind;
use crate::data::TokenizedPrompt;
use crate::error::{Error, Result};
use crate::graph::{Circuit, NodeId};
use crate::model::{ActivationCache, Model};

/// Rank of a token among logits: 1 + the number of strictly larger logits;
/// ties broken in favor of the lower token id.
pub fn rank_of(logits: ArrayView1<f32>, token: u32) -> usize {
    let t = token as usize;
    let lt = logits[t];
    let mut rank = 1;
    for (j, &l) in logits.iter().enumerate() {
        if l > lt || (l == lt && j < t) {
            rank += 1;
        }
    }
    rank
}

/// Softmax probabilities accumulated in f64 (stable and deterministic).
pub fn softmax_f64(logits: ArrayView1<f32>) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| ((l as f64) - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

pub fn prob_of(logits: ArrayView1<f32>, token: u32) -> f64 {
    softmax_f64(logits)[token as usize]
}

pub fn log_prob_of(logits: ArrayView1<f32>, token: u32) -> f64 {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let denom: f64 = logits.iter().map(|&l| ((l as f64) - max).exp()).sum();
    (logits[token as usize] as f64) - max - denom.ln()
}

/// Projects one residual-stream state through the final norm and the
/// unembedding. Errors on a zero vector under rmsnorm, whose normalization
/// is undefined.
pub fn unembed(model: &Model, state: ArrayView1<f32>) -> Result<Array1<f32>> {
    if model.config.norm_kind == NormKind::Rmsnorm && state.iter().all(|&v| v == 0.0) {
        return Err(Error::NormDegenerate);
    }
    let mat = state.insert_axis(Axis(0));
    Ok(model.unembed_rows(mat).row(0).to_owned())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LensPosition {
    Last,
    LastSubject,
}

impl std::fmt::Display for LensPosition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LensPosition::Last => write!(f, "last"),
            LensPosition::LastSubject => write!(f, "last_subject"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LensPoint {
    pub layer: usize,
    pub position: LensPosition,
    pub rank: usize,
    pub prob: f64,
}

/// Per-layer rank and probability of a target token, read from the
/// cumulative residual after each layer's MLP contribution.
#[derive(Debug, Clone, Serialize)]
pub struct LensTrace {
    pub target: u32,
    pub points: Vec<LensPoint>,
}

impl LensTrace {
    pub fn final_point(&self, position: LensPosition) -> Option<&LensPoint> {
        self.points
            .iter()
            .filter(|p| p.position == position)
            .max_by_key(|p| p.layer)
    }
}

/// Cumulative residual snapshots after each layer's MLP (bias stream to
/// date first, then node outputs in ascending topological order — the same
/// summation order the output node uses, so the final layer reproduces the
/// model's own logits exactly).
pub fn residual_snapshots(model: &Model, cache: &ActivationCache, seq: usize) -> Vec<Array2<f32>> {
    let n_layers = model.config.n_layers;
    let mut snaps = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let upto = model
            .graph
            .node_index(NodeId::Mlp { layer })
            .expect("valid layer");
        let mut acc: Array2<f32> = Array2::zeros((seq, model.config.d_model));
        acc += model.bias_through_mlp(layer);
        for idx in 0..=upto {
            acc += cache.output_by_index(idx);
        }
        snaps.push(acc);
    }
    snaps
}

/// Traces the target's rank and probability per layer at the last token and
/// the last subject token.
pub fn trace_target(
    model: &Model,
    prompt: &TokenizedPrompt,
    target: u32,
) -> Result<LensTrace> {
    if prompt.subject_span.1 == 0 || prompt.subject_span.1 > prompt.tokens.len() {
        return Err(Error::invalid("prompt has no annotated subject span"));
    }
    let positions = [
        (LensPosition::Last, prompt.last_position()),
        (LensPosition::LastSubject, prompt.last_subject_position()),
    ];
    trace_target_at(model, &prompt.tokens, target, &positions)
}

/// Trace over explicit (kind, position) pairs; used directly when no
/// subject annotation exists.
pub fn trace_target_at(
    model: &Model,
    tokens: &[u32],
    target: u32,
    positions: &[(LensPosition, usize)],
) -> Result<LensTrace> {
    if target as usize >= model.config.vocab_size {
        return Err(Error::invalid("target token out of vocabulary"));
    }
    let (_, cache) = model.run_full(tokens)?;
    let snaps = residual_snapshots(model, &cache, tokens.len());
    let mut points = Vec::new();
    for (layer, snap) in snaps.iter().enumerate() {
        let logits = model.unembed_rows(snap.view());
        for &(kind, pos) in positions {
            if pos >= tokens.len() {
                return Err(Error::invalid(format!("position {pos} out of range")));
            }
            let row = logits.row(pos);
            points.push(LensPoint {
                layer,
                position: kind,
                rank: rank_of(row, target),
                prob: prob_of(row, target),
            });
        }
    }
    Ok(LensTrace { target, points })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SpanMass {
    pub subject: f64,
    pub relation: f64,
    pub other: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TopToken {
    pub token: u32,
    pub text: String,
    pub logit: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HeadClass {
    Mover,
    Relation,
    Mixture,
    Other,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ClassifyThresholds {
    pub theta_span: f64,
    pub theta_mix: f64,
    pub k: usize,
}

impl Default for ClassifyThresholds {
    fn default() -> Self {
        ClassifyThresholds {
            theta_span: 0.5,
            theta_mix: 0.3,
            k: 10,
        }
    }
}

/// One head's behavior on one prompt: last-row attention distribution,
/// attention mass over the annotated spans, the head output's top lens
/// tokens, and the resulting class.
#[derive(Debug, Clone, Serialize)]
pub struct HeadProfile {
    pub head: String,
    pub attention_from_last: Vec<f32>,
    pub span_mass: SpanMass,
    pub top_tokens: Vec<TopToken>,
    pub class: HeadClass,
    pub thresholds: ClassifyThresholds,
}

/// Pure classification rule:
/// mover = subject mass ≥ θ_span and the target among the top-k lens
/// tokens; relation = relation mass ≥ θ_span and the top-k intersects the
/// relation hints; mixture = both masses ≥ θ_mix when neither single-span
/// rule fired; otherwise other.
pub fn classify_head(
    span_mass: SpanMass,
    top_tokens: &[u32],
    target: u32,
    relation_hints: &[u32],
    t: ClassifyThresholds,
) -> Result<HeadClass> {
    let top = &top_tokens[..top_tokens.len().min(t.k)];
    if span_mass.subject >= t.theta_span && top.contains(&target) {
        return Ok(HeadClass::Mover);
    }
    if span_mass.relation >= t.theta_span {
        if relation_hints.is_empty() {
            return Err(Error::invalid(
                "relation verdict tested with empty relation_hint_tokens",
            ));
        }
        if top.iter().any(|tok| relation_hints.contains(tok)) {
            return Ok(HeadClass::Relation);
        }
    }
    if span_mass.subject >= t.theta_mix && span_mass.relation >= t.theta_mix {
        return Ok(HeadClass::Mixture);
    }
    Ok(HeadClass::Other)
}

/// Token ids a relation hint may surface as (with and without the leading
/// space).
pub fn relation_hint_ids(tokenizer: &BpeTokenizer, hints: &[String]) -> Vec<u32> {
    let mut ids = Vec::new();
    for h in hints {
        for form in [format!(" {h}"), h.clone()] {
            if let Ok(first) = tokenizer.first_token(&form) {
                if !ids.contains(&first) {
                    ids.push(first);
                }
            }
        }
    }
    ids
}

/// Profiles one head on a prompt whose cache came from a full run.
pub fn head_profile(
    model: &Model,
    cache: &ActivationCache,
    prompt: &TokenizedPrompt,
    layer: usize,
    head: usize,
    thresholds: ClassifyThresholds,
    tokenizer: Option<&BpeTokenizer>,
) -> Result<HeadProfile> {
    let node = NodeId::Attn { layer, head };
    let pattern = cache
        .attn_pattern(layer, head)
        .ok_or_else(|| Error::invalid("cache has no attention patterns; run with keep_attn"))?;
    let last = prompt.last_position();
    let attention_from_last: Vec<f32> = pattern.row(last).to_vec();

    let mut subject = 0.0f64;
    let mut relation = 0.0f64;
    let mut total = 0.0f64;
    for (pos, &w) in attention_from_last.iter().enumerate() {
        let w = w as f64;
        total += w;
        if pos >= prompt.subject_span.0 && pos < prompt.subject_span.1 {
            subject += w;
        } else if prompt.relation_span.contains(&pos) {
            relation += w;
        }
    }
    let span_mass = SpanMass {
        subject,
        relation,
        other: total - subject - relation,
    };

    let output = cache
        .node_output(&model.graph, node)
        .ok_or_else(|| Error::invalid("cache missing head output"))?;
    let logits = unembed(model, output.row(last))?;
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let top_tokens: Vec<TopToken> = order
        .iter()
        .take(thresholds.k)
        .map(|&i| TopToken {
            token: i as u32,
            text: tokenizer
                .and_then(|t| t.token_text(i as u32).ok())
                .unwrap_or_default(),
            logit: logits[i],
        })
        .collect();

    let hint_ids = tokenizer
        .map(|t| relation_hint_ids(t, &prompt.triplet.relation_hint_tokens))
        .unwrap_or_default();
    let top_ids: Vec<u32> = top_tokens.iter().map(|t| t.token).collect();
    let class = classify_head(
        span_mass,
        &top_ids,
        prompt.target_first_token,
        &hint_ids,
        thresholds,
    )?;
    Ok(HeadProfile {
        head: node.to_string(),
        attention_from_last,
        span_mass,
        top_tokens,
        class,
        thresholds,
    })
}

/// Next-token probability deltas from removing all outgoing edges of one
/// head: `p(run without head) - p(full run)` per token, sorted by delta
/// (rises first). Deltas sum to zero up to float tolerance.
#[derive(Debug, Clone, Serialize)]
pub struct AblationEffect {
    pub head: String,
    pub deltas: Vec<(u32, f64)>,
}

impl AblationEffect {
    pub fn rises(&self, n: usize) -> &[(u32, f64)] {
        &self.deltas[..n.min(self.deltas.len())]
    }

    pub fn drops(&self, n: usize) -> Vec<(u32, f64)> {
        let mut tail: Vec<(u32, f64)> = self
            .deltas
            .iter()
            .rev()
            .take(n)
            .cloned()
            .collect();
        tail.retain(|&(_, d)| d < 0.0);
        tail
    }
}

pub fn head_ablation_effect(
    model: &Model,
    tokens: &[u32],
    layer: usize,
    head: usize,
) -> Result<AblationEffect> {
    let node = NodeId::Attn { layer, head };
    let node_idx = model.graph.node_index(node)?;
    let (full_logits, _) = model.run_full(tokens)?;
    let mut circuit = Circuit::full(std::sync::Arc::clone(&model.graph));
    for &eid in model.graph.out_edge_ids(node_idx) {
        circuit.remove(eid);
    }
    let (ablated_logits, _) = model.run_masked(tokens, &circuit)?;
    let last = tokens.len() - 1;
    let p_full = softmax_f64(full_logits.row(last));
    let p_ablate = softmax_f64(ablated_logits.row(last));
    let mut deltas: Vec<(u32, f64)> = p_full
        .iter()
        .zip(p_ablate.iter())
        .enumerate()
        .map(|(i, (&f, &a))| (i as u32, a - f))
        .collect();
    deltas.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    Ok(AblationEffect {
        head: node.to_string(),
        deltas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    #[test]
    fn rank_breaks_ties_by_lower_token_id() {
        let logits = ndarray::arr1(&[1.0f32, 2.0, 2.0, 0.5]);
        assert_eq!(rank_of(logits.view(), 1), 1);
        assert_eq!(rank_of(logits.view(), 2), 2);
        assert_eq!(rank_of(logits.view(), 0), 3);
        assert_eq!(rank_of(logits.view(), 3), 4);
    }

    #[test]
    fn unembed_matches_model_argmax() {
        let (config, weights) = synthetic::random_toy(2, 2, 16, 32, 11);
        let model = crate::model::Model::new(config, weights).unwrap();
        let tokens = [3, 7, 1];
        let (logits, cache) = model.run_full(&tokens).unwrap();
        let mut resid = cache.bias_stream.clone();
        for idx in 0..model.graph.node_count() - 1 {
            resid += cache.output_by_index(idx);
        }
        let lens = unembed(&model, resid.row(2)).unwrap();
        let model_row = logits.row(2);
        let argmax_lens = (0..lens.len()).max_by(|&a, &b| lens[a].total_cmp(&lens[b])).unwrap();
        let argmax_model = (0..model_row.len())
            .max_by(|&a, &b| model_row[a].total_cmp(&model_row[b]))
            .unwrap();
        assert_eq!(argmax_lens, argmax_model);
    }

    #[test]
    fn rmsnorm_zero_vector_is_an_error() {
        let (mut config, weights) = synthetic::grouped_query_toy(5);
        config.model_id = Some("t".to_owned());
        let model = crate::model::Model::new(config, weights).unwrap();
        let zero = Array1::<f32>::zeros(model.config.d_model);
        assert!(matches!(
            unembed(&model, zero.view()),
            Err(Error::NormDegenerate)
        ));
    }

    #[test]
    fn classification_rules_fire_as_specified() {
        let t = ClassifyThresholds::default();
        let mover_mass = SpanMass { subject: 0.9, relation: 0.05, other: 0.05 };
        assert_eq!(
            classify_head(mover_mass, &[4, 9, 2], 9, &[1], t).unwrap(),
            HeadClass::Mover
        );
        let rel_mass = SpanMass { subject: 0.1, relation: 0.8, other: 0.1 };
        assert_eq!(
            classify_head(rel_mass, &[3, 1], 9, &[1], t).unwrap(),
            HeadClass::Relation
        );
        let mix_mass = SpanMass { subject: 0.4, relation: 0.4, other: 0.2 };
        assert_eq!(
            classify_head(mix_mass, &[3], 9, &[1], t).unwrap(),
            HeadClass::Mixture
        );
        let other = SpanMass { subject: 0.1, relation: 0.1, other: 0.8 };
        assert_eq!(
            classify_head(other, &[3], 9, &[1], t).unwrap(),
            HeadClass::Other
        );
        // relation verdict with no hints is an error
        assert!(classify_head(rel_mass, &[3], 9, &[], t).is_err());
        // mover needs the target in top-k
        assert_eq!(
            classify_head(mover_mass, &[4, 2], 9, &[1], t).unwrap(),
            HeadClass::Other
        );
    }

    #[test]
    fn ablation_deltas_sum_to_zero() {
        let (config, weights) = synthetic::random_toy(2, 2, 16, 32, 13);
        let model = crate::model::Model::new(config, weights).unwrap();
        let effect = head_ablation_effect(&model, &[1, 2, 3, 4], 0, 1).unwrap();
        let sum: f64 = effect.deltas.iter().map(|&(_, d)| d).sum();
        assert!(sum.abs() <= 1e-5, "delta sum {sum}");
        // sorted descending
        for w in effect.deltas.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn ablating_dead_head_changes_nothing() {
        let (config, mut weights) = synthetic::random_toy(1, 2, 16, 32, 14);
        weights.layers[0].w_o.fill(0.0);
        let model = crate::model::Model::new(config, weights).unwrap();
        let effect = head_ablation_effect(&model, &[5, 6], 0, 0).unwrap();
        assert!(effect.deltas.iter().all(|&(_, d)| d == 0.0));
    }
}
