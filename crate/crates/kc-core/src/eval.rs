//! Quantitative harnesses: Hit@k, completeness (full vs circuit vs random),
//! circuit diffing across checkpoints, in-context-learning head studies, and
//! hallucination probes.

use std::collections::BTreeSet;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::bpe::BpeTokenizer;
use crate::data::{tokenize_split, KnowledgeDataset, Split, TokenizedPrompt};
use crate::discovery::{discover, DiscoveryConfig, DiscoveryStats};
use crate::error::{Error, Result};
use crate::graph::{random_circuit, Circuit, NodeId};
use crate::lens::{
    head_profile, prob_of, rank_of, trace_target, ClassifyThresholds, HeadClass, LensTrace,
};
use crate::model::Model;

/// Fraction of prompts whose target first token ranks within the top `k`
/// next-token predictions at the last position. `circuit: None` evaluates
/// the full model; `Some` runs the circuit standalone.
pub fn hit_at_k(
    model: &Model,
    circuit: Option<&Circuit>,
    prompts: &[TokenizedPrompt],
    k: usize,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::invalid("empty evaluation split"));
    }
    let hits: Vec<bool> = prompts
        .par_iter()
        .map(|p| {
            let (logits, _) = match circuit {
                Some(c) => model.run_masked(&p.tokens, c)?,
                None => model.run_full(&p.tokens)?,
            };
            let rank = rank_of(logits.row(p.tokens.len() - 1), p.target_first_token);
            Ok(rank <= k)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Mean target probability over prompts (percent), optionally under a mask.
pub fn mean_target_prob_pct(
    model: &Model,
    circuit: Option<&Circuit>,
    prompts: &[TokenizedPrompt],
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::invalid("empty evaluation split"));
    }
    let probs: Vec<f64> = prompts
        .par_iter()
        .map(|p| {
            let (logits, _) = match circuit {
                Some(c) => model.run_masked(&p.tokens, c)?,
                None => model.run_full(&p.tokens)?,
            };
            Ok(prob_of(logits.row(p.tokens.len() - 1), p.target_first_token))
        })
        .collect::<Result<_>>()?;
    Ok(100.0 * probs.iter().sum::<f64>() / probs.len() as f64)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SplitScores {
    pub full: f64,
    pub random: f64,
    pub circuit: f64,
}

/// Hit@k of the full model, a size-matched random circuit, and the
/// discovered circuit standalone, on both splits.
#[derive(Debug, Clone, Serialize)]
pub struct CompletenessReport {
    pub dataset_id: String,
    pub tau: Option<f64>,
    pub edge_count: usize,
    pub k: usize,
    pub random_seed: u64,
    pub val: SplitScores,
    pub test: SplitScores,
}

pub fn completeness(
    model: &Model,
    tokenizer: &BpeTokenizer,
    circuit: &Circuit,
    dataset: &KnowledgeDataset,
    seed: u64,
    k: usize,
) -> Result<CompletenessReport> {
    if dataset.splits.is_none() {
        return Err(Error::invalid("dataset has no val/test split"));
    }
    if !circuit.provenance.dataset_id.is_empty()
        && circuit.provenance.dataset_id != dataset.dataset_id
    {
        return Err(Error::invalid(format!(
            "circuit was discovered on `{}`, not `{}`",
            circuit.provenance.dataset_id, dataset.dataset_id
        )));
    }
    let val = tokenize_split(tokenizer, dataset, Split::Val, false)?;
    let test = tokenize_split(tokenizer, dataset, Split::Test, false)?;
    // small circuits make connected uniform samples rare; spend more draws
    let random = random_circuit(
        Arc::clone(&model.graph),
        circuit.edge_count().max(1),
        seed,
        50_000,
    )?;
    let score = |prompts: &[TokenizedPrompt]| -> Result<SplitScores> {
        Ok(SplitScores {
            full: hit_at_k(model, None, prompts, k)?,
            random: hit_at_k(model, Some(&random), prompts, k)?,
            circuit: hit_at_k(model, Some(circuit), prompts, k)?,
        })
    };
    Ok(CompletenessReport {
        dataset_id: dataset.dataset_id.clone(),
        tau: circuit.provenance.tau,
        edge_count: circuit.edge_count(),
        k,
        random_seed: seed,
        val: score(&val)?,
        test: score(&test)?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct HeadClassChange {
    pub head: String,
    pub before: HeadClass,
    pub after: HeadClass,
    pub top_token_before: Option<String>,
    pub top_token_after: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeProbability {
    pub prompt: String,
    pub target: String,
    pub before: f64,
    pub after: f64,
}

/// Differences between the circuits of two checkpoints sharing one
/// topology: edge/node deltas, per-head class changes on a probe prompt,
/// lens traces of the probe fact on both models, and target probabilities
/// on unrelated regression prompts.
#[derive(Debug, Clone, Serialize)]
pub struct DiffReport {
    pub edges_added: Vec<(String, String)>,
    pub edges_removed: Vec<(String, String)>,
    pub nodes_added: Vec<String>,
    pub nodes_removed: Vec<String>,
    pub edge_count_before: usize,
    pub edge_count_after: usize,
    pub head_class_changes: Vec<HeadClassChange>,
    pub trace_before: LensTrace,
    pub trace_after: LensTrace,
    pub unrelated_probes: Vec<ProbeProbability>,
    pub stats_before: DiscoveryStats,
    pub stats_after: DiscoveryStats,
}

#[allow(clippy::too_many_arguments)]
pub fn circuit_diff(
    before: &Model,
    after: &Model,
    tokenizer: &BpeTokenizer,
    batch: &[TokenizedPrompt],
    probe: &TokenizedPrompt,
    unrelated: &[TokenizedPrompt],
    config: &DiscoveryConfig,
    thresholds: ClassifyThresholds,
) -> Result<DiffReport> {
    if before.config.n_layers != after.config.n_layers
        || before.config.n_heads != after.config.n_heads
        || before.config.d_model != after.config.d_model
        || before.config.vocab_size != after.config.vocab_size
    {
        return Err(Error::Graph(
            "checkpoints do not share a graph topology".to_owned(),
        ));
    }
    let res_before = discover(before, batch, config)?;
    let res_after = discover(after, batch, config)?;
    let (cb, ca) = (&res_before.circuit, &res_after.circuit);

    let mut edges_added = Vec::new();
    let mut edges_removed = Vec::new();
    for eid in 0..before.graph.edge_count() {
        let (s, d) = before.graph.edge_nodes(eid);
        match (cb.contains(eid), ca.contains(eid)) {
            (false, true) => edges_added.push((s.to_string(), d.to_string())),
            (true, false) => edges_removed.push((s.to_string(), d.to_string())),
            _ => {}
        }
    }
    let nb = cb.node_set();
    let na = ca.node_set();
    let node_name = |idx: &usize| before.graph.node(*idx).to_string();
    let nodes_added: Vec<String> = na.difference(&nb).map(node_name).collect();
    let nodes_removed: Vec<String> = nb.difference(&na).map(node_name).collect();

    // classify heads appearing in either circuit, on the probe prompt
    let union: BTreeSet<usize> = na.union(&nb).copied().collect();
    let (_, cache_before) = before.run_full(&probe.tokens)?;
    let (_, cache_after) = after.run_full(&probe.tokens)?;
    let mut head_class_changes = Vec::new();
    for &idx in &union {
        let NodeId::Attn { layer, head } = before.graph.node(idx) else {
            continue;
        };
        let pb = head_profile(before, &cache_before, probe, layer, head, thresholds, Some(tokenizer))?;
        let pa = head_profile(after, &cache_after, probe, layer, head, thresholds, Some(tokenizer))?;
        if pb.class != pa.class
            || pb.top_tokens.first().map(|t| t.token) != pa.top_tokens.first().map(|t| t.token)
        {
            head_class_changes.push(HeadClassChange {
                head: pb.head.clone(),
                before: pb.class,
                after: pa.class,
                top_token_before: pb.top_tokens.first().map(|t| t.text.clone()),
                top_token_after: pa.top_tokens.first().map(|t| t.text.clone()),
            });
        }
    }

    let trace_before = trace_target(before, probe, probe.target_first_token)?;
    let trace_after = trace_target(after, probe, probe.target_first_token)?;

    let unrelated_probes = unrelated
        .iter()
        .map(|p| {
            let (lb, _) = before.run_full(&p.tokens)?;
            let (la, _) = after.run_full(&p.tokens)?;
            let last = p.tokens.len() - 1;
            Ok(ProbeProbability {
                prompt: p.text.clone(),
                target: p.triplet.object.clone(),
                before: prob_of(lb.row(last), p.target_first_token),
                after: prob_of(la.row(last), p.target_first_token),
            })
        })
        .collect::<Result<_>>()?;

    Ok(DiffReport {
        edges_added,
        edges_removed,
        nodes_added,
        nodes_removed,
        edge_count_before: cb.edge_count(),
        edge_count_after: ca.edge_count(),
        head_class_changes,
        trace_before,
        trace_after,
        unrelated_probes,
        stats_before: res_before.stats,
        stats_after: res_after.stats,
    })
}

/// Attention heads that join the circuit when demonstrations are added, and
/// the effect of ablating them vs. equally many uninvolved random heads.
/// Probabilities are mean target probabilities in percent on the in-context
/// prompts.
#[derive(Debug, Clone, Serialize)]
pub struct IclReport {
    pub dataset_id: String,
    pub tau: f64,
    pub extra_heads: Vec<String>,
    pub random_heads: Vec<String>,
    pub zero_shot_edge_count: usize,
    pub icl_edge_count: usize,
    pub original_pct: f64,
    pub ablate_extra_pct: f64,
    pub ablate_random_pct: f64,
    /// Set when no extra heads were found (report still emitted).
    pub no_extra_heads: bool,
}

fn ablate_heads_circuit(model: &Model, heads: &[usize]) -> Circuit {
    let mut circuit = Circuit::full(Arc::clone(&model.graph));
    for &idx in heads {
        for &eid in model.graph.out_edge_ids(idx) {
            circuit.remove(eid);
        }
    }
    circuit
}

pub fn icl_compare(
    model: &Model,
    tokenizer: &BpeTokenizer,
    dataset: &KnowledgeDataset,
    config: &DiscoveryConfig,
    seed: u64,
) -> Result<IclReport> {
    if dataset.records.iter().any(|r| r.demos.is_empty()) {
        return Err(Error::invalid(
            "every record needs at least one demo for the in-context study",
        ));
    }
    let zero_shot = tokenize_split(tokenizer, dataset, Split::All, false)?;
    let icl = tokenize_split(tokenizer, dataset, Split::All, true)?;
    let res_zero = discover(model, &zero_shot, config)?;
    let res_icl = discover(model, &icl, config)?;

    let nodes_zero = res_zero.circuit.node_set();
    let nodes_icl = res_icl.circuit.node_set();
    let extra: Vec<usize> = nodes_icl
        .difference(&nodes_zero)
        .copied()
        .filter(|&idx| model.graph.node(idx).is_attn())
        .collect();
    let no_extra_heads = extra.is_empty();
    if no_extra_heads {
        log::warn!("no extra attention heads in the in-context circuit");
    }

    // control: random heads outside both circuits
    let involved: BTreeSet<usize> = nodes_zero.union(&nodes_icl).copied().collect();
    let candidates: Vec<usize> = (0..model.graph.node_count())
        .filter(|&idx| model.graph.node(idx).is_attn() && !involved.contains(&idx))
        .collect();
    if candidates.len() < extra.len() {
        return Err(Error::invalid(
            "not enough uninvolved heads for the random control",
        ));
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let random_heads: Vec<usize> = rand::seq::index::sample(&mut rng, candidates.len(), extra.len())
        .into_iter()
        .map(|i| candidates[i])
        .collect();

    let original_pct = mean_target_prob_pct(model, None, &icl)?;
    let ablate_extra_pct = if no_extra_heads {
        original_pct
    } else {
        mean_target_prob_pct(model, Some(&ablate_heads_circuit(model, &extra)), &icl)?
    };
    let ablate_random_pct = if random_heads.is_empty() {
        original_pct
    } else {
        mean_target_prob_pct(model, Some(&ablate_heads_circuit(model, &random_heads)), &icl)?
    };

    let name = |idx: &usize| model.graph.node(*idx).to_string();
    Ok(IclReport {
        dataset_id: dataset.dataset_id.clone(),
        tau: config.tau,
        extra_heads: extra.iter().map(name).collect(),
        random_heads: random_heads.iter().map(name).collect(),
        zero_shot_edge_count: res_zero.circuit.edge_count(),
        icl_edge_count: res_icl.circuit.edge_count(),
        original_pct,
        ablate_extra_pct,
        ablate_random_pct,
        no_extra_heads,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MoverAudit {
    pub head: String,
    pub carries_correct: bool,
    pub carries_wrong: bool,
}

/// Dual lens traces for a correct/incorrect candidate pair plus an audit of
/// mover-classified heads (which candidate each head's top-k lens output
/// contains).
#[derive(Debug, Clone, Serialize)]
pub struct HallucinationReport {
    pub prompt: String,
    pub correct: String,
    pub wrong: String,
    pub correct_trace: LensTrace,
    pub wrong_trace: LensTrace,
    pub final_rank_correct: usize,
    pub final_rank_wrong: usize,
    pub movers: Vec<MoverAudit>,
}

pub fn hallucination_probe(
    model: &Model,
    tokenizer: &BpeTokenizer,
    prompt: &TokenizedPrompt,
    correct: &str,
    wrong: &str,
    thresholds: ClassifyThresholds,
) -> Result<HallucinationReport> {
    let correct_tok = tokenizer.first_token(&format!(" {}", correct.trim()))?;
    let wrong_tok = tokenizer.first_token(&format!(" {}", wrong.trim()))?;
    let correct_trace = trace_target(model, prompt, correct_tok)?;
    let wrong_trace = trace_target(model, prompt, wrong_tok)?;
    let (logits, cache) = model.run_full(&prompt.tokens)?;
    let last_row = logits.row(prompt.tokens.len() - 1);

    let mut movers = Vec::new();
    for layer in 0..model.config.n_layers {
        for head in 0..model.config.n_heads {
            let profile = head_profile(model, &cache, prompt, layer, head, thresholds, Some(tokenizer))?;
            let tops: Vec<u32> = profile.top_tokens.iter().map(|t| t.token).collect();
            let carries_correct = tops.contains(&correct_tok);
            let carries_wrong = tops.contains(&wrong_tok);
            // mover behavior for either candidate qualifies for the audit
            let subjecty = profile.span_mass.subject >= thresholds.theta_span;
            if subjecty && (carries_correct || carries_wrong) {
                movers.push(MoverAudit {
                    head: profile.head,
                    carries_correct,
                    carries_wrong,
                });
            }
        }
    }
    Ok(HallucinationReport {
        prompt: prompt.text.clone(),
        correct: correct.to_owned(),
        wrong: wrong.to_owned(),
        final_rank_correct: rank_of(last_row, correct_tok),
        final_rank_wrong: rank_of(last_row, wrong_tok),
        correct_trace,
        wrong_trace,
        movers,
    })
}
