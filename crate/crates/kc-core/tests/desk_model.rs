//! Behavioral checks for the planted desk-scale checkpoint.

mod common;

use std::path::PathBuf;
use std::sync::Arc;

use kc_core::bpe::BpeTokenizer;
use kc_core::data::{tokenize_align, KnowledgeDataset, TokenizedPrompt};
use kc_core::graph::{Circuit, NodeId};
use kc_core::lens::{self, rank_of, ClassifyThresholds, HeadClass};
use kc_core::model::Model;
use kc_core::synthetic::desk;
use once_cell::sync::Lazy;

struct Desk {
    model: Model,
    tokenizer: BpeTokenizer,
    info: desk::DeskInfo,
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

static DESK: Lazy<Desk> = Lazy::new(|| {
    let tokenizer = BpeTokenizer::from_files(
        fixtures().join("tokenizer/vocab.json"),
        fixtures().join("tokenizer/merges.txt"),
    )
    .expect("fixture tokenizer");
    let (config, weights, info) = desk::build(&tokenizer).expect("desk build");
    let model = Model::new(config, weights).expect("desk model");
    Desk {
        model,
        tokenizer,
        info,
    }
});

fn dataset(name: &str) -> KnowledgeDataset {
    KnowledgeDataset::load(fixtures().join(format!("data/{name}.jsonl"))).unwrap()
}

fn prompts_for(name: &str, icl: bool) -> Vec<TokenizedPrompt> {
    let ds = dataset(name);
    ds.records
        .iter()
        .map(|r| tokenize_align(&DESK.tokenizer, r, icl).unwrap())
        .collect()
}

fn last_row_rank_prob(p: &TokenizedPrompt) -> (usize, f64) {
    let (logits, _) = DESK.model.run_full(&p.tokens).unwrap();
    let row = logits.row(p.tokens.len() - 1);
    (rank_of(row, p.target_first_token), lens::prob_of(row, p.target_first_token))
}

#[test]
fn strong_facts_are_rank_one() {
    for name in ["country_capital", "country_language"] {
        for p in prompts_for(name, false) {
            let planted = DESK
                .info
                .facts
                .iter()
                .any(|f| f.subject == p.triplet.subject && f.relation_id == p.triplet.relation_id);
            let (rank, prob) = last_row_rank_prob(&p);
            if planted {
                assert_eq!(rank, 1, "{}: rank {rank} prob {prob:.3}", p.text);
                assert!(prob >= 0.3, "{}: weak prob {prob:.3}", p.text);
            } else {
                assert!(rank > 10, "{}: unplanted fact has rank {rank}", p.text);
            }
        }
    }
}

#[test]
fn weak_facts_sit_inside_top_ten_but_not_top_one() {
    for p in prompts_for("adj_comparative", false) {
        let (rank, prob) = last_row_rank_prob(&p);
        assert!(
            (2..=10).contains(&rank),
            "{}: zero-shot rank {rank} prob {prob:.3}",
            p.text
        );
        assert!(prob <= 0.25, "{}: zero-shot prob too sharp {prob:.3}", p.text);
    }
}

#[test]
fn demos_recover_weak_facts() {
    let zero = prompts_for("adj_comparative", false);
    let icl = prompts_for("adj_comparative", true);
    for (z, i) in zero.iter().zip(&icl) {
        let (_, prob_zero) = last_row_rank_prob(z);
        let (rank_icl, prob_icl) = last_row_rank_prob(i);
        assert_eq!(rank_icl, 1, "{}: icl rank {rank_icl}", i.text);
        assert!(
            prob_icl >= 3.0 * prob_zero,
            "{}: icl prob {prob_icl:.3} vs zero-shot {prob_zero:.3}",
            i.text
        );
    }
}

#[test]
fn planted_heads_classify_as_designed() {
    let thresholds = ClassifyThresholds::default();
    for p in prompts_for("country_language", false).into_iter().take(4) {
        let (_, cache) = DESK.model.run_full(&p.tokens).unwrap();
        for (layer, head) in desk::MOVER_HEADS {
            let profile = lens::head_profile(
                &DESK.model,
                &cache,
                &p,
                layer,
                head,
                thresholds,
                Some(&DESK.tokenizer),
            )
            .unwrap();
            assert!(
                profile.span_mass.subject >= 0.6,
                "a{layer}.h{head} subject mass {:.3} on {}",
                profile.span_mass.subject,
                p.text
            );
            assert_eq!(
                profile.class,
                HeadClass::Mover,
                "a{layer}.h{head} on {}: {:?}",
                p.text,
                profile
                    .top_tokens
                    .iter()
                    .map(|t| t.text.clone())
                    .collect::<Vec<_>>()
            );
        }
        let (rl, rh) = desk::RELATION_HEAD;
        let profile = lens::head_profile(
            &DESK.model,
            &cache,
            &p,
            rl,
            rh,
            thresholds,
            Some(&DESK.tokenizer),
        )
        .unwrap();
        assert!(profile.span_mass.relation >= 0.6);
        assert_eq!(profile.class, HeadClass::Relation);
    }
}

#[test]
fn only_planted_movers_classify_as_movers() {
    let thresholds = ClassifyThresholds::default();
    let mut prompts = prompts_for("country_capital", false);
    prompts.truncate(6);
    prompts.extend(prompts_for("country_language", false).into_iter().take(3));
    for p in &prompts {
        let planted = DESK
            .info
            .facts
            .iter()
            .any(|f| f.subject == p.triplet.subject && f.relation_id == p.triplet.relation_id);
        if !planted {
            continue;
        }
        let (_, cache) = DESK.model.run_full(&p.tokens).unwrap();
        for layer in 0..DESK.model.config.n_layers {
            for head in 0..DESK.model.config.n_heads {
                let profile = lens::head_profile(
                    &DESK.model,
                    &cache,
                    &p.clone(),
                    layer,
                    head,
                    thresholds,
                    Some(&DESK.tokenizer),
                )
                .unwrap();
                if profile.class == HeadClass::Mover {
                    assert!(
                        desk::MOVER_HEADS.contains(&(layer, head)),
                        "unexpected mover a{layer}.h{head} on {}",
                        p.text
                    );
                }
            }
        }
    }
}

#[test]
fn ablating_a_mover_strictly_reduces_target_probability() {
    for p in prompts_for("country_language", false).into_iter().take(4) {
        let (logits, _) = DESK.model.run_full(&p.tokens).unwrap();
        let base = lens::prob_of(logits.row(p.tokens.len() - 1), p.target_first_token);
        for (layer, head) in desk::MOVER_HEADS {
            let node = NodeId::Attn { layer, head };
            let idx = DESK.model.graph.node_index(node).unwrap();
            let mut circuit = Circuit::full(Arc::clone(&DESK.model.graph));
            for &eid in DESK.model.graph.out_edge_ids(idx) {
                circuit.remove(eid);
            }
            let (ablated, _) = DESK.model.run_masked(&p.tokens, &circuit).unwrap();
            let prob = lens::prob_of(ablated.row(p.tokens.len() - 1), p.target_first_token);
            assert!(
                prob < base,
                "a{layer}.h{head} on {}: {prob:.4} !< {base:.4}",
                p.text
            );
        }
    }
}

#[test]
fn hallucination_specimen_prefers_the_wrong_answer() {
    let ds = dataset("country_currency");
    let rec = ds
        .records
        .iter()
        .find(|r| r.subject == "Malaysia")
        .unwrap();
    let p = tokenize_align(&DESK.tokenizer, rec, false).unwrap();
    let (logits, _) = DESK.model.run_full(&p.tokens).unwrap();
    let row = logits.row(p.tokens.len() - 1);
    let wrong = DESK.tokenizer.first_token(" Malaysian").unwrap();
    let correct = DESK.tokenizer.first_token(" Ringgit").unwrap();
    assert_eq!(rank_of(row, wrong), 1, "wrong answer should win");
    let correct_rank = rank_of(row, correct);
    assert!(
        (2..=10).contains(&correct_rank),
        "correct answer rank {correct_rank}"
    );
}

#[test]
fn lens_trace_descends_after_the_amplifier() {
    let ds = dataset("country_language");
    let rec = ds.records.iter().find(|r| r.subject == "France").unwrap();
    let p = tokenize_align(&DESK.tokenizer, rec, false).unwrap();
    let trace = lens::trace_target(&DESK.model, &p, p.target_first_token).unwrap();
    let rank_at = |layer: usize| {
        trace
            .points
            .iter()
            .find(|pt| pt.layer == layer && pt.position == lens::LensPosition::Last)
            .unwrap()
            .rank
    };
    // before the movers the target is nowhere; after the amplifier it is top
    assert!(rank_at(5) > 20, "early rank {}", rank_at(5));
    assert!(rank_at(desk::MOVER_HEADS[0].0) <= rank_at(5));
    assert_eq!(rank_at(desk::AMP_LAYER), 1);
    assert_eq!(rank_at(DESK.model.config.n_layers - 1), 1);
}
