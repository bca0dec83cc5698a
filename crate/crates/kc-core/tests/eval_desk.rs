//! Editing-analysis and hallucination harnesses on the planted checkpoint:
//! a rank-one-style edit that redirects one fact's enrichment bundle, and a
//! fine-tuning-style edit that writes the new answer from an early MLP.

mod common;

use std::path::PathBuf;

use kc_core::bpe::BpeTokenizer;
use kc_core::data::{tokenize_align, tokenize_split, KnowledgeDataset, Split};
use kc_core::discovery::{AblationKind, DiscoveryConfig};
use kc_core::eval::{circuit_diff, hallucination_probe};
use kc_core::graph::NodeId;
use kc_core::lens::{self, rank_of, ClassifyThresholds, LensPosition};
use kc_core::model::Model;
use kc_core::synthetic::desk;
use once_cell::sync::Lazy;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

struct Desk {
    model: Model,
    tokenizer: BpeTokenizer,
    info: desk::DeskInfo,
}

static DESK: Lazy<Desk> = Lazy::new(|| {
    let tokenizer = BpeTokenizer::from_files(
        fixtures().join("tokenizer/vocab.json"),
        fixtures().join("tokenizer/merges.txt"),
    )
    .unwrap();
    let (config, weights, info) = desk::build(&tokenizer).unwrap();
    let model = Model::new(config, weights).unwrap();
    Desk {
        model,
        tokenizer,
        info,
    }
});

fn capital_batch() -> Vec<kc_core::data::TokenizedPrompt> {
    let ds = KnowledgeDataset::load(fixtures().join("data/country_capital.jsonl")).unwrap();
    let mut ds = ds;
    ds.records.retain(|r| {
        DESK.info
            .facts
            .iter()
            .any(|f| f.subject == r.subject && f.relation_id == r.relation_id)
    });
    ds.records.truncate(6);
    tokenize_split(&DESK.tokenizer, &ds, Split::All, false).unwrap()
}

fn discovery_config() -> DiscoveryConfig {
    DiscoveryConfig {
        tau: 0.01,
        ablation: AblationKind::Zero,
        log_scores: false,
        dataset_id: "country_capital".to_owned(),
        timestamp: Some("2000-01-01T00:00:00Z".to_owned()),
    }
}

#[test]
fn bundle_redirect_edit_flows_through_the_unchanged_circuit() {
    let edited = desk::rome_style_edit(
        &DESK.model.weights,
        &DESK.info,
        &DESK.tokenizer,
        "France",
        "country_capital_city",
        "Rome",
    )
    .unwrap();
    let after = Model::new(DESK.model.config.clone(), edited).unwrap();

    let batch = capital_batch();
    let probe = batch
        .iter()
        .find(|p| p.triplet.subject == "France")
        .unwrap()
        .clone();
    let unrelated: Vec<_> = batch
        .iter()
        .filter(|p| p.triplet.subject != "France")
        .cloned()
        .collect();

    // the edited model answers with the new object, top rank
    let (logits, _) = after.run_full(&probe.tokens).unwrap();
    let row = logits.row(probe.tokens.len() - 1);
    let rome = DESK.tokenizer.first_token(" Rome").unwrap();
    let paris = DESK.tokenizer.first_token(" Paris").unwrap();
    assert_eq!(rank_of(row, rome), 1);
    assert!(rank_of(row, paris) > 3, "old answer still near the top");

    let report = circuit_diff(
        &DESK.model,
        &after,
        &DESK.tokenizer,
        &batch,
        &probe,
        &unrelated,
        &discovery_config(),
        ClassifyThresholds::default(),
    )
    .unwrap();

    // the mover heads now extract the edited content from the subject position
    let mover_change = report
        .head_class_changes
        .iter()
        .find(|c| c.head == "a7.h2" || c.head == "a8.h5")
        .expect("a mover head should change its extracted token");
    assert_eq!(mover_change.top_token_before.as_deref(), Some(" Paris"));
    assert_eq!(mover_change.top_token_after.as_deref(), Some(" Rome"));

    // probe traces: the old target was top rank, the edit dethrones it
    let final_before = report
        .trace_before
        .final_point(LensPosition::Last)
        .unwrap();
    let final_after = report.trace_after.final_point(LensPosition::Last).unwrap();
    assert_eq!(final_before.rank, 1);
    assert!(final_after.rank > 1);

    // no regression on unrelated facts
    for probe in &report.unrelated_probes {
        assert!(
            (probe.before - probe.after).abs() < 0.05,
            "{}: {:.3} -> {:.3}",
            probe.prompt,
            probe.before,
            probe.after
        );
    }
}

#[test]
fn direct_write_edit_dominates_and_overfits() {
    let edited = desk::ft_style_edit(
        &DESK.model.weights,
        &DESK.info,
        &DESK.tokenizer,
        "Rome",
        0,
    )
    .unwrap();
    let after = Model::new(DESK.model.config.clone(), edited).unwrap();

    let batch = capital_batch();
    let probe = batch
        .iter()
        .find(|p| p.triplet.subject == "France")
        .unwrap()
        .clone();
    let rome = DESK.tokenizer.first_token(" Rome").unwrap();

    // the edited MLP writes the new answer into the stream directly: its own
    // lens logit for the target exceeds 10 and it is the node's top token
    let (_, cache) = after.run_full(&probe.tokens).unwrap();
    let mlp0 = cache
        .node_output(&after.graph, NodeId::Mlp { layer: 0 })
        .unwrap();
    let lens_logits = lens::unembed(&after, mlp0.row(probe.tokens.len() - 1)).unwrap();
    assert!(
        lens_logits[rome as usize] > 10.0,
        "edited-MLP lens logit {}",
        lens_logits[rome as usize]
    );
    assert_eq!(rank_of(lens_logits.view(), rome), 1);

    // the new answer is top rank in the residual stream from layer 0 onward
    let trace = lens::trace_target(&after, &probe, rome).unwrap();
    let rank_at = |layer: usize| {
        trace
            .points
            .iter()
            .find(|p| p.layer == layer && p.position == LensPosition::Last)
            .unwrap()
            .rank
    };
    assert_eq!(rank_at(0), 1);
    assert_eq!(rank_at(after.config.n_layers - 1), 1);

    // overfitting: unrelated templated prompts now also answer with the
    // edited object
    let unrelated: Vec<_> = batch
        .iter()
        .filter(|p| p.triplet.subject != "France")
        .cloned()
        .collect();
    let report = circuit_diff(
        &DESK.model,
        &after,
        &DESK.tokenizer,
        &batch,
        &probe,
        &unrelated,
        &discovery_config(),
        ClassifyThresholds::default(),
    )
    .unwrap();
    let mut regressed = 0;
    for p in &report.unrelated_probes {
        if p.after < p.before - 0.2 {
            regressed += 1;
        }
    }
    assert!(
        regressed >= unrelated.len() / 2,
        "only {regressed} of {} unrelated probes regressed",
        unrelated.len()
    );
    // the edited component joins the circuit
    assert!(
        report
            .edges_added
            .iter()
            .any(|(src, _)| src == "m0"),
        "edited MLP absent from the after-circuit: {:?}",
        report.edges_added
    );
}

#[test]
fn hallucination_probe_reports_the_competition() {
    let ds = KnowledgeDataset::load(fixtures().join("data/country_currency.jsonl")).unwrap();
    let rec = ds
        .records
        .iter()
        .find(|r| r.subject == "Malaysia")
        .unwrap();
    let prompt = tokenize_align(&DESK.tokenizer, rec, false).unwrap();
    let report = hallucination_probe(
        &DESK.model,
        &DESK.tokenizer,
        &prompt,
        "Ringgit",
        "Malaysian",
        ClassifyThresholds::default(),
    )
    .unwrap();

    assert_eq!(report.final_rank_wrong, 1);
    assert!((2..=10).contains(&report.final_rank_correct));

    // both candidates accumulate before the amplifier layer...
    let rank_at = |trace: &lens::LensTrace, layer: usize| {
        trace
            .points
            .iter()
            .find(|p| p.layer == layer && p.position == LensPosition::Last)
            .unwrap()
            .rank
    };
    let pre_amp = desk::AMP_LAYER - 1;
    assert!(rank_at(&report.wrong_trace, pre_amp) <= 20);
    assert!(rank_at(&report.correct_trace, pre_amp) <= 20);

    // ...and the movers carry the wrong one (at least alongside the correct)
    assert!(!report.movers.is_empty(), "no mover audit entries");
    assert!(report.movers.iter().any(|m| m.carries_wrong));
}

#[test]
fn correct_prompt_probe_shows_no_competition_win() {
    let ds = KnowledgeDataset::load(fixtures().join("data/country_currency.jsonl")).unwrap();
    let rec = ds.records.iter().find(|r| r.subject == "Japan").unwrap();
    let prompt = tokenize_align(&DESK.tokenizer, rec, false).unwrap();
    let report = hallucination_probe(
        &DESK.model,
        &DESK.tokenizer,
        &prompt,
        "Yen",
        "Ruble",
        ClassifyThresholds::default(),
    )
    .unwrap();
    assert_eq!(report.final_rank_correct, 1);
    assert!(report.final_rank_wrong > 1);
}
