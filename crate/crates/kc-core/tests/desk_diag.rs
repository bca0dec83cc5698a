//! Diagnostic dump of the planted model's internal signal sizes (run with
//! `--nocapture`; assertions-free).

use kc_core::bpe::BpeTokenizer;
use kc_core::data::{tokenize_align, KnowledgeDataset};
use kc_core::lens::{self, rank_of};
use kc_core::model::Model;
use kc_core::synthetic::desk;
use ndarray::Array1;
use std::path::PathBuf;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

#[test]
#[ignore = "diagnostic dump, run on demand"]
fn dump_signal_sizes() {
    let tokenizer = BpeTokenizer::from_files(
        fixtures().join("tokenizer/vocab.json"),
        fixtures().join("tokenizer/merges.txt"),
    )
    .unwrap();
    let (config, weights, info) = desk::build(&tokenizer).unwrap();
    let model = Model::new(config, weights).unwrap();

    let inspect = |name: &str, dataset: &str, subject: &str, icl: bool| {
        let ds = KnowledgeDataset::load(fixtures().join(format!("data/{dataset}.jsonl"))).unwrap();
        let rec = ds.records.iter().find(|r| r.subject == subject).unwrap();
        let p = tokenize_align(&tokenizer, rec, icl).unwrap();
        let (logits, cache) = model.run_full(&p.tokens).unwrap();
        let last = p.tokens.len() - 1;
        let row = logits.row(last);
        let rank = rank_of(row, p.target_first_token);
        let prob = lens::prob_of(row, p.target_first_token);
        println!("=== {name}: {} (target rank {rank} prob {prob:.4})", p.text);

        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let tops: Vec<String> = order
            .iter()
            .take(6)
            .map(|&i| format!("{:?}={:.2}", tokenizer.token_text(i as u32).unwrap(), row[i]))
            .collect();
        println!("  top: {}", tops.join(" "));

        // residual entering the amplifier layer, last position
        let snaps = lens::residual_snapshots(&model, &cache, p.tokens.len());
        let pre_amp = &snaps[desk::AMP_LAYER - 1];
        let x = pre_amp.row(last).to_owned();
        let d = x.len() as f32;
        let mean = x.sum() / d;
        let centered: Array1<f32> = x.mapv(|v| v - mean);
        let norm = centered.dot(&centered).sqrt();
        let xhat = centered.mapv(|v| v * d.sqrt() / norm.max(1e-9));
        let tgt_dir = &info.answer_dir[&p.target_first_token];
        let rel_dir = &info.relation_dir[&p.triplet.relation_id];
        println!(
            "  amp-in: <x,target>={:.2} <x,rel>={:.2} <x,task>={:.2} |x|={:.2}",
            xhat.dot(tgt_dir),
            xhat.dot(rel_dir),
            xhat.dot(&info.task_dir),
            norm
        );

        for (layer, head) in desk::MOVER_HEADS {
            let a = cache.attn_pattern(layer, head).unwrap();
            let mass: f32 = (p.subject_span.0..p.subject_span.1).map(|j| a[[last, j]]).sum();
            let row: Vec<String> = (0..p.tokens.len())
                .map(|j| {
                    format!(
                        "{}:{:.2}",
                        tokenizer.token_text(p.tokens[j]).unwrap(),
                        a[[last, j]]
                    )
                })
                .collect();
            println!("  a{layer}.h{head} subject mass {mass:.3} [{}]", row.join(" "));
        }
    };

    inspect("strong", "country_language", "France", false);
    inspect("strong-multi", "country_capital", "South Korea", false);
    inspect("weak", "adj_comparative", "small", false);
    inspect("weak-icl", "adj_comparative", "small", true);
    inspect("halluc", "country_currency", "Malaysia", false);
}

#[test]
#[ignore = "diagnostic discovery run, use --release"]
fn dump_discovery() {
    let tokenizer = BpeTokenizer::from_files(
        fixtures().join("tokenizer/vocab.json"),
        fixtures().join("tokenizer/merges.txt"),
    )
    .unwrap();
    let (config, weights, _info) = desk::build(&tokenizer).unwrap();
    let model = Model::new(config, weights).unwrap();
    let mut ds = KnowledgeDataset::load(fixtures().join("data/country_capital.jsonl")).unwrap();
    let (kept, report) = kc_core::data::filter_known(&model, &tokenizer, &ds, 10).unwrap();
    println!("retention: {:?}", report.rows.iter().map(|r| (r.relation_id.clone(), r.total, r.kept)).collect::<Vec<_>>());
    ds = kept;
    ds.split(7);
    let val = kc_core::data::tokenize_split(&tokenizer, &ds, kc_core::Split::Val, false).unwrap();
    println!("val prompts: {}", val.len());
    let t0 = std::time::Instant::now();
    let cfg = kc_core::DiscoveryConfig {
        tau: 0.01,
        dataset_id: ds.dataset_id.clone(),
        timestamp: Some("2000-01-01T00:00:00Z".to_owned()),
        ..Default::default()
    };
    let res = kc_core::discover(&model, &val, &cfg).unwrap();
    println!(
        "discovery: {} edges kept of {}, {:.1}s wall, connected={}",
        res.circuit.edge_count(),
        model.graph.edge_count(),
        t0.elapsed().as_secs_f64(),
        res.stats.connected
    );
    for eid in res.circuit.kept_edge_ids() {
        let (s, d) = model.graph.edge_nodes(eid);
        println!("  kept {s} -> {d}");
    }
    let hit = kc_core::eval::hit_at_k(&model, Some(&res.circuit), &val, 10).unwrap();
    println!("standalone val hit@10 = {hit}");
}

#[test]
#[ignore = "diagnostic icl report"]
fn dump_icl() {
    let tokenizer = BpeTokenizer::from_files(
        fixtures().join("tokenizer/vocab.json"),
        fixtures().join("tokenizer/merges.txt"),
    )
    .unwrap();
    let (config, weights, _info) = desk::build(&tokenizer).unwrap();
    let model = Model::new(config, weights).unwrap();
    let ds = KnowledgeDataset::load(fixtures().join("data/adj_comparative.jsonl")).unwrap();
    let cfg = kc_core::DiscoveryConfig {
        tau: 0.01,
        dataset_id: ds.dataset_id.clone(),
        timestamp: Some("2000-01-01T00:00:00Z".to_owned()),
        log_scores: false,
        ..Default::default()
    };
    let report = kc_core::eval::icl_compare(&model, &tokenizer, &ds, &cfg, 1).unwrap();
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
}
