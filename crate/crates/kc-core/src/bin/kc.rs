//! `kc` — command-line workflows for the knowledge-circuit toolkit.
//!
//! Model directories hold `config.json`, `model.safetensors`, `vocab.json`,
//! and `merges.txt`. Machine-readable results go to `--out` files or
//! standard output; progress and warnings go to standard error. Commands
//! that write an `--out` artifact also write a `<out>.manifest.json`
//! echoing the resolved configuration. Exit codes: 0 success, 1 runtime
//! failure, 2 usage error.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use kc_core::bpe::BpeTokenizer;
use kc_core::data::{
    filter_known, tokenize_align, tokenize_split, KnowledgeDataset, KnowledgeTriplet, Split,
};
use kc_core::discovery::{discover, AblationKind, DiscoveryConfig};
use kc_core::eval::{circuit_diff, completeness, icl_compare};
use kc_core::graph::{overlap, ComputationGraph};
use kc_core::io::{
    completeness_to_csv, export_dot, icl_to_csv, load_circuit, save_circuit, score_log_to_jsonl,
    trace_to_csv, write_json, DotOptions,
};
use kc_core::lens::{
    self, head_profile, softmax_f64, trace_target_at, ClassifyThresholds, HeadClass, LensPosition,
};
use kc_core::model::Model;

#[derive(Parser)]
#[command(
    name = "kc",
    version,
    about = "Discover and analyze knowledge circuits in decoder-only transformers"
)]
struct Cli {
    /// Model directory (config.json, model.safetensors, vocab.json, merges.txt).
    #[arg(long, global = true, env = "KC_MODEL_DIR")]
    model_dir: Option<PathBuf>,

    /// Optional JSON config file supplying defaults for omitted flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for batch prompt evaluation (discovery's edge loop is
    /// sequential by design).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Defaults loadable from `--config`; explicit flags win.
#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    model_dir: Option<PathBuf>,
    tau: Option<f64>,
    ablation: Option<String>,
    seed: Option<u64>,
    k: Option<usize>,
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Discover the knowledge circuit for a dataset (optionally one relation).
    Discover(DiscoverArgs),
    /// Run a prompt through a saved circuit and print the top next tokens.
    RunCircuit(RunCircuitArgs),
    /// Hit@10 of full model vs circuit vs size-matched random circuit.
    EvalCompleteness(EvalCompletenessArgs),
    /// Per-layer rank/probability trace of a target token.
    Lens(LensArgs),
    /// Profile and classify every attention head on each dataset record.
    ClassifyHeads(ClassifyHeadsArgs),
    /// Compare circuits of two checkpoints sharing one architecture.
    Diff(DiffArgs),
    /// Node/edge overlap of circuit B against reference circuit A.
    Overlap(OverlapArgs),
    /// In-context learning study: extra heads and their ablation effect.
    Icl(IclArgs),
    /// Render a circuit as DOT.
    ExportDot(ExportDotArgs),
    /// Keep records whose target ranks in the top k; write them as JSONL.
    FilterKnown(FilterKnownArgs),
}

#[derive(Args)]
struct DiscoverArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Restrict to one relation id.
    #[arg(long)]
    relation: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_parser = ["zero", "mean"])]
    ablation: Option<String>,
    /// Skip the model-knows gate.
    #[arg(long)]
    no_filter: bool,
    /// Hit@k threshold of the model-knows gate.
    #[arg(long)]
    gate_k: Option<usize>,
    /// Discover on the validation half of a seeded 1:1 split instead of the
    /// whole (gated) dataset.
    #[arg(long)]
    split_val: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the full score log next to the circuit.
    #[arg(long)]
    scores: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunCircuitArgs {
    #[arg(long)]
    circuit: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 10)]
    topk: usize,
}

#[derive(Args)]
struct EvalCompletenessArgs {
    #[arg(long)]
    circuit: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    relation: Option<String>,
    #[arg(long)]
    no_filter: bool,
    #[arg(long)]
    gate_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LensArgs {
    #[arg(long)]
    prompt: String,
    /// Target string (scored by its first token, with a leading space).
    #[arg(long)]
    target: String,
    /// Subject string; adds last-subject-token trace rows when given.
    #[arg(long)]
    subject: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClassifyHeadsArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    relation: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    theta_span: f64,
    #[arg(long, default_value_t = 0.3)]
    theta_mix: f64,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiffArgs {
    #[arg(long)]
    before: PathBuf,
    #[arg(long)]
    after: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    relation: Option<String>,
    /// Unrelated regression probes (JSONL, same schema as datasets).
    #[arg(long)]
    probes: Option<PathBuf>,
    /// Subject of the edited fact to trace (defaults to the first record).
    #[arg(long)]
    subject: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OverlapArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

#[derive(Args)]
struct IclArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    relation: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportDotArgs {
    #[arg(long)]
    circuit: PathBuf,
    #[arg(long)]
    collapse_mlp_chains: bool,
    /// Edges with |score| below this render dashed.
    #[arg(long)]
    score_display_threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FilterKnownArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    relation: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

struct ModelBundle {
    model: Model,
    tokenizer: BpeTokenizer,
    dir: PathBuf,
}

fn load_bundle(dir: &Path) -> anyhow::Result<ModelBundle> {
    let model = Model::from_dir(dir)
        .with_context(|| format!("loading model from {}", dir.display()))?;
    let tokenizer = BpeTokenizer::from_files(dir.join("vocab.json"), dir.join("merges.txt"))
        .with_context(|| format!("loading tokenizer from {}", dir.display()))?;
    if tokenizer.vocab_size() != model.config.vocab_size {
        bail!(
            "tokenizer vocabulary ({}) does not match model vocab_size ({})",
            tokenizer.vocab_size(),
            model.config.vocab_size
        );
    }
    Ok(ModelBundle {
        model,
        tokenizer,
        dir: dir.to_owned(),
    })
}

struct Resolved {
    model_dir: Option<PathBuf>,
    tau: Option<f64>,
    ablation: Option<String>,
    seed: u64,
    k: usize,
}

fn resolve(cli: &Cli) -> anyhow::Result<Resolved> {
    let file: FileConfig = match &cli.config {
        Some(path) => serde_json::from_str(
            &std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?,
        )
        .with_context(|| format!("parsing config {}", path.display()))?,
        None => FileConfig::default(),
    };
    if let Some(threads) = cli.threads.or(file.threads) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }
    Ok(Resolved {
        model_dir: cli.model_dir.clone().or(file.model_dir),
        tau: file.tau,
        ablation: file.ablation,
        seed: file.seed.unwrap_or(0),
        k: file.k.unwrap_or(10),
    })
}

fn require_model_dir(resolved: &Resolved) -> anyhow::Result<PathBuf> {
    resolved
        .model_dir
        .clone()
        .ok_or_else(|| anyhow!("no model directory (set --model-dir or KC_MODEL_DIR)"))
}

fn manifest_timestamp() -> String {
    if let Ok(epoch) = std::env::var("SOURCE_DATE_EPOCH") {
        if let Ok(secs) = epoch.parse::<i64>() {
            if let Some(dt) = chrono::DateTime::from_timestamp(secs, 0) {
                return dt.to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
            }
        }
    }
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn write_manifest(out: &Path, command: &str, config: serde_json::Value) -> anyhow::Result<()> {
    let manifest = json!({
        "command": command,
        "created_at": manifest_timestamp(),
        "resolved_config": config,
        "tool_version": env!("CARGO_PKG_VERSION"),
    });
    let path = out.with_extension(match out.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{ext}.manifest.json"),
        None => "manifest.json".to_owned(),
    });
    write_json(&manifest, path)?;
    Ok(())
}

fn load_dataset_args(
    path: &Path,
    relation: Option<&str>,
) -> anyhow::Result<KnowledgeDataset> {
    let dataset = KnowledgeDataset::load(path)
        .with_context(|| format!("loading dataset {}", path.display()))?;
    Ok(match relation {
        Some(rel) => dataset.filter_relation(rel)?,
        None => dataset,
    })
}

fn gate_dataset(
    bundle: &ModelBundle,
    dataset: KnowledgeDataset,
    no_filter: bool,
    k: usize,
) -> anyhow::Result<KnowledgeDataset> {
    if no_filter {
        return Ok(dataset);
    }
    let before = dataset.records.len();
    let (kept, _) = filter_known(&bundle.model, &bundle.tokenizer, &dataset, k)?;
    log::info!(
        "model-knows gate kept {} of {before} records (k={k})",
        kept.records.len()
    );
    Ok(kept)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let resolved = resolve(&cli)?;
    match &cli.command {
        Command::Discover(args) => cmd_discover(&cli, &resolved, args),
        Command::RunCircuit(args) => cmd_run_circuit(&resolved, args),
        Command::EvalCompleteness(args) => cmd_eval_completeness(&resolved, args),
        Command::Lens(args) => cmd_lens(&resolved, args),
        Command::ClassifyHeads(args) => cmd_classify_heads(&resolved, args),
        Command::Diff(args) => cmd_diff(&resolved, args),
        Command::Overlap(args) => cmd_overlap(&resolved, args),
        Command::Icl(args) => cmd_icl(&resolved, args),
        Command::ExportDot(args) => cmd_export_dot(&resolved, args),
        Command::FilterKnown(args) => cmd_filter_known(&resolved, args),
    }
}

fn cmd_discover(_cli: &Cli, resolved: &Resolved, args: &DiscoverArgs) -> anyhow::Result<()> {
    let tau = args
        .tau
        .or(resolved.tau)
        .ok_or_else(|| anyhow!("--tau is required (or set it in --config)"))?;
    let ablation = match args
        .ablation
        .clone()
        .or_else(|| resolved.ablation.clone())
        .unwrap_or_else(|| "zero".to_owned())
        .as_str()
    {
        "zero" => AblationKind::Zero,
        "mean" => AblationKind::Mean,
        other => bail!("unknown ablation mode `{other}`"),
    };
    let bundle = load_bundle(&require_model_dir(resolved)?)?;
    let mut dataset = load_dataset_args(&args.dataset, args.relation.as_deref())?;
    dataset = gate_dataset(&bundle, dataset, args.no_filter, args.gate_k.unwrap_or(resolved.k))?;
    let split = if args.split_val {
        dataset.split(args.seed.unwrap_or(resolved.seed));
        Split::Val
    } else {
        Split::All
    };
    let batch = tokenize_split(&bundle.tokenizer, &dataset, split, false)?;
    log::info!("discovering over {} prompts at tau={tau}", batch.len());
    let config = DiscoveryConfig {
        tau,
        ablation,
        log_scores: true,
        dataset_id: dataset.dataset_id.clone(),
        timestamp: None,
    };
    let result = discover(&bundle.model, &batch, &config)?;
    log::info!(
        "kept {} of {} edges in {:.1}s ({} candidate evaluations)",
        result.circuit.edge_count(),
        bundle.model.graph.edge_count(),
        result.stats.wall_time_secs,
        result.stats.forward_passes
    );
    if !result.stats.connected {
        log::warn!("circuit has no input-to-output path");
    }
    save_circuit(
        &result.circuit,
        result.progress().ok(),
        bundle.model.model_id(),
        &args.out,
    )?;
    if args.scores {
        let path = args.out.with_extension("scores.jsonl");
        std::fs::write(&path, score_log_to_jsonl(result.progress()?))?;
    }
    write_manifest(
        &args.out,
        "discover",
        json!({
            "model_dir": bundle.dir,
            "dataset": args.dataset,
            "relation": args.relation,
            "tau": tau,
            "ablation": ablation.to_string(),
            "gate": if args.no_filter { json!("off") } else { json!({"k": args.gate_k.unwrap_or(resolved.k)}) },
            "split": if args.split_val { "val" } else { "all" },
            "seed": args.seed.unwrap_or(resolved.seed),
            "batch_size": result.stats.batch_size,
            "edges_kept": result.circuit.edge_count(),
            "connected": result.stats.connected,
        }),
    )?;
    println!(
        "kept_edges={} of {} connected={}",
        result.circuit.edge_count(),
        bundle.model.graph.edge_count(),
        result.stats.connected
    );
    Ok(())
}

fn cmd_run_circuit(resolved: &Resolved, args: &RunCircuitArgs) -> anyhow::Result<()> {
    let bundle = load_bundle(&require_model_dir(resolved)?)?;
    let (circuit, file) = load_circuit(&args.circuit, std::sync::Arc::clone(&bundle.model.graph))?;
    if file.model_id != bundle.model.model_id() {
        log::warn!(
            "circuit was saved for model `{}`, running against `{}`",
            file.model_id,
            bundle.model.model_id()
        );
    }
    let tokens = bundle.tokenizer.encode(&args.prompt)?;
    let (logits, _) = bundle.model.run_masked(&tokens, &circuit)?;
    let row = logits.row(tokens.len() - 1);
    let probs = softmax_f64(row);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&x, &y| probs[y].partial_cmp(&probs[x]).unwrap().then(x.cmp(&y)));
    for &i in order.iter().take(args.topk) {
        println!(
            "{}\t{:.6}",
            bundle.tokenizer.token_text(i as u32)?,
            probs[i]
        );
    }
    Ok(())
}

fn cmd_eval_completeness(resolved: &Resolved, args: &EvalCompletenessArgs) -> anyhow::Result<()> {
    let bundle = load_bundle(&require_model_dir(resolved)?)?;
    let (circuit, _) = load_circuit(&args.circuit, std::sync::Arc::clone(&bundle.model.graph))?;
    let mut dataset = load_dataset_args(&args.dataset, args.relation.as_deref())?;
    dataset = gate_dataset(&bundle, dataset, args.no_filter, args.gate_k.unwrap_or(resolved.k))?;
    let seed = args.seed.unwrap_or(resolved.seed);
    dataset.split(seed);
    let k = args.k.unwrap_or(resolved.k);
    let report = completeness(&bundle.model, &bundle.tokenizer, &circuit, &dataset, seed, k)?;
    write_json(&report, &args.out)?;
    std::fs::write(args.out.with_extension("csv"), completeness_to_csv(&report))?;
    write_manifest(
        &args.out,
        "eval-completeness",
        json!({
            "model_dir": bundle.dir,
            "circuit": args.circuit,
            "dataset": args.dataset,
            "relation": args.relation,
            "seed": seed,
            "k": k,
        }),
    )?;
    println!(
        "val: full={:.3} circuit={:.3} random={:.3} | test: full={:.3} circuit={:.3} random={:.3}",
        report.val.full,
        report.val.circuit,
        report.val.random,
        report.test.full,
        report.test.circuit,
        report.test.random
    );
    Ok(())
}

fn cmd_lens(resolved: &Resolved, args: &LensArgs) -> anyhow::Result<()> {
    let bundle = load_bundle(&require_model_dir(resolved)?)?;
    let tokens = bundle.tokenizer.encode(&args.prompt)?;
    if tokens.is_empty() {
        bail!("empty prompt");
    }
    let target = bundle
        .tokenizer
        .first_token(&format!(" {}", args.target.trim()))?;
    let trace = match &args.subject {
        Some(subject) => {
            let triplet = KnowledgeTriplet {
                subject: subject.clone(),
                relation_id: "adhoc".to_owned(),
                template: {
                    let occurrences = args.prompt.matches(subject.trim()).count();
                    if occurrences != 1 {
                        bail!("subject must occur exactly once in the prompt");
                    }
                    args.prompt.replacen(subject.trim(), "{subject}", 1)
                },
                object: args.target.clone(),
                relation_hint_tokens: vec![],
                category: None,
                demos: vec![],
                relation_span_hint: None,
            };
            let prompt = tokenize_align(&bundle.tokenizer, &triplet, false)?;
            lens::trace_target(&bundle.model, &prompt, target)?
        }
        None => trace_target_at(
            &bundle.model,
            &tokens,
            target,
            &[(LensPosition::Last, tokens.len() - 1)],
        )?,
    };
    std::fs::write(&args.out, trace_to_csv(&trace))?;
    write_manifest(
        &args.out,
        "lens",
        json!({
            "model_dir": bundle.dir,
            "prompt": args.prompt,
            "target": args.target,
            "subject": args.subject,
        }),
    )?;
    let last = trace.final_point(LensPosition::Last).unwrap();
    println!("final rank={} prob={:.6}", last.rank, last.prob);
    Ok(())
}

fn cmd_classify_heads(resolved: &Resolved, args: &ClassifyHeadsArgs) -> anyhow::Result<()> {
    let bundle = load_bundle(&require_model_dir(resolved)?)?;
    let dataset = load_dataset_args(&args.dataset, args.relation.as_deref())?;
    let thresholds = ClassifyThresholds {
        theta_span: args.theta_span,
        theta_mix: args.theta_mix,
        k: args.k.unwrap_or(resolved.k),
    };
    let mut records = Vec::new();
    let mut mover_counts: std::collections::BTreeMap<String, usize> = Default::default();
    for triplet in &dataset.records {
        let prompt = match tokenize_align(&bundle.tokenizer, triplet, false) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("skipping ({}, {}): {e}", triplet.subject, triplet.relation_id);
                continue;
            }
        };
        let (_, cache) = bundle.model.run_full(&prompt.tokens)?;
        let mut heads = Vec::new();
        for layer in 0..bundle.model.config.n_layers {
            for head in 0..bundle.model.config.n_heads {
                let profile = head_profile(
                    &bundle.model,
                    &cache,
                    &prompt,
                    layer,
                    head,
                    thresholds,
                    Some(&bundle.tokenizer),
                )?;
                if profile.class != HeadClass::Other {
                    if profile.class == HeadClass::Mover {
                        *mover_counts.entry(profile.head.clone()).or_default() += 1;
                    }
                    heads.push(profile);
                }
            }
        }
        records.push(json!({
            "subject": triplet.subject,
            "relation_id": triplet.relation_id,
            "prompt": prompt.text,
            "heads": heads,
        }));
    }
    let report = json!({
        "thresholds": thresholds,
        "records": records,
        "mover_head_counts": mover_counts,
    });
    write_json(&report, &args.out)?;
    write_manifest(
        &args.out,
        "classify-heads",
        json!({
            "model_dir": bundle.dir,
            "dataset": args.dataset,
            "relation": args.relation,
            "thresholds": thresholds,
        }),
    )?;
    println!("classified heads over {} records", records.len());
    Ok(())
}

fn cmd_diff(resolved: &Resolved, args: &DiffArgs) -> anyhow::Result<()> {
    let tau = args
        .tau
        .or(resolved.tau)
        .ok_or_else(|| anyhow!("--tau is required (or set it in --config)"))?;
    let before = load_bundle(&args.before)?;
    let after = load_bundle(&args.after)?;
    let dataset = load_dataset_args(&args.dataset, args.relation.as_deref())?;
    let batch = tokenize_split(&before.tokenizer, &dataset, Split::All, false)?;
    let probe = match &args.subject {
        Some(subject) => batch
            .iter()
            .find(|p| &p.triplet.subject == subject)
            .cloned()
            .ok_or_else(|| anyhow!("no record with subject `{subject}`"))?,
        None => batch[0].clone(),
    };
    let unrelated = match &args.probes {
        Some(path) => {
            let ds = KnowledgeDataset::load(path)?;
            tokenize_split(&before.tokenizer, &ds, Split::All, false)?
        }
        None => Vec::new(),
    };
    let config = DiscoveryConfig {
        tau,
        ablation: AblationKind::Zero,
        log_scores: false,
        dataset_id: dataset.dataset_id.clone(),
        timestamp: None,
    };
    let report = circuit_diff(
        &before.model,
        &after.model,
        &before.tokenizer,
        &batch,
        &probe,
        &unrelated,
        &config,
        ClassifyThresholds::default(),
    )?;
    write_json(&report, &args.out)?;
    write_manifest(
        &args.out,
        "diff",
        json!({
            "before": args.before,
            "after": args.after,
            "dataset": args.dataset,
            "relation": args.relation,
            "probes": args.probes,
            "subject": probe.triplet.subject,
            "tau": tau,
        }),
    )?;
    println!(
        "edges: +{} -{} | head changes: {} | probes: {}",
        report.edges_added.len(),
        report.edges_removed.len(),
        report.head_class_changes.len(),
        report.unrelated_probes.len()
    );
    Ok(())
}

fn cmd_overlap(resolved: &Resolved, args: &OverlapArgs) -> anyhow::Result<()> {
    let bundle = load_bundle(&require_model_dir(resolved)?)?;
    let graph: std::sync::Arc<ComputationGraph> = std::sync::Arc::clone(&bundle.model.graph);
    let (a, _) = load_circuit(&args.a, std::sync::Arc::clone(&graph))?;
    let (b, _) = load_circuit(&args.b, graph)?;
    let o = overlap(&a, &b)?;
    println!("node_hit={:.3} edge_hit={:.3}", o.node_hit, o.edge_hit);
    Ok(())
}

fn cmd_icl(resolved: &Resolved, args: &IclArgs) -> anyhow::Result<()> {
    let tau = args
        .tau
        .or(resolved.tau)
        .ok_or_else(|| anyhow!("--tau is required (or set it in --config)"))?;
    let bundle = load_bundle(&require_model_dir(resolved)?)?;
    let dataset = load_dataset_args(&args.dataset, args.relation.as_deref())?;
    let config = DiscoveryConfig {
        tau,
        ablation: AblationKind::Zero,
        log_scores: false,
        dataset_id: dataset.dataset_id.clone(),
        timestamp: None,
    };
    let seed = args.seed.unwrap_or(resolved.seed);
    let report = icl_compare(&bundle.model, &bundle.tokenizer, &dataset, &config, seed)?;
    write_json(&report, &args.out)?;
    std::fs::write(args.out.with_extension("csv"), icl_to_csv(&report))?;
    write_manifest(
        &args.out,
        "icl",
        json!({
            "model_dir": bundle.dir,
            "dataset": args.dataset,
            "relation": args.relation,
            "tau": tau,
            "seed": seed,
        }),
    )?;
    println!(
        "original={:.2} ablate_extra={:.2} ablate_random={:.2} extra_heads={:?}",
        report.original_pct, report.ablate_extra_pct, report.ablate_random_pct, report.extra_heads
    );
    Ok(())
}

fn cmd_export_dot(resolved: &Resolved, args: &ExportDotArgs) -> anyhow::Result<()> {
    let bundle = load_bundle(&require_model_dir(resolved)?)?;
    let (circuit, file) = load_circuit(&args.circuit, std::sync::Arc::clone(&bundle.model.graph))?;
    let scores: Vec<kc_core::discovery::ScoredEdge> = file
        .edges
        .iter()
        .enumerate()
        .filter_map(|(i, e)| {
            // normalize legacy node names so score lookups match the render
            let src: kc_core::graph::NodeId = e.src.parse().ok()?;
            let dst: kc_core::graph::NodeId = e.dst.parse().ok()?;
            e.score.map(|score| kc_core::discovery::ScoredEdge {
                src: src.to_string(),
                dst: dst.to_string(),
                score,
                kept: true,
                order: i,
            })
        })
        .collect();
    let dot = export_dot(
        &circuit,
        (!scores.is_empty()).then_some(&scores[..]),
        DotOptions {
            collapse_mlp_chains: args.collapse_mlp_chains,
            score_threshold_display: args.score_display_threshold,
        },
    );
    std::fs::write(&args.out, dot)?;
    write_manifest(
        &args.out,
        "export-dot",
        json!({
            "circuit": args.circuit,
            "collapse_mlp_chains": args.collapse_mlp_chains,
            "score_display_threshold": args.score_display_threshold,
        }),
    )?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_filter_known(resolved: &Resolved, args: &FilterKnownArgs) -> anyhow::Result<()> {
    let bundle = load_bundle(&require_model_dir(resolved)?)?;
    let dataset = load_dataset_args(&args.dataset, args.relation.as_deref())?;
    let k = args.k.unwrap_or(resolved.k);
    let (kept, report) = filter_known(&bundle.model, &bundle.tokenizer, &dataset, k)?;
    let mut out = String::new();
    for record in &kept.records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    std::fs::write(&args.out, out)?;
    write_json(&report, args.out.with_extension("report.json"))?;
    write_manifest(
        &args.out,
        "filter-known",
        json!({
            "model_dir": bundle.dir,
            "dataset": args.dataset,
            "relation": args.relation,
            "k": k,
        }),
    )?;
    for row in &report.rows {
        println!("{}\t{}\t{}", row.relation_id, row.total, row.kept);
    }
    Ok(())
}
