//! Deterministic synthetic models for tests, fixtures, and demos.
//!
//! [`random_toy`] and friends produce small fully-random models used by the
//! forward/discovery oracles. [`desk`] builds a GPT-2-small-shaped model
//! whose weights implement a planted fact-recall mechanism (subject
//! enrichment in an early MLP, mover/relation heads mid-stack, an answer
//! amplifier MLP late), so discovery, lens, and evaluation harnesses have a
//! known ground truth at realistic scale.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{Activation, ModelConfig, NormKind, Positional};
use crate::weights::{LayerWeights, Weights};

fn normal_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Array2<f32> {
    let dist = Normal::new(0.0f32, std).unwrap();
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize, std: f32) -> Array1<f32> {
    let dist = Normal::new(0.0f32, std).unwrap();
    Array1::from_shape_fn(len, |_| dist.sample(rng))
}

/// Fully random weights for an arbitrary architecture, scaled so softmaxes
/// and norms stay in a sane range.
pub fn random_weights(config: &ModelConfig, seed: u64) -> Weights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let qd = config.n_heads * config.d_head;
    let kvd = config.n_kv_heads() * config.d_head;
    let w_std = 1.0 / (d as f32).sqrt();
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            attn_ln_gamma: &normal_vec(&mut rng, d, 0.05) + 1.0,
            attn_ln_beta: if config.norm_kind == NormKind::Layernorm {
                normal_vec(&mut rng, d, 0.02)
            } else {
                Array1::zeros(d)
            },
            w_q: normal_mat(&mut rng, d, qd, w_std),
            w_k: normal_mat(&mut rng, d, kvd, w_std),
            w_v: normal_mat(&mut rng, d, kvd, w_std),
            b_q: normal_vec(&mut rng, qd, 0.05),
            b_k: normal_vec(&mut rng, kvd, 0.05),
            b_v: normal_vec(&mut rng, kvd, 0.05),
            w_o: normal_mat(&mut rng, qd, d, w_std),
            b_o: normal_vec(&mut rng, d, 0.05),
            mlp_ln_gamma: &normal_vec(&mut rng, d, 0.05) + 1.0,
            mlp_ln_beta: if config.norm_kind == NormKind::Layernorm {
                normal_vec(&mut rng, d, 0.02)
            } else {
                Array1::zeros(d)
            },
            w_in: normal_mat(&mut rng, d, config.d_mlp, w_std),
            b_in: normal_vec(&mut rng, config.d_mlp, 0.05),
            w_gate: (config.activation == Activation::Swiglu)
                .then(|| normal_mat(&mut rng, d, config.d_mlp, w_std)),
            w_out: normal_mat(&mut rng, config.d_mlp, d, w_std),
            b_out: normal_vec(&mut rng, d, 0.05),
        })
        .collect();
    Weights {
        token_embedding: normal_mat(&mut rng, config.vocab_size, d, 0.5),
        positional_embedding: (config.positional == Positional::LearnedAbsolute)
            .then(|| normal_mat(&mut rng, config.n_ctx, d, 0.1)),
        layers,
        final_ln_gamma: &normal_vec(&mut rng, d, 0.05) + 1.0,
        final_ln_beta: if config.norm_kind == NormKind::Layernorm {
            normal_vec(&mut rng, d, 0.02)
        } else {
            Array1::zeros(d)
        },
        unembedding: normal_mat(&mut rng, d, config.vocab_size, 0.5 / (d as f32).sqrt()),
    }
}

/// Seeded random GPT-2-style toy (layernorm, gelu, learned-absolute).
pub fn random_toy(
    n_layers: usize,
    n_heads: usize,
    d_model: usize,
    vocab_size: usize,
    seed: u64,
) -> (ModelConfig, Weights) {
    assert_eq!(d_model % n_heads, 0);
    let config = ModelConfig {
        model_id: Some(format!("toy-l{n_layers}h{n_heads}d{d_model}-s{seed}")),
        n_layers,
        n_heads,
        n_kv_heads: None,
        d_model,
        d_head: d_model / n_heads,
        d_mlp: 2 * d_model,
        vocab_size,
        n_ctx: 16,
        norm_kind: NormKind::Layernorm,
        norm_eps: 1e-5,
        activation: Activation::Gelu,
        positional: Positional::LearnedAbsolute,
        rope_base: 10_000.0,
    };
    let weights = random_weights(&config, seed);
    (config, weights)
}

/// Seeded random toy with grouped-query attention, rmsnorm, swiglu, and
/// rotary positions (the TinyLlama-style architecture axes).
pub fn grouped_query_toy(seed: u64) -> (ModelConfig, Weights) {
    let config = ModelConfig {
        model_id: Some(format!("toy-gqa-s{seed}")),
        n_layers: 2,
        n_heads: 4,
        n_kv_heads: Some(2),
        d_model: 32,
        d_head: 8,
        d_mlp: 48,
        vocab_size: 48,
        n_ctx: 16,
        norm_kind: NormKind::Rmsnorm,
        norm_eps: 1e-5,
        activation: Activation::Swiglu,
        positional: Positional::Rotary,
        rope_base: 10_000.0,
    };
    let weights = random_weights(&config, seed);
    (config, weights)
}

/// Rebuilds the MLP matrices after a `d_mlp` change, keeping everything else.
pub fn resize_mlp(config: &ModelConfig, mut weights: Weights) -> Weights {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4D4C50);
    let w_std = 1.0 / (config.d_model as f32).sqrt();
    for lw in &mut weights.layers {
        lw.w_in = normal_mat(&mut rng, config.d_model, config.d_mlp, w_std);
        lw.b_in = normal_vec(&mut rng, config.d_mlp, 0.05);
        lw.w_out = normal_mat(&mut rng, config.d_mlp, config.d_model, w_std);
    }
    weights
}

/// Expands a grouped-query model into an equivalent full-head model by
/// repeating each key/value head for its query-head group.
pub fn expand_grouped_kv(config: &ModelConfig, weights: &Weights) -> (ModelConfig, Weights) {
    let mut expanded_cfg = config.clone();
    expanded_cfg.n_kv_heads = None;
    let dh = config.d_head;
    let group = config.kv_group_size();
    let mut expanded = weights.clone();
    for lw in &mut expanded.layers {
        let mut w_k = Array2::zeros((config.d_model, config.n_heads * dh));
        let mut w_v = Array2::zeros((config.d_model, config.n_heads * dh));
        let mut b_k = Array1::zeros(config.n_heads * dh);
        let mut b_v = Array1::zeros(config.n_heads * dh);
        for h in 0..config.n_heads {
            let kv = h / group;
            let dst = ndarray::s![.., h * dh..(h + 1) * dh];
            let src = ndarray::s![.., kv * dh..(kv + 1) * dh];
            w_k.slice_mut(dst).assign(&lw.w_k.slice(src));
            w_v.slice_mut(dst).assign(&lw.w_v.slice(src));
            let dst1 = ndarray::s![h * dh..(h + 1) * dh];
            let src1 = ndarray::s![kv * dh..(kv + 1) * dh];
            b_k.slice_mut(dst1).assign(&lw.b_k.slice(src1));
            b_v.slice_mut(dst1).assign(&lw.b_v.slice(src1));
        }
        lw.w_k = w_k;
        lw.w_v = w_v;
        lw.b_k = b_k;
        lw.b_v = b_v;
    }
    (expanded_cfg, expanded)
}

/// Zero-information model: every logit identical for every prompt.
pub fn uniform_logit_model(vocab_size: usize) -> (ModelConfig, Weights) {
    let config = ModelConfig {
        model_id: Some("uniform".to_owned()),
        n_layers: 1,
        n_heads: 1,
        n_kv_heads: None,
        d_model: 8,
        d_head: 8,
        d_mlp: 16,
        vocab_size,
        n_ctx: 64,
        norm_kind: NormKind::Layernorm,
        norm_eps: 1e-5,
        activation: Activation::Gelu,
        positional: Positional::LearnedAbsolute,
        rope_base: 10_000.0,
    };
    let d = config.d_model;
    let weights = Weights {
        token_embedding: Array2::zeros((vocab_size, d)),
        positional_embedding: Some(Array2::zeros((config.n_ctx, d))),
        layers: vec![LayerWeights {
            attn_ln_gamma: Array1::ones(d),
            attn_ln_beta: Array1::zeros(d),
            w_q: Array2::zeros((d, d)),
            w_k: Array2::zeros((d, d)),
            w_v: Array2::zeros((d, d)),
            b_q: Array1::zeros(d),
            b_k: Array1::zeros(d),
            b_v: Array1::zeros(d),
            w_o: Array2::zeros((d, d)),
            b_o: Array1::zeros(d),
            mlp_ln_gamma: Array1::ones(d),
            mlp_ln_beta: Array1::zeros(d),
            w_in: Array2::zeros((d, config.d_mlp)),
            b_in: Array1::zeros(config.d_mlp),
            w_gate: None,
            w_out: Array2::zeros((config.d_mlp, d)),
            b_out: Array1::zeros(d),
        }],
        final_ln_gamma: Array1::ones(d),
        final_ln_beta: Array1::zeros(d),
        unembedding: Array2::zeros((d, vocab_size)),
    };
    (config, weights)
}

/// Random token sequences for fuzz-style checks (ids strictly below
/// `vocab_size`, lengths in `1..=max_len`).
pub fn random_prompts(
    count: usize,
    vocab_size: u32,
    max_len: usize,
    seed: u64,
) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            (0..len).map(|_| rng.random_range(0..vocab_size)).collect()
        })
        .collect()
}

pub mod desk;
