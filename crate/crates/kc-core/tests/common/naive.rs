//! Reference implementations used as independent oracles.
//!
//! `straight_forward` is a standard layerwise transformer forward pass (no
//! graph machinery; heads summed into the residual as they are computed).
//! `masked_logits` evaluates node inputs directly from the residual-rewrite
//! upstream sums, recomputing everything from scratch for whatever kept-edge
//! predicate it is given. Both are written independently of the library's
//! execution engine so they can check it.

use std::collections::HashMap;

use kc_core::config::{Activation, ModelConfig, NormKind, Positional};
use kc_core::graph::NodeId;
use kc_core::weights::Weights;
use ndarray::{s, Array1, Array2};

fn norm_row(row: &Array1<f32>, gamma: &Array1<f32>, beta: &Array1<f32>, cfg: &ModelConfig) -> Array1<f32> {
    let d = row.len() as f32;
    match cfg.norm_kind {
        NormKind::Layernorm => {
            let mean = row.sum() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / d;
            let inv = 1.0 / (var + cfg.norm_eps).sqrt();
            Array1::from_shape_fn(row.len(), |j| (row[j] - mean) * inv * gamma[j] + beta[j])
        }
        NormKind::Rmsnorm => {
            let ms = row.iter().map(|&v| v * v).sum::<f32>() / d;
            let inv = 1.0 / (ms + cfg.norm_eps).sqrt();
            Array1::from_shape_fn(row.len(), |j| row[j] * inv * gamma[j])
        }
    }
}

fn norm_rows(x: &Array2<f32>, gamma: &Array1<f32>, beta: &Array1<f32>, cfg: &ModelConfig) -> Array2<f32> {
    let mut out = Array2::zeros(x.raw_dim());
    for (i, row) in x.outer_iter().enumerate() {
        out.row_mut(i).assign(&norm_row(&row.to_owned(), gamma, beta, cfg));
    }
    out
}

fn reference_gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + ((2.0 / std::f32::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn reference_silu(x: f32) -> f32 {
    x * (1.0 / (1.0 + (-x).exp()))
}

fn rope_rotate(x: &mut Array2<f32>, cfg: &ModelConfig) {
    if cfg.positional != Positional::Rotary {
        return;
    }
    let half = cfg.d_head / 2;
    for p in 0..x.nrows() {
        for i in 0..half {
            let freq = (cfg.rope_base as f64).powf(-2.0 * i as f64 / cfg.d_head as f64);
            let (sin, cos) = ((p as f64 * freq).sin() as f32, (p as f64 * freq).cos() as f32);
            let (a, b) = (x[[p, i]], x[[p, i + half]]);
            x[[p, i]] = a * cos - b * sin;
            x[[p, i + half]] = a * sin + b * cos;
        }
    }
}

fn embed(cfg: &ModelConfig, w: &Weights, tokens: &[u32]) -> Array2<f32> {
    let mut resid = Array2::zeros((tokens.len(), cfg.d_model));
    for (p, &t) in tokens.iter().enumerate() {
        let mut row = w.token_embedding.row(t as usize).to_owned();
        if let Some(wp) = &w.positional_embedding {
            row = &row + &wp.row(p);
        }
        resid.row_mut(p).assign(&row);
    }
    resid
}

/// One attention head's output given the (already normed) sublayer input.
fn head_output(
    cfg: &ModelConfig,
    w: &Weights,
    layer: usize,
    head: usize,
    normed: &Array2<f32>,
) -> Array2<f32> {
    let lw = &w.layers[layer];
    let dh = cfg.d_head;
    let kv = head / (cfg.n_heads / cfg.n_kv_heads());
    let mut q = normed.dot(&lw.w_q.slice(s![.., head * dh..(head + 1) * dh]));
    let mut k = normed.dot(&lw.w_k.slice(s![.., kv * dh..(kv + 1) * dh]));
    let mut v = normed.dot(&lw.w_v.slice(s![.., kv * dh..(kv + 1) * dh]));
    for p in 0..q.nrows() {
        for j in 0..dh {
            q[[p, j]] += lw.b_q[head * dh + j];
            k[[p, j]] += lw.b_k[kv * dh + j];
            v[[p, j]] += lw.b_v[kv * dh + j];
        }
    }
    rope_rotate(&mut q, cfg);
    rope_rotate(&mut k, cfg);
    let seq = normed.nrows();
    let mut ctx = Array2::zeros((seq, dh));
    for i in 0..seq {
        let mut weights = vec![0.0f32; i + 1];
        let mut max = f32::NEG_INFINITY;
        for (j, wj) in weights.iter_mut().enumerate() {
            let mut dot = 0.0;
            for c in 0..dh {
                dot += q[[i, c]] * k[[j, c]];
            }
            *wj = dot / (dh as f32).sqrt();
            max = max.max(*wj);
        }
        let mut denom = 0.0;
        for wj in weights.iter_mut() {
            *wj = (*wj - max).exp();
            denom += *wj;
        }
        for (j, wj) in weights.iter().enumerate() {
            for c in 0..dh {
                ctx[[i, c]] += wj / denom * v[[j, c]];
            }
        }
    }
    ctx.dot(&lw.w_o.slice(s![head * dh..(head + 1) * dh, ..]))
}

fn mlp_output(cfg: &ModelConfig, w: &Weights, layer: usize, normed: &Array2<f32>) -> Array2<f32> {
    let lw = &w.layers[layer];
    let mut h = normed.dot(&lw.w_in);
    for p in 0..h.nrows() {
        for j in 0..h.ncols() {
            h[[p, j]] += lw.b_in[j];
        }
    }
    match cfg.activation {
        Activation::Gelu => h.mapv_inplace(reference_gelu),
        Activation::Swiglu => {
            let gate = normed.dot(lw.w_gate.as_ref().unwrap());
            for p in 0..h.nrows() {
                for j in 0..h.ncols() {
                    h[[p, j]] *= reference_silu(gate[[p, j]]);
                }
            }
        }
    }
    h.dot(&lw.w_out)
}

/// Standard (non-graph) forward pass: residual accumulated layer by layer.
pub fn straight_forward(cfg: &ModelConfig, w: &Weights, tokens: &[u32]) -> Array2<f32> {
    let mut resid = embed(cfg, w, tokens);
    for layer in 0..cfg.n_layers {
        let lw = &w.layers[layer];
        let normed = norm_rows(&resid, &lw.attn_ln_gamma, &lw.attn_ln_beta, cfg);
        let mut attn_total: Array2<f32> = Array2::zeros(resid.raw_dim());
        for head in 0..cfg.n_heads {
            attn_total = attn_total + head_output(cfg, w, layer, head, &normed);
        }
        for p in 0..resid.nrows() {
            for j in 0..resid.ncols() {
                attn_total[[p, j]] += lw.b_o[j];
            }
        }
        resid = resid + attn_total;
        let normed = norm_rows(&resid, &lw.mlp_ln_gamma, &lw.mlp_ln_beta, cfg);
        let mut mlp = mlp_output(cfg, w, layer, &normed);
        for p in 0..resid.nrows() {
            for j in 0..resid.ncols() {
                mlp[[p, j]] += lw.b_out[j];
            }
        }
        resid = resid + mlp;
    }
    let normed = norm_rows(&resid, &w.final_ln_gamma, &w.final_ln_beta, cfg);
    normed.dot(&w.unembedding)
}

fn upstream_nodes(cfg: &ModelConfig, dst: NodeId) -> Vec<NodeId> {
    let mut ups = vec![NodeId::Input];
    let reach = |l: usize, same_layer_heads: bool| {
        let mut v = Vec::new();
        for layer in 0..cfg.n_layers {
            for head in 0..cfg.n_heads {
                if layer < l || (same_layer_heads && layer == l) {
                    v.push(NodeId::Attn { layer, head });
                }
            }
            if layer < l {
                v.push(NodeId::Mlp { layer });
            }
        }
        v
    };
    match dst {
        NodeId::Input => vec![],
        NodeId::Attn { layer, .. } => {
            ups.extend(reach(layer, false));
            ups
        }
        NodeId::Mlp { layer } => {
            ups.extend(reach(layer, true));
            ups
        }
        NodeId::Output => {
            ups.extend(reach(cfg.n_layers, false));
            ups
        }
    }
}

fn bias_before(cfg: &ModelConfig, w: &Weights, dst: NodeId) -> Array1<f32> {
    let sublayers = match dst {
        NodeId::Input => 0,
        NodeId::Attn { layer, .. } => 2 * layer,
        NodeId::Mlp { layer } => 2 * layer + 1,
        NodeId::Output => 2 * cfg.n_layers,
    };
    let mut acc = Array1::zeros(cfg.d_model);
    for k in 0..sublayers {
        let lw = &w.layers[k / 2];
        acc = if k % 2 == 0 { acc + &lw.b_o } else { acc + &lw.b_out };
    }
    acc
}

/// Direct evaluation of the residual rewrite under a kept-edge predicate;
/// every node input is rebuilt from scratch as the bias stream plus the sum
/// of kept upstream node outputs.
pub fn masked_logits(
    cfg: &ModelConfig,
    w: &Weights,
    tokens: &[u32],
    kept: &dyn Fn(NodeId, NodeId) -> bool,
) -> Array2<f32> {
    let seq = tokens.len();
    let mut outputs: HashMap<NodeId, Array2<f32>> = HashMap::new();
    outputs.insert(NodeId::Input, embed(cfg, w, tokens));

    let assemble = |outputs: &HashMap<NodeId, Array2<f32>>, dst: NodeId| -> Array2<f32> {
        let mut acc = Array2::zeros((seq, cfg.d_model));
        let bias = bias_before(cfg, w, dst);
        for p in 0..seq {
            for j in 0..cfg.d_model {
                acc[[p, j]] = bias[j];
            }
        }
        for src in upstream_nodes(cfg, dst) {
            if kept(src, dst) {
                acc = acc + &outputs[&src];
            }
        }
        acc
    };

    for layer in 0..cfg.n_layers {
        let lw = &w.layers[layer];
        for head in 0..cfg.n_heads {
            let dst = NodeId::Attn { layer, head };
            let input = assemble(&outputs, dst);
            let normed = norm_rows(&input, &lw.attn_ln_gamma, &lw.attn_ln_beta, cfg);
            outputs.insert(dst, head_output(cfg, w, layer, head, &normed));
        }
        let dst = NodeId::Mlp { layer };
        let input = assemble(&outputs, dst);
        let normed = norm_rows(&input, &lw.mlp_ln_gamma, &lw.mlp_ln_beta, cfg);
        outputs.insert(dst, mlp_output(cfg, w, layer, &normed));
    }
    let input = assemble(&outputs, NodeId::Output);
    let normed = norm_rows(&input, &w.final_ln_gamma, &w.final_ln_beta, cfg);
    normed.dot(&w.unembedding)
}

#[allow(dead_code)]
pub fn log_prob(logits_row: &[f32], token: u32) -> f64 {
    let max = logits_row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let denom: f64 = logits_row.iter().map(|&l| ((l as f64) - max).exp()).sum();
    logits_row[token as usize] as f64 - max - denom.ln()
}

#[allow(dead_code)]
pub struct OracleEntry {
    pub src: NodeId,
    pub dst: NodeId,
    pub score: f64,
    pub kept: bool,
}

/// From-scratch discovery oracle: the same traversal order as the library
/// (destinations reverse-topological, sources descending), every candidate
/// scored with two fresh full rewrite evaluations; removal when score < tau.
#[allow(dead_code)]
pub fn oracle_discover(
    cfg: &ModelConfig,
    w: &Weights,
    batch: &[(Vec<u32>, u32)],
    tau: f64,
) -> Vec<OracleEntry> {
    let mut nodes = vec![NodeId::Input];
    for layer in 0..cfg.n_layers {
        for head in 0..cfg.n_heads {
            nodes.push(NodeId::Attn { layer, head });
        }
        nodes.push(NodeId::Mlp { layer });
    }
    nodes.push(NodeId::Output);

    let allowed = |src: NodeId, dst: NodeId| -> bool {
        use NodeId::*;
        match (src, dst) {
            (_, Input) | (Output, _) => false,
            (Input, _) => true,
            (_, Output) => true,
            (Attn { layer: a, .. }, Attn { layer: b, .. }) => a < b,
            (Attn { layer: a, .. }, Mlp { layer: b }) => a <= b,
            (Mlp { layer: a }, Attn { layer: b, .. }) => a < b,
            (Mlp { layer: a }, Mlp { layer: b }) => a < b,
        }
    };

    let mut removed: std::collections::HashSet<(NodeId, NodeId)> = Default::default();
    let mut log = Vec::new();
    for di in (1..nodes.len()).rev() {
        let dst = nodes[di];
        for si in (0..di).rev() {
            let src = nodes[si];
            if !allowed(src, dst) {
                continue;
            }
            let score_for = |extra: Option<(NodeId, NodeId)>| -> f64 {
                let mut total = 0.0;
                for (tokens, target) in batch {
                    let kept = |s: NodeId, d: NodeId| -> bool {
                        !removed.contains(&(s, d)) && extra != Some((s, d))
                    };
                    let logits = masked_logits(cfg, w, tokens, &kept);
                    let row: Vec<f32> = logits.row(tokens.len() - 1).to_vec();
                    total += log_prob(&row, *target);
                }
                total / batch.len() as f64
            };
            let score = score_for(None) - score_for(Some((src, dst)));
            let kept = score >= tau;
            if !kept {
                removed.insert((src, dst));
            }
            log.push(OracleEntry {
                src,
                dst,
                score,
                kept,
            });
        }
    }
    log
}
