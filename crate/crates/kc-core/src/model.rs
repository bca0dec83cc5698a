//! Graph-decomposed transformer execution.
//!
//! The model runs as a set of nodes (input embedding, attention heads, MLPs,
//! output unembedding) whose inputs are maskable sums of upstream node
//! outputs. With the full edge set this reproduces the standard forward pass:
//! the pre-norm residual at any point equals the input embedding plus all
//! upstream head/MLP outputs plus the bias stream.
//!
//! Per-sublayer output biases (`b_o`, `b_out`) are not attributed to any
//! node; they accumulate in an always-on bias stream that every downstream
//! node reads regardless of the mask. Pre-norms are applied inside each node
//! on its assembled input, so per-head decomposition stays exact and norms
//! are never folded into weights.

use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::config::{Activation, ModelConfig, NormKind, Positional};
use crate::error::{Error, Result};
use crate::graph::{Circuit, ComputationGraph, NodeId};
use crate::weights::{load_weights, validate_weights, Weights};

/// Per-node output tensors from one forward pass, plus the bias stream and
/// (optionally) per-head attention patterns. The output node's logits are
/// returned by the run itself, not stored here.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    node_outputs: Vec<Array2<f32>>,
    pub bias_stream: Array2<f32>,
    attn_patterns: Vec<Array2<f32>>,
    n_heads: usize,
}

impl ActivationCache {
    fn new(node_count: usize, n_layers: usize, n_heads: usize, keep_attn: bool) -> Self {
        ActivationCache {
            node_outputs: vec![Array2::zeros((0, 0)); node_count],
            bias_stream: Array2::zeros((0, 0)),
            attn_patterns: if keep_attn {
                vec![Array2::zeros((0, 0)); n_layers * n_heads]
            } else {
                Vec::new()
            },
            n_heads,
        }
    }

    pub(crate) fn set_output(&mut self, idx: usize, out: Array2<f32>) {
        self.node_outputs[idx] = out;
    }

    pub(crate) fn output_by_index(&self, idx: usize) -> &Array2<f32> {
        &self.node_outputs[idx]
    }

    /// Output tensor of a node (`None` for the output node or before a run).
    pub fn node_output(&self, graph: &ComputationGraph, node: NodeId) -> Option<&Array2<f32>> {
        let idx = graph.node_index(node).ok()?;
        let arr = &self.node_outputs[idx];
        (arr.nrows() > 0).then_some(arr)
    }

    pub(crate) fn set_attn(&mut self, layer: usize, head: usize, pattern: Array2<f32>) {
        if !self.attn_patterns.is_empty() {
            self.attn_patterns[layer * self.n_heads + head] = pattern;
        }
    }

    /// Attention weight matrix (seq × seq) for one head, if retained.
    pub fn attn_pattern(&self, layer: usize, head: usize) -> Option<&Array2<f32>> {
        let arr = self.attn_patterns.get(layer * self.n_heads + head)?;
        (arr.nrows() > 0).then_some(arr)
    }
}

/// Per-position mean node outputs over a reference batch (for mean ablation).
#[derive(Debug, Clone)]
pub struct ReferenceMeans {
    sums: Vec<Array2<f32>>,
    counts: Array1<f32>,
    max_len: usize,
}

impl ReferenceMeans {
    pub fn collect(model: &Model, batch: &[Vec<u32>]) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::invalid("mean ablation requires a reference batch"));
        }
        let max_len = batch.iter().map(Vec::len).max().unwrap();
        let node_count = model.graph.node_count();
        let mut sums = vec![Array2::zeros((max_len, model.config.d_model)); node_count];
        let mut counts = Array1::<f32>::zeros(max_len);
        for tokens in batch {
            let (_, cache) = model.run_full(tokens)?;
            let seq = tokens.len();
            for idx in 0..node_count - 1 {
                sums[idx]
                    .slice_mut(s![0..seq, ..])
                    .scaled_add(1.0, cache.output_by_index(idx));
            }
            for p in 0..seq {
                counts[p] += 1.0;
            }
        }
        Ok(ReferenceMeans {
            sums,
            counts,
            max_len,
        })
    }

    /// Mean output rows of a node for a prompt of length `seq`; positions
    /// beyond every reference prompt are zero.
    pub(crate) fn mean_rows(&self, node_idx: usize, seq: usize, d_model: usize) -> Array2<f32> {
        let mut out = Array2::zeros((seq, d_model));
        let upto = seq.min(self.max_len);
        for p in 0..upto {
            if self.counts[p] > 0.0 {
                let row = self.sums[node_idx].row(p).mapv(|v| v / self.counts[p]);
                out.row_mut(p).assign(&row);
            }
        }
        out
    }
}

/// What replaces a removed edge's contribution.
#[derive(Debug, Clone, Copy, Default)]
pub enum Ablation<'a> {
    #[default]
    Zero,
    Mean(&'a ReferenceMeans),
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions<'a> {
    pub ablation: Ablation<'a>,
    /// Retain per-head attention patterns in the cache.
    pub keep_attn: bool,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        RunOptions {
            ablation: Ablation::Zero,
            keep_attn: true,
        }
    }
}

/// Result of evaluating a single node on an assembled input.
pub enum NodeEval {
    /// Head or MLP output (seq × d_model); heads also carry their pattern.
    Stream {
        output: Array2<f32>,
        attn: Option<Array2<f32>>,
    },
    /// Output-node logits (seq × vocab).
    Logits(Array2<f32>),
    /// Input-node output (seq × d_model); ignores the assembled input.
    Embedding(Array2<f32>),
}

/// An immutable model: config, weights, the dense computation graph, and
/// derived tables (bias-stream prefixes, rotary tables). Forward calls are
/// `&self` and own their caches, so concurrent runs over different prompts
/// are safe.
pub struct Model {
    pub config: ModelConfig,
    pub weights: Arc<Weights>,
    pub graph: Arc<ComputationGraph>,
    /// `bias_prefix[k]` = sum of stream biases of the first `k` sublayers
    /// (sublayer 2l = attention of layer l, 2l+1 = MLP of layer l).
    bias_prefix: Vec<Array1<f32>>,
    rope_cos: Option<Array2<f32>>,
    rope_sin: Option<Array2<f32>>,
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        validate_weights(&config, &weights)?;
        let graph = ComputationGraph::build(&config);
        let mut bias_prefix = Vec::with_capacity(2 * config.n_layers + 1);
        let mut acc = Array1::<f32>::zeros(config.d_model);
        bias_prefix.push(acc.clone());
        for layer in &weights.layers {
            acc += &layer.b_o;
            bias_prefix.push(acc.clone());
            acc += &layer.b_out;
            bias_prefix.push(acc.clone());
        }
        let (rope_cos, rope_sin) = if config.positional == Positional::Rotary {
            let half = config.d_head / 2;
            let mut cos = Array2::zeros((config.n_ctx, half));
            let mut sin = Array2::zeros((config.n_ctx, half));
            for p in 0..config.n_ctx {
                for i in 0..half {
                    let freq = (config.rope_base as f64)
                        .powf(-2.0 * i as f64 / config.d_head as f64);
                    let angle = p as f64 * freq;
                    cos[[p, i]] = angle.cos() as f32;
                    sin[[p, i]] = angle.sin() as f32;
                }
            }
            (Some(cos), Some(sin))
        } else {
            (None, None)
        };
        Ok(Model {
            config,
            weights: Arc::new(weights),
            graph,
            bias_prefix,
            rope_cos,
            rope_sin,
        })
    }

    /// Loads `config.json` + `model.safetensors` from a directory.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Self::from_files(dir.join("config.json"), dir.join("model.safetensors"))
    }

    pub fn from_files(
        config_path: impl AsRef<Path>,
        weights_path: impl AsRef<Path>,
    ) -> Result<Self> {
        let config = ModelConfig::from_json_file(config_path)?;
        let weights = load_weights(&config, weights_path)?;
        Self::new(config, weights)
    }

    pub fn model_id(&self) -> &str {
        self.config.model_id.as_deref().unwrap_or("unknown")
    }

    pub fn validate_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty prompt"));
        }
        if tokens.len() > self.config.n_ctx {
            return Err(Error::invalid(format!(
                "prompt length {} exceeds n_ctx {}",
                tokens.len(),
                self.config.n_ctx
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} out of vocabulary ({} entries)",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Stream biases accumulated strictly upstream of `node`.
    pub fn bias_to_date(&self, node: NodeId) -> &Array1<f32> {
        let k = match node {
            NodeId::Input => 0,
            NodeId::Attn { layer, .. } => 2 * layer,
            NodeId::Mlp { layer } => 2 * layer + 1,
            NodeId::Output => 2 * self.config.n_layers,
        };
        &self.bias_prefix[k]
    }

    /// Stream biases accumulated through layer `layer`'s MLP inclusive.
    pub fn bias_through_mlp(&self, layer: usize) -> &Array1<f32> {
        &self.bias_prefix[2 * (layer + 1)]
    }

    /// Token embedding plus (learned-absolute) positional embedding.
    pub fn input_node_output(&self, tokens: &[u32]) -> Array2<f32> {
        let d = self.config.d_model;
        let mut out = Array2::zeros((tokens.len(), d));
        for (p, &t) in tokens.iter().enumerate() {
            let mut row = self.weights.token_embedding.row(t as usize).to_owned();
            if let Some(wp) = &self.weights.positional_embedding {
                row += &wp.row(p);
            }
            out.row_mut(p).assign(&row);
        }
        out
    }

    fn norm_rows(
        &self,
        x: ArrayView2<f32>,
        gamma: ArrayView1<f32>,
        beta: ArrayView1<f32>,
    ) -> Array2<f32> {
        let eps = self.config.norm_eps;
        let d = x.ncols() as f32;
        let mut out = Array2::zeros(x.raw_dim());
        for (i, row) in x.axis_iter(Axis(0)).enumerate() {
            match self.config.norm_kind {
                NormKind::Layernorm => {
                    let mean = row.sum() / d;
                    let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / d;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut o = out.row_mut(i);
                    for (j, &v) in row.iter().enumerate() {
                        o[j] = (v - mean) * inv * gamma[j] + beta[j];
                    }
                }
                NormKind::Rmsnorm => {
                    let ms = row.fold(0.0, |acc, &v| acc + v * v) / d;
                    let inv = 1.0 / (ms + eps).sqrt();
                    let mut o = out.row_mut(i);
                    for (j, &v) in row.iter().enumerate() {
                        o[j] = v * inv * gamma[j];
                    }
                }
            }
        }
        out
    }

    /// Final norm then unembedding; rows of `states` are residual vectors.
    pub fn unembed_rows(&self, states: ArrayView2<f32>) -> Array2<f32> {
        let normed = self.norm_rows(
            states,
            self.weights.final_ln_gamma.view(),
            self.weights.final_ln_beta.view(),
        );
        normed.dot(&self.weights.unembedding)
    }

    fn apply_rope(&self, x: &mut Array2<f32>) {
        let (Some(cos), Some(sin)) = (&self.rope_cos, &self.rope_sin) else {
            return;
        };
        let half = self.config.d_head / 2;
        for p in 0..x.nrows() {
            for i in 0..half {
                let (c, s) = (cos[[p, i]], sin[[p, i]]);
                let (a, b) = (x[[p, i]], x[[p, i + half]]);
                x[[p, i]] = a * c - b * s;
                x[[p, i + half]] = a * s + b * c;
            }
        }
    }

    /// Evaluates one node on an assembled input of shape seq × d_model.
    /// Heads apply their sublayer pre-norm, project the per-head q/k/v
    /// slices (grouped-query models repeat key/value heads in interleaved
    /// order), run causal softmax attention, and project through their slice
    /// of `w_o` — excluding the shared output bias, which lives in the bias
    /// stream. MLPs likewise exclude their output bias. The output node
    /// applies the final norm and unembeds to logits.
    pub fn node_forward(&self, node: NodeId, input: ArrayView2<f32>) -> Result<NodeEval> {
        if input.ncols() != self.config.d_model {
            return Err(Error::invalid(format!(
                "node input must have width {}, got {}",
                self.config.d_model,
                input.ncols()
            )));
        }
        match node {
            NodeId::Input => Err(Error::invalid(
                "input node has no assembled input; use input_node_output",
            )),
            NodeId::Attn { layer, head } => {
                let (output, attn) = self.head_forward(layer, head, input)?;
                Ok(NodeEval::Stream {
                    output,
                    attn: Some(attn),
                })
            }
            NodeId::Mlp { layer } => Ok(NodeEval::Stream {
                output: self.mlp_forward(layer, input),
                attn: None,
            }),
            NodeId::Output => Ok(NodeEval::Logits(self.unembed_rows(input))),
        }
    }

    fn head_forward(
        &self,
        layer: usize,
        head: usize,
        input: ArrayView2<f32>,
    ) -> Result<(Array2<f32>, Array2<f32>)> {
        let lw = &self.weights.layers[layer];
        let dh = self.config.d_head;
        let kv_head = head / self.config.kv_group_size();
        let q_cols = head * dh..(head + 1) * dh;
        let kv_cols = kv_head * dh..(kv_head + 1) * dh;

        let x = self.norm_rows(input, lw.attn_ln_gamma.view(), lw.attn_ln_beta.view());
        let mut q = x.dot(&lw.w_q.slice(s![.., q_cols.clone()]));
        q += &lw.b_q.slice(s![q_cols.clone()]);
        let mut k = x.dot(&lw.w_k.slice(s![.., kv_cols.clone()]));
        k += &lw.b_k.slice(s![kv_cols.clone()]);
        let mut v = x.dot(&lw.w_v.slice(s![.., kv_cols.clone()]));
        v += &lw.b_v.slice(s![kv_cols]);
        self.apply_rope(&mut q);
        self.apply_rope(&mut k);

        let seq = input.nrows();
        let scale = 1.0 / (dh as f32).sqrt();
        let mut scores = q.dot(&k.t());
        scores *= scale;
        let mut attn = Array2::zeros((seq, seq));
        for i in 0..seq {
            let row = scores.row(i);
            let mut max = f32::NEG_INFINITY;
            for j in 0..=i {
                max = max.max(row[j]);
            }
            let mut denom = 0.0;
            for j in 0..=i {
                denom += (row[j] - max).exp();
            }
            for j in 0..=i {
                attn[[i, j]] = (row[j] - max).exp() / denom;
            }
        }
        let ctx = attn.dot(&v);
        let output = ctx.dot(&lw.w_o.slice(s![head * dh..(head + 1) * dh, ..]));
        Ok((output, attn))
    }

    fn mlp_forward(&self, layer: usize, input: ArrayView2<f32>) -> Array2<f32> {
        let lw = &self.weights.layers[layer];
        let x = self.norm_rows(input, lw.mlp_ln_gamma.view(), lw.mlp_ln_beta.view());
        let mut h = x.dot(&lw.w_in);
        h += &lw.b_in;
        match self.config.activation {
            Activation::Gelu => h.mapv_inplace(gelu),
            Activation::Swiglu => {
                let gate = x.dot(lw.w_gate.as_ref().expect("validated"));
                ndarray::Zip::from(&mut h).and(&gate).for_each(|u, &g| {
                    *u *= silu(g);
                });
            }
        }
        h.dot(&lw.w_out)
    }

    /// Bias stream to date plus the sum of cached outputs of exactly the
    /// upstream nodes whose edge into `node` is kept; under mean ablation,
    /// removed edges contribute the reference per-position mean instead of
    /// zero. Summation order is fixed (bias first, then sources in ascending
    /// topological order).
    pub fn assemble_input(
        &self,
        node: NodeId,
        circuit: &Circuit,
        cache: &ActivationCache,
        ablation: Ablation,
    ) -> Result<Array2<f32>> {
        let dst = self.graph.node_index(node)?;
        let seq = cache.output_by_index(0).nrows();
        let mut acc: Array2<f32> = Array2::zeros((seq, self.config.d_model));
        acc += self.bias_to_date(node);
        for eid in self.graph.in_edge_ids(dst) {
            let (src, _) = self.graph.edge(eid);
            if circuit.contains(eid) {
                acc += cache.output_by_index(src);
            } else if let Ablation::Mean(means) = ablation {
                acc += &means.mean_rows(src, seq, self.config.d_model);
            }
        }
        Ok(acc)
    }

    /// Standard forward pass: the full edge set, cache fully populated
    /// (including attention patterns).
    pub fn run_full(&self, tokens: &[u32]) -> Result<(Array2<f32>, ActivationCache)> {
        self.run_masked(tokens, &Circuit::full(Arc::clone(&self.graph)))
    }

    pub fn run_masked(
        &self,
        tokens: &[u32],
        circuit: &Circuit,
    ) -> Result<(Array2<f32>, ActivationCache)> {
        self.run_masked_opts(tokens, circuit, &RunOptions::default())
    }

    /// Executes nodes in topological order, each consuming its assembled
    /// input under the circuit's kept-edge mask.
    pub fn run_masked_opts(
        &self,
        tokens: &[u32],
        circuit: &Circuit,
        opts: &RunOptions,
    ) -> Result<(Array2<f32>, ActivationCache)> {
        self.validate_tokens(tokens)?;
        if !Arc::ptr_eq(&circuit.graph, &self.graph)
            && circuit.graph.edge_count() != self.graph.edge_count()
        {
            return Err(Error::Graph("circuit built for a different graph".to_owned()));
        }
        let node_count = self.graph.node_count();
        let mut cache = ActivationCache::new(
            node_count,
            self.config.n_layers,
            self.config.n_heads,
            opts.keep_attn,
        );
        cache.set_output(0, self.input_node_output(tokens));
        let seq = tokens.len();
        cache.bias_stream = broadcast_rows(&self.bias_prefix[2 * self.config.n_layers], seq);

        let mut logits = None;
        for idx in 1..node_count {
            let node = self.graph.node(idx);
            let input = self.assemble_input(node, circuit, &cache, opts.ablation)?;
            match self.node_forward(node, input.view())? {
                NodeEval::Stream { output, attn } => {
                    if let (Some(pattern), NodeId::Attn { layer, head }) = (attn, node) {
                        if opts.keep_attn {
                            cache.set_attn(layer, head, pattern);
                        }
                    }
                    cache.set_output(idx, output);
                }
                NodeEval::Logits(l) => logits = Some(l),
                NodeEval::Embedding(_) => unreachable!(),
            }
        }
        Ok((logits.expect("output node evaluated"), cache))
    }
}

pub(crate) fn broadcast_rows(bias: &Array1<f32>, seq: usize) -> Array2<f32> {
    let mut out = Array2::zeros((seq, bias.len()));
    for mut row in out.axis_iter_mut(Axis(0)) {
        row.assign(bias);
    }
    out
}

/// GPT-2's tanh-approximated gelu.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}
