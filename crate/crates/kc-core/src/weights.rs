//! Weight storage, safetensors load/save, and checkpoint name mapping.
//!
//! Canonical tensor names (shapes in row-major `x @ W` orientation):
//!
//! | name                     | shape              | notes                       |
//! |--------------------------|--------------------|-----------------------------|
//! | `token_embed.w_e`        | vocab × d_model    |                             |
//! | `pos_embed.w_p`          | n_ctx × d_model    | learned-absolute only       |
//! | `blocks.{l}.attn.ln_g/b` | d_model            | `ln_b` layernorm only       |
//! | `blocks.{l}.attn.w_q`    | d_model × H·dh     | per-head column slices      |
//! | `blocks.{l}.attn.w_k/v`  | d_model × KV·dh    | KV = n_kv_heads             |
//! | `blocks.{l}.attn.b_q/k/v`| H·dh / KV·dh       | optional, default zero      |
//! | `blocks.{l}.attn.w_o`    | H·dh × d_model     | per-head row slices         |
//! | `blocks.{l}.attn.b_o`    | d_model            | optional; bias stream       |
//! | `blocks.{l}.mlp.ln_g/b`  | d_model            |                             |
//! | `blocks.{l}.mlp.w_in`    | d_model × d_mlp    |                             |
//! | `blocks.{l}.mlp.w_gate`  | d_model × d_mlp    | swiglu only                 |
//! | `blocks.{l}.mlp.b_in`    | d_mlp              | optional                    |
//! | `blocks.{l}.mlp.w_out`   | d_mlp × d_model    |                             |
//! | `blocks.{l}.mlp.b_out`   | d_model            | optional; bias stream       |
//! | `final_norm.g/b`         | d_model            | `b` layernorm only          |
//! | `unembed.w_u`            | d_model × vocab    |                             |
//!
//! Standard GPT-2 checkpoint names are converted on load:
//! `wte.weight` → `token_embed.w_e`, `wpe.weight` → `pos_embed.w_p`,
//! `h.{l}.ln_1.*` → attention norm, `h.{l}.attn.c_attn.*` → fused QKV
//! (split into thirds along the output axis), `h.{l}.attn.c_proj.*` →
//! `w_o`/`b_o`, `h.{l}.ln_2.*` → MLP norm, `h.{l}.mlp.c_fc.*` → `w_in`,
//! `h.{l}.mlp.c_proj.*` → `w_out`, `ln_f.*` → final norm. GPT-2 Conv1D
//! weights are already (in, out) oriented, so no transposition is applied
//! to them; the unembedding is the transposed token embedding (tied), or
//! the transposed `lm_head.weight` when present. An optional `transformer.`
//! prefix is stripped. Attention-mask buffers (`h.{l}.attn.bias`,
//! `h.{l}.attn.masked_bias`) are ignored.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use ndarray::{Array1, Array2, s};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::config::{Activation, ModelConfig, NormKind, Positional};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_ln_gamma: Array1<f32>,
    pub attn_ln_beta: Array1<f32>,
    pub w_q: Array2<f32>,
    pub w_k: Array2<f32>,
    pub w_v: Array2<f32>,
    pub b_q: Array1<f32>,
    pub b_k: Array1<f32>,
    pub b_v: Array1<f32>,
    pub w_o: Array2<f32>,
    pub b_o: Array1<f32>,
    pub mlp_ln_gamma: Array1<f32>,
    pub mlp_ln_beta: Array1<f32>,
    pub w_in: Array2<f32>,
    pub b_in: Array1<f32>,
    pub w_gate: Option<Array2<f32>>,
    pub w_out: Array2<f32>,
    pub b_out: Array1<f32>,
}

/// All model parameters. Treated as immutable after load; shared across
/// threads behind `Arc`.
#[derive(Debug, Clone)]
pub struct Weights {
    pub token_embedding: Array2<f32>,
    pub positional_embedding: Option<Array2<f32>>,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gamma: Array1<f32>,
    pub final_ln_beta: Array1<f32>,
    pub unembedding: Array2<f32>,
}

pub fn validate_weights(config: &ModelConfig, weights: &Weights) -> Result<()> {
    config.validate()?;
    let d = config.d_model;
    let qd = config.n_heads * config.d_head;
    let kvd = config.n_kv_heads() * config.d_head;
    let check2 = |name: &str, a: &Array2<f32>, rows: usize, cols: usize| -> Result<()> {
        if a.shape() != [rows, cols] {
            return Err(Error::ShapeMismatch {
                name: name.to_owned(),
                expected: vec![rows, cols],
                got: a.shape().to_vec(),
            });
        }
        Ok(())
    };
    let check1 = |name: &str, a: &Array1<f32>, len: usize| -> Result<()> {
        if a.len() != len {
            return Err(Error::ShapeMismatch {
                name: name.to_owned(),
                expected: vec![len],
                got: vec![a.len()],
            });
        }
        Ok(())
    };
    check2("token_embed.w_e", &weights.token_embedding, config.vocab_size, d)?;
    match (config.positional, &weights.positional_embedding) {
        (Positional::LearnedAbsolute, Some(wp)) => check2("pos_embed.w_p", wp, config.n_ctx, d)?,
        (Positional::LearnedAbsolute, None) => {
            return Err(Error::MissingTensor("pos_embed.w_p".to_owned()))
        }
        (Positional::Rotary, Some(_)) => {
            return Err(Error::config("rotary model must not carry pos_embed.w_p"))
        }
        (Positional::Rotary, None) => {}
    }
    if weights.layers.len() != config.n_layers {
        return Err(Error::config(format!(
            "weights carry {} layers, config says {}",
            weights.layers.len(),
            config.n_layers
        )));
    }
    for (l, lw) in weights.layers.iter().enumerate() {
        let p = |part: &str| format!("blocks.{l}.{part}");
        check1(&p("attn.ln_g"), &lw.attn_ln_gamma, d)?;
        check1(&p("attn.ln_b"), &lw.attn_ln_beta, d)?;
        check2(&p("attn.w_q"), &lw.w_q, d, qd)?;
        check2(&p("attn.w_k"), &lw.w_k, d, kvd)?;
        check2(&p("attn.w_v"), &lw.w_v, d, kvd)?;
        check1(&p("attn.b_q"), &lw.b_q, qd)?;
        check1(&p("attn.b_k"), &lw.b_k, kvd)?;
        check1(&p("attn.b_v"), &lw.b_v, kvd)?;
        check2(&p("attn.w_o"), &lw.w_o, qd, d)?;
        check1(&p("attn.b_o"), &lw.b_o, d)?;
        check1(&p("mlp.ln_g"), &lw.mlp_ln_gamma, d)?;
        check1(&p("mlp.ln_b"), &lw.mlp_ln_beta, d)?;
        check2(&p("mlp.w_in"), &lw.w_in, d, config.d_mlp)?;
        check1(&p("mlp.b_in"), &lw.b_in, config.d_mlp)?;
        check2(&p("mlp.w_out"), &lw.w_out, config.d_mlp, d)?;
        check1(&p("mlp.b_out"), &lw.b_out, d)?;
        match (config.activation, &lw.w_gate) {
            (Activation::Swiglu, Some(g)) => check2(&p("mlp.w_gate"), g, d, config.d_mlp)?,
            (Activation::Swiglu, None) => {
                return Err(Error::MissingTensor(p("mlp.w_gate")))
            }
            (Activation::Gelu, Some(_)) => {
                return Err(Error::config(format!(
                    "blocks.{l}.mlp.w_gate present but activation is gelu"
                )))
            }
            (Activation::Gelu, None) => {}
        }
    }
    check1("final_norm.g", &weights.final_ln_gamma, d)?;
    check1("final_norm.b", &weights.final_ln_beta, d)?;
    check2("unembed.w_u", &weights.unembedding, d, config.vocab_size)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// safetensors reading
// ---------------------------------------------------------------------------

fn upcast(name: &str, view: &TensorView) -> Result<Vec<f32>> {
    let data = view.data();
    match view.dtype() {
        Dtype::F32 => Ok(data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()),
        Dtype::F16 => Ok(data
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect()),
        Dtype::BF16 => Ok(data
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect()),
        other => Err(Error::UnsupportedDtype {
            name: name.to_owned(),
            dtype: format!("{other:?}"),
        }),
    }
}

struct TensorSource<'a> {
    st: SafeTensors<'a>,
    used: HashSet<String>,
}

impl<'a> TensorSource<'a> {
    fn new(st: SafeTensors<'a>) -> Self {
        TensorSource {
            st,
            used: HashSet::new(),
        }
    }

    fn has(&self, name: &str) -> bool {
        self.st.names().iter().any(|n| *n == name)
    }

    fn mat(&mut self, name: &str, rows: usize, cols: usize) -> Result<Array2<f32>> {
        let view = self
            .st
            .tensor(name)
            .map_err(|_| Error::MissingTensor(name.to_owned()))?;
        if view.shape() != [rows, cols] {
            return Err(Error::ShapeMismatch {
                name: name.to_owned(),
                expected: vec![rows, cols],
                got: view.shape().to_vec(),
            });
        }
        self.used.insert(name.to_owned());
        let data = upcast(name, &view)?;
        Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked"))
    }

    fn vec(&mut self, name: &str, len: usize) -> Result<Array1<f32>> {
        let view = self
            .st
            .tensor(name)
            .map_err(|_| Error::MissingTensor(name.to_owned()))?;
        if view.shape() != [len] {
            return Err(Error::ShapeMismatch {
                name: name.to_owned(),
                expected: vec![len],
                got: view.shape().to_vec(),
            });
        }
        self.used.insert(name.to_owned());
        Ok(Array1::from_vec(upcast(name, &view)?))
    }

    fn vec_or_zeros(&mut self, name: &str, len: usize) -> Result<Array1<f32>> {
        if self.has(name) {
            self.vec(name, len)
        } else {
            Ok(Array1::zeros(len))
        }
    }

    fn warn_unused(&self, ignored: &[String]) {
        for name in self.st.names() {
            if !self.used.contains(name as &str) && !ignored.iter().any(|i| i == name) {
                log::warn!("ignoring unexpected tensor `{name}`");
            }
        }
    }
}

/// Loads weights from a safetensors file, accepting canonical or standard
/// GPT-2 tensor names. Unknown extra tensors are ignored with a warning.
pub fn load_weights(config: &ModelConfig, path: impl AsRef<Path>) -> Result<Weights> {
    let bytes = std::fs::read(path.as_ref())?;
    let st = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Schema(format!("safetensors: {e}")))?;
    let mut src = TensorSource::new(st);
    let weights = if src.has("token_embed.w_e") {
        load_canonical(config, &mut src)?
    } else if src.has("wte.weight") || src.has("transformer.wte.weight") {
        load_gpt2(config, &mut src)?
    } else {
        return Err(Error::MissingTensor("token_embed.w_e".to_owned()));
    };
    validate_weights(config, &weights)?;
    Ok(weights)
}

fn load_canonical(config: &ModelConfig, src: &mut TensorSource) -> Result<Weights> {
    let d = config.d_model;
    let qd = config.n_heads * config.d_head;
    let kvd = config.n_kv_heads() * config.d_head;
    let token_embedding = src.mat("token_embed.w_e", config.vocab_size, d)?;
    let positional_embedding = match config.positional {
        Positional::LearnedAbsolute => Some(src.mat("pos_embed.w_p", config.n_ctx, d)?),
        Positional::Rotary => None,
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = |part: &str| format!("blocks.{l}.{part}");
        let (attn_ln_beta, mlp_ln_beta, final_only_rms) = match config.norm_kind {
            NormKind::Layernorm => (src.vec(&p("attn.ln_b"), d)?, src.vec(&p("mlp.ln_b"), d)?, false),
            NormKind::Rmsnorm => (Array1::zeros(d), Array1::zeros(d), true),
        };
        let _ = final_only_rms;
        layers.push(LayerWeights {
            attn_ln_gamma: src.vec(&p("attn.ln_g"), d)?,
            attn_ln_beta,
            w_q: src.mat(&p("attn.w_q"), d, qd)?,
            w_k: src.mat(&p("attn.w_k"), d, kvd)?,
            w_v: src.mat(&p("attn.w_v"), d, kvd)?,
            b_q: src.vec_or_zeros(&p("attn.b_q"), qd)?,
            b_k: src.vec_or_zeros(&p("attn.b_k"), kvd)?,
            b_v: src.vec_or_zeros(&p("attn.b_v"), kvd)?,
            w_o: src.mat(&p("attn.w_o"), qd, d)?,
            b_o: src.vec_or_zeros(&p("attn.b_o"), d)?,
            mlp_ln_gamma: src.vec(&p("mlp.ln_g"), d)?,
            mlp_ln_beta,
            w_in: src.mat(&p("mlp.w_in"), d, config.d_mlp)?,
            b_in: src.vec_or_zeros(&p("mlp.b_in"), config.d_mlp)?,
            w_gate: match config.activation {
                Activation::Swiglu => Some(src.mat(&p("mlp.w_gate"), d, config.d_mlp)?),
                Activation::Gelu => None,
            },
            w_out: src.mat(&p("mlp.w_out"), config.d_mlp, d)?,
            b_out: src.vec_or_zeros(&p("mlp.b_out"), d)?,
        });
    }
    let final_ln_gamma = src.vec("final_norm.g", d)?;
    let final_ln_beta = match config.norm_kind {
        NormKind::Layernorm => src.vec("final_norm.b", d)?,
        NormKind::Rmsnorm => Array1::zeros(d),
    };
    let unembedding = src.mat("unembed.w_u", d, config.vocab_size)?;
    src.warn_unused(&[]);
    Ok(Weights {
        token_embedding,
        positional_embedding,
        layers,
        final_ln_gamma,
        final_ln_beta,
        unembedding,
    })
}

fn load_gpt2(config: &ModelConfig, src: &mut TensorSource) -> Result<Weights> {
    if config.norm_kind != NormKind::Layernorm
        || config.activation != Activation::Gelu
        || config.positional != Positional::LearnedAbsolute
        || config.n_kv_heads() != config.n_heads
    {
        return Err(Error::config(
            "GPT-2 checkpoint names imply layernorm/gelu/learned-absolute without grouped-query",
        ));
    }
    let prefix = if src.has("transformer.wte.weight") {
        "transformer."
    } else {
        ""
    };
    let name = |part: &str| format!("{prefix}{part}");
    let d = config.d_model;
    let token_embedding = src.mat(&name("wte.weight"), config.vocab_size, d)?;
    let positional_embedding = Some(src.mat(&name("wpe.weight"), config.n_ctx, d)?);
    let mut layers = Vec::with_capacity(config.n_layers);
    let mut ignored = Vec::new();
    for l in 0..config.n_layers {
        let p = |part: &str| format!("{prefix}h.{l}.{part}");
        ignored.push(p("attn.bias"));
        ignored.push(p("attn.masked_bias"));
        let c_attn_w = src.mat(&p("attn.c_attn.weight"), d, 3 * d)?;
        let c_attn_b = src.vec(&p("attn.c_attn.bias"), 3 * d)?;
        layers.push(LayerWeights {
            attn_ln_gamma: src.vec(&p("ln_1.weight"), d)?,
            attn_ln_beta: src.vec(&p("ln_1.bias"), d)?,
            w_q: c_attn_w.slice(s![.., 0..d]).to_owned(),
            w_k: c_attn_w.slice(s![.., d..2 * d]).to_owned(),
            w_v: c_attn_w.slice(s![.., 2 * d..3 * d]).to_owned(),
            b_q: c_attn_b.slice(s![0..d]).to_owned(),
            b_k: c_attn_b.slice(s![d..2 * d]).to_owned(),
            b_v: c_attn_b.slice(s![2 * d..3 * d]).to_owned(),
            w_o: src.mat(&p("attn.c_proj.weight"), d, d)?,
            b_o: src.vec(&p("attn.c_proj.bias"), d)?,
            mlp_ln_gamma: src.vec(&p("ln_2.weight"), d)?,
            mlp_ln_beta: src.vec(&p("ln_2.bias"), d)?,
            w_in: src.mat(&p("mlp.c_fc.weight"), d, config.d_mlp)?,
            b_in: src.vec(&p("mlp.c_fc.bias"), config.d_mlp)?,
            w_gate: None,
            w_out: src.mat(&p("mlp.c_proj.weight"), config.d_mlp, d)?,
            b_out: src.vec(&p("mlp.c_proj.bias"), d)?,
        });
    }
    let final_ln_gamma = src.vec(&name("ln_f.weight"), d)?;
    let final_ln_beta = src.vec(&name("ln_f.bias"), d)?;
    let unembedding = if src.has("lm_head.weight") {
        src.mat("lm_head.weight", config.vocab_size, d)?.t().to_owned()
    } else {
        token_embedding.t().to_owned()
    };
    src.warn_unused(&ignored);
    Ok(Weights {
        token_embedding,
        positional_embedding,
        layers,
        final_ln_gamma,
        final_ln_beta,
        unembedding,
    })
}

// ---------------------------------------------------------------------------
// safetensors writing (canonical names, F32)
// ---------------------------------------------------------------------------

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Writes weights under canonical tensor names in F32. Zero bias vectors are
/// written explicitly so the file round-trips bit-exactly.
pub fn save_weights(config: &ModelConfig, weights: &Weights, path: impl AsRef<Path>) -> Result<()> {
    validate_weights(config, weights)?;
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
    let mut put2 = |name: String, a: &Array2<f32>| {
        let standard = a.as_standard_layout();
        tensors.insert(
            name,
            (
                a.shape().to_vec(),
                f32_bytes(standard.as_slice().expect("standard layout")),
            ),
        );
    };
    put2("token_embed.w_e".into(), &weights.token_embedding);
    if let Some(wp) = &weights.positional_embedding {
        put2("pos_embed.w_p".into(), wp);
    }
    for (l, lw) in weights.layers.iter().enumerate() {
        let p = |part: &str| format!("blocks.{l}.{part}");
        put2(p("attn.w_q"), &lw.w_q);
        put2(p("attn.w_k"), &lw.w_k);
        put2(p("attn.w_v"), &lw.w_v);
        put2(p("attn.w_o"), &lw.w_o);
        put2(p("mlp.w_in"), &lw.w_in);
        if let Some(g) = &lw.w_gate {
            put2(p("mlp.w_gate"), g);
        }
        put2(p("mlp.w_out"), &lw.w_out);
    }
    put2("unembed.w_u".into(), &weights.unembedding);

    let mut put1 = |name: String, a: &Array1<f32>| {
        tensors.insert(
            name,
            (vec![a.len()], f32_bytes(a.as_slice().expect("contiguous"))),
        );
    };
    for (l, lw) in weights.layers.iter().enumerate() {
        let p = |part: &str| format!("blocks.{l}.{part}");
        put1(p("attn.ln_g"), &lw.attn_ln_gamma);
        put1(p("attn.b_q"), &lw.b_q);
        put1(p("attn.b_k"), &lw.b_k);
        put1(p("attn.b_v"), &lw.b_v);
        put1(p("attn.b_o"), &lw.b_o);
        put1(p("mlp.ln_g"), &lw.mlp_ln_gamma);
        put1(p("mlp.b_in"), &lw.b_in);
        put1(p("mlp.b_out"), &lw.b_out);
        if config.norm_kind == NormKind::Layernorm {
            put1(p("attn.ln_b"), &lw.attn_ln_beta);
            put1(p("mlp.ln_b"), &lw.mlp_ln_beta);
        }
    }
    put1("final_norm.g".into(), &weights.final_ln_gamma);
    if config.norm_kind == NormKind::Layernorm {
        put1("final_norm.b".into(), &weights.final_ln_beta);
    }

    let views: Vec<(String, TensorView)> = tensors
        .iter()
        .map(|(name, (shape, bytes))| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Schema(format!("safetensors: {e}")))
        })
        .collect::<Result<_>>()?;
    let blob = safetensors::serialize(views, None)
        .map_err(|e| Error::Schema(format!("safetensors: {e}")))?;
    std::fs::write(path.as_ref(), blob)?;
    Ok(())
}
