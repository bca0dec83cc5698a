//! A GPT-2-small-shaped checkpoint with a planted fact-recall mechanism.
//!
//! The planted pipeline mirrors how decoder-only models are believed to
//! express relational facts:
//!
//! 1. an early MLP enriches the residual at the subject position with an
//!    "attribute bundle" (unembedding directions of the subject's answers),
//! 2. two mover heads attend from the last position to the subject and copy
//!    the bundle across,
//! 3. a relation head attends to the relation word and emits a relation
//!    feature plus relation-flavored tokens,
//! 4. a late MLP amplifies whichever answer direction is present *and*
//!    matches the active relation, pushing it to the top rank.
//!
//! Linguistic facts are planted weakly; a demo head that fires only when a
//! demonstration answer is present in context raises the amplifier's drive,
//! so in-context prompts recover them (and discovery finds the demo head as
//! an extra circuit member). One currency fact is planted with the wrong
//! answer dominant, as a hallucination specimen.
//!
//! Every non-planted head has a zero output projection and every
//! non-planted MLP neuron a zero output row, so ablation scores of dead
//! edges are exactly zero and discovery prunes them immediately.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bpe::BpeTokenizer;
use crate::config::{Activation, ModelConfig, NormKind, Positional};
use crate::error::{Error, Result};
use crate::weights::{LayerWeights, Weights};

pub const ENRICH_LAYER: usize = 2;
pub const AMP_LAYER: usize = 9;
pub const MOVER_HEADS: [(usize, usize); 2] = [(7, 2), (8, 5)];
pub const RELATION_HEAD: (usize, usize) = (7, 11);
pub const DEMO_HEAD: (usize, usize) = (5, 4);

// gain schedule (see the tuning test in tests/desk_model.rs)
const EMB_NOISE: f32 = 0.036;
const POS_NOISE: f32 = 0.001;
const RAMP_SLOPE: f32 = 0.05;
const GENERIC_MIX: f32 = 0.6;
const QK_SCALE: f32 = 0.4;
const MOVER_QK_SCALES: [f32; 2] = [0.55, 0.85];
const DEMO_QK_SCALE: f32 = 0.5;
const ENRICH_KAPPA: f32 = 0.4;
const ENRICH_THETA: f32 = 4.0;
const ENRICH_GAIN: f32 = 0.5;
const MOVER_GAINS: [f32; 2] = [0.06, 0.045];
const RELATION_GAIN: f32 = 0.08;
const RELATION_FEATURE: f32 = 1.0;
const RELATION_HINT: f32 = 0.35;
const RELATION_CLASS: f32 = 0.15;
const DEMO_GAIN: f32 = 0.05;
const AMP_CONTENT: f32 = 0.45;
const AMP_CONTENT_LING: f32 = 1.0;
const AMP_RELATION: f32 = 0.2;
const AMP_TASK: f32 = 1.05;
const AMP_THETA_STRONG: f32 = 5.5;
const AMP_THETA_WEAK: f32 = 11.5;
const AMP_GAIN: f32 = 1.2;
const STRONG_WEIGHT: f32 = 1.0;
const WEAK_WEIGHT: f32 = 0.40;
const UNEMBED_ANSWER: f32 = 0.4;
const UNEMBED_GENERIC: f32 = 0.5;
const UNEMBED_HINT: f32 = 0.15;
const UNEMBED_NOISE: f32 = 0.002;

pub const RELATIONS: [(&str, &str); 4] = [
    ("country_capital_city", "capital"),
    ("country_language", "language"),
    ("country_currency", "currency"),
    ("adj_comparative", "comparative"),
];

const CAPITALS: [(&str, &str); 24] = [
    ("France", "Paris"),
    ("Germany", "Berlin"),
    ("Italy", "Rome"),
    ("Spain", "Madrid"),
    ("Portugal", "Lisbon"),
    ("Austria", "Vienna"),
    ("Poland", "Warsaw"),
    ("Norway", "Oslo"),
    ("Sweden", "Stockholm"),
    ("Finland", "Helsinki"),
    ("Denmark", "Copenhagen"),
    ("Greece", "Athens"),
    ("Russia", "Moscow"),
    ("Japan", "Tokyo"),
    ("China", "Beijing"),
    ("India", "Delhi"),
    ("Egypt", "Cairo"),
    ("Canada", "Ottawa"),
    ("Brazil", "Brasilia"),
    ("Chile", "Santiago"),
    ("Ireland", "Dublin"),
    ("Hungary", "Budapest"),
    ("South Korea", "Seoul"),
    ("New Zealand", "Wellington"),
];

const LANGUAGES: [(&str, &str); 12] = [
    ("France", "French"),
    ("Germany", "German"),
    ("Italy", "Italian"),
    ("Spain", "Spanish"),
    ("Russia", "Russian"),
    ("Japan", "Japanese"),
    ("China", "Chinese"),
    ("Poland", "Polish"),
    ("Greece", "Greek"),
    ("Portugal", "Portuguese"),
    ("Hungary", "Hungarian"),
    ("Egypt", "Arabic"),
];

const CURRENCIES: [(&str, &str); 5] = [
    ("Japan", "Yen"),
    ("Russia", "Ruble"),
    ("India", "Rupee"),
    ("Poland", "Zloty"),
    ("Hungary", "Forint"),
];

const COMPARATIVES: [(&str, &str); 12] = [
    ("small", "smaller"),
    ("tall", "taller"),
    ("fast", "faster"),
    ("strong", "stronger"),
    ("bright", "brighter"),
    ("cold", "colder"),
    ("warm", "warmer"),
    ("young", "younger"),
    ("cheap", "cheaper"),
    ("quiet", "quieter"),
    ("smooth", "smoother"),
    ("clean", "cleaner"),
];

const GENERIC_WORDS: [&str; 12] = [
    "the", "a", "not", "that", "very", "one", "now", "also", "quite", "still", "known", "what",
];

/// The hallucination specimen: for this subject/relation the wrong answer
/// dominates the planted bundle.
pub const HALLUCINATION: (&str, &str, &str, &str) =
    ("Malaysia", "country_currency", "Ringgit", "Malaysian");

#[derive(Debug, Clone)]
pub struct PlantedFact {
    pub subject: String,
    pub relation_id: String,
    pub object: String,
    /// bundle weight (strong facts 1.0, weak linguistic facts < 1)
    pub weight: f32,
}

/// Construction record handed to tests and to the edit fixtures.
pub struct DeskInfo {
    pub facts: Vec<PlantedFact>,
    /// subject string -> key token (last token of " subject")
    pub subject_key: HashMap<String, u32>,
    /// subject key token -> enrichment neuron index
    pub subject_neuron: HashMap<u32, usize>,
    /// answer first-token -> planted answer direction
    pub answer_dir: HashMap<u32, Array1<f32>>,
    /// relation id -> relation feature direction
    pub relation_dir: HashMap<String, Array1<f32>>,
    /// in-context task direction written by the demo head
    pub task_dir: Array1<f32>,
}

impl DeskInfo {
    pub fn answer_token(&self, tokenizer: &BpeTokenizer, object: &str) -> Result<u32> {
        tokenizer.first_token(&format!(" {}", object.trim()))
    }
}

struct DirBank {
    rng: ChaCha8Rng,
    taken: Vec<Array1<f32>>,
    d: usize,
}

impl DirBank {
    fn new(d: usize, seed: u64) -> Self {
        DirBank {
            rng: ChaCha8Rng::seed_from_u64(seed),
            taken: Vec::new(),
            d,
        }
    }

    /// Fresh unit direction, zero-mean and orthogonal to everything issued
    /// so far.
    fn fresh(&mut self) -> Array1<f32> {
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        loop {
            let mut v = Array1::from_shape_fn(self.d, |_| normal.sample(&mut self.rng));
            let mean = v.sum() / self.d as f32;
            v.mapv_inplace(|x| x - mean);
            for u in &self.taken {
                let dot = v.dot(u);
                v.scaled_add(-dot, u);
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-3 {
                v.mapv_inplace(|x| x / norm);
                self.taken.push(v.clone());
                return v;
            }
        }
    }
}

fn zero_layer(d: usize, qd: usize, d_mlp: usize, rng: &mut ChaCha8Rng) -> LayerWeights {
    let normal = Normal::new(0.0f32, 0.02 / (d as f32).sqrt()).unwrap();
    let mut noise_mat =
        |rows: usize, cols: usize| Array2::from_shape_fn((rows, cols), |_| normal.sample(rng));
    LayerWeights {
        attn_ln_gamma: Array1::ones(d),
        attn_ln_beta: Array1::zeros(d),
        w_q: noise_mat(d, qd),
        w_k: noise_mat(d, qd),
        w_v: noise_mat(d, qd),
        b_q: Array1::zeros(qd),
        b_k: Array1::zeros(qd),
        b_v: Array1::zeros(qd),
        w_o: Array2::zeros((qd, d)),
        b_o: Array1::zeros(d),
        mlp_ln_gamma: Array1::ones(d),
        mlp_ln_beta: Array1::zeros(d),
        w_in: noise_mat(d, d_mlp),
        b_in: Array1::zeros(d_mlp),
        w_gate: None,
        w_out: Array2::zeros((d_mlp, d)),
        b_out: Array1::zeros(d),
    }
}

/// Plants a rank-one query/key pattern on one head: queries read
/// `query_dir`, keys read `key_dir`, both writing the shared in-head
/// direction so that query·key is large exactly when both markers are
/// present.
fn plant_qk(
    lw: &mut LayerWeights,
    head: usize,
    d_head: usize,
    query_dir: &Array1<f32>,
    key_dir: &Array1<f32>,
    scale: f32,
) {
    let inv = scale / (d_head as f32).sqrt();
    for j in 0..d_head {
        let col = head * d_head + j;
        for (i, (&q, &k)) in query_dir.iter().zip(key_dir.iter()).enumerate() {
            lw.w_q[[i, col]] += q * inv;
            lw.w_k[[i, col]] += k * inv;
        }
    }
}

/// Plants one value/output channel on a head: the channel reads `read_dir`
/// from the attended position and writes `gain * write_vec` downstream.
fn plant_ov(
    lw: &mut LayerWeights,
    head: usize,
    d_head: usize,
    channel: usize,
    read_dir: &Array1<f32>,
    write_vec: &Array1<f32>,
    gain: f32,
) {
    assert!(channel < d_head, "head channel budget exceeded");
    let col = head * d_head + channel;
    for (i, &r) in read_dir.iter().enumerate() {
        lw.w_v[[i, col]] = r;
    }
    for (i, &w) in write_vec.iter().enumerate() {
        lw.w_o[[col, i]] = gain * w;
    }
}

fn desk_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        model_id: Some("desk-gpt2-small".to_owned()),
        n_layers: 12,
        n_heads: 12,
        n_kv_heads: None,
        d_model: 768,
        d_head: 64,
        d_mlp: 3072,
        vocab_size,
        n_ctx: 128,
        norm_kind: NormKind::Layernorm,
        norm_eps: 1e-5,
        activation: Activation::Gelu,
        positional: Positional::LearnedAbsolute,
        rope_base: 10_000.0,
    }
}

/// Builds the planted checkpoint against a tokenizer (all fact words must
/// be single tokens in its vocabulary).
pub fn build(tokenizer: &BpeTokenizer) -> Result<(ModelConfig, Weights, DeskInfo)> {
    let config = desk_config(tokenizer.vocab_size());
    let d = config.d_model;
    let dh = config.d_head;
    let qd = config.n_heads * dh;

    // ---- fact table -------------------------------------------------------
    let mut facts: Vec<PlantedFact> = Vec::new();
    for (s, o) in CAPITALS {
        facts.push(PlantedFact {
            subject: s.to_owned(),
            relation_id: "country_capital_city".to_owned(),
            object: o.to_owned(),
            weight: STRONG_WEIGHT,
        });
    }
    for (s, o) in LANGUAGES {
        facts.push(PlantedFact {
            subject: s.to_owned(),
            relation_id: "country_language".to_owned(),
            object: o.to_owned(),
            weight: STRONG_WEIGHT,
        });
    }
    for (s, o) in CURRENCIES {
        facts.push(PlantedFact {
            subject: s.to_owned(),
            relation_id: "country_currency".to_owned(),
            object: o.to_owned(),
            weight: STRONG_WEIGHT,
        });
    }
    for (s, o) in COMPARATIVES {
        facts.push(PlantedFact {
            subject: s.to_owned(),
            relation_id: "adj_comparative".to_owned(),
            object: o.to_owned(),
            weight: WEAK_WEIGHT,
        });
    }
    // the hallucination specimen: correct answer planted weakly, a wrong
    // one dominating the bundle (no amplifier neuron for the wrong one)
    facts.push(PlantedFact {
        subject: HALLUCINATION.0.to_owned(),
        relation_id: HALLUCINATION.1.to_owned(),
        object: HALLUCINATION.2.to_owned(),
        weight: 0.55,
    });

    // ---- token bookkeeping ------------------------------------------------
    let tok_of = |text: &str| -> Result<u32> {
        let ids = tokenizer.encode(text)?;
        match ids.as_slice() {
            [one] => Ok(*one),
            _ => Err(Error::invalid(format!(
                "`{text}` must be a single token in the fixture vocabulary"
            ))),
        }
    };
    let mut subject_key: HashMap<String, u32> = HashMap::new();
    let mut subject_tokens: Vec<u32> = Vec::new();
    for f in &facts {
        let ids = tokenizer.encode(&format!(" {}", f.subject))?;
        // the key (last) subject token carries the subject marker and the
        // identity direction; leading tokens of multi-word subjects stay
        // plain so the movers' attention lands where the bundle is
        let key = *ids.last().unwrap();
        if !subject_tokens.contains(&key) {
            subject_tokens.push(key);
        }
        subject_key.insert(f.subject.clone(), key);
    }
    let mut answer_tokens: Vec<u32> = Vec::new();
    let mut answer_of_fact: Vec<u32> = Vec::new();
    for f in &facts {
        let t = tokenizer.first_token(&format!(" {}", f.object))?;
        if !answer_tokens.contains(&t) {
            answer_tokens.push(t);
        }
        answer_of_fact.push(t);
    }
    let wrong_tok = tok_of(&format!(" {}", HALLUCINATION.3))?;
    if !answer_tokens.contains(&wrong_tok) {
        answer_tokens.push(wrong_tok);
    }
    let is_tok = tok_of(" is")?;
    let called_tok = tok_of(" called")?;
    let relation_tokens: Vec<(String, u32)> = RELATIONS
        .iter()
        .map(|(rel, word)| Ok(((*rel).to_owned(), tok_of(&format!(" {word}"))?)))
        .collect::<Result<_>>()?;
    let hint_tokens: Vec<u32> = relation_tokens.iter().map(|(_, t)| *t).collect();
    let generic_tokens: Vec<u32> = GENERIC_WORDS
        .iter()
        .map(|w| tok_of(&format!(" {w}")))
        .collect::<Result<_>>()?;
    assert!(
        answer_tokens.len() <= dh,
        "answer bundle exceeds one head's channel budget"
    );

    // ---- directions ---------------------------------------------------------
    let mut bank = DirBank::new(d, 0xDE5C);
    let m_subj = bank.fresh();
    let m_is = bank.fresh();
    let m_ans = bank.fresh();
    let task_dir = bank.fresh();
    let subj_dirs: HashMap<u32, Array1<f32>> = subject_tokens
        .iter()
        .map(|&t| (t, bank.fresh()))
        .collect();
    let answer_dirs: HashMap<u32, Array1<f32>> = answer_tokens
        .iter()
        .map(|&t| (t, bank.fresh()))
        .collect();
    let relation_dirs: HashMap<String, Array1<f32>> = relation_tokens
        .iter()
        .map(|(rel, _)| (rel.clone(), bank.fresh()))
        .collect();
    let hint_dirs: HashMap<String, Array1<f32>> = relation_tokens
        .iter()
        .map(|(rel, _)| (rel.clone(), bank.fresh()))
        .collect();
    let generic_dirs: Vec<Array1<f32>> = generic_tokens.iter().map(|_| bank.fresh()).collect();

    // ---- base weights -------------------------------------------------------
    let mut rng = ChaCha8Rng::seed_from_u64(0xD00D);
    let emb_noise = Normal::new(0.0f32, EMB_NOISE).unwrap();
    let mut wte = Array2::from_shape_fn((config.vocab_size, d), |_| emb_noise.sample(&mut rng));
    let pos_noise = Normal::new(0.0f32, POS_NOISE).unwrap();
    let mut wpe = Array2::from_shape_fn((config.n_ctx, d), |_| pos_noise.sample(&mut rng));
    let mut layers: Vec<LayerWeights> = (0..config.n_layers)
        .map(|_| zero_layer(d, qd, config.d_mlp, &mut rng))
        .collect();
    let u_noise = Normal::new(0.0f32, UNEMBED_NOISE).unwrap();
    let mut w_u = Array2::from_shape_fn((d, config.vocab_size), |_| u_noise.sample(&mut rng));

    // ---- embeddings ---------------------------------------------------------
    for &t in &subject_tokens {
        let mut row = wte.row_mut(t as usize);
        row += &m_subj;
        row += &subj_dirs[&t];
    }
    for &t in [is_tok, called_tok].iter() {
        let mut row = wte.row_mut(t as usize);
        row += &m_is;
        for (j, dir) in generic_dirs.iter().enumerate() {
            row.scaled_add(GENERIC_MIX * (1.0 - 0.04 * j as f32), dir);
        }
    }
    for (rel, t) in &relation_tokens {
        let mut row = wte.row_mut(*t as usize);
        row += &relation_dirs[rel];
    }
    for &t in &answer_tokens {
        let mut row = wte.row_mut(t as usize);
        row += &m_ans;
    }
    // key recency ramp: later subject occurrences win the mover's softmax
    for p in 0..config.n_ctx {
        let c = RAMP_SLOPE * p.min(20) as f32;
        wpe.row_mut(p).scaled_add(c, &m_subj);
    }

    // ---- enrichment MLP -------------------------------------------------------
    let mut subject_neuron: HashMap<u32, usize> = HashMap::new();
    {
        let lw = &mut layers[ENRICH_LAYER];
        for (fi, f) in facts.iter().enumerate() {
            let key = subject_key[&f.subject];
            let neuron = match subject_neuron.get(&key) {
                Some(&n) => n,
                None => {
                    let n = subject_neuron.len();
                    subject_neuron.insert(key, n);
                    for (i, &v) in subj_dirs[&key].iter().enumerate() {
                        lw.w_in[[i, n]] = ENRICH_KAPPA * v;
                    }
                    lw.b_in[n] = -ENRICH_THETA;
                    n
                }
            };
            let dir = &answer_dirs[&answer_of_fact[fi]];
            for (i, &v) in dir.iter().enumerate() {
                lw.w_out[[neuron, i]] += ENRICH_GAIN * f.weight * v;
            }
        }
        // wrong-answer bundle component for the hallucination specimen
        let key = subject_key[HALLUCINATION.0];
        let neuron = subject_neuron[&key];
        for (i, &v) in answer_dirs[&wrong_tok].iter().enumerate() {
            lw.w_out[[neuron, i]] += ENRICH_GAIN * STRONG_WEIGHT * v;
        }
    }

    // ---- mover heads ----------------------------------------------------------
    for (mi, &(layer, head)) in MOVER_HEADS.iter().enumerate() {
        let lw = &mut layers[layer];
        plant_qk(lw, head, dh, &m_is, &m_subj, MOVER_QK_SCALES[mi]);
        for (channel, &t) in answer_tokens.iter().enumerate() {
            let dir = answer_dirs[&t].clone();
            plant_ov(lw, head, dh, channel, &dir, &dir, MOVER_GAINS[mi]);
        }
    }

    // ---- relation head ---------------------------------------------------------
    {
        let (layer, head) = RELATION_HEAD;
        let lw = &mut layers[layer];
        // keys: any relation word's feature direction
        let mut all_rel = Array1::<f32>::zeros(d);
        for (rel, _) in &relation_tokens {
            all_rel += &relation_dirs[rel];
        }
        plant_qk(lw, head, dh, &m_is, &all_rel, QK_SCALE);
        for (channel, (rel, _)) in relation_tokens.iter().enumerate() {
            let mut write = relation_dirs[rel].mapv(|v| v * RELATION_FEATURE);
            write.scaled_add(RELATION_HINT, &hint_dirs[rel]);
            let class: Vec<&Array1<f32>> = facts
                .iter()
                .enumerate()
                .filter(|(_, f)| &f.relation_id == rel)
                .map(|(fi, _)| &answer_dirs[&answer_of_fact[fi]])
                .collect();
            if !class.is_empty() {
                let scale = RELATION_CLASS / (class.len() as f32).sqrt();
                for dir in class {
                    write.scaled_add(scale, dir);
                }
            }
            let read = relation_dirs[rel].clone();
            plant_ov(lw, head, dh, channel, &read, &write, RELATION_GAIN);
        }
    }

    // ---- demo head --------------------------------------------------------------
    {
        let (layer, head) = DEMO_HEAD;
        let lw = &mut layers[layer];
        plant_qk(lw, head, dh, &m_is, &m_ans, DEMO_QK_SCALE);
        plant_ov(lw, head, dh, 0, &m_ans, &task_dir, DEMO_GAIN);
    }

    // ---- amplifier MLP -------------------------------------------------------------
    {
        let lw = &mut layers[AMP_LAYER];
        let mut neuron = 0usize;
        let mut seen: Vec<(u32, String)> = Vec::new();
        for (fi, f) in facts.iter().enumerate() {
            // the hallucination specimen never gets an amplifier entry: its
            // correct answer stays a weak bundle trace only
            if f.subject == HALLUCINATION.0 && f.relation_id == HALLUCINATION.1 {
                continue;
            }
            let ans = answer_of_fact[fi];
            if seen.contains(&(ans, f.relation_id.clone())) {
                continue;
            }
            seen.push((ans, f.relation_id.clone()));
            let linguistic = f.relation_id == "adj_comparative";
            let content_gain = if linguistic { AMP_CONTENT_LING } else { AMP_CONTENT };
            for (i, &v) in answer_dirs[&ans].iter().enumerate() {
                lw.w_in[[i, neuron]] = content_gain * v;
            }
            for (i, &v) in relation_dirs[&f.relation_id].iter().enumerate() {
                lw.w_in[[i, neuron]] += AMP_RELATION * v;
            }
            if linguistic {
                for (i, &v) in task_dir.iter().enumerate() {
                    lw.w_in[[i, neuron]] += AMP_TASK * v;
                }
            }
            lw.b_in[neuron] = if linguistic {
                -AMP_THETA_WEAK
            } else {
                -AMP_THETA_STRONG
            };
            for (i, &v) in answer_dirs[&ans].iter().enumerate() {
                lw.w_out[[neuron, i]] = AMP_GAIN * v;
            }
            neuron += 1;
        }
    }

    // ---- unembedding ------------------------------------------------------------------
    for (&t, dir) in &answer_dirs {
        for (i, &v) in dir.iter().enumerate() {
            w_u[[i, t as usize]] += UNEMBED_ANSWER * v;
        }
    }
    for (j, &t) in generic_tokens.iter().enumerate() {
        for (i, &v) in generic_dirs[j].iter().enumerate() {
            w_u[[i, t as usize]] += UNEMBED_GENERIC * v;
        }
    }
    for (k, &t) in hint_tokens.iter().enumerate() {
        let rel = &relation_tokens[k].0;
        for (i, &v) in hint_dirs[rel].iter().enumerate() {
            w_u[[i, t as usize]] += UNEMBED_HINT * v;
        }
    }

    let weights = Weights {
        token_embedding: wte,
        positional_embedding: Some(wpe),
        layers,
        final_ln_gamma: Array1::ones(d),
        final_ln_beta: Array1::zeros(d),
        unembedding: w_u,
    };
    let info = DeskInfo {
        facts,
        subject_key,
        subject_neuron,
        answer_dir: answer_dirs,
        relation_dir: relation_dirs,
        task_dir,
    };
    Ok((config, weights, info))
}

/// Rank-one-style edit fixture: swaps the enrichment bundle entry of one
/// fact to a new answer, leaving every other component untouched (the
/// downstream circuit then extracts the edited content from the subject
/// position).
pub fn rome_style_edit(
    weights: &Weights,
    info: &DeskInfo,
    tokenizer: &BpeTokenizer,
    subject: &str,
    relation_id: &str,
    new_object: &str,
) -> Result<Weights> {
    let fact = info
        .facts
        .iter()
        .find(|f| f.subject == subject && f.relation_id == relation_id)
        .ok_or_else(|| Error::invalid(format!("no planted fact ({subject}, {relation_id})")))?;
    let old_tok = info.answer_token(tokenizer, &fact.object)?;
    let new_tok = info.answer_token(tokenizer, new_object)?;
    let new_dir = info.answer_dir.get(&new_tok).ok_or_else(|| {
        Error::invalid(format!(
            "`{new_object}` is not a planted answer; the edit fixture can only redirect to known answers"
        ))
    })?;
    let old_dir = &info.answer_dir[&old_tok];
    let neuron = info.subject_neuron[&info.subject_key[subject]];
    let mut edited = weights.clone();
    let lw = &mut edited.layers[ENRICH_LAYER];
    for (i, (&o, &n)) in old_dir.iter().zip(new_dir.iter()).enumerate() {
        lw.w_out[[neuron, i]] += ENRICH_GAIN * fact.weight * (n - o);
    }
    Ok(edited)
}

/// Fine-tuning-style edit fixture: a fresh neuron in the MLP of
/// `edit_layer` fires on the prompt-final marker and writes the new answer
/// direction outright, dominating downstream computation on *any* templated
/// prompt (the overfitting failure mode).
pub fn ft_style_edit(
    weights: &Weights,
    info: &DeskInfo,
    tokenizer: &BpeTokenizer,
    new_object: &str,
    edit_layer: usize,
) -> Result<Weights> {
    let new_tok = info.answer_token(tokenizer, new_object)?;
    let new_dir = info
        .answer_dir
        .get(&new_tok)
        .ok_or_else(|| Error::invalid(format!("`{new_object}` is not a planted answer")))?;
    let mut edited = weights.clone();
    let d = edited.token_embedding.ncols();
    // recover the m_is marker from the " is" embedding plant
    let is_tok = tokenizer.first_token(" is")?;
    let called_tok = tokenizer.first_token(" called")?;
    let mut m_is = edited.token_embedding.row(is_tok as usize).to_owned();
    m_is += &edited.token_embedding.row(called_tok as usize);
    let norm = m_is.dot(&m_is).sqrt();
    if norm < 1e-6 {
        return Err(Error::invalid("cannot locate the prompt-final marker"));
    }
    m_is.mapv_inplace(|v| v / norm);

    let lw = &mut edited.layers[edit_layer];
    let d_mlp = lw.b_in.len();
    let neuron = d_mlp - 1;
    if lw.w_out.row(neuron).iter().any(|&v| v != 0.0) {
        return Err(Error::invalid("edit slot already occupied"));
    }
    for i in 0..d {
        lw.w_in[[i, neuron]] = 0.5 * m_is[i];
    }
    lw.b_in[neuron] = -4.0;
    for (i, &v) in new_dir.iter().enumerate() {
        lw.w_out[[neuron, i]] = 0.9 * v;
    }
    Ok(edited)
}
