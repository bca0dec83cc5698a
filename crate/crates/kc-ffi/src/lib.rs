//! C ABI for the knowledge-circuit toolkit.
//!
//! Handles are opaque pointers created and destroyed by this library; every
//! fallible call returns a [`KcStatus`] and leaves a thread-local message
//! readable via [`kc_last_error`]. Strings are UTF-8, NUL-terminated, and
//! owned by whoever allocated them: outputs of `kc_*` calls must be released
//! with the matching `kc_*_free` function.
//!
//! The generated header lives at `include/kc.h` (regenerated by the build
//! script via cbindgen).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use kc_core::bpe::BpeTokenizer;
use kc_core::data::{tokenize_split, KnowledgeDataset, Split};
use kc_core::discovery::{discover, AblationKind, DiscoveryConfig};
use kc_core::graph::{Circuit, ConnectivityRule};
use kc_core::model::Model;

/// Result code of a fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KcStatus {
    KcOk = 0,
    KcInvalidArgument = 1,
    KcIoError = 2,
    KcParseError = 3,
    KcModelError = 4,
    KcRuntimeError = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn classify(err: &kc_core::Error) -> KcStatus {
    use kc_core::Error::*;
    match err {
        Io(_) => KcStatus::KcIoError,
        Json(_) | Schema(_) | Dataset { .. } | Tokenizer(_) => KcStatus::KcParseError,
        Config(_) | MissingTensor(_) | ShapeMismatch { .. } | UnsupportedDtype { .. } => {
            KcStatus::KcModelError
        }
        InvalidInput(_) | Graph(_) | NormDegenerate => KcStatus::KcInvalidArgument,
    }
}

fn guard<F: FnOnce() -> Result<(), (KcStatus, String)>>(f: F) -> KcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KcStatus::KcOk,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            KcStatus::KcRuntimeError
        }
    }
}

fn core_err(err: kc_core::Error) -> (KcStatus, String) {
    (classify(&err), err.to_string())
}

fn invalid(msg: &str) -> (KcStatus, String) {
    (KcStatus::KcInvalidArgument, msg.to_owned())
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, (KcStatus, String)> {
    if ptr.is_null() {
        return Err(invalid("null string argument"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid("string argument is not valid UTF-8"))
}

/// Loaded model bundle: config, weights, graph, and tokenizer.
pub struct KcModel {
    model: Model,
    tokenizer: BpeTokenizer,
}

/// A kept-edge subset of the model's computation graph.
pub struct KcCircuit {
    circuit: Circuit,
}

/// Last error message of the current thread (empty when no error has
/// occurred). The pointer stays valid until the next failing call on the
/// same thread; do not free it.
#[no_mangle]
pub extern "C" fn kc_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads `config.json`, `model.safetensors`, `vocab.json`, and `merges.txt`
/// from a directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kc_model_load(dir: *const c_char, out: *mut *mut KcModel) -> KcStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("null output pointer"));
        }
        let dir = Path::new(cstr(dir)?);
        let model = Model::from_dir(dir).map_err(core_err)?;
        let tokenizer =
            BpeTokenizer::from_files(dir.join("vocab.json"), dir.join("merges.txt"))
                .map_err(core_err)?;
        if tokenizer.vocab_size() != model.config.vocab_size {
            return Err((
                KcStatus::KcModelError,
                format!(
                    "tokenizer vocabulary ({}) does not match model vocab_size ({})",
                    tokenizer.vocab_size(),
                    model.config.vocab_size
                ),
            ));
        }
        *out = Box::into_raw(Box::new(KcModel { model, tokenizer }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`kc_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn kc_model_free(model: *mut KcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Graph nodes (input + heads + MLPs + output).
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn kc_model_node_count(model: *const KcModel) -> usize {
    model
        .as_ref()
        .map_or(0, |m| m.model.graph.node_count())
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn kc_model_edge_count(model: *const KcModel) -> usize {
    model
        .as_ref()
        .map_or(0, |m| m.model.graph.edge_count())
}

/// Tokenizes text; the ids buffer must be released with [`kc_ids_free`].
///
/// # Safety
/// All pointers must be valid; `text` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn kc_encode(
    model: *const KcModel,
    text: *const c_char,
    out_ids: *mut *mut u32,
    out_len: *mut usize,
) -> KcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("null model"))?;
        if out_ids.is_null() || out_len.is_null() {
            return Err(invalid("null output pointer"));
        }
        let ids = m.tokenizer.encode(cstr(text)?).map_err(core_err)?;
        let mut boxed = ids.into_boxed_slice();
        *out_len = boxed.len();
        *out_ids = boxed.as_mut_ptr();
        std::mem::forget(boxed);
        Ok(())
    })
}

/// # Safety
/// `ids`/`len` must come from [`kc_encode`].
#[no_mangle]
pub unsafe extern "C" fn kc_ids_free(ids: *mut u32, len: usize) {
    if !ids.is_null() {
        drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(ids, len)));
    }
}

/// Decodes ids to text; release the result with [`kc_string_free`].
///
/// # Safety
/// `ids` must point to `len` readable elements.
#[no_mangle]
pub unsafe extern "C" fn kc_decode(
    model: *const KcModel,
    ids: *const u32,
    len: usize,
    out_text: *mut *mut c_char,
) -> KcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("null model"))?;
        if ids.is_null() || out_text.is_null() {
            return Err(invalid("null pointer argument"));
        }
        let slice = std::slice::from_raw_parts(ids, len);
        let text = m.tokenizer.decode(slice).map_err(core_err)?;
        let cstring = CString::new(text.replace('\0', " "))
            .map_err(|_| invalid("decoded text contains interior NUL"))?;
        *out_text = cstring.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from a `kc_*` call that allocates a string.
#[no_mangle]
pub unsafe extern "C" fn kc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Rank (1-based) and probability of `target` as the next token after the
/// prompt, under the full model (`circuit` null) or a circuit run
/// standalone.
///
/// # Safety
/// Pointers must be valid; `ids` must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn kc_next_token(
    model: *const KcModel,
    circuit: *const KcCircuit,
    ids: *const u32,
    len: usize,
    target: u32,
    out_rank: *mut usize,
    out_prob: *mut f64,
) -> KcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("null model"))?;
        if ids.is_null() {
            return Err(invalid("null ids"));
        }
        if target as usize >= m.model.config.vocab_size {
            return Err(invalid("target token out of vocabulary"));
        }
        let tokens = std::slice::from_raw_parts(ids, len);
        let (logits, _) = match circuit.as_ref() {
            Some(c) => m.model.run_masked(tokens, &c.circuit).map_err(core_err)?,
            None => m.model.run_full(tokens).map_err(core_err)?,
        };
        let row = logits.row(len - 1);
        if !out_rank.is_null() {
            *out_rank = kc_core::lens::rank_of(row, target);
        }
        if !out_prob.is_null() {
            *out_prob = kc_core::lens::prob_of(row, target);
        }
        Ok(())
    })
}

/// Runs edge-ablation circuit discovery over a JSONL dataset (optionally a
/// single relation id) at threshold `tau` with zero ablation. The dataset
/// is not gated; pre-filter it with the CLI when needed.
///
/// # Safety
/// Pointers must be valid; `relation` may be null.
#[no_mangle]
pub unsafe extern "C" fn kc_discover(
    model: *const KcModel,
    dataset_path: *const c_char,
    relation: *const c_char,
    tau: f64,
    out: *mut *mut KcCircuit,
) -> KcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("null model"))?;
        if out.is_null() {
            return Err(invalid("null output pointer"));
        }
        let mut dataset =
            KnowledgeDataset::load(cstr(dataset_path)?).map_err(core_err)?;
        if !relation.is_null() {
            dataset = dataset.filter_relation(cstr(relation)?).map_err(core_err)?;
        }
        let batch = tokenize_split(&m.tokenizer, &dataset, Split::All, false).map_err(core_err)?;
        let config = DiscoveryConfig {
            tau,
            ablation: AblationKind::Zero,
            log_scores: false,
            dataset_id: dataset.dataset_id.clone(),
            timestamp: None,
        };
        let result = discover(&m.model, &batch, &config).map_err(core_err)?;
        *out = Box::into_raw(Box::new(KcCircuit {
            circuit: result.circuit,
        }));
        Ok(())
    })
}

/// Loads a circuit file against the model's graph.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn kc_circuit_load(
    model: *const KcModel,
    path: *const c_char,
    out: *mut *mut KcCircuit,
) -> KcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("null model"))?;
        if out.is_null() {
            return Err(invalid("null output pointer"));
        }
        let (circuit, _) =
            kc_core::io::load_circuit(cstr(path)?, Arc::clone(&m.model.graph)).map_err(core_err)?;
        *out = Box::into_raw(Box::new(KcCircuit { circuit }));
        Ok(())
    })
}

/// Saves a circuit (without scores) to a JSON file.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn kc_circuit_save(
    model: *const KcModel,
    circuit: *const KcCircuit,
    path: *const c_char,
) -> KcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("null model"))?;
        let c = circuit.as_ref().ok_or_else(|| invalid("null circuit"))?;
        kc_core::io::save_circuit(&c.circuit, None, m.model.model_id(), cstr(path)?)
            .map_err(core_err)
    })
}

/// # Safety
/// `circuit` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn kc_circuit_edge_count(circuit: *const KcCircuit) -> usize {
    circuit.as_ref().map_or(0, |c| c.circuit.edge_count())
}

/// True iff a directed input-to-output path exists over kept edges.
///
/// # Safety
/// `circuit` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn kc_circuit_is_connected(circuit: *const KcCircuit) -> bool {
    circuit
        .as_ref()
        .is_some_and(|c| c.circuit.is_connected(ConnectivityRule::InputOutputPath))
}

/// # Safety
/// `circuit` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn kc_circuit_free(circuit: *mut KcCircuit) {
    if !circuit.is_null() {
        drop(Box::from_raw(circuit));
    }
}

/// Overlap of circuit `b` against reference circuit `a`
/// (`node_hit = |N_b ∩ N_a| / |N_a|`, likewise for edges).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn kc_overlap(
    a: *const KcCircuit,
    b: *const KcCircuit,
    out_node_hit: *mut f64,
    out_edge_hit: *mut f64,
) -> KcStatus {
    guard(|| {
        let a = a.as_ref().ok_or_else(|| invalid("null circuit a"))?;
        let b = b.as_ref().ok_or_else(|| invalid("null circuit b"))?;
        let o = kc_core::graph::overlap(&a.circuit, &b.circuit).map_err(core_err)?;
        if !out_node_hit.is_null() {
            *out_node_hit = o.node_hit;
        }
        if !out_edge_hit.is_null() {
            *out_edge_hit = o.edge_hit;
        }
        Ok(())
    })
}

/// Fraction of dataset records whose target ranks in the top `k` next-token
/// predictions (full model when `circuit` is null, circuit standalone
/// otherwise).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn kc_hit_at_k(
    model: *const KcModel,
    circuit: *const KcCircuit,
    dataset_path: *const c_char,
    k: usize,
    out_rate: *mut f64,
) -> KcStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("null model"))?;
        if out_rate.is_null() {
            return Err(invalid("null output pointer"));
        }
        let dataset = KnowledgeDataset::load(cstr(dataset_path)?).map_err(core_err)?;
        let prompts = tokenize_split(&m.tokenizer, &dataset, Split::All, false).map_err(core_err)?;
        let rate = kc_core::eval::hit_at_k(
            &m.model,
            circuit.as_ref().map(|c| &c.circuit),
            &prompts,
            k,
        )
        .map_err(core_err)?;
        *out_rate = rate;
        Ok(())
    })
}
