/* C ABI for the knowledge-circuit toolkit. See kc-ffi/src/lib.rs for ownership rules. */

#pragma once

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of a fallible call.
typedef enum KcStatus {
  KC_OK = 0,
  KC_INVALID_ARGUMENT = 1,
  KC_IO_ERROR = 2,
  KC_PARSE_ERROR = 3,
  KC_MODEL_ERROR = 4,
  KC_RUNTIME_ERROR = 5,
} KcStatus;

// A kept-edge subset of the model's computation graph.
typedef struct KcCircuit KcCircuit;

// Loaded model bundle: config, weights, graph, and tokenizer.
typedef struct KcModel KcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message of the current thread (empty when no error has
// occurred). The pointer stays valid until the next failing call on the
// same thread; do not free it.
const char *kc_last_error(void);

// Loads `config.json`, `model.safetensors`, `vocab.json`, and `merges.txt`
// from a directory.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` a valid pointer.
enum KcStatus kc_model_load(const char *dir, struct KcModel **out);

// # Safety
// `model` must come from [`kc_model_load`] and not be freed twice.
void kc_model_free(struct KcModel *model);

// Graph nodes (input + heads + MLPs + output).
//
// # Safety
// `model` must be a live handle.
size_t kc_model_node_count(const struct KcModel *model);

// # Safety
// `model` must be a live handle.
size_t kc_model_edge_count(const struct KcModel *model);

// Tokenizes text; the ids buffer must be released with [`kc_ids_free`].
//
// # Safety
// All pointers must be valid; `text` NUL-terminated.
enum KcStatus kc_encode(const struct KcModel *model,
                        const char *text,
                        uint32_t **out_ids,
                        size_t *out_len);

// # Safety
// `ids`/`len` must come from [`kc_encode`].
void kc_ids_free(uint32_t *ids, size_t len);

// Decodes ids to text; release the result with [`kc_string_free`].
//
// # Safety
// `ids` must point to `len` readable elements.
enum KcStatus kc_decode(const struct KcModel *model,
                        const uint32_t *ids,
                        size_t len,
                        char **out_text);

// # Safety
// `s` must come from a `kc_*` call that allocates a string.
void kc_string_free(char *s);

// Rank (1-based) and probability of `target` as the next token after the
// prompt, under the full model (`circuit` null) or a circuit run
// standalone.
//
// # Safety
// Pointers must be valid; `ids` must hold `len` elements.
enum KcStatus kc_next_token(const struct KcModel *model,
                            const struct KcCircuit *circuit,
                            const uint32_t *ids,
                            size_t len,
                            uint32_t target,
                            size_t *out_rank,
                            double *out_prob);

// Runs edge-ablation circuit discovery over a JSONL dataset (optionally a
// single relation id) at threshold `tau` with zero ablation. The dataset
// is not gated; pre-filter it with the CLI when needed.
//
// # Safety
// Pointers must be valid; `relation` may be null.
enum KcStatus kc_discover(const struct KcModel *model,
                          const char *dataset_path,
                          const char *relation,
                          double tau,
                          struct KcCircuit **out);

// Loads a circuit file against the model's graph.
//
// # Safety
// Pointers must be valid.
enum KcStatus kc_circuit_load(const struct KcModel *model,
                              const char *path,
                              struct KcCircuit **out);

// Saves a circuit (without scores) to a JSON file.
//
// # Safety
// Pointers must be valid.
enum KcStatus kc_circuit_save(const struct KcModel *model,
                              const struct KcCircuit *circuit,
                              const char *path);

// # Safety
// `circuit` must be a live handle.
size_t kc_circuit_edge_count(const struct KcCircuit *circuit);

// True iff a directed input-to-output path exists over kept edges.
//
// # Safety
// `circuit` must be a live handle.
bool kc_circuit_is_connected(const struct KcCircuit *circuit);

// # Safety
// `circuit` must come from this library and not be freed twice.
void kc_circuit_free(struct KcCircuit *circuit);

// Overlap of circuit `b` against reference circuit `a`
// (`node_hit = |N_b ∩ N_a| / |N_a|`, likewise for edges).
//
// # Safety
// Pointers must be valid.
enum KcStatus kc_overlap(const struct KcCircuit *a,
                         const struct KcCircuit *b,
                         double *out_node_hit,
                         double *out_edge_hit);

// Fraction of dataset records whose target ranks in the top `k` next-token
// predictions (full model when `circuit` is null, circuit standalone
// otherwise).
//
// # Safety
// Pointers must be valid.
enum KcStatus kc_hit_at_k(const struct KcModel *model,
                          const struct KcCircuit *circuit,
                          const char *dataset_path,
                          size_t k,
                          double *out_rate);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
