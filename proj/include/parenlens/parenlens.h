/* C interface to the parenlens library. All strings are UTF-8. Strings the
 * library returns through char** must be released with pl_string_free.
 * Every call returns a pl_status; on failure pl_last_error() describes it
 * (thread-local, valid until the next call on the same thread). */
#ifndef PARENLENS_H
#define PARENLENS_H

#include <stddef.h>
#include <stdint.h>

#if defined(PARENLENS_BUILDING_LIBRARY)
#define PL_API __attribute__((visibility("default")))
#else
#define PL_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum pl_status {
  PL_OK = 0,
  PL_ERR_INVALID_ARGUMENT = 1,
  PL_ERR_CONFIG = 2,
  PL_ERR_TRAINING = 3,
  PL_ERR_MISMATCH = 4,
  PL_ERR_IO = 5,
  PL_ERR_SHAPE = 6,
  PL_ERR_NOT_FOUND = 7,
  PL_ERR_OUT_OF_RANGE = 8,
  PL_ERR_INTERNAL = 99
} pl_status;

typedef struct pl_model pl_model;
typedef struct pl_dataset pl_dataset;

PL_API const char* pl_version(void);
PL_API const char* pl_last_error(void);
PL_API void pl_string_free(char* s);
/* Worker threads for per-prompt loops; 0 = hardware concurrency. */
PL_API void pl_set_workers(unsigned n);

/* Models (MIW1 files). */
PL_API pl_status pl_model_load(const char* path, pl_model** out);
PL_API void pl_model_free(pl_model* m);
/* {"config": {...}, "n_layers", "n_heads", "vocab_size", "vocab": [...], ...} */
PL_API pl_status pl_model_info_json(const pl_model* m, char** out_json);

/* Datasets. config_json is a dataset config object (see README). */
PL_API pl_status pl_dataset_generate(const char* config_json, pl_dataset** out);
PL_API pl_status pl_dataset_load(const char* path, pl_dataset** out);
PL_API pl_status pl_dataset_save(const pl_dataset* d, const char* path);
PL_API void pl_dataset_free(pl_dataset* d);
PL_API size_t pl_dataset_size(const pl_dataset* d);
/* One record as a JSON object (same schema as a JSONL line). */
PL_API pl_status pl_dataset_record_json(const pl_dataset* d, size_t index, char** out_json);

/* Tokenizer round trip; ids_json is a JSON array of integers. */
PL_API pl_status pl_tokenize(const char* text, char** out_ids_json);
PL_API pl_status pl_detokenize(const char* ids_json, char** out_text);

/* Analysis of one prompt; request/response as served by POST /api/analyze.
 * HTTP-style failures map to PL_ERR_INVALID_ARGUMENT (400/422). */
PL_API pl_status pl_analyze(const pl_model* m, const char* request_json, char** out_json);

/* CLI subcommands. options_json carries the subcommand's flags by long name
 * (e.g. {"config": "...", "out": "..."}); out_summary receives the text the
 * command prints. */
PL_API pl_status pl_cmd_gen_data(const char* options_json, char** out_summary);
PL_API pl_status pl_cmd_train(const char* options_json, char** out_summary);
PL_API pl_status pl_cmd_eval(const char* options_json, char** out_summary);
/* which: 1, 2 or 3 */
PL_API pl_status pl_cmd_rq(int which, const char* options_json, char** out_summary);
PL_API pl_status pl_cmd_attn(const char* options_json, char** out_summary);
/* Blocks while serving. options: model?, data?, host, port, static? */
PL_API pl_status pl_cmd_serve(const char* options_json);

#ifdef __cplusplus
}
#endif

#endif /* PARENLENS_H */
