/* Stable C interface to the mcmil library. Every function returns a status
 * code; on failure mcmil_last_error() describes the most recent error on the
 * calling thread. Strings returned through char** are owned by the caller
 * and released with mcmil_string_free. */
#ifndef MCMIL_C_API_H
#define MCMIL_C_API_H

#include <stddef.h>
#include <stdint.h>

#if defined(MCMIL_BUILDING_LIBRARY)
#define MCMIL_API __attribute__((visibility("default")))
#else
#define MCMIL_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mcmil_status {
    MCMIL_OK = 0,
    MCMIL_ERR_INVALID_ARGUMENT = 1, /* null handle/pointer, bad flag value */
    MCMIL_ERR_CONFIG = 2,           /* invalid configuration or spec */
    MCMIL_ERR_DIMENSION = 3,
    MCMIL_ERR_NUMERIC = 4,          /* not PSD, undefined statistic, degenerate input */
    MCMIL_ERR_DIVERGED = 5,
    MCMIL_ERR_IO = 6,
    MCMIL_ERR_INTERNAL = 7
} mcmil_status;

typedef struct mcmil_dataset mcmil_dataset;
typedef struct mcmil_model mcmil_model;

MCMIL_API const char* mcmil_version(void);
MCMIL_API const char* mcmil_last_error(void);
MCMIL_API const char* mcmil_status_name(mcmil_status status);
MCMIL_API void mcmil_string_free(char* s);

/* Datasets. `config_json` uses the experiment config schema; only its
 * "dataset" object is read. */
MCMIL_API mcmil_status mcmil_dataset_generate(const char* config_json, uint64_t seed, int threads,
                                              mcmil_dataset** out);
MCMIL_API mcmil_status mcmil_dataset_load(const char* path, mcmil_dataset** out);
MCMIL_API mcmil_status mcmil_dataset_save(const mcmil_dataset* ds, const char* path);
MCMIL_API mcmil_status mcmil_dataset_size(const mcmil_dataset* ds, size_t* n_bags);
/* Bags [begin, end) as a new dataset. */
MCMIL_API mcmil_status mcmil_dataset_slice(const mcmil_dataset* ds, size_t begin, size_t end,
                                           mcmil_dataset** out);
MCMIL_API void mcmil_dataset_free(mcmil_dataset* ds);

/* Models. */
MCMIL_API mcmil_status mcmil_model_load(const char* path, mcmil_model** out);
MCMIL_API mcmil_status mcmil_model_save(const mcmil_model* model, const char* path);
MCMIL_API void mcmil_model_free(mcmil_model* model);

/* Trains with the "model" and "train" sections of `config_json`. The run
 * history is returned as NDJSON when `history_ndjson` is non-null. */
MCMIL_API mcmil_status mcmil_train(const char* config_json, uint64_t seed, const mcmil_dataset* train,
                                   const mcmil_dataset* val, int threads, mcmil_model** out,
                                   char** history_ndjson);

/* {"accuracy", "confusion", "bags": [{label, predicted, d_out, d_feat, probabilities}]} */
MCMIL_API mcmil_status mcmil_evaluate(const mcmil_model* model, const mcmil_dataset* ds, int threads,
                                      char** report_json);

/* Margin CSV (bag_id, predicted, label, d_out, d_feat, d_in_estimate, omega)
 * using the "margins" section of `config_json` and the model's normaliser. */
MCMIL_API mcmil_status mcmil_margins_csv(const mcmil_model* model, const mcmil_dataset* ds,
                                         const char* config_json, uint64_t seed, int threads, char** csv);

/* Statistics report over one or two prediction CSV files (pred_b may be null). */
MCMIL_API mcmil_status mcmil_stats_report(const char* pred_a, const char* pred_b, const char* config_json,
                                          uint64_t seed, int threads, char** report_json);

/* Runs the built-in worked examples; `callback` (optional) sees each check. */
typedef void (*mcmil_selftest_callback)(const char* name, int passed, const char* detail, void* user);
MCMIL_API mcmil_status mcmil_selftest(mcmil_selftest_callback callback, void* user, int* n_failed);

/* Subcommands. `config_json` is a config text (or a manifest); `seed` and
 * `loss_mode` override the file when non-null. Artifacts go to `out_dir`. */
typedef struct mcmil_run_options {
    const char* config_json;
    const char* out_dir;
    const uint64_t* seed;
    const char* loss_mode;
    int threads;
    const char* model_path; /* margins, evaluate */
    const char* pred_a;     /* stats */
    const char* pred_b;     /* stats, optional */
} mcmil_run_options;

MCMIL_API mcmil_status mcmil_run(const char* subcommand, const mcmil_run_options* options);

/* Process exit code for a status: 0 ok, 1 validation error, 2 runtime failure. */
MCMIL_API int mcmil_exit_code(mcmil_status status);

#ifdef __cplusplus
}
#endif

#endif
