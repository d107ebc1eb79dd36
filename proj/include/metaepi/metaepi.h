/* C API for the metaepi episodic meta-learning library.
 *
 * All functions return a metaepi_status; 0 means success. On failure the
 * thread-local message from metaepi_last_error() describes what went wrong.
 * Objects returned through out-parameters are owned by the caller and
 * released with the matching *_free function.
 */
#ifndef METAEPI_H
#define METAEPI_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum metaepi_status {
  METAEPI_OK = 0,
  METAEPI_ERR_INVALID_ARGUMENT = 1,
  METAEPI_ERR_IO = 2,
  METAEPI_ERR_PARSE = 3,
  METAEPI_ERR_NUMERIC = 4,
  METAEPI_ERR_INTERNAL = 5
} metaepi_status;

typedef struct metaepi_pool metaepi_pool;
typedef struct metaepi_model metaepi_model;

const char* metaepi_status_name(metaepi_status status);

/* Message for the most recent failing call on this thread; empty string if
 * the last call succeeded. */
const char* metaepi_last_error(void);

/* ---- Class pools ----------------------------------------------------- */

/* Builds the pool described by the "pool" section of a metaepi-config v1
 * JSON document. */
metaepi_status metaepi_pool_generate(const char* config_json, metaepi_pool** out);

/* metaepi-pool v1 text format. */
metaepi_status metaepi_pool_load(const char* path, metaepi_pool** out);
metaepi_status metaepi_pool_save(const metaepi_pool* pool, const char* path);

int metaepi_pool_num_classes(const metaepi_pool* pool);
int metaepi_pool_dim(const metaepi_pool* pool);
int metaepi_pool_num_domains(const metaepi_pool* pool);

void metaepi_pool_free(metaepi_pool* pool);

/* ---- Meta models ------------------------------------------------------ */

/* Meta-trains the model described by the config's "model"/"train"/"episode"
 * sections on the given pool. When curve_csv_path is non-NULL the per-epoch
 * training curve is written there. */
metaepi_status metaepi_train(const char* config_json, const metaepi_pool* pool,
                             const char* curve_csv_path, metaepi_model** out);

/* metaepi-model v1 checkpoint format. */
metaepi_status metaepi_model_load(const char* path, metaepi_model** out);
metaepi_status metaepi_model_save(const metaepi_model* model, const char* path);

void metaepi_model_free(metaepi_model* model);

/* ---- Evaluation -------------------------------------------------------- */

typedef struct metaepi_eval_report {
  double mean_accuracy;
  double std_error;
  double ci95_halfwidth;
  int episodes;
} metaepi_eval_report;

/* Mean accuracy over `episodes` freshly sampled ways-way shots-shot
 * episodes with val_per_class validation instances per class. The report is
 * deterministic in (model, pool, spec, episodes, seed) and independent of
 * the METAEPI_THREADS worker cap. */
metaepi_status metaepi_evaluate(const metaepi_model* model, const metaepi_pool* pool, int ways,
                                int shots, int val_per_class, int episodes, uint64_t seed,
                                metaepi_eval_report* out);

/* ---- Experiments --------------------------------------------------------- */

/* Runs one of the experiment recipes (gen-curve, techniques, bagging,
 * augment, metaknn, domainshift, single-run) from a config file and writes
 * the result CSV. Reruns with the same config produce byte-identical CSVs. */
metaepi_status metaepi_run_experiment(const char* experiment_id, const char* config_path,
                                      const char* out_csv_path);

#ifdef __cplusplus
}
#endif

#endif /* METAEPI_H */
