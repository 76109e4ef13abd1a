#ifndef METAQUANT_H
#define METAQUANT_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes double as CLI exit codes. */
typedef enum mq_status {
    MQ_OK = 0,
    MQ_VALIDATION_FAILED = 1, /* a check ran and reported failures */
    MQ_RUNTIME_ABORT = 2,     /* non-finite loss or other runtime fault */
    MQ_CONFIG_ERROR = 3       /* bad config file, key, or value */
} mq_status;

/* Opaque experiment configuration. */
typedef struct mq_config mq_config;

mq_config* mq_config_new(void);
void mq_config_free(mq_config* cfg);

/* Loads `key = value` lines from a file into cfg. */
mq_status mq_config_load(mq_config* cfg, const char* path);

/* Sets one key, e.g. mq_config_set(cfg, "quant.grad_bits", "4"). */
mq_status mq_config_set(mq_config* cfg, const char* key, const char* value);

typedef struct mq_run_summary {
    double final_train_loss;
    double final_test_accuracy;
    int64_t iterations;
    int has_delta;
    double delta_vs_fp;
} mq_run_summary;

/* Trains per cfg; writes metrics.csv, summary.txt, config.txt and model.bin
 * under the configured output directory. */
mq_status mq_train(const mq_config* cfg, mq_run_summary* out_summary);

/* Re-evaluates a finished run directory (config.txt + model.bin). */
mq_status mq_eval_run(const char* run_dir, double* out_accuracy);

/* Finite-difference validation of the meta-gradient path for all three
 * calibration-network designs. Returns MQ_OK on pass, MQ_VALIDATION_FAILED
 * otherwise. The human-readable report is written to `report` (truncated to
 * report_len, always NUL-terminated) when non-NULL. */
mq_status mq_grad_check(double threshold, char* report, size_t report_len);

/* Oracle-equivalence sweep of the symmetric uniform quantizer. */
mq_status mq_quantizer_check(int64_t cases, uint64_t seed, char* report, size_t report_len);

/* Message from the most recent failing call on this thread. */
const char* mq_last_error(void);

const char* mq_version(void);

#ifdef __cplusplus
}
#endif

#endif /* METAQUANT_H */
