#ifndef CODISTILL_H
#define CODISTILL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

// Result of every fallible call.
typedef enum CdStatus {
  CD_STATUS_OK = 0,
  // I/O or shape error.
  CD_STATUS_OTHER = 1,
  CD_STATUS_CONFIG = 2,
  CD_STATUS_FORMAT = 3,
  CD_STATUS_DIVERGED = 4,
  CD_STATUS_GRADCHECK = 5,
  // A required pointer argument was NULL.
  CD_STATUS_NULL_ARGUMENT = 6,
  // A string argument was not valid UTF-8.
  CD_STATUS_INVALID_UTF8 = 7,
  // An index or buffer length was out of range.
  CD_STATUS_OUT_OF_RANGE = 8,
  // The library panicked; this is a bug.
  CD_STATUS_PANIC = 9,
} CdStatus;

// Run configuration.
typedef struct CdConfig CdConfig;

// One network with its parameters.
typedef struct CdNetwork CdNetwork;

// Summary of a finished training run.
typedef struct CdReport CdReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread, or NULL.
const char *cd_last_error(void);

// Library version as a static NUL-terminated string.
const char *cd_version(void);

// Releases a string returned by this library.
//
// # Safety
// `s` must be NULL or a pointer obtained from this library that has not been freed.
void cd_string_free(char *s);

// Parses and validates a TOML configuration.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` must be writable.
enum CdStatus cd_config_from_toml(const char *toml, struct CdConfig **out_config);

// Reads a TOML configuration file, applying the output-directory environment override.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CdStatus cd_config_load(const char *path, struct CdConfig **out_config);

// # Safety
// `config` must be a valid handle; `dir` a NUL-terminated string.
enum CdStatus cd_config_set_output_dir(struct CdConfig *config, const char *dir);

// The configuration rendered back to TOML.
//
// # Safety
// `config` must be a valid handle; `out_toml` must be writable.
enum CdStatus cd_config_to_toml(const struct CdConfig *config, char **out_toml);

// # Safety
// `config` must be NULL or a handle that has not been freed.
void cd_config_free(struct CdConfig *config);

// Trains the configured strategy, writing metrics, report and checkpoint
// into the configured output directory.
//
// # Safety
// `config` must be a valid handle; `out_report` must be writable.
enum CdStatus cd_train(const struct CdConfig *config, struct CdReport **out_report);

// # Safety
// `report` must be a valid handle.
size_t cd_report_num_nets(const struct CdReport *report);

// # Safety
// `report` must be a valid handle.
uint64_t cd_report_iterations(const struct CdReport *report);

// # Safety
// `report` must be a valid handle.
uint64_t cd_report_teacher_switches(const struct CdReport *report);

// Final and best test accuracy (percent) of network `net`.
//
// # Safety
// `report` must be a valid handle; output pointers must be writable.
enum CdStatus cd_report_accuracy(const struct CdReport *report,
                                 size_t net,
                                 double *out_final,
                                 double *out_best);

// The full report as JSON.
//
// # Safety
// `report` must be a valid handle; `out_json` must be writable.
enum CdStatus cd_report_to_json(const struct CdReport *report, char **out_json);

// # Safety
// `report` must be NULL or a handle that has not been freed.
void cd_report_free(struct CdReport *report);

// Finite-difference check of the loss gradients. Writes the max relative
// error of L_C, L_D and L_F (in that order) into `out_errors[0..3]` and
// returns `CD_STATUS_GRADCHECK` when any exceeds the tolerance.
//
// # Safety
// `out_errors` must be NULL or point to 3 writable doubles.
enum CdStatus cd_gradcheck(uint64_t seed, double *out_errors);

// Index of the smallest loss, ties to the lowest index.
//
// # Safety
// `losses` must point to `n` doubles; `out_index` must be writable.
enum CdStatus cd_elect_teacher(const double *losses, size_t n, size_t *out_index);

// Initializes a network from a JSON architecture description such as
// `{"kind":"mlp","input_shape":[8],"layer_sizes":[16],"num_classes":4}`.
//
// # Safety
// `arch_json` must be a NUL-terminated string; `out_network` must be writable.
enum CdStatus cd_network_init(const char *arch_json,
                              uint64_t seed,
                              size_t net_id,
                              struct CdNetwork **out_network);

// Number of networks stored in a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out_count` must be writable.
enum CdStatus cd_checkpoint_count(const char *path, size_t *out_count);

// Loads network `index` from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out_network` must be writable.
enum CdStatus cd_checkpoint_load(const char *path, size_t index, struct CdNetwork **out_network);

// Flattened input size of one sample.
//
// # Safety
// `network` must be a valid handle.
size_t cd_network_input_dim(const struct CdNetwork *network);

// # Safety
// `network` must be a valid handle.
size_t cd_network_num_classes(const struct CdNetwork *network);

// # Safety
// `network` must be a valid handle.
size_t cd_network_num_parameters(const struct CdNetwork *network);

// Class probabilities for `batch` samples laid out row-major in `inputs`
// (`batch * input_dim` doubles). Writes `batch * num_classes` doubles.
//
// # Safety
// `inputs` must hold `batch * input_dim` doubles and `out_probs` must have
// room for `out_len` doubles.
enum CdStatus cd_network_forward(const struct CdNetwork *network,
                                 const double *inputs,
                                 size_t batch,
                                 double *out_probs,
                                 size_t out_len);

// # Safety
// `network` must be NULL or a handle that has not been freed.
void cd_network_free(struct CdNetwork *network);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CODISTILL_H */
