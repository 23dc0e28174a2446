#ifndef FEDAPC_H
#define FEDAPC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FedapcStatus {
  FEDAPC_STATUS_OK = 0,
  FEDAPC_STATUS_NULL_POINTER = 1,
  FEDAPC_STATUS_INVALID_ARGUMENT = 2,
  FEDAPC_STATUS_TRUNCATED = 3,
  FEDAPC_STATUS_BAD_VERSION = 4,
  FEDAPC_STATUS_UNKNOWN_KIND = 5,
  FEDAPC_STATUS_TRAILING_BYTES = 6,
  FEDAPC_STATUS_BAD_MAGIC = 7,
  FEDAPC_STATUS_BAD_CONFIG = 8,
  FEDAPC_STATUS_IO = 9,
  FEDAPC_STATUS_BUFFER_TOO_SMALL = 10,
  FEDAPC_STATUS_NOT_RUN = 11,
  FEDAPC_STATUS_RUNTIME = 12,
  FEDAPC_STATUS_PANIC = 13,
} FedapcStatus;

typedef enum FedapcMessageKind {
  FEDAPC_MESSAGE_KIND_BROADCAST = 1,
  FEDAPC_MESSAGE_KIND_UPDATE = 2,
  FEDAPC_MESSAGE_KIND_SHUTDOWN = 3,
} FedapcMessageKind;

/**
 * An experiment config plus, once run, its results.
 */
typedef struct FedapcExperiment FedapcExperiment;

/**
 * A parsed IDX array.
 */
typedef struct FedapcIdx FedapcIdx;

/**
 * A decoded round message.
 */
typedef struct FedapcMessage FedapcMessage;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Description of the last failure on this thread; empty after a success.
 * Valid until the next call into this library on the same thread.
 */
const char *fedapc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fedapc_version(void);

enum FedapcStatus fedapc_message_decode(const uint8_t *bytes,
                                        size_t len,
                                        struct FedapcMessage **out);

/**
 * A BROADCAST carrying `params` and no prototypes.
 */
enum FedapcStatus fedapc_message_new_broadcast(uint32_t round,
                                               const double *params,
                                               size_t count,
                                               struct FedapcMessage **out);

enum FedapcStatus fedapc_message_new_shutdown(uint32_t round, struct FedapcMessage **out);

/**
 * Encoded frame bytes, length prefix included.
 */
enum FedapcStatus fedapc_message_encode(const struct FedapcMessage *msg,
                                        uint8_t *buf,
                                        size_t cap,
                                        size_t *out_len);

enum FedapcStatus fedapc_message_kind(const struct FedapcMessage *msg, enum FedapcMessageKind *out);

enum FedapcStatus fedapc_message_round(const struct FedapcMessage *msg, uint32_t *out);

/**
 * Sender id of an UPDATE; other kinds give `FEDAPC_STATUS_INVALID_ARGUMENT`.
 */
enum FedapcStatus fedapc_message_client_id(const struct FedapcMessage *msg, uint32_t *out);

/**
 * Model parameters of a BROADCAST or UPDATE; SHUTDOWN has none.
 */
enum FedapcStatus fedapc_message_params(const struct FedapcMessage *msg,
                                        double *buf,
                                        size_t cap,
                                        size_t *out_len);

/**
 * Number of class prototypes carried by the message.
 */
enum FedapcStatus fedapc_message_prototype_count(const struct FedapcMessage *msg, size_t *out);

void fedapc_message_free(struct FedapcMessage *msg);

/**
 * Parses and validates a JSON experiment config.
 */
enum FedapcStatus fedapc_experiment_from_json(const char *json, struct FedapcExperiment **out);

/**
 * The built-in synthetic benchmark for `method` ("fedavg", "fedproto" or "fedapc").
 */
enum FedapcStatus fedapc_experiment_default(const char *method, struct FedapcExperiment **out);

/**
 * Overrides rounds and seeds before running. `seeds` may be null when
 * `seed_count` is 0 to keep the configured list.
 */
enum FedapcStatus fedapc_experiment_set_schedule(struct FedapcExperiment *exp,
                                                 uint32_t rounds,
                                                 const uint64_t *seeds,
                                                 size_t seed_count);

/**
 * Runs the experiment. `out_dir` may be null to skip writing files.
 */
enum FedapcStatus fedapc_experiment_run(struct FedapcExperiment *exp, const char *out_dir);

/**
 * Summary average accuracy of a finished run.
 */
enum FedapcStatus fedapc_experiment_average(const struct FedapcExperiment *exp, double *out);

/**
 * Per-round average accuracy of every seed, in CSV row order.
 */
enum FedapcStatus fedapc_experiment_round_accuracies(const struct FedapcExperiment *exp,
                                                     double *buf,
                                                     size_t cap,
                                                     size_t *out_len);

/**
 * `metrics.csv` contents as bytes (no terminating NUL).
 */
enum FedapcStatus fedapc_experiment_metrics_csv(const struct FedapcExperiment *exp,
                                                uint8_t *buf,
                                                size_t cap,
                                                size_t *out_len);

void fedapc_experiment_free(struct FedapcExperiment *exp);

enum FedapcStatus fedapc_idx_parse(const uint8_t *bytes, size_t len, struct FedapcIdx **out);

enum FedapcStatus fedapc_idx_magic(const struct FedapcIdx *idx, uint32_t *out);

/**
 * Dimension sizes, outermost (item count) first.
 */
enum FedapcStatus fedapc_idx_dims(const struct FedapcIdx *idx,
                                  size_t *buf,
                                  size_t cap,
                                  size_t *out_len);

/**
 * Raw payload bytes.
 */
enum FedapcStatus fedapc_idx_data(const struct FedapcIdx *idx,
                                  uint8_t *buf,
                                  size_t cap,
                                  size_t *out_len);

void fedapc_idx_free(struct FedapcIdx *idx);

/**
 * Contrastive prototype loss of `rows × dim` features (row-major) against
 * `proto_count` prototypes (`proto_count × dim`, row-major) whose class ids
 * are `proto_classes`. Rows whose label has no prototype are skipped.
 */
enum FedapcStatus fedapc_apc_loss(const double *features,
                                  size_t rows,
                                  size_t dim,
                                  const uint32_t *labels,
                                  const double *prototypes,
                                  const uint32_t *proto_classes,
                                  size_t proto_count,
                                  double temperature,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDAPC_H */
