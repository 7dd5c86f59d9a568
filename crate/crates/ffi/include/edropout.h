#ifndef EDROPOUT_H
#define EDROPOUT_H

/* Generated by cbindgen from crates/ffi. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum EdStatus {
  ED_STATUS_OK = 0,
  ED_STATUS_NULL_POINTER = 1,
  ED_STATUS_INVALID_ARGUMENT = 2,
  ED_STATUS_SHAPE_MISMATCH = 3,
  ED_STATUS_IO = 4,
  ED_STATUS_FORMAT = 5,
  ED_STATUS_PANIC = 6,
} EdStatus;

/**
 * A network together with its unit map and an optional stored best state.
 */
typedef struct EdNetwork EdNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *ed_last_error(void);

/**
 * Builds a preset network (`"toy10"`, `"smallcnn"` or `"mlp"`) for
 * `channels x height x width` inputs with freshly seeded weights.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum EdStatus ed_network_build_preset(const char *name,
                                      size_t channels,
                                      size_t height,
                                      size_t width,
                                      size_t num_classes,
                                      uint64_t seed,
                                      struct EdNetwork **out);

/**
 * Loads a checkpoint written by the `edropout` CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum EdStatus ed_network_load(const char *path, struct EdNetwork **out);

/**
 * Writes the network and its stored best state as a checkpoint.
 *
 * # Safety
 * `net` must be a live handle and `path` a NUL-terminated string.
 */
enum EdStatus ed_network_save(const struct EdNetwork *net, const char *path);

/**
 * Releases a network handle. Null is ignored.
 *
 * # Safety
 * `net` must be null or a handle not yet freed.
 */
void ed_network_free(struct EdNetwork *net);

/**
 * Number of prunable units D (the pruning-state length); 0 for a null handle.
 *
 * # Safety
 * `net` must be null or a live handle.
 */
size_t ed_network_num_units(const struct EdNetwork *net);

/**
 * Number of classes C; 0 for a null handle.
 *
 * # Safety
 * `net` must be null or a live handle.
 */
size_t ed_network_num_classes(const struct EdNetwork *net);

/**
 * Total trainable parameter count; 0 for a null handle.
 *
 * # Safety
 * `net` must be null or a live handle.
 */
size_t ed_network_num_params(const struct EdNetwork *net);

/**
 * Number of f64 values in one input sample (channels * height * width).
 *
 * # Safety
 * `net` must be null or a live handle.
 */
size_t ed_network_sample_len(const struct EdNetwork *net);

/**
 * Copies the stored best state into `mask_out` (one byte per unit).
 * Returns `ED_STATUS_INVALID_ARGUMENT` when the handle holds no best state.
 *
 * # Safety
 * `mask_out` must hold `ed_network_num_units(net)` bytes.
 */
enum EdStatus ed_network_best_state(const struct EdNetwork *net, uint8_t *mask_out);

/**
 * Computes logits for `batch` samples laid out row-major in `input`, writing
 * `batch * num_classes` values to `logits_out`.
 *
 * # Safety
 * `input` must hold `batch * ed_network_sample_len(net)` values, `mask` must
 * be null or hold `ed_network_num_units(net)` bytes, and `logits_out` must
 * hold `batch * ed_network_num_classes(net)` values.
 */
enum EdStatus ed_network_forward(const struct EdNetwork *net,
                                 const double *input,
                                 size_t batch,
                                 const uint8_t *mask,
                                 double *logits_out);

/**
 * Mean energy loss of the network under `mask` on a labelled batch.
 *
 * # Safety
 * Buffers as for [`ed_network_forward`]; `targets` must hold `batch` labels.
 */
enum EdStatus ed_network_energy(const struct EdNetwork *net,
                                const double *input,
                                size_t batch,
                                const uint32_t *targets,
                                const uint8_t *mask,
                                double *energy_out);

/**
 * Mean energy loss for precomputed logits (`batch x classes`, row-major).
 *
 * # Safety
 * `logits` must hold `batch * classes` values and `targets` `batch` labels.
 */
enum EdStatus ed_energy_loss(const double *logits,
                             size_t batch,
                             size_t classes,
                             const uint32_t *targets,
                             double *energy_out);

/**
 * Fraction of parameters that survive pruning with `mask`.
 *
 * # Safety
 * `mask` must hold `ed_network_num_units(net)` bytes.
 */
enum EdStatus ed_network_kept_ratio(const struct EdNetwork *net,
                                    const uint8_t *mask,
                                    double *ratio_out);

/**
 * Integer index of a state, most significant bit first, zero-based.
 *
 * # Safety
 * `mask` must hold `len` bytes.
 */
enum EdStatus ed_state_index(const uint8_t *mask, size_t len, uint64_t *index_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EDROPOUT_H */
