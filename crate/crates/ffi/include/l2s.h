/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef L2S_H
#define L2S_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum L2sStatus {
  L2S_STATUS_OK = 0,
  L2S_STATUS_NULL_ARGUMENT = 1,
  /**
   * Bad config, arguments, shapes or files; the CLI's exit code 3.
   */
  L2S_STATUS_INVALID = 2,
  /**
   * NaN, infinity or an all-masked attention row; the CLI's exit code 4.
   */
  L2S_STATUS_NUMERIC = 3,
  L2S_STATUS_IO = 4,
  /**
   * Output buffer too small; the last error names the required length.
   */
  L2S_STATUS_BUFFER_TOO_SMALL = 5,
  L2S_STATUS_PANIC = 6,
} L2sStatus;

/**
 * A model with its noise schedule.
 */
typedef struct L2sModel L2sModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message on this thread into `buf` (NUL-terminated,
 * truncated to `len`) and returns the full message length excluding the NUL.
 */
size_t l2s_last_error(char *buf, size_t len);

/**
 * Static NUL-terminated crate version.
 */
const char *l2s_version(void);

/**
 * A freshly initialized model from a TOML run config (`NULL` for defaults).
 */
enum L2sStatus l2s_model_new(const char *config_toml, struct L2sModel **out);

/**
 * Load a checkpoint file. Stage-1 checkpoints sample with the global branch only.
 */
enum L2sStatus l2s_model_load(const char *path, struct L2sModel **out);

/**
 * Releases a model; `NULL` is ignored.
 */
void l2s_model_free(struct L2sModel *model);

/**
 * Writes `(h, w, channels, max_frames)` of the model's latent frames.
 */
enum L2sStatus l2s_model_latent_shape(const struct L2sModel *model, size_t *dims);

/**
 * Number of scalar parameters.
 */
size_t l2s_model_param_count(const struct L2sModel *model);

/**
 * Sample one story of `frames` latent frames into `out` (`frames * h * w * 4`
 * floats, frame-major then row-major, channels last).
 *
 * `boxes` is `NULL` for a caption-only story or `4 * frames` values
 * `x0, y0, x1, y1` per frame in `[0, 1]`; with boxes, every frame's subject
 * caption is the global caption. `steps == 0` and `guidance < 0` select the
 * defaults (25 and 4.5).
 */
enum L2sStatus l2s_sample(const struct L2sModel *model,
                          const char *caption,
                          const double *boxes,
                          size_t frames,
                          size_t steps,
                          double guidance,
                          uint64_t seed,
                          float *out,
                          size_t out_len);

/**
 * Fréchet distance between row sets `a (na, d)` and `b (nb, d)`, row-major.
 */
enum L2sStatus l2s_fid(const double *a,
                       size_t na,
                       const double *b,
                       size_t nb,
                       size_t d,
                       double *out);

/**
 * Short hash of a TOML run config as 16 hex digits plus NUL; `buf` needs 17 bytes.
 */
enum L2sStatus l2s_config_hash(const char *config_toml, char *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* L2S_H */
