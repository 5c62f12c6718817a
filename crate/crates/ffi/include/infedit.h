#ifndef INFEDIT_H
#define INFEDIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum IeStatus {
  IE_STATUS_OK = 0,
  IE_STATUS_NULL_POINTER = 1,
  IE_STATUS_INVALID_ARGUMENT = 2,
  IE_STATUS_SHAPE_MISMATCH = 3,
  IE_STATUS_TIMESTEP = 4,
  IE_STATUS_IO = 5,
  IE_STATUS_FORMAT = 6,
  IE_STATUS_CAPABILITY = 7,
  IE_STATUS_BUFFER_TOO_SMALL = 8,
  IE_STATUS_PANIC = 9,
} IeStatus;

// Latent tensor handle (row-major `double`).
typedef struct IeLatent IeLatent;

// Variance schedule handle.
typedef struct IeSchedule IeSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL-terminated,
// truncated to `cap`) and returns the full message length in bytes. Pass a
// null `buf` to query the length.
size_t ie_last_error_message(char *buf, size_t cap);

// Linear-beta schedule with `total_steps` noise levels.
enum IeStatus ie_schedule_linear(size_t total_steps,
                                 double beta_start,
                                 double beta_end,
                                 struct IeSchedule **out);

// Schedule from `alpha_bar[1..=len]`; `alpha_bar[0] = 1` is implied.
enum IeStatus ie_schedule_from_alpha_bar(const double *alpha_bar,
                                         size_t len,
                                         struct IeSchedule **out);

void ie_schedule_free(struct IeSchedule *schedule);

// Number of noise levels `T`; 0 for a null handle.
size_t ie_schedule_total_steps(const struct IeSchedule *schedule);

enum IeStatus ie_schedule_alpha_bar(const struct IeSchedule *schedule, size_t t, double *out);

// Copies `data` (row-major, `prod(shape)` values) into a new latent.
enum IeStatus ie_latent_new(const double *data,
                            const size_t *shape,
                            size_t ndim,
                            struct IeLatent **out);

void ie_latent_free(struct IeLatent *latent);

// Number of elements; 0 for a null handle.
size_t ie_latent_len(const struct IeLatent *latent);

// Number of dimensions; 0 for a null handle.
size_t ie_latent_ndim(const struct IeLatent *latent);

// Writes the dims into `out[0..ndim]`.
enum IeStatus ie_latent_shape(const struct IeLatent *latent, size_t *out, size_t cap);

// Copies the row-major values into `out[0..len]`.
enum IeStatus ie_latent_copy_data(const struct IeLatent *latent, double *out, size_t cap);

// Reads a `.dlt` latent file.
enum IeStatus ie_latent_read(const char *file, struct IeLatent **out);

// Writes a `.dlt` latent file.
enum IeStatus ie_latent_write(const struct IeLatent *latent, const char *file);

// Clean-latent estimate from a noisy latent and predicted noise at `t >= 1`.
enum IeStatus ie_predict_x0(const struct IeSchedule *schedule,
                            const struct IeLatent *z_t,
                            size_t t,
                            const struct IeLatent *eps,
                            struct IeLatent **out);

// Consistent noise `(z_t - sqrt(a) z0) / sqrt(1 - a)` at `t >= 1`.
enum IeStatus ie_epsilon_cons(const struct IeSchedule *schedule,
                              const struct IeLatent *z_t,
                              size_t t,
                              const struct IeLatent *z0,
                              struct IeLatent **out);

// Re-noises a clean estimate to `t_prev` with fresh `noise`.
enum IeStatus ie_ddcm_step(const struct IeSchedule *schedule,
                           const struct IeLatent *z0_pred,
                           size_t t_prev,
                           const struct IeLatent *noise,
                           struct IeLatent **out);

// Virtual inversion round trip over `steps` sampling timesteps, seeded by
// `seed`. Writes the reconstruction to `out` and, if `max_abs_error` is not
// null, its largest deviation from `z0`.
enum IeStatus ie_virtual_invert(const struct IeSchedule *schedule,
                                const struct IeLatent *z0,
                                size_t steps,
                                uint64_t seed,
                                struct IeLatent **out,
                                double *max_abs_error);

// Inversion-free edit under a Gaussian-mixture oracle whose component `k`
// has constant mean `means[k]` and scale `std`. Component `source` is the
// source condition, `target` the target condition.
enum IeStatus ie_mixture_edit(const struct IeSchedule *schedule,
                              const struct IeLatent *z0_src,
                              const double *means,
                              size_t num_components,
                              double std,
                              uint32_t source,
                              uint32_t target,
                              size_t steps,
                              uint64_t seed,
                              struct IeLatent **out);

enum IeStatus ie_mse(const struct IeLatent *a, const struct IeLatent *b, double *out);

// PSNR in dB; positive infinity for identical inputs.
enum IeStatus ie_psnr(const struct IeLatent *a,
                      const struct IeLatent *b,
                      double max_val,
                      double *out);

// SSIM of two 2-D latents over non-overlapping 8x8 windows.
enum IeStatus ie_ssim(const struct IeLatent *a, const struct IeLatent *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INFEDIT_H */
