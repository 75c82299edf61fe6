#ifndef PITCHFLOW_H
#define PITCHFLOW_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PfStatus {
  PF_STATUS_OK = 0,
  PF_STATUS_NULL_POINTER = 1,
  PF_STATUS_INVALID_ARGUMENT = 2,
  PF_STATUS_OUT_OF_RANGE = 3,
  PF_STATUS_LENGTH_MISMATCH = 4,
  PF_STATUS_DOMAIN = 5,
  PF_STATUS_NUMERIC = 6,
  PF_STATUS_IO = 7,
  PF_STATUS_PARSE = 8,
  PF_STATUS_CORRUPT_CHECKPOINT = 9,
  // The output buffer is too small; the required count was written.
  PF_STATUS_BUFFER_TOO_SMALL = 10,
  PF_STATUS_PANIC = 11,
} PfStatus;

// Loaded model weights. Opaque to C.
typedef struct PfModel PfModel;

// Melody accuracy in percent. `rpa`/`rca` are NaN without voiced reference frames.
typedef struct PfMelodyMetrics {
  double rpa;
  double rca;
  double oa;
  size_t n_voiced_ref;
  size_t n_frames;
} PfMelodyMetrics;

// A note on frames `[onset_frame, offset_frame)` with its MIDI number.
typedef struct PfNote {
  size_t onset_frame;
  size_t offset_frame;
  int32_t midi;
} PfNote;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *pf_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *pf_version(void);

// Loads a checkpoint directory into a new handle written to `*out`.
//
// # Safety
// `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
enum PfStatus pf_model_load(const char *path, struct PfModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from [`pf_model_load`] and not be used afterwards.
void pf_model_free(struct PfModel *model);

// Longest sequence the model accepts, 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t pf_model_max_len(const struct PfModel *model);

// Whether the model was trained with the voicing condition.
//
// # Safety
// `model` must be null or a live handle.
bool pf_model_uses_voicing(const struct PfModel *model);

// Infills masked frames of a normalized pitch sequence.
//
// `x` holds normalized pitch, `y` note classes (0..=72, 72 = rest), `u`
// unvoiced flags and `mask` 1 at frames to generate; all have length `n`.
// `out_x` receives `n` values; unmasked frames are copied from `x`.
// `n_steps == 0` and a negative `cfg_scale` select the defaults (16, 1.25).
//
// # Safety
// All pointers must reference `n` readable (or, for `out_x`, writable)
// elements and `model` must be a live handle.
enum PfStatus pf_generate(const struct PfModel *model,
                          const double *x,
                          const uint8_t *y,
                          const uint8_t *u,
                          const uint8_t *mask,
                          size_t n,
                          bool use_voicing,
                          size_t n_steps,
                          double cfg_scale,
                          uint64_t seed,
                          double *out_x);

// Raw pitch, raw chroma and overall accuracy of `est` against `ref`
// (semitone values with voicing flags, `n` frames each).
//
// # Safety
// Input pointers must reference `n` readable elements; `out` must be valid.
enum PfStatus pf_melody_metrics(const double *est_semitones,
                                const uint8_t *est_voiced,
                                const double *ref_semitones,
                                const uint8_t *ref_voiced,
                                size_t n,
                                struct PfMelodyMetrics *out);

// Extracts notes from a semitone curve with the default smoothing, or
// without any when `smoothing` is false. Writes at most `capacity` notes to
// `out_notes` and the total to `*out_count`; returns
// `PF_STATUS_BUFFER_TOO_SMALL` when they do not fit.
//
// # Safety
// Input pointers must reference `n` readable elements, `out_notes`
// `capacity` writable elements (may be null when `capacity == 0`) and
// `out_count` must be valid.
enum PfStatus pf_extract_notes(const double *semitones,
                               const uint8_t *voiced,
                               size_t n,
                               double frame_rate_hz,
                               bool smoothing,
                               struct PfNote *out_notes,
                               size_t capacity,
                               size_t *out_count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PITCHFLOW_H */
