#ifndef STO2_H
#define STO2_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum Sto2Status {
  STO2_STATUS_OK = 0,
  STO2_STATUS_NULL_POINTER = 1,
  STO2_STATUS_INVALID_ARGUMENT = 2,
  STO2_STATUS_IO = 3,
  STO2_STATUS_FORMAT = 4,
  STO2_STATUS_DIMENSION_MISMATCH = 5,
  STO2_STATUS_NO_EFFECTIVE_PIXELS = 6,
  STO2_STATUS_CHECKPOINT = 7,
  STO2_STATUS_UNREACHABLE_TARGET = 8,
  STO2_STATUS_BUFFER_TOO_SMALL = 9,
  STO2_STATUS_PANIC = 10,
  STO2_STATUS_OTHER = 11,
} Sto2Status;

/*
 Spectral hypercube (also used for sparse hyperspectral images).
 */
typedef struct Sto2Cube Sto2Cube;

/*
 Fibre core layout for one image size.
 */
typedef struct Sto2FibreMask Sto2FibreMask;

/*
 StO2 map with its per-pixel exclusion codes.
 */
typedef struct Sto2Map Sto2Map;

/*
 Trained generator loaded from a checkpoint.
 */
typedef struct Sto2Model Sto2Model;

/*
 Evaluation of a predicted map against a reference map.
 */
typedef struct Sto2Metrics {
  double ssim;
  double e_bar;
  double p_hap;
  size_t n_effective;
} Sto2Metrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. Valid until
 the next failing call on the same thread.
 */
const char *sto2_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *sto2_version(void);

/*
 Build a cube from band-sequential data (`bands × height × width`).

 # Safety
 `data` must point to `len` floats and `out` to writable storage.
 */
enum Sto2Status sto2_cube_new(size_t width,
                              size_t height,
                              double start_nm,
                              double step_nm,
                              size_t bands,
                              const float *data,
                              size_t len,
                              struct Sto2Cube **out);

/*
 # Safety
 `path` must be a NUL-terminated string, `out` writable.
 */
enum Sto2Status sto2_cube_load(const char *path_, struct Sto2Cube **out);

/*
 # Safety
 `cube` must be a live handle and `path` a NUL-terminated string.
 */
enum Sto2Status sto2_cube_save(const struct Sto2Cube *cube, const char *path_);

/*
 # Safety
 `cube` must be a live handle; the output pointers may be null.
 */
enum Sto2Status sto2_cube_dims(const struct Sto2Cube *cube,
                               size_t *width,
                               size_t *height,
                               size_t *bands);

/*
 Copy the band-sequential data into `buf` (at least `bands·height·width`).

 # Safety
 `cube` must be live and `buf` must hold `len` floats.
 */
enum Sto2Status sto2_cube_data(const struct Sto2Cube *cube, float *buf, size_t len);

/*
 # Safety
 `cube` must be null or a handle not yet freed.
 */
void sto2_cube_free(struct Sto2Cube *cube);

/*
 Seeded phantom of the given size: its cube and true StO2 map.

 # Safety
 Output pointers must be writable.
 */
enum Sto2Status sto2_phantom(uint64_t seed,
                             size_t width,
                             size_t height,
                             struct Sto2Cube **out_cube,
                             struct Sto2Map **out_truth);

/*
 RGB rendering of a reference-grid cube into `buf` (`3·height·width`,
 channel-sequential).

 # Safety
 `cube` must be live and `buf` must hold `len` floats.
 */
enum Sto2Status sto2_synthesize_rgb(const struct Sto2Cube *cube, float *buf, size_t len);

/*
 Regression StO2 map with the bundled extinction table and a flat white
 reference.

 # Safety
 `cube` must be live and `out` writable.
 */
enum Sto2Status sto2_estimate(const struct Sto2Cube *cube,
                              double cod_threshold,
                              struct Sto2Map **out);

/*
 # Safety
 `map` must be live; the output pointers may be null.
 */
enum Sto2Status sto2_map_dims(const struct Sto2Map *map,
                              size_t *width,
                              size_t *height,
                              size_t *n_effective);

/*
 # Safety
 `map` must be live and `buf` must hold `len` floats.
 */
enum Sto2Status sto2_map_values(const struct Sto2Map *map, float *buf, size_t len);

/*
 Mask gray levels: effective 255, saturated 0, low CoD 64, non-tissue 128.

 # Safety
 `map` must be live and `buf` must hold `len` bytes.
 */
enum Sto2Status sto2_map_mask(const struct Sto2Map *map, uint8_t *buf, size_t len);

/*
 # Safety
 `map` must be null or a handle not yet freed.
 */
void sto2_map_free(struct Sto2Map *map);

/*
 Fibre layout for a preset spot count (0, 121, 171 or 300).

 # Safety
 `out` must be writable.
 */
enum Sto2Status sto2_fibre_mask_new(size_t n_spot,
                                    size_t width,
                                    size_t height,
                                    struct Sto2FibreMask **out);

/*
 Fibre layout from explicit core radius and spacing.

 # Safety
 `out` must be writable.
 */
enum Sto2Status sto2_fibre_mask_custom(size_t n_spot,
                                       double r,
                                       double d,
                                       size_t width,
                                       size_t height,
                                       struct Sto2FibreMask **out);

/*
 # Safety
 `mask` must be live and `count` writable.
 */
enum Sto2Status sto2_fibre_mask_count(const struct Sto2FibreMask *mask, size_t *count);

/*
 # Safety
 `mask` must be null or a handle not yet freed.
 */
void sto2_fibre_mask_free(struct Sto2FibreMask *mask);

/*
 Sparse hyperspectral image: each fibre's mean spectrum over its core.

 # Safety
 Handles must be live and `out` writable.
 */
enum Sto2Status sto2_shsi(const struct Sto2Cube *cube,
                          const struct Sto2FibreMask *mask,
                          struct Sto2Cube **out);

/*
 # Safety
 `path` must be a NUL-terminated string, `out` writable.
 */
enum Sto2Status sto2_model_load(const char *path_, struct Sto2Model **out);

/*
 Acquire RGB and sHSI from `cube` through `mask`, run the generator and
 return its map, masked like the regression map of the same cube.

 # Safety
 Handles must be live; `out` writable; `elapsed_ms` may be null.
 */
enum Sto2Status sto2_model_predict(const struct Sto2Model *model,
                                   const struct Sto2Cube *cube,
                                   const struct Sto2FibreMask *mask,
                                   struct Sto2Map **out,
                                   double *elapsed_ms);

/*
 # Safety
 `model` must be null or a handle not yet freed.
 */
void sto2_model_free(struct Sto2Model *model);

/*
 SSIM, mean absolute error and p_HAP of `predicted` against `reference`
 over their jointly effective pixels.

 # Safety
 Handles must be live and `out` writable.
 */
enum Sto2Status sto2_evaluate(const struct Sto2Map *predicted,
                              const struct Sto2Map *reference,
                              struct Sto2Metrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STO2_H */
