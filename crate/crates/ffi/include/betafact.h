/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef BETAFACT_H
#define BETAFACT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum BfStatus {
  BF_STATUS_OK = 0,
  BF_STATUS_NULL_POINTER = 1,
  BF_STATUS_INVALID_ARGUMENT = 2,
  BF_STATUS_DOMAIN = 3,
  BF_STATUS_SHAPE = 4,
  BF_STATUS_NON_FINITE = 5,
  BF_STATUS_IO = 6,
  BF_STATUS_PANIC = 7,
} BfStatus;

// Model family for [`BfFitOptions`].
typedef enum BfModel {
  BF_MODEL_NMF = 0,
  BF_MODEL_LMM = 1,
  BF_MODEL_SLMM = 2,
} BfModel;

// Noise family for [`BfPhantomOptions`].
typedef enum BfNoise {
  BF_NOISE_NONE = 0,
  BF_NOISE_GAUSSIAN = 1,
  BF_NOISE_POISSON = 2,
  BF_NOISE_GAMMA = 3,
  BF_NOISE_POISSON_GAUSSIAN = 4,
} BfNoise;

// Which phantom array `bf_phantom_get` returns.
typedef enum BfPhantomPart {
  // Noisy data Y.
  BF_PHANTOM_PART_DATA = 0,
  // Noiseless image X.
  BF_PHANTOM_PART_CLEAN = 1,
  BF_PHANTOM_PART_FACTORS = 2,
  BF_PHANTOM_PART_PROPORTIONS = 3,
  // Variability basis V (SLMM only).
  BF_PHANTOM_PART_BASIS = 4,
  // Internal variabilities B (SLMM only).
  BF_PHANTOM_PART_VARIABILITY = 5,
} BfPhantomPart;

// Result of a fit.
typedef struct BfFit BfFit;

// Dense matrix of doubles.
typedef struct BfMatrix BfMatrix;

// Synthetic phantom with its ground truth.
typedef struct BfPhantom BfPhantom;

// Fit settings. Start from `bf_fit_options_default`.
typedef struct BfFitOptions {
  enum BfModel model;
  double beta;
  double lambda;
  // Relative-decrease threshold; values <= 0 select the default.
  double epsilon;
  size_t max_iter;
  // Number of factors; ignored when an initial M is given.
  size_t factors;
  uint64_t seed;
  bool fix_factors;
  bool use_xi;
  // -1 default (on for SLMM), 0 off, 1 on.
  int32_t pin_sbf;
  // Clamp data to at least this value when > 0.
  double floor_data;
} BfFitOptions;

// Phantom settings. Start from `bf_phantom_options_default`.
typedef struct BfPhantomOptions {
  size_t frames;
  size_t voxels;
  size_t factors;
  size_t variability_rank;
  enum BfModel model;
  enum BfNoise noise;
  double sigma;
  double scale;
  double shape;
  uint64_t seed;
  // Noise seed; negative reuses `seed`.
  int64_t noise_seed;
} BfPhantomOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. Valid until the
// next call on the same thread.
const char *bf_last_error(void);

// Creates a `rows × cols` matrix from a column-major buffer of
// `rows * cols` doubles, or zeros when `data` is null.
//
// # Safety
// `data` must be null or point to `rows * cols` doubles; `out` must be valid.
enum BfStatus bf_matrix_new(size_t rows, size_t cols, const double *data, struct BfMatrix **out);

// # Safety
// `m` must be null or a handle not yet freed.
void bf_matrix_free(struct BfMatrix *m);

// Number of rows, or 0 for a null handle.
//
// # Safety
// `m` must be null or a live handle.
size_t bf_matrix_rows(const struct BfMatrix *m);

// Number of columns, or 0 for a null handle.
//
// # Safety
// `m` must be null or a live handle.
size_t bf_matrix_cols(const struct BfMatrix *m);

// Copies the matrix into `buf` in column-major order. `len` must equal
// `rows * cols`.
//
// # Safety
// `buf` must point to `len` writable doubles.
enum BfStatus bf_matrix_copy(const struct BfMatrix *m, double *buf, size_t len);

// Reads a `.bfmat` or CSV matrix file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid.
enum BfStatus bf_matrix_read(const char *path, struct BfMatrix **out);

// Writes a `.bfmat` file.
//
// # Safety
// `m` must be a live handle and `path` a NUL-terminated string.
enum BfStatus bf_matrix_write(const struct BfMatrix *m, const char *path);

// Scalar beta-divergence `d(y | x)`.
//
// # Safety
// `out` must be valid.
enum BfStatus bf_d_beta(double y, double x, double beta, double *out);

// Summed beta-divergence between two matrices of equal shape.
//
// # Safety
// `y` and `x` must be live handles; `out` must be valid.
enum BfStatus bf_divergence(const struct BfMatrix *y,
                            const struct BfMatrix *x,
                            double beta,
                            double *out);

// PSNR in dB of `hat` against `star`; `INFINITY` on exact recovery.
//
// # Safety
// Handles must be live; `out` must be valid.
enum BfStatus bf_psnr(const struct BfMatrix *hat, const struct BfMatrix *star, double *out);

// Normalized mean squared error of `hat` against `star`.
//
// # Safety
// Handles must be live; `out` must be valid.
enum BfStatus bf_nmse(const struct BfMatrix *hat, const struct BfMatrix *star, double *out);

struct BfFitOptions bf_fit_options_default(void);

// Fits a model to `y` (frames × voxels). `v` is required for SLMM.
// `m_init` is optional; without it the factors start from k-means.
//
// # Safety
// `y` and `opts` must be valid; `v` and `m_init` may be null; `out` must be
// valid.
enum BfStatus bf_fit(const struct BfMatrix *y,
                     const struct BfMatrix *v,
                     const struct BfMatrix *m_init,
                     const struct BfFitOptions *opts,
                     struct BfFit **out);

// # Safety
// `f` must be null or a handle not yet freed.
void bf_fit_free(struct BfFit *f);

// Iterations run, or 0 for a null handle.
//
// # Safety
// `f` must be null or a live handle.
size_t bf_fit_iterations(const struct BfFit *f);

// True when the stopping rule fired before the iteration cap.
//
// # Safety
// `f` must be null or a live handle.
bool bf_fit_converged(const struct BfFit *f);

// Final objective value, or NaN for a null handle.
//
// # Safety
// `f` must be null or a live handle.
double bf_fit_objective(const struct BfFit *f);

// Copies `min(len, iterations + 1)` objective values into `buf` and returns
// the full trace length.
//
// # Safety
// `buf` must point to `len` writable doubles (or be null with `len == 0`).
size_t bf_fit_trace(const struct BfFit *f, double *buf, size_t len);

// Fitted factors M (frames × K) as a new matrix handle.
//
// # Safety
// `f` must be a live handle; `out` must be valid.
enum BfStatus bf_fit_factors(const struct BfFit *f, struct BfMatrix **out);

// Fitted proportions A (K × voxels) as a new matrix handle.
//
// # Safety
// `f` must be a live handle; `out` must be valid.
enum BfStatus bf_fit_proportions(const struct BfFit *f, struct BfMatrix **out);

// Fitted internal variabilities B (N_v × voxels). Sets `*out` to null for
// models without B.
//
// # Safety
// `f` must be a live handle; `out` must be valid.
enum BfStatus bf_fit_variability(const struct BfFit *f, struct BfMatrix **out);

struct BfPhantomOptions bf_phantom_options_default(void);

// Generates a synthetic phantom.
//
// # Safety
// `opts` and `out` must be valid.
enum BfStatus bf_phantom_generate(const struct BfPhantomOptions *opts, struct BfPhantom **out);

// # Safety
// `p` must be null or a handle not yet freed.
void bf_phantom_free(struct BfPhantom *p);

// Copies one phantom array into a new matrix handle. Sets `*out` to null
// when the part does not exist for the phantom's model.
//
// # Safety
// `p` must be a live handle; `out` must be valid.
enum BfStatus bf_phantom_get(const struct BfPhantom *p,
                             enum BfPhantomPart part,
                             struct BfMatrix **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BETAFACT_H */
