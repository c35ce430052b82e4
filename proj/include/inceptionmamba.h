/*
 * inceptionmamba — C interface to the InceptionMamba reference library.
 *
 * All functions return im_status; on failure im_last_error() carries a
 * message for the calling thread. Strings returned through char** are
 * heap-allocated and must be released with im_string_free().
 */
#ifndef INCEPTIONMAMBA_H
#define INCEPTIONMAMBA_H

#include <stdint.h>

#if defined(_WIN32)
#define IM_API __declspec(dllexport)
#else
#define IM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum im_status {
  IM_OK = 0,
  IM_ERR_CONFIG = 1,
  IM_ERR_SHAPE = 2,
  IM_ERR_NUMERIC = 3,
  IM_ERR_IO = 4,
  IM_ERR_USAGE = 5,
  IM_ERR_VERIFY = 6, /* a verification driver found a violation */
  IM_ERR_INTERNAL = 7,
} im_status;

typedef struct im_tensor im_tensor; /* dense rank 1..4 f32 tensor, NCHW layout */
typedef struct im_model im_model;

IM_API const char* im_version(void);
IM_API const char* im_last_error(void);
IM_API void im_string_free(char* s);

/* ---- tensors (IMTN container on disk) ---- */
IM_API im_status im_tensor_create(const uint32_t* extents, uint32_t rank, const float* data, im_tensor** out);
IM_API im_status im_tensor_random(const uint32_t* extents, uint32_t rank, uint64_t seed, im_tensor** out);
IM_API im_status im_tensor_read(const char* path, im_tensor** out);
IM_API im_status im_tensor_write(const im_tensor* t, const char* path);
IM_API uint32_t im_tensor_rank(const im_tensor* t);
IM_API void im_tensor_extents(const im_tensor* t, uint32_t extents[4]);
IM_API const float* im_tensor_data(const im_tensor* t);
IM_API void im_tensor_free(im_tensor* t);

/* ---- models ----
 * Presets: T, S, B, T-no-globalmixer, T-plain-ss2d, T-strip-conv, T-dw3x3,
 * T-inception-dw, toy. num_classes of 0 keeps the preset default. */
IM_API im_status im_model_create(const char* preset, uint32_t num_classes, uint64_t seed, im_model** out);
IM_API im_status im_model_from_config_file(const char* path, uint64_t seed, im_model** out);
IM_API im_status im_model_save_config(const im_model* m, const char* path);
IM_API im_status im_model_save_weights(im_model* m, const char* path);
IM_API im_status im_model_load_weights(im_model* m, const char* path);
IM_API im_status im_model_forward(const im_model* m, const im_tensor* x, im_tensor** logits);
IM_API im_status im_model_param_count(im_model* m, uint64_t* count);
IM_API void im_model_free(im_model* m);

/* ---- static cost analysis ----
 * resolution 0 counts parameters only; as_json selects the machine format. */
IM_API im_status im_analyze(const char* preset, uint32_t resolution, int as_json, char** report);
/* closed-form count vs literal enumeration of instantiated tensors */
IM_API im_status im_verify_params(const char* preset, int* exact_match, char** detail);

/* ---- numerical verification drivers ---- */
/* Recurrent scan vs convolution-kernel scan over random time-invariant
 * systems. inject perturbs the kernel to exercise the failure path.
 * Returns IM_ERR_VERIFY when the worst difference exceeds the tolerance
 * (1e-5 in f32 mode, 1e-10 in f64 mode). */
IM_API im_status im_scan_check(uint64_t seed, uint32_t trials, int use_f64, double inject,
                               double* max_abs_diff, char** report);
/* Central-difference gradient check of every parameter of a tiny one-block
 * model (width 8, state 4, 8x8 map) in 64-bit mode. */
IM_API im_status im_gradcheck(double tolerance, uint64_t seed, int* failures, char** report);

/* ---- desk-scale training ---- */
typedef void (*im_train_progress)(uint32_t epoch, double loss, double accuracy, void* user);
/* Trains a fresh toy model on the synthetic set; stops early at the
 * target accuracy when stop_at_accuracy > 0. csv receives
 * "epoch,loss,acc" lines. checkpoint_dir may be NULL. */
IM_API im_status im_train_toy(uint64_t seed, uint32_t epochs, uint32_t samples, double lr,
                              double stop_at_accuracy, const char* checkpoint_dir,
                              im_train_progress progress, void* user, char** csv);
/* Soft ablation report: class-3 accuracy with and without the GlobalMixer,
 * averaged over `seeds` seeds. Reported, never asserted. */
IM_API im_status im_train_toy_compare(uint64_t seed, uint32_t seeds, uint32_t epochs, uint32_t samples,
                                      char** report);

/* ---- feature dumps (one PGM per channel + cosine-similarity CSV) ---- */
IM_API im_status im_dump_features(const im_model* m, const im_tensor* x, uint32_t stage, uint32_t block,
                                  const char* out_dir, char** summary);

/* ---- relative forward timing across presets ---- */
IM_API im_status im_bench(const char* presets_csv, uint32_t resolution, uint32_t repeats, char** report);

#ifdef __cplusplus
}
#endif

#endif /* INCEPTIONMAMBA_H */
