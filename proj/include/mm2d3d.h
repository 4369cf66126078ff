/* mm2d3d: multi-modal 2D/3D semantic segmentation with unsupervised
 * domain adaptation, desk scale.
 *
 * C interface of the shared library. All functions return mm2d3d_status;
 * on failure a human-readable message is available from
 * mm2d3d_last_error() until the next call on the same thread. Handles are
 * opaque and must be released with the matching close function.
 */

#ifndef MM2D3D_H
#define MM2D3D_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define MM2D3D_API __declspec(dllexport)
#else
#define MM2D3D_API __attribute__((visibility("default")))
#endif

typedef enum mm2d3d_status {
  MM2D3D_OK = 0,
  MM2D3D_ERR_USAGE = 1,   /* bad arguments or configuration */
  MM2D3D_ERR_DATA = 2,    /* missing or malformed files */
  MM2D3D_ERR_NUMERIC = 3  /* numeric failure (NaN loss, undefined loss) */
} mm2d3d_status;

typedef struct mm2d3d_dataset mm2d3d_dataset;
typedef struct mm2d3d_model mm2d3d_model;

MM2D3D_API const char* mm2d3d_version(void);

/* Message for the most recent failure on this thread; empty on success. */
MM2D3D_API const char* mm2d3d_last_error(void);

/* Scene generation: renders `count` samples from the spec file into
 * out_dir/data.mm23. threads <= 1 runs serially; results are identical
 * for any thread count. */
MM2D3D_API mm2d3d_status mm2d3d_generate(const char* spec_file, int count, const char* out_dir,
                                         int threads);

/* Datasets. `path` may be the data file or a directory holding data.mm23. */
MM2D3D_API mm2d3d_status mm2d3d_dataset_open(const char* path, mm2d3d_dataset** out);
MM2D3D_API void mm2d3d_dataset_close(mm2d3d_dataset* ds);
MM2D3D_API int mm2d3d_dataset_size(const mm2d3d_dataset* ds);
MM2D3D_API int mm2d3d_dataset_points(const mm2d3d_dataset* ds, int sample);
/* 0 = source, 1 = target, -1 on bad index. */
MM2D3D_API int mm2d3d_dataset_domain(const mm2d3d_dataset* ds, int sample);

/* Models (checkpoint files). */
MM2D3D_API mm2d3d_status mm2d3d_model_open(const char* checkpoint_file, mm2d3d_model** out);
MM2D3D_API void mm2d3d_model_close(mm2d3d_model* model);
MM2D3D_API int mm2d3d_model_classes(const mm2d3d_model* model);

/* Source-only (domain generalization) training. Writes checkpoint.mmck
 * and metrics.log into out_dir. threads <= 0 defers to the config. */
MM2D3D_API mm2d3d_status mm2d3d_train(const char* config_file, const char* out_dir, int threads);

/* UDA training: adds the target-domain mimicry term, and the pseudo-label
 * term when pseudo_file is non-NULL (round 2, fresh initialization). */
MM2D3D_API mm2d3d_status mm2d3d_adapt(const char* config_file, const char* out_dir,
                                      const char* pseudo_file, int threads);

/* Per-class confidence-filtered pseudo labels from a trained model. */
MM2D3D_API mm2d3d_status mm2d3d_pseudolabel(const mm2d3d_model* model,
                                            const mm2d3d_dataset* target, double keep_fraction,
                                            const char* out_file);

typedef struct mm2d3d_eval_result {
  double miou_2d;
  double miou_3d;
  double miou_avg;
  double miou_fusion; /* < 0 when the model has no fusion head */
  int num_classes;
} mm2d3d_eval_result;

/* Evaluates the three streams; optionally writes the report table to
 * report_file. `out` may be NULL. */
MM2D3D_API mm2d3d_status mm2d3d_evaluate(const mm2d3d_model* model, const mm2d3d_dataset* data,
                                         const char* report_file, mm2d3d_eval_result* out);

/* Effective-receptive-field analysis of one point of one sample. Writes
 * erf_points.ply, erf_heatmap.ppm and erf_locality.tsv into out_dir. */
MM2D3D_API mm2d3d_status mm2d3d_erf(const mm2d3d_model* model, const mm2d3d_dataset* data,
                                    int sample, int point, const char* out_dir);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* MM2D3D_H */
