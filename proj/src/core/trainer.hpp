#pragma once

// Training stack: config parsing, augmentations, AdamW + one-cycle
// schedule, the UDA objective, pseudo-label generation and mIoU
// evaluation over the 2D / 3D / Avg streams.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "losses.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "scene.hpp"

namespace mm {

struct LossWeights {
  double lambda_s = 0.8;
  double lambda_t = 0.1;
  double lambda_xs = 0.1;
  double lambda_xt = 0.01;
  void validate() const;
};

struct TrainConfig {
  std::string source_path;
  std::string target_path;  // empty in DG mode
  int num_classes = 4;

  ModelConfig model;

  std::uint64_t seed = 1;
  int epochs = 15;
  int batch_size = 8;
  double lr_peak = 1e-3;
  double lr_floor = 1e-5;
  double warmup_frac = 0.3;
  double weight_decay = 1e-4;
  int threads = 1;
  int log_every = 10;

  LossWeights weights;
  bool lambda_t_explicit = false;  // config named lambda_t itself
  bool detach_xm_target = true;
  double keep_fraction = 0.66;
  std::string pseudo_path;  // optional [uda] pseudo_labels entry
  bool has_uda_section = false;

  static TrainConfig from_file(const std::string& path);
};

// Filtered per-point target-domain labels, one block per provenance
// stream. File magic "MMPL" version 1.
struct PseudoLabelSet {
  float keep_fraction = 0;
  std::vector<std::vector<std::int32_t>> labels_2d;
  std::vector<std::vector<std::int32_t>> labels_3d;
  std::vector<std::vector<std::int32_t>> labels_avg;

  std::size_t size() const { return labels_2d.size(); }
  void save(const std::string& path) const;
  static PseudoLabelSet load(const std::string& path);
};

class AdamW {
 public:
  AdamW(std::vector<Tensor> params, double weight_decay, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8);
  void step(double lr);
  void zero_grad();

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_, v_;
  double weight_decay_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

// Linear warmup to the peak followed by cosine annealing to the floor.
double one_cycle_lr(std::int64_t step, std::int64_t total_steps, double peak, double floor,
                    double warmup_frac);

// Branch-independent augmentations. 2D flips image/depth/pixel targets
// together and jitters colors; 3D transforms positions only (vertical-
// axis flip, uniform scale, yaw rotation) before voxelization. Labels are
// never touched.
struct Augmented2D {
  Tensor image;
  Tensor depth;
  std::vector<int> px, py;
  std::vector<std::uint8_t> in_bounds;
};

Augmented2D apply_2d_augment(const Sample& sample, bool flip, const float jitter[3]);
std::vector<float> apply_3d_augment(const Sample& sample, bool flip, float scale,
                                    float angle_deg);

Augmented2D augment_2d(const Sample& sample, Rng& rng);
std::vector<float> augment_3d(const Sample& sample, Rng& rng);

// Per-point labels for the 2D branch: the projected label map read back
// at each point's pixel (the z-buffer winner donates its label).
std::vector<std::int32_t> labels_for_2d(const Sample& sample);

enum class TrainMode { source_only, adapt };

// The full objective over one (source batch, target batch) pair, without
// augmentation: mean source segmentation losses of both branches at unit
// weight, lambda_t times the pseudo-label terms, lambda_xs / lambda_xt
// times the summed two-direction mimicry on source / target. Pseudo label
// vectors may be empty (round 1); target may be empty (DG).
Tensor total_loss(const Model& model, const std::vector<const Sample*>& source,
                  const std::vector<const Sample*>& target,
                  const std::vector<const std::vector<std::int32_t>*>& pseudo_2d,
                  const std::vector<const std::vector<std::int32_t>*>& pseudo_3d,
                  const LossWeights& weights, bool detach_xm);

// Per-class confidence filter: among points predicted as class c, keep
// the top keep_fraction by confidence (rounded half up), rest become -1.
std::vector<std::vector<std::int32_t>> filter_pseudo_labels(
    const std::vector<std::vector<std::int32_t>>& preds,
    const std::vector<std::vector<float>>& confidence, int num_classes, double keep_fraction);

struct TrainResult {
  std::string checkpoint_path;
  double first_loss = 0;
  double final_loss = 0;
  std::int64_t steps = 0;
};

TrainResult train_model(const TrainConfig& cfg, TrainMode mode, const std::string& out_dir,
                        const PseudoLabelSet* pseudo);

EvalReport evaluate_model(const Model& model, const Dataset& data, int threads = 1);

PseudoLabelSet generate_pseudo_labels(const Model& model, const Dataset& target,
                                      double keep_fraction);

// Accepts either the dataset file itself or a directory holding data.mm23.
std::string resolve_dataset_path(const std::string& path);
Dataset load_dataset_any(const std::string& path);

}  // namespace mm
