#pragma once

// The two branch networks: a dual-encoder 2D U-Net (RGB + sparse depth
// streams, skip connections at 1/2..1/16 scales) and an RGB-featured
// sparse 3D U-Net with a learned alpha gate on the voxel colors. Each
// branch carries a main and an auxiliary (mimicry) head emitting one row
// per 3D point.

#include <cstdint>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "conv2d.hpp"
#include "geometry.hpp"
#include "sparse.hpp"
#include "tensor.hpp"

namespace mm {

struct ModelConfig {
  int num_classes = 4;
  float voxel_size = 0.2f;
  float depth_scale = 20.0f;  // sparse depth is fed as z / depth_scale, zeros kept
  int feat2d = 12;            // per-point feature width of the 2D decoder
  bool fusion_head = false;
  bool rgb_only_2d = false;   // ablation: depth encoder fed zeros
};

struct BranchOutput {
  Tensor main_logits;  // [N,C]
  Tensor aux_logits;   // [N,C]
  Tensor point_features;
};

struct Branch3DOutput : BranchOutput {
  Tensor voxel_input;  // [M,3] alpha-scaled colors; kept for ERF probes
  Tensor alpha;        // [N,1]
  std::vector<std::int32_t> point_to_voxel;
};

struct Conv2dParams {
  Tensor w, b;
};
struct LinearParams {
  Tensor w, b;
};
struct SparseConvParams {
  Tensor w, b;
};

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);
  explicit Model(const NamedTensors& checkpoint);

  const ModelConfig& config() const { return cfg_; }

  // image [3,H,W], sparse_depth [1,H,W], pixel coords from the (possibly
  // augmented) projection. H and W must be divisible by 16.
  BranchOutput forward_2d(const Tensor& image, const Tensor& sparse_depth,
                          const std::vector<int>& px, const std::vector<int>& py,
                          const std::vector<std::uint8_t>& in_bounds) const;

  // Runs the convolution stack over a whole batch at once; results are
  // elementwise identical to per-sample calls.
  struct Sample2D {
    const Tensor* image;
    const Tensor* depth;
    const std::vector<int>* px;
    const std::vector<int>* py;
    const std::vector<std::uint8_t>* in_bounds;
  };
  std::vector<BranchOutput> forward_2d_batch(const std::vector<Sample2D>& batch) const;

  Branch3DOutput forward_3d(const std::vector<float>& positions,
                            const std::vector<float>& colors) const;

  // Optional fusion classifier over concatenated per-point features.
  Tensor forward_fusion(const Tensor& feats_2d, const Tensor& feats_3d) const;

  std::vector<Tensor> parameters() const;
  NamedTensors named_tensors() const;  // parameters plus meta entries

  static constexpr int kWidths2d[4] = {16, 32, 64, 128};
  static constexpr int kWidths3d[3] = {16, 32, 64};

 private:
  void register_params();
  void init_params(std::uint64_t seed);

  ModelConfig cfg_;

  // 2D branch.
  Conv2dParams rgb_enc_[4], depth_enc_[4];
  Conv2dParams bott1_, bott2_;
  Conv2dParams up2_, dec2_, up1_, dec1_, up0_, dec0_, upf_, decf_;
  LinearParams head2d_main_, head2d_aux_;

  // 3D branch.
  LinearParams alpha_;
  SparseConvParams stem_, enc0b_, down1_, enc1b_, down2_, enc2b_;
  SparseConvParams up3d_1_, dec3d_1_, up3d_0_, dec3d_0_;
  LinearParams head3d_main_, head3d_aux_;

  LinearParams fusion_;

  std::vector<std::pair<std::string, Tensor*>> registry_;
};

}  // namespace mm
