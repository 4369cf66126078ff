#pragma once

// Pinhole camera model and the 2D<->3D correspondence machinery: point
// projection, sparse depth maps, label projection, color sampling and
// differentiable per-point feature gathering.
//
// One rounding convention everywhere: round-half-up, u_px = floor(u + 0.5).
// One collision policy everywhere: the nearest-z point wins a pixel.

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "tensor.hpp"

namespace mm {

struct Intrinsics {
  float fx = 0, fy = 0;
  float cx = 0, cy = 0;
  int width = 0, height = 0;

  void validate() const {
    if (fx <= 0 || fy <= 0) throw DataError("intrinsics: focal lengths must be positive");
    if (cx < 0 || cx >= static_cast<float>(width) || cy < 0 || cy >= static_cast<float>(height))
      throw DataError("intrinsics: principal point outside image");
  }
};

// Camera-frame cloud (z forward). Labels use -1 as the ignore value.
struct PointCloud {
  std::vector<float> positions;  // N*3
  std::vector<float> colors;     // N*3 in [0,1], may be empty
  std::vector<std::int32_t> labels;  // N, may be empty

  std::size_t size() const { return positions.size() / 3; }
  bool has_colors() const { return !colors.empty(); }
  bool has_labels() const { return !labels.empty(); }
};

inline int round_half_up(float v) { return static_cast<int>(std::floor(v + 0.5f)); }

struct Projection {
  std::vector<float> uv;        // N*2, real-valued
  std::vector<int> px, py;      // rounded pixel coords
  std::vector<std::uint8_t> in_bounds;
};

inline Projection project(const PointCloud& cloud, const Intrinsics& K) {
  K.validate();
  std::size_t n = cloud.size();
  Projection out;
  out.uv.resize(n * 2);
  out.px.resize(n);
  out.py.resize(n);
  out.in_bounds.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    float x = cloud.positions[i * 3 + 0];
    float y = cloud.positions[i * 3 + 1];
    float z = cloud.positions[i * 3 + 2];
    if (z <= 0)
      throw DataError("project: point with z <= 0 violates the camera visibility precondition");
    float u = K.fx * x / z + K.cx;
    float v = K.fy * y / z + K.cy;
    out.uv[i * 2 + 0] = u;
    out.uv[i * 2 + 1] = v;
    int pu = round_half_up(u);
    int pv = round_half_up(v);
    out.px[i] = pu;
    out.py[i] = pv;
    out.in_bounds[i] = (pu >= 0 && pu < K.width && pv >= 0 && pv < K.height) ? 1 : 0;
  }
  return out;
}

// Per-pixel z-buffer: index of the winning (nearest-z) point, -1 where no
// point lands. Shared by the depth and label rasterizers so the two always
// agree on contested pixels.
inline std::vector<std::int32_t> rasterize_winners(const PointCloud& cloud, const Intrinsics& K,
                                                   const Projection& proj) {
  std::vector<std::int32_t> winner(static_cast<std::size_t>(K.width) * K.height, -1);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (!proj.in_bounds[i]) continue;
    std::size_t pix = static_cast<std::size_t>(proj.py[i]) * K.width + proj.px[i];
    float z = cloud.positions[i * 3 + 2];
    std::int32_t w = winner[pix];
    if (w < 0 || z < cloud.positions[static_cast<std::size_t>(w) * 3 + 2]) winner[pix] = static_cast<std::int32_t>(i);
  }
  return winner;
}

// [1,H,W] depth in meters, 0 where no measurement.
inline Tensor make_sparse_depth(const PointCloud& cloud, const Intrinsics& K,
                                const Projection& proj) {
  std::vector<std::int32_t> winner = rasterize_winners(cloud, K, proj);
  Tensor depth = Tensor::zeros({1, K.height, K.width});
  float* d = depth.data();
  for (std::size_t pix = 0; pix < winner.size(); ++pix)
    if (winner[pix] >= 0) d[pix] = cloud.positions[static_cast<std::size_t>(winner[pix]) * 3 + 2];
  return depth;
}

inline Tensor make_sparse_depth(const PointCloud& cloud, const Intrinsics& K) {
  return make_sparse_depth(cloud, K, project(cloud, K));
}

// H*W label map: the depth winner donates its label, -1 elsewhere.
inline std::vector<std::int32_t> project_labels(const PointCloud& cloud, const Intrinsics& K,
                                                const Projection& proj) {
  if (!cloud.has_labels()) throw UsageError("project_labels: cloud has no labels");
  std::vector<std::int32_t> winner = rasterize_winners(cloud, K, proj);
  std::vector<std::int32_t> labels(winner.size(), -1);
  for (std::size_t pix = 0; pix < winner.size(); ++pix)
    if (winner[pix] >= 0) labels[pix] = cloud.labels[static_cast<std::size_t>(winner[pix])];
  return labels;
}

inline std::vector<std::int32_t> project_labels(const PointCloud& cloud, const Intrinsics& K) {
  return project_labels(cloud, K, project(cloud, K));
}

// Nearest-pixel color lookup; out-of-bounds points get zeros and a flag.
struct SampledColors {
  std::vector<float> colors;  // N*3
  std::vector<std::uint8_t> valid;
};

inline SampledColors sample_colors(const Tensor& image, const PointCloud& cloud,
                                   const Intrinsics& K, const Projection& proj) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != K.height ||
      image.dim(2) != K.width)
    throw UsageError("sample_colors: image must be [3,H,W] matching intrinsics");
  std::size_t n = cloud.size();
  SampledColors out;
  out.colors.assign(n * 3, 0.f);
  out.valid.assign(n, 0);
  const float* img = image.data();
  std::size_t plane = static_cast<std::size_t>(K.height) * K.width;
  for (std::size_t i = 0; i < n; ++i) {
    if (!proj.in_bounds[i]) continue;
    std::size_t pix = static_cast<std::size_t>(proj.py[i]) * K.width + proj.px[i];
    for (int c = 0; c < 3; ++c) out.colors[i * 3 + c] = img[static_cast<std::size_t>(c) * plane + pix];
    out.valid[i] = 1;
  }
  return out;
}

inline SampledColors sample_colors(const Tensor& image, const PointCloud& cloud,
                                   const Intrinsics& K) {
  return sample_colors(image, cloud, K, project(cloud, K));
}

// Differentiable nearest-pixel gather: out[n,c] = map[c, py[n], px[n]].
// The backward pass scatters gradients onto the touched pixels, counted
// with multiplicity. Out-of-bounds rows stay zero.
template <class T>
TensorT<T> gather_point_features(const TensorT<T>& feature_map, const std::vector<int>& px,
                                 const std::vector<int>& py,
                                 const std::vector<std::uint8_t>& in_bounds) {
  if (feature_map.rank() != 3) throw UsageError("gather_point_features: map must be [C,H,W]");
  int c = feature_map.dim(0), h = feature_map.dim(1), w = feature_map.dim(2);
  std::size_t n = px.size();
  if (py.size() != n || in_bounds.size() != n)
    throw UsageError("gather_point_features: coordinate arrays disagree");
  TensorT<T> out = TensorT<T>::zeros({static_cast<int>(n), c});
  const T* pm = feature_map.data();
  T* po = out.data();
  std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t i = 0; i < n; ++i) {
    if (!in_bounds[i]) continue;
    std::size_t pix = static_cast<std::size_t>(py[i]) * w + px[i];
    for (int ch = 0; ch < c; ++ch)
      po[i * static_cast<std::size_t>(c) + ch] = pm[static_cast<std::size_t>(ch) * plane + pix];
  }
  auto sm = feature_map.storage();
  return attach_node<T>(out, {feature_map}, [sm, px, py, in_bounds, c, w, plane](Storage<T>* o) {
    ensure_grad(*sm);
    for (std::size_t i = 0; i < px.size(); ++i) {
      if (!in_bounds[i]) continue;
      std::size_t pix = static_cast<std::size_t>(py[i]) * w + px[i];
      const T* g = o->grad.data() + i * static_cast<std::size_t>(c);
      for (int ch = 0; ch < c; ++ch) sm->grad[static_cast<std::size_t>(ch) * plane + pix] += g[ch];
    }
  });
}

template <class T>
TensorT<T> gather_point_features(const TensorT<T>& feature_map, const PointCloud& cloud,
                                 const Intrinsics& K) {
  Projection proj = project(cloud, K);
  return gather_point_features(feature_map, proj.px, proj.py, proj.in_bounds);
}

// Inverse of project for a pixel-center ray: the camera-frame point at
// depth z whose projection is (u,v).
inline void back_project(float u, float v, float z, const Intrinsics& K, float out[3]) {
  out[0] = (u - K.cx) / K.fx * z;
  out[1] = (v - K.cy) / K.fy * z;
  out[2] = z;
}

}  // namespace mm
