#pragma once

// Submanifold sparse convolution engine: voxel hash, rulebooks, and the
// gather-scatter convolutions driven by them. Active voxels are addressed
// by (batch,x,y,z) packed into 64 bits with 16-bit fields; the index is a
// linear-probing open-addressing map.

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace mm {

struct VoxelCoord {
  std::int32_t x = 0, y = 0, z = 0;
  std::int32_t batch = 0;
  bool operator==(const VoxelCoord&) const = default;
};

inline constexpr std::int32_t kVoxelCoordLimit = 32767;

inline std::uint64_t pack_voxel(const VoxelCoord& c) {
  if (c.x < -kVoxelCoordLimit || c.x > kVoxelCoordLimit || c.y < -kVoxelCoordLimit ||
      c.y > kVoxelCoordLimit || c.z < -kVoxelCoordLimit || c.z > kVoxelCoordLimit)
    throw UsageError("voxel coordinate out of +/-32767 range");
  if (c.batch < 0 || c.batch > 0xFFFE) throw UsageError("voxel batch out of range");
  auto f = [](std::int32_t v) {
    return static_cast<std::uint64_t>(static_cast<std::uint16_t>(v + 32768));
  };
  return (static_cast<std::uint64_t>(static_cast<std::uint16_t>(c.batch)) << 48) | (f(c.x) << 32) |
         (f(c.y) << 16) | f(c.z);
}

class VoxelHashMap {
 public:
  VoxelHashMap() { rehash(64); }

  void clear() {
    size_ = 0;
    keys_.assign(keys_.size(), kEmpty);
    vals_.assign(vals_.size(), -1);
  }

  // Returns the row for key, inserting `next_row` if absent.
  std::int32_t insert_or_get(std::uint64_t key, std::int32_t next_row, bool& inserted) {
    if ((size_ + 1) * 4 >= keys_.size() * 3) rehash(keys_.size() * 2);
    std::size_t i = probe_start(key);
    while (keys_[i] != kEmpty) {
      if (keys_[i] == key) {
        inserted = false;
        return vals_[i];
      }
      i = (i + 1) & mask_;
    }
    keys_[i] = key;
    vals_[i] = next_row;
    ++size_;
    inserted = true;
    return next_row;
  }

  std::int32_t find(std::uint64_t key) const {
    std::size_t i = probe_start(key);
    while (keys_[i] != kEmpty) {
      if (keys_[i] == key) return vals_[i];
      i = (i + 1) & mask_;
    }
    return -1;
  }

  std::size_t size() const { return size_; }

 private:
  static constexpr std::uint64_t kEmpty = ~0ull;  // unreachable: batch field 0xFFFF is rejected

  std::size_t probe_start(std::uint64_t key) const {
    std::uint64_t h = key;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
    return static_cast<std::size_t>(h ^ (h >> 31)) & mask_;
  }

  void rehash(std::size_t capacity) {
    std::vector<std::uint64_t> old_keys = std::move(keys_);
    std::vector<std::int32_t> old_vals = std::move(vals_);
    keys_.assign(capacity, kEmpty);
    vals_.assign(capacity, -1);
    mask_ = capacity - 1;
    for (std::size_t i = 0; i < old_keys.size(); ++i) {
      if (old_keys[i] == kEmpty) continue;
      std::size_t j = probe_start(old_keys[i]);
      while (keys_[j] != kEmpty) j = (j + 1) & mask_;
      keys_[j] = old_keys[i];
      vals_[j] = old_vals[i];
    }
  }

  std::vector<std::uint64_t> keys_;
  std::vector<std::int32_t> vals_;
  std::size_t mask_ = 0;
  std::size_t size_ = 0;
};

template <class T>
struct SparseTensorT {
  std::vector<VoxelCoord> coords;
  TensorT<T> features;  // [Nactive, C]
  VoxelHashMap index;   // packed coord -> row

  // Set by voxelize on the full-resolution tensor only.
  std::vector<std::int32_t> point_to_voxel;  // original point -> active row
  std::vector<std::int32_t> voxel_winner;    // active row -> winning point index

  std::size_t active() const { return coords.size(); }
};

using SparseTensor = SparseTensorT<float>;

// Pairs of (input row, output row) per kernel offset.
struct Rulebook {
  int kernel_volume = 0;
  int stride = 1;
  bool submanifold = true;
  std::size_t input_size = 0;
  std::size_t output_size = 0;
  std::vector<std::vector<std::pair<std::int32_t, std::int32_t>>> pairs;
};

// floor(p / voxel_size) per axis; the point nearest its voxel center wins
// the voxel, ties broken by lowest point index. Every point is mapped to
// its voxel row even when another point won.
template <class T>
SparseTensorT<T> voxelize(const std::vector<float>& positions, float voxel_size, int batch = 0) {
  if (voxel_size <= 0) throw UsageError("voxelize: voxel_size must be positive");
  std::size_t n = positions.size() / 3;
  if (n == 0 || positions.size() % 3 != 0)
    throw DataError("voxelize: empty or malformed point cloud");

  SparseTensorT<T> out;
  out.point_to_voxel.resize(n);
  std::vector<float> best_dist;
  for (std::size_t p = 0; p < n; ++p) {
    const float* pos = &positions[p * 3];
    VoxelCoord c;
    c.x = static_cast<std::int32_t>(std::floor(pos[0] / voxel_size));
    c.y = static_cast<std::int32_t>(std::floor(pos[1] / voxel_size));
    c.z = static_cast<std::int32_t>(std::floor(pos[2] / voxel_size));
    c.batch = batch;
    bool inserted = false;
    std::int32_t row = out.index.insert_or_get(pack_voxel(c), static_cast<std::int32_t>(out.coords.size()),
                                               inserted);
    float dx = pos[0] - (c.x + 0.5f) * voxel_size;
    float dy = pos[1] - (c.y + 0.5f) * voxel_size;
    float dz = pos[2] - (c.z + 0.5f) * voxel_size;
    float dist = dx * dx + dy * dy + dz * dz;
    if (inserted) {
      out.coords.push_back(c);
      out.voxel_winner.push_back(static_cast<std::int32_t>(p));
      best_dist.push_back(dist);
    } else if (dist < best_dist[static_cast<std::size_t>(row)]) {
      best_dist[static_cast<std::size_t>(row)] = dist;
      out.voxel_winner[static_cast<std::size_t>(row)] = static_cast<std::int32_t>(p);
    }
    out.point_to_voxel[p] = row;
  }
  return out;
}

namespace detail {

inline std::int32_t floor_div2(std::int32_t v) { return v >> 1; }

}  // namespace detail

// Submanifold mode keeps the active set; strided mode pools 2x2x2 blocks
// onto unique floor(coord/2) output voxels (8 offsets). Output skeleton
// carries coords + index only.
template <class T>
Rulebook build_rulebook(const SparseTensorT<T>& input, int kernel_extent, int stride,
                        bool submanifold, SparseTensorT<T>& out_skeleton) {
  Rulebook rb;
  rb.stride = stride;
  rb.submanifold = submanifold;
  rb.input_size = input.active();
  out_skeleton.coords.clear();
  out_skeleton.index.clear();

  if (submanifold) {
    if (stride != 1) throw UsageError("build_rulebook: submanifold requires stride 1");
    if (kernel_extent % 2 == 0) throw UsageError("build_rulebook: submanifold kernel extent must be odd");
    int r = kernel_extent / 2;
    rb.kernel_volume = kernel_extent * kernel_extent * kernel_extent;
    rb.pairs.assign(static_cast<std::size_t>(rb.kernel_volume), {});
    out_skeleton.coords = input.coords;
    for (std::size_t row = 0; row < input.coords.size(); ++row) {
      bool inserted = false;
      out_skeleton.index.insert_or_get(pack_voxel(input.coords[row]),
                                       static_cast<std::int32_t>(row), inserted);
    }
    for (std::size_t o = 0; o < input.coords.size(); ++o) {
      const VoxelCoord& oc = input.coords[o];
      int k = 0;
      for (int dx = -r; dx <= r; ++dx)
        for (int dy = -r; dy <= r; ++dy)
          for (int dz = -r; dz <= r; ++dz, ++k) {
            VoxelCoord ic{oc.x + dx, oc.y + dy, oc.z + dz, oc.batch};
            std::int32_t i = input.index.find(pack_voxel(ic));
            if (i >= 0)
              rb.pairs[static_cast<std::size_t>(k)].emplace_back(i, static_cast<std::int32_t>(o));
          }
    }
  } else {
    if (stride != 2) throw UsageError("build_rulebook: strided mode supports stride 2");
    rb.kernel_volume = 8;
    rb.pairs.assign(8, {});
    for (std::size_t i = 0; i < input.coords.size(); ++i) {
      const VoxelCoord& ic = input.coords[i];
      VoxelCoord oc{detail::floor_div2(ic.x), detail::floor_div2(ic.y), detail::floor_div2(ic.z),
                    ic.batch};
      bool inserted = false;
      std::int32_t o = out_skeleton.index.insert_or_get(
          pack_voxel(oc), static_cast<std::int32_t>(out_skeleton.coords.size()), inserted);
      if (inserted) out_skeleton.coords.push_back(oc);
      int dx = ic.x - 2 * oc.x, dy = ic.y - 2 * oc.y, dz = ic.z - 2 * oc.z;
      int k = dx * 4 + dy * 2 + dz;
      rb.pairs[static_cast<std::size_t>(k)].emplace_back(static_cast<std::int32_t>(i), o);
    }
  }
  rb.output_size = out_skeleton.coords.size();
  return rb;
}

namespace detail {

inline void check_rulebook(const Rulebook& rb, std::size_t in_rows, std::size_t out_rows) {
  if (rb.input_size != in_rows || rb.output_size != out_rows)
    throw UsageError("sparse_conv: rulebook does not match tensor (stale rulebook?)");
  for (const auto& offset_pairs : rb.pairs)
    for (const auto& [i, o] : offset_pairs)
      if (i < 0 || static_cast<std::size_t>(i) >= in_rows || o < 0 ||
          static_cast<std::size_t>(o) >= out_rows)
        throw UsageError("sparse_conv: rulebook row out of range (stale rulebook?)");
}

}  // namespace detail

// out[o] = bias + sum over offsets d and pairs (i,o) of W[d]^T in[i].
// weights [K^3, Cin, Cout]; differentiable in features, weights, bias.
template <class T>
TensorT<T> sparse_conv_features(const TensorT<T>& features, const TensorT<T>& weights,
                                const TensorT<T>& bias, const Rulebook& rb,
                                std::size_t out_rows) {
  if (features.rank() != 2) throw UsageError("sparse_conv: features must be [N,C]");
  if (weights.rank() != 3 || weights.dim(0) != rb.kernel_volume)
    throw UsageError("sparse_conv: weights must be [K^3,Cin,Cout]");
  int cin = features.dim(1);
  if (weights.dim(1) != cin) throw UsageError("sparse_conv: weight Cin mismatch");
  int cout = weights.dim(2);
  detail::check_rulebook(rb, static_cast<std::size_t>(features.dim(0)), out_rows);
  bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != cout))
    throw UsageError("sparse_conv: bias shape mismatch");

  TensorT<T> out = TensorT<T>::zeros({static_cast<int>(out_rows), cout});
  T* po = out.data();
  if (has_bias) {
    for (std::size_t r = 0; r < out_rows; ++r)
      std::copy(bias.data(), bias.data() + cout, po + r * static_cast<std::size_t>(cout));
  }
  const T* pf = features.data();
  const T* pw = weights.data();
  for (int k = 0; k < rb.kernel_volume; ++k) {
    const T* wk = pw + static_cast<std::size_t>(k) * cin * cout;
    for (const auto& [i, o] : rb.pairs[static_cast<std::size_t>(k)]) {
      const T* in_row = pf + static_cast<std::size_t>(i) * cin;
      T* out_row = po + static_cast<std::size_t>(o) * cout;
      for (int ci = 0; ci < cin; ++ci) {
        T xv = in_row[ci];
        if (xv == T(0)) continue;
        const T* wrow = wk + static_cast<std::size_t>(ci) * cout;
        for (int co = 0; co < cout; ++co) out_row[co] += xv * wrow[co];
      }
    }
  }

  auto sf = features.storage(), sw = weights.storage();
  auto sb = has_bias ? bias.storage() : nullptr;
  std::vector<TensorT<T>> inputs{features, weights};
  if (has_bias) inputs.push_back(bias);
  // The rulebook is captured by value: pairs stay valid for the backward pass.
  Rulebook rbc = rb;
  return attach_node<T>(out, inputs, [sf, sw, sb, rbc, cin, cout](Storage<T>* o) {
    bool want_f = sf->requires_grad || sf->node;
    bool want_w = sw->requires_grad || sw->node;
    if (want_f) ensure_grad(*sf);
    if (want_w) ensure_grad(*sw);
    const T* g = o->grad.data();
    for (int k = 0; k < rbc.kernel_volume; ++k) {
      const std::size_t wk = static_cast<std::size_t>(k) * cin * cout;
      for (const auto& [i, orow] : rbc.pairs[static_cast<std::size_t>(k)]) {
        const T* grow = g + static_cast<std::size_t>(orow) * cout;
        const T* in_row = sf->data.data() + static_cast<std::size_t>(i) * cin;
        for (int ci = 0; ci < cin; ++ci) {
          const T* wrow = sw->data.data() + wk + static_cast<std::size_t>(ci) * cout;
          if (want_f) {
            T acc = 0;
            for (int co = 0; co < cout; ++co) acc += grow[co] * wrow[co];
            sf->grad[static_cast<std::size_t>(i) * cin + ci] += acc;
          }
          if (want_w) {
            T xv = in_row[ci];
            if (xv != T(0)) {
              T* wg = sw->grad.data() + wk + static_cast<std::size_t>(ci) * cout;
              for (int co = 0; co < cout; ++co) wg[co] += xv * grow[co];
            }
          }
        }
      }
    }
    if (sb && (sb->requires_grad || sb->node)) {
      ensure_grad(*sb);
      std::size_t rows = o->grad.size() / static_cast<std::size_t>(cout);
      for (std::size_t r = 0; r < rows; ++r)
        for (int co = 0; co < cout; ++co)
          sb->grad[static_cast<std::size_t>(co)] += o->grad[r * static_cast<std::size_t>(cout) + co];
    }
  });
}

// Adjoint pairing of a stride-2 rulebook: every fine voxel receives its
// coarse parent's features through the offset weight it was pooled by.
// Output rows exactly match the retained finer skeleton.
template <class T>
TensorT<T> sparse_upsample_features(const TensorT<T>& coarse_features, const TensorT<T>& weights,
                                    const TensorT<T>& bias, const Rulebook& down_rb) {
  if (down_rb.submanifold || down_rb.stride != 2)
    throw UsageError("sparse_upsample: requires the rulebook of a stride-2 downsample");
  if (down_rb.output_size != static_cast<std::size_t>(coarse_features.dim(0)))
    throw UsageError("sparse_upsample: coarse rows do not match retained rulebook");
  if (weights.rank() != 3 || weights.dim(0) != down_rb.kernel_volume)
    throw UsageError("sparse_upsample: weights must be [8,Cin,Cout]");
  int cin = coarse_features.dim(1);
  if (weights.dim(1) != cin) throw UsageError("sparse_upsample: weight Cin mismatch");
  int cout = weights.dim(2);
  bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != cout))
    throw UsageError("sparse_upsample: bias shape mismatch");

  std::size_t fine_rows = down_rb.input_size;
  TensorT<T> out = TensorT<T>::zeros({static_cast<int>(fine_rows), cout});
  T* po = out.data();
  if (has_bias) {
    for (std::size_t r = 0; r < fine_rows; ++r)
      std::copy(bias.data(), bias.data() + cout, po + r * static_cast<std::size_t>(cout));
  }
  const T* pf = coarse_features.data();
  const T* pw = weights.data();
  for (int k = 0; k < down_rb.kernel_volume; ++k) {
    const T* wk = pw + static_cast<std::size_t>(k) * cin * cout;
    for (const auto& [fine, coarse] : down_rb.pairs[static_cast<std::size_t>(k)]) {
      const T* in_row = pf + static_cast<std::size_t>(coarse) * cin;
      T* out_row = po + static_cast<std::size_t>(fine) * cout;
      for (int ci = 0; ci < cin; ++ci) {
        T xv = in_row[ci];
        if (xv == T(0)) continue;
        const T* wrow = wk + static_cast<std::size_t>(ci) * cout;
        for (int co = 0; co < cout; ++co) out_row[co] += xv * wrow[co];
      }
    }
  }

  auto sf = coarse_features.storage(), sw = weights.storage();
  auto sb = has_bias ? bias.storage() : nullptr;
  std::vector<TensorT<T>> inputs{coarse_features, weights};
  if (has_bias) inputs.push_back(bias);
  Rulebook rbc = down_rb;
  return attach_node<T>(out, inputs, [sf, sw, sb, rbc, cin, cout](Storage<T>* o) {
    bool want_f = sf->requires_grad || sf->node;
    bool want_w = sw->requires_grad || sw->node;
    if (want_f) ensure_grad(*sf);
    if (want_w) ensure_grad(*sw);
    const T* g = o->grad.data();
    for (int k = 0; k < rbc.kernel_volume; ++k) {
      const std::size_t wk = static_cast<std::size_t>(k) * cin * cout;
      for (const auto& [fine, coarse] : rbc.pairs[static_cast<std::size_t>(k)]) {
        const T* grow = g + static_cast<std::size_t>(fine) * cout;
        const T* in_row = sf->data.data() + static_cast<std::size_t>(coarse) * cin;
        for (int ci = 0; ci < cin; ++ci) {
          const T* wrow = sw->data.data() + wk + static_cast<std::size_t>(ci) * cout;
          if (want_f) {
            T acc = 0;
            for (int co = 0; co < cout; ++co) acc += grow[co] * wrow[co];
            sf->grad[static_cast<std::size_t>(coarse) * cin + ci] += acc;
          }
          if (want_w) {
            T xv = in_row[ci];
            if (xv != T(0)) {
              T* wg = sw->grad.data() + wk + static_cast<std::size_t>(ci) * cout;
              for (int co = 0; co < cout; ++co) wg[co] += xv * grow[co];
            }
          }
        }
      }
    }
    if (sb && (sb->requires_grad || sb->node)) {
      ensure_grad(*sb);
      std::size_t rows = o->grad.size() / static_cast<std::size_t>(cout);
      for (std::size_t r = 0; r < rows; ++r)
        for (int co = 0; co < cout; ++co)
          sb->grad[static_cast<std::size_t>(co)] += o->grad[r * static_cast<std::size_t>(cout) + co];
    }
  });
}

// Per-point rows read through point_to_voxel; gradients accumulate back
// onto the shared voxel rows.
template <class T>
TensorT<T> gather_rows(const TensorT<T>& features, const std::vector<std::int32_t>& rows) {
  if (features.rank() != 2) throw UsageError("gather_rows: features must be [N,C]");
  int c = features.dim(1);
  TensorT<T> out = TensorT<T>::zeros({static_cast<int>(rows.size()), c});
  const T* pf = features.data();
  T* po = out.data();
  for (std::size_t p = 0; p < rows.size(); ++p) {
    std::int32_t r = rows[p];
    if (r < 0 || r >= features.dim(0)) throw UsageError("gather_rows: row out of range");
    std::copy(pf + static_cast<std::size_t>(r) * c, pf + (static_cast<std::size_t>(r) + 1) * c,
              po + p * static_cast<std::size_t>(c));
  }
  auto sf = features.storage();
  return attach_node<T>(out, {features}, [sf, rows, c](Storage<T>* o) {
    ensure_grad(*sf);
    for (std::size_t p = 0; p < rows.size(); ++p) {
      const T* g = o->grad.data() + p * static_cast<std::size_t>(c);
      T* fg = sf->grad.data() + static_cast<std::size_t>(rows[p]) * c;
      for (int i = 0; i < c; ++i) fg[i] += g[i];
    }
  });
}

// Inverse selection: out[r] = features[src[r]]. Used to build voxel input
// features from the winning point of each voxel.
template <class T>
TensorT<T> select_rows(const TensorT<T>& features, const std::vector<std::int32_t>& src) {
  return gather_rows(features, src);
}

}  // namespace mm
