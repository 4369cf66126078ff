#pragma once

// Procedural paired RGB + point-cloud scenes with ground-truth labels and
// controllable domain shifts, plus the on-disk dataset container.

#include <cstdint>
#include <string>
#include <vector>

#include "geometry.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace mm {

enum class Domain : std::uint8_t { source = 0, target = 1 };

// Class ids: 0 ground, 1 building, 2 vehicle, 3 vegetation.
inline constexpr int kNumClasses = 4;

struct SceneSpec {
  std::uint64_t seed = 1;
  int width = 64, height = 64;

  // Layout knobs per class: [min,max] object counts and size scale.
  int buildings_min = 2, buildings_max = 4;
  int vehicles_min = 1, vehicles_max = 3;
  int vegetation_min = 1, vegetation_max = 3;
  float size_scale = 1.0f;   // country-shift knob
  float density = 1.0f;      // scales object counts

  // Appearance knobs.
  float brightness = 1.0f;       // (0,1]
  float color_temp = 0.0f;       // [-1,1], negative = cooler/blue
  float pixel_noise = 0.0f;      // additive image noise sigma

  // Sensor knobs.
  int lidar_lines = 64;
  int lidar_azimuth_steps = 44;
  float noise_sigma = 0.02f;     // lidar range noise, meters

  // Forces a near vehicle with a building wall directly behind it.
  bool occlusion = false;

  Domain domain = Domain::source;

  void validate() const;
};

struct Sample {
  Tensor image;       // [3,H,W] in [0,1]
  PointCloud cloud;   // labels always present (ignored for target training)
  Intrinsics intrinsics;
  Domain domain = Domain::source;
};

struct Dataset {
  std::vector<Sample> samples;
  std::size_t size() const { return samples.size(); }
};

// Pure function of (spec, n): sample i derives its generator from
// (spec.seed, i), so results are identical for any thread count.
Dataset generate(const SceneSpec& spec, int n, int threads = 1);
Sample generate_sample(const SceneSpec& spec, std::uint64_t index);

// Semantic class id rendered at each pixel of sample `index` (-1 = sky).
// Uses the same layout stream as generate_sample.
std::vector<std::int32_t> render_class_map(const SceneSpec& spec, std::uint64_t index);

// Binary dataset container, little-endian, magic "MM23" version 1.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

// Parses a [scene] config file into a spec.
SceneSpec load_scene_spec(const std::string& path);

}  // namespace mm
