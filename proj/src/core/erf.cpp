#include "erf.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "common.hpp"
#include "geometry.hpp"

namespace mm {

namespace fs = std::filesystem;

namespace {

int argmax_row(const Tensor& t, int row) {
  int c = t.dim(1);
  const float* d = t.data() + static_cast<std::size_t>(row) * c;
  int best = 0;
  for (int k = 1; k < c; ++k)
    if (d[k] > d[best]) best = k;
  return best;
}

void normalize(std::vector<float>& v) {
  double s = 0;
  for (float x : v) s += x;
  if (s > 0)
    for (float& x : v) x = static_cast<float>(x / s);
}

std::vector<std::pair<float, float>> locality_curve(const std::vector<float>& mass,
                                                    const std::vector<float>& positions,
                                                    int anchor) {
  std::size_t n = mass.size();
  float ax = positions[static_cast<std::size_t>(anchor) * 3 + 0];
  float ay = positions[static_cast<std::size_t>(anchor) * 3 + 1];
  float az = positions[static_cast<std::size_t>(anchor) * 3 + 2];
  std::vector<float> dist(n);
  float dmax = 0;
  for (std::size_t i = 0; i < n; ++i) {
    float dx = positions[i * 3 + 0] - ax;
    float dy = positions[i * 3 + 1] - ay;
    float dz = positions[i * 3 + 2] - az;
    dist[i] = std::sqrt(dx * dx + dy * dy + dz * dz);
    dmax = std::max(dmax, dist[i]);
  }
  const int steps = 48;
  std::vector<std::pair<float, float>> curve;
  curve.reserve(steps + 1);
  double total = 0;
  for (float m : mass) total += m;
  for (int k = 0; k <= steps; ++k) {
    float r = dmax * static_cast<float>(k) / steps;
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (dist[i] <= r) acc += mass[i];
    curve.emplace_back(r, total > 0 ? static_cast<float>(acc / total) : 0.f);
  }
  return curve;
}

}  // namespace

ErfResult compute_erf(const Model& model, const Sample& sample, int point_index) {
  std::size_t n = sample.cloud.size();
  if (point_index < 0 || static_cast<std::size_t>(point_index) >= n)
    throw UsageError("compute_erf: point index out of range");
  Projection proj = project(sample.cloud, sample.intrinsics);
  if (!proj.in_bounds[static_cast<std::size_t>(point_index)])
    throw DataError("compute_erf: anchor point projects outside the image");

  ErfResult r;
  r.anchor = point_index;
  r.width = sample.intrinsics.width;
  r.height = sample.intrinsics.height;

  // 2D branch: gradient of the anchor's predicted-class logit w.r.t. the
  // RGB image, L1-reduced over channels.
  {
    Tensor image = sample.image.clone();
    image.set_requires_grad(true);
    Tensor depth = make_sparse_depth(sample.cloud, sample.intrinsics, proj);
    BranchOutput o2 = model.forward_2d(image, depth, proj.px, proj.py, proj.in_bounds);
    r.pred_2d = argmax_row(o2.main_logits, point_index);
    Tensor seed = pick(o2.main_logits,
                       static_cast<std::size_t>(point_index) * o2.main_logits.dim(1) +
                           static_cast<std::size_t>(r.pred_2d));
    backward(seed);
    std::size_t plane = static_cast<std::size_t>(r.height) * r.width;
    r.mass_2d.assign(plane, 0.f);
    if (image.has_grad()) {
      const auto& g = image.grad();
      for (std::size_t pix = 0; pix < plane; ++pix)
        for (int c = 0; c < 3; ++c)
          r.mass_2d[pix] += std::fabs(g[static_cast<std::size_t>(c) * plane + pix]);
    }
    normalize(r.mass_2d);
  }

  // 3D branch: gradient w.r.t. the alpha-gated voxel input features,
  // mapped back onto points through the shared voxel rows.
  {
    Branch3DOutput o3 = model.forward_3d(sample.cloud.positions, sample.cloud.colors);
    r.pred_3d = argmax_row(o3.main_logits, point_index);
    Tensor seed = pick(o3.main_logits,
                       static_cast<std::size_t>(point_index) * o3.main_logits.dim(1) +
                           static_cast<std::size_t>(r.pred_3d));
    backward(seed);
    std::size_t m = static_cast<std::size_t>(o3.voxel_input.dim(0));
    std::vector<float> voxel_mass(m, 0.f);
    if (o3.voxel_input.has_grad()) {
      const auto& g = o3.voxel_input.grad();
      for (std::size_t row = 0; row < m; ++row)
        for (int c = 0; c < 3; ++c) voxel_mass[row] += std::fabs(g[row * 3 + c]);
    }
    r.mass_3d.resize(n);
    for (std::size_t p = 0; p < n; ++p)
      r.mass_3d[p] = voxel_mass[static_cast<std::size_t>(o3.point_to_voxel[p])];
    normalize(r.mass_3d);
  }

  // 2D mass reprojected onto points: each point reads the pixel it
  // projects to (nearest-pixel assignment).
  r.reproj_2d.assign(n, 0.f);
  for (std::size_t p = 0; p < n; ++p) {
    if (!proj.in_bounds[p]) continue;
    r.reproj_2d[p] = r.mass_2d[static_cast<std::size_t>(proj.py[p]) * r.width + proj.px[p]];
  }
  normalize(r.reproj_2d);

  r.locality_2d = locality_curve(r.reproj_2d, sample.cloud.positions, point_index);
  r.locality_3d = locality_curve(r.mass_3d, sample.cloud.positions, point_index);
  return r;
}

void export_erf(const ErfResult& r, const Sample& sample, const std::string& out_dir) {
  fs::create_directories(out_dir);

  {
    std::ofstream ply(fs::path(out_dir) / "erf_points.ply");
    if (!ply) throw DataError("cannot write PLY in " + out_dir);
    std::size_t n = r.mass_3d.size();
    ply << "ply\nformat ascii 1.0\nelement vertex " << n
        << "\nproperty float x\nproperty float y\nproperty float z\nproperty float erf2d\n"
           "property float erf3d\nend_header\n";
    char line[160];
    for (std::size_t i = 0; i < n; ++i) {
      std::snprintf(line, sizeof line, "%.9g %.9g %.9g %.9g %.9g\n",
                    sample.cloud.positions[i * 3 + 0], sample.cloud.positions[i * 3 + 1],
                    sample.cloud.positions[i * 3 + 2], r.reproj_2d[i], r.mass_3d[i]);
      ply << line;
    }
  }

  {
    std::ofstream ppm(fs::path(out_dir) / "erf_heatmap.ppm", std::ios::binary);
    if (!ppm) throw DataError("cannot write PPM in " + out_dir);
    float mx = 0;
    for (float v : r.mass_2d) mx = std::max(mx, v);
    ppm << "P6\n" << r.width << " " << r.height << "\n255\n";
    for (std::size_t pix = 0; pix < r.mass_2d.size(); ++pix) {
      float t = mx > 0 ? r.mass_2d[pix] / mx : 0.f;
      unsigned char byte = static_cast<unsigned char>(std::lround(255.0f * t));
      unsigned char rgb[3] = {byte, byte, byte};
      ppm.write(reinterpret_cast<const char*>(rgb), 3);
    }
  }

  {
    std::ofstream tsv(fs::path(out_dir) / "erf_locality.tsv");
    if (!tsv) throw DataError("cannot write locality table in " + out_dir);
    tsv << "radius\tfrac2d\tfrac3d\n";
    char line[96];
    for (std::size_t k = 0; k < r.locality_2d.size(); ++k) {
      std::snprintf(line, sizeof line, "%.6g\t%.6g\t%.6g\n", r.locality_2d[k].first,
                    r.locality_2d[k].second, r.locality_3d[k].second);
      tsv << line;
    }
  }
}

}  // namespace mm
