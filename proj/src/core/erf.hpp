#pragma once

// Effective receptive fields of both branches at a chosen 3D point:
// seed a unit gradient on the anchor's predicted-class main logit, pull
// it back to the inputs, and turn the gradient magnitudes into
// normalized per-point / per-pixel masses plus locality curves.

#include <string>
#include <utility>
#include <vector>

#include "model.hpp"
#include "scene.hpp"

namespace mm {

struct ErfResult {
  int anchor = 0;
  int pred_2d = 0, pred_3d = 0;
  std::vector<float> mass_3d;    // per point, sums to 1
  std::vector<float> mass_2d;    // H*W pixel grid, sums to 1
  std::vector<float> reproj_2d;  // 2D mass read back at each point's pixel, sums to 1
  int width = 0, height = 0;
  // (radius meters, mass fraction within radius of the anchor), per branch.
  std::vector<std::pair<float, float>> locality_2d, locality_3d;
};

ErfResult compute_erf(const Model& model, const Sample& sample, int point_index);

// Writes erf_points.ply (ASCII, x y z erf2d erf3d), erf_heatmap.ppm (P6)
// and erf_locality.tsv into out_dir.
void export_erf(const ErfResult& result, const Sample& sample, const std::string& out_dir);

}  // namespace mm
