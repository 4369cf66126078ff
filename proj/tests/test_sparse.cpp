#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "core/sparse.hpp"
#include "test_util.hpp"

using namespace mm;

namespace {

// Dense 3D convolution oracle over a [D,H,W,C] grid, cross-correlation,
// offsets in [-1,1]^3 matching the submanifold offset order.
template <class T>
std::vector<T> dense_conv3d_naive(const std::vector<T>& grid, int d, int h, int w, int cin,
                                  const TensorT<T>& weights, int cout) {
  std::vector<T> out(static_cast<std::size_t>(d) * h * w * cout, T(0));
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int k = 0;
        for (int dx = -1; dx <= 1; ++dx)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dz = -1; dz <= 1; ++dz, ++k) {
              int zz = z + dx, yy = y + dy, xx = x + dz;
              if (zz < 0 || zz >= d || yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
              for (int ci = 0; ci < cin; ++ci) {
                T v = grid[((static_cast<std::size_t>(zz) * h + yy) * w + xx) * cin + ci];
                for (int co = 0; co < cout; ++co)
                  out[((static_cast<std::size_t>(z) * h + y) * w + x) * cout + co] +=
                      v * weights.data()[(static_cast<std::size_t>(k) * cin + ci) * cout + co];
              }
            }
      }
  return out;
}

std::vector<float> grid_positions(int extent, float voxel) {
  std::vector<float> pos;
  for (int x = 0; x < extent; ++x)
    for (int y = 0; y < extent; ++y)
      for (int z = 0; z < extent; ++z) {
        pos.push_back((x + 0.5f) * voxel);
        pos.push_back((y + 0.5f) * voxel);
        pos.push_back((z + 0.5f) * voxel);
      }
  return pos;
}

}  // namespace

TEST_CASE("voxelize merges points in one cell") {
  std::vector<float> pts = {0.1f, 0.1f, 0.1f, 0.9f, 0.9f, 0.9f};
  SparseTensor st = voxelize<float>(pts, 1.0f);
  CHECK(st.active() == 1);
  CHECK(st.coords[0] == VoxelCoord{0, 0, 0, 0});
  CHECK(st.point_to_voxel == std::vector<std::int32_t>{0, 0});
}

TEST_CASE("voxelize separates cells") {
  std::vector<float> pts = {0.5f, 0, 0, 1.5f, 0, 0};
  SparseTensor st = voxelize<float>(pts, 1.0f);
  REQUIRE(st.active() == 2);
  CHECK(st.coords[0] == VoxelCoord{0, 0, 0, 0});
  CHECK(st.coords[1] == VoxelCoord{1, 0, 0, 0});
}

TEST_CASE("voxelize count matches a set-of-floors oracle") {
  Rng rng(101);
  std::vector<float> pts;
  std::set<std::tuple<int, int, int>> oracle;
  const float voxel = 0.25f;
  for (int i = 0; i < 1000; ++i) {
    float x = static_cast<float>(rng.uniform(0.0, 4.0));
    float y = static_cast<float>(rng.uniform(0.0, 4.0));
    float z = static_cast<float>(rng.uniform(0.0, 4.0));
    pts.insert(pts.end(), {x, y, z});
    oracle.insert({static_cast<int>(std::floor(x / voxel)), static_cast<int>(std::floor(y / voxel)),
                   static_cast<int>(std::floor(z / voxel))});
  }
  SparseTensor st = voxelize<float>(pts, voxel);
  CHECK(st.active() == oracle.size());
  for (auto row : st.point_to_voxel) {
    CHECK(row >= 0);
    CHECK(static_cast<std::size_t>(row) < st.active());
  }
}

TEST_CASE("voxelize winner is nearest to the voxel center, ties to lowest index") {
  // center of voxel (0,0,0) at 0.5: first point is farther, second nearer
  std::vector<float> pts = {0.1f, 0.5f, 0.5f, 0.45f, 0.5f, 0.5f};
  SparseTensor st = voxelize<float>(pts, 1.0f);
  REQUIRE(st.active() == 1);
  CHECK(st.voxel_winner[0] == 1);

  // exact tie: symmetric about the center
  std::vector<float> tie = {0.4f, 0.5f, 0.5f, 0.6f, 0.5f, 0.5f};
  SparseTensor st2 = voxelize<float>(tie, 1.0f);
  CHECK(st2.voxel_winner[0] == 0);
}

TEST_CASE("voxelize errors") {
  std::vector<float> empty;
  CHECK_THROWS_AS(voxelize<float>(empty, 1.0f), DataError);
  std::vector<float> pts = {0, 0, 0};
  CHECK_THROWS_AS(voxelize<float>(pts, 0.0f), UsageError);
  std::vector<float> far = {1e7f, 0, 0};
  CHECK_THROWS_AS(voxelize<float>(far, 0.1f), UsageError);
}

TEST_CASE("submanifold rulebook on a single voxel") {
  std::vector<float> pts = {0.5f, 0.5f, 0.5f};
  SparseTensor st = voxelize<float>(pts, 1.0f);
  SparseTensor skel;
  Rulebook rb = build_rulebook(st, 3, 1, true, skel);
  CHECK(rb.kernel_volume == 27);
  std::size_t total = 0;
  for (int k = 0; k < 27; ++k) total += rb.pairs[k].size();
  CHECK(total == 1);
  CHECK(rb.pairs[13].size() == 1);  // center offset
  CHECK(rb.pairs[13][0] == std::pair<std::int32_t, std::int32_t>{0, 0});
  CHECK(skel.coords == st.coords);
}

TEST_CASE("submanifold rulebook on two adjacent voxels") {
  std::vector<float> pts = {0.5f, 0.5f, 0.5f, 1.5f, 0.5f, 0.5f};
  SparseTensor st = voxelize<float>(pts, 1.0f);
  SparseTensor skel;
  Rulebook rb = build_rulebook(st, 3, 1, true, skel);
  std::size_t total = 0;
  for (int k = 0; k < 27; ++k) total += rb.pairs[k].size();
  CHECK(total == 4);  // 2 center pairs + 2 neighbor pairs
  CHECK(rb.pairs[13].size() == 2);
}

TEST_CASE("stride-2 rulebook pools a dense 4^3 block") {
  std::vector<float> pts = grid_positions(4, 1.0f);
  SparseTensor st = voxelize<float>(pts, 1.0f);
  REQUIRE(st.active() == 64);
  SparseTensor skel;
  Rulebook rb = build_rulebook(st, 2, 2, false, skel);
  CHECK(rb.kernel_volume == 8);
  CHECK(skel.active() == 8);
  std::vector<int> per_output(8, 0);
  for (int k = 0; k < 8; ++k)
    for (auto& [i, o] : rb.pairs[k]) per_output[static_cast<std::size_t>(o)]++;
  for (int o = 0; o < 8; ++o) CHECK(per_output[o] == 8);
}

TEST_CASE("identity center kernel reproduces features") {
  std::vector<float> pts = grid_positions(3, 1.0f);
  SparseTensor st = voxelize<float>(pts, 1.0f);
  Rng rng(5);
  Tensor feats = Tensor::randn({static_cast<int>(st.active()), 4}, rng);
  Tensor w = Tensor::zeros({27, 4, 4});
  for (int c = 0; c < 4; ++c) w.data()[(13 * 4 + c) * 4 + c] = 1.0f;  // identity at center
  SparseTensor skel;
  Rulebook rb = build_rulebook(st, 3, 1, true, skel);
  Tensor out = sparse_conv_features(feats, w, Tensor(), rb, st.active());
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == feats.data()[i]);
}

TEST_CASE("sparse conv equals the dense oracle on a full 8^3 block") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    const int extent = 8, cin = 3, cout = 2;
    std::vector<float> pts = grid_positions(extent, 1.0f);
    SparseTensor st = voxelize<float>(pts, 1.0f);
    REQUIRE(st.active() == static_cast<std::size_t>(extent * extent * extent));
    Tensor feats = Tensor::randn({static_cast<int>(st.active()), cin}, rng);
    Tensor w = Tensor::randn({27, cin, cout}, rng);

    SparseTensor skel;
    Rulebook rb = build_rulebook(st, 3, 1, true, skel);
    Tensor out = sparse_conv_features(feats, w, Tensor(), rb, st.active());

    // rebuild the dense grid in row-major [x,y,z] order matching coords
    std::vector<float> grid(st.active() * cin);
    for (std::size_t row = 0; row < st.active(); ++row) {
      const VoxelCoord& c = st.coords[row];
      std::size_t cell = (static_cast<std::size_t>(c.x) * extent + c.y) * extent + c.z;
      for (int ci = 0; ci < cin; ++ci)
        grid[cell * cin + ci] = feats.data()[row * cin + ci];
    }
    std::vector<float> ref = dense_conv3d_naive(grid, extent, extent, extent, cin, w, cout);
    for (std::size_t row = 0; row < st.active(); ++row) {
      const VoxelCoord& c = st.coords[row];
      std::size_t cell = (static_cast<std::size_t>(c.x) * extent + c.y) * extent + c.z;
      for (int co = 0; co < cout; ++co)
        CHECK(std::fabs(out.data()[row * cout + co] - ref[cell * cout + co]) < 1e-5);
    }
  }
}

TEST_CASE("isolated voxel output depends only on the center offset") {
  std::vector<float> pts = {5.5f, 5.5f, 5.5f};
  SparseTensor st = voxelize<float>(pts, 1.0f);
  Rng rng(9);
  Tensor feats = Tensor::randn({1, 3}, rng);
  Tensor w1 = Tensor::randn({27, 3, 3}, rng);
  Tensor w2 = w1.clone();
  // scramble every non-center offset; the result must not change
  Rng rng2(10);
  for (int k = 0; k < 27; ++k) {
    if (k == 13) continue;
    for (int i = 0; i < 9; ++i)
      w2.data()[k * 9 + i] = static_cast<float>(rng2.normal());
  }
  SparseTensor skel;
  Rulebook rb = build_rulebook(st, 3, 1, true, skel);
  Tensor o1 = sparse_conv_features(feats, w1, Tensor(), rb, 1);
  Tensor o2 = sparse_conv_features(feats, w2, Tensor(), rb, 1);
  for (std::size_t i = 0; i < o1.numel(); ++i) CHECK(o1.data()[i] == o2.data()[i]);
}

TEST_CASE("submanifold conv never activates new voxels") {
  Rng rng(21);
  std::vector<float> pts;
  for (int i = 0; i < 50; ++i) {
    pts.push_back(static_cast<float>(rng.uniform(0, 6)));
    pts.push_back(static_cast<float>(rng.uniform(0, 6)));
    pts.push_back(static_cast<float>(rng.uniform(0, 6)));
  }
  SparseTensor st = voxelize<float>(pts, 0.5f);
  SparseTensor skel;
  Rulebook rb = build_rulebook(st, 3, 1, true, skel);
  CHECK(skel.active() == st.active());
  CHECK(skel.coords == st.coords);
  Tensor feats = Tensor::randn({static_cast<int>(st.active()), 2}, rng);
  Tensor w = Tensor::randn({27, 2, 2}, rng);
  Tensor out = sparse_conv_features(feats, w, Tensor(), rb, st.active());
  CHECK(static_cast<std::size_t>(out.dim(0)) == st.active());
}

TEST_CASE("downsample then upsample restores the fine active set") {
  std::vector<float> pts = grid_positions(4, 1.0f);
  SparseTensor st = voxelize<float>(pts, 1.0f);
  SparseTensor coarse;
  Rulebook rb = build_rulebook(st, 2, 2, false, coarse);
  Rng rng(31);
  Tensor cf = Tensor::randn({static_cast<int>(coarse.active()), 2}, rng);
  Tensor w = Tensor::randn({8, 2, 3}, rng);
  Tensor fine = sparse_upsample_features(cf, w, Tensor(), rb);
  CHECK(static_cast<std::size_t>(fine.dim(0)) == st.active());
}

TEST_CASE("upsample of one coarse voxel broadcasts through one-weights") {
  std::vector<float> pts = grid_positions(2, 1.0f);  // 8 fine voxels -> 1 coarse
  SparseTensor st = voxelize<float>(pts, 1.0f);
  SparseTensor coarse;
  Rulebook rb = build_rulebook(st, 2, 2, false, coarse);
  REQUIRE(coarse.active() == 1);
  Tensor cf = Tensor::from_data({1, 2}, {3.0f, -2.0f});
  Tensor w = Tensor::filled({8, 2, 2}, 0.0f);
  for (int k = 0; k < 8; ++k)
    for (int c = 0; c < 2; ++c) w.data()[(k * 2 + c) * 2 + c] = 1.0f;
  Tensor fine = sparse_upsample_features(cf, w, Tensor(), rb);
  REQUIRE(fine.dim(0) == 8);
  for (int r = 0; r < 8; ++r) {
    CHECK(fine.data()[r * 2 + 0] == 3.0f);
    CHECK(fine.data()[r * 2 + 1] == -2.0f);
  }
}

TEST_CASE("upsample is the adjoint of the strided conv") {
  Rng rng(37);
  std::vector<float> pts = grid_positions(4, 1.0f);
  SparseTensor st = voxelize<float>(pts, 1.0f);
  SparseTensor coarse;
  Rulebook rb = build_rulebook(st, 2, 2, false, coarse);
  const int cin = 3, cout = 2;
  Tensor x = Tensor::randn({static_cast<int>(st.active()), cin}, rng);
  Tensor w = Tensor::randn({8, cin, cout}, rng);
  Tensor y = Tensor::randn({static_cast<int>(coarse.active()), cout}, rng);

  Tensor down = sparse_conv_features(x, w, Tensor(), rb, coarse.active());
  // transpose each offset's weight for the adjoint direction
  Tensor wt = Tensor::zeros({8, cout, cin});
  for (int k = 0; k < 8; ++k)
    for (int ci = 0; ci < cin; ++ci)
      for (int co = 0; co < cout; ++co)
        wt.data()[(k * cout + co) * cin + ci] = w.data()[(k * cin + ci) * cout + co];
  Tensor up = sparse_upsample_features(y, wt, Tensor(), rb);

  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < down.numel(); ++i) lhs += down.data()[i] * y.data()[i];
  for (std::size_t i = 0; i < up.numel(); ++i) rhs += up.data()[i] * x.data()[i];
  CHECK(std::fabs(lhs - rhs) < 1e-5);
}

TEST_CASE("permuting point order leaves per-voxel outputs unchanged") {
  Rng rng(41);
  std::vector<float> pts;
  for (int i = 0; i < 40; ++i) {
    pts.push_back(static_cast<float>(rng.uniform(0, 3)));
    pts.push_back(static_cast<float>(rng.uniform(0, 3)));
    pts.push_back(static_cast<float>(rng.uniform(0, 3)));
  }
  std::size_t n = pts.size() / 3;
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  std::vector<float> pts2(pts.size());
  for (std::size_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) pts2[i * 3 + a] = pts[perm[i] * 3 + a];

  SparseTensor st1 = voxelize<float>(pts, 0.5f);
  SparseTensor st2 = voxelize<float>(pts2, 0.5f);
  REQUIRE(st1.active() == st2.active());

  // per-voxel features keyed by coordinate, so storage order cancels out
  auto feature_of = [](const VoxelCoord& c) {
    return Tensor::from_data({1, 2}, {static_cast<float>(c.x + 2 * c.y),
                                      static_cast<float>(c.z - c.y)});
  };
  auto build_feats = [&](const SparseTensor& st) {
    Tensor f = Tensor::zeros({static_cast<int>(st.active()), 2});
    for (std::size_t r = 0; r < st.active(); ++r) {
      Tensor row = feature_of(st.coords[r]);
      f.data()[r * 2] = row.data()[0];
      f.data()[r * 2 + 1] = row.data()[1];
    }
    return f;
  };
  Rng wr(7);
  Tensor w = Tensor::randn({27, 2, 2}, wr);
  SparseTensor sk1, sk2;
  Rulebook rb1 = build_rulebook(st1, 3, 1, true, sk1);
  Rulebook rb2 = build_rulebook(st2, 3, 1, true, sk2);
  Tensor o1 = sparse_conv_features(build_feats(st1), w, Tensor(), rb1, st1.active());
  Tensor o2 = sparse_conv_features(build_feats(st2), w, Tensor(), rb2, st2.active());

  for (std::size_t r1 = 0; r1 < st1.active(); ++r1) {
    std::int32_t r2 = st2.index.find(pack_voxel(st1.coords[r1]));
    REQUIRE(r2 >= 0);
    CHECK(o1.data()[r1 * 2] == o2.data()[static_cast<std::size_t>(r2) * 2]);
    CHECK(o1.data()[r1 * 2 + 1] == o2.data()[static_cast<std::size_t>(r2) * 2 + 1]);
  }
}

TEST_CASE("stale rulebook is rejected") {
  std::vector<float> pts = grid_positions(3, 1.0f);
  SparseTensor st = voxelize<float>(pts, 1.0f);
  SparseTensor skel;
  Rulebook rb = build_rulebook(st, 3, 1, true, skel);
  Rng rng(3);
  Tensor wrong = Tensor::randn({5, 3}, rng);  // row count mismatch
  Tensor w = Tensor::randn({27, 3, 3}, rng);
  CHECK_THROWS_AS(sparse_conv_features(wrong, w, Tensor(), rb, st.active()), UsageError);
}

TEST_CASE("sparse conv and upsample gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed * 7);
    std::vector<float> pts;
    for (int i = 0; i < 15; ++i) {
      pts.push_back(static_cast<float>(rng.uniform(0, 2.5)));
      pts.push_back(static_cast<float>(rng.uniform(0, 2.5)));
      pts.push_back(static_cast<float>(rng.uniform(0, 2.5)));
    }
    SparseTensor st = voxelize<float>(pts, 0.7f);
    SparseTensor skel;
    Rulebook rb = build_rulebook(st, 3, 1, true, skel);
    Tensor64 f = testutil::randn64({static_cast<int>(st.active()), 2}, rng);
    Tensor64 w = testutil::randn64({27, 2, 3}, rng);
    Tensor64 b = testutil::randn64({3}, rng);
    testutil::check_gradients(
        [&] { return sum(sparse_conv_features(f, w, b, rb, st.active())); }, {f, w, b});

    SparseTensor coarse;
    Rulebook rbd = build_rulebook(st, 2, 2, false, coarse);
    Tensor64 cf = testutil::randn64({static_cast<int>(coarse.active()), 2}, rng);
    Tensor64 uw = testutil::randn64({8, 2, 2}, rng);
    Tensor64 ub = testutil::randn64({2}, rng);
    testutil::check_gradients([&] { return sum(sparse_upsample_features(cf, uw, ub, rbd)); },
                              {cf, uw, ub});

    std::vector<std::int32_t> rows = st.point_to_voxel;
    Tensor64 g = testutil::randn64({static_cast<int>(st.active()), 3}, rng);
    testutil::check_gradients([&] { return sum(mul(gather_rows(g, rows), gather_rows(g, rows))); },
                              {g});
  }
}
