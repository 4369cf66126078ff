#include "model.hpp"

#include <cmath>

#include "common.hpp"
#include "rng.hpp"

namespace mm {

namespace {

Tensor he_init(Shape shape, std::size_t fan_in, Rng& rng) {
  float std = std::sqrt(2.0f / static_cast<float>(fan_in));
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<float>(rng.normal()) * std;
  t.set_requires_grad(true);
  return t;
}

Tensor zeros_param(Shape shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  t.set_requires_grad(true);
  return t;
}

}  // namespace

void Model::register_params() {
  registry_.clear();
  auto reg = [&](const std::string& name, Tensor& t) { registry_.emplace_back(name, &t); };
  for (int s = 0; s < 4; ++s) {
    reg("2d.rgb_enc" + std::to_string(s) + ".w", rgb_enc_[s].w);
    reg("2d.rgb_enc" + std::to_string(s) + ".b", rgb_enc_[s].b);
    reg("2d.depth_enc" + std::to_string(s) + ".w", depth_enc_[s].w);
    reg("2d.depth_enc" + std::to_string(s) + ".b", depth_enc_[s].b);
  }
  reg("2d.bott1.w", bott1_.w);
  reg("2d.bott1.b", bott1_.b);
  reg("2d.bott2.w", bott2_.w);
  reg("2d.bott2.b", bott2_.b);
  reg("2d.up2.w", up2_.w);
  reg("2d.up2.b", up2_.b);
  reg("2d.dec2.w", dec2_.w);
  reg("2d.dec2.b", dec2_.b);
  reg("2d.up1.w", up1_.w);
  reg("2d.up1.b", up1_.b);
  reg("2d.dec1.w", dec1_.w);
  reg("2d.dec1.b", dec1_.b);
  reg("2d.up0.w", up0_.w);
  reg("2d.up0.b", up0_.b);
  reg("2d.dec0.w", dec0_.w);
  reg("2d.dec0.b", dec0_.b);
  reg("2d.upf.w", upf_.w);
  reg("2d.upf.b", upf_.b);
  reg("2d.decf.w", decf_.w);
  reg("2d.decf.b", decf_.b);
  reg("2d.head_main.w", head2d_main_.w);
  reg("2d.head_main.b", head2d_main_.b);
  reg("2d.head_aux.w", head2d_aux_.w);
  reg("2d.head_aux.b", head2d_aux_.b);

  reg("3d.alpha.w", alpha_.w);
  reg("3d.alpha.b", alpha_.b);
  reg("3d.stem.w", stem_.w);
  reg("3d.stem.b", stem_.b);
  reg("3d.enc0b.w", enc0b_.w);
  reg("3d.enc0b.b", enc0b_.b);
  reg("3d.down1.w", down1_.w);
  reg("3d.down1.b", down1_.b);
  reg("3d.enc1b.w", enc1b_.w);
  reg("3d.enc1b.b", enc1b_.b);
  reg("3d.down2.w", down2_.w);
  reg("3d.down2.b", down2_.b);
  reg("3d.enc2b.w", enc2b_.w);
  reg("3d.enc2b.b", enc2b_.b);
  reg("3d.up1.w", up3d_1_.w);
  reg("3d.up1.b", up3d_1_.b);
  reg("3d.dec1.w", dec3d_1_.w);
  reg("3d.dec1.b", dec3d_1_.b);
  reg("3d.up0.w", up3d_0_.w);
  reg("3d.up0.b", up3d_0_.b);
  reg("3d.dec0.w", dec3d_0_.w);
  reg("3d.dec0.b", dec3d_0_.b);
  reg("3d.head_main.w", head3d_main_.w);
  reg("3d.head_main.b", head3d_main_.b);
  reg("3d.head_aux.w", head3d_aux_.w);
  reg("3d.head_aux.b", head3d_aux_.b);

  if (cfg_.fusion_head) {
    reg("fusion.w", fusion_.w);
    reg("fusion.b", fusion_.b);
  }
}

void Model::init_params(std::uint64_t seed) {
  Rng rng(seed);
  const int C = cfg_.num_classes;
  const int F = cfg_.feat2d;
  const int* w2 = kWidths2d;
  const int* w3 = kWidths3d;

  auto conv = [&](int cout, int cin, int k) {
    return Conv2dParams{he_init({cout, cin, k, k}, static_cast<std::size_t>(cin) * k * k, rng),
                        zeros_param({cout})};
  };
  auto tconv = [&](int cin, int cout) {  // 2x2 stride-2 upsampling
    return Conv2dParams{he_init({cin, cout, 2, 2}, static_cast<std::size_t>(cin), rng),
                        zeros_param({cout})};
  };
  auto lin = [&](int in, int out) {
    return LinearParams{he_init({in, out}, static_cast<std::size_t>(in), rng), zeros_param({out})};
  };
  auto sconv = [&](int k3, int cin, int cout) {
    return SparseConvParams{
        he_init({k3, cin, cout}, static_cast<std::size_t>(k3) * cin, rng), zeros_param({cout})};
  };

  for (int s = 0; s < 4; ++s) {
    int cin = s == 0 ? 3 : w2[s - 1];
    rgb_enc_[s] = conv(w2[s], cin, 3);
    depth_enc_[s] = conv(w2[s], s == 0 ? 1 : w2[s - 1], 3);
  }
  bott1_ = conv(64, 2 * w2[3], 3);
  bott2_ = conv(64, 64, 3);
  up2_ = tconv(64, 32);
  dec2_ = conv(32, 32 + 2 * w2[2], 3);
  up1_ = tconv(32, 16);
  dec1_ = conv(16, 16 + 2 * w2[1], 3);
  up0_ = tconv(16, 16);
  dec0_ = conv(16, 16 + 2 * w2[0], 3);
  upf_ = tconv(16, F);
  decf_ = conv(F, F, 1);
  head2d_main_ = lin(F, C);
  head2d_aux_ = lin(F, C);

  alpha_ = lin(3, 1);
  // Bias 1: the gate starts open (alpha ~ 0.73) and learns to close.
  alpha_.b.vec()[0] = 1.0f;
  stem_ = sconv(27, 3, w3[0]);
  enc0b_ = sconv(27, w3[0], w3[0]);
  down1_ = sconv(8, w3[0], w3[1]);
  enc1b_ = sconv(27, w3[1], w3[1]);
  down2_ = sconv(8, w3[1], w3[2]);
  enc2b_ = sconv(27, w3[2], w3[2]);
  up3d_1_ = sconv(8, w3[2], w3[1]);
  dec3d_1_ = sconv(27, 2 * w3[1], w3[1]);
  up3d_0_ = sconv(8, w3[1], w3[0]);
  dec3d_0_ = sconv(27, 2 * w3[0], w3[0]);
  head3d_main_ = lin(w3[0], C);
  head3d_aux_ = lin(w3[0], C);

  if (cfg_.fusion_head) fusion_ = lin(F + w3[0], C);
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.num_classes < 2) throw UsageError("model: need at least two classes");
  if (cfg_.feat2d < 1) throw UsageError("model: feat2d must be positive");
  if (cfg_.voxel_size <= 0) throw UsageError("model: voxel_size must be positive");
  init_params(seed);
  register_params();
}

Model::Model(const NamedTensors& checkpoint) {
  auto meta = [&](const std::string& name) -> float {
    const Tensor* t = find_tensor(checkpoint, name);
    if (!t || t->numel() != 1) throw DataError("checkpoint: missing meta entry " + name);
    return t->data()[0];
  };
  cfg_.num_classes = static_cast<int>(meta("meta.num_classes"));
  cfg_.voxel_size = meta("meta.voxel_size");
  cfg_.depth_scale = meta("meta.depth_scale");
  cfg_.feat2d = static_cast<int>(meta("meta.feat2d"));
  cfg_.fusion_head = meta("meta.fusion_head") != 0;
  cfg_.rgb_only_2d = meta("meta.rgb_only_2d") != 0;
  init_params(0);
  register_params();
  for (auto& [name, slot] : registry_) {
    const Tensor* t = find_tensor(checkpoint, name);
    if (!t) throw DataError("checkpoint: missing tensor " + name);
    if (t->shape() != slot->shape())
      throw DataError("checkpoint: tensor " + name + " has shape " + shape_str(t->shape()) +
                      ", expected " + shape_str(slot->shape()));
    slot->vec() = t->vec();
  }
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  out.reserve(registry_.size());
  for (const auto& [name, t] : registry_) out.push_back(*t);
  return out;
}

NamedTensors Model::named_tensors() const {
  NamedTensors out;
  auto meta = [&](const std::string& name, float v) {
    out.emplace_back(name, Tensor::scalar(v));
  };
  meta("meta.num_classes", static_cast<float>(cfg_.num_classes));
  meta("meta.voxel_size", cfg_.voxel_size);
  meta("meta.depth_scale", cfg_.depth_scale);
  meta("meta.feat2d", static_cast<float>(cfg_.feat2d));
  meta("meta.fusion_head", cfg_.fusion_head ? 1.f : 0.f);
  meta("meta.rgb_only_2d", cfg_.rgb_only_2d ? 1.f : 0.f);
  for (const auto& [name, t] : registry_) out.emplace_back(name, *t);
  return out;
}

BranchOutput Model::forward_2d(const Tensor& image, const Tensor& sparse_depth,
                               const std::vector<int>& px, const std::vector<int>& py,
                               const std::vector<std::uint8_t>& in_bounds) const {
  std::vector<Sample2D> batch = {{&image, &sparse_depth, &px, &py, &in_bounds}};
  return forward_2d_batch(batch)[0];
}

std::vector<BranchOutput> Model::forward_2d_batch(const std::vector<Sample2D>& batch) const {
  if (batch.empty()) throw UsageError("forward_2d: empty batch");
  const Tensor& first = *batch[0].image;
  if (first.rank() != 3 || first.dim(0) != 3)
    throw UsageError("forward_2d: image must be [3,H,W]");
  int h = first.dim(1), w = first.dim(2);
  if (h % 16 || w % 16) throw UsageError("forward_2d: image size must be divisible by 16");
  int n = static_cast<int>(batch.size());

  std::vector<Tensor> xs, ds;
  xs.reserve(batch.size());
  ds.reserve(batch.size());
  for (const Sample2D& s : batch) {
    if (s.image->rank() != 3 || s.image->dim(0) != 3 || s.image->dim(1) != h ||
        s.image->dim(2) != w)
      throw UsageError("forward_2d: image sizes disagree within the batch");
    if (s.depth->rank() != 3 || s.depth->dim(0) != 1 || s.depth->dim(1) != h ||
        s.depth->dim(2) != w)
      throw UsageError("forward_2d: depth map size does not match image");
    xs.push_back(reshape(*s.image, {1, 3, h, w}));
    if (cfg_.rgb_only_2d) {
      ds.push_back(Tensor::zeros({1, 1, h, w}));
    } else {
      ds.push_back(reshape(scale(*s.depth, 1.0f / cfg_.depth_scale), {1, 1, h, w}));
    }
  }
  Tensor x = n == 1 ? xs[0] : concat<float>(xs, 0);
  Tensor d = n == 1 ? ds[0] : concat<float>(ds, 0);

  Tensor r = x, dd = d;
  Tensor rskip[4], dskip[4];
  for (int s = 0; s < 4; ++s) {
    r = relu(conv2d(r, rgb_enc_[s].w, rgb_enc_[s].b, 2, 1));
    dd = relu(conv2d(dd, depth_enc_[s].w, depth_enc_[s].b, 2, 1));
    rskip[s] = r;
    dskip[s] = dd;
  }

  Tensor b = relu(conv2d(concat<float>({rskip[3], dskip[3]}, 1), bott1_.w, bott1_.b, 1, 1));
  b = relu(conv2d(b, bott2_.w, bott2_.b, 1, 1));

  Tensor u2 = relu(conv2d_transpose(b, up2_.w, up2_.b, 2, 0));
  Tensor c2 = relu(conv2d(concat<float>({u2, rskip[2], dskip[2]}, 1), dec2_.w, dec2_.b, 1, 1));
  Tensor u1 = relu(conv2d_transpose(c2, up1_.w, up1_.b, 2, 0));
  Tensor c1 = relu(conv2d(concat<float>({u1, rskip[1], dskip[1]}, 1), dec1_.w, dec1_.b, 1, 1));
  Tensor u0 = relu(conv2d_transpose(c1, up0_.w, up0_.b, 2, 0));
  Tensor c0 = relu(conv2d(concat<float>({u0, rskip[0], dskip[0]}, 1), dec0_.w, dec0_.b, 1, 1));
  Tensor f = relu(conv2d_transpose(c0, upf_.w, upf_.b, 2, 0));
  f = relu(conv2d(f, decf_.w, decf_.b, 1, 0));  // [n, feat2d, h, w]

  std::vector<BranchOutput> outs(batch.size());
  for (int i = 0; i < n; ++i) {
    Tensor fmap = reshape(n == 1 ? f : slice0(f, i, 1), {cfg_.feat2d, h, w});
    BranchOutput& out = outs[static_cast<std::size_t>(i)];
    out.point_features = gather_point_features(fmap, *batch[static_cast<std::size_t>(i)].px,
                                               *batch[static_cast<std::size_t>(i)].py,
                                               *batch[static_cast<std::size_t>(i)].in_bounds);
    out.main_logits = linear(out.point_features, head2d_main_.w, head2d_main_.b);
    out.aux_logits = linear(out.point_features, head2d_aux_.w, head2d_aux_.b);
  }
  return outs;
}

Branch3DOutput Model::forward_3d(const std::vector<float>& positions,
                                 const std::vector<float>& colors) const {
  std::size_t n = positions.size() / 3;
  if (colors.size() != positions.size())
    throw UsageError("forward_3d: color count does not match point count");

  SparseTensor st = voxelize<float>(positions, cfg_.voxel_size);

  Tensor colors_t = Tensor::from_data({static_cast<int>(n), 3}, colors);
  Branch3DOutput out;
  out.alpha = logistic(linear(colors_t, alpha_.w, alpha_.b));
  Tensor gated = row_scale(colors_t, out.alpha);
  out.voxel_input = select_rows(gated, st.voxel_winner);
  out.point_to_voxel = st.point_to_voxel;

  SparseTensor skel0;
  Rulebook rb0 = build_rulebook(st, 3, 1, true, skel0);
  Tensor l0 = relu(sparse_conv_features(out.voxel_input, stem_.w, stem_.b, rb0, st.active()));
  l0 = relu(sparse_conv_features(l0, enc0b_.w, enc0b_.b, rb0, st.active()));

  SparseTensor skel1;
  Rulebook rbd1 = build_rulebook(st, 2, 2, false, skel1);
  Tensor l1 = relu(sparse_conv_features(l0, down1_.w, down1_.b, rbd1, skel1.active()));
  SparseTensor skel1s;
  Rulebook rb1 = build_rulebook(skel1, 3, 1, true, skel1s);
  l1 = relu(sparse_conv_features(l1, enc1b_.w, enc1b_.b, rb1, skel1.active()));

  SparseTensor skel2;
  Rulebook rbd2 = build_rulebook(skel1, 2, 2, false, skel2);
  Tensor l2 = relu(sparse_conv_features(l1, down2_.w, down2_.b, rbd2, skel2.active()));
  SparseTensor skel2s;
  Rulebook rb2 = build_rulebook(skel2, 3, 1, true, skel2s);
  l2 = relu(sparse_conv_features(l2, enc2b_.w, enc2b_.b, rb2, skel2.active()));

  Tensor u1 = relu(sparse_upsample_features(l2, up3d_1_.w, up3d_1_.b, rbd2));
  Tensor c1 = relu(sparse_conv_features(concat<float>({u1, l1}, 1), dec3d_1_.w, dec3d_1_.b, rb1,
                                        skel1.active()));
  Tensor u0 = relu(sparse_upsample_features(c1, up3d_0_.w, up3d_0_.b, rbd1));
  Tensor c0 = relu(sparse_conv_features(concat<float>({u0, l0}, 1), dec3d_0_.w, dec3d_0_.b, rb0,
                                        st.active()));

  out.point_features = gather_rows(c0, st.point_to_voxel);
  out.main_logits = linear(out.point_features, head3d_main_.w, head3d_main_.b);
  out.aux_logits = linear(out.point_features, head3d_aux_.w, head3d_aux_.b);
  return out;
}

Tensor Model::forward_fusion(const Tensor& feats_2d, const Tensor& feats_3d) const {
  if (!cfg_.fusion_head) throw UsageError("forward_fusion: fusion head is disabled");
  if (feats_2d.rank() != 2 || feats_3d.rank() != 2 || feats_2d.dim(0) != feats_3d.dim(0))
    throw UsageError("forward_fusion: per-point feature row mismatch");
  Tensor cat = concat<float>({feats_2d, feats_3d}, 1);
  if (cat.dim(1) != fusion_.w.dim(0))
    throw UsageError("forward_fusion: feature width does not match the fusion classifier");
  return linear(cat, fusion_.w, fusion_.b);
}

}  // namespace mm
