#include "trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "common.hpp"
#include "config.hpp"

namespace mm {

namespace fs = std::filesystem;

void LossWeights::validate() const {
  if (lambda_s < 0 || lambda_t < 0 || lambda_xs < 0 || lambda_xt < 0)
    throw UsageError("loss weights must be nonnegative");
}

// ---------------------------------------------------------------------------
// Config

namespace {

void check_known_keys(const Config& cfg) {
  static const std::map<std::string, std::set<std::string>> known = {
      {"data", {"source", "target", "num_classes"}},
      {"model", {"voxel_size", "depth_scale", "feat2d", "fusion_head", "rgb_only_2d"}},
      {"train",
       {"seed", "epochs", "batch_size", "lr_peak", "lr_floor", "warmup_frac", "weight_decay",
        "threads", "log_every"}},
      {"uda",
       {"lambda_s", "lambda_t", "lambda_xs", "lambda_xt", "detach_xm_target", "keep_fraction",
        "pseudo_labels"}},
  };
  for (const auto& [section, keys] : cfg.sections()) {
    auto it = known.find(section);
    if (it == known.end()) throw UsageError("config: unknown section [" + section + "]");
    for (const auto& [key, value] : keys)
      if (!it->second.count(key))
        throw UsageError("config: unknown key " + section + "." + key);
  }
}

}  // namespace

TrainConfig TrainConfig::from_file(const std::string& path) {
  Config cfg = Config::parse_file(path);
  check_known_keys(cfg);
  TrainConfig t;
  t.source_path = cfg.get("data", "source", "");
  t.target_path = cfg.get("data", "target", "");
  t.num_classes = static_cast<int>(cfg.get_int("data", "num_classes", kNumClasses));
  if (t.source_path.empty()) throw UsageError("config: [data] source is required");
  if (t.num_classes < 2) throw UsageError("config: num_classes must be at least 2");

  t.model.num_classes = t.num_classes;
  t.model.voxel_size = static_cast<float>(cfg.get_double("model", "voxel_size", 0.2));
  t.model.depth_scale = static_cast<float>(cfg.get_double("model", "depth_scale", 20.0));
  t.model.feat2d = static_cast<int>(cfg.get_int("model", "feat2d", 12));
  t.model.fusion_head = cfg.get_bool("model", "fusion_head", false);
  t.model.rgb_only_2d = cfg.get_bool("model", "rgb_only_2d", false);
  if (t.model.voxel_size <= 0) throw UsageError("config: voxel_size must be positive");

  t.seed = static_cast<std::uint64_t>(cfg.get_int("train", "seed", 1));
  t.epochs = static_cast<int>(cfg.get_int("train", "epochs", 15));
  t.batch_size = static_cast<int>(cfg.get_int("train", "batch_size", 8));
  t.lr_peak = cfg.get_double("train", "lr_peak", 1e-3);
  t.lr_floor = cfg.get_double("train", "lr_floor", 1e-5);
  t.warmup_frac = cfg.get_double("train", "warmup_frac", 0.3);
  t.weight_decay = cfg.get_double("train", "weight_decay", 1e-4);
  t.threads = static_cast<int>(cfg.get_int("train", "threads", 1));
  t.log_every = static_cast<int>(cfg.get_int("train", "log_every", 10));
  if (t.epochs < 1 || t.batch_size < 1) throw UsageError("config: epochs and batch_size must be >= 1");
  if (t.lr_peak <= 0 || t.lr_floor <= 0 || t.lr_floor > t.lr_peak)
    throw UsageError("config: learning rates must satisfy 0 < lr_floor <= lr_peak");
  if (t.warmup_frac < 0 || t.warmup_frac > 0.9)
    throw UsageError("config: warmup_frac must be in [0,0.9]");

  t.has_uda_section = cfg.has_section("uda");
  t.weights.lambda_s = cfg.get_double("uda", "lambda_s", t.weights.lambda_s);
  t.weights.lambda_t = cfg.get_double("uda", "lambda_t", t.weights.lambda_t);
  t.weights.lambda_xs = cfg.get_double("uda", "lambda_xs", t.weights.lambda_xs);
  t.weights.lambda_xt = cfg.get_double("uda", "lambda_xt", t.weights.lambda_xt);
  t.lambda_t_explicit = cfg.has("uda", "lambda_t");
  t.detach_xm_target = cfg.get_bool("uda", "detach_xm_target", true);
  t.keep_fraction = cfg.get_double("uda", "keep_fraction", 0.66);
  t.pseudo_path = cfg.get("uda", "pseudo_labels", "");
  t.weights.validate();
  if (t.keep_fraction <= 0 || t.keep_fraction > 1)
    throw UsageError("config: keep_fraction must be in (0,1]");
  return t;
}

// ---------------------------------------------------------------------------
// Pseudo-label container

namespace {
constexpr char kPseudoMagic[4] = {'M', 'M', 'P', 'L'};
}

void PseudoLabelSet::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open pseudo-label file for writing: " + path);
  auto put = [&](const void* p, std::size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out) throw DataError(path + ": write failed");
  };
  auto put_u32 = [&](std::uint32_t v) { put(&v, 4); };
  put(kPseudoMagic, 4);
  put_u32(1);
  put(&keep_fraction, 4);
  put_u32(static_cast<std::uint32_t>(labels_2d.size()));
  for (std::size_t i = 0; i < labels_2d.size(); ++i) {
    put_u32(static_cast<std::uint32_t>(labels_2d[i].size()));
    put(labels_2d[i].data(), labels_2d[i].size() * 4);
    put(labels_3d[i].data(), labels_3d[i].size() * 4);
    put(labels_avg[i].data(), labels_avg[i].size() * 4);
  }
}

PseudoLabelSet PseudoLabelSet::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open pseudo-label file: " + path);
  std::size_t offset = 0;
  auto get = [&](void* p, std::size_t n) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
      throw DataError(path + ": truncated at offset " + std::to_string(offset));
    offset += n;
  };
  auto get_u32 = [&]() {
    std::uint32_t v;
    get(&v, 4);
    return v;
  };
  char magic[4];
  get(magic, 4);
  if (std::memcmp(magic, kPseudoMagic, 4) != 0)
    throw DataError(path + ": bad magic (not a pseudo-label file)");
  std::uint32_t version = get_u32();
  if (version != 1) throw DataError(path + ": unsupported version");
  PseudoLabelSet ps;
  get(&ps.keep_fraction, 4);
  std::uint32_t count = get_u32();
  ps.labels_2d.resize(count);
  ps.labels_3d.resize(count);
  ps.labels_avg.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t n = get_u32();
    if (n > (1u << 24)) throw DataError(path + ": implausible point count");
    ps.labels_2d[i].resize(n);
    get(ps.labels_2d[i].data(), n * 4);
    ps.labels_3d[i].resize(n);
    get(ps.labels_3d[i].data(), n * 4);
    ps.labels_avg[i].resize(n);
    get(ps.labels_avg[i].data(), n * 4);
  }
  return ps;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule

AdamW::AdamW(std::vector<Tensor> params, double weight_decay, double beta1, double beta2,
             double eps)
    : params_(std::move(params)),
      weight_decay_(weight_decay),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i].numel(), 0.f);
    v_[i].assign(params_[i].numel(), 0.f);
  }
}

void AdamW::step(double lr) {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    const std::vector<float>& g = p.grad();
    float* w = p.data();
    for (std::size_t j = 0; j < g.size(); ++j) {
      float gj = g[j];
      m_[i][j] = static_cast<float>(beta1_ * m_[i][j] + (1.0 - beta1_) * gj);
      v_[i][j] = static_cast<float>(beta2_ * v_[i][j] + (1.0 - beta2_) * gj * gj);
      double mhat = m_[i][j] / bc1;
      double vhat = v_[i][j] / bc2;
      w[j] -= static_cast<float>(lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * w[j]));
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double one_cycle_lr(std::int64_t step, std::int64_t total_steps, double peak, double floor,
                    double warmup_frac) {
  std::int64_t warm = std::max<std::int64_t>(1, std::llround(total_steps * warmup_frac));
  if (step < warm)
    return floor + (peak - floor) * static_cast<double>(step + 1) / static_cast<double>(warm);
  double progress = static_cast<double>(step - warm) /
                    static_cast<double>(std::max<std::int64_t>(1, total_steps - warm));
  progress = std::min(1.0, progress);
  return floor + 0.5 * (peak - floor) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// ---------------------------------------------------------------------------
// Augmentations

Augmented2D apply_2d_augment(const Sample& sample, bool flip, const float jit[3]) {
  const Intrinsics& K = sample.intrinsics;
  int h = K.height, w = K.width;
  Augmented2D out;

  out.image = Tensor::zeros({3, h, w});
  const float* src = sample.image.data();
  float* dst = out.image.data();
  std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < 3; ++c)
    for (int v = 0; v < h; ++v)
      for (int u = 0; u < w; ++u) {
        int su = flip ? w - 1 - u : u;
        float val = src[c * plane + static_cast<std::size_t>(v) * w + su] * jit[c];
        dst[c * plane + static_cast<std::size_t>(v) * w + u] = std::clamp(val, 0.0f, 1.0f);
      }

  Projection proj = project(sample.cloud, K);
  Tensor depth = make_sparse_depth(sample.cloud, K, proj);
  out.depth = Tensor::zeros({1, h, w});
  const float* dsrc = depth.data();
  float* ddst = out.depth.data();
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u)
      ddst[static_cast<std::size_t>(v) * w + u] =
          dsrc[static_cast<std::size_t>(v) * w + (flip ? w - 1 - u : u)];

  out.px.resize(proj.px.size());
  for (std::size_t i = 0; i < proj.px.size(); ++i)
    out.px[i] = flip ? w - 1 - proj.px[i] : proj.px[i];
  out.py = proj.py;
  out.in_bounds = proj.in_bounds;
  return out;
}

Augmented2D augment_2d(const Sample& sample, Rng& rng) {
  bool flip = rng.uniform() < 0.5;
  float jit[3];
  for (float& j : jit) j = static_cast<float>(rng.uniform(0.8, 1.25));
  return apply_2d_augment(sample, flip, jit);
}

std::vector<float> apply_3d_augment(const Sample& sample, bool flip, float s, float angle_deg) {
  float angle = angle_deg * 3.14159265f / 180.0f;
  float c = std::cos(angle), sn = std::sin(angle);
  std::vector<float> out(sample.cloud.positions.size());
  for (std::size_t i = 0; i < sample.cloud.size(); ++i) {
    float x = sample.cloud.positions[i * 3 + 0];
    float y = sample.cloud.positions[i * 3 + 1];
    float z = sample.cloud.positions[i * 3 + 2];
    if (flip) x = -x;
    x *= s;
    y *= s;
    z *= s;
    out[i * 3 + 0] = c * x + sn * z;
    out[i * 3 + 1] = y;
    out[i * 3 + 2] = -sn * x + c * z;
  }
  return out;
}

std::vector<float> augment_3d(const Sample& sample, Rng& rng) {
  bool flip = rng.uniform() < 0.5;
  float s = static_cast<float>(rng.uniform(0.95, 1.05));
  float angle = static_cast<float>(rng.uniform(-10.0, 10.0));
  return apply_3d_augment(sample, flip, s, angle);
}

std::vector<std::int32_t> labels_for_2d(const Sample& sample) {
  const Intrinsics& K = sample.intrinsics;
  Projection proj = project(sample.cloud, K);
  std::vector<std::int32_t> map = project_labels(sample.cloud, K, proj);
  std::vector<std::int32_t> out(sample.cloud.size(), -1);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!proj.in_bounds[i]) continue;
    out[i] = map[static_cast<std::size_t>(proj.py[i]) * K.width + proj.px[i]];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct Prepared {
  Augmented2D a2;
  std::vector<float> positions;
  std::vector<std::int32_t> labels2d;
  const Sample* sample = nullptr;
  const std::vector<std::int32_t>* pl2d = nullptr;
  const std::vector<std::int32_t>* pl3d = nullptr;
  const std::vector<std::int32_t>* plavg = nullptr;
};

Prepared prepare(const Sample& s, Rng base, bool augment) {
  Prepared p;
  p.sample = &s;
  if (augment) {
    Rng r2 = base.fork(0);
    Rng r3 = base.fork(1);
    p.a2 = augment_2d(s, r2);
    p.positions = augment_3d(s, r3);
  } else {
    Projection proj = project(s.cloud, s.intrinsics);
    p.a2.image = s.image;
    p.a2.depth = make_sparse_depth(s.cloud, s.intrinsics, proj);
    p.a2.px = proj.px;
    p.a2.py = proj.py;
    p.a2.in_bounds = proj.in_bounds;
    p.positions = s.cloud.positions;
  }
  p.labels2d = labels_for_2d(s);
  return p;
}

bool any_supervised(const std::vector<std::int32_t>& labels) {
  for (auto l : labels)
    if (l >= 0) return true;
  return false;
}

struct StepStats {
  double seg_src = 0, xm_src = 0, xm_tgt = 0, seg_pl = 0;
};

// Both branch outputs for a run of prepared samples; the 2D convolution
// stack runs once over the whole group.
struct GroupForward {
  std::vector<BranchOutput> o2;
  std::vector<Branch3DOutput> o3;
};

GroupForward forward_group(const Model& m, const std::vector<Prepared>& items, std::size_t lo,
                           std::size_t hi) {
  GroupForward g;
  std::vector<Model::Sample2D> batch;
  batch.reserve(hi - lo);
  for (std::size_t i = lo; i < hi; ++i)
    batch.push_back({&items[i].a2.image, &items[i].a2.depth, &items[i].a2.px, &items[i].a2.py,
                     &items[i].a2.in_bounds});
  g.o2 = m.forward_2d_batch(batch);
  g.o3.reserve(hi - lo);
  for (std::size_t i = lo; i < hi; ++i)
    g.o3.push_back(m.forward_3d(items[i].positions, items[i].sample->cloud.colors));
  return g;
}

// One source sample's weighted loss terms per the UDA objective: the
// segmentation terms enter at unit weight, mimicry at lambda_xs.
void source_terms(const Model& m, const Prepared& p, const BranchOutput& o2,
                  const Branch3DOutput& o3, const LossWeights& w, bool detach_xm,
                  std::vector<Tensor>& terms, StepStats& stats) {
  Tensor seg = add(seg_loss(o2.main_logits, p.labels2d),
                   seg_loss(o3.main_logits, p.sample->cloud.labels));
  if (m.config().fusion_head) {
    Tensor f = m.forward_fusion(o2.point_features, o3.point_features);
    seg = add(seg, seg_loss(f, p.sample->cloud.labels));
  }
  stats.seg_src += seg.item();
  terms.push_back(seg);

  Tensor p2 = softmax(o2.main_logits);
  Tensor p3 = softmax(o3.main_logits);
  Tensor xm = add(xm_loss(detach_xm ? p2.detach() : p2, o3.aux_logits),
                  xm_loss(detach_xm ? p3.detach() : p3, o2.aux_logits));
  stats.xm_src += xm.item();
  terms.push_back(scale(xm, static_cast<float>(w.lambda_xs)));
}

void target_terms(const Model& m, const Prepared& p, const BranchOutput& o2,
                  const Branch3DOutput& o3, const LossWeights& w, bool detach_xm,
                  std::vector<Tensor>& terms, StepStats& stats) {
  Tensor p2 = softmax(o2.main_logits);
  Tensor p3 = softmax(o3.main_logits);
  Tensor xm = add(xm_loss(detach_xm ? p2.detach() : p2, o3.aux_logits),
                  xm_loss(detach_xm ? p3.detach() : p3, o2.aux_logits));
  stats.xm_tgt += xm.item();
  terms.push_back(scale(xm, static_cast<float>(w.lambda_xt)));

  if (p.pl2d) {
    std::vector<Tensor> pl_terms;
    if (any_supervised(*p.pl2d)) pl_terms.push_back(seg_loss(o2.main_logits, *p.pl2d));
    if (any_supervised(*p.pl3d)) pl_terms.push_back(seg_loss(o3.main_logits, *p.pl3d));
    if (m.config().fusion_head && any_supervised(*p.plavg)) {
      Tensor f = m.forward_fusion(o2.point_features, o3.point_features);
      pl_terms.push_back(seg_loss(f, *p.plavg));
    }
    if (!pl_terms.empty()) {
      Tensor pl = add_scalars(pl_terms);
      stats.seg_pl += pl.item();
      terms.push_back(scale(pl, static_cast<float>(w.lambda_t)));
    }
  }
}

std::vector<std::size_t> epoch_order(std::size_t n, std::size_t len, Rng rng) {
  std::vector<std::size_t> order;
  order.reserve(len);
  while (order.size() < len) {
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    for (std::size_t i = 0; i < n && order.size() < len; ++i) order.push_back(perm[i]);
  }
  return order;
}

}  // namespace

Tensor total_loss(const Model& model, const std::vector<const Sample*>& source,
                  const std::vector<const Sample*>& target,
                  const std::vector<const std::vector<std::int32_t>*>& pseudo_2d,
                  const std::vector<const std::vector<std::int32_t>*>& pseudo_3d,
                  const LossWeights& weights, bool detach_xm) {
  weights.validate();
  if (source.empty()) throw UsageError("total_loss: source batch is empty");
  if (!pseudo_2d.empty() && pseudo_2d.size() != target.size())
    throw UsageError("total_loss: pseudo labels do not match target batch");
  StepStats stats;
  std::vector<Tensor> src_terms, tgt_terms;
  std::vector<Prepared> src_items(source.size()), tgt_items(target.size());
  for (std::size_t i = 0; i < source.size(); ++i) src_items[i] = prepare(*source[i], Rng(0), false);
  for (std::size_t i = 0; i < target.size(); ++i) {
    tgt_items[i] = prepare(*target[i], Rng(0), false);
    if (!pseudo_2d.empty()) {
      tgt_items[i].pl2d = pseudo_2d[i];
      tgt_items[i].pl3d = pseudo_3d[i];
    }
  }
  GroupForward sf = forward_group(model, src_items, 0, src_items.size());
  for (std::size_t i = 0; i < src_items.size(); ++i)
    source_terms(model, src_items[i], sf.o2[i], sf.o3[i], weights, detach_xm, src_terms, stats);
  Tensor total = scale(add_scalars(src_terms), 1.0f / static_cast<float>(source.size()));
  if (!tgt_items.empty()) {
    GroupForward tf = forward_group(model, tgt_items, 0, tgt_items.size());
    for (std::size_t i = 0; i < tgt_items.size(); ++i)
      target_terms(model, tgt_items[i], tf.o2[i], tf.o3[i], weights, detach_xm, tgt_terms, stats);
    total = add(total, scale(add_scalars(tgt_terms), 1.0f / static_cast<float>(target.size())));
  }
  return total;
}

std::vector<std::vector<std::int32_t>> filter_pseudo_labels(
    const std::vector<std::vector<std::int32_t>>& preds,
    const std::vector<std::vector<float>>& confidence, int num_classes, double keep_fraction) {
  if (preds.size() != confidence.size())
    throw UsageError("filter_pseudo_labels: prediction/confidence size mismatch");
  if (keep_fraction <= 0 || keep_fraction > 1)
    throw UsageError("filter_pseudo_labels: keep_fraction must be in (0,1]");

  struct Cand {
    float conf;
    std::uint32_t sample, point;
  };
  std::vector<std::vector<Cand>> cand(static_cast<std::size_t>(num_classes));
  std::vector<std::vector<std::int32_t>> out(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].size() != confidence[i].size())
      throw UsageError("filter_pseudo_labels: sample " + std::to_string(i) + " size mismatch");
    out[i].assign(preds[i].size(), -1);
    for (std::size_t p = 0; p < preds[i].size(); ++p) {
      std::int32_t cls = preds[i][p];
      if (cls < 0 || cls >= num_classes)
        throw UsageError("filter_pseudo_labels: prediction out of range");
      cand[static_cast<std::size_t>(cls)].push_back(
          {confidence[i][p], static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(p)});
    }
  }
  for (int cls = 0; cls < num_classes; ++cls) {
    auto& v = cand[static_cast<std::size_t>(cls)];
    std::sort(v.begin(), v.end(), [](const Cand& a, const Cand& b) {
      if (a.conf != b.conf) return a.conf > b.conf;
      if (a.sample != b.sample) return a.sample < b.sample;
      return a.point < b.point;
    });
    std::size_t keep =
        static_cast<std::size_t>(std::floor(keep_fraction * static_cast<double>(v.size()) + 0.5));
    for (std::size_t k = 0; k < keep && k < v.size(); ++k)
      out[v[k].sample][v[k].point] = cls;
  }
  return out;
}

std::string resolve_dataset_path(const std::string& path) {
  if (fs::is_directory(path)) return (fs::path(path) / "data.mm23").string();
  return path;
}

Dataset load_dataset_any(const std::string& path) {
  return load_dataset(resolve_dataset_path(path));
}

TrainResult train_model(const TrainConfig& cfg, TrainMode mode, const std::string& out_dir,
                        const PseudoLabelSet* pseudo) {
  cfg.weights.validate();
  if (mode == TrainMode::adapt && cfg.target_path.empty())
    throw UsageError("adapt requires [data] target in the config");
  // Requesting the pseudo-label term explicitly without providing labels
  // is a configuration error; the default lambda_t is simply unused in
  // round 1.
  if (mode == TrainMode::adapt && cfg.lambda_t_explicit && cfg.weights.lambda_t > 0 && !pseudo)
    throw UsageError("config sets lambda_t > 0 but no pseudo-label file was given");

  Dataset source = load_dataset_any(cfg.source_path);
  if (source.size() == 0) throw DataError("source dataset is empty");
  Dataset target;
  if (mode == TrainMode::adapt) {
    target = load_dataset_any(cfg.target_path);
    if (target.size() == 0) throw DataError("target dataset is empty");
    if (pseudo && pseudo->size() != target.size())
      throw DataError("pseudo-label set covers " + std::to_string(pseudo->size()) +
                      " samples but the target dataset has " + std::to_string(target.size()));
  }

  fs::create_directories(out_dir);
  std::ofstream log(fs::path(out_dir) / "metrics.log");
  if (!log) throw DataError("cannot open metrics log in " + out_dir);

  Model model(cfg.model, cfg.seed);
  AdamW opt(model.parameters(), cfg.weight_decay);

  std::size_t b = static_cast<std::size_t>(cfg.batch_size);
  std::size_t pool = std::max(source.size(), target.size());
  std::int64_t steps_per_epoch = static_cast<std::int64_t>((pool + b - 1) / b);
  std::int64_t total_steps = steps_per_epoch * cfg.epochs;

  Rng order_rng = Rng(cfg.seed).fork(0xBA7C4);
  Rng aug_rng = Rng(cfg.seed).fork(0xA06);

  TrainResult result;
  result.steps = total_steps;
  char line[512];

  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> src_order =
        epoch_order(source.size(), static_cast<std::size_t>(steps_per_epoch) * b,
                    order_rng.fork(static_cast<std::uint64_t>(epoch), 0));
    std::vector<std::size_t> tgt_order;
    if (mode == TrainMode::adapt)
      tgt_order = epoch_order(target.size(), static_cast<std::size_t>(steps_per_epoch) * b,
                              order_rng.fork(static_cast<std::uint64_t>(epoch), 1));

    for (std::int64_t es = 0; es < steps_per_epoch; ++es, ++step) {
      double lr = one_cycle_lr(step, total_steps, cfg.lr_peak, cfg.lr_floor, cfg.warmup_frac);

      // Batch assembly; independent per slot, parallel when asked.
      std::size_t n_items = b * (mode == TrainMode::adapt ? 2 : 1);
      std::vector<Prepared> items(n_items);
      parallel_for(n_items, cfg.threads, [&](std::size_t slot) {
        bool is_target = slot >= b;
        std::size_t k = slot % b;
        std::size_t pos = static_cast<std::size_t>(es) * b + k;
        if (is_target) {
          std::size_t idx = tgt_order[pos];
          items[slot] = prepare(target.samples[idx],
                                aug_rng.fork(static_cast<std::uint64_t>(epoch),
                                             static_cast<std::uint64_t>(es), slot),
                                true);
          if (pseudo) {
            items[slot].pl2d = &pseudo->labels_2d[idx];
            items[slot].pl3d = &pseudo->labels_3d[idx];
            items[slot].plavg = &pseudo->labels_avg[idx];
          }
        } else {
          items[slot] = prepare(source.samples[src_order[pos]],
                                aug_rng.fork(static_cast<std::uint64_t>(epoch),
                                             static_cast<std::uint64_t>(es), slot),
                                true);
        }
      });

      std::vector<Tensor> terms;
      StepStats stats;
      for (std::size_t slot = 0; slot < n_items; ++slot) {
        if (slot < b)
          source_terms(model, items[slot], cfg.weights, cfg.detach_xm_target, terms, stats);
        else
          target_terms(model, items[slot], cfg.weights, cfg.detach_xm_target, terms, stats);
      }
      Tensor total = scale(add_scalars(terms), 1.0f / static_cast<float>(b));
      double loss = total.item();
      if (!std::isfinite(loss)) {
        std::snprintf(line, sizeof line,
                      "NaN/inf loss at step %lld (epoch %d): seg_src=%.6g xm_src=%.6g "
                      "xm_tgt=%.6g seg_pl=%.6g lr=%.3g",
                      static_cast<long long>(step), epoch, stats.seg_src, stats.xm_src,
                      stats.xm_tgt, stats.seg_pl, lr);
        throw NumericError(line);
      }
      backward(total);
      opt.step(lr);
      opt.zero_grad();

      if (step == 0) result.first_loss = loss;
      result.final_loss = loss;
      if (step % std::max(1, cfg.log_every) == 0 || step + 1 == total_steps) {
        std::snprintf(line, sizeof line,
                      "step=%lld epoch=%d split=train lr=%.6g loss=%.6g seg_src=%.6g "
                      "xm_src=%.6g xm_tgt=%.6g seg_pl=%.6g\n",
                      static_cast<long long>(step), epoch, lr, loss,
                      stats.seg_src / static_cast<double>(b), stats.xm_src / static_cast<double>(b),
                      stats.xm_tgt / static_cast<double>(b), stats.seg_pl / static_cast<double>(b));
        log << line;
        log.flush();
      }
    }
  }

  result.checkpoint_path = (fs::path(out_dir) / "checkpoint.mmck").string();
  save_checkpoint(model.named_tensors(), result.checkpoint_path);
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

struct StreamPreds {
  std::vector<std::int32_t> p2d, p3d, avg, fusion;
};

StreamPreds predict_sample(const Model& model, const Sample& s) {
  NoGradGuard ng;
  Prepared p = prepare(s, Rng(0), false);
  BranchOutput o2 = model.forward_2d(p.a2.image, p.a2.depth, p.a2.px, p.a2.py, p.a2.in_bounds);
  Branch3DOutput o3 = model.forward_3d(p.positions, s.cloud.colors);
  Tensor p2 = softmax(o2.main_logits);
  Tensor p3 = softmax(o3.main_logits);
  Tensor pavg = fuse(p2, p3);

  int c = p2.dim(1);
  auto argmax_rows = [c](const Tensor& t) {
    std::vector<std::int32_t> out(static_cast<std::size_t>(t.dim(0)));
    const float* d = t.data();
    for (int r = 0; r < t.dim(0); ++r) {
      int best = 0;
      float bv = d[static_cast<std::size_t>(r) * c];
      for (int k = 1; k < c; ++k) {
        float v = d[static_cast<std::size_t>(r) * c + k];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      out[static_cast<std::size_t>(r)] = best;
    }
    return out;
  };

  StreamPreds preds;
  preds.p2d = argmax_rows(p2);
  preds.p3d = argmax_rows(p3);
  preds.avg = argmax_rows(pavg);
  if (model.config().fusion_head) {
    Tensor pf = softmax(model.forward_fusion(o2.point_features, o3.point_features));
    preds.fusion = argmax_rows(pf);
  }
  return preds;
}

}  // namespace

EvalReport evaluate_model(const Model& model, const Dataset& data, int threads) {
  int c = model.config().num_classes;
  bool fusion = model.config().fusion_head;
  std::vector<StreamPreds> preds(data.size());
  parallel_for(data.size(), threads,
               [&](std::size_t i) { preds[i] = predict_sample(model, data.samples[i]); });

  ConfusionMatrix m2(c), m3(c), ma(c), mf(c);
  std::size_t labeled = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& truth = data.samples[i].cloud.labels;
    for (auto l : truth)
      if (l >= 0) ++labeled;
    m2.add_many(truth, preds[i].p2d);
    m3.add_many(truth, preds[i].p3d);
    ma.add_many(truth, preds[i].avg);
    if (fusion) mf.add_many(truth, preds[i].fusion);
  }
  if (labeled == 0) throw UsageError("evaluate: dataset has no labeled points");

  EvalReport r;
  r.num_classes = c;
  r.points = labeled;
  r.s2d = {m2.iou(), m2.miou()};
  r.s3d = {m3.iou(), m3.miou()};
  r.avg = {ma.iou(), ma.miou()};
  if (fusion) {
    r.fusion = {mf.iou(), mf.miou()};
    r.has_fusion = true;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Pseudo labels

PseudoLabelSet generate_pseudo_labels(const Model& model, const Dataset& target,
                                      double keep_fraction) {
  if (target.size() == 0) throw UsageError("generate_pseudo_labels: empty target set");
  if (keep_fraction <= 0 || keep_fraction > 1)
    throw UsageError("generate_pseudo_labels: keep_fraction must be in (0,1]");
  int c = model.config().num_classes;

  // Per stream: argmax predictions and max-softmax confidences.
  std::vector<std::vector<std::int32_t>> preds[3];
  std::vector<std::vector<float>> confs[3];
  for (int st = 0; st < 3; ++st) {
    preds[st].resize(target.size());
    confs[st].resize(target.size());
  }

  NoGradGuard ng;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const Sample& s = target.samples[i];
    Prepared p = prepare(s, Rng(0), false);
    BranchOutput o2 = model.forward_2d(p.a2.image, p.a2.depth, p.a2.px, p.a2.py, p.a2.in_bounds);
    Branch3DOutput o3 = model.forward_3d(p.positions, s.cloud.colors);
    Tensor probs[3];
    probs[0] = softmax(o2.main_logits);
    probs[1] = softmax(o3.main_logits);
    probs[2] = fuse(probs[0], probs[1]);
    std::size_t n = s.cloud.size();
    for (int st = 0; st < 3; ++st) {
      preds[st][i].resize(n);
      confs[st][i].resize(n);
      const float* d = probs[st].data();
      for (std::size_t pt = 0; pt < n; ++pt) {
        int best = 0;
        float bv = d[pt * static_cast<std::size_t>(c)];
        for (int k = 1; k < c; ++k) {
          float v = d[pt * static_cast<std::size_t>(c) + k];
          if (v > bv) {
            bv = v;
            best = k;
          }
        }
        preds[st][i][pt] = best;
        confs[st][i][pt] = bv;
      }
    }
  }

  PseudoLabelSet ps;
  ps.keep_fraction = static_cast<float>(keep_fraction);
  ps.labels_2d = filter_pseudo_labels(preds[0], confs[0], c, keep_fraction);
  ps.labels_3d = filter_pseudo_labels(preds[1], confs[1], c, keep_fraction);
  ps.labels_avg = filter_pseudo_labels(preds[2], confs[2], c, keep_fraction);
  return ps;
}

}  // namespace mm
