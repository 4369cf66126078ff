#include "metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "common.hpp"

namespace mm {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : num_classes_(num_classes),
      counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
  if (num_classes < 1) throw UsageError("confusion matrix needs at least one class");
}

void ConfusionMatrix::add(int truth, int prediction) {
  if (truth < 0) return;  // ignore label
  if (truth >= num_classes_ || prediction < 0 || prediction >= num_classes_)
    throw UsageError("confusion matrix: label out of range");
  ++counts_[static_cast<std::size_t>(truth) * num_classes_ + prediction];
}

void ConfusionMatrix::add_many(const std::vector<std::int32_t>& truth,
                               const std::vector<std::int32_t>& pred) {
  if (truth.size() != pred.size()) throw UsageError("confusion matrix: size mismatch");
  for (std::size_t i = 0; i < truth.size(); ++i) add(truth[i], pred[i]);
}

std::int64_t ConfusionMatrix::at(int truth, int prediction) const {
  return counts_[static_cast<std::size_t>(truth) * num_classes_ + prediction];
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (auto v : counts_) t += v;
  return t;
}

std::vector<double> ConfusionMatrix::iou() const {
  std::vector<double> out(static_cast<std::size_t>(num_classes_));
  for (int c = 0; c < num_classes_; ++c) {
    std::int64_t tp = at(c, c);
    std::int64_t fp = 0, fn = 0;
    for (int o = 0; o < num_classes_; ++o) {
      if (o == c) continue;
      fp += at(o, c);
      fn += at(c, o);
    }
    std::int64_t denom = tp + fp + fn;
    out[static_cast<std::size_t>(c)] =
        denom > 0 ? static_cast<double>(tp) / static_cast<double>(denom)
                  : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

double ConfusionMatrix::miou() const {
  std::vector<double> per_class = iou();
  double sum = 0;
  int present = 0;
  for (int c = 0; c < num_classes_; ++c) {
    std::int64_t gt = 0;
    for (int o = 0; o < num_classes_; ++o) gt += at(c, o);
    if (gt == 0) continue;  // class absent from ground truth
    ++present;
    double v = per_class[static_cast<std::size_t>(c)];
    sum += std::isnan(v) ? 0.0 : v;
  }
  return present > 0 ? sum / present : 0.0;
}

std::string EvalReport::to_table(const std::vector<std::string>& class_names) const {
  std::ostringstream os;
  char buf[64];
  auto cell = [&](const std::string& s) {
    std::snprintf(buf, sizeof buf, "%12s", s.c_str());
    return std::string(buf);
  };
  auto pct = [&](double v) -> std::string {
    if (std::isnan(v)) return cell("-");
    std::snprintf(buf, sizeof buf, "%12.1f", 100.0 * v);
    return buf;
  };
  os << cell("stream");
  for (int c = 0; c < num_classes; ++c) {
    std::string name = c < static_cast<int>(class_names.size()) ? class_names[static_cast<std::size_t>(c)]
                                                                : "class" + std::to_string(c);
    os << cell(name);
  }
  os << cell("mIoU") << "\n";
  auto row = [&](const char* name, const StreamScores& s) {
    os << cell(name);
    for (int c = 0; c < num_classes; ++c) os << pct(s.iou[static_cast<std::size_t>(c)]);
    os << pct(s.miou) << "\n";
  };
  row("2D", s2d);
  row("3D", s3d);
  row("Avg", avg);
  if (has_fusion) row("Fusion", fusion);
  return os.str();
}

}  // namespace mm
