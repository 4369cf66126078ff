#pragma once

// Confusion-matrix bookkeeping and IoU. Rows are ground truth, columns
// are predictions; ignore-labeled points are never counted.

#include <cstdint>
#include <string>
#include <vector>

namespace mm {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  void add(int truth, int prediction);
  void add_many(const std::vector<std::int32_t>& truth, const std::vector<std::int32_t>& pred);

  std::int64_t at(int truth, int prediction) const;
  std::int64_t total() const;
  int num_classes() const { return num_classes_; }

  // IoU_c = TP / (TP + FP + FN); NaN for classes absent from both.
  std::vector<double> iou() const;

  // Mean over classes present in the ground truth only.
  double miou() const;

 private:
  int num_classes_;
  std::vector<std::int64_t> counts_;
};

struct StreamScores {
  std::vector<double> iou;  // per class, NaN when undefined
  double miou = 0;
};

struct EvalReport {
  StreamScores s2d, s3d, avg;
  StreamScores fusion;     // only meaningful when has_fusion
  bool has_fusion = false;
  int num_classes = 0;
  std::size_t points = 0;

  std::string to_table(const std::vector<std::string>& class_names) const;
};

}  // namespace mm
