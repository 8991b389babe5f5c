#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntta/tensor.hpp"

namespace ntta {

/// C x C pixel tally, rows = ground truth, columns = prediction. Pixels whose
/// ground truth is the ignore label are skipped.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0);

  std::size_t classes() const { return classes_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * classes_ + pred]; }
  std::uint64_t total() const;

  /// pred and gt hold class indices (gt may also hold the ignore label).
  void accumulate(const Tensor& pred, const Tensor& gt);
  void accumulate(std::span<const int> pred, std::span<const int> gt);
  void merge(const ConfusionMatrix& other);

  /// TP / (TP + FP + FN); empty when the class is absent from both gt and pred.
  std::optional<double> iou(std::size_t k) const;
  /// Mean of the defined per-class IoUs.
  double miou() const;

  bool operator==(const ConfusionMatrix& o) const = default;

  nlohmann::json to_json() const;
  static ConfusionMatrix from_json(const nlohmann::json& j);

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

/// {per_class_iou: {name: value|null}, miou, pixel_count}
nlohmann::json metrics_report(const ConfusionMatrix& cm, const std::vector<std::string>& class_names);

/// Fixed column order: miou, pixel_count, then iou_<name> per class.
std::string metrics_csv_header(const std::vector<std::string>& class_names);
std::string metrics_csv_row(const ConfusionMatrix& cm);

}  // namespace ntta
