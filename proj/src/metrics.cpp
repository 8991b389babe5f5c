#include "ntta/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

#include "ntta/nn.hpp"

namespace ntta {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

void ConfusionMatrix::accumulate(std::span<const int> pred, std::span<const int> gt) {
  if (pred.size() != gt.size()) throw ShapeError("prediction and ground truth sizes differ");
  const int c = static_cast<int>(classes_);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == nn::kIgnoreLabel) continue;
    if (gt[i] < 0 || gt[i] >= c) throw ValueError("ground-truth label " + std::to_string(gt[i]) + " out of range");
    if (pred[i] < 0 || pred[i] >= c) throw ValueError("predicted label " + std::to_string(pred[i]) + " out of range");
    ++counts_[static_cast<std::size_t>(gt[i]) * classes_ + static_cast<std::size_t>(pred[i])];
  }
}

void ConfusionMatrix::accumulate(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError("prediction " + shape_str(pred.shape()) + " and ground truth " + shape_str(gt.shape()) +
                     " differ");
  }
  auto to_int = [](const Tensor& t) {
    std::vector<int> v(t.numel());
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double d = t[i];
      if (d != std::floor(d)) throw ValueError("label maps must hold integers");
      v[i] = static_cast<int>(d);
    }
    return v;
  };
  const auto p = to_int(pred), g = to_int(gt);
  accumulate(p, g);
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw ShapeError("cannot merge confusion matrices of different class counts");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::optional<double> ConfusionMatrix::iou(std::size_t k) const {
  if (k >= classes_) throw ValueError("class index out of range");
  const std::uint64_t tp = at(k, k);
  std::uint64_t fp = 0, fn = 0;
  for (std::size_t j = 0; j < classes_; ++j) {
    if (j == k) continue;
    fp += at(j, k);
    fn += at(k, j);
  }
  const std::uint64_t denom = tp + fp + fn;
  if (denom == 0) return std::nullopt;
  return static_cast<double>(tp) / static_cast<double>(denom);
}

double ConfusionMatrix::miou() const {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < classes_; ++k) {
    if (auto v = iou(k)) {
      s += *v;
      ++n;
    }
  }
  if (n == 0) throw ValueError("mIoU undefined: no class appears in ground truth or prediction");
  return s / static_cast<double>(n);
}

nlohmann::json ConfusionMatrix::to_json() const {
  return {{"classes", classes_}, {"counts", counts_}};
}

ConfusionMatrix ConfusionMatrix::from_json(const nlohmann::json& j) {
  ConfusionMatrix cm(j.at("classes").get<std::size_t>());
  cm.counts_ = j.at("counts").get<std::vector<std::uint64_t>>();
  if (cm.counts_.size() != cm.classes_ * cm.classes_) throw ValueError("confusion matrix size mismatch");
  return cm;
}

nlohmann::json metrics_report(const ConfusionMatrix& cm, const std::vector<std::string>& class_names) {
  if (class_names.size() != cm.classes()) throw ValueError("class name count does not match the matrix");
  nlohmann::json per = nlohmann::json::object();
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    const auto v = cm.iou(k);
    per[class_names[k]] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  }
  return {{"per_class_iou", per}, {"miou", cm.miou()}, {"pixel_count", cm.total()}};
}

std::string metrics_csv_header(const std::vector<std::string>& class_names) {
  std::string s = "miou,pixel_count";
  for (const auto& n : class_names) s += ",iou_" + n;
  return s;
}

std::string metrics_csv_row(const ConfusionMatrix& cm) {
  std::string s = fmt(cm.miou()) + "," + std::to_string(cm.total());
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    const auto v = cm.iou(k);
    s += "," + (v ? fmt(*v) : std::string());
  }
  return s;
}

}  // namespace ntta
