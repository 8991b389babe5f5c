#include "ntta/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <vector>

#include "ntta/nn.hpp"
#include "ntta/tensor_io.hpp"

namespace ntta {

std::string to_string(FusionStrategy s) {
  switch (s) {
    case FusionStrategy::eef: return "eef";
    case FusionStrategy::merge: return "merge";
    case FusionStrategy::ie: return "ie";
  }
  return "?";
}

FusionStrategy fusion_strategy_from_string(const std::string& s) {
  if (s == "eef") return FusionStrategy::eef;
  if (s == "merge") return FusionStrategy::merge;
  if (s == "ie") return FusionStrategy::ie;
  throw ValueError("unknown fusion strategy '" + s + "'");
}

void FusionConfig::validate() const {
  if (!(temp > 0.0) || !std::isfinite(temp)) throw ValueError("fusion temperature must be positive");
}

Tensor pixel_entropy(const Tensor& logits) {
  if (logits.rank() != 4 || logits.dim(1) < 2) {
    throw ShapeError("pixel_entropy expects N x C x H x W with C >= 2, got " + shape_str(logits.shape()));
  }
  const Tensor lp = nn::log_softmax(logits, 1);
  const Tensor p = nn::softmax(logits, 1);
  return -sum(p * lp, {1}, true);
}

Tensor eef_weights(std::span<const Tensor> entropies, double temp) {
  if (!(temp > 0.0) || !std::isfinite(temp)) throw ValueError("fusion temperature must be positive");
  if (entropies.empty()) throw ValueError("eef_weights needs at least one entropy map");
  for (const auto& h : entropies) {
    if (h.shape() != entropies[0].shape()) {
      throw ShapeError("entropy maps differ in shape: " + shape_str(h.shape()) + " vs " +
                       shape_str(entropies[0].shape()));
    }
  }
  const Tensor stacked = stack(entropies);
  return nn::softmax((-stacked + 1.0) / temp, 0);
}

namespace {

// K x N x 1 x H x W (or K x N x 1 x 1 x 1) -> K x N x H x W
Tensor squeeze_weights(const Tensor& w, std::size_t h, std::size_t wd) {
  const std::size_t k = w.dim(0), n = w.dim(1);
  Tensor out = reshape(w, {k, n, w.dim(3), w.dim(4)});
  if (out.dim(2) != h || out.dim(3) != wd) out = out * Tensor({1, 1, h, wd}, 1.0);
  return out;
}

}  // namespace

FusionOutput eef_fuse(std::span<const Tensor> logits, const FusionConfig& cfg) {
  cfg.validate();
  if (logits.empty()) throw ValueError("eef_fuse needs at least one branch");
  for (const auto& y : logits) {
    if (y.shape() != logits[0].shape()) {
      throw ShapeError("branch logits differ in shape: " + shape_str(y.shape()) + " vs " +
                       shape_str(logits[0].shape()));
    }
  }
  if (logits[0].rank() != 4) throw ShapeError("eef_fuse expects N x C x H x W logits");
  const std::size_t k = logits.size(), n = logits[0].dim(0), h = logits[0].dim(2), w = logits[0].dim(3);

  std::vector<Tensor> ent;
  ent.reserve(k);
  for (const auto& y : logits) ent.push_back(pixel_entropy(y));

  FusionOutput out;
  out.per_branch_entropy = reshape(stack(ent), {k, n, h, w});

  if (cfg.strategy == FusionStrategy::merge) {
    Tensor total = logits[0];
    for (std::size_t i = 1; i < k; ++i) total = total + logits[i];
    out.teacher_logits = total / static_cast<double>(k);
    out.weights = Tensor({k, n, h, w}, 1.0 / static_cast<double>(k));
    return out;
  }

  Tensor stacked_w;
  if (cfg.strategy == FusionStrategy::ie) {
    std::vector<Tensor> image_ent;
    for (const auto& e : ent) image_ent.push_back(mean(e, {2, 3}, true));
    stacked_w = eef_weights(image_ent, cfg.temp);
  } else {
    stacked_w = eef_weights(ent, cfg.temp);
  }
  Tensor teacher = take(stacked_w, 0, 0) * logits[0];
  for (std::size_t i = 1; i < k; ++i) teacher = teacher + take(stacked_w, 0, i) * logits[i];
  out.teacher_logits = teacher;
  out.weights = squeeze_weights(stacked_w, h, w);
  return out;
}

Tensor fusion_gradient_mode(const FusionOutput& out, GradientMode mode) {
  return mode == GradientMode::full ? out.teacher_logits : out.teacher_logits.detach();
}

void write_weight_pgm(const std::filesystem::path& path, const Tensor& weights, std::size_t branch,
                      std::size_t image) {
  if (weights.rank() != 4 || branch >= weights.dim(0) || image >= weights.dim(1)) {
    throw ShapeError("weight map index out of range for " + shape_str(weights.shape()));
  }
  const std::size_t h = weights.dim(2), w = weights.dim(3);
  const std::size_t base = (branch * weights.dim(1) + image) * h * w;
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot create " + path.string());
  f << "P5\n" << w << ' ' << h << "\n255\n";
  for (std::size_t i = 0; i < h * w; ++i) {
    const double v = std::clamp(weights[base + i], 0.0, 1.0);
    f.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  }
  if (!f) throw IoError("write failed for " + path.string());
}

}  // namespace ntta
