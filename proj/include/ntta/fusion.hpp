#pragma once

#include <filesystem>
#include <span>
#include <string>

#include "ntta/tensor.hpp"

namespace ntta {

enum class FusionStrategy { eef, merge, ie };
enum class GradientMode { full, stop_teacher };

std::string to_string(FusionStrategy s);
FusionStrategy fusion_strategy_from_string(const std::string& s);

struct FusionConfig {
  double temp = 2.0;
  FusionStrategy strategy = FusionStrategy::eef;

  void validate() const;
};

struct FusionOutput {
  Tensor weights;             // K x N x H x W
  Tensor teacher_logits;      // N x C x H x W
  Tensor per_branch_entropy;  // K x N x H x W
};

/// Shannon entropy -sum p ln p of the channel softmax, N x 1 x H x W.
Tensor pixel_entropy(const Tensor& logits);

/// Softmax over branches of (1 - H_i) / temp. Each map is N x 1 x H x W (or any
/// common shape); the result stacks the weights on a new leading axis.
Tensor eef_weights(std::span<const Tensor> entropies, double temp);

/// Teacher logits sum_i W_i * y_i for K same-shaped N x C x H x W logits.
FusionOutput eef_fuse(std::span<const Tensor> logits, const FusionConfig& cfg);

/// full: the teacher as computed; stop_teacher: a constant copy.
Tensor fusion_gradient_mode(const FusionOutput& out, GradientMode mode);

/// 8-bit binary PGM of weights[branch, image], value round(255 * w).
void write_weight_pgm(const std::filesystem::path& path, const Tensor& weights, std::size_t branch,
                      std::size_t image);

}  // namespace ntta
