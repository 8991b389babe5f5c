#pragma once

#include <cstddef>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntta/tensor.hpp"

namespace ntta::nn {

inline constexpr int kIgnoreLabel = 255;

enum class BnMode { train, eval, adapt };

/// 2-D cross-correlation layer; weight is out_c x in_c x kh x kw.
struct Conv2D {
  Tensor weight;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  /// He-normal weights (std = sqrt(2 / fan_in)), zero bias.
  static Conv2D make(std::size_t in_c, std::size_t out_c, std::size_t kernel, std::size_t stride,
                     std::size_t padding, std::mt19937_64& rng);
  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }
};

/// Per-channel batch normalization with affine scale and shift.
///
/// train: batch statistics, running statistics updated with `momentum`.
/// eval:  running statistics, nothing mutated.
/// adapt: batch statistics, running statistics frozen.
struct BatchNorm2D {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double eps = 1e-5;
  double momentum = 0.1;
  BnMode mode = BnMode::train;

  BatchNorm2D() = default;
  explicit BatchNorm2D(std::size_t channels);
  std::size_t channels() const { return gamma.numel(); }
};

struct DenseLayer {
  Tensor weight;  // out x in
  Tensor bias;    // out

  static DenseLayer make(std::size_t in, std::size_t out, std::mt19937_64& rng);
};

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding);
Tensor conv2d_forward(const Conv2D& layer, const Tensor& x);
Tensor batchnorm2d_forward(BatchNorm2D& layer, const Tensor& x);
Tensor dense_forward(const DenseLayer& layer, const Tensor& x);

enum class Activation { relu, sigmoid };
Tensor activation(Activation kind, const Tensor& x);
inline Tensor relu(const Tensor& x) { return activation(Activation::relu, x); }
inline Tensor sigmoid(const Tensor& x) { return activation(Activation::sigmoid, x); }

enum class Resize { maxpool2, global_maxpool, nearest_upsample2 };
Tensor pool_and_resize(Resize kind, const Tensor& x);
inline Tensor maxpool2(const Tensor& x) { return pool_and_resize(Resize::maxpool2, x); }
inline Tensor global_maxpool(const Tensor& x) { return pool_and_resize(Resize::global_maxpool, x); }
inline Tensor upsample2(const Tensor& x) { return pool_and_resize(Resize::nearest_upsample2, x); }

/// Zero-pads an NCHW tensor at the bottom and right edges.
Tensor pad_bottom_right(const Tensor& x, std::size_t extra_h, std::size_t extra_w);
/// Keeps the top-left h x w window of an NCHW tensor.
Tensor crop_top_left(const Tensor& x, std::size_t h, std::size_t w);

Tensor log_softmax(const Tensor& x, std::size_t axis);
Tensor softmax(const Tensor& x, std::size_t axis);

/// Mean over non-ignored pixels of -log_softmax(logits)[label]. Labels are an
/// N x H x W tensor of class indices or kIgnoreLabel.
Tensor cross_entropy(const Tensor& logits, const Tensor& labels);

// ---- checkpoints -----------------------------------------------------------

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Writes `path` (concatenated NTT1 blobs) and `path` + ".json" (index with
/// byte offsets and shapes plus the architecture descriptor).
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors,
                     const nlohmann::json& architecture);

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  nlohmann::json architecture;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ntta::nn
