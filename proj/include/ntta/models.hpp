#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntta/nn.hpp"
#include "ntta/tensor.hpp"

namespace ntta {

enum class Modality { color, thermal, interaction };
enum class Region { encoder, decoder, both };
enum class ParamSubset { all, bn_affine_only };

inline constexpr std::size_t kNumBranches = 3;
/// Branch order used everywhere: color, thermal, interaction.
inline constexpr std::array<Modality, kNumBranches> kBranchOrder = {
    Modality::color, Modality::thermal, Modality::interaction};

std::string to_string(Modality m);
std::string to_string(Region r);
Modality modality_from_string(const std::string& s);
Region region_from_string(const std::string& s);

struct ModelConfig {
  std::size_t classes = 5;
  std::size_t width = 8;
  std::size_t depth = 2;
  std::uint64_t seed = 0;
  bool use_cmsa = true;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// conv3x3 -> batch norm -> relu
struct ConvBlock {
  nn::Conv2D conv;
  nn::BatchNorm2D bn;

  static ConvBlock make(std::size_t in_c, std::size_t out_c, std::mt19937_64& rng);
  Tensor forward(const Tensor& x);
};

/// Cross-modal shared attention. Each modality has its own projection; the
/// projections are summed and passed through a shared layer and a sigmoid to
/// form one gate used by both modalities.
struct CMSAModule {
  nn::DenseLayer channel_color;
  nn::DenseLayer channel_thermal;
  nn::DenseLayer channel_shared;
  nn::Conv2D spatial_color;    // 1x1, C -> 1
  nn::Conv2D spatial_thermal;  // 1x1, C -> 1
  nn::Conv2D spatial_shared;   // 1x1, 1 -> 1

  static CMSAModule make(std::size_t channels, std::mt19937_64& rng);
};

struct CmsaOutput {
  Tensor color;
  Tensor thermal;
  Tensor channel_gate;  // N x C x 1 x 1, values in [0, 1]
  Tensor spatial_gate;  // N x 1 x H x W, values in [0, 1]
};

/// Channel rectification F' = V_c * F + F on both modalities, then spatial
/// rectification F'' = V_s * F' + F' with V_s computed from the F' pair.
CmsaOutput cmsa_forward(const CMSAModule& m, const Tensor& f_color, const Tensor& f_thermal);

enum class TensorRole { weight, bias, bn_gamma, bn_beta, bn_running_mean, bn_running_var };

struct StateEntry {
  std::string name;
  Tensor* tensor;
  TensorRole role;
  Region region;  // encoder or decoder

  bool is_parameter() const {
    return role != TensorRole::bn_running_mean && role != TensorRole::bn_running_var;
  }
  bool is_bn_affine() const { return role == TensorRole::bn_gamma || role == TensorRole::bn_beta; }
};

/// One student network: encoder(s), optional CMSA, decoder, 1x1 classifier.
class BranchModel {
 public:
  static BranchModel make(Modality modality, const ModelConfig& cfg, std::mt19937_64& rng);

  Modality modality() const { return modality_; }
  const ModelConfig& config() const { return cfg_; }
  bool uses_cmsa() const { return cmsa_.has_value() && cfg_.use_cmsa; }

  /// Logits N x classes x H x W. Inputs whose spatial size is not a multiple
  /// of 2^depth are zero-padded on the bottom/right and the logits cropped back.
  Tensor forward(const std::optional<Tensor>& color, const std::optional<Tensor>& thermal);

  void set_bn_mode(nn::BnMode mode);
  /// Drops the attention module; the interaction branch then concatenates
  /// the raw encoder features.
  void disable_cmsa();
  std::vector<StateEntry> state();
  std::vector<Tensor> collect_params(ParamSubset subset, Region region);
  std::size_t parameter_count();
  /// Deep copy; no tensor storage is shared with the original.
  BranchModel clone() const;

  CMSAModule* cmsa() { return cmsa_ ? &*cmsa_ : nullptr; }
  std::vector<ConvBlock>& encoder(std::size_t i) { return encoders_.at(i); }
  std::vector<ConvBlock>& decoder() { return decoder_; }
  nn::Conv2D& classifier() { return classifier_; }

 private:
  Tensor encode(std::size_t which, const Tensor& x);
  Modality modality_ = Modality::color;
  ModelConfig cfg_;
  std::vector<std::vector<ConvBlock>> encoders_;
  std::optional<CMSAModule> cmsa_;
  std::vector<ConvBlock> decoder_;
  nn::Conv2D classifier_;
};

Tensor branch_forward(BranchModel& b, const std::optional<Tensor>& x_color,
                      const std::optional<Tensor>& x_thermal);

std::vector<Tensor> collect_params(BranchModel& b, ParamSubset subset, Region region);

/// Closed-form trainable parameter counts for the architecture.
struct ParamCountReport {
  std::size_t color = 0;
  std::size_t thermal = 0;
  std::size_t interaction = 0;
  nlohmann::json to_json() const;
};
ParamCountReport closed_form_param_counts(const ModelConfig& cfg);

struct ModelSuite {
  ModelConfig config;
  std::vector<BranchModel> branches;  // kBranchOrder

  BranchModel& branch(Modality m);
  ModelSuite clone() const;
  void set_bn_mode(nn::BnMode mode);
  /// Every tensor of all branches, names prefixed by the branch name.
  std::vector<StateEntry> state();
  std::vector<nn::NamedTensor> named_tensors();
  nlohmann::json architecture() const;
  void save(const std::filesystem::path& path);
  static ModelSuite load(const std::filesystem::path& path);
};

struct SuiteBuild {
  ModelSuite suite;
  ParamCountReport counts;
};

/// He-initialized three-branch suite; BN gamma = 1, beta = 0.
SuiteBuild build_model_suite(const ModelConfig& cfg);

}  // namespace ntta
