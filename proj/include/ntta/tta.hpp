#pragma once

#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntta/fusion.hpp"
#include "ntta/metrics.hpp"
#include "ntta/models.hpp"
#include "ntta/scenes.hpp"

namespace ntta {

enum class OptimizerKind { sgd, adam };
/// batch: BN normalizes with the current batch; running: with the stored
/// source statistics (only the affine parameters adapt).
enum class BnStatistics { batch, running };

struct LossMask {
  bool branch = true;    // per-branch Shannon entropy
  bool ensemble = true;  // entropy of the teacher
  bool kl = true;        // distillation toward the teacher
};

struct AdaptConfig {
  double lr = 1e-5;
  double temp = 2.0;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  std::size_t batch_size = 8;
  std::size_t epochs = 1;
  Region region = Region::decoder;
  LossMask loss_mask;
  bool dynamic_weighting = true;
  OptimizerKind optimizer = OptimizerKind::sgd;
  FusionStrategy fusion = FusionStrategy::eef;
  BnStatistics bn_statistics = BnStatistics::batch;
  std::vector<Modality> branches{kBranchOrder.begin(), kBranchOrder.end()};
  /// Batch size 1 normally fails validation; when set, BN falls back to
  /// per-image spatial statistics.
  bool allow_single_sample = false;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
  FusionConfig fusion_config() const { return {temp, fusion}; }
  nlohmann::json to_json() const;
  static AdaptConfig from_json(const nlohmann::json& j);
};

std::string to_string(OptimizerKind o);
std::string to_string(BnStatistics b);

/// Mean pixel entropy of the channel softmax.
Tensor shannon_loss(const Tensor& logits);

/// Mean over pixels of KL(teacher || student); the teacher is treated as a
/// constant.
Tensor kl_to_teacher(const Tensor& student_logits, const Tensor& teacher_logits);

/// Per-pixel symmetric KL, averaged spatially within each sample, then over
/// the batch.
double branch_distance(const Tensor& branch_logits, const Tensor& teacher_logits);

/// D_i / min D; all ones when min D < 1e-12.
std::vector<double> dynamic_weights(std::span<const double> distances);

struct ObjectiveTerms {
  Tensor total;
  std::vector<double> branch;  // L_i
  double ensemble = 0.0;       // L_EN
  std::vector<double> kl;      // KL_i
};

/// sum_i w_i L_i + lambda1 L_EN + lambda2 sum_i w_i KL_i with masked terms
/// contributing exactly zero.
ObjectiveTerms tta_objective(std::span<const Tensor> logits, const FusionOutput& fusion, const AdaptConfig& cfg,
                             std::span<const double> omega);

struct StepRecord {
  std::size_t step = 0;
  double total = 0.0;
  std::vector<double> branch, kl, omega, distance;
  double ensemble = 0.0;
  nlohmann::json to_json() const;
};

struct AdaptationState {
  std::size_t step = 0;
  std::vector<double> omega;
  std::vector<StepRecord> log;
  std::vector<Tensor> trainable;
  std::map<const void*, std::vector<double>> adam_m, adam_v;
};

/// Sets every branch's BN layers for test-time use under `cfg`.
void set_adapt_bn_mode(ModelSuite& suite, const AdaptConfig& cfg);

/// One pass (cfg.epochs passes) over `batches`, updating the BN affine
/// parameters of cfg.region in every active branch. Writes one JSON line per
/// step to `log` when given.
AdaptationState adapt_epoch(ModelSuite& suite, std::span<const Batch> batches, const AdaptConfig& cfg,
                            std::ostream* log = nullptr);

/// Mean adaptation objective over `batches` without updating anything.
double mean_objective(ModelSuite& suite, std::span<const Batch> batches, const AdaptConfig& cfg);

enum class PredictSource { teacher, color, thermal, interaction };
std::string to_string(PredictSource s);

struct BatchLogits {
  std::vector<Tensor> branch;  // cfg.branches order
  FusionOutput fusion;
};

BatchLogits forward_suite(ModelSuite& suite, const Batch& batch, const AdaptConfig& cfg);

/// Channel argmax, ties toward the lower class; N x C x H x W -> N x H x W.
Tensor argmax_labels(const Tensor& logits);

Tensor predict(ModelSuite& suite, const Batch& batch, PredictSource use, const AdaptConfig& cfg);

struct EvalResult {
  ConfusionMatrix teacher;
  std::map<Modality, ConfusionMatrix> branch;
  nlohmann::json to_json() const;
};

/// Night metrics with the BN layers in `mode` (eval uses stored statistics).
EvalResult evaluate(ModelSuite& suite, std::span<const Batch> batches, const AdaptConfig& cfg, nn::BnMode mode);

}  // namespace ntta
