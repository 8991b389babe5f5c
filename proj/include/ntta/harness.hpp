#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntta/pretrain.hpp"
#include "ntta/tta.hpp"

namespace ntta {

// Exit codes of the command line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;
inline constexpr int kExitSelftest = 4;

class UsageError : public Error {
 public:
  using Error::Error;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};

struct PerturbationSpec {
  Perturbation kind = Perturbation::none;
  double magnitude = 0.0;
  std::string label() const;
};

struct AblationMatrix {
  std::vector<LossMask> loss_masks;
  std::vector<FusionStrategy> fusions;
  std::vector<std::vector<Modality>> branch_subsets;
  bool cmsa_toggle = true;  // also run the fusion table on a suite pretrained without CMSA
  std::vector<Region> regions;
  std::vector<std::size_t> batch_sizes;
  std::vector<PerturbationSpec> perturbations;

  static AblationMatrix defaults();
  nlohmann::json to_json() const;
  static AblationMatrix from_json(const nlohmann::json& j);
  void validate() const;
};

struct ExperimentConfig {
  std::filesystem::path dataset_dir = "data";
  std::filesystem::path out_dir = "runs";
  GeneratorConfig generator;
  ModelConfig model;
  PretrainConfig pretrain;
  AdaptConfig adapt;
  AblationMatrix ablation = AblationMatrix::defaults();

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
};

/// Applies "a.b.c=value" to a JSON object. The value is parsed as JSON when
/// possible and kept as a string otherwise. Unknown keys are rejected.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Keys sorted, no whitespace.
std::string canonical_json(const nlohmann::json& j);
std::string sha256_hex(const std::string& bytes);
/// SHA-256 of the canonical config without the dataset and output paths.
std::string config_hash(const ExperimentConfig& cfg);

std::string code_version();
/// Hash of code_version() computed like a git blob id.
std::string code_hash();

struct RunRecord {
  std::string config_hash;
  std::string code_hash;
  nlohmann::json phases;  // phase -> EvalResult json
  double wall_time = 0.0;
  std::string log_path;
  nlohmann::json to_json() const;
  static RunRecord from_json(const nlohmann::json& j);
};

/// BN mode used to evaluate a suite adapted under `cfg`.
nn::BnMode test_bn_mode(const AdaptConfig& cfg);

// ---- commands ---------------------------------------------------------------

Dataset cmd_gen(const ExperimentConfig& cfg, bool force);

struct PretrainReport {
  PretrainResult result;
  EvalResult untrained_day_val;
  EvalResult day_val;
  EvalResult source_only;
  nlohmann::json to_json() const;
};

/// Trains a suite on the day split and writes it to `checkpoint`.
PretrainReport pretrain_suite(const ExperimentConfig& cfg, const Dataset& ds, const ModelConfig& model,
                              const std::filesystem::path& checkpoint, std::ostream* log);

/// Writes <out>/source.ckpt, pretrain_metrics.json and pretrain_log.jsonl.
PretrainReport cmd_pretrain(const ExperimentConfig& cfg);

/// Loads <out>/source.ckpt (or `checkpoint`) and runs one adaptation.
/// Writes adapted.ckpt, adapt_log.jsonl, metrics.json (no timing) and
/// record.json.
RunRecord cmd_adapt(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& checkpoint = {});

struct CellResult {
  std::string table;
  std::string row;
  bool flagged = false;  // protocol differs from the other rows
  std::optional<std::string> error;
  EvalResult source_only, pre_adapt, post;
  nlohmann::json to_json() const;
};

/// Runs one adaptation cell on a private copy of `suite`.
CellResult run_cell(const ModelSuite& suite, std::span<const ScenePair> target, const AdaptConfig& cfg,
                    const PerturbationSpec& perturbation, std::uint64_t perturb_seed);

struct AblationReport {
  std::vector<CellResult> cells;
  const CellResult* find(const std::string& table, const std::string& row) const;
  nlohmann::json to_json() const;
};

std::string loss_mask_label(const LossMask& m);
std::string branch_subset_label(const std::vector<Modality>& b);

/// Full ablation matrix. Needs <out>/source.ckpt; the CMSA-free suite is
/// pretrained on demand into <out>/source_nocmsa.ckpt. One CSV per table.
AblationReport cmd_ablate(const ExperimentConfig& cfg, std::size_t jobs, std::ostream* progress = nullptr);

/// Merges run directories (each with record.json) into <out>/report.json and
/// report.csv. With `dump_images`, also writes prediction and fusion-weight
/// images for the first run.
nlohmann::json cmd_report(const std::vector<std::filesystem::path>& runs, const std::filesystem::path& out,
                          const ExperimentConfig& cfg, bool dump_images);

struct SelftestCheck {
  std::string name;
  double measured = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct SelftestOptions {
  /// Entropy used by the fusion property checks; replaceable to confirm the
  /// checks can fail.
  std::function<Tensor(const Tensor&)> entropy = pixel_entropy;
};

std::vector<SelftestCheck> cmd_selftest(const SelftestOptions& opts = {});

}  // namespace ntta
