#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <vector>

#include <json.hpp>

#include "ntta/models.hpp"
#include "ntta/scenes.hpp"

namespace ntta {

struct PretrainConfig {
  std::size_t epochs = 30;
  double lr = 1e-2;
  std::size_t decay_epoch = 20;  // lr *= decay from this epoch on
  double decay = 0.1;
  double momentum = 0.9;
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;  // shuffling

  void validate() const;
  nlohmann::json to_json() const;
  static PretrainConfig from_json(const nlohmann::json& j);
};

struct PretrainResult {
  std::vector<double> epoch_loss;  // mean batch loss per epoch
};

/// Joint source training of all branches: cross-entropy on each branch's
/// logits plus on their mean (the merge teacher). BN layers run in train mode.
PretrainResult pretrain(ModelSuite& suite, std::span<const ScenePair> train, const PretrainConfig& cfg,
                        std::ostream* log = nullptr);

}  // namespace ntta
