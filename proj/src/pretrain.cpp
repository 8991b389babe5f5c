#include "ntta/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "ntta/nn.hpp"

namespace ntta {

void PretrainConfig::validate() const {
  if (epochs == 0) throw ValueError("pretrain.epochs must be positive");
  if (!(lr > 0.0)) throw ValueError("pretrain.lr must be positive");
  if (!(decay > 0.0)) throw ValueError("pretrain.decay must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ValueError("pretrain.momentum must be in [0, 1)");
  if (batch_size < 2) throw ValueError("pretrain.batch_size must be at least 2");
}

nlohmann::json PretrainConfig::to_json() const {
  return {{"epochs", epochs}, {"lr", lr},       {"decay_epoch", decay_epoch}, {"decay", decay},
          {"momentum", momentum}, {"batch_size", batch_size}, {"seed", seed}};
}

PretrainConfig PretrainConfig::from_json(const nlohmann::json& j) {
  PretrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.decay_epoch = j.value("decay_epoch", c.decay_epoch);
  c.decay = j.value("decay", c.decay);
  c.momentum = j.value("momentum", c.momentum);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

PretrainResult pretrain(ModelSuite& suite, std::span<const ScenePair> train, const PretrainConfig& cfg,
                        std::ostream* log) {
  cfg.validate();
  if (train.size() < 2) throw ValueError("pretraining needs at least two samples");
  std::vector<Tensor> params;
  for (auto& e : suite.state()) {
    e.tensor->set_requires_grad(e.is_parameter());
    if (e.is_parameter()) params.push_back(*e.tensor);
  }
  std::map<const void*, std::vector<double>> velocity;
  suite.set_bn_mode(nn::BnMode::train);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed);
  PretrainResult res;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = epoch >= cfg.decay_epoch ? cfg.lr * cfg.decay : cfg.lr;
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      if (n < 2) continue;  // BN needs two samples
      std::vector<ScenePair> picked;
      for (std::size_t i = 0; i < n; ++i) picked.push_back(train[order[start + i]]);
      const Batch batch = make_batch(picked);

      double loss_value = 0.0;
      {
        Tape tape;
        TapeScope scope(tape);
        std::vector<Tensor> logits;
        for (auto& b : suite.branches) logits.push_back(b.forward(batch.color, batch.thermal));
        Tensor mean_logits = logits[0];
        for (std::size_t i = 1; i < logits.size(); ++i) mean_logits = mean_logits + logits[i];
        mean_logits = mean_logits / static_cast<double>(logits.size());
        Tensor loss = nn::cross_entropy(mean_logits, batch.labels);
        for (const auto& y : logits) loss = loss + nn::cross_entropy(y, batch.labels);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
          throw Error("pretraining diverged at epoch " + std::to_string(epoch) + " (loss " +
                      std::to_string(loss_value) + ")");
        }
        tape.backward(loss);
      }
      for (auto& p : params) {
        const Tensor g = p.grad();
        const auto gd = g.data();
        auto pd = p.mutable_data();
        if (cfg.momentum > 0.0) {
          auto& v = velocity[p.handle().get()];
          v.resize(pd.size(), 0.0);
          for (std::size_t i = 0; i < pd.size(); ++i) {
            v[i] = cfg.momentum * v[i] + gd[i];
            pd[i] -= lr * v[i];
          }
        } else {
          for (std::size_t i = 0; i < pd.size(); ++i) pd[i] -= lr * gd[i];
        }
        p.zero_grad();
      }
      epoch_loss += loss_value;
      ++batches;
    }
    epoch_loss /= static_cast<double>(batches);
    res.epoch_loss.push_back(epoch_loss);
    if (log) *log << nlohmann::json{{"epoch", epoch}, {"lr", lr}, {"loss", epoch_loss}}.dump() << '\n';
  }
  for (auto& p : params) p.set_requires_grad(false);
  return res;
}

}  // namespace ntta
