#include "ntta/tta.hpp"

#include <algorithm>
#include <cmath>

#include "ntta/nn.hpp"

namespace ntta {

std::string to_string(OptimizerKind o) { return o == OptimizerKind::sgd ? "sgd" : "adam"; }
std::string to_string(BnStatistics b) { return b == BnStatistics::batch ? "batch" : "running"; }

std::string to_string(PredictSource s) {
  switch (s) {
    case PredictSource::teacher: return "teacher";
    case PredictSource::color: return "color";
    case PredictSource::thermal: return "thermal";
    case PredictSource::interaction: return "interaction";
  }
  return "?";
}

void AdaptConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ValueError("adapt.lr must be a nonnegative number");
  if (!(temp > 0.0)) throw ValueError("adapt.temp must be positive");
  if (lambda1 < 0.0 || lambda2 < 0.0) throw ValueError("adapt.lambda1 and adapt.lambda2 must be nonnegative");
  if (batch_size == 0) throw ValueError("adapt.batch_size must be positive");
  if (batch_size < 2 && !allow_single_sample) {
    throw ValueError("adapt.batch_size must be at least 2 for batch statistics");
  }
  if (epochs == 0) throw ValueError("adapt.epochs must be positive");
  if (branches.empty()) throw ValueError("adapt.branches must name at least one branch");
  for (std::size_t i = 0; i < branches.size(); ++i)
    for (std::size_t j = i + 1; j < branches.size(); ++j)
      if (branches[i] == branches[j]) throw ValueError("adapt.branches lists a branch twice");
}

nlohmann::json AdaptConfig::to_json() const {
  nlohmann::json br = nlohmann::json::array();
  for (Modality m : branches) br.push_back(to_string(m));
  return {{"lr", lr},
          {"temp", temp},
          {"lambda1", lambda1},
          {"lambda2", lambda2},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"region", to_string(region)},
          {"loss_mask", {{"branch", loss_mask.branch}, {"ensemble", loss_mask.ensemble}, {"kl", loss_mask.kl}}},
          {"dynamic_weighting", dynamic_weighting},
          {"optimizer", to_string(optimizer)},
          {"fusion", to_string(fusion)},
          {"bn_statistics", to_string(bn_statistics)},
          {"branches", br},
          {"allow_single_sample", allow_single_sample}};
}

AdaptConfig AdaptConfig::from_json(const nlohmann::json& j) {
  AdaptConfig c;
  c.lr = j.value("lr", c.lr);
  c.temp = j.value("temp", c.temp);
  c.lambda1 = j.value("lambda1", c.lambda1);
  c.lambda2 = j.value("lambda2", c.lambda2);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  if (j.contains("region")) c.region = region_from_string(j.at("region").get<std::string>());
  if (j.contains("loss_mask")) {
    const auto& m = j.at("loss_mask");
    c.loss_mask.branch = m.value("branch", true);
    c.loss_mask.ensemble = m.value("ensemble", true);
    c.loss_mask.kl = m.value("kl", true);
  }
  c.dynamic_weighting = j.value("dynamic_weighting", c.dynamic_weighting);
  if (j.contains("optimizer")) {
    const auto o = j.at("optimizer").get<std::string>();
    if (o == "sgd") c.optimizer = OptimizerKind::sgd;
    else if (o == "adam") c.optimizer = OptimizerKind::adam;
    else throw ValueError("unknown optimizer '" + o + "'");
  }
  if (j.contains("fusion")) c.fusion = fusion_strategy_from_string(j.at("fusion").get<std::string>());
  if (j.contains("bn_statistics")) {
    const auto b = j.at("bn_statistics").get<std::string>();
    if (b == "batch") c.bn_statistics = BnStatistics::batch;
    else if (b == "running") c.bn_statistics = BnStatistics::running;
    else throw ValueError("unknown bn_statistics '" + b + "'");
  }
  if (j.contains("branches")) {
    c.branches.clear();
    for (const auto& b : j.at("branches")) c.branches.push_back(modality_from_string(b.get<std::string>()));
  }
  c.allow_single_sample = j.value("allow_single_sample", c.allow_single_sample);
  c.validate();
  return c;
}

Tensor shannon_loss(const Tensor& logits) { return mean(pixel_entropy(logits)); }

Tensor kl_to_teacher(const Tensor& student_logits, const Tensor& teacher_logits) {
  if (student_logits.shape() != teacher_logits.shape()) {
    throw ShapeError("student " + shape_str(student_logits.shape()) + " and teacher " +
                     shape_str(teacher_logits.shape()) + " differ");
  }
  const Tensor t = teacher_logits.detach();
  const Tensor lpt = nn::log_softmax(t, 1);
  const Tensor pt = nn::softmax(t, 1);
  const Tensor lps = nn::log_softmax(student_logits, 1);
  return mean(sum(pt * (lpt - lps), {1}));
}

double branch_distance(const Tensor& branch_logits, const Tensor& teacher_logits) {
  if (branch_logits.shape() != teacher_logits.shape() || branch_logits.rank() != 4) {
    throw ShapeError("branch_distance expects equal N x C x H x W logits");
  }
  PauseTape pause;
  const Tensor la = nn::log_softmax(branch_logits.detach(), 1);
  const Tensor lb = nn::log_softmax(teacher_logits.detach(), 1);
  const std::size_t n = la.dim(0), c = la.dim(1), hw = la.dim(2) * la.dim(3);
  double total = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    double sample = 0.0;
    for (std::size_t p = 0; p < hw; ++p) {
      double sym = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const std::size_t i = (s * c + k) * hw + p;
        // KL(a||b) + KL(b||a) = sum (pa - pb)(log pa - log pb); every term >= 0
        sym += (std::exp(la[i]) - std::exp(lb[i])) * (la[i] - lb[i]);
      }
      sample += 0.5 * sym;
    }
    total += sample / static_cast<double>(hw);
  }
  return total / static_cast<double>(n);
}

std::vector<double> dynamic_weights(std::span<const double> distances) {
  if (distances.empty()) throw ValueError("dynamic_weights needs at least one distance");
  for (double d : distances) {
    if (!(d >= 0.0)) throw Error("branch distance must be nonnegative, got " + std::to_string(d));
  }
  const double lo = *std::min_element(distances.begin(), distances.end());
  std::vector<double> w(distances.size(), 1.0);
  if (lo < 1e-12) return w;
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = distances[i] / lo;
  return w;
}

ObjectiveTerms tta_objective(std::span<const Tensor> logits, const FusionOutput& fusion, const AdaptConfig& cfg,
                             std::span<const double> omega) {
  if (omega.size() != logits.size()) throw ValueError("one weight per branch required");
  ObjectiveTerms t;
  t.branch.assign(logits.size(), 0.0);
  t.kl.assign(logits.size(), 0.0);
  std::vector<Tensor> parts;
  if (cfg.loss_mask.branch) {
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const Tensor l = shannon_loss(logits[i]);
      t.branch[i] = l.item();
      parts.push_back(l * omega[i]);
    }
  }
  if (cfg.loss_mask.ensemble) {
    const Tensor l = shannon_loss(fusion_gradient_mode(fusion, GradientMode::full));
    t.ensemble = l.item();
    parts.push_back(l * cfg.lambda1);
  }
  if (cfg.loss_mask.kl) {
    const Tensor teacher = fusion_gradient_mode(fusion, GradientMode::stop_teacher);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const Tensor l = kl_to_teacher(logits[i], teacher);
      t.kl[i] = l.item();
      parts.push_back(l * (cfg.lambda2 * omega[i]));
    }
  }
  if (parts.empty()) {
    t.total = Tensor::scalar(0.0);
  } else {
    Tensor total = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) total = total + parts[i];
    t.total = total;
  }
  return t;
}

nlohmann::json StepRecord::to_json() const {
  nlohmann::json j = {{"step", step}, {"total", total}};
  for (std::size_t i = 0; i < branch.size(); ++i) {
    const std::string k = std::to_string(i + 1);
    j["L" + k] = branch[i];
  }
  j["L_EN"] = ensemble;
  for (std::size_t i = 0; i < kl.size(); ++i) j["KL" + std::to_string(i + 1)] = kl[i];
  for (std::size_t i = 0; i < omega.size(); ++i) j["w" + std::to_string(i + 1)] = omega[i];
  for (std::size_t i = 0; i < distance.size(); ++i) j["D" + std::to_string(i + 1)] = distance[i];
  return j;
}

void set_adapt_bn_mode(ModelSuite& suite, const AdaptConfig& cfg) {
  suite.set_bn_mode(cfg.bn_statistics == BnStatistics::batch ? nn::BnMode::adapt : nn::BnMode::eval);
}

BatchLogits forward_suite(ModelSuite& suite, const Batch& batch, const AdaptConfig& cfg) {
  BatchLogits out;
  for (Modality m : cfg.branches) out.branch.push_back(suite.branch(m).forward(batch.color, batch.thermal));
  out.fusion = eef_fuse(out.branch, cfg.fusion_config());
  return out;
}

namespace {

struct StepResult {
  ObjectiveTerms terms;
  std::vector<double> omega, distance;
};

StepResult objective_for_batch(ModelSuite& suite, const Batch& batch, const AdaptConfig& cfg) {
  const BatchLogits bl = forward_suite(suite, batch, cfg);
  StepResult r;
  for (const auto& y : bl.branch) r.distance.push_back(branch_distance(y, bl.fusion.teacher_logits));
  r.omega = cfg.dynamic_weighting ? dynamic_weights(r.distance) : std::vector<double>(bl.branch.size(), 1.0);
  r.terms = tta_objective(bl.branch, bl.fusion, cfg, r.omega);
  return r;
}

}  // namespace

AdaptationState adapt_epoch(ModelSuite& suite, std::span<const Batch> batches, const AdaptConfig& cfg,
                            std::ostream* log) {
  cfg.validate();
  if (batches.empty()) throw ValueError("adaptation needs at least one batch");
  AdaptationState st;

  for (auto& e : suite.state()) e.tensor->set_requires_grad(false);
  for (Modality m : cfg.branches) {
    for (auto& t : suite.branch(m).collect_params(ParamSubset::bn_affine_only, cfg.region)) {
      t.set_requires_grad(true);
      st.trainable.push_back(t);
    }
  }
  set_adapt_bn_mode(suite, cfg);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const Batch& batch : batches) {
      if (batch.size() < 2 && !cfg.allow_single_sample) {
        throw ValueError("adaptation batch of size 1 without single-sample mode");
      }
      StepResult r;
      {
        Tape tape;
        TapeScope scope(tape);
        r = objective_for_batch(suite, batch, cfg);
        if (r.terms.total.tape_id()) tape.backward(r.terms.total);
      }
      for (auto& p : st.trainable) {
        const Tensor g = p.grad();
        const auto gd = g.data();
        auto pd = p.mutable_data();
        if (cfg.optimizer == OptimizerKind::sgd) {
          for (std::size_t i = 0; i < pd.size(); ++i) pd[i] -= cfg.lr * gd[i];
        } else {
          auto& m = st.adam_m[p.handle().get()];
          auto& v = st.adam_v[p.handle().get()];
          m.resize(pd.size(), 0.0);
          v.resize(pd.size(), 0.0);
          const double t = static_cast<double>(st.step + 1);
          const double c1 = 1.0 - std::pow(cfg.adam_beta1, t), c2 = 1.0 - std::pow(cfg.adam_beta2, t);
          for (std::size_t i = 0; i < pd.size(); ++i) {
            m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * gd[i];
            v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * gd[i] * gd[i];
            pd[i] -= cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_eps);
          }
        }
        p.zero_grad();
      }
      StepRecord rec;
      rec.step = st.step;
      rec.total = r.terms.total.item();
      rec.branch = r.terms.branch;
      rec.ensemble = r.terms.ensemble;
      rec.kl = r.terms.kl;
      rec.omega = r.omega;
      rec.distance = r.distance;
      if (log) *log << rec.to_json().dump() << '\n';
      st.omega = r.omega;
      st.log.push_back(std::move(rec));
      ++st.step;
    }
  }
  for (auto& p : st.trainable) p.set_requires_grad(false);
  return st;
}

double mean_objective(ModelSuite& suite, std::span<const Batch> batches, const AdaptConfig& cfg) {
  if (batches.empty()) throw ValueError("mean_objective needs at least one batch");
  set_adapt_bn_mode(suite, cfg);
  double s = 0.0;
  for (const Batch& b : batches) s += objective_for_batch(suite, b, cfg).terms.total.item();
  return s / static_cast<double>(batches.size());
}

Tensor argmax_labels(const Tensor& logits) {
  if (logits.rank() != 4) throw ShapeError("argmax_labels expects N x C x H x W");
  const std::size_t n = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  std::vector<double> out(n * hw);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t p = 0; p < hw; ++p) {
      std::size_t best = 0;
      double bv = logits[(s * c) * hw + p];
      for (std::size_t k = 1; k < c; ++k) {
        const double v = logits[(s * c + k) * hw + p];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      out[s * hw + p] = static_cast<double>(best);
    }
  return Tensor({n, logits.dim(2), logits.dim(3)}, std::move(out));
}

Tensor predict(ModelSuite& suite, const Batch& batch, PredictSource use, const AdaptConfig& cfg) {
  PauseTape pause;
  if (use == PredictSource::teacher) return argmax_labels(forward_suite(suite, batch, cfg).fusion.teacher_logits);
  const Modality m = use == PredictSource::color     ? Modality::color
                     : use == PredictSource::thermal ? Modality::thermal
                                                     : Modality::interaction;
  return argmax_labels(suite.branch(m).forward(batch.color, batch.thermal));
}

nlohmann::json EvalResult::to_json() const {
  nlohmann::json j = {{"teacher", metrics_report(teacher, class_names())}};
  for (const auto& [m, cm] : branch) j[to_string(m)] = metrics_report(cm, class_names());
  return j;
}

EvalResult evaluate(ModelSuite& suite, std::span<const Batch> batches, const AdaptConfig& cfg, nn::BnMode mode) {
  PauseTape pause;
  suite.set_bn_mode(mode);
  EvalResult r;
  const std::size_t classes = suite.config.classes;
  r.teacher = ConfusionMatrix(classes);
  for (Modality m : cfg.branches) r.branch.emplace(m, ConfusionMatrix(classes));
  for (const Batch& b : batches) {
    const BatchLogits bl = forward_suite(suite, b, cfg);
    r.teacher.accumulate(argmax_labels(bl.fusion.teacher_logits), b.labels);
    for (std::size_t i = 0; i < cfg.branches.size(); ++i) {
      r.branch.at(cfg.branches[i]).accumulate(argmax_labels(bl.branch[i]), b.labels);
    }
  }
  return r;
}

}  // namespace ntta
