#include "ntta/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "ntta/nn.hpp"
#include "ntta/tensor_io.hpp"

namespace ntta {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot create " + path.string());
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

std::string digest_hex(const EVP_MD* md, const std::string& bytes) {
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out, &len, md, nullptr) != 1) throw Error("digest failed");
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (unsigned int i = 0; i < len; ++i) {
    s.push_back(hex[out[i] >> 4]);
    s.push_back(hex[out[i] & 15]);
  }
  return s;
}

// Every key of `user` must exist in `known` (objects only; arrays are taken as is).
void check_known_keys(const json& user, const json& known, const std::string& path) {
  if (!user.is_object() || !known.is_object()) return;
  for (const auto& [k, v] : user.items()) {
    const std::string here = path.empty() ? k : path + "." + k;
    if (!known.contains(k)) throw ConfigError("unknown config key '" + here + "'");
    check_known_keys(v, known.at(k), here);
  }
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

EvalResult evaluate_phase(ModelSuite& suite, std::span<const Batch> batches, const AdaptConfig& cfg,
                          nn::BnMode mode) {
  return evaluate(suite, batches, cfg, mode);
}

}  // namespace

// ---- config -----------------------------------------------------------------

std::string PerturbationSpec::label() const {
  if (kind == Perturbation::none) return "none";
  return to_string(kind) + "_" + fmt_g(magnitude);
}

AblationMatrix AblationMatrix::defaults() {
  AblationMatrix a;
  for (int bits = 1; bits < 8; ++bits) a.loss_masks.push_back({(bits & 1) != 0, (bits & 2) != 0, (bits & 4) != 0});
  a.fusions = {FusionStrategy::eef, FusionStrategy::merge, FusionStrategy::ie};
  a.branch_subsets = {{Modality::color, Modality::thermal, Modality::interaction}, {Modality::color, Modality::thermal}};
  a.regions = {Region::encoder, Region::decoder, Region::both};
  a.batch_sizes = {1, 2, 4, 8};
  a.perturbations = {{Perturbation::none, 0.0},
                     {Perturbation::crop, 0.2},
                     {Perturbation::brightness, 0.5},
                     {Perturbation::noise, 10.0}};
  return a;
}

void AblationMatrix::validate() const {
  for (const auto& m : loss_masks)
    if (!m.branch && !m.ensemble && !m.kl) throw ConfigError("ablation.loss_masks: a mask enables no loss");
  for (const auto& s : branch_subsets) {
    if (s.size() < 2) throw ConfigError("ablation.branch_subsets: each subset needs two branches");
    std::set<Modality> uniq(s.begin(), s.end());
    if (uniq.size() != s.size()) throw ConfigError("ablation.branch_subsets: repeated branch");
  }
  for (std::size_t b : batch_sizes)
    if (b == 0) throw ConfigError("ablation.batch_sizes: batch size 0");
  for (const auto& p : perturbations) {
    if (p.kind == Perturbation::crop && (p.magnitude < 0.0 || p.magnitude >= 1.0))
      throw ConfigError("ablation.perturbations: crop rate must be in [0, 1)");
    if (p.kind != Perturbation::none && p.magnitude < 0.0)
      throw ConfigError("ablation.perturbations: negative magnitude");
  }
}

json AblationMatrix::to_json() const {
  json masks = json::array();
  for (const auto& m : loss_masks) masks.push_back({{"branch", m.branch}, {"ensemble", m.ensemble}, {"kl", m.kl}});
  json fus = json::array();
  for (auto f : fusions) fus.push_back(to_string(f));
  json subsets = json::array();
  for (const auto& s : branch_subsets) {
    json one = json::array();
    for (auto m : s) one.push_back(to_string(m));
    subsets.push_back(one);
  }
  json regs = json::array();
  for (auto r : regions) regs.push_back(to_string(r));
  json perts = json::array();
  for (const auto& p : perturbations) perts.push_back({{"kind", to_string(p.kind)}, {"magnitude", p.magnitude}});
  return {{"loss_masks", masks},  {"fusions", fus},          {"branch_subsets", subsets}, {"cmsa_toggle", cmsa_toggle},
          {"regions", regs},      {"batch_sizes", batch_sizes}, {"perturbations", perts}};
}

AblationMatrix AblationMatrix::from_json(const json& j) {
  AblationMatrix a = defaults();
  if (j.contains("loss_masks")) {
    a.loss_masks.clear();
    for (const auto& m : j.at("loss_masks"))
      a.loss_masks.push_back({m.value("branch", true), m.value("ensemble", true), m.value("kl", true)});
  }
  if (j.contains("fusions")) {
    a.fusions.clear();
    for (const auto& f : j.at("fusions")) a.fusions.push_back(fusion_strategy_from_string(f.get<std::string>()));
  }
  if (j.contains("branch_subsets")) {
    a.branch_subsets.clear();
    for (const auto& s : j.at("branch_subsets")) {
      std::vector<Modality> one;
      for (const auto& m : s) one.push_back(modality_from_string(m.get<std::string>()));
      a.branch_subsets.push_back(one);
    }
  }
  a.cmsa_toggle = j.value("cmsa_toggle", a.cmsa_toggle);
  if (j.contains("regions")) {
    a.regions.clear();
    for (const auto& r : j.at("regions")) a.regions.push_back(region_from_string(r.get<std::string>()));
  }
  if (j.contains("batch_sizes")) a.batch_sizes = j.at("batch_sizes").get<std::vector<std::size_t>>();
  if (j.contains("perturbations")) {
    a.perturbations.clear();
    for (const auto& p : j.at("perturbations"))
      a.perturbations.push_back({perturbation_from_string(p.at("kind").get<std::string>()), p.value("magnitude", 0.0)});
  }
  a.validate();
  return a;
}

void ExperimentConfig::validate() const {
  if (dataset_dir.empty()) throw ConfigError("dataset_dir is empty");
  if (out_dir.empty()) throw ConfigError("out_dir is empty");
  try {
    generator.validate();
    model.validate();
    pretrain.validate();
    adapt.validate();
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  }
  if (model.classes != kNumClasses)
    throw ConfigError("model.classes must be " + std::to_string(kNumClasses) + " for the synthetic scenes");
  ablation.validate();
}

json ExperimentConfig::to_json() const {
  return {{"dataset_dir", dataset_dir.string()}, {"out_dir", out_dir.string()},  {"generator", generator.to_json()},
          {"model", model.to_json()},            {"pretrain", pretrain.to_json()}, {"adapt", adapt.to_json()},
          {"ablation", ablation.to_json()}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  check_known_keys(j, ExperimentConfig{}.to_json(), "");
  ExperimentConfig c;
  try {
    c.dataset_dir = j.value("dataset_dir", c.dataset_dir.string());
    c.out_dir = j.value("out_dir", c.out_dir.string());
    if (j.contains("generator")) c.generator = GeneratorConfig::from_json(j.at("generator"));
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    if (j.contains("pretrain")) c.pretrain = PretrainConfig::from_json(j.at("pretrain"));
    if (j.contains("adapt")) c.adapt = AdaptConfig::from_json(j.at("adapt"));
    if (j.contains("ablation")) c.ablation = AblationMatrix::from_json(j.at("ablation"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("--set: unknown key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  *node = value;
}

std::string canonical_json(const json& j) { return j.dump(); }

std::string sha256_hex(const std::string& bytes) { return digest_hex(EVP_sha256(), bytes); }

std::string config_hash(const ExperimentConfig& cfg) {
  json j = cfg.to_json();
  // where files live does not change the experiment
  j.erase("dataset_dir");
  j.erase("out_dir");
  return sha256_hex(canonical_json(j));
}

std::string code_version() { return "ntta 1.0.0"; }

std::string code_hash() {
  const std::string v = code_version();
  std::string blob = "blob " + std::to_string(v.size());
  blob.push_back('\0');
  return digest_hex(EVP_sha1(), blob + v);
}

json RunRecord::to_json() const {
  return {{"config_hash", config_hash}, {"code_hash", code_hash}, {"phases", phases},
          {"wall_time", wall_time},     {"log_path", log_path}};
}

RunRecord RunRecord::from_json(const json& j) {
  RunRecord r;
  r.config_hash = j.at("config_hash").get<std::string>();
  r.code_hash = j.at("code_hash").get<std::string>();
  r.phases = j.at("phases");
  r.wall_time = j.value("wall_time", 0.0);
  r.log_path = j.value("log_path", "");
  return r;
}

nn::BnMode test_bn_mode(const AdaptConfig& cfg) {
  return cfg.bn_statistics == BnStatistics::batch ? nn::BnMode::adapt : nn::BnMode::eval;
}

// ---- gen / pretrain / adapt -------------------------------------------------

Dataset cmd_gen(const ExperimentConfig& cfg, bool force) {
  const fs::path dir = cfg.dataset_dir;
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw UsageError(dir.string() + " already exists; pass --force to overwrite");
    fs::remove_all(dir);
  }
  Dataset ds = build_splits(cfg.generator);
  save_dataset(dir, ds);
  return ds;
}

json PretrainReport::to_json() const {
  return {{"epoch_loss", result.epoch_loss},
          {"untrained_day_val", untrained_day_val.to_json()},
          {"day_val", day_val.to_json()},
          {"source_only", source_only.to_json()}};
}

PretrainReport pretrain_suite(const ExperimentConfig& cfg, const Dataset& ds, const ModelConfig& model,
                              const fs::path& checkpoint, std::ostream* log) {
  ModelSuite suite = build_model_suite(model).suite;
  AdaptConfig eval_cfg;  // eef teacher, all branches
  const auto val = make_batches(ds.source_val, cfg.pretrain.batch_size);
  const auto night = make_batches(ds.target_test, cfg.pretrain.batch_size);
  PretrainReport r;
  r.untrained_day_val = evaluate_phase(suite, val, eval_cfg, nn::BnMode::eval);
  r.result = pretrain(suite, ds.source_train, cfg.pretrain, log);
  r.day_val = evaluate_phase(suite, val, eval_cfg, nn::BnMode::eval);
  r.source_only = evaluate_phase(suite, night, eval_cfg, nn::BnMode::eval);
  suite.set_bn_mode(nn::BnMode::eval);
  suite.save(checkpoint);
  return r;
}

PretrainReport cmd_pretrain(const ExperimentConfig& cfg) {
  const Dataset ds = load_dataset(cfg.dataset_dir);
  ensure_dir(cfg.out_dir);
  std::ofstream log(cfg.out_dir / "pretrain_log.jsonl", std::ios::trunc);
  if (!log) throw IoError("cannot create " + (cfg.out_dir / "pretrain_log.jsonl").string());
  PretrainReport r = pretrain_suite(cfg, ds, cfg.model, cfg.out_dir / "source.ckpt", &log);
  json metrics = r.to_json();
  metrics["config_hash"] = config_hash(cfg);
  write_text(cfg.out_dir / "pretrain_metrics.json", metrics.dump(2) + "\n");
  return r;
}

namespace {

ModelSuite load_matching(const fs::path& ckpt, const ModelConfig& expected) {
  if (!fs::exists(ckpt)) throw ConfigError("checkpoint not found: " + ckpt.string());
  ModelSuite suite = ModelSuite::load(ckpt);
  const ModelConfig& got = suite.config;
  if (got.classes != expected.classes || got.width != expected.width || got.depth != expected.depth ||
      got.use_cmsa != expected.use_cmsa) {
    throw ConfigError(ckpt.string() + ": checkpoint architecture " + got.to_json().dump() +
                      " does not match model config " + expected.to_json().dump());
  }
  return suite;
}

}  // namespace

RunRecord cmd_adapt(const ExperimentConfig& cfg, const std::optional<fs::path>& checkpoint) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path ckpt = checkpoint.value_or(cfg.out_dir / "source.ckpt");
  ModelSuite suite = load_matching(ckpt, cfg.model);
  const Dataset ds = load_dataset(cfg.dataset_dir);
  ensure_dir(cfg.out_dir);
  const auto batches = make_batches(ds.target_test, cfg.adapt.batch_size);
  const nn::BnMode mode = test_bn_mode(cfg.adapt);

  RunRecord rec;
  rec.config_hash = config_hash(cfg);
  rec.code_hash = code_hash();
  rec.phases["source_only"] = evaluate_phase(suite, batches, cfg.adapt, nn::BnMode::eval).to_json();
  rec.phases["pre_adapt"] = evaluate_phase(suite, batches, cfg.adapt, mode).to_json();

  const fs::path log_path = cfg.out_dir / "adapt_log.jsonl";
  {
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw IoError("cannot create " + log_path.string());
    adapt_epoch(suite, batches, cfg.adapt, &log);
  }
  rec.phases["post"] = evaluate_phase(suite, batches, cfg.adapt, mode).to_json();
  suite.set_bn_mode(nn::BnMode::eval);
  suite.save(cfg.out_dir / "adapted.ckpt");

  rec.log_path = log_path.string();
  const json metrics = {{"config_hash", rec.config_hash}, {"code_hash", rec.code_hash}, {"phases", rec.phases}};
  write_text(cfg.out_dir / "metrics.json", metrics.dump(2) + "\n");
  write_text(cfg.out_dir / "config.json", cfg.to_json().dump(2) + "\n");
  rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_text(cfg.out_dir / "record.json", rec.to_json().dump(2) + "\n");
  return rec;
}

// ---- ablation ---------------------------------------------------------------

json CellResult::to_json() const {
  json j = {{"table", table}, {"row", row}, {"flagged", flagged}};
  if (error) {
    j["error"] = *error;
  } else {
    j["source_only"] = source_only.to_json();
    j["pre_adapt"] = pre_adapt.to_json();
    j["post"] = post.to_json();
  }
  return j;
}

CellResult run_cell(const ModelSuite& suite, std::span<const ScenePair> target, const AdaptConfig& cfg,
                    const PerturbationSpec& perturbation, std::uint64_t perturb_seed) {
  CellResult r;
  ModelSuite copy = suite.clone();
  std::vector<ScenePair> pairs;
  pairs.reserve(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) {
    pairs.push_back(perturbation.kind == Perturbation::none
                        ? target[i]
                        : perturb(target[i], perturbation.kind, perturbation.magnitude, perturb_seed + i));
  }
  const auto batches = make_batches(pairs, cfg.batch_size);
  const nn::BnMode mode = test_bn_mode(cfg);
  r.source_only = evaluate_phase(copy, batches, cfg, nn::BnMode::eval);
  r.pre_adapt = evaluate_phase(copy, batches, cfg, mode);
  adapt_epoch(copy, batches, cfg);
  r.post = evaluate_phase(copy, batches, cfg, mode);
  return r;
}

const CellResult* AblationReport::find(const std::string& table, const std::string& row) const {
  for (const auto& c : cells)
    if (c.table == table && c.row == row) return &c;
  return nullptr;
}

json AblationReport::to_json() const {
  json j = json::array();
  for (const auto& c : cells) j.push_back(c.to_json());
  return j;
}

std::string loss_mask_label(const LossMask& m) {
  std::string s;
  auto add = [&](const char* part) { s += s.empty() ? part : std::string("+") + part; };
  if (m.branch) add("SE");
  if (m.ensemble) add("EN");
  if (m.kl) add("KL");
  return s.empty() ? "none" : s;
}

std::string branch_subset_label(const std::vector<Modality>& b) {
  std::string s;
  for (auto m : b) s += (s.empty() ? "" : "+") + to_string(m);
  return s;
}

namespace {

struct CellJob {
  std::string table, row;
  bool flagged = false;
  bool use_nocmsa = false;
  AdaptConfig cfg;
  PerturbationSpec perturbation;
};

std::string miou_or_empty(const ConfusionMatrix& cm) {
  try {
    return fmt(cm.miou());
  } catch (const Error&) {
    return "";
  }
}

void write_table_csv(const fs::path& path, const std::vector<const CellResult*>& rows) {
  std::ostringstream os;
  os << "row,flagged,error,source_only_miou,pre_adapt_miou,post_color_miou,post_thermal_miou,post_interaction_miou,"
     << metrics_csv_header(class_names()) << "\n";
  for (const CellResult* c : rows) {
    os << c->row << ',' << (c->flagged ? 1 : 0) << ',';
    if (c->error) {
      std::string e = *c->error;
      std::replace(e.begin(), e.end(), ',', ';');
      std::replace(e.begin(), e.end(), '\n', ' ');
      os << e << ",,,,,,";
      for (std::size_t k = 0; k < 2 + class_names().size(); ++k) os << (k ? "," : "");
      os << "\n";
      continue;
    }
    os << ',' << miou_or_empty(c->source_only.teacher) << ',' << miou_or_empty(c->pre_adapt.teacher);
    for (Modality m : kBranchOrder) {
      os << ',';
      if (auto it = c->post.branch.find(m); it != c->post.branch.end()) os << miou_or_empty(it->second);
    }
    os << ',' << metrics_csv_row(c->post.teacher) << "\n";
  }
  write_text(path, os.str());
}

}  // namespace

AblationReport cmd_ablate(const ExperimentConfig& cfg, std::size_t jobs, std::ostream* progress) {
  if (jobs == 0) throw UsageError("--jobs must be positive");
  const fs::path ckpt = cfg.out_dir / "source.ckpt";
  if (!fs::exists(ckpt)) throw ConfigError("source checkpoint not found: " + ckpt.string() + " (run pretrain first)");
  const ModelSuite suite = load_matching(ckpt, cfg.model);
  const Dataset ds = load_dataset(cfg.dataset_dir);
  const AblationMatrix& m = cfg.ablation;
  const AdaptConfig base = cfg.adapt;

  std::optional<ModelSuite> nocmsa;
  if (m.cmsa_toggle && cfg.model.use_cmsa) {
    const fs::path p = cfg.out_dir / "source_nocmsa.ckpt";
    ModelConfig mc = cfg.model;
    mc.use_cmsa = false;
    if (!fs::exists(p)) {
      if (progress) *progress << "pretraining the suite without CMSA\n";
      std::ofstream log(cfg.out_dir / "pretrain_nocmsa_log.jsonl", std::ios::trunc);
      const PretrainReport r = pretrain_suite(cfg, ds, mc, p, &log);
      write_text(cfg.out_dir / "pretrain_nocmsa_metrics.json", r.to_json().dump(2) + "\n");
    }
    nocmsa = load_matching(p, mc);
  }

  std::vector<CellJob> plan;
  for (const auto& mask : m.loss_masks) {
    CellJob j{"loss", loss_mask_label(mask), false, false, base, {}};
    j.cfg.loss_mask = mask;
    plan.push_back(j);
  }
  for (const auto& subset : m.branch_subsets) {
    const bool has_interaction = std::find(subset.begin(), subset.end(), Modality::interaction) != subset.end();
    for (auto f : m.fusions) {
      for (int without : {0, 1}) {
        if (without && (!nocmsa || !has_interaction)) continue;
        std::string row = to_string(f) + "|" + branch_subset_label(subset);
        if (has_interaction) row += without ? "|no_cmsa" : "|cmsa";
        CellJob j{"fusion", row, false, without != 0, base, {}};
        j.cfg.fusion = f;
        j.cfg.branches = subset;
        plan.push_back(j);
      }
    }
  }
  for (std::size_t b : m.batch_sizes) {
    CellJob j{"batch", "B=" + std::to_string(b), b == 1, false, base, {}};
    j.cfg.batch_size = b;
    j.cfg.allow_single_sample = b == 1;
    plan.push_back(j);
  }
  for (const auto& p : m.perturbations) plan.push_back({"perturbation", p.label(), false, false, base, p});
  for (auto r : m.regions) {
    CellJob j{"region", to_string(r), false, false, base, {}};
    j.cfg.region = r;
    plan.push_back(j);
  }

  AblationReport report;
  report.cells.resize(plan.size());
  std::atomic<std::size_t> next{0};
  std::mutex progress_mu;
  const std::uint64_t perturb_seed = cfg.generator.master_seed + 3000000;
  auto worker = [&] {
    for (std::size_t i = next++; i < plan.size(); i = next++) {
      const CellJob& job = plan[i];
      CellResult r;
      try {
        job.cfg.validate();
        r = run_cell(job.use_nocmsa ? *nocmsa : suite, ds.target_test, job.cfg, job.perturbation, perturb_seed);
      } catch (const std::exception& e) {
        CellResult failed;
        failed.error = e.what();
        r = std::move(failed);
      }
      r.table = job.table;
      r.row = job.row;
      r.flagged = job.flagged;
      if (progress) {
        std::lock_guard lock(progress_mu);
        *progress << job.table << " " << job.row << ": "
                  << (r.error ? "error: " + *r.error : "post teacher mIoU " + miou_or_empty(r.post.teacher)) << "\n";
      }
      report.cells[i] = std::move(r);
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(jobs, plan.size()); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  ensure_dir(cfg.out_dir / "ablation");
  for (const char* table : {"loss", "fusion", "batch", "perturbation", "region"}) {
    std::vector<const CellResult*> rows;
    for (const auto& c : report.cells)
      if (c.table == table) rows.push_back(&c);
    write_table_csv(cfg.out_dir / "ablation" / (std::string(table) + ".csv"), rows);
  }
  json all = {{"config_hash", config_hash(cfg)}, {"code_hash", code_hash()}, {"cells", report.to_json()}};
  write_text(cfg.out_dir / "ablation" / "ablation.json", all.dump(2) + "\n");
  return report;
}

// ---- report -----------------------------------------------------------------

json cmd_report(const std::vector<fs::path>& runs, const fs::path& out, const ExperimentConfig& cfg,
                bool dump_images) {
  if (runs.empty()) throw UsageError("report needs at least one run directory");
  ensure_dir(out);
  json merged = {{"classes", class_names()}, {"runs", json::array()}};
  std::ostringstream csv;
  csv << "run,phase,source," << metrics_csv_header(class_names()) << "\n";
  std::optional<std::size_t> classes;
  for (const auto& dir : runs) {
    const RunRecord rec = RunRecord::from_json(read_json(dir / "record.json"));
    json entry = {{"run", dir.filename().string()},
                  {"config_hash", rec.config_hash},
                  {"code_hash", rec.code_hash},
                  {"phases", rec.phases}};
    merged["runs"].push_back(entry);
    for (const auto& [phase, sources] : rec.phases.items()) {
      for (const auto& [source, rep] : sources.items()) {
        const auto& ious = rep.at("per_class_iou");
        if (!classes) classes = ious.size();
        if (ious.size() != *classes) {
          throw Error(dir.string() + ": " + std::to_string(ious.size()) + " classes, other runs have " +
                      std::to_string(*classes));
        }
        csv << dir.filename().string() << ',' << phase << ',' << source << ',';
        csv << (rep.at("miou").is_null() ? "" : fmt(rep.at("miou").get<double>())) << ','
            << rep.at("pixel_count").get<std::uint64_t>();
        for (const auto& name : class_names()) {
          const auto& v = ious.at(name);
          csv << ',' << (v.is_null() ? "" : fmt(v.get<double>()));
        }
        csv << "\n";
      }
    }
  }
  write_text(out / "report.json", merged.dump(2) + "\n");
  write_text(out / "report.csv", csv.str());

  if (dump_images) {
    const fs::path dir = runs.front();
    const ExperimentConfig run_cfg =
        fs::exists(dir / "config.json") ? ExperimentConfig::from_json(read_json(dir / "config.json")) : cfg;
    ModelSuite suite = ModelSuite::load(dir / "adapted.ckpt");
    const Dataset ds = load_dataset(run_cfg.dataset_dir);
    const std::size_t n = std::min<std::size_t>(4, ds.target_test.size());
    const fs::path img = out / "images";
    ensure_dir(img);
    set_adapt_bn_mode(suite, run_cfg.adapt);
    const Batch batch = make_batch(std::span(ds.target_test).first(n));
    const BatchLogits logits = forward_suite(suite, batch, run_cfg.adapt);
    const Tensor pred = argmax_labels(logits.fusion.teacher_logits);
    const double label_scale = 255.0 / static_cast<double>(suite.config.classes - 1);
    const std::size_t hw = batch.labels.dim(1) * batch.labels.dim(2);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& p = ds.target_test[i];
      write_ppm(img / (p.id + "_color.ppm"), p.color);
      write_pgm(img / (p.id + "_thermal.pgm"), p.thermal);
      Tensor gt = p.labels.clone();
      for (double& v : gt.mutable_data())
        if (v >= static_cast<double>(suite.config.classes)) v = 0.0;
      write_pgm(img / (p.id + "_labels.pgm"), gt, label_scale);
      Tensor one({batch.labels.dim(1), batch.labels.dim(2)});
      std::copy_n(pred.data().begin() + static_cast<std::ptrdiff_t>(i * hw), hw, one.mutable_data().begin());
      write_pgm(img / (p.id + "_pred.pgm"), one, label_scale);
      for (std::size_t k = 0; k < run_cfg.adapt.branches.size(); ++k) {
        write_weight_pgm(img / (p.id + "_weight_" + to_string(run_cfg.adapt.branches[k]) + ".pgm"),
                         logits.fusion.weights, k, i);
      }
    }
  }
  return merged;
}

// ---- selftest ---------------------------------------------------------------

namespace {

double scalar_entropy(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  double h = 0.0;
  for (double v : logits) {
    const double p = std::exp(v - m) / z;
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

struct Recorder {
  std::vector<SelftestCheck> checks;
  void add(std::string name, double measured, double tol) {
    checks.push_back({std::move(name), measured, tol, std::isfinite(measured) && measured <= tol});
  }
};

// Max of grad_check over `seeds` random inputs.
double worst_grad(const std::function<double(std::mt19937_64&)>& one, int seeds = 5) {
  double w = 0.0;
  for (int s = 0; s < seeds; ++s) {
    std::mt19937_64 rng(1000 + s);
    w = std::max(w, one(rng));
  }
  return w;
}

}  // namespace

std::vector<SelftestCheck> cmd_selftest(const SelftestOptions& opts) {
  Recorder rec;
  constexpr double kGrad = 1e-5;

  // gradients of the primitives and composites
  rec.add("grad conv2d", worst_grad([](std::mt19937_64& rng) {
            auto layer = nn::Conv2D::make(2, 3, 3, 1, 1, rng);
            layer.bias = Tensor::randn({3}, rng);
            const Tensor x = Tensor::randn({2, 2, 5, 5}, rng), proj = Tensor::randn({2, 3, 5, 5}, rng);
            std::vector<Tensor> ps{layer.weight, layer.bias};
            return std::max(grad_check([&](const Tensor& v) { return sum(nn::conv2d_forward(layer, v) * proj); }, x),
                            grad_check([&]() { return sum(nn::conv2d_forward(layer, x) * proj); }, ps));
          }),
          kGrad);
  for (nn::BnMode mode : {nn::BnMode::train, nn::BnMode::adapt, nn::BnMode::eval}) {
    rec.add(std::string("grad batchnorm ") + (mode == nn::BnMode::train ? "train" : mode == nn::BnMode::adapt ? "adapt" : "eval"),
            worst_grad([mode](std::mt19937_64& rng) {
              nn::BatchNorm2D bn(3);
              bn.mode = mode;
              bn.gamma = Tensor::uniform({3}, rng, 0.5, 1.5);
              bn.beta = Tensor::randn({3}, rng);
              bn.running_var = Tensor::uniform({3}, rng, 0.5, 2.0);
              const Tensor x = Tensor::randn({3, 3, 4, 4}, rng, 2.0), proj = Tensor::randn({3, 3, 4, 4}, rng);
              std::vector<Tensor> ps{bn.gamma, bn.beta};
              const auto saved_mean = bn.running_mean.clone(), saved_var = bn.running_var.clone();
              auto f = [&](const Tensor& v) {
                bn.running_mean = saved_mean.clone();
                bn.running_var = saved_var.clone();
                return sum(nn::batchnorm2d_forward(bn, v) * proj);
              };
              return std::max(grad_check(f, x), grad_check([&]() { return f(x); }, ps));
            }),
            kGrad);
  }
  rec.add("grad dense", worst_grad([](std::mt19937_64& rng) {
            auto layer = nn::DenseLayer::make(4, 3, rng);
            const Tensor x = Tensor::randn({2, 4}, rng), proj = Tensor::randn({2, 3}, rng);
            std::vector<Tensor> ps{layer.weight, layer.bias};
            return std::max(grad_check([&](const Tensor& v) { return sum(nn::dense_forward(layer, v) * proj); }, x),
                            grad_check([&]() { return sum(nn::dense_forward(layer, x) * proj); }, ps));
          }),
          kGrad);
  rec.add("grad relu/sigmoid/pool/upsample", worst_grad([](std::mt19937_64& rng) {
            const Tensor x = Tensor::randn({2, 3, 4, 4}, rng);
            const Tensor p1 = Tensor::randn({2, 3, 4, 4}, rng), p2 = Tensor::randn({2, 3, 2, 2}, rng),
                         p3 = Tensor::randn({2, 3, 8, 8}, rng);
            double w = 0.0;
            w = std::max(w, grad_check([&](const Tensor& v) { return sum(nn::relu(v) * p1); }, x));
            w = std::max(w, grad_check([&](const Tensor& v) { return sum(nn::sigmoid(v) * p1); }, x));
            w = std::max(w, grad_check([&](const Tensor& v) { return sum(nn::maxpool2(v) * p2); }, x));
            w = std::max(w, grad_check([&](const Tensor& v) { return sum(nn::upsample2(v) * p3); }, x));
            w = std::max(w, grad_check([&](const Tensor& v) { return sum(nn::global_maxpool(v)); }, x));
            return w;
          }),
          kGrad);
  rec.add("grad softmax/cross-entropy", worst_grad([](std::mt19937_64& rng) {
            const Tensor x = Tensor::randn({2, 4, 3, 3}, rng), proj = Tensor::randn({2, 4, 3, 3}, rng);
            Tensor labels({2, 3, 3});
            std::uniform_int_distribution<int> cls(0, 3);
            for (double& v : labels.mutable_data()) v = cls(rng);
            return std::max(grad_check([&](const Tensor& v) { return sum(nn::log_softmax(v, 1) * proj); }, x),
                            grad_check([&](const Tensor& v) { return nn::cross_entropy(v, labels); }, x));
          }),
          kGrad);
  rec.add("grad cmsa", worst_grad([](std::mt19937_64& rng) {
            ModelConfig mc;
            mc.width = 4;
            mc.depth = 1;
            mc.seed = rng();
            auto suite = build_model_suite(mc).suite;
            const CMSAModule& m = *suite.branch(Modality::interaction).cmsa();
            const Tensor fc = Tensor::randn({2, 4, 4, 4}, rng), ft = Tensor::randn({2, 4, 4, 4}, rng);
            const Tensor pc = Tensor::randn({2, 4, 4, 4}, rng), pt = Tensor::randn({2, 4, 4, 4}, rng);
            return std::max(
                grad_check([&](const Tensor& v) { auto o = cmsa_forward(m, v, ft); return sum(o.color * pc + o.thermal * pt); }, fc),
                grad_check([&](const Tensor& v) { auto o = cmsa_forward(m, fc, v); return sum(o.color * pc + o.thermal * pt); }, ft));
          }),
          kGrad);
  rec.add("grad eef fusion", worst_grad([](std::mt19937_64& rng) {
            std::vector<Tensor> ys;
            for (int k = 0; k < 3; ++k) ys.push_back(Tensor::randn({2, 4, 3, 3}, rng, 2.0));
            const Tensor proj = Tensor::randn({2, 4, 3, 3}, rng);
            double w = 0.0;
            for (std::size_t k = 0; k < 3; ++k) {
              w = std::max(w, grad_check([&](const Tensor& v) {
                             auto in = ys;
                             in[k] = v;
                             return sum(eef_fuse(in, {2.0, FusionStrategy::eef}).teacher_logits * proj);
                           }, ys[k]));
            }
            return w;
          }),
          kGrad);
  rec.add("grad objective", worst_grad([](std::mt19937_64& rng) {
            std::vector<Tensor> ys;
            for (int k = 0; k < 3; ++k) ys.push_back(Tensor::randn({2, 4, 3, 3}, rng, 2.0));
            AdaptConfig cfg;
            const std::vector<double> omega{1.0, 1.7, 2.3};
            double w = 0.0;
            for (std::size_t k = 0; k < 3; ++k) {
              // the KL teacher is a constant, so hold it fixed in the reference
              const Tensor teacher = eef_fuse(ys, cfg.fusion_config()).teacher_logits.detach();
              auto objective = [&](const Tensor& v) {
                auto in = ys;
                in[k] = v;
                const FusionOutput fo = eef_fuse(in, cfg.fusion_config());
                Tensor total = shannon_loss(fo.teacher_logits) * cfg.lambda1;
                for (std::size_t i = 0; i < 3; ++i)
                  total = total + shannon_loss(in[i]) * omega[i] + kl_to_teacher(in[i], teacher) * (cfg.lambda2 * omega[i]);
                return total;
              };
              w = std::max(w, grad_check(objective, ys[k]));
              // the library objective must give the same gradient at this point
              Tensor a = ys[k].detach(), b = ys[k].detach();
              a.set_requires_grad();
              b.set_requires_grad();
              Tape ta, tb;
              {
                TapeScope s(ta);
                auto in = ys;
                in[k] = a;
                ta.backward(tta_objective(in, eef_fuse(in, cfg.fusion_config()), cfg, omega).total);
              }
              {
                TapeScope s(tb);
                tb.backward(objective(b));
              }
              const Tensor ga = a.grad(), gb = b.grad();
              for (std::size_t i = 0; i < ga.numel(); ++i) w = std::max(w, std::abs(ga[i] - gb[i]));
            }
            return w;
          }),
          kGrad);

  // fusion properties
  {
    std::mt19937_64 rng(7);
    double norm = 0.0, monotone = 0.0, argm = 0.0, shift = 0.0;
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<Tensor> ys;
      for (int k = 0; k < 3; ++k) ys.push_back(Tensor::randn({2, 5, 4, 4}, rng, 2.0));
      std::vector<Tensor> ents;
      for (const auto& y : ys) ents.push_back(opts.entropy(y));
      const Tensor w = eef_weights(ents, 2.0);
      const std::size_t n = 2, hw = 16, c = 5;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < hw; ++p) {
          double s = 0.0;
          std::vector<double> wk(3), hk(3);
          for (std::size_t k = 0; k < 3; ++k) {
            wk[k] = w[(k * n + i) * hw + p];
            s += wk[k];
            std::vector<double> l(c);
            for (std::size_t ch = 0; ch < c; ++ch) l[ch] = ys[k][(i * c + ch) * hw + p];
            hk[k] = scalar_entropy(l);
          }
          norm = std::max(norm, std::abs(s - 1.0));
          for (std::size_t a = 0; a < 3; ++a)
            for (std::size_t b = 0; b < 3; ++b)
              if (hk[a] < hk[b] - 1e-9 && !(wk[a] > wk[b])) monotone += 1.0;
          const auto lo = std::min_element(hk.begin(), hk.end()) - hk.begin();
          const auto hi = std::max_element(wk.begin(), wk.end()) - wk.begin();
          if (lo != hi) argm += 1.0;
        }
      }
      std::vector<Tensor> shifted;
      for (const auto& y : ys) shifted.push_back(y + 3.5);
      const auto a = eef_fuse(ys, {2.0, FusionStrategy::eef}), b = eef_fuse(shifted, {2.0, FusionStrategy::eef});
      for (std::size_t i = 0; i < a.weights.numel(); ++i) shift = std::max(shift, std::abs(a.weights[i] - b.weights[i]));
    }
    rec.add("fusion weights sum to one", norm, 1e-9);
    rec.add("fusion entropy/weight monotonicity (violations)", monotone, 0.0);
    rec.add("fusion argmin entropy = argmax weight (violations)", argm, 0.0);
    rec.add("fusion shift invariance", shift, 1e-9);

    std::vector<Tensor> ents;
    for (int k = 0; k < 3; ++k) ents.push_back(opts.entropy(Tensor::randn({1, 5, 8, 8}, rng, 2.0)));
    const Tensor hot = eef_weights(ents, 1e6);
    double uni = 0.0;
    for (double v : hot.data()) uni = std::max(uni, std::abs(v - 1.0 / 3.0));
    rec.add("fusion temp=1e6 uniform", uni, 1e-6);
    const Tensor cold = eef_weights(ents, 1e-3);
    double wta = 0.0;
    for (std::size_t p = 0; p < 64; ++p) {
      double best = ents[0][p];
      std::size_t arg = 0;
      for (std::size_t k = 1; k < 3; ++k)
        if (ents[k][p] < best) best = ents[k][p], arg = k;
      double gap = 1e300;
      for (std::size_t k = 0; k < 3; ++k)
        if (k != arg) gap = std::min(gap, ents[k][p] - best);
      if (gap < 0.02) continue;  // limit needs a gap beyond temp * ln(1e6)
      for (std::size_t k = 0; k < 3; ++k) wta = std::max(wta, std::abs(cold[k * 64 + p] - (k == arg ? 1.0 : 0.0)));
    }
    rec.add("fusion temp=1e-3 winner take all", wta, 1e-6);

    // scalar oracle on 1000 pixels
    std::vector<Tensor> ys;
    for (int k = 0; k < 3; ++k) ys.push_back(Tensor::randn({1, 4, 1, 1000}, rng, 2.0));
    const auto fused = eef_fuse(ys, {2.0, FusionStrategy::eef});
    double worst = 0.0;
    for (std::size_t p = 0; p < 1000; ++p) {
      double e[3], z = 0.0, mx = -1e300;
      for (std::size_t k = 0; k < 3; ++k) {
        std::vector<double> l(4);
        for (std::size_t ch = 0; ch < 4; ++ch) l[ch] = ys[k][ch * 1000 + p];
        e[k] = (1.0 - scalar_entropy(l)) / 2.0;
        mx = std::max(mx, e[k]);
      }
      for (double& v : e) z += (v = std::exp(v - mx));
      for (std::size_t ch = 0; ch < 4; ++ch) {
        double t = 0.0;
        for (std::size_t k = 0; k < 3; ++k) t += e[k] / z * ys[k][ch * 1000 + p];
        worst = std::max(worst, std::abs(t - fused.teacher_logits[ch * 1000 + p]));
      }
    }
    rec.add("fusion scalar oracle (1000 pixels)", worst, 1e-12);
  }

  // dynamic weighting
  {
    std::mt19937_64 rng(11);
    double minw = 0.0, below = 0.0, sym = 0.0, neg = 0.0;
    for (int rep = 0; rep < 50; ++rep) {
      const Tensor a = Tensor::randn({2, 4, 3, 3}, rng, 2.0), b = Tensor::randn({2, 4, 3, 3}, rng, 2.0);
      const double dab = branch_distance(a, b), dba = branch_distance(b, a);
      sym = std::max(sym, std::abs(dab - dba));
      if (dab < 0.0) neg += 1.0;
      std::uniform_real_distribution<double> u(0.0, 1.0);
      const std::vector<double> d{u(rng), u(rng), u(rng)};
      const auto w = dynamic_weights(d);
      minw = std::max(minw, std::abs(*std::min_element(w.begin(), w.end()) - 1.0));
      for (double x : w)
        if (x < 1.0) below += 1.0;
    }
    rec.add("omega min is one", minw, 0.0);
    rec.add("omega below one (count)", below, 0.0);
    rec.add("symmetric KL symmetry", sym, 1e-12);
    rec.add("symmetric KL negative (count)", neg, 0.0);
    const Tensor p({1, 2, 1, 1}, {0.0, 0.0}), q({1, 2, 1, 1}, {std::log(0.25), std::log(0.75)});
    rec.add("symmetric KL spot value", std::abs(branch_distance(p, q) - 0.137327), 1e-6);
  }

  // freezing contract
  {
    ModelConfig mc;
    mc.width = 4;
    mc.seed = 5;
    ModelSuite suite = build_model_suite(mc).suite;
    ModelSuite before = suite.clone();
    GeneratorConfig g;
    g.height = g.width = 16;
    std::vector<ScenePair> pairs;
    for (std::uint64_t s = 0; s < 4; ++s) pairs.push_back(generate_scene(g, Domain::night, s));
    AdaptConfig cfg;
    cfg.batch_size = 2;
    cfg.lr = 1e-2;
    adapt_epoch(suite, make_batches(pairs, 2), cfg);
    auto a = before.state(), b = suite.state();
    double changed_outside = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const bool selected = a[i].is_bn_affine() && a[i].region == cfg.region;
      if (!selected && !a[i].tensor->bitwise_equal(*b[i].tensor)) changed_outside += 1.0;
    }
    rec.add("freezing contract (tensors changed outside the region)", changed_outside, 0.0);
  }

  // metrics against a direct tally
  {
    std::mt19937_64 rng(13);
    std::uniform_int_distribution<int> cls(0, 4), coin(0, 19);
    double mismatch = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
      std::vector<int> pred(64), gt(64);
      for (std::size_t i = 0; i < 64; ++i) {
        pred[i] = cls(rng);
        gt[i] = coin(rng) == 0 ? 255 : cls(rng);
      }
      ConfusionMatrix cm(5);
      cm.accumulate(std::span<const int>(pred), std::span<const int>(gt));
      double sum_iou = 0.0;
      int defined = 0;
      for (int k = 0; k < 5; ++k) {
        long inter = 0, uni = 0;
        for (std::size_t i = 0; i < 64; ++i) {
          if (gt[i] == 255) continue;
          inter += pred[i] == k && gt[i] == k;
          uni += pred[i] == k || gt[i] == k;
        }
        const auto iou = cm.iou(static_cast<std::size_t>(k));
        if (uni == 0) {
          if (iou) mismatch += 1.0;
          continue;
        }
        const double expect = static_cast<double>(inter) / static_cast<double>(uni);
        if (!iou || *iou != expect) mismatch += 1.0;
        sum_iou += expect;
        ++defined;
      }
      if (defined && cm.miou() != sum_iou / defined) mismatch += 1.0;
    }
    rec.add("confusion matrix vs direct tally (mismatches)", mismatch, 0.0);
  }
  return rec.checks;
}

}  // namespace ntta
