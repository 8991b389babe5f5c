#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>

#include "ntta/harness.hpp"

using namespace ntta;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::string data;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment config JSON")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.sets, "dotted override, e.g. adapt.temp=2 (repeatable)");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--data", c.data, "dataset directory");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(c.config);
  nlohmann::json j = cfg.to_json();
  for (const auto& s : c.sets) apply_override(j, s);
  if (!c.out.empty()) j["out_dir"] = c.out;
  if (!c.data.empty()) j["dataset_dir"] = c.data;
  return ExperimentConfig::from_json(j);
}

std::string miou_text(const nlohmann::json& report) {
  const auto& m = report.at("teacher").at("miou");
  if (m.is_null()) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", m.get<double>());
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Night-time RGB-thermal test-time adaptation lab"};
  app.require_subcommand(1);

  Common gen_opts, pre_opts, adapt_opts, ablate_opts, report_opts;
  bool force = false;
  auto* gen = app.add_subcommand("gen", "generate the synthetic day/night dataset");
  add_common(gen, gen_opts);
  gen->add_flag("--force", force, "overwrite an existing dataset directory");

  auto* pre = app.add_subcommand("pretrain", "train all branches on the day split");
  add_common(pre, pre_opts);

  std::string checkpoint;
  auto* adapt = app.add_subcommand("adapt", "adapt on the night split and evaluate");
  add_common(adapt, adapt_opts);
  adapt->add_option("--checkpoint", checkpoint, "source checkpoint (default <out>/source.ckpt)");

  std::size_t jobs = 1;
  auto* ablate = app.add_subcommand("ablate", "run the ablation tables");
  add_common(ablate, ablate_opts);
  ablate->add_option("--jobs", jobs, "parallel cells")->check(CLI::PositiveNumber);

  std::vector<std::string> runs;
  bool images = false;
  auto* report = app.add_subcommand("report", "merge run directories into one report");
  add_common(report, report_opts);
  report->add_option("runs", runs, "run directories holding record.json")->required()->check(CLI::ExistingDirectory);
  report->add_flag("--images", images, "dump prediction and fusion-weight images of the first run");

  bool flip_entropy = false;
  auto* self = app.add_subcommand("selftest", "run the invariant checks");
  self->add_flag("--flip-entropy-sign", flip_entropy, "mutation check: feed negated entropies to the fusion checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) {
      const ExperimentConfig cfg = resolve(gen_opts);
      const Dataset ds = cmd_gen(cfg, force);
      std::cout << "wrote " << cfg.dataset_dir.string() << ": " << ds.source_train.size() << " train, "
                << ds.source_val.size() << " val, " << ds.target_test.size() << " test\n";
    } else if (*pre) {
      const ExperimentConfig cfg = resolve(pre_opts);
      const PretrainReport r = cmd_pretrain(cfg);
      std::cout << "final loss " << r.result.epoch_loss.back() << "\n"
                << "day-val teacher mIoU " << miou_text(r.day_val.to_json()) << " (untrained "
                << miou_text(r.untrained_day_val.to_json()) << ")\n"
                << "night source-only teacher mIoU " << miou_text(r.source_only.to_json()) << "\n";
    } else if (*adapt) {
      const ExperimentConfig cfg = resolve(adapt_opts);
      const RunRecord rec =
          cmd_adapt(cfg, checkpoint.empty() ? std::nullopt : std::optional<std::filesystem::path>(checkpoint));
      for (const char* phase : {"source_only", "pre_adapt", "post"})
        std::cout << phase << " teacher mIoU " << miou_text(rec.phases.at(phase)) << "\n";
      std::cout << "metrics in " << (cfg.out_dir / "metrics.json").string() << "\n";
    } else if (*ablate) {
      const ExperimentConfig cfg = resolve(ablate_opts);
      const AblationReport r = cmd_ablate(cfg, jobs, &std::cerr);
      std::size_t failed = 0;
      for (const auto& c : r.cells) failed += c.error.has_value();
      std::cout << r.cells.size() << " cells, " << failed << " failed; tables in "
                << (cfg.out_dir / "ablation").string() << "\n";
      if (failed) return kExitRuntime;
    } else if (*report) {
      const ExperimentConfig cfg = resolve(report_opts);
      std::vector<std::filesystem::path> dirs(runs.begin(), runs.end());
      const std::filesystem::path out = report_opts.out.empty() ? std::filesystem::path("report") : std::filesystem::path(report_opts.out);
      const auto merged = cmd_report(dirs, out, cfg, images);
      std::cout << merged.at("runs").size() << " runs merged into " << (out / "report.json").string() << "\n";
    } else if (*self) {
      SelftestOptions opts;
      if (flip_entropy) opts.entropy = [](const Tensor& logits) { return -pixel_entropy(logits); };
      const auto t0 = std::chrono::steady_clock::now();
      const auto checks = cmd_selftest(opts);
      std::size_t failed = 0;
      for (const auto& c : checks) {
        std::printf("%s  %-55s measured %.3e  tolerance %.1e\n", c.passed ? "PASS" : "FAIL", c.name.c_str(),
                    c.measured, c.tolerance);
        failed += !c.passed;
      }
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("%zu checks, %zu failed, %.1f s\n", checks.size(), failed, secs);
      return failed ? kExitSelftest : kExitOk;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
