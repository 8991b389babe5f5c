#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntta/tensor.hpp"

namespace ntta {

enum class Domain { day, night };
std::string to_string(Domain d);

inline constexpr std::size_t kNumClasses = 5;
/// background (sky), road, car, person, bike
const std::vector<std::string>& class_names();

struct ClassAppearance {
  std::array<double, 3> rgb;
  double emissivity;
};

struct GeneratorConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t train_count = 200;
  std::size_t val_count = 50;
  std::size_t test_count = 100;
  std::uint64_t master_seed = 20240611;

  double texture_noise = 0.03;   // day color per-pixel noise
  double thermal_noise = 0.02;   // day thermal noise before blur
  double night_gamma = 2.2;
  double night_contrast = 0.5;
  double night_color_noise = 0.08;
  double night_thermal_noise = 0.01;

  std::array<ClassAppearance, kNumClasses> appearance = {{
      {{0.55, 0.70, 0.90}, 0.15},  // background
      {{0.35, 0.35, 0.38}, 0.45},  // road
      {{0.80, 0.15, 0.15}, 0.70},  // car
      {{0.48, 0.30, 0.24}, 0.85},  // person
      {{0.95, 0.85, 0.10}, 0.48},  // bike
  }};

  void validate() const;
  nlohmann::json to_json() const;
  static GeneratorConfig from_json(const nlohmann::json& j);
};

struct ScenePair {
  Tensor color;    // 3 x H x W
  Tensor thermal;  // 1 x H x W
  Tensor labels;   // H x W
  Domain domain = Domain::day;
  std::uint64_t seed = 0;
  std::string id;
};

ScenePair generate_scene(const GeneratorConfig& cfg, Domain domain, std::uint64_t seed);

struct Dataset {
  GeneratorConfig config;
  std::vector<ScenePair> source_train;
  std::vector<ScenePair> source_val;
  std::vector<ScenePair> target_test;
};

/// Day train/val and night test splits with disjoint seed ranges.
Dataset build_splits(const GeneratorConfig& cfg);

enum class Perturbation { none, crop, brightness, noise };
std::string to_string(Perturbation p);
Perturbation perturbation_from_string(const std::string& s);

/// Centered crop side for a given rate: floor(d * (1 - rate)) rounded up to even.
std::size_t crop_size(std::size_t d, double rate);

/// crop: magnitude = border rate; brightness: color factor; noise: sigma in
/// 1/255 units added to both modalities with the given seed.
ScenePair perturb(const ScenePair& pair, Perturbation kind, double magnitude, std::uint64_t seed = 0);

inline constexpr int kDatasetFormatVersion = 1;

void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& dir);
/// CRC32 of every file listed in the manifest, keyed by file name.
nlohmann::json dataset_checksums(const std::filesystem::path& dir);

struct Batch {
  Tensor color;    // B x 3 x H x W
  Tensor thermal;  // B x 1 x H x W
  Tensor labels;   // B x H x W
  std::size_t size() const { return color.dim(0); }
};

Batch make_batch(std::span<const ScenePair> pairs);
/// Consecutive batches of `batch_size`; the last one may be smaller.
std::vector<Batch> make_batches(std::span<const ScenePair> pairs, std::size_t batch_size);

/// Color image as binary PPM, thermal or labels as PGM (labels scaled to 0..255).
void write_ppm(const std::filesystem::path& path, const Tensor& color);
void write_pgm(const std::filesystem::path& path, const Tensor& gray, double scale = 255.0);

}  // namespace ntta
