#include "ntta/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "ntta/tensor_io.hpp"

namespace ntta {

std::string to_string(Domain d) { return d == Domain::day ? "day" : "night"; }

const std::vector<std::string>& class_names() {
  static const std::vector<std::string> names{"background", "road", "car", "person", "bike"};
  return names;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Distinct streams for the layout, the night transform and perturbations.
constexpr std::uint64_t kLayoutStream = 0x6c61796f7574ull;
constexpr std::uint64_t kNightStream = 0x6e69676874ull;
constexpr std::uint64_t kPerturbStream = 0x7065727475ull;

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t tag) { return std::mt19937_64(splitmix64(seed ^ splitmix64(tag))); }

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

struct Shape2 {
  int cls;
  bool ellipse;
  double cy, cx, hy, hx;  // center and half extents
};

void blur3(std::vector<double>& img, std::size_t h, std::size_t w) {
  std::vector<double> out(img.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const auto yy = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(y) + dy, 0, static_cast<long>(h) - 1));
          const auto xx = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(x) + dx, 0, static_cast<long>(w) - 1));
          s += img[yy * w + xx];
        }
      out[y * w + x] = s / 9.0;
    }
  img.swap(out);
}

}  // namespace

void GeneratorConfig::validate() const {
  if (height < 8 || width < 8) throw ValueError("scene size must be at least 8x8");
  if (train_count == 0 || val_count == 0 || test_count == 0) throw ValueError("split counts must be positive");
  if (!(night_gamma > 1.0)) throw ValueError("night gamma must exceed 1");
  if (!(night_contrast > 0.0 && night_contrast <= 1.0)) throw ValueError("night contrast must be in (0, 1]");
  if (texture_noise < 0 || thermal_noise < 0 || night_color_noise < 0 || night_thermal_noise < 0) {
    throw ValueError("noise levels must be nonnegative");
  }
  if (!(night_color_noise > night_thermal_noise)) {
    throw ValueError("night color noise must exceed night thermal noise");
  }
}

nlohmann::json GeneratorConfig::to_json() const {
  nlohmann::json app = nlohmann::json::array();
  for (const auto& a : appearance) app.push_back({{"rgb", a.rgb}, {"emissivity", a.emissivity}});
  return {{"height", height},
          {"width", width},
          {"train_count", train_count},
          {"val_count", val_count},
          {"test_count", test_count},
          {"master_seed", master_seed},
          {"texture_noise", texture_noise},
          {"thermal_noise", thermal_noise},
          {"night_gamma", night_gamma},
          {"night_contrast", night_contrast},
          {"night_color_noise", night_color_noise},
          {"night_thermal_noise", night_thermal_noise},
          {"appearance", app}};
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.train_count = j.value("train_count", c.train_count);
  c.val_count = j.value("val_count", c.val_count);
  c.test_count = j.value("test_count", c.test_count);
  c.master_seed = j.value("master_seed", c.master_seed);
  c.texture_noise = j.value("texture_noise", c.texture_noise);
  c.thermal_noise = j.value("thermal_noise", c.thermal_noise);
  c.night_gamma = j.value("night_gamma", c.night_gamma);
  c.night_contrast = j.value("night_contrast", c.night_contrast);
  c.night_color_noise = j.value("night_color_noise", c.night_color_noise);
  c.night_thermal_noise = j.value("night_thermal_noise", c.night_thermal_noise);
  if (j.contains("appearance")) {
    const auto& app = j.at("appearance");
    if (app.size() != kNumClasses) throw ValueError("appearance table must list 5 classes");
    for (std::size_t k = 0; k < kNumClasses; ++k) {
      c.appearance[k].rgb = app[k].at("rgb").get<std::array<double, 3>>();
      c.appearance[k].emissivity = app[k].at("emissivity").get<double>();
    }
  }
  c.validate();
  return c;
}

ScenePair generate_scene(const GeneratorConfig& cfg, Domain domain, std::uint64_t seed) {
  cfg.validate();
  const std::size_t h = cfg.height, w = cfg.width, hw = h * w;
  auto rng = stream(seed, kLayoutStream);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  std::normal_distribution<double> gauss(0.0, 1.0);

  // two-band background split at the horizon
  std::vector<int> label(hw);
  const auto horizon = static_cast<std::size_t>(std::lround(uni(0.3, 0.55) * static_cast<double>(h)));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) label[y * w + x] = y < horizon ? 0 : 1;

  std::vector<Shape2> shapes;
  const int count = std::uniform_int_distribution<int>(2, 5)(rng);
  const double sy = static_cast<double>(h) / 32.0, sx = static_cast<double>(w) / 32.0;
  for (int i = 0; i < count; ++i) {
    Shape2 s;
    s.cls = std::uniform_int_distribution<int>(2, 4)(rng);
    s.ellipse = u01(rng) < 0.5;
    if (s.cls == 2) {
      s.hy = uni(3.0, 5.0) * sy;
      s.hx = uni(4.5, 8.0) * sx;
    } else if (s.cls == 3) {
      s.hy = uni(4.0, 7.0) * sy;
      s.hx = uni(2.0, 3.5) * sx;
    } else {
      s.hy = uni(2.5, 4.0) * sy;
      s.hx = uni(3.0, 5.0) * sx;
    }
    // standing on the road: bottom edge below the horizon
    const double bottom = uni(static_cast<double>(horizon) + 1.0, static_cast<double>(h) - 0.5);
    s.cy = bottom - s.hy;
    s.cx = uni(0.0, static_cast<double>(w));
    shapes.push_back(s);
  }
  std::vector<double> tint(hw, 1.0);
  for (const auto& s : shapes) {
    const double jitter = uni(0.9, 1.1);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = (static_cast<double>(y) + 0.5 - s.cy) / s.hy;
        const double dx = (static_cast<double>(x) + 0.5 - s.cx) / s.hx;
        const bool inside = s.ellipse ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
        if (inside) {
          label[y * w + x] = s.cls;
          tint[y * w + x] = jitter;
        }
      }
  }

  std::vector<double> color(3 * hw), thermal(hw);
  for (std::size_t i = 0; i < hw; ++i) {
    const auto& a = cfg.appearance[static_cast<std::size_t>(label[i])];
    for (std::size_t c = 0; c < 3; ++c) {
      color[c * hw + i] = clamp01(a.rgb[c] * tint[i] + cfg.texture_noise * gauss(rng));
    }
    thermal[i] = a.emissivity + cfg.thermal_noise * gauss(rng);
  }
  blur3(thermal, h, w);
  for (double& v : thermal) v = clamp01(v);

  if (domain == Domain::night) {
    auto nrng = stream(seed, kNightStream);
    for (std::size_t c = 0; c < 3; ++c) {
      double m = 0.0;
      for (std::size_t i = 0; i < hw; ++i) {
        double& v = color[c * hw + i];
        v = std::pow(v, cfg.night_gamma);
        m += v;
      }
      m /= static_cast<double>(hw);
      for (std::size_t i = 0; i < hw; ++i) {
        double& v = color[c * hw + i];
        v = m + cfg.night_contrast * (v - m);
      }
    }
    for (double& v : color) v = clamp01(v + cfg.night_color_noise * gauss(nrng));
    for (double& v : thermal) v = clamp01(v + cfg.night_thermal_noise * gauss(nrng));
  }

  ScenePair p;
  p.color = Tensor({3, h, w}, std::move(color));
  p.thermal = Tensor({1, h, w}, std::move(thermal));
  p.labels = Tensor({h, w}, std::vector<double>(label.begin(), label.end()));
  p.domain = domain;
  p.seed = seed;
  return p;
}

namespace {

constexpr std::uint64_t kValOffset = 1'000'000;
constexpr std::uint64_t kTestOffset = 2'000'000;

std::vector<ScenePair> make_split(const GeneratorConfig& cfg, const std::string& prefix, std::size_t n,
                                  std::uint64_t base, Domain domain) {
  std::vector<ScenePair> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ScenePair p = generate_scene(cfg, domain, base + i);
    char id[32];
    std::snprintf(id, sizeof id, "%s_%04zu", prefix.c_str(), i);
    p.id = id;
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

Dataset build_splits(const GeneratorConfig& cfg) {
  cfg.validate();
  if (std::max({cfg.train_count, cfg.val_count, cfg.test_count}) > kValOffset) {
    throw ValueError("split counts must stay below 1e6 to keep seed ranges disjoint");
  }
  Dataset ds;
  ds.config = cfg;
  ds.source_train = make_split(cfg, "train", cfg.train_count, cfg.master_seed, Domain::day);
  ds.source_val = make_split(cfg, "val", cfg.val_count, cfg.master_seed + kValOffset, Domain::day);
  ds.target_test = make_split(cfg, "test", cfg.test_count, cfg.master_seed + kTestOffset, Domain::night);
  return ds;
}

std::string to_string(Perturbation p) {
  switch (p) {
    case Perturbation::none: return "none";
    case Perturbation::crop: return "crop";
    case Perturbation::brightness: return "brightness";
    case Perturbation::noise: return "noise";
  }
  return "?";
}

Perturbation perturbation_from_string(const std::string& s) {
  if (s == "none") return Perturbation::none;
  if (s == "crop") return Perturbation::crop;
  if (s == "brightness") return Perturbation::brightness;
  if (s == "noise") return Perturbation::noise;
  throw ValueError("unknown perturbation '" + s + "'");
}

std::size_t crop_size(std::size_t d, double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ValueError("crop rate must be in [0, 1)");
  auto s = static_cast<std::size_t>(std::floor(static_cast<double>(d) * (1.0 - rate) + 1e-9));
  if (s % 2 == 1) ++s;
  return std::min(s, d);
}

ScenePair perturb(const ScenePair& pair, Perturbation kind, double magnitude, std::uint64_t seed) {
  ScenePair out = pair;
  const std::size_t h = pair.labels.dim(0), w = pair.labels.dim(1);
  switch (kind) {
    case Perturbation::none:
      out.color = pair.color.clone();
      out.thermal = pair.thermal.clone();
      out.labels = pair.labels.clone();
      break;
    case Perturbation::crop: {
      const std::size_t ch = crop_size(h, magnitude), cw = crop_size(w, magnitude);
      if (ch < 8 || cw < 8) throw ValueError("crop would leave fewer than 8 pixels");
      const std::size_t oy = (h - ch) / 2, ox = (w - cw) / 2;
      auto crop = [&](const Tensor& t, std::size_t planes) {
        std::vector<double> v(planes * ch * cw);
        for (std::size_t p = 0; p < planes; ++p)
          for (std::size_t y = 0; y < ch; ++y)
            for (std::size_t x = 0; x < cw; ++x) v[(p * ch + y) * cw + x] = t[(p * h + y + oy) * w + x + ox];
        return v;
      };
      out.color = Tensor({3, ch, cw}, crop(pair.color, 3));
      out.thermal = Tensor({1, ch, cw}, crop(pair.thermal, 1));
      out.labels = Tensor({ch, cw}, crop(pair.labels, 1));
      break;
    }
    case Perturbation::brightness: {
      if (!(magnitude >= 0.0)) throw ValueError("brightness factor must be nonnegative");
      std::vector<double> v(pair.color.data().begin(), pair.color.data().end());
      if (magnitude != 1.0)
        for (double& x : v) x = clamp01(x * magnitude);
      out.color = Tensor({3, h, w}, std::move(v));
      out.thermal = pair.thermal.clone();
      out.labels = pair.labels.clone();
      break;
    }
    case Perturbation::noise: {
      if (!(magnitude >= 0.0)) throw ValueError("noise level must be nonnegative");
      auto rng = stream(pair.seed ^ splitmix64(seed), kPerturbStream);
      std::normal_distribution<double> g(0.0, magnitude / 255.0);
      std::vector<double> c(pair.color.data().begin(), pair.color.data().end());
      std::vector<double> t(pair.thermal.data().begin(), pair.thermal.data().end());
      for (double& x : c) x = clamp01(x + g(rng));
      for (double& x : t) x = clamp01(x + g(rng));
      out.color = Tensor({3, h, w}, std::move(c));
      out.thermal = Tensor({1, h, w}, std::move(t));
      out.labels = pair.labels.clone();
      break;
    }
  }
  return out;
}

// ---- dataset directory -----------------------------------------------------

namespace {

const char* kSplitNames[] = {"source_train", "source_val", "target_test"};

std::vector<ScenePair>& split_ref(Dataset& ds, std::size_t i) {
  return i == 0 ? ds.source_train : i == 1 ? ds.source_val : ds.target_test;
}

nlohmann::json read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream f(path);
  if (!f) throw IoError("missing dataset manifest " + path.string());
  nlohmann::json m;
  try {
    f >> m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  if (m.value("format_version", -1) != kDatasetFormatVersion) {
    throw IoError(path.string() + ": unsupported dataset format version");
  }
  return m;
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  nlohmann::json splits = nlohmann::json::object();
  nlohmann::json files = nlohmann::json::object();
  const std::vector<ScenePair>* split_lists[] = {&ds.source_train, &ds.source_val, &ds.target_test};
  for (std::size_t s = 0; s < 3; ++s) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& p : *split_lists[s]) {
      entries.push_back({{"id", p.id}, {"seed", p.seed}, {"domain", to_string(p.domain)}});
      const std::pair<const char*, const Tensor*> parts[] = {
          {"_color.ntt", &p.color}, {"_thermal.ntt", &p.thermal}, {"_labels.ntt", &p.labels}};
      for (const auto& [suffix, t] : parts) {
        const std::string name = p.id + suffix;
        const auto bytes = encode_ntt(*t);
        write_file_bytes(dir / name, bytes);
        files[name] = crc32_of(bytes);
      }
    }
    splits[kSplitNames[s]] = entries;
  }
  const nlohmann::json manifest = {{"format_version", kDatasetFormatVersion},
                                   {"generator", ds.config.to_json()},
                                   {"counts",
                                    {{"source_train", ds.source_train.size()},
                                     {"source_val", ds.source_val.size()},
                                     {"target_test", ds.target_test.size()}}},
                                   {"crop_rule", "side = floor(d * (1 - rate)), rounded up to even"},
                                   {"splits", splits},
                                   {"files", files}};
  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  if (!f) throw IoError("cannot write " + (dir / "manifest.json").string());
  f << manifest.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const nlohmann::json m = read_manifest(dir);
  Dataset ds;
  ds.config = GeneratorConfig::from_json(m.at("generator"));
  const auto& files = m.at("files");
  auto load = [&](const std::string& name) {
    const auto path = dir / name;
    if (!std::filesystem::exists(path)) throw IoError("missing dataset file " + path.string());
    const auto bytes = read_file_bytes(path);
    if (!files.contains(name) || crc32_of(bytes) != files.at(name).get<std::uint32_t>()) {
      throw IoError("checksum mismatch in " + path.string());
    }
    return decode_ntt(bytes, path.string());
  };
  for (std::size_t s = 0; s < 3; ++s) {
    for (const auto& e : m.at("splits").at(kSplitNames[s])) {
      ScenePair p;
      p.id = e.at("id").get<std::string>();
      p.seed = e.at("seed").get<std::uint64_t>();
      p.domain = e.at("domain").get<std::string>() == "night" ? Domain::night : Domain::day;
      p.color = load(p.id + "_color.ntt");
      p.thermal = load(p.id + "_thermal.ntt");
      p.labels = load(p.id + "_labels.ntt");
      if (p.color.rank() != 3 || p.color.dim(0) != 3 || p.thermal.rank() != 3 || p.thermal.dim(0) != 1 ||
          p.labels.rank() != 2 || p.color.dim(1) != p.labels.dim(0) || p.color.dim(2) != p.labels.dim(1) ||
          p.thermal.dim(1) != p.labels.dim(0) || p.thermal.dim(2) != p.labels.dim(1)) {
        throw IoError("sample " + p.id + " has inconsistent shapes");
      }
      split_ref(ds, s).push_back(std::move(p));
    }
  }
  return ds;
}

nlohmann::json dataset_checksums(const std::filesystem::path& dir) { return read_manifest(dir).at("files"); }

Batch make_batch(std::span<const ScenePair> pairs) {
  if (pairs.empty()) throw ValueError("cannot build an empty batch");
  const std::size_t h = pairs[0].labels.dim(0), w = pairs[0].labels.dim(1), hw = h * w;
  const std::size_t n = pairs.size();
  std::vector<double> c(n * 3 * hw), t(n * hw), l(n * hw);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = pairs[i];
    if (p.labels.dim(0) != h || p.labels.dim(1) != w) throw ShapeError("batch samples differ in size");
    std::copy(p.color.data().begin(), p.color.data().end(), c.begin() + static_cast<long>(i * 3 * hw));
    std::copy(p.thermal.data().begin(), p.thermal.data().end(), t.begin() + static_cast<long>(i * hw));
    std::copy(p.labels.data().begin(), p.labels.data().end(), l.begin() + static_cast<long>(i * hw));
  }
  return Batch{Tensor({n, 3, h, w}, std::move(c)), Tensor({n, 1, h, w}, std::move(t)),
               Tensor({n, h, w}, std::move(l))};
}

std::vector<Batch> make_batches(std::span<const ScenePair> pairs, std::size_t batch_size) {
  if (batch_size == 0) throw ValueError("batch size must be positive");
  std::vector<Batch> out;
  for (std::size_t i = 0; i < pairs.size(); i += batch_size) {
    out.push_back(make_batch(pairs.subspan(i, std::min(batch_size, pairs.size() - i))));
  }
  return out;
}

void write_ppm(const std::filesystem::path& path, const Tensor& color) {
  if (color.rank() != 3 || color.dim(0) != 3) throw ShapeError("write_ppm expects 3 x H x W");
  const std::size_t h = color.dim(1), w = color.dim(2);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot create " + path.string());
  f << "P6\n" << w << ' ' << h << "\n255\n";
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      f.put(static_cast<char>(static_cast<unsigned char>(std::lround(clamp01(color[c * h * w + i]) * 255.0))));
    }
}

void write_pgm(const std::filesystem::path& path, const Tensor& gray, double scale) {
  const std::size_t h = gray.dim(gray.rank() - 2), w = gray.dim(gray.rank() - 1);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot create " + path.string());
  f << "P5\n" << w << ' ' << h << "\n255\n";
  for (std::size_t i = 0; i < h * w; ++i) {
    f.put(static_cast<char>(static_cast<unsigned char>(std::clamp(std::lround(gray[i] * scale), 0L, 255L))));
  }
}

}  // namespace ntta
