#include "ntta/models.hpp"

#include <map>

namespace ntta {

std::string to_string(Modality m) {
  switch (m) {
    case Modality::color: return "color";
    case Modality::thermal: return "thermal";
    case Modality::interaction: return "interaction";
  }
  return "?";
}

std::string to_string(Region r) {
  switch (r) {
    case Region::encoder: return "encoder";
    case Region::decoder: return "decoder";
    case Region::both: return "both";
  }
  return "?";
}

Modality modality_from_string(const std::string& s) {
  if (s == "color") return Modality::color;
  if (s == "thermal") return Modality::thermal;
  if (s == "interaction") return Modality::interaction;
  throw ValueError("unknown modality '" + s + "'");
}

Region region_from_string(const std::string& s) {
  if (s == "encoder") return Region::encoder;
  if (s == "decoder") return Region::decoder;
  if (s == "both") return Region::both;
  throw ValueError("unknown parameter region '" + s + "'");
}

void ModelConfig::validate() const {
  if (classes < 2) throw ValueError("model.classes must be at least 2");
  if (width == 0) throw ValueError("model.width must be positive");
  if (depth == 0 || depth > 6) throw ValueError("model.depth must be in [1, 6]");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"classes", classes}, {"width", width}, {"depth", depth}, {"seed", seed}, {"use_cmsa", use_cmsa}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.classes = j.value("classes", c.classes);
  c.width = j.value("width", c.width);
  c.depth = j.value("depth", c.depth);
  c.seed = j.value("seed", c.seed);
  c.use_cmsa = j.value("use_cmsa", c.use_cmsa);
  c.validate();
  return c;
}

ConvBlock ConvBlock::make(std::size_t in_c, std::size_t out_c, std::mt19937_64& rng) {
  return ConvBlock{nn::Conv2D::make(in_c, out_c, 3, 1, 1, rng), nn::BatchNorm2D(out_c)};
}

Tensor ConvBlock::forward(const Tensor& x) {
  return nn::relu(nn::batchnorm2d_forward(bn, nn::conv2d_forward(conv, x)));
}

CMSAModule CMSAModule::make(std::size_t channels, std::mt19937_64& rng) {
  CMSAModule m;
  m.channel_color = nn::DenseLayer::make(channels, channels, rng);
  m.channel_thermal = nn::DenseLayer::make(channels, channels, rng);
  m.channel_shared = nn::DenseLayer::make(channels, channels, rng);
  m.spatial_color = nn::Conv2D::make(channels, 1, 1, 1, 0, rng);
  m.spatial_thermal = nn::Conv2D::make(channels, 1, 1, 1, 0, rng);
  m.spatial_shared = nn::Conv2D::make(1, 1, 1, 1, 0, rng);
  return m;
}

CmsaOutput cmsa_forward(const CMSAModule& m, const Tensor& f_color, const Tensor& f_thermal) {
  if (f_color.shape() != f_thermal.shape() || f_color.rank() != 4) {
    throw ShapeError("cmsa expects two equal NCHW features, got " + shape_str(f_color.shape()) +
                     " and " + shape_str(f_thermal.shape()));
  }
  const std::size_t n = f_color.dim(0), c = f_color.dim(1);

  const Tensor zc = reshape(nn::global_maxpool(f_color), {n, c});
  const Tensor zt = reshape(nn::global_maxpool(f_thermal), {n, c});
  const Tensor joint = nn::dense_forward(m.channel_color, zc) + nn::dense_forward(m.channel_thermal, zt);
  const Tensor vc = reshape(nn::sigmoid(nn::dense_forward(m.channel_shared, joint)), {n, c, 1, 1});
  const Tensor gc = f_color * vc + f_color;
  const Tensor gt = f_thermal * vc + f_thermal;

  const Tensor sjoint = nn::conv2d_forward(m.spatial_color, gc) + nn::conv2d_forward(m.spatial_thermal, gt);
  const Tensor vs = nn::sigmoid(nn::conv2d_forward(m.spatial_shared, sjoint));
  return CmsaOutput{gc * vs + gc, gt * vs + gt, vc, vs};
}

namespace {

std::size_t input_channels(Modality m) { return m == Modality::thermal ? 1 : 3; }

void add_conv(std::vector<StateEntry>& out, const std::string& prefix, nn::Conv2D& c, Region r) {
  out.push_back({prefix + ".weight", &c.weight, TensorRole::weight, r});
  out.push_back({prefix + ".bias", &c.bias, TensorRole::bias, r});
}

void add_dense(std::vector<StateEntry>& out, const std::string& prefix, nn::DenseLayer& d, Region r) {
  out.push_back({prefix + ".weight", &d.weight, TensorRole::weight, r});
  out.push_back({prefix + ".bias", &d.bias, TensorRole::bias, r});
}

void add_block(std::vector<StateEntry>& out, const std::string& prefix, ConvBlock& b, Region r) {
  add_conv(out, prefix + ".conv", b.conv, r);
  out.push_back({prefix + ".bn.gamma", &b.bn.gamma, TensorRole::bn_gamma, r});
  out.push_back({prefix + ".bn.beta", &b.bn.beta, TensorRole::bn_beta, r});
  out.push_back({prefix + ".bn.running_mean", &b.bn.running_mean, TensorRole::bn_running_mean, r});
  out.push_back({prefix + ".bn.running_var", &b.bn.running_var, TensorRole::bn_running_var, r});
}

}  // namespace

BranchModel BranchModel::make(Modality modality, const ModelConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  BranchModel b;
  b.modality_ = modality;
  b.cfg_ = cfg;
  const std::size_t w = cfg.width;

  std::vector<std::size_t> enc_inputs;
  if (modality == Modality::interaction) {
    enc_inputs = {3, 1};
  } else {
    enc_inputs = {input_channels(modality)};
  }
  for (std::size_t cin : enc_inputs) {
    std::vector<ConvBlock> enc;
    for (std::size_t d = 0; d < cfg.depth; ++d) enc.push_back(ConvBlock::make(d == 0 ? cin : w, w, rng));
    b.encoders_.push_back(std::move(enc));
  }
  if (modality == Modality::interaction && cfg.use_cmsa) b.cmsa_ = CMSAModule::make(w, rng);

  const std::size_t dec_in = w * enc_inputs.size();
  for (std::size_t d = 0; d < cfg.depth; ++d) b.decoder_.push_back(ConvBlock::make(d == 0 ? dec_in : w, w, rng));
  b.classifier_ = nn::Conv2D::make(w, cfg.classes, 1, 1, 0, rng);
  return b;
}

Tensor BranchModel::encode(std::size_t which, const Tensor& x) {
  Tensor h = x;
  for (auto& blk : encoders_.at(which)) h = nn::maxpool2(blk.forward(h));
  return h;
}

Tensor BranchModel::forward(const std::optional<Tensor>& color, const std::optional<Tensor>& thermal) {
  const bool need_color = modality_ != Modality::thermal;
  const bool need_thermal = modality_ != Modality::color;
  if (need_color && !color) throw ValueError(to_string(modality_) + " branch needs a color input");
  if (need_thermal && !thermal) throw ValueError(to_string(modality_) + " branch needs a thermal input");
  const Tensor& ref = need_color ? *color : *thermal;
  if (ref.rank() != 4) throw ShapeError("branch input must be NCHW, got " + shape_str(ref.shape()));
  if (need_color && color->dim(1) != 3) throw ShapeError("color input must have 3 channels");
  if (need_thermal && thermal->dim(1) != 1) throw ShapeError("thermal input must have 1 channel");
  if (need_color && need_thermal &&
      (color->dim(0) != thermal->dim(0) || color->dim(2) != thermal->dim(2) || color->dim(3) != thermal->dim(3))) {
    throw ShapeError("color and thermal inputs disagree: " + shape_str(color->shape()) + " vs " +
                     shape_str(thermal->shape()));
  }

  const std::size_t h = ref.dim(2), w = ref.dim(3);
  const std::size_t mult = std::size_t{1} << cfg_.depth;
  const std::size_t ph = (mult - h % mult) % mult, pw = (mult - w % mult) % mult;
  auto prep = [&](const Tensor& x) { return nn::pad_bottom_right(x, ph, pw); };

  Tensor feat;
  if (modality_ == Modality::interaction) {
    Tensor fc = encode(0, prep(*color));
    Tensor ft = encode(1, prep(*thermal));
    if (cmsa_) {
      CmsaOutput r = cmsa_forward(*cmsa_, fc, ft);
      fc = r.color;
      ft = r.thermal;
    }
    const std::array<Tensor, 2> parts{fc, ft};
    feat = concat(parts, 1);
  } else {
    feat = encode(0, prep(need_color ? *color : *thermal));
  }
  for (auto& blk : decoder_) feat = blk.forward(nn::upsample2(feat));
  const Tensor logits = nn::conv2d_forward(classifier_, feat);
  return nn::crop_top_left(logits, h, w);
}

void BranchModel::set_bn_mode(nn::BnMode mode) {
  for (auto& enc : encoders_)
    for (auto& blk : enc) blk.bn.mode = mode;
  for (auto& blk : decoder_) blk.bn.mode = mode;
}

void BranchModel::disable_cmsa() {
  cmsa_.reset();
  cfg_.use_cmsa = false;
}

std::vector<StateEntry> BranchModel::state() {
  std::vector<StateEntry> out;
  for (std::size_t e = 0; e < encoders_.size(); ++e) {
    std::string prefix = "enc";
    if (modality_ == Modality::interaction) prefix = e == 0 ? "enc_color" : "enc_thermal";
    for (std::size_t d = 0; d < encoders_[e].size(); ++d) {
      add_block(out, prefix + ".block" + std::to_string(d), encoders_[e][d], Region::encoder);
    }
  }
  if (cmsa_) {
    add_dense(out, "cmsa.channel_color", cmsa_->channel_color, Region::encoder);
    add_dense(out, "cmsa.channel_thermal", cmsa_->channel_thermal, Region::encoder);
    add_dense(out, "cmsa.channel_shared", cmsa_->channel_shared, Region::encoder);
    add_conv(out, "cmsa.spatial_color", cmsa_->spatial_color, Region::encoder);
    add_conv(out, "cmsa.spatial_thermal", cmsa_->spatial_thermal, Region::encoder);
    add_conv(out, "cmsa.spatial_shared", cmsa_->spatial_shared, Region::encoder);
  }
  for (std::size_t d = 0; d < decoder_.size(); ++d) {
    add_block(out, "dec.block" + std::to_string(d), decoder_[d], Region::decoder);
  }
  add_conv(out, "dec.classifier", classifier_, Region::decoder);
  return out;
}

std::vector<Tensor> BranchModel::collect_params(ParamSubset subset, Region region) {
  std::vector<Tensor> out;
  for (const auto& e : state()) {
    if (!e.is_parameter()) continue;
    if (subset == ParamSubset::bn_affine_only && !e.is_bn_affine()) continue;
    if (region != Region::both && e.region != region) continue;
    out.push_back(*e.tensor);
  }
  return out;
}

std::size_t BranchModel::parameter_count() {
  std::size_t n = 0;
  for (const auto& e : state())
    if (e.is_parameter()) n += e.tensor->numel();
  return n;
}

BranchModel BranchModel::clone() const {
  BranchModel c = *this;
  for (auto& e : c.state()) *e.tensor = e.tensor->clone();
  return c;
}

Tensor branch_forward(BranchModel& b, const std::optional<Tensor>& x_color,
                      const std::optional<Tensor>& x_thermal) {
  return b.forward(x_color, x_thermal);
}

std::vector<Tensor> collect_params(BranchModel& b, ParamSubset subset, Region region) {
  return b.collect_params(subset, region);
}

nlohmann::json ParamCountReport::to_json() const {
  return {{"color", color}, {"thermal", thermal}, {"interaction", interaction},
          {"total", color + thermal + interaction}};
}

ParamCountReport closed_form_param_counts(const ModelConfig& cfg) {
  const std::size_t w = cfg.width, d = cfg.depth, k = cfg.classes;
  // conv3x3 (weights + bias) and BN affine per block
  const auto block = [&](std::size_t cin) { return 9 * cin * w + w + 2 * w; };
  const auto encoder = [&](std::size_t cin) { return block(cin) + (d - 1) * block(w); };
  const auto decoder = [&](std::size_t cin) { return block(cin) + (d - 1) * block(w) + w * k + k; };
  const std::size_t cmsa = cfg.use_cmsa ? 3 * (w * w + w) + 2 * (w + 1) + 2 : 0;
  ParamCountReport r;
  r.color = encoder(3) + decoder(w);
  r.thermal = encoder(1) + decoder(w);
  r.interaction = encoder(3) + encoder(1) + cmsa + decoder(2 * w);
  return r;
}

BranchModel& ModelSuite::branch(Modality m) {
  for (auto& b : branches)
    if (b.modality() == m) return b;
  throw ValueError("suite has no " + to_string(m) + " branch");
}

ModelSuite ModelSuite::clone() const {
  ModelSuite s;
  s.config = config;
  for (const auto& b : branches) s.branches.push_back(b.clone());
  return s;
}

void ModelSuite::set_bn_mode(nn::BnMode mode) {
  for (auto& b : branches) b.set_bn_mode(mode);
}

std::vector<StateEntry> ModelSuite::state() {
  std::vector<StateEntry> out;
  for (auto& b : branches) {
    for (auto e : b.state()) {
      e.name = to_string(b.modality()) + "." + e.name;
      out.push_back(std::move(e));
    }
  }
  return out;
}

std::vector<nn::NamedTensor> ModelSuite::named_tensors() {
  std::vector<nn::NamedTensor> out;
  for (const auto& e : state()) out.push_back({e.name, *e.tensor});
  return out;
}

nlohmann::json ModelSuite::architecture() const {
  nlohmann::json j = config.to_json();
  j["branches"] = nlohmann::json::array();
  for (const auto& b : branches) j["branches"].push_back(to_string(b.modality()));
  j["param_counts"] = closed_form_param_counts(config).to_json();
  return j;
}

void ModelSuite::save(const std::filesystem::path& path) {
  nn::save_checkpoint(path, named_tensors(), architecture());
}

ModelSuite ModelSuite::load(const std::filesystem::path& path) {
  nn::Checkpoint ck = nn::load_checkpoint(path);
  ModelSuite s = build_model_suite(ModelConfig::from_json(ck.architecture)).suite;
  std::map<std::string, Tensor> by_name;
  for (auto& nt : ck.tensors) by_name.emplace(nt.name, nt.tensor);
  auto entries = s.state();
  if (entries.size() != by_name.size()) {
    throw ValueError(path.string() + ": checkpoint has " + std::to_string(by_name.size()) +
                     " tensors, architecture expects " + std::to_string(entries.size()));
  }
  for (auto& e : entries) {
    auto it = by_name.find(e.name);
    if (it == by_name.end()) throw ValueError(path.string() + ": missing tensor " + e.name);
    if (it->second.shape() != e.tensor->shape()) {
      throw ShapeError(path.string() + ": " + e.name + " has shape " + shape_str(it->second.shape()) +
                       ", expected " + shape_str(e.tensor->shape()));
    }
    *e.tensor = it->second;
  }
  return s;
}

SuiteBuild build_model_suite(const ModelConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  SuiteBuild out;
  out.suite.config = cfg;
  for (Modality m : kBranchOrder) out.suite.branches.push_back(BranchModel::make(m, cfg, rng));
  out.counts = closed_form_param_counts(cfg);
  const std::size_t actual[] = {out.suite.branches[0].parameter_count(), out.suite.branches[1].parameter_count(),
                                out.suite.branches[2].parameter_count()};
  if (actual[0] != out.counts.color || actual[1] != out.counts.thermal || actual[2] != out.counts.interaction) {
    throw Error("parameter count does not match the architecture formula");
  }
  return out;
}

}  // namespace ntta
