// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails.
//
// usage: ntta_acceptance <config.json> <work dir>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>

#include "ntta/harness.hpp"
#include "ntta/nn.hpp"
#include "oracles.hpp"

using namespace ntta;
namespace fs = std::filesystem;

namespace {

// Post-adaptation minus source-only teacher mIoU on the benchmark seed,
// frozen from the first full run (measured 0.45713, rounded down).
constexpr double kGoldenMargin = 0.457;
constexpr double kBand = 0.005;  // 0.5 mIoU points

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int g_failed = 0;
std::set<int> g_reported;

void report(int id, bool ok, const std::string& what) {
  g_reported.insert(id);
  std::printf("[%s] criterion %d: %s\n", ok ? "PASS" : "FAIL", id, what.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failed;
}

std::string num(double v, const char* f = "%.3g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Tape gradient of scalar f at x against the scalar central-difference oracle.
double rel_grad_error(const std::function<Tensor(const Tensor&)>& f, const Tensor& x0) {
  Tensor x = x0.detach();
  x.set_requires_grad();
  std::vector<double> analytic(x0.numel(), 0.0);
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor y = f(x);
    if (y.tape_id()) {
      tape.backward(y);
      if (x.has_grad()) analytic = values(x.grad());
    }
  }
  const Shape shape = x0.shape();
  auto scalar = [&](const std::vector<double>& v) {
    PauseTape pause;
    return f(Tensor(shape, v)).item();
  };
  const auto numeric = oracle::central_difference(scalar, values(x0), 1e-6);
  double worst = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double d = std::max({1.0, std::abs(analytic[i]), std::abs(numeric[i])});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / d);
  }
  return worst;
}

// ---- criterion 1 -------------------------------------------------------------

void criterion_gradients() {
  const auto t0 = Clock::now();
  std::vector<std::pair<std::string, std::function<double(std::mt19937_64&)>>> checks;
  auto add = [&](std::string name, std::function<double(std::mt19937_64&)> fn) {
    checks.emplace_back(std::move(name), std::move(fn));
  };

  add("elementwise", [](std::mt19937_64& rng) {
    const Tensor a = Tensor::uniform({2, 3}, rng, 0.5, 2.0), b = Tensor::uniform({2, 3}, rng, 0.5, 2.0);
    const Tensor p = Tensor::randn({2, 3}, rng);
    double w = 0.0;
    w = std::max(w, rel_grad_error([&](const Tensor& x) { return sum((x + b) * p); }, a));
    w = std::max(w, rel_grad_error([&](const Tensor& x) { return sum((x - b) * p); }, a));
    w = std::max(w, rel_grad_error([&](const Tensor& x) { return sum(x * b * p); }, a));
    w = std::max(w, rel_grad_error([&](const Tensor& x) { return sum(b / x * p); }, a));
    w = std::max(w, rel_grad_error([&](const Tensor& x) { return sum(exp(x) * p); }, a));
    w = std::max(w, rel_grad_error([&](const Tensor& x) { return sum(log(x) * p); }, a));
    w = std::max(w, rel_grad_error([&](const Tensor& x) { return sum(-x * p); }, a));
    return w;
  });
  add("reductions/layout", [](std::mt19937_64& rng) {
    const Tensor a = Tensor::randn({2, 3, 4}, rng), m = Tensor::randn({4, 5}, rng);
    const Tensor p3 = Tensor::randn({2, 3}, rng), p5 = Tensor::randn({6, 5}, rng);
    double w = 0.0;
    w = std::max(w, rel_grad_error([&](const Tensor& x) { return sum(mean(x, {2}) * p3); }, a));
    w = std::max(w, rel_grad_error([&](const Tensor& x) { return sum(max(x, {2}) * p3); }, a));
    w = std::max(w, rel_grad_error([&](const Tensor& x) { return sum(matmul(reshape(x, {6, 4}), m) * p5); }, a));
    w = std::max(w, rel_grad_error([&](const Tensor& x) { return sum(transpose(reshape(x, {6, 4})) * transpose(reshape(x, {6, 4}))); }, a));
    w = std::max(w, rel_grad_error([&](const Tensor& x) {
      const std::vector<Tensor> parts{x, x * 2.0};
      return sum(concat(parts, 1) * concat(parts, 1));
    }, a));
    return w;
  });
  add("conv2d", [](std::mt19937_64& rng) {
    auto layer = nn::Conv2D::make(2, 3, 3, 1, 1, rng);
    layer.bias = Tensor::randn({3}, rng);
    const Tensor x = Tensor::randn({2, 2, 5, 5}, rng), p = Tensor::randn({2, 3, 5, 5}, rng);
    double w = rel_grad_error([&](const Tensor& v) { return sum(nn::conv2d_forward(layer, v) * p); }, x);
    const Tensor w0 = layer.weight;
    w = std::max(w, rel_grad_error([&](const Tensor& v) {
      nn::Conv2D l = layer;
      l.weight = v;
      return sum(nn::conv2d_forward(l, x) * p);
    }, w0));
    return w;
  });
  for (nn::BnMode mode : {nn::BnMode::train, nn::BnMode::adapt, nn::BnMode::eval}) {
    add(std::string("batchnorm ") + (mode == nn::BnMode::train ? "train" : mode == nn::BnMode::adapt ? "adapt" : "eval"),
        [mode](std::mt19937_64& rng) {
          nn::BatchNorm2D bn(3);
          bn.mode = mode;
          bn.gamma = Tensor::uniform({3}, rng, 0.5, 1.5);
          bn.beta = Tensor::randn({3}, rng);
          bn.running_var = Tensor::uniform({3}, rng, 0.5, 2.0);
          const Tensor x = Tensor::randn({3, 3, 4, 4}, rng, 2.0), p = Tensor::randn({3, 3, 4, 4}, rng);
          auto run = [&](const Tensor& in, const Tensor& g) {
            nn::BatchNorm2D copy = bn;
            copy.gamma = g;
            copy.running_mean = bn.running_mean.clone();
            copy.running_var = bn.running_var.clone();
            return sum(nn::batchnorm2d_forward(copy, in) * p);
          };
          return std::max(rel_grad_error([&](const Tensor& v) { return run(v, bn.gamma); }, x),
                          rel_grad_error([&](const Tensor& g) { return run(x, g); }, bn.gamma));
        });
  }
  add("dense", [](std::mt19937_64& rng) {
    const auto layer = nn::DenseLayer::make(4, 3, rng);
    const Tensor x = Tensor::randn({2, 4}, rng), p = Tensor::randn({2, 3}, rng);
    return rel_grad_error([&](const Tensor& v) { return sum(nn::dense_forward(layer, v) * p); }, x);
  });
  add("activations/pooling/resize", [](std::mt19937_64& rng) {
    const Tensor x = Tensor::randn({2, 3, 4, 4}, rng);
    const Tensor p = Tensor::randn({2, 3, 4, 4}, rng), p2 = Tensor::randn({2, 3, 2, 2}, rng),
                 p8 = Tensor::randn({2, 3, 8, 8}, rng), p5 = Tensor::randn({2, 3, 5, 6}, rng),
                 p3 = Tensor::randn({2, 3, 3, 2}, rng);
    double w = 0.0;
    w = std::max(w, rel_grad_error([&](const Tensor& v) { return sum(nn::relu(v) * p); }, x));
    w = std::max(w, rel_grad_error([&](const Tensor& v) { return sum(nn::sigmoid(v) * p); }, x));
    w = std::max(w, rel_grad_error([&](const Tensor& v) { return sum(nn::maxpool2(v) * p2); }, x));
    w = std::max(w, rel_grad_error([&](const Tensor& v) { return sum(nn::global_maxpool(v)); }, x));
    w = std::max(w, rel_grad_error([&](const Tensor& v) { return sum(nn::upsample2(v) * p8); }, x));
    w = std::max(w, rel_grad_error([&](const Tensor& v) { return sum(nn::pad_bottom_right(v, 1, 2) * p5); }, x));
    w = std::max(w, rel_grad_error([&](const Tensor& v) { return sum(nn::crop_top_left(v, 3, 2) * p3); }, x));
    return w;
  });
  add("softmax/cross-entropy", [](std::mt19937_64& rng) {
    const Tensor x = Tensor::randn({2, 4, 3, 3}, rng), p = Tensor::randn({2, 4, 3, 3}, rng);
    Tensor labels({2, 3, 3});
    std::uniform_int_distribution<int> cls(0, 3);
    for (double& v : labels.mutable_data()) v = cls(rng);
    labels.mutable_data()[4] = 255;
    double w = 0.0;
    w = std::max(w, rel_grad_error([&](const Tensor& v) { return sum(nn::softmax(v, 1) * p); }, x));
    w = std::max(w, rel_grad_error([&](const Tensor& v) { return sum(nn::log_softmax(v, 1) * p); }, x));
    w = std::max(w, rel_grad_error([&](const Tensor& v) { return nn::cross_entropy(v, labels); }, x));
    return w;
  });
  add("CMSA forward", [](std::mt19937_64& rng) {
    ModelConfig mc;
    mc.width = 4;
    mc.depth = 1;
    mc.seed = rng();
    auto suite = build_model_suite(mc).suite;
    CMSAModule& m = *suite.branch(Modality::interaction).cmsa();
    const Tensor fc = Tensor::randn({2, 4, 4, 4}, rng), ft = Tensor::randn({2, 4, 4, 4}, rng);
    const Tensor pc = Tensor::randn({2, 4, 4, 4}, rng), pt = Tensor::randn({2, 4, 4, 4}, rng);
    auto out = [&](const CMSAModule& mod, const Tensor& a, const Tensor& b) {
      const CmsaOutput o = cmsa_forward(mod, a, b);
      return sum(o.color * pc + o.thermal * pt);
    };
    double w = 0.0;
    w = std::max(w, rel_grad_error([&](const Tensor& v) { return out(m, v, ft); }, fc));
    w = std::max(w, rel_grad_error([&](const Tensor& v) { return out(m, fc, v); }, ft));
    w = std::max(w, rel_grad_error([&](const Tensor& v) {
      CMSAModule copy = m;
      copy.channel_shared.weight = v;
      return out(copy, fc, ft);
    }, m.channel_shared.weight));
    w = std::max(w, rel_grad_error([&](const Tensor& v) {
      CMSAModule copy = m;
      copy.spatial_shared.weight = v;
      return out(copy, fc, ft);
    }, m.spatial_shared.weight));
    return w;
  });
  add("entropy fusion", [](std::mt19937_64& rng) {
    std::vector<Tensor> ys;
    for (int k = 0; k < 3; ++k) ys.push_back(Tensor::randn({2, 4, 3, 3}, rng, 2.0));
    const Tensor p = Tensor::randn({2, 4, 3, 3}, rng);
    double w = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      w = std::max(w, rel_grad_error([&](const Tensor& v) {
        auto in = ys;
        in[k] = v;
        return sum(eef_fuse(in, {2.0, FusionStrategy::eef}).teacher_logits * p);
      }, ys[k]));
    }
    return w;
  });
  add("adaptation objective", [](std::mt19937_64& rng) {
    std::vector<Tensor> ys;
    for (int k = 0; k < 3; ++k) ys.push_back(Tensor::randn({2, 4, 3, 3}, rng, 2.0));
    AdaptConfig cfg;
    cfg.lambda1 = 0.8;
    cfg.lambda2 = 1.2;
    const std::vector<double> omega{1.0, 1.4, 2.2};
    double w = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      // KL treats the teacher as a constant: compare against a reference with
      // the teacher frozen at this point and every other path live
      Tensor teacher;
      {
        PauseTape pause;
        teacher = eef_fuse(ys, cfg.fusion_config()).teacher_logits;
      }
      auto reference = [&](const Tensor& v) {
        auto in = ys;
        in[k] = v;
        const FusionOutput fo = eef_fuse(in, cfg.fusion_config());
        Tensor total = shannon_loss(fo.teacher_logits) * cfg.lambda1;
        for (std::size_t i = 0; i < 3; ++i)
          total = total + shannon_loss(in[i]) * omega[i] + kl_to_teacher(in[i], teacher) * (cfg.lambda2 * omega[i]);
        return total;
      };
      w = std::max(w, rel_grad_error(reference, ys[k]));
      auto grad_of = [&](const std::function<Tensor(const std::vector<Tensor>&)>& f) {
        Tensor x = ys[k].detach();
        x.set_requires_grad();
        Tape tape;
        TapeScope scope(tape);
        auto in = ys;
        in[k] = x;
        tape.backward(f(in));
        return values(x.grad());
      };
      const auto lib = grad_of([&](const std::vector<Tensor>& in) {
        return tta_objective(in, eef_fuse(in, cfg.fusion_config()), cfg, omega).total;
      });
      const auto ref = grad_of([&](const std::vector<Tensor>& in) { return reference(in[k]); });
      for (std::size_t i = 0; i < lib.size(); ++i) w = std::max(w, std::abs(lib[i] - ref[i]));
    }
    return w;
  });

  double worst = 0.0;
  std::string worst_name;
  for (const auto& [name, fn] : checks) {
    for (int seed = 0; seed < 5; ++seed) {
      std::mt19937_64 rng(4242 + seed);
      const double e = fn(rng);
      if (!(e <= worst) || worst_name.empty()) {
        worst = e;
        worst_name = name;
      }
    }
  }
  const double secs = since(t0);
  report(1, worst <= 1e-5 && secs < 60.0,
         "gradient suite, " + std::to_string(checks.size()) + " checks x 5 seeds, max rel err " + num(worst) + " (" +
             worst_name + ") <= 1e-5, " + num(secs, "%.1f") + " s < 60 s");
}

// ---- criterion 2 -------------------------------------------------------------

void criterion_fusion() {
  std::mt19937_64 rng(99);
  double norm = 0.0, shift = 0.0, oracle_err = 0.0, uniform = 0.0, wta = 0.0;
  std::size_t monotone_bad = 0, arg_bad = 0, wta_pixels = 0;
  const std::size_t k = 3, c = 5, n = 2, hw = 16;
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<Tensor> ys;
    for (std::size_t i = 0; i < k; ++i) ys.push_back(Tensor::randn({n, c, 4, 4}, rng, 2.0));
    const FusionOutput f = eef_fuse(ys, {2.0, FusionStrategy::eef});
    std::vector<Tensor> shifted;
    for (const auto& y : ys) shifted.push_back(y + 7.25);
    const FusionOutput g = eef_fuse(shifted, {2.0, FusionStrategy::eef});
    for (std::size_t i = 0; i < f.weights.numel(); ++i) shift = std::max(shift, std::abs(f.weights[i] - g.weights[i]));
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t p = 0; p < hw; ++p) {
        std::vector<double> h(k), w(k);
        double total = 0.0;
        for (std::size_t b = 0; b < k; ++b) {
          std::vector<double> l(c);
          for (std::size_t ch = 0; ch < c; ++ch) l[ch] = ys[b][(s * c + ch) * hw + p];
          h[b] = oracle::entropy(l);
          w[b] = f.weights[(b * n + s) * hw + p];
          total += w[b];
        }
        norm = std::max(norm, std::abs(total - 1.0));
        for (std::size_t a = 0; a < k; ++a)
          for (std::size_t b = 0; b < k; ++b)
            if (h[a] < h[b] && !(w[a] > w[b])) ++monotone_bad;
        if (std::min_element(h.begin(), h.end()) - h.begin() != std::max_element(w.begin(), w.end()) - w.begin())
          ++arg_bad;
      }
    }
    std::vector<Tensor> ents;
    for (const auto& y : ys) ents.push_back(pixel_entropy(y));
    const Tensor hot = eef_weights(ents, 1e6), cold = eef_weights(ents, 1e-3);
    for (double v : hot.data()) uniform = std::max(uniform, std::abs(v - 1.0 / 3.0));
    for (std::size_t s = 0; s < n * hw; ++s) {
      std::size_t best = 0;
      for (std::size_t b = 1; b < k; ++b)
        if (ents[b][s] < ents[best][s]) best = b;
      // the limit needs an entropy gap beyond temp * ln(1e6) ~ 0.0138
      double gap = 1e300;
      for (std::size_t b = 0; b < k; ++b)
        if (b != best) gap = std::min(gap, ents[b][s] - ents[best][s]);
      if (gap < 0.02) continue;
      ++wta_pixels;
      for (std::size_t b = 0; b < k; ++b) wta = std::max(wta, std::abs(cold[b * n * hw + s] - (b == best ? 1.0 : 0.0)));
    }
  }
  std::vector<Tensor> ys;
  for (std::size_t i = 0; i < k; ++i) ys.push_back(Tensor::randn({1, c, 1, 1000}, rng, 2.0));
  const FusionOutput f = eef_fuse(ys, {2.0, FusionStrategy::eef});
  for (std::size_t p = 0; p < 1000; ++p) {
    std::vector<std::vector<double>> logits(k, std::vector<double>(c));
    for (std::size_t b = 0; b < k; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) logits[b][ch] = ys[b][ch * 1000 + p];
    const auto t = oracle::eef_teacher(logits, 2.0);
    for (std::size_t ch = 0; ch < c; ++ch) oracle_err = std::max(oracle_err, std::abs(t[ch] - f.teacher_logits[ch * 1000 + p]));
  }
  const bool ok = norm <= 1e-9 && monotone_bad == 0 && arg_bad == 0 && shift <= 1e-9 && uniform <= 1e-6 &&
                  wta <= 1e-6 && wta_pixels > 100 && oracle_err <= 1e-12;
  report(2, ok,
         "fusion invariants: |sum W - 1| " + num(norm) + ", monotonicity violations " + std::to_string(monotone_bad) +
             ", argmin/argmax violations " + std::to_string(arg_bad) + ", shift " + num(shift) + ", temp=1e6 " +
             num(uniform) + ", temp=1e-3 " + num(wta) + " (" + std::to_string(wta_pixels) + " pixels with gap >= 0.02)" + ", oracle on 1000 pixels " + num(oracle_err));
}

// ---- criterion 3 -------------------------------------------------------------

void criterion_dynamic_weights() {
  std::mt19937_64 rng(5);
  double min_dev = 0.0, sym = 0.0, oracle_err = 0.0;
  std::size_t below = 0, negative = 0;
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int rep = 0; rep < 200; ++rep) {
    const std::vector<double> d{u(rng), u(rng), u(rng)};
    const auto w = dynamic_weights(d);
    min_dev = std::max(min_dev, std::abs(*std::min_element(w.begin(), w.end()) - 1.0));
    for (double x : w) below += x < 1.0;
  }
  for (int rep = 0; rep < 50; ++rep) {
    const Tensor a = Tensor::randn({2, 4, 2, 3}, rng, 3.0), b = Tensor::randn({2, 4, 2, 3}, rng, 3.0);
    const double dab = branch_distance(a, b), dba = branch_distance(b, a);
    negative += dab < 0.0;
    sym = std::max(sym, std::abs(dab - dba));
    double expect = 0.0;
    for (std::size_t s = 0; s < 2; ++s) {
      double sample = 0.0;
      for (std::size_t p = 0; p < 6; ++p) {
        std::vector<double> x(4), y(4);
        for (std::size_t ch = 0; ch < 4; ++ch) x[ch] = a[(s * 4 + ch) * 6 + p], y[ch] = b[(s * 4 + ch) * 6 + p];
        const auto px = oracle::softmax(x), py = oracle::softmax(y);
        sample += 0.5 * (oracle::kl(px, py) + oracle::kl(py, px));
      }
      expect += sample / 6.0;
    }
    oracle_err = std::max(oracle_err, std::abs(dab - expect / 2.0));
  }
  const Tensor p({1, 2, 1, 1}, {std::log(0.5), std::log(0.5)}), q({1, 2, 1, 1}, {std::log(0.25), std::log(0.75)});
  const double spot = branch_distance(p, q);
  const bool ok = min_dev == 0.0 && below == 0 && negative == 0 && sym <= 1e-12 && oracle_err <= 1e-12 &&
                  std::abs(spot - 0.137327) <= 1e-6;
  report(3, ok,
         "dynamic weighting: min omega deviation " + num(min_dev) + ", omega < 1 count " + std::to_string(below) +
             ", negative distances " + std::to_string(negative) + ", asymmetry " + num(sym) + ", oracle " +
             num(oracle_err) + ", D(p,q) = " + num(spot, "%.7f") + " (0.137327)");
}

// ---- criterion 4 -------------------------------------------------------------

void criterion_freezing(const fs::path& ckpt, const Dataset& ds) {
  std::size_t violations = 0, changed_inside = 0, tensors = 0;
  for (Region region : {Region::decoder, Region::encoder, Region::both}) {
    ModelSuite suite = ModelSuite::load(ckpt);
    ModelSuite before = suite.clone();
    AdaptConfig cfg;
    cfg.region = region;
    cfg.lr = 1e-3;  // large enough that the selected set visibly moves
    adapt_epoch(suite, make_batches(ds.target_test, cfg.batch_size), cfg);
    auto a = before.state(), b = suite.state();
    for (std::size_t i = 0; i < a.size(); ++i) {
      ++tensors;
      const bool selected = a[i].is_bn_affine() && (region == Region::both || a[i].region == region);
      const bool same = a[i].tensor->bitwise_equal(*b[i].tensor);
      if (!selected && !same) ++violations;
      if (selected && !same) ++changed_inside;
    }
  }
  report(4, violations == 0 && changed_inside > 0,
         "parameter freezing over 3 regions: " + std::to_string(violations) + " of " + std::to_string(tensors) +
             " tensors outside the selected BN-affine set changed (" + std::to_string(changed_inside) +
             " selected tensors moved)");
}

// ---- criterion 9 -------------------------------------------------------------

void criterion_metrics() {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> cls(0, 4), ignore(0, 9);
  std::size_t mismatches = 0;
  for (int rep = 0; rep < 100; ++rep) {
    Tensor pred({8, 8}), gt({8, 8});
    for (std::size_t i = 0; i < 64; ++i) {
      pred.mutable_data()[i] = cls(rng);
      gt.mutable_data()[i] = ignore(rng) == 0 ? 255 : cls(rng);
    }
    ConfusionMatrix cm(5);
    cm.accumulate(pred, gt);
    double sum = 0.0;
    int defined = 0;
    for (int k = 0; k < 5; ++k) {
      long tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < 64; ++i) {
        const int p = static_cast<int>(pred[i]), g = static_cast<int>(gt[i]);
        if (g == 255) continue;
        tp += p == k && g == k;
        fp += p == k && g != k;
        fn += p != k && g == k;
      }
      const auto iou = cm.iou(static_cast<std::size_t>(k));
      if (tp + fp + fn == 0) {
        mismatches += iou.has_value();
        continue;
      }
      const double expect = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
      mismatches += !iou || *iou != expect;
      sum += expect;
      ++defined;
    }
    if (defined) mismatches += cm.miou() != sum / defined;
  }
  report(9, mismatches == 0, "confusion matrix / IoU / mIoU vs brute-force tally on 100 random 8x8 pairs: " +
                                 std::to_string(mismatches) + " mismatches");
}

// ---- helpers for the pipeline criteria ---------------------------------------

double miou_of(const nlohmann::json& phase, const std::string& source) {
  const auto& m = phase.at(source).at("miou");
  return m.is_null() ? std::nan("") : m.get<double>();
}

double class_iou(const nlohmann::json& phase, const std::string& source, const std::string& cls) {
  const auto& v = phase.at(source).at("per_class_iou").at(cls);
  return v.is_null() ? std::nan("") : v.get<double>();
}

double post_miou(const AblationReport& r, const std::string& table, const std::string& row) {
  const CellResult* c = r.find(table, row);
  if (!c || c->error) return std::nan("");
  return c->post.teacher.miou();
}

std::string read_all(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

double rms_diff(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s / static_cast<double>(a.numel()));
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 3) {
    std::cerr << "usage: ntta_acceptance <config.json> <work dir>\n";
    return 2;
  }
  const auto start = Clock::now();
  const fs::path work = argv[2];
  fs::remove_all(work);
  fs::create_directories(work);

  ExperimentConfig cfg = ExperimentConfig::load(argv[1]);
  cfg.dataset_dir = work / "data";
  cfg.out_dir = work / "run";

  criterion_gradients();
  criterion_fusion();
  criterion_dynamic_weights();
  criterion_metrics();

  try {
    // 5: the benchmark run
    const auto t5 = Clock::now();
    const Dataset ds = cmd_gen(cfg, false);
    const PretrainReport pre = cmd_pretrain(cfg);
    const RunRecord rec = cmd_adapt(cfg);
    const double run_secs = since(t5);
    const double source_only = miou_of(rec.phases.at("source_only"), "teacher");
    const double post = miou_of(rec.phases.at("post"), "teacher");
    const double margin = post - source_only;
    report(5, margin >= kGoldenMargin && run_secs < 600.0,
           "post-adaptation teacher mIoU " + num(post, "%.4f") + " vs source-only " + num(source_only, "%.4f") +
               ", margin " + num(margin, "%.4f") + " >= " + num(kGoldenMargin, "%.3f") + " (day-val " +
               num(pre.day_val.teacher.miou(), "%.4f") + "), gen+pretrain+adapt " + num(run_secs, "%.0f") + " s");

    criterion_freezing(cfg.out_dir / "source.ckpt", ds);

    // 6: ablation trends
    const std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
    const AblationReport ab = cmd_ablate(cfg, jobs);
    double best_single = -1.0;
    for (const char* single : {"SE", "EN", "KL"}) best_single = std::max(best_single, post_miou(ab, "loss", single));
    const double all_losses = post_miou(ab, "loss", "SE+EN+KL");
    const std::string full = "|color+thermal+interaction";
    const double eef = post_miou(ab, "fusion", "eef" + full + "|cmsa");
    const double merge = post_miou(ab, "fusion", "merge" + full + "|cmsa");
    const double ie = post_miou(ab, "fusion", "ie" + full + "|cmsa");
    const double no_cmsa = post_miou(ab, "fusion", "eef" + full + "|no_cmsa");
    const double dec = post_miou(ab, "region", "decoder");
    const double enc = post_miou(ab, "region", "encoder");
    const bool t_loss = all_losses >= best_single - kBand;
    const bool t_merge = eef >= merge - kBand, t_ie = eef >= ie - kBand;
    const bool t_cmsa = eef >= no_cmsa - kBand;
    const bool t_region = dec >= enc - kBand;
    report(6, t_loss && t_merge && t_ie && t_cmsa && t_region,
           "ablation trends (band 0.5 pt): all losses " + num(all_losses, "%.4f") + " vs best single " +
               num(best_single, "%.4f") + (t_loss ? " ok" : " FAIL") + "; eef " + num(eef, "%.4f") + " vs merge " +
               num(merge, "%.4f") + (t_merge ? " ok" : " FAIL") + ", vs ie " + num(ie, "%.4f") +
               (t_ie ? " ok" : " FAIL") + "; CMSA " + num(eef, "%.4f") + " vs none " + num(no_cmsa, "%.4f") +
               (t_cmsa ? " ok" : " FAIL") + "; decoder " + num(dec, "%.4f") + " vs encoder " + num(enc, "%.4f") +
               (t_region ? " ok" : " FAIL"));

    // 7: imaging and class-wise heterogeneity
    double gc = 0.0, gt = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const ScenePair day = generate_scene(cfg.generator, Domain::day, 500 + seed);
      const ScenePair night = generate_scene(cfg.generator, Domain::night, 500 + seed);
      gc += rms_diff(day.color, night.color) / 100.0;
      gt += rms_diff(day.thermal, night.thermal) / 100.0;
    }
    const auto& phase = rec.phases.at("post");
    const double person_c = class_iou(phase, "color", "person"), person_t = class_iou(phase, "thermal", "person");
    const double bike_c = class_iou(phase, "color", "bike"), bike_t = class_iou(phase, "thermal", "bike");
    report(7, gc > gt && person_t > person_c && bike_c > bike_t,
           "G_color " + num(gc, "%.4f") + " > G_T " + num(gt, "%.4f") + " over 100 scenes; person IoU thermal " +
               num(person_t, "%.3f") + " > color " + num(person_c, "%.3f") + "; bike IoU color " + num(bike_c, "%.3f") +
               " > thermal " + num(bike_t, "%.3f"));

    // 8: determinism
    const std::string first = read_all(cfg.out_dir / "metrics.json");
    cmd_adapt(cfg);
    const std::string second = read_all(cfg.out_dir / "metrics.json");
    report(8, !first.empty() && first == second,
           "two adapt runs with one config: metrics.json " + std::string(first == second ? "byte-identical" : "differs") +
               " (" + std::to_string(first.size()) + " bytes)");
  } catch (const std::exception& e) {
    std::cerr << "pipeline error: " << e.what() << "\n";
    for (int id : {4, 5, 6, 7, 8})
      if (!g_reported.count(id)) report(id, false, std::string("not reached: ") + e.what());
  }

  std::printf("%d criteria failed, total %.0f s\n", g_failed, since(start));
  return g_failed ? 1 : 0;
}
