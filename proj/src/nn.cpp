#include "ntta/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "kernels.hpp"
#include "ntta/tensor_io.hpp"

namespace ntta::nn {

using detail::StoragePtr;

namespace {

void require_nchw(const Tensor& x, const char* what) {
  if (x.rank() != 4) {
    throw ShapeError(std::string(what) + " expects an NCHW tensor, got " + shape_str(x.shape()));
  }
}

// Unrolls one padded sample into a (c*kh*kw) x (ho*wo) column matrix.
void im2col(const double* x, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo,
            double* col) {
  const std::size_t p = ho * wo;
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        double* row = col + ((ci * kh + ki) * kw + kj) * p;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(h) && ix < static_cast<long>(w);
            row[oy * wo + ox] = inside ? x[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* col, std::size_t c, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo,
            double* x) {
  const std::size_t p = ho * wo;
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const double* row = col + ((ci * kh + ki) * kw + kj) * p;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            x[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  AxisSplit r;
  for (std::size_t d = 0; d < axis; ++d) r.outer *= s[d];
  r.extent = s[axis];
  for (std::size_t d = axis + 1; d < s.size(); ++d) r.inner *= s[d];
  return r;
}

}  // namespace

// ---- construction ----------------------------------------------------------

Conv2D Conv2D::make(std::size_t in_c, std::size_t out_c, std::size_t kernel, std::size_t stride,
                    std::size_t padding, std::mt19937_64& rng) {
  if (in_c == 0 || out_c == 0 || kernel == 0 || stride == 0) {
    throw ValueError("conv2d dimensions must be positive");
  }
  Conv2D c;
  const double fan_in = static_cast<double>(in_c * kernel * kernel);
  c.weight = Tensor::randn({out_c, in_c, kernel, kernel}, rng, std::sqrt(2.0 / fan_in));
  c.bias = Tensor({out_c}, 0.0);
  c.stride = stride;
  c.padding = padding;
  return c;
}

BatchNorm2D::BatchNorm2D(std::size_t channels)
    : gamma({channels}, 1.0),
      beta({channels}, 0.0),
      running_mean({channels}, 0.0),
      running_var({channels}, 1.0) {}

DenseLayer DenseLayer::make(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  if (in == 0 || out == 0) throw ValueError("dense dimensions must be positive");
  DenseLayer d;
  d.weight = Tensor::randn({out, in}, rng, std::sqrt(2.0 / static_cast<double>(in)));
  d.bias = Tensor({out}, 0.0);
  return d;
}

// ---- convolution -----------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  require_nchw(x, "conv2d");
  if (weight.rank() != 4) throw ShapeError("conv2d weight must be 4-D, got " + shape_str(weight.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oc = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != c) {
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(c) +
                     " channels, weight expects " + std::to_string(weight.dim(1)));
  }
  if (bias.numel() != oc) throw ShapeError("conv2d bias size does not match output channels");
  if (kh > h + 2 * padding || kw > w + 2 * padding) {
    throw ShapeError("conv2d kernel " + shape_str({kh, kw}) + " larger than padded input " +
                     shape_str({h + 2 * padding, w + 2 * padding}));
  }
  if (stride == 0) throw ValueError("conv2d stride must be positive");
  const std::size_t ho = (h + 2 * padding - kh) / stride + 1;
  const std::size_t wo = (w + 2 * padding - kw) / stride + 1;
  const std::size_t k = c * kh * kw;
  const std::size_t p = ho * wo;

  std::vector<double> out(n * oc * p, 0.0);
  std::vector<double> col(k * p);
  const double* xd = x.data().data();
  const double* wd = weight.data().data();
  const double* bd = bias.data().data();
  for (std::size_t s = 0; s < n; ++s) {
    im2col(xd + s * c * h * w, c, h, w, kh, kw, stride, padding, ho, wo, col.data());
    double* os = out.data() + s * oc * p;
    for (std::size_t o = 0; o < oc; ++o) std::fill_n(os + o * p, p, bd[o]);
    kernels::gemm_nn(oc, k, p, wd, col.data(), os);
  }

  const bool record = detail::should_record({&x, &weight, &bias});
  auto xs = x.handle();
  auto ws = weight.handle();
  auto bs = bias.handle();
  return detail::make_result(
      {n, oc, ho, wo}, std::move(out), record, {xs, ws, bs},
      [=](std::span<const double> g) {
        std::vector<double> gx(xs->requires_grad ? xs->data.size() : 0, 0.0);
        std::vector<double> gw(ws->requires_grad ? ws->data.size() : 0, 0.0);
        std::vector<double> gb(bs->requires_grad ? bs->data.size() : 0, 0.0);
        std::vector<double> col(k * p);
        std::vector<double> dcol(gx.empty() ? 0 : k * p);
        for (std::size_t s = 0; s < n; ++s) {
          const double* gs = g.data() + s * oc * p;
          if (!gb.empty()) {
            for (std::size_t o = 0; o < oc; ++o) {
              double acc = 0.0;
              for (std::size_t i = 0; i < p; ++i) acc += gs[o * p + i];
              gb[o] += acc;
            }
          }
          if (!gw.empty()) {
            im2col(xs->data.data() + s * c * h * w, c, h, w, kh, kw, stride, padding, ho, wo, col.data());
            kernels::gemm_nt(oc, p, k, gs, col.data(), gw.data());
          }
          if (!gx.empty()) {
            std::fill(dcol.begin(), dcol.end(), 0.0);
            kernels::gemm_tn(k, oc, p, ws->data.data(), gs, dcol.data());
            col2im(dcol.data(), c, h, w, kh, kw, stride, padding, ho, wo, gx.data() + s * c * h * w);
          }
        }
        if (!gx.empty()) detail::accumulate(*xs, gx);
        if (!gw.empty()) detail::accumulate(*ws, gw);
        if (!gb.empty()) detail::accumulate(*bs, gb);
      });
}

Tensor conv2d_forward(const Conv2D& layer, const Tensor& x) {
  return conv2d(x, layer.weight, layer.bias, layer.stride, layer.padding);
}

// ---- batch normalization ---------------------------------------------------

Tensor batchnorm2d_forward(BatchNorm2D& layer, const Tensor& x) {
  require_nchw(x, "batchnorm2d");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (c != layer.channels()) {
    throw ShapeError("batchnorm2d expects " + std::to_string(layer.channels()) + " channels, got " +
                     std::to_string(c));
  }
  const std::size_t count = n * hw;
  const bool batch_stats = layer.mode != BnMode::eval;
  if (batch_stats && count < 2) {
    throw ValueError("degenerate batch for batch statistics: " + shape_str(x.shape()) +
                     " gives a single value per channel");
  }
  const double* xd = x.data().data();
  std::vector<double> mu(c), invstd(c);
  if (batch_stats) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* row = xd + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += row[i];
      }
      const double m = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* row = xd + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) v += (row[i] - m) * (row[i] - m);
      }
      const double var = v / static_cast<double>(count);
      mu[ch] = m;
      invstd[ch] = 1.0 / std::sqrt(var + layer.eps);
      if (layer.mode == BnMode::train) {
        const double unbiased = v / static_cast<double>(count - 1);
        auto rm = layer.running_mean.mutable_data();
        auto rv = layer.running_var.mutable_data();
        rm[ch] = (1.0 - layer.momentum) * rm[ch] + layer.momentum * m;
        rv[ch] = (1.0 - layer.momentum) * rv[ch] + layer.momentum * unbiased;
      }
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = layer.running_mean[ch];
      invstd[ch] = 1.0 / std::sqrt(layer.running_var[ch] + layer.eps);
    }
  }

  std::vector<double> xhat(x.numel());
  std::vector<double> out(x.numel());
  const double* gd = layer.gamma.data().data();
  const double* bd = layer.beta.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double v = (xd[base + i] - mu[ch]) * invstd[ch];
        xhat[base + i] = v;
        out[base + i] = gd[ch] * v + bd[ch];
      }
    }
  }

  const bool record = detail::should_record({&x, &layer.gamma, &layer.beta});
  auto xs = x.handle();
  auto gs = layer.gamma.handle();
  auto bs = layer.beta.handle();
  return detail::make_result(
      x.shape(), std::move(out), record, {xs, gs, bs},
      [=, xhat = std::move(xhat), invstd = std::move(invstd)](std::span<const double> g) {
        std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              sum_g[ch] += g[base + i];
              sum_gx[ch] += g[base + i] * xhat[base + i];
            }
          }
        }
        if (gs->requires_grad) detail::accumulate(*gs, sum_gx);
        if (bs->requires_grad) detail::accumulate(*bs, sum_g);
        if (!xs->requires_grad) return;
        std::vector<double> gx(g.size());
        const double m = static_cast<double>(count);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (b * c + ch) * hw;
            const double scale = gs->data[ch] * invstd[ch];
            for (std::size_t i = 0; i < hw; ++i) {
              if (batch_stats) {
                gx[base + i] = scale / m * (m * g[base + i] - sum_g[ch] - xhat[base + i] * sum_gx[ch]);
              } else {
                gx[base + i] = scale * g[base + i];
              }
            }
          }
        }
        detail::accumulate(*xs, gx);
      });
}

// ---- dense -----------------------------------------------------------------

Tensor dense_forward(const DenseLayer& layer, const Tensor& x) {
  if (x.rank() != 2 || x.dim(1) != layer.weight.dim(1)) {
    throw ShapeError("dense layer expects N x " + std::to_string(layer.weight.dim(1)) + ", got " +
                     shape_str(x.shape()));
  }
  return matmul(x, transpose(layer.weight)) + layer.bias;
}

// ---- activations -----------------------------------------------------------

Tensor activation(Activation kind, const Tensor& x) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (xd[i] >= 0.0) {
        out[i] = 1.0 / (1.0 + std::exp(-xd[i]));
      } else {
        const double e = std::exp(xd[i]);
        out[i] = e / (1.0 + e);
      }
    }
  }
  const bool record = detail::should_record({&x});
  auto xs = x.handle();
  return detail::make_result_with_output(
      x.shape(), std::move(out), record, {xs}, [kind, xs](const detail::Storage* os) -> Tape::BackwardFn {
        return [kind, xs, os](std::span<const double> g) {
          std::vector<double> gx(g.size());
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (kind == Activation::relu) {
              gx[i] = xs->data[i] > 0.0 ? g[i] : 0.0;
            } else {
              const double s = os->data[i];
              gx[i] = g[i] * s * (1.0 - s);
            }
          }
          detail::accumulate(*xs, gx);
        };
      });
}

// ---- pooling and resizing --------------------------------------------------

Tensor pool_and_resize(Resize kind, const Tensor& x) {
  require_nchw(x, "pool_and_resize");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto xd = x.data();
  const bool record = detail::should_record({&x});
  auto xs = x.handle();

  if (kind == Resize::global_maxpool) return reduce(ReduceOp::max, x, {2, 3}, true);

  if (kind == Resize::maxpool2) {
    if (h % 2 != 0 || w % 2 != 0) {
      throw ShapeError("maxpool2 needs even spatial dims, got " + shape_str(x.shape()));
    }
    const std::size_t ho = h / 2, wo = w / 2;
    std::vector<double> out(n * c * ho * wo);
    std::vector<std::size_t> arg(out.size());
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
          std::size_t best = plane * h * w + (2 * oy) * w + 2 * ox;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = plane * h * w + (2 * oy + dy) * w + 2 * ox + dx;
              if (xd[idx] > xd[best]) best = idx;
            }
          }
          const std::size_t o = (plane * ho + oy) * wo + ox;
          out[o] = xd[best];
          arg[o] = best;
        }
      }
    }
    return detail::make_result({n, c, ho, wo}, std::move(out), record, {xs},
                               [xs, arg = std::move(arg)](std::span<const double> g) {
                                 std::vector<double> gx(xs->data.size(), 0.0);
                                 for (std::size_t o = 0; o < arg.size(); ++o) gx[arg[o]] += g[o];
                                 detail::accumulate(*xs, gx);
                               });
  }

  const std::size_t ho = 2 * h, wo = 2 * w;
  std::vector<double> out(n * c * ho * wo);
  for (std::size_t plane = 0; plane < n * c; ++plane)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox)
        out[(plane * ho + oy) * wo + ox] = xd[(plane * h + oy / 2) * w + ox / 2];
  return detail::make_result({n, c, ho, wo}, std::move(out), record, {xs},
                             [xs, n, c, h, w](std::span<const double> g) {
                               std::vector<double> gx(xs->data.size(), 0.0);
                               const std::size_t ho = 2 * h, wo = 2 * w;
                               for (std::size_t plane = 0; plane < n * c; ++plane)
                                 for (std::size_t oy = 0; oy < ho; ++oy)
                                   for (std::size_t ox = 0; ox < wo; ++ox)
                                     gx[(plane * h + oy / 2) * w + ox / 2] += g[(plane * ho + oy) * wo + ox];
                               detail::accumulate(*xs, gx);
                             });
}

Tensor pad_bottom_right(const Tensor& x, std::size_t extra_h, std::size_t extra_w) {
  require_nchw(x, "pad_bottom_right");
  if (extra_h == 0 && extra_w == 0) return x;
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = h + extra_h, wo = w + extra_w;
  const auto xd = x.data();
  std::vector<double> out(n * c * ho * wo, 0.0);
  for (std::size_t plane = 0; plane < n * c; ++plane)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(xd.begin() + (plane * h + y) * w, w, out.begin() + (plane * ho + y) * wo);
  const bool record = detail::should_record({&x});
  auto xs = x.handle();
  return detail::make_result({n, c, ho, wo}, std::move(out), record, {xs},
                             [xs, n, c, h, w, ho, wo](std::span<const double> g) {
                               std::vector<double> gx(xs->data.size());
                               for (std::size_t plane = 0; plane < n * c; ++plane)
                                 for (std::size_t y = 0; y < h; ++y)
                                   std::copy_n(g.begin() + (plane * ho + y) * wo, w,
                                               gx.begin() + (plane * h + y) * w);
                               detail::accumulate(*xs, gx);
                             });
}

Tensor crop_top_left(const Tensor& x, std::size_t ho, std::size_t wo) {
  require_nchw(x, "crop_top_left");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (ho > h || wo > w) throw ShapeError("crop window larger than input " + shape_str(x.shape()));
  if (ho == h && wo == w) return x;
  const auto xd = x.data();
  std::vector<double> out(n * c * ho * wo);
  for (std::size_t plane = 0; plane < n * c; ++plane)
    for (std::size_t y = 0; y < ho; ++y)
      std::copy_n(xd.begin() + (plane * h + y) * w, wo, out.begin() + (plane * ho + y) * wo);
  const bool record = detail::should_record({&x});
  auto xs = x.handle();
  return detail::make_result({n, c, ho, wo}, std::move(out), record, {xs},
                             [xs, n, c, h, w, ho, wo](std::span<const double> g) {
                               std::vector<double> gx(xs->data.size(), 0.0);
                               for (std::size_t plane = 0; plane < n * c; ++plane)
                                 for (std::size_t y = 0; y < ho; ++y)
                                   std::copy_n(g.begin() + (plane * ho + y) * wo, wo,
                                               gx.begin() + (plane * h + y) * w);
                               detail::accumulate(*xs, gx);
                             });
}

// ---- softmax family --------------------------------------------------------

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit sp = split_axis(x.shape(), axis);
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      double m = xd[base];
      for (std::size_t k = 1; k < sp.extent; ++k) m = std::max(m, xd[base + k * sp.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < sp.extent; ++k) z += std::exp(xd[base + k * sp.inner] - m);
      const double lz = std::log(z);
      for (std::size_t k = 0; k < sp.extent; ++k) out[base + k * sp.inner] = xd[base + k * sp.inner] - m - lz;
    }
  }
  const bool record = detail::should_record({&x});
  auto xs = x.handle();
  return detail::make_result_with_output(
      x.shape(), std::move(out), record, {xs}, [xs, sp](const detail::Storage* os) -> Tape::BackwardFn {
        return [xs, os, sp](std::span<const double> g) {
          std::vector<double> gx(g.size());
          for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t i = 0; i < sp.inner; ++i) {
              const std::size_t base = o * sp.extent * sp.inner + i;
              double gs = 0.0;
              for (std::size_t k = 0; k < sp.extent; ++k) gs += g[base + k * sp.inner];
              for (std::size_t k = 0; k < sp.extent; ++k) {
                const std::size_t idx = base + k * sp.inner;
                gx[idx] = g[idx] - std::exp(os->data[idx]) * gs;
              }
            }
          }
          detail::accumulate(*xs, gx);
        };
      });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit sp = split_axis(x.shape(), axis);
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      double m = xd[base];
      for (std::size_t k = 1; k < sp.extent; ++k) m = std::max(m, xd[base + k * sp.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < sp.extent; ++k) {
        const double e = std::exp(xd[base + k * sp.inner] - m);
        out[base + k * sp.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < sp.extent; ++k) out[base + k * sp.inner] /= z;
    }
  }
  const bool record = detail::should_record({&x});
  auto xs = x.handle();
  return detail::make_result_with_output(
      x.shape(), std::move(out), record, {xs}, [xs, sp](const detail::Storage* os) -> Tape::BackwardFn {
        return [xs, os, sp](std::span<const double> g) {
          std::vector<double> gx(g.size());
          for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t i = 0; i < sp.inner; ++i) {
              const std::size_t base = o * sp.extent * sp.inner + i;
              double dot = 0.0;
              for (std::size_t k = 0; k < sp.extent; ++k) dot += g[base + k * sp.inner] * os->data[base + k * sp.inner];
              for (std::size_t k = 0; k < sp.extent; ++k) {
                const std::size_t idx = base + k * sp.inner;
                gx[idx] = os->data[idx] * (g[idx] - dot);
              }
            }
          }
          detail::accumulate(*xs, gx);
        };
      });
}

Tensor cross_entropy(const Tensor& logits, const Tensor& labels) {
  require_nchw(logits, "cross_entropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  if (labels.shape() != Shape{n, logits.dim(2), logits.dim(3)}) {
    throw ShapeError("cross_entropy labels " + shape_str(labels.shape()) + " do not match logits " +
                     shape_str(logits.shape()));
  }
  const auto ld = labels.data();
  std::vector<std::ptrdiff_t> cls(ld.size());
  std::size_t count = 0;
  for (std::size_t i = 0; i < ld.size(); ++i) {
    const double v = ld[i];
    if (v == kIgnoreLabel) {
      cls[i] = -1;
      continue;
    }
    if (v < 0 || v >= static_cast<double>(c) || v != std::floor(v)) {
      throw ValueError("label " + std::to_string(v) + " out of range [0, " + std::to_string(c) + ")");
    }
    cls[i] = static_cast<std::ptrdiff_t>(v);
    ++count;
  }
  if (count == 0) throw ValueError("cross_entropy over zero non-ignored pixels is undefined");

  const auto xd = logits.data();
  std::vector<double> probs(xd.size());
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < hw; ++i) {
      const std::size_t base = b * c * hw + i;
      double m = xd[base];
      for (std::size_t k = 1; k < c; ++k) m = std::max(m, xd[base + k * hw]);
      double z = 0.0;
      for (std::size_t k = 0; k < c; ++k) z += (probs[base + k * hw] = std::exp(xd[base + k * hw] - m));
      for (std::size_t k = 0; k < c; ++k) probs[base + k * hw] /= z;
      const std::ptrdiff_t y = cls[b * hw + i];
      if (y >= 0) total += -(xd[base + static_cast<std::size_t>(y) * hw] - m - std::log(z));
    }
  }
  const double inv = 1.0 / static_cast<double>(count);
  const bool record = detail::should_record({&logits});
  auto xs = logits.handle();
  return detail::make_result(
      {}, {total * inv}, record, {xs},
      [xs, n, c, hw, inv, probs = std::move(probs), cls = std::move(cls)](std::span<const double> g) {
        std::vector<double> gx(probs.size(), 0.0);
        const double scale = g[0] * inv;
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t i = 0; i < hw; ++i) {
            const std::ptrdiff_t y = cls[b * hw + i];
            if (y < 0) continue;
            const std::size_t base = b * c * hw + i;
            for (std::size_t k = 0; k < c; ++k) gx[base + k * hw] = scale * probs[base + k * hw];
            gx[base + static_cast<std::size_t>(y) * hw] -= scale;
          }
        }
        detail::accumulate(*xs, gx);
      });
}

// ---- checkpoints -----------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors,
                     const nlohmann::json& architecture) {
  std::vector<std::uint8_t> blob;
  nlohmann::json index = nlohmann::json::object();
  nlohmann::json order = nlohmann::json::array();
  for (const auto& nt : tensors) {
    if (index.contains(nt.name)) throw ValueError("duplicate checkpoint tensor name " + nt.name);
    const auto bytes = encode_ntt(nt.tensor);
    index[nt.name] = {{"offset", blob.size()}, {"shape", nt.tensor.shape()}};
    order.push_back(nt.name);
    blob.insert(blob.end(), bytes.begin(), bytes.end());
  }
  write_file_bytes(path, blob);
  nlohmann::json meta = {{"format", "ntta-checkpoint-1"},
                         {"architecture", architecture},
                         {"order", order},
                         {"tensors", index},
                         {"bytes", blob.size()},
                         {"crc32", crc32_of(blob)}};
  std::ofstream js(path.string() + ".json", std::ios::trunc);
  if (!js) throw IoError("cannot create " + path.string() + ".json");
  js << meta.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string index_path = path.string() + ".json";
  std::ifstream js(index_path);
  if (!js) throw IoError("cannot open checkpoint index " + index_path);
  nlohmann::json meta;
  try {
    js >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(index_path + ": " + e.what());
  }
  if (meta.value("format", "") != "ntta-checkpoint-1") {
    throw IoError(index_path + ": unsupported checkpoint format");
  }
  const auto blob = read_file_bytes(path);
  if (blob.size() != meta.at("bytes").get<std::size_t>() || crc32_of(blob) != meta.at("crc32").get<std::uint32_t>()) {
    throw IoError(path.string() + ": checkpoint checksum mismatch");
  }
  Checkpoint ck;
  ck.architecture = meta.at("architecture");
  const auto& index = meta.at("tensors");
  const auto& order = meta.at("order");
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::string name = order[i].get<std::string>();
    const auto& entry = index.at(name);
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    const std::size_t end = i + 1 < order.size()
                                ? index.at(order[i + 1].get<std::string>()).at("offset").get<std::size_t>()
                                : blob.size();
    if (offset > end || end > blob.size()) throw IoError(path.string() + ": bad offset for " + name);
    Tensor t = decode_ntt(std::span(blob).subspan(offset, end - offset), path.string() + ":" + name);
    if (t.shape() != entry.at("shape").get<Shape>()) {
      throw IoError(path.string() + ": shape mismatch for " + name);
    }
    ck.tensors.push_back({name, std::move(t)});
  }
  return ck;
}

}  // namespace ntta::nn
