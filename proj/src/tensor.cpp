#include "ntta/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "kernels.hpp"

namespace ntta {

namespace {

std::atomic<std::uint64_t> g_tape_generation{1};
thread_local Tape* g_active_tape = nullptr;

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t d = shape.size(); d-- > 1;) strides[d - 1] = strides[d] * shape[d];
  return strides;
}

// Strides of `operand` laid against `out` (right-aligned); broadcast axes get 0.
std::vector<std::size_t> broadcast_strides(const Shape& operand, const Shape& out) {
  const auto own = contiguous_strides(operand);
  const std::size_t offset = out.size() - operand.size();
  std::vector<std::size_t> strides(out.size(), 0);
  for (std::size_t d = offset; d < out.size(); ++d) {
    const std::size_t od = d - offset;
    strides[d] = operand[od] == 1 ? 0 : own[od];
  }
  return strides;
}

template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t r = out.size();
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

Tensor finish(Shape shape, std::vector<double> data, bool record,
              std::vector<detail::StoragePtr> parents, Tape::BackwardFn fn) {
  Tensor out(std::move(shape), std::move(data));
  if (record) Tape::active()->record(out, std::move(parents), std::move(fn));
  return out;
}

// Variant whose backward closure needs the output storage; the node keeps
// the output alive, so a raw pointer is safe inside the closure.
template <class MakeFn>
Tensor finish_with_output(Shape shape, std::vector<double> data, bool record,
                          std::vector<detail::StoragePtr> parents, MakeFn make) {
  Tensor out(std::move(shape), std::move(data));
  if (record) Tape::active()->record(out, std::move(parents), make(out.handle().get()));
  return out;
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

std::vector<double>& Storage::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = Tape::active();
  if (tape == nullptr || tape->consumed()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

bool should_record(std::span<const Tensor> inputs) {
  Tape* tape = Tape::active();
  if (tape == nullptr || tape->consumed()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.requires_grad(); });
}

void accumulate(Storage& s, std::span<const double> g) {
  if (!s.requires_grad) return;
  auto& buf = s.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

Tensor make_result(Shape shape, std::vector<double> data, bool record,
                   std::vector<StoragePtr> parents, Tape::BackwardFn fn) {
  return finish(std::move(shape), std::move(data), record, std::move(parents), std::move(fn));
}

Tensor make_result_with_output(Shape shape, std::vector<double> data, bool record,
                               std::vector<StoragePtr> parents,
                               const std::function<Tape::BackwardFn(const Storage*)>& make) {
  Tensor out(std::move(shape), std::move(data));
  if (record) Tape::active()->record(out, std::move(parents), make(out.handle().get()));
  return out;
}

}  // namespace detail

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor() : Tensor(Shape{}, 0.0) {}

Tensor::Tensor(Shape shape, double fill) : s_(std::make_shared<detail::Storage>()) {
  const std::size_t n = shape_numel(shape);
  s_->shape = std::move(shape);
  s_->data.assign(n, fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : s_(std::make_shared<detail::Storage>()) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " values but " +
                     std::to_string(data.size()) + " were given");
  }
  s_->shape = std::move(shape);
  s_->data = std::move(data);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, value); }

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.s_->data) v = dist(rng);
  return t;
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.s_->data) v = dist(rng);
  return t;
}

Tensor Tensor::wrap(detail::StoragePtr storage) {
  Tensor t;
  t.s_ = std::move(storage);
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape()));
  }
  return s_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return s_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  s_->requires_grad = on;
  return *this;
}

std::optional<std::size_t> Tensor::tape_id() const {
  if (s_->tape == nullptr) return std::nullopt;
  return s_->node_id;
}

Tensor Tensor::grad() const {
  if (s_->grad.empty()) return Tensor(s_->shape, 0.0);
  return Tensor(s_->shape, s_->grad);
}

Tensor Tensor::detach() const { return Tensor(s_->shape, s_->data); }

Tensor Tensor::clone() const {
  Tensor t(s_->shape, s_->data);
  t.s_->requires_grad = s_->requires_grad && is_leaf();
  return t;
}

bool Tensor::bitwise_equal(const Tensor& other) const {
  if (shape() != other.shape()) return false;
  return std::memcmp(s_->data.data(), other.s_->data.data(), numel() * sizeof(double)) == 0;
}

bool Tensor::all_finite() const {
  return std::all_of(s_->data.begin(), s_->data.end(), [](double v) { return std::isfinite(v); });
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape() : generation_(g_tape_generation.fetch_add(1)) {}

Tape::~Tape() {
  reset();
  if (g_active_tape == this) g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const Tensor& output, std::vector<detail::StoragePtr> parents, BackwardFn fn) {
  if (consumed_) throw TapeError("cannot record on a consumed tape; call reset() first");
  auto& s = *output.handle();
  s.requires_grad = true;
  s.tape = this;
  s.tape_generation = generation_;
  s.node_id = nodes_.size();
  nodes_.push_back(Node{output.handle(), std::move(parents), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw TapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  const auto& ls = *loss.handle();
  if (ls.tape != this || ls.tape_generation != generation_) {
    throw TapeError("loss was not recorded on this tape");
  }
  if (consumed_) throw TapeError("backward() called twice without reset()");
  consumed_ = true;
  loss.handle()->grad_buffer()[0] += 1.0;
  for (std::size_t i = ls.node_id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.output->grad.empty()) continue;
    node.fn(node.output->grad);
  }
}

void Tape::reset() {
  for (auto& node : nodes_) node.output->tape = nullptr;
  nodes_.clear();
  consumed_ = false;
  generation_ = g_tape_generation.fetch_add(1);
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

PauseTape::PauseTape() : previous_(g_active_tape) { g_active_tape = nullptr; }
PauseTape::~PauseTape() { g_active_tape = previous_; }

void backward(const Tensor& loss) {
  Tape* tape = loss.handle()->tape;
  if (tape == nullptr) throw TapeError("loss is not on a tape");
  tape->backward(loss);
}

// ---- elementwise -----------------------------------------------------------

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t d = 0; d < r; ++d) {
    const std::size_t da = d + a.size() >= r ? a[d + a.size() - r] : 1;
    const std::size_t db = d + b.size() >= r ? b[d + b.size() - r] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcast-compatible");
    }
    out[d] = da == 1 ? db : da;
  }
  return out;
}

Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  const bool same = a.shape() == out_shape && b.shape() == out_shape;
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(shape_numel(out_shape));

  auto apply = [op](double x, double y) {
    switch (op) {
      case BinaryOp::add: return x + y;
      case BinaryOp::sub: return x - y;
      case BinaryOp::mul: return x * y;
      case BinaryOp::div: return x / y;
    }
    return 0.0;
  };
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(ad[i], bd[i]);
  } else {
    for_each_broadcast(out_shape, sa, sb,
                       [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = apply(ad[ia], bd[ib]); });
  }

  const bool record = detail::should_record({&a, &b});
  auto as = a.handle();
  auto bs = b.handle();
  return finish(out_shape, std::move(out), record, {as, bs},
                [op, as, bs, out_shape, sa, sb](std::span<const double> g) {
                  std::vector<double> ga(as->requires_grad ? as->data.size() : 0, 0.0);
                  std::vector<double> gb(bs->requires_grad ? bs->data.size() : 0, 0.0);
                  const auto& x = as->data;
                  const auto& y = bs->data;
                  for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                    const double gi = g[i];
                    switch (op) {
                      case BinaryOp::add:
                        if (!ga.empty()) ga[ia] += gi;
                        if (!gb.empty()) gb[ib] += gi;
                        break;
                      case BinaryOp::sub:
                        if (!ga.empty()) ga[ia] += gi;
                        if (!gb.empty()) gb[ib] -= gi;
                        break;
                      case BinaryOp::mul:
                        if (!ga.empty()) ga[ia] += gi * y[ib];
                        if (!gb.empty()) gb[ib] += gi * x[ia];
                        break;
                      case BinaryOp::div:
                        if (!ga.empty()) ga[ia] += gi / y[ib];
                        if (!gb.empty()) gb[ib] -= gi * x[ia] / (y[ib] * y[ib]);
                        break;
                    }
                  });
                  if (!ga.empty()) detail::accumulate(*as, ga);
                  if (!gb.empty()) detail::accumulate(*bs, gb);
                });
}

Tensor elementwise(BinaryOp op, const Tensor& a, double b) {
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    switch (op) {
      case BinaryOp::add: out[i] = ad[i] + b; break;
      case BinaryOp::sub: out[i] = ad[i] - b; break;
      case BinaryOp::mul: out[i] = ad[i] * b; break;
      case BinaryOp::div: out[i] = ad[i] / b; break;
    }
  }
  const bool record = detail::should_record({&a});
  auto as = a.handle();
  return finish(a.shape(), std::move(out), record, {as}, [op, as, b](std::span<const double> g) {
    std::vector<double> ga(g.begin(), g.end());
    if (op == BinaryOp::mul) {
      for (double& v : ga) v *= b;
    } else if (op == BinaryOp::div) {
      for (double& v : ga) v /= b;
    }
    detail::accumulate(*as, ga);
  });
}

Tensor elementwise(UnaryOp op, const Tensor& a) {
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  switch (op) {
    case UnaryOp::exp:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(ad[i]);
      break;
    case UnaryOp::log:
      for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(ad[i] > 0.0)) {
          throw DomainError("log of non-positive value " + std::to_string(ad[i]) + " at index " +
                            std::to_string(i));
        }
        out[i] = std::log(ad[i]);
      }
      break;
    case UnaryOp::neg:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = -ad[i];
      break;
  }
  const bool record = detail::should_record({&a});
  auto as = a.handle();
  return finish_with_output(a.shape(), std::move(out), record, {as}, [op, as](detail::Storage* os) {
    return [op, as, os](std::span<const double> g) {
      std::vector<double> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) {
        switch (op) {
          case UnaryOp::exp: ga[i] = g[i] * os->data[i]; break;
          case UnaryOp::log: ga[i] = g[i] / as->data[i]; break;
          case UnaryOp::neg: ga[i] = -g[i]; break;
        }
      }
      detail::accumulate(*as, ga);
    };
  });
}

// ---- reductions ------------------------------------------------------------

Tensor reduce(ReduceOp op, const Tensor& a, std::vector<std::size_t> axes, bool keepdims) {
  const Shape& in_shape = a.shape();
  const std::size_t r = in_shape.size();
  if (axes.empty()) {
    axes.resize(r);
    std::iota(axes.begin(), axes.end(), std::size_t{0});
  }
  std::vector<bool> reduced(r, false);
  for (std::size_t ax : axes) {
    if (ax >= r) {
      throw ShapeError("invalid reduction axis " + std::to_string(ax) + " for shape " +
                       shape_str(in_shape));
    }
    if (reduced[ax]) throw ShapeError("reduction axis " + std::to_string(ax) + " repeated");
    reduced[ax] = true;
  }
  Shape kept_shape(r);
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t d = 0; d < r; ++d) {
    kept_shape[d] = reduced[d] ? 1 : in_shape[d];
    if (reduced[d]) {
      count *= in_shape[d];
      if (keepdims) out_shape.push_back(1);
    } else {
      out_shape.push_back(in_shape[d]);
    }
  }
  if (op == ReduceOp::max && count == 0) throw ShapeError("max over an empty axis");

  const auto kept_strides = contiguous_strides(kept_shape);
  std::vector<std::size_t> so(r, 0);
  for (std::size_t d = 0; d < r; ++d) so[d] = reduced[d] ? 0 : kept_strides[d];
  const std::vector<std::size_t> unit = contiguous_strides(in_shape);

  const std::size_t n_out = shape_numel(kept_shape);
  const auto ad = a.data();
  std::vector<double> out(n_out, 0.0);
  std::vector<std::size_t> arg;
  if (op == ReduceOp::max) {
    arg.assign(n_out, 0);
    std::vector<bool> seen(n_out, false);
    for_each_broadcast(in_shape, unit, so, [&](std::size_t i, std::size_t, std::size_t io) {
      if (!seen[io] || ad[i] > out[io]) {
        out[io] = ad[i];
        arg[io] = i;
        seen[io] = true;
      }
    });
  } else {
    for_each_broadcast(in_shape, unit, so,
                       [&](std::size_t i, std::size_t, std::size_t io) { out[io] += ad[i]; });
    if (op == ReduceOp::mean) {
      const double inv = static_cast<double>(count);
      for (double& v : out) v /= inv;
    }
  }

  const bool record = detail::should_record({&a});
  auto as = a.handle();
  return finish(std::move(out_shape), std::move(out), record, {as},
                [op, as, in_shape, unit, so, arg = std::move(arg), count](std::span<const double> g) {
                  std::vector<double> ga(as->data.size(), 0.0);
                  if (op == ReduceOp::max) {
                    for (std::size_t io = 0; io < arg.size(); ++io) ga[arg[io]] += g[io];
                  } else {
                    const double scale = op == ReduceOp::mean ? 1.0 / static_cast<double>(count) : 1.0;
                    for_each_broadcast(in_shape, unit, so, [&](std::size_t i, std::size_t, std::size_t io) {
                      ga[i] += g[io] * scale;
                    });
                  }
                  detail::accumulate(*as, ga);
                });
}

// ---- linear algebra and layout ---------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " @ " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0);
  const std::size_t k = a.dim(1);
  const std::size_t n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  kernels::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
  const bool record = detail::should_record({&a, &b});
  auto as = a.handle();
  auto bs = b.handle();
  return finish({m, n}, std::move(out), record, {as, bs}, [as, bs, m, k, n](std::span<const double> g) {
    if (as->requires_grad) {
      std::vector<double> ga(m * k, 0.0);
      kernels::gemm_nt(m, n, k, g.data(), bs->data.data(), ga.data());
      detail::accumulate(*as, ga);
    }
    if (bs->requires_grad) {
      std::vector<double> gb(k * n, 0.0);
      kernels::gemm_tn(k, m, n, as->data.data(), g.data(), gb.data());
      detail::accumulate(*bs, gb);
    }
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects a matrix, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0);
  const std::size_t n = a.dim(1);
  const auto ad = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = ad[i * n + j];
  const bool record = detail::should_record({&a});
  auto as = a.handle();
  return finish({n, m}, std::move(out), record, {as}, [as, m, n](std::span<const double> g) {
    std::vector<double> ga(m * n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] = g[j * m + i];
    detail::accumulate(*as, ga);
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  const bool record = detail::should_record({&a});
  auto as = a.handle();
  return finish(std::move(shape), std::move(out), record, {as},
                [as](std::span<const double> g) { detail::accumulate(*as, g); });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != first.size()) {
      throw ShapeError("concat rank mismatch: " + shape_str(first) + " vs " + shape_str(probe));
    }
    for (std::size_t d = 0; d < probe.size(); ++d) {
      if (d != axis && probe[d] != first[d]) {
        throw ShapeError("concat shape mismatch: " + shape_str(first) + " vs " + shape_str(probe));
      }
    }
    out_shape[axis] += probe[axis];
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];

  std::vector<std::size_t> blocks;
  std::vector<detail::StoragePtr> handles;
  for (const auto& p : parts) {
    blocks.push_back(p.shape()[axis] * inner);
    handles.push_back(p.handle());
  }
  const std::size_t row = out_shape[axis] * inner;
  std::vector<double> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pd = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pd.begin() + o * blocks[k], blocks[k], out.begin() + o * row + offset);
    }
    offset += blocks[k];
  }
  const bool record = detail::should_record(parts);
  return finish(std::move(out_shape), std::move(out), record, handles,
                [handles, blocks, outer, row](std::span<const double> g) {
                  std::size_t off = 0;
                  for (std::size_t k = 0; k < handles.size(); ++k) {
                    if (handles[k]->requires_grad) {
                      std::vector<double> gk(outer * blocks[k]);
                      for (std::size_t o = 0; o < outer; ++o) {
                        std::copy_n(g.begin() + o * row + off, blocks[k], gk.begin() + o * blocks[k]);
                      }
                      detail::accumulate(*handles[k], gk);
                    }
                    off += blocks[k];
                  }
                });
}

Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("stack of zero tensors");
  std::vector<Tensor> lifted;
  lifted.reserve(parts.size());
  for (const auto& p : parts) {
    if (p.shape() != parts[0].shape()) {
      throw ShapeError("stack shape mismatch: " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    Shape s = p.shape();
    s.insert(s.begin(), 1);
    lifted.push_back(reshape(p, std::move(s)));
  }
  return concat(lifted, 0);
}

Tensor take(const Tensor& a, std::size_t axis, std::size_t index) {
  const Shape& in = a.shape();
  if (axis >= in.size()) throw ShapeError("take axis out of range for " + shape_str(in));
  if (index >= in[axis]) {
    throw ShapeError("take index " + std::to_string(index) + " out of range for axis of size " +
                     std::to_string(in[axis]));
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= in[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < in.size(); ++d) inner *= in[d];
  Shape out_shape = in;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  const std::size_t extent = in[axis];
  const auto ad = a.data();
  std::vector<double> out(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(ad.begin() + (o * extent + index) * inner, inner, out.begin() + o * inner);
  }
  const bool record = detail::should_record({&a});
  auto as = a.handle();
  return finish(std::move(out_shape), std::move(out), record, {as},
                [as, outer, inner, extent, index](std::span<const double> g) {
                  std::vector<double> ga(as->data.size(), 0.0);
                  for (std::size_t o = 0; o < outer; ++o) {
                    std::copy_n(g.begin() + o * inner, inner, ga.begin() + (o * extent + index) * inner);
                  }
                  detail::accumulate(*as, ga);
                });
}

// ---- gradient checker ------------------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  std::vector<Tensor> params{x.detach()};
  params[0].set_requires_grad(true);
  return grad_check([&]() { return f(params[0]); }, params, h);
}

double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double h) {
  std::vector<bool> prior(params.size());
  for (std::size_t k = 0; k < params.size(); ++k) {
    prior[k] = params[k].requires_grad();
    params[k].set_requires_grad(true);
    params[k].zero_grad();
  }
  std::vector<Tensor> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = f();
    if (y.numel() != 1) {
      throw ShapeError("grad_check needs a scalar function, got shape " + shape_str(y.shape()));
    }
    if (y.tape_id()) tape.backward(y);
    for (auto& p : params) analytic.push_back(p.grad());
  }
  auto eval = [&]() {
    PauseTape pause;
    return f().item();
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].mutable_data();
    const auto ana = analytic[k].data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      // Use the steps actually representable at this coordinate.
      values[i] = saved + h;
      const double step_up = values[i] - saved;
      const double fp = eval();
      values[i] = saved - h;
      const double step_down = saved - values[i];
      const double fm = eval();
      values[i] = saved;
      const double numeric = (fp - fm) / (step_up + step_down);
      const double denom = std::max({1.0, std::abs(ana[i]), std::abs(numeric)});
      worst = std::max(worst, std::abs(ana[i] - numeric) / denom);
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    params[k].zero_grad();
    params[k].set_requires_grad(prior[k]);
  }
  return worst;
}

}  // namespace ntta
