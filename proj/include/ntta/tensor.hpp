#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ntta {

using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ShapeError : public Error {
 public:
  using Error::Error;
};
class DomainError : public Error {
 public:
  using Error::Error;
};
class ValueError : public Error {
 public:
  using Error::Error;
};
class TapeError : public Error {
 public:
  using Error::Error;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Tape;

namespace detail {

struct Storage {
  Shape shape;
  std::vector<double> data;
  // Empty until the first gradient is accumulated into this storage.
  std::vector<double> grad;
  bool requires_grad = false;
  Tape* tape = nullptr;
  std::uint64_t tape_generation = 0;
  std::size_t node_id = 0;

  std::vector<double>& grad_buffer();
};

using StoragePtr = std::shared_ptr<Storage>;

}  // namespace detail

/// Dense row-major tensor of doubles. Copies are shallow handles; use
/// clone() for an independent buffer.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi);

  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return s_->data.size(); }

  std::span<const double> data() const& { return s_->data; }
  std::span<double> mutable_data() & { return s_->data; }
  // A span into a temporary would dangle once the full-expression ends.
  std::span<const double> data() const&& = delete;
  std::span<double> mutable_data() && = delete;
  double operator[](std::size_t i) const { return s_->data[i]; }
  double item() const;

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  /// Node handle on the tape that produced this tensor, if it is still live.
  std::optional<std::size_t> tape_id() const;
  bool is_leaf() const { return s_->tape == nullptr; }

  bool has_grad() const { return !s_->grad.empty(); }
  /// Accumulated gradient; zeros when nothing was accumulated.
  Tensor grad() const;
  void zero_grad() { s_->grad.clear(); }

  Tensor detach() const;
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }
  bool bitwise_equal(const Tensor& other) const;
  bool all_finite() const;

  const detail::StoragePtr& handle() const { return s_; }
  static Tensor wrap(detail::StoragePtr storage);

 private:
  detail::StoragePtr s_;
};

/// Define-by-run record of differentiable operations. Build one per forward
/// pass, activate it with TapeScope, and call backward() once.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> out_grad)>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const Tensor& output, std::vector<detail::StoragePtr> parents,
              BackwardFn fn);
  void backward(const Tensor& loss);
  void reset();

  std::size_t size() const { return nodes_.size(); }
  std::size_t next_id() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  std::uint64_t generation() const { return generation_; }

  static Tape* active();

 private:
  friend class TapeScope;
  friend class PauseTape;
  struct Node {
    detail::StoragePtr output;
    std::vector<detail::StoragePtr> parents;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
  std::uint64_t generation_;
  bool consumed_ = false;
};

/// Makes a tape the recording target for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording on the current thread.
class PauseTape {
 public:
  PauseTape();
  ~PauseTape();
  PauseTape(const PauseTape&) = delete;
  PauseTape& operator=(const PauseTape&) = delete;

 private:
  Tape* previous_;
};

namespace detail {

bool should_record(std::initializer_list<const Tensor*> inputs);
bool should_record(std::span<const Tensor> inputs);
/// Adds the gradient `g` (same length as the storage) into `s` if it tracks
/// gradients.
void accumulate(Storage& s, std::span<const double> g);

/// Builds an op result and, when `record` is set, registers its backward
/// closure on the active tape.
Tensor make_result(Shape shape, std::vector<double> data, bool record,
                   std::vector<StoragePtr> parents, Tape::BackwardFn fn);
/// As make_result, for closures that read the output values. The tape node
/// owns the output, so the raw pointer stays valid for the closure's lifetime.
Tensor make_result_with_output(Shape shape, std::vector<double> data, bool record,
                               std::vector<StoragePtr> parents,
                               const std::function<Tape::BackwardFn(const Storage*)>& make);

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

enum class BinaryOp { add, sub, mul, div };
enum class UnaryOp { exp, log, neg };

Shape broadcast_shapes(const Shape& a, const Shape& b);

Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b);
Tensor elementwise(BinaryOp op, const Tensor& a, double b);
Tensor elementwise(UnaryOp op, const Tensor& a);

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::mul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::div, a, b); }
inline Tensor exp(const Tensor& a) { return elementwise(UnaryOp::exp, a); }
inline Tensor log(const Tensor& a) { return elementwise(UnaryOp::log, a); }
inline Tensor neg(const Tensor& a) { return elementwise(UnaryOp::neg, a); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double b) { return elementwise(BinaryOp::add, a, b); }
inline Tensor operator-(const Tensor& a, double b) { return elementwise(BinaryOp::sub, a, b); }
inline Tensor operator*(const Tensor& a, double b) { return elementwise(BinaryOp::mul, a, b); }
inline Tensor operator/(const Tensor& a, double b) { return elementwise(BinaryOp::div, a, b); }
inline Tensor operator*(double a, const Tensor& b) { return elementwise(BinaryOp::mul, b, a); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- reductions ------------------------------------------------------------

enum class ReduceOp { sum, mean, max };

/// Reduces over `axes` (all axes when empty). Accumulation runs in row-major
/// order of the input, so results are reproducible bit for bit.
Tensor reduce(ReduceOp op, const Tensor& a, std::vector<std::size_t> axes = {},
              bool keepdims = false);

inline Tensor sum(const Tensor& a, std::vector<std::size_t> axes = {}, bool keepdims = false) {
  return reduce(ReduceOp::sum, a, std::move(axes), keepdims);
}
inline Tensor mean(const Tensor& a, std::vector<std::size_t> axes = {}, bool keepdims = false) {
  return reduce(ReduceOp::mean, a, std::move(axes), keepdims);
}
inline Tensor max(const Tensor& a, std::vector<std::size_t> axes = {}, bool keepdims = false) {
  return reduce(ReduceOp::max, a, std::move(axes), keepdims);
}

// ---- linear algebra and layout ---------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
/// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> parts);
/// Selects `index` along `axis` and drops that axis.
Tensor take(const Tensor& a, std::size_t axis, std::size_t index);

// ---- autodiff entry points -------------------------------------------------

/// Runs reverse mode from a scalar loss on the tape that recorded it.
void backward(const Tensor& loss);

/// Max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
/// with central differences of step h.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double h = 1e-6);

/// Same check over several parameter tensors perturbed in place.
double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                  double h = 1e-6);

}  // namespace ntta
