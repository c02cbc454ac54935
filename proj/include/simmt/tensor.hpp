#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "simmt/error.hpp"
#include "simmt/rng.hpp"

namespace simmt {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& shape);
int64_t shape_numel(const Shape& shape);
std::vector<int64_t> row_major_strides(const Shape& shape);

class Tape;

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily, empty until first use
  bool requires_grad = false;
  const Tape* producer = nullptr;  // tape that recorded the producing op
};
}  // namespace detail

// Dense row-major double tensor with shared storage. Copies are shallow;
// gradients accumulate into the shared impl during Tape::backward.
class Tensor {
 public:
  Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor({1}, {value}); }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor full(Shape shape, double value) {
    return Tensor(std::move(shape), value);
  }
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng);
  static Tensor xavier_uniform(int64_t fan_in, int64_t fan_out, Rng& rng);

  const Shape& shape() const { return impl_->shape; }
  int64_t ndim() const { return static_cast<int64_t>(impl_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
  int64_t dim(int i) const;  // negative i counts from the end

  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }
  double& operator[](int64_t i) { return impl_->data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const {
    return impl_->data[static_cast<size_t>(i)];
  }
  double at(std::initializer_list<int64_t> idx) const;

  // Value of a one-element tensor; DimensionError otherwise.
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool value) {
    impl_->requires_grad = value;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::vector<double>& grad();             // allocates zeros on first access
  const std::vector<double>& grad() const; // DimensionError if never touched
  void zero_grad();

  const Tape* producer() const { return impl_->producer; }

  // Deep copy with fresh storage; grad state is not copied.
  Tensor clone() const;
  bool all_finite() const;

  detail::TensorImpl* impl() const { return impl_.get(); }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Boolean mask over attention logits and similar score grids. `allowed`
// is row-major over `shape`; true means the position may be attended.
struct Mask {
  Shape shape;
  std::vector<uint8_t> allowed;

  Mask() = default;
  explicit Mask(Shape s, bool fill = true)
      : shape(std::move(s)),
        allowed(static_cast<size_t>(shape_numel(shape)), fill ? 1 : 0) {}

  static Mask full(int64_t rows, int64_t cols) { return Mask({rows, cols}); }

  int64_t numel() const { return static_cast<int64_t>(allowed.size()); }
  bool at(int64_t row, int64_t col) const;
  void set(int64_t row, int64_t col, bool value);
  bool operator==(const Mask& other) const {
    return shape == other.shape && allowed == other.allowed;
  }
};

// Reverse-mode tape. Ops executed inside a TapeScope append their backward
// closures here in execution order; backward replays them in reverse.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void push(std::function<void()> node) { nodes_.push_back(std::move(node)); }

  // Seeds d(loss)/d(loss) = 1 and runs all recorded closures in reverse.
  // `loss` must be a scalar recorded on this tape. A second call without
  // reset() raises NumericError: gradients would silently double.
  void backward(const Tensor& loss);

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

// RAII activation of a tape on this thread. Ops record onto the innermost
// active tape; with no scope active they run without recording.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// Elementwise ops broadcast with trailing-dimension alignment (numpy rules).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

// [..., m, k] x [..., k, n] -> [..., m, n]; batch dims broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

// Swaps the last two dims.
Tensor transpose(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor relu(const Tensor& a);

// Softmax along `axis`. An optional mask (shape equal to a trailing suffix
// of x's shape) zeroes disallowed positions; a slice with no allowed
// position raises NumericError.
Tensor softmax(const Tensor& x, int axis, const Mask* mask = nullptr);

// Normalizes the last dimension to zero mean and unit variance, then
// applies elementwise gain and bias (both shaped [last_dim]).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// Rows of `table` ([vocab, dim]) gathered by id; out-of-range ids are a
// DataError naming the id and table size.
Tensor embedding(const Tensor& table, const std::vector<int>& ids);

// Inverted dropout: kept values scale by 1/(1-p). p == 0 is the identity;
// the rng is consumed once per element otherwise.
Tensor dropout(const Tensor& x, double p, Rng& rng);

Tensor sum(const Tensor& a);   // scalar
Tensor mean(const Tensor& a);  // scalar

// Label-smoothed cross entropy over logits [..., vocab] against one target
// id per row, averaged over non-pad rows. The smoothed target distribution
// is (1-eps) * onehot + eps/vocab over the full vocabulary.
Tensor cross_entropy_label_smoothed(const Tensor& logits,
                                    const std::vector<int>& targets,
                                    double epsilon, int pad_id = -1);

// KL(p || q) for two distributions of equal length; q is floored at 1e-12
// inside the log. Terms with p_i == 0 contribute zero. Gradient flows to q
// only (p is treated as constant supervision).
Tensor kl_divergence(const Tensor& p, const Tensor& q);

inline constexpr double kKlFloor = 1e-12;

// Max over coordinates of |analytic - central_difference| relative error,
// denominator max(1e-8, |cd|). Also verifies f is deterministic by running
// it twice. f must map a tensor shaped like x to a scalar.
double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double h = 1e-5);

}  // namespace simmt
