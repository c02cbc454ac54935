#include "simmt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <sstream>
#include <utility>

namespace simmt {

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << "]";
  return out.str();
}

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::vector<int64_t> row_major_strides(const Shape& shape) {
  std::vector<int64_t> strides(shape.size(), 1);
  for (size_t i = shape.size(); i-- > 1;) {
    strides[i - 1] = strides[i] * shape[i];
  }
  return strides;
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
  for (int64_t d : shape) {
    if (d <= 0) {
      throw DimensionError("tensor dims must be positive, got " +
                           shape_str(shape));
    }
  }
}

std::vector<double>& ensure_grad(detail::TensorImpl* impl) {
  if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
  return impl->grad;
}

thread_local Tape* g_active_tape = nullptr;

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const size_t ra = a.size(), rb = b.size();
  const size_t r = std::max(ra, rb);
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    const int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
    const int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " +
                           shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides for indexing `in` at positions of `out`; 0 where `in` broadcasts.
std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  const auto s = row_major_strides(in);
  std::vector<int64_t> result(out.size(), 0);
  const size_t off = out.size() - in.size();
  for (size_t i = 0; i < in.size(); ++i) {
    result[off + i] = (in[i] == 1 && out[off + i] != 1) ? 0 : s[i];
  }
  return result;
}

// Visits fn(out_idx, a_idx, b_idx) for every position of `out`.
template <class Fn>
void for_each_broadcast(const Shape& out, const std::vector<int64_t>& sa,
                        const std::vector<int64_t>& sb, Fn&& fn) {
  const int64_t total = shape_numel(out);
  const size_t rank = out.size();
  std::vector<int64_t> idx(rank, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t io = 0; io < total; ++io) {
    fn(io, ia, ib);
    for (size_t d = rank; d-- > 0;) {
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

// True when b's shape equals a trailing suffix of a's shape, so
// b_idx == a_idx % b.numel() under row-major layout.
bool is_trailing_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  const size_t off = a.size() - b.size();
  for (size_t i = 0; i < b.size(); ++i) {
    if (a[off + i] != b[i]) return false;
  }
  return true;
}

int normalize_axis(int axis, int64_t rank, const char* op) {
  const int a = axis < 0 ? axis + static_cast<int>(rank) : axis;
  if (a < 0 || a >= rank) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
  }
  return a;
}

}  // namespace

Tensor::Tensor(Shape shape, double fill)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  validate_shape(shape);
  impl_->shape = std::move(shape);
  impl_->data.assign(static_cast<size_t>(shape_numel(impl_->shape)), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  validate_shape(shape);
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw DimensionError("data size " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

Tensor Tensor::xavier_uniform(int64_t fan_in, int64_t fan_out, Rng& rng) {
  const double limit =
      std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform({fan_in, fan_out}, -limit, limit, rng);
}

int64_t Tensor::dim(int i) const {
  const auto rank = ndim();
  const int64_t a = i < 0 ? i + rank : i;
  if (a < 0 || a >= rank) {
    throw DimensionError("dim index " + std::to_string(i) +
                         " out of range for shape " + shape_str(shape()));
  }
  return impl_->shape[static_cast<size_t>(a)];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
  if (static_cast<int64_t>(idx.size()) != ndim()) {
    throw DimensionError("index rank " + std::to_string(idx.size()) +
                         " does not match shape " + shape_str(shape()));
  }
  const auto strides = row_major_strides(impl_->shape);
  int64_t offset = 0;
  size_t d = 0;
  for (int64_t i : idx) {
    if (i < 0 || i >= impl_->shape[d]) {
      throw DimensionError("index out of range for shape " +
                           shape_str(shape()));
    }
    offset += i * strides[d];
    ++d;
  }
  return impl_->data[static_cast<size_t>(offset)];
}

double Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item() requires a one-element tensor, got shape " +
                         shape_str(shape()));
  }
  return impl_->data[0];
}

std::vector<double>& Tensor::grad() { return ensure_grad(impl_.get()); }

const std::vector<double>& Tensor::grad() const {
  if (impl_->grad.empty()) {
    throw DimensionError("gradient was never computed for this tensor");
  }
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }
}

Tensor Tensor::clone() const {
  Tensor t;
  t.impl_->shape = impl_->shape;
  t.impl_->data = impl_->data;
  return t;
}

bool Tensor::all_finite() const {
  for (double v : impl_->data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool Mask::at(int64_t row, int64_t col) const {
  if (shape.size() != 2) {
    throw DimensionError("Mask::at requires a rank-2 mask, got " +
                         shape_str(shape));
  }
  return allowed[static_cast<size_t>(row * shape[1] + col)] != 0;
}

void Mask::set(int64_t row, int64_t col, bool value) {
  if (shape.size() != 2) {
    throw DimensionError("Mask::set requires a rank-2 mask, got " +
                         shape_str(shape));
  }
  allowed[static_cast<size_t>(row * shape[1] + col)] = value ? 1 : 0;
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) {
    throw NumericError(
        "Tape::backward called twice without reset; gradients would "
        "accumulate over stale closures");
  }
  if (loss.numel() != 1) {
    throw DimensionError("backward requires a scalar loss, got shape " +
                         shape_str(loss.shape()));
  }
  if (loss.producer() != this) {
    throw NumericError("backward: the loss was not recorded on this tape");
  }
  consumed_ = true;
  loss.impl()->grad.assign(1, 1.0);
  for (size_t i = nodes_.size(); i-- > 0;) nodes_[i]();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) {
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

namespace {

// Shared skeleton for elementwise binary ops with broadcasting.
template <class Fwd, class Bwd>
Tensor binary_op(const Tensor& a, const Tensor& b, Fwd&& fwd, Bwd&& bwd) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  Tensor out(out_shape);
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  const int64_t n = out.numel();

  if (a.shape() == b.shape()) {
    for (int64_t i = 0; i < n; ++i) ov[i] = fwd(av[i], bv[i]);
  } else if (out_shape == a.shape() && is_trailing_suffix(a.shape(), b.shape())) {
    const int64_t nb = b.numel();
    for (int64_t i = 0; i < n; ++i) ov[i] = fwd(av[i], bv[i % nb]);
  } else {
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    for_each_broadcast(out_shape, sa, sb,
                       [&](int64_t io, int64_t ia, int64_t ib) {
                         ov[io] = fwd(av[ia], bv[ib]);
                       });
  }

  Tape* tape = active_tape();
  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    out.impl()->producer = tape;
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    tape->push([a, b, out, out_shape, sa, sb, bwd]() {
      if (!out.has_grad()) return;
      const auto& og = out.impl()->grad;
      const auto& av = a.data();
      const auto& bv = b.data();
      double* ga = a.requires_grad() ? ensure_grad(a.impl()).data() : nullptr;
      double* gb = b.requires_grad() ? ensure_grad(b.impl()).data() : nullptr;
      for_each_broadcast(out_shape, sa, sb,
                         [&](int64_t io, int64_t ia, int64_t ib) {
                           bwd(og[io], av[ia], bv[ib], ga ? ga + ia : nullptr,
                               gb ? gb + ib : nullptr);
                         });
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb += g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb -= g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; },
      [](double g, double x, double y, double* ga, double* gb) {
        if (ga) *ga += g * y;
        if (gb) *gb += g * x;
      });
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] * factor;
  Tape* tape = active_tape();
  if (tape && a.requires_grad()) {
    out.set_requires_grad(true);
    out.impl()->producer = tape;
    tape->push([a, out, factor]() {
      if (!out.has_grad()) return;
      const auto& og = out.impl()->grad;
      auto& ga = ensure_grad(a.impl());
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += og[i] * factor;
    });
  }
  return out;
}

namespace {

struct MatmulPlan {
  Shape out_shape;
  Shape batch_shape;
  int64_t m = 0, k = 0, n = 0;
  std::vector<int64_t> base_a, base_b;  // per batch cell, element offsets
};

MatmulPlan plan_matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2) {
    throw DimensionError("matmul requires rank >= 2, got " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  MatmulPlan plan;
  plan.m = a.dim(-2);
  plan.k = a.dim(-1);
  const int64_t k2 = b.dim(-2);
  plan.n = b.dim(-1);
  if (plan.k != k2) {
    throw DimensionError("matmul inner dims differ: " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  plan.batch_shape = broadcast_shapes(
      batch_a.empty() ? Shape{1} : batch_a, batch_b.empty() ? Shape{1} : batch_b);
  if (plan.batch_shape == Shape{1} && batch_a.empty() && batch_b.empty()) {
    plan.batch_shape.clear();
  }

  plan.out_shape = plan.batch_shape;
  plan.out_shape.push_back(plan.m);
  plan.out_shape.push_back(plan.n);

  const int64_t cells =
      plan.batch_shape.empty() ? 1 : shape_numel(plan.batch_shape);
  plan.base_a.resize(static_cast<size_t>(cells));
  plan.base_b.resize(static_cast<size_t>(cells));
  if (plan.batch_shape.empty()) {
    plan.base_a[0] = 0;
    plan.base_b[0] = 0;
    return plan;
  }
  // Batch strides in elements of the full tensors; 0 where broadcast.
  auto batch_strides = [&](const Shape& batch, int64_t mat_elems) {
    Shape padded = batch.empty() ? Shape{1} : batch;
    auto s = row_major_strides(padded);
    for (auto& v : s) v *= mat_elems;
    std::vector<int64_t> aligned(plan.batch_shape.size(), 0);
    const size_t off = plan.batch_shape.size() - padded.size();
    for (size_t i = 0; i < padded.size(); ++i) {
      aligned[off + i] =
          (padded[i] == 1 && plan.batch_shape[off + i] != 1) ? 0 : s[i];
    }
    return aligned;
  };
  const auto sa = batch_strides(batch_a, plan.m * plan.k);
  const auto sb = batch_strides(batch_b, plan.k * plan.n);
  std::vector<int64_t> idx(plan.batch_shape.size(), 0);
  int64_t oa = 0, ob = 0;
  for (int64_t c = 0; c < cells; ++c) {
    plan.base_a[static_cast<size_t>(c)] = oa;
    plan.base_b[static_cast<size_t>(c)] = ob;
    for (size_t d = plan.batch_shape.size(); d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < plan.batch_shape[d]) break;
      oa -= sa[d] * plan.batch_shape[d];
      ob -= sb[d] * plan.batch_shape[d];
      idx[d] = 0;
    }
  }
  return plan;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const MatmulPlan plan = plan_matmul(a, b);
  Tensor out(plan.out_shape);
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  const int64_t m = plan.m, k = plan.k, n = plan.n;
  for (size_t c = 0; c < plan.base_a.size(); ++c) {
    const double* A = av.data() + plan.base_a[c];
    const double* B = bv.data() + plan.base_b[c];
    double* C = ov.data() + static_cast<int64_t>(c) * m * n;
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t p = 0; p < k; ++p) {
        const double x = A[i * k + p];
        const double* brow = B + p * n;
        double* crow = C + i * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += x * brow[j];
      }
    }
  }

  Tape* tape = active_tape();
  if (tape && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    out.impl()->producer = tape;
    tape->push([a, b, out, plan]() {
      if (!out.has_grad()) return;
      const auto& og = out.impl()->grad;
      const auto& av = a.data();
      const auto& bv = b.data();
      const int64_t m = plan.m, k = plan.k, n = plan.n;
      double* ga = a.requires_grad() ? ensure_grad(a.impl()).data() : nullptr;
      double* gb = b.requires_grad() ? ensure_grad(b.impl()).data() : nullptr;
      for (size_t c = 0; c < plan.base_a.size(); ++c) {
        const double* A = av.data() + plan.base_a[c];
        const double* B = bv.data() + plan.base_b[c];
        const double* dC = og.data() + static_cast<int64_t>(c) * m * n;
        if (ga) {
          double* dA = ga + plan.base_a[c];
          for (int64_t i = 0; i < m; ++i) {
            for (int64_t p = 0; p < k; ++p) {
              const double* brow = B + p * n;
              const double* crow = dC + i * n;
              double acc = 0.0;
              for (int64_t j = 0; j < n; ++j) acc += crow[j] * brow[j];
              dA[i * k + p] += acc;
            }
          }
        }
        if (gb) {
          double* dB = gb + plan.base_b[c];
          for (int64_t i = 0; i < m; ++i) {
            const double* crow = dC + i * n;
            for (int64_t p = 0; p < k; ++p) {
              const double x = A[i * k + p];
              double* brow = dB + p * n;
              for (int64_t j = 0; j < n; ++j) brow[j] += x * crow[j];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() < 2) {
    throw DimensionError("transpose requires rank >= 2, got shape " +
                         shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  Tensor out(out_shape);
  const int64_t rows = a.dim(-2), cols = a.dim(-1);
  const int64_t mat = rows * cols;
  const int64_t batches = a.numel() / mat;
  const auto& av = a.data();
  auto& ov = out.data();
  for (int64_t c = 0; c < batches; ++c) {
    const double* A = av.data() + c * mat;
    double* O = ov.data() + c * mat;
    for (int64_t i = 0; i < rows; ++i) {
      for (int64_t j = 0; j < cols; ++j) O[j * rows + i] = A[i * cols + j];
    }
  }
  Tape* tape = active_tape();
  if (tape && a.requires_grad()) {
    out.set_requires_grad(true);
    out.impl()->producer = tape;
    tape->push([a, out, rows, cols, mat, batches]() {
      if (!out.has_grad()) return;
      const auto& og = out.impl()->grad;
      auto& ga = ensure_grad(a.impl());
      for (int64_t c = 0; c < batches; ++c) {
        const double* dO = og.data() + c * mat;
        double* dA = ga.data() + c * mat;
        for (int64_t i = 0; i < rows; ++i) {
          for (int64_t j = 0; j < cols; ++j) dA[i * cols + j] += dO[j * rows + i];
        }
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  validate_shape(shape);
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape from " + shape_str(a.shape()) + " to " +
                         shape_str(shape) + " changes element count");
  }
  Tensor out(std::move(shape), a.data());
  Tape* tape = active_tape();
  if (tape && a.requires_grad()) {
    out.set_requires_grad(true);
    out.impl()->producer = tape;
    tape->push([a, out]() {
      if (!out.has_grad()) return;
      const auto& og = out.impl()->grad;
      auto& ga = ensure_grad(a.impl());
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += og[i];
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const int64_t rank = parts[0].ndim();
  const int ax = normalize_axis(axis, rank, "concat");
  Shape out_shape = parts[0].shape();
  int64_t axis_total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != rank) {
      throw DimensionError("concat rank mismatch: " + shape_str(out_shape) +
                           " vs " + shape_str(p.shape()));
    }
    for (int64_t d = 0; d < rank; ++d) {
      if (d != ax && p.shape()[static_cast<size_t>(d)] !=
                         out_shape[static_cast<size_t>(d)]) {
        throw DimensionError("concat dim mismatch off axis: " +
                             shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
      }
    }
    axis_total += p.shape()[static_cast<size_t>(ax)];
  }
  out_shape[static_cast<size_t>(ax)] = axis_total;
  Tensor out(out_shape);

  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < ax; ++d) outer *= out_shape[static_cast<size_t>(d)];
  for (int64_t d = ax + 1; d < rank; ++d) {
    inner *= out_shape[static_cast<size_t>(d)];
  }
  const int64_t out_block = axis_total * inner;
  auto& ov = out.data();
  int64_t axis_offset = 0;
  for (const auto& p : parts) {
    const int64_t p_axis = p.shape()[static_cast<size_t>(ax)];
    const int64_t p_block = p_axis * inner;
    const auto& pv = p.data();
    for (int64_t o = 0; o < outer; ++o) {
      std::copy(pv.begin() + o * p_block, pv.begin() + (o + 1) * p_block,
                ov.begin() + o * out_block + axis_offset * inner);
    }
    axis_offset += p_axis;
  }

  Tape* tape = active_tape();
  bool any_grad = false;
  for (const auto& p : parts) any_grad = any_grad || p.requires_grad();
  if (tape && any_grad) {
    out.set_requires_grad(true);
    out.impl()->producer = tape;
    std::vector<Tensor> held = parts;
    tape->push([held, out, outer, inner, out_block, ax]() {
      if (!out.has_grad()) return;
      const auto& og = out.impl()->grad;
      int64_t axis_offset = 0;
      for (const auto& p : held) {
        const int64_t p_axis = p.shape()[static_cast<size_t>(ax)];
        const int64_t p_block = p_axis * inner;
        if (p.requires_grad()) {
          auto& pg = ensure_grad(p.impl());
          for (int64_t o = 0; o < outer; ++o) {
            const double* src = og.data() + o * out_block + axis_offset * inner;
            double* dst = pg.data() + o * p_block;
            for (int64_t i = 0; i < p_block; ++i) dst[i] += src[i];
          }
        }
        axis_offset += p_axis;
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& a) {
  Tensor out(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) ov[i] = av[i] > 0.0 ? av[i] : 0.0;
  Tape* tape = active_tape();
  if (tape && a.requires_grad()) {
    out.set_requires_grad(true);
    out.impl()->producer = tape;
    tape->push([a, out]() {
      if (!out.has_grad()) return;
      const auto& og = out.impl()->grad;
      const auto& av = a.data();
      auto& ga = ensure_grad(a.impl());
      for (size_t i = 0; i < ga.size(); ++i) {
        if (av[i] > 0.0) ga[i] += og[i];
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, int axis, const Mask* mask) {
  const int ax = normalize_axis(axis, x.ndim(), "softmax");
  if (mask) {
    if (!is_trailing_suffix(x.shape(), mask->shape)) {
      throw DimensionError("softmax mask shape " + shape_str(mask->shape) +
                           " is not a trailing suffix of " +
                           shape_str(x.shape()));
    }
  }
  const auto strides = row_major_strides(x.shape());
  const int64_t step = strides[static_cast<size_t>(ax)];
  const int64_t len = x.shape()[static_cast<size_t>(ax)];
  const int64_t block = step * len;
  const int64_t total = x.numel();
  const int64_t mask_n = mask ? mask->numel() : 0;

  Tensor out(x.shape());
  const auto& xv = x.data();
  auto& yv = out.data();
  for (int64_t start = 0; start < total; start += block) {
    for (int64_t off = start; off < start + step; ++off) {
      double max_v = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (int64_t t = 0; t < len; ++t) {
        const int64_t i = off + t * step;
        if (mask && !mask->allowed[static_cast<size_t>(i % mask_n)]) continue;
        any = true;
        max_v = std::max(max_v, xv[i]);
      }
      if (!any) {
        throw NumericError("softmax: slice has no allowed position");
      }
      double denom = 0.0;
      for (int64_t t = 0; t < len; ++t) {
        const int64_t i = off + t * step;
        if (mask && !mask->allowed[static_cast<size_t>(i % mask_n)]) {
          yv[i] = 0.0;
          continue;
        }
        yv[i] = std::exp(xv[i] - max_v);
        denom += yv[i];
      }
      for (int64_t t = 0; t < len; ++t) {
        const int64_t i = off + t * step;
        yv[i] /= denom;
      }
    }
  }

  Tape* tape = active_tape();
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    out.impl()->producer = tape;
    tape->push([x, out, step, len, block, total]() {
      if (!out.has_grad()) return;
      const auto& og = out.impl()->grad;
      const auto& yv = out.data();
      auto& gx = ensure_grad(x.impl());
      for (int64_t start = 0; start < total; start += block) {
        for (int64_t off = start; off < start + step; ++off) {
          double dot = 0.0;
          for (int64_t t = 0; t < len; ++t) {
            const int64_t i = off + t * step;
            dot += yv[i] * og[i];
          }
          for (int64_t t = 0; t < len; ++t) {
            const int64_t i = off + t * step;
            gx[i] += yv[i] * (og[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  const int64_t d = x.dim(-1);
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm gain/bias must be shaped [" +
                         std::to_string(d) + "], got " +
                         shape_str(gain.shape()) + " and " +
                         shape_str(bias.shape()));
  }
  const int64_t rows = x.numel() / d;
  Tensor out(x.shape());
  std::vector<double> normalized(static_cast<size_t>(x.numel()));
  std::vector<double> inv_std(static_cast<size_t>(rows));
  const auto& xv = x.data();
  const auto& gv = gain.data();
  const auto& bv = bias.data();
  auto& yv = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = inv;
    for (int64_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mean) * inv;
      normalized[static_cast<size_t>(r * d + j)] = xh;
      yv[static_cast<size_t>(r * d + j)] = gv[j] * xh + bv[j];
    }
  }

  Tape* tape = active_tape();
  if (tape &&
      (x.requires_grad() || gain.requires_grad() || bias.requires_grad())) {
    out.set_requires_grad(true);
    out.impl()->producer = tape;
    tape->push([x, gain, bias, out, d, rows,
                normalized = std::move(normalized),
                inv_std = std::move(inv_std)]() {
      if (!out.has_grad()) return;
      const auto& og = out.impl()->grad;
      const auto& gv = gain.data();
      double* gg =
          gain.requires_grad() ? ensure_grad(gain.impl()).data() : nullptr;
      double* gb =
          bias.requires_grad() ? ensure_grad(bias.impl()).data() : nullptr;
      double* gx = x.requires_grad() ? ensure_grad(x.impl()).data() : nullptr;
      for (int64_t r = 0; r < rows; ++r) {
        const double* dy = og.data() + r * d;
        const double* xh = normalized.data() + r * d;
        if (gg || gb) {
          for (int64_t j = 0; j < d; ++j) {
            if (gg) gg[j] += dy[j] * xh[j];
            if (gb) gb[j] += dy[j];
          }
        }
        if (gx) {
          double mean_dxh = 0.0, mean_dxh_xh = 0.0;
          for (int64_t j = 0; j < d; ++j) {
            const double dxh = dy[j] * gv[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
          }
          mean_dxh /= static_cast<double>(d);
          mean_dxh_xh /= static_cast<double>(d);
          const double inv = inv_std[static_cast<size_t>(r)];
          for (int64_t j = 0; j < d; ++j) {
            const double dxh = dy[j] * gv[j];
            gx[r * d + j] += inv * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
          }
        }
      }
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  if (table.ndim() != 2) {
    throw DimensionError("embedding table must be rank 2, got shape " +
                         shape_str(table.shape()));
  }
  if (ids.empty()) throw DimensionError("embedding of an empty id list");
  const int64_t vocab = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw DataError("embedding id " + std::to_string(id) +
                      " out of range [0, " + std::to_string(vocab) + ")");
    }
  }
  Tensor out({static_cast<int64_t>(ids.size()), d});
  const auto& tv = table.data();
  auto& ov = out.data();
  for (size_t i = 0; i < ids.size(); ++i) {
    std::copy(tv.begin() + static_cast<int64_t>(ids[i]) * d,
              tv.begin() + (static_cast<int64_t>(ids[i]) + 1) * d,
              ov.begin() + static_cast<int64_t>(i) * d);
  }
  Tape* tape = active_tape();
  if (tape && table.requires_grad()) {
    out.set_requires_grad(true);
    out.impl()->producer = tape;
    tape->push([table, out, ids, d]() {
      if (!out.has_grad()) return;
      const auto& og = out.impl()->grad;
      auto& gt = ensure_grad(table.impl());
      for (size_t i = 0; i < ids.size(); ++i) {
        const double* src = og.data() + static_cast<int64_t>(i) * d;
        double* dst = gt.data() + static_cast<int64_t>(ids[i]) * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) {
    throw ConfigError("dropout probability must be in [0, 1), got " +
                      std::to_string(p));
  }
  if (p == 0.0) return x;
  Tensor out(x.shape());
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<uint8_t> kept(static_cast<size_t>(x.numel()));
  const auto& xv = x.data();
  auto& ov = out.data();
  for (int64_t i = 0; i < x.numel(); ++i) {
    const bool keep = rng.uniform() >= p;
    kept[static_cast<size_t>(i)] = keep ? 1 : 0;
    ov[i] = keep ? xv[i] * keep_scale : 0.0;
  }
  Tape* tape = active_tape();
  if (tape && x.requires_grad()) {
    out.set_requires_grad(true);
    out.impl()->producer = tape;
    tape->push([x, out, kept = std::move(kept), keep_scale]() {
      if (!out.has_grad()) return;
      const auto& og = out.impl()->grad;
      auto& gx = ensure_grad(x.impl());
      for (size_t i = 0; i < gx.size(); ++i) {
        if (kept[i]) gx[i] += og[i] * keep_scale;
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  Tensor out({1});
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  out[0] = acc;
  Tape* tape = active_tape();
  if (tape && a.requires_grad()) {
    out.set_requires_grad(true);
    out.impl()->producer = tape;
    tape->push([a, out]() {
      if (!out.has_grad()) return;
      const double g = out.impl()->grad[0];
      auto& ga = ensure_grad(a.impl());
      for (auto& v : ga) v += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor cross_entropy_label_smoothed(const Tensor& logits,
                                    const std::vector<int>& targets,
                                    double epsilon, int pad_id) {
  if (logits.ndim() < 2) {
    throw DimensionError("cross entropy expects logits of rank >= 2, got " +
                         shape_str(logits.shape()));
  }
  if (epsilon < 0.0 || epsilon >= 1.0) {
    throw ConfigError("label smoothing must be in [0, 1), got " +
                      std::to_string(epsilon));
  }
  const int64_t vocab = logits.dim(-1);
  const int64_t rows = logits.numel() / vocab;
  if (static_cast<int64_t>(targets.size()) != rows) {
    throw DimensionError("cross entropy got " +
                         std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  }
  int64_t live = 0;
  for (int t : targets) {
    if (t == pad_id) continue;
    if (t < 0 || t >= vocab) {
      throw DataError("cross entropy target " + std::to_string(t) +
                      " out of range [0, " + std::to_string(vocab) + ")");
    }
    ++live;
  }
  if (live == 0) {
    throw DataError("cross entropy: every position is padding");
  }

  const auto& zv = logits.data();
  std::vector<double> probs(static_cast<size_t>(logits.numel()), 0.0);
  double total = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    if (targets[static_cast<size_t>(r)] == pad_id) continue;
    const double* z = zv.data() + r * vocab;
    double* pr = probs.data() + r * vocab;
    double max_z = z[0];
    for (int64_t j = 1; j < vocab; ++j) max_z = std::max(max_z, z[j]);
    double denom = 0.0, sum_z = 0.0;
    for (int64_t j = 0; j < vocab; ++j) {
      pr[j] = std::exp(z[j] - max_z);
      denom += pr[j];
      sum_z += z[j];
    }
    const double lse = max_z + std::log(denom);
    for (int64_t j = 0; j < vocab; ++j) pr[j] /= denom;
    const double zy = z[targets[static_cast<size_t>(r)]];
    total += lse - (1.0 - epsilon) * zy -
             (epsilon / static_cast<double>(vocab)) * sum_z;
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(live));

  Tape* tape = active_tape();
  if (tape && logits.requires_grad()) {
    out.set_requires_grad(true);
    out.impl()->producer = tape;
    tape->push([logits, out, targets, epsilon, pad_id, vocab, rows, live,
                probs = std::move(probs)]() {
      if (!out.has_grad()) return;
      const double g = out.impl()->grad[0] / static_cast<double>(live);
      auto& gz = ensure_grad(logits.impl());
      const double uniform = epsilon / static_cast<double>(vocab);
      for (int64_t r = 0; r < rows; ++r) {
        const int y = targets[static_cast<size_t>(r)];
        if (y == pad_id) continue;
        const double* pr = probs.data() + r * vocab;
        double* dz = gz.data() + r * vocab;
        for (int64_t j = 0; j < vocab; ++j) {
          double q = uniform;
          if (j == y) q += 1.0 - epsilon;
          dz[j] += g * (pr[j] - q);
        }
      }
    });
  }
  return out;
}

Tensor kl_divergence(const Tensor& p, const Tensor& q) {
  if (p.shape() != q.shape()) {
    throw DimensionError("kl_divergence shapes differ: " +
                         shape_str(p.shape()) + " vs " + shape_str(q.shape()));
  }
  const auto& pv = p.data();
  const auto& qv = q.data();
  double sum_p = 0.0, sum_q = 0.0;
  for (int64_t i = 0; i < p.numel(); ++i) {
    if (pv[i] < 0.0 || qv[i] < 0.0) {
      throw NumericError("kl_divergence requires nonnegative entries");
    }
    sum_p += pv[i];
    sum_q += qv[i];
  }
  if (std::abs(sum_p - 1.0) > 1e-6 || std::abs(sum_q - 1.0) > 1e-6) {
    throw NumericError("kl_divergence inputs must sum to 1 within 1e-6");
  }
  double value = 0.0;
  for (int64_t i = 0; i < p.numel(); ++i) {
    if (pv[i] > 0.0) {
      value += pv[i] * (std::log(pv[i]) - std::log(std::max(qv[i], kKlFloor)));
    }
  }
  Tensor out = Tensor::scalar(value);

  // Supervision distributions p are constants; gradient flows to q only.
  Tape* tape = active_tape();
  if (tape && q.requires_grad()) {
    out.set_requires_grad(true);
    out.impl()->producer = tape;
    tape->push([p, q, out]() {
      if (!out.has_grad()) return;
      const double g = out.impl()->grad[0];
      const auto& pv = p.data();
      const auto& qv = q.data();
      auto& gq = ensure_grad(q.impl());
      for (size_t i = 0; i < gq.size(); ++i) {
        if (pv[i] > 0.0 && qv[i] > kKlFloor) gq[i] -= g * pv[i] / qv[i];
      }
    });
  }
  return out;
}

namespace {

double run_scalar(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x) {
  const Tensor y = f(x);
  if (y.numel() != 1) {
    throw DimensionError("grad_check: f must return a scalar, got shape " +
                         shape_str(y.shape()));
  }
  return y.item();
}

}  // namespace

double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double h) {
  Tensor probe = x.clone();
  const double y1 = run_scalar(f, probe);
  const double y2 = run_scalar(f, probe);
  if (y1 != y2) {
    throw NumericError("grad_check: f is not deterministic");
  }

  Tensor xa = x.clone();
  xa.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = f(xa);
    if (loss.numel() != 1) {
      throw DimensionError("grad_check: f must return a scalar");
    }
    tape.backward(loss);
  }
  std::vector<double> analytic(static_cast<size_t>(x.numel()), 0.0);
  if (xa.has_grad()) analytic = xa.grad();

  Tensor xn = x.clone();
  double max_err = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double orig = xn[i];
    xn[i] = orig + h;
    const double fp = run_scalar(f, xn);
    xn[i] = orig - h;
    const double fm = run_scalar(f, xn);
    xn[i] = orig;
    const double cd = (fp - fm) / (2.0 * h);
    const double err = std::abs(analytic[static_cast<size_t>(i)] - cd) /
                       std::max(1e-8, std::abs(cd));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace simmt
