// Reverse-mode automatic differentiation on dense float64 tensors.
//
// A Tape records one closure per produced tensor; backward() replays the
// closures in reverse construction order, which is a valid topological
// order because an op can only consume tensors that already exist. Each
// node is therefore visited exactly once. Gradients accumulate until
// zeroed, so per-sample backward passes compose into mini-batch gradients.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "cadre/common.hpp"

namespace cadre::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized iff requires_grad
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    requires_grad = true;
  }
};

class Tape;

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : d_(std::make_shared<TensorData>()) {
    d_->shape = std::move(shape);
    d_->value.assign(shape_size(d_->shape), 0.0);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.d_->value.begin(), t.d_->value.end(), v);
    return t;
  }

  static Tensor scalar(double v) { return full({1}, v); }

  static Tensor from(Shape shape, std::vector<double> values) {
    Tensor t;
    t.d_ = std::make_shared<TensorData>();
    t.d_->shape = std::move(shape);
    if (shape_size(t.d_->shape) != values.size())
      throw DimensionError("Tensor::from: " + shape_str(t.d_->shape) +
                           " does not hold " + std::to_string(values.size()) +
                           " values");
    t.d_->value = std::move(values);
    return t;
  }

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  std::size_t size() const { return d_->value.size(); }
  std::size_t dim(std::size_t i) const { return d_->shape.at(i); }

  const std::vector<double>& value() const { return d_->value; }
  std::vector<double>& value() { return d_->value; }
  const std::vector<double>& grad() const { return d_->grad; }
  std::vector<double>& grad() { return d_->grad; }

  double item() const {
    if (size() != 1)
      throw DimensionError("item: tensor has " + std::to_string(size()) +
                           " elements");
    return d_->value[0];
  }

  double at(std::size_t i) const { return d_->value[i]; }
  double& at(std::size_t i) { return d_->value[i]; }

  bool requires_grad() const { return d_ && d_->requires_grad; }
  Tape* tape() const { return tape_; }

  std::shared_ptr<TensorData> data() const { return d_; }

  void zero_grad() {
    if (d_ && d_->requires_grad) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
  }

 private:
  std::shared_ptr<TensorData> d_;
  Tape* tape_ = nullptr;
  friend class Tape;
  friend Tensor make_traced(Tape* tape, Shape shape, bool requires_grad);
};

class Tape {
 public:
  // Creates a trainable tensor bound to this tape. Parameters live across
  // clear(); only op records are dropped.
  Tensor parameter(Shape shape) {
    Tensor t(std::move(shape));
    t.d_->ensure_grad();
    t.tape_ = this;
    return t;
  }

  Tensor parameter_from(Shape shape, std::vector<double> values) {
    Tensor t = Tensor::from(std::move(shape), std::move(values));
    t.d_->ensure_grad();
    t.tape_ = this;
    return t;
  }

  void record(std::function<void()> backward_fn) {
    if (recording_) ops_.push_back(std::move(backward_fn));
  }

  // Seeds d(loss)/d(loss) = 1 and replays recorded ops newest-first.
  void backward(Tensor& loss) {
    if (loss.size() != 1)
      throw DimensionError("backward: loss must be a scalar, got " +
                           shape_str(loss.shape()));
    if (!loss.requires_grad())
      throw InputError("backward: loss does not require grad");
    loss.grad()[0] += 1.0;
    last_visits_ = 0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      (*it)();
      ++last_visits_;
    }
  }

  void clear() { ops_.clear(); }

  std::size_t recorded_ops() const { return ops_.size(); }
  std::size_t last_backward_visits() const { return last_visits_; }

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

 private:
  std::vector<std::function<void()>> ops_;
  std::size_t last_visits_ = 0;
  bool recording_ = true;
};

// Pauses recording for the lifetime of the guard (inference inside a
// training loop).
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape* tape) : tape_(tape) {
    if (tape_) {
      was_ = tape_->recording();
      tape_->set_recording(false);
    }
  }
  ~NoGradGuard() {
    if (tape_) tape_->set_recording(was_);
  }

 private:
  Tape* tape_;
  bool was_ = true;
};

namespace detail {

inline Tape* result_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* t = nullptr;
  for (const Tensor* in : inputs) {
    if (in->defined() && in->tape()) {
      if (t && t != in->tape())
        throw InputError("op inputs belong to different tapes");
      t = in->tape();
    }
  }
  return t;
}

inline bool any_grad(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* in : inputs)
    if (in->defined() && in->requires_grad()) return true;
  return false;
}

}  // namespace detail

// Creates an op output. It participates in backward only when some input
// requires grad and the shared tape is recording.
inline Tensor make_traced(Tape* tape, Shape shape, bool requires_grad) {
  Tensor t(std::move(shape));
  if (requires_grad && tape && tape->recording()) {
    t.d_->ensure_grad();
    t.tape_ = tape;
  }
  return t;
}

#define CADRE_OP_PROLOGUE(...)                                   \
  Tape* tape = detail::result_tape({__VA_ARGS__});               \
  const bool rg = detail::any_grad({__VA_ARGS__}) && tape != nullptr && \
                  tape->recording();

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

inline void check_same_shape(const Tensor& a, const Tensor& b,
                             const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  CADRE_OP_PROLOGUE(&a, &b)
  Tensor out = make_traced(tape, a.shape(), rg);
  for (std::size_t i = 0; i < a.size(); ++i)
    out.value()[i] = a.value()[i] + b.value()[i];
  if (rg) {
    auto ad = a.data(), bd = b.data(), od = out.data();
    tape->record([ad, bd, od] {
      for (std::size_t i = 0; i < od->value.size(); ++i) {
        const double g = od->grad[i];
        if (ad->requires_grad) ad->grad[i] += g;
        if (bd->requires_grad) bd->grad[i] += g;
      }
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  CADRE_OP_PROLOGUE(&a, &b)
  Tensor out = make_traced(tape, a.shape(), rg);
  for (std::size_t i = 0; i < a.size(); ++i)
    out.value()[i] = a.value()[i] - b.value()[i];
  if (rg) {
    auto ad = a.data(), bd = b.data(), od = out.data();
    tape->record([ad, bd, od] {
      for (std::size_t i = 0; i < od->value.size(); ++i) {
        const double g = od->grad[i];
        if (ad->requires_grad) ad->grad[i] += g;
        if (bd->requires_grad) bd->grad[i] -= g;
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  CADRE_OP_PROLOGUE(&a, &b)
  Tensor out = make_traced(tape, a.shape(), rg);
  for (std::size_t i = 0; i < a.size(); ++i)
    out.value()[i] = a.value()[i] * b.value()[i];
  if (rg) {
    auto ad = a.data(), bd = b.data(), od = out.data();
    tape->record([ad, bd, od] {
      for (std::size_t i = 0; i < od->value.size(); ++i) {
        const double g = od->grad[i];
        if (ad->requires_grad) ad->grad[i] += g * bd->value[i];
        if (bd->requires_grad) bd->grad[i] += g * ad->value[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  CADRE_OP_PROLOGUE(&a)
  Tensor out = make_traced(tape, a.shape(), rg);
  for (std::size_t i = 0; i < a.size(); ++i) out.value()[i] = a.value()[i] * c;
  if (rg) {
    auto ad = a.data(), od = out.data();
    tape->record([ad, od, c] {
      for (std::size_t i = 0; i < od->value.size(); ++i)
        ad->grad[i] += od->grad[i] * c;
    });
  }
  return out;
}

inline Tensor add_const(const Tensor& a, double c) {
  CADRE_OP_PROLOGUE(&a)
  Tensor out = make_traced(tape, a.shape(), rg);
  for (std::size_t i = 0; i < a.size(); ++i) out.value()[i] = a.value()[i] + c;
  if (rg) {
    auto ad = a.data(), od = out.data();
    tape->record([ad, od] {
      for (std::size_t i = 0; i < od->value.size(); ++i)
        ad->grad[i] += od->grad[i];
    });
  }
  return out;
}

inline Tensor relu(const Tensor& a) {
  CADRE_OP_PROLOGUE(&a)
  Tensor out = make_traced(tape, a.shape(), rg);
  for (std::size_t i = 0; i < a.size(); ++i)
    out.value()[i] = a.value()[i] > 0.0 ? a.value()[i] : 0.0;
  if (rg) {
    auto ad = a.data(), od = out.data();
    tape->record([ad, od] {
      for (std::size_t i = 0; i < od->value.size(); ++i)
        if (ad->value[i] > 0.0) ad->grad[i] += od->grad[i];
    });
  }
  return out;
}

inline Tensor tanh_op(const Tensor& a) {
  CADRE_OP_PROLOGUE(&a)
  Tensor out = make_traced(tape, a.shape(), rg);
  for (std::size_t i = 0; i < a.size(); ++i)
    out.value()[i] = std::tanh(a.value()[i]);
  if (rg) {
    auto ad = a.data(), od = out.data();
    tape->record([ad, od] {
      for (std::size_t i = 0; i < od->value.size(); ++i) {
        const double y = od->value[i];
        ad->grad[i] += od->grad[i] * (1.0 - y * y);
      }
    });
  }
  return out;
}

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
  CADRE_OP_PROLOGUE(&a)
  Tensor out = make_traced(tape, a.shape(), rg);
  for (std::size_t i = 0; i < a.size(); ++i)
    out.value()[i] = sigmoid_scalar(a.value()[i]);
  if (rg) {
    auto ad = a.data(), od = out.data();
    tape->record([ad, od] {
      for (std::size_t i = 0; i < od->value.size(); ++i) {
        const double y = od->value[i];
        ad->grad[i] += od->grad[i] * y * (1.0 - y);
      }
    });
  }
  return out;
}

inline Tensor exp_op(const Tensor& a) {
  CADRE_OP_PROLOGUE(&a)
  Tensor out = make_traced(tape, a.shape(), rg);
  for (std::size_t i = 0; i < a.size(); ++i)
    out.value()[i] = std::exp(a.value()[i]);
  if (rg) {
    auto ad = a.data(), od = out.data();
    tape->record([ad, od] {
      for (std::size_t i = 0; i < od->value.size(); ++i)
        ad->grad[i] += od->grad[i] * od->value[i];
    });
  }
  return out;
}

// Gradient flows only where lo < x < hi; clipped regions contribute zero.
inline Tensor clamp_op(const Tensor& a, double lo, double hi) {
  CADRE_OP_PROLOGUE(&a)
  Tensor out = make_traced(tape, a.shape(), rg);
  for (std::size_t i = 0; i < a.size(); ++i)
    out.value()[i] = clamp(a.value()[i], lo, hi);
  if (rg) {
    auto ad = a.data(), od = out.data();
    tape->record([ad, od, lo, hi] {
      for (std::size_t i = 0; i < od->value.size(); ++i)
        if (ad->value[i] > lo && ad->value[i] < hi)
          ad->grad[i] += od->grad[i];
    });
  }
  return out;
}

// Elementwise minimum; ties route the gradient to a.
inline Tensor min_op(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "min");
  CADRE_OP_PROLOGUE(&a, &b)
  Tensor out = make_traced(tape, a.shape(), rg);
  for (std::size_t i = 0; i < a.size(); ++i)
    out.value()[i] = std::min(a.value()[i], b.value()[i]);
  if (rg) {
    auto ad = a.data(), bd = b.data(), od = out.data();
    tape->record([ad, bd, od] {
      for (std::size_t i = 0; i < od->value.size(); ++i) {
        const double g = od->grad[i];
        if (ad->value[i] <= bd->value[i]) {
          if (ad->requires_grad) ad->grad[i] += g;
        } else if (bd->requires_grad) {
          bd->grad[i] += g;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) +
                         " as " + shape_str(shape));
  CADRE_OP_PROLOGUE(&a)
  Tensor out = make_traced(tape, std::move(shape), rg);
  out.value() = a.value();
  if (rg) {
    auto ad = a.data(), od = out.data();
    tape->record([ad, od] {
      for (std::size_t i = 0; i < od->value.size(); ++i)
        ad->grad[i] += od->grad[i];
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.shape().size() != 2)
    throw DimensionError("transpose: expected a matrix, got " +
                         shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  CADRE_OP_PROLOGUE(&a)
  Tensor out = make_traced(tape, {n, m}, rg);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.value()[j * m + i] = a.value()[i * n + j];
  if (rg) {
    auto ad = a.data(), od = out.data();
    tape->record([ad, od, m, n] {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          ad->grad[i * n + j] += od->grad[j * m + i];
    });
  }
  return out;
}

inline Tensor concat(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 1 || b.shape().size() != 1)
    throw DimensionError("concat: expected vectors");
  CADRE_OP_PROLOGUE(&a, &b)
  Tensor out = make_traced(tape, {a.size() + b.size()}, rg);
  std::copy(a.value().begin(), a.value().end(), out.value().begin());
  std::copy(b.value().begin(), b.value().end(),
            out.value().begin() + static_cast<std::ptrdiff_t>(a.size()));
  if (rg) {
    auto ad = a.data(), bd = b.data(), od = out.data();
    const std::size_t na = a.size();
    tape->record([ad, bd, od, na] {
      if (ad->requires_grad)
        for (std::size_t i = 0; i < na; ++i) ad->grad[i] += od->grad[i];
      if (bd->requires_grad)
        for (std::size_t i = 0; i < bd->value.size(); ++i)
          bd->grad[i] += od->grad[na + i];
    });
  }
  return out;
}

inline Tensor slice(const Tensor& a, std::size_t begin, std::size_t len) {
  if (a.shape().size() != 1)
    throw DimensionError("slice: expected a vector");
  if (begin + len > a.size())
    throw DimensionError("slice: range [" + std::to_string(begin) + "," +
                         std::to_string(begin + len) + ") exceeds size " +
                         std::to_string(a.size()));
  CADRE_OP_PROLOGUE(&a)
  Tensor out = make_traced(tape, {len}, rg);
  std::copy(a.value().begin() + static_cast<std::ptrdiff_t>(begin),
            a.value().begin() + static_cast<std::ptrdiff_t>(begin + len),
            out.value().begin());
  if (rg) {
    auto ad = a.data(), od = out.data();
    tape->record([ad, od, begin, len] {
      for (std::size_t i = 0; i < len; ++i) ad->grad[begin + i] += od->grad[i];
    });
  }
  return out;
}

inline Tensor pick(const Tensor& a, std::size_t index) {
  if (index >= a.size())
    throw DimensionError("pick: index " + std::to_string(index) +
                         " out of range " + std::to_string(a.size()));
  CADRE_OP_PROLOGUE(&a)
  Tensor out = make_traced(tape, {1}, rg);
  out.value()[0] = a.value()[index];
  if (rg) {
    auto ad = a.data(), od = out.data();
    tape->record([ad, od, index] { ad->grad[index] += od->grad[0]; });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2)
    throw DimensionError("matmul: expected matrices, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw DimensionError("matmul: inner dims differ, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  CADRE_OP_PROLOGUE(&a, &b)
  Tensor out = make_traced(tape, {m, n}, rg);
  const double* av = a.value().data();
  const double* bv = b.value().data();
  double* ov = out.value().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) ov[i * n + j] += aip * bv[p * n + j];
    }
  if (rg) {
    auto ad = a.data(), bd = b.data(), od = out.data();
    tape->record([ad, bd, od, m, k, n] {
      const double* g = od->grad.data();
      if (ad->requires_grad) {
        double* ga = ad->grad.data();
        const double* bv2 = bd->value.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double gij = g[i * n + j];
            if (gij == 0.0) continue;
            for (std::size_t p = 0; p < k; ++p)
              ga[i * k + p] += gij * bv2[p * n + j];
          }
      }
      if (bd->requires_grad) {
        double* gb = bd->grad.data();
        const double* av2 = ad->value.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = av2[i * k + p];
            if (aip == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j)
              gb[p * n + j] += aip * g[i * n + j];
          }
      }
    });
  }
  return out;
}

// y = W x + b for a vector x; the workhorse of every dense layer.
inline Tensor linear(const Tensor& w, const Tensor& x, const Tensor& b) {
  if (w.shape().size() != 2 || x.shape().size() != 1 || b.shape().size() != 1)
    throw DimensionError("linear: expected W[m,n], x[n], b[m]");
  const std::size_t m = w.dim(0), n = w.dim(1);
  if (x.size() != n || b.size() != m)
    throw DimensionError("linear: W" + shape_str(w.shape()) + " x[" +
                         std::to_string(x.size()) + "] b[" +
                         std::to_string(b.size()) + "]");
  CADRE_OP_PROLOGUE(&w, &x, &b)
  Tensor out = make_traced(tape, {m}, rg);
  const double* wv = w.value().data();
  const double* xv = x.value().data();
  for (std::size_t i = 0; i < m; ++i) {
    double acc = b.value()[i];
    const double* row = wv + i * n;
    for (std::size_t j = 0; j < n; ++j) acc += row[j] * xv[j];
    out.value()[i] = acc;
  }
  if (rg) {
    auto wd = w.data(), xd = x.data(), bd = b.data(), od = out.data();
    tape->record([wd, xd, bd, od, m, n] {
      const double* g = od->grad.data();
      for (std::size_t i = 0; i < m; ++i) {
        const double gi = g[i];
        if (gi == 0.0) continue;
        if (bd->requires_grad) bd->grad[i] += gi;
        if (wd->requires_grad) {
          double* wrow = wd->grad.data() + i * n;
          const double* xv2 = xd->value.data();
          for (std::size_t j = 0; j < n; ++j) wrow[j] += gi * xv2[j];
        }
        if (xd->requires_grad) {
          double* gx = xd->grad.data();
          const double* wrow = wd->value.data() + i * n;
          for (std::size_t j = 0; j < n; ++j) gx[j] += gi * wrow[j];
        }
      }
    });
  }
  return out;
}

// Adds b[i] to every column of x[m,n].
inline Tensor add_bias_rows(const Tensor& x, const Tensor& b) {
  if (x.shape().size() != 2 || b.shape().size() != 1 || b.size() != x.dim(0))
    throw DimensionError("add_bias_rows: x[m,n], b[m] expected");
  const std::size_t m = x.dim(0), n = x.dim(1);
  CADRE_OP_PROLOGUE(&x, &b)
  Tensor out = make_traced(tape, x.shape(), rg);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out.value()[i * n + j] = x.value()[i * n + j] + b.value()[i];
  if (rg) {
    auto xd = x.data(), bd = b.data(), od = out.data();
    tape->record([xd, bd, od, m, n] {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double g = od->grad[i * n + j];
          if (xd->requires_grad) xd->grad[i * n + j] += g;
          if (bd->requires_grad) bd->grad[i] += g;
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

namespace detail {

inline void softmax_inplace(const double* x, double* y, std::size_t n) {
  double mx = x[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - mx);
    sum += y[i];
  }
  for (std::size_t i = 0; i < n; ++i) y[i] /= sum;
}

inline double logsumexp(const double* x, std::size_t n) {
  double mx = x[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += std::exp(x[i] - mx);
  return mx + std::log(sum);
}

}  // namespace detail

inline Tensor softmax(const Tensor& a) {
  if (a.shape().size() != 1)
    throw DimensionError("softmax: expected a vector");
  CADRE_OP_PROLOGUE(&a)
  Tensor out = make_traced(tape, a.shape(), rg);
  detail::softmax_inplace(a.value().data(), out.value().data(), a.size());
  if (rg) {
    auto ad = a.data(), od = out.data();
    tape->record([ad, od] {
      const std::size_t n = od->value.size();
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += od->grad[i] * od->value[i];
      for (std::size_t i = 0; i < n; ++i)
        ad->grad[i] += od->value[i] * (od->grad[i] - dot);
    });
  }
  return out;
}

// Row-wise softmax of a matrix; used by the attention blocks.
inline Tensor softmax_rows(const Tensor& a) {
  if (a.shape().size() != 2)
    throw DimensionError("softmax_rows: expected a matrix");
  const std::size_t m = a.dim(0), n = a.dim(1);
  CADRE_OP_PROLOGUE(&a)
  Tensor out = make_traced(tape, a.shape(), rg);
  for (std::size_t i = 0; i < m; ++i)
    detail::softmax_inplace(a.value().data() + i * n,
                            out.value().data() + i * n, n);
  if (rg) {
    auto ad = a.data(), od = out.data();
    tape->record([ad, od, m, n] {
      for (std::size_t i = 0; i < m; ++i) {
        const double* y = od->value.data() + i * n;
        const double* gy = od->grad.data() + i * n;
        double* gx = ad->grad.data() + i * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) gx[j] += y[j] * (gy[j] - dot);
      }
    });
  }
  return out;
}

inline Tensor log_softmax(const Tensor& a) {
  if (a.shape().size() != 1)
    throw DimensionError("log_softmax: expected a vector");
  CADRE_OP_PROLOGUE(&a)
  Tensor out = make_traced(tape, a.shape(), rg);
  const double lse = detail::logsumexp(a.value().data(), a.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    out.value()[i] = a.value()[i] - lse;
  if (rg) {
    auto ad = a.data(), od = out.data();
    tape->record([ad, od] {
      const std::size_t n = od->value.size();
      double gsum = 0.0;
      for (std::size_t i = 0; i < n; ++i) gsum += od->grad[i];
      for (std::size_t i = 0; i < n; ++i)
        ad->grad[i] += od->grad[i] - std::exp(od->value[i]) * gsum;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
  CADRE_OP_PROLOGUE(&a)
  Tensor out = make_traced(tape, {1}, rg);
  out.value()[0] = std::accumulate(a.value().begin(), a.value().end(), 0.0);
  if (rg) {
    auto ad = a.data(), od = out.data();
    tape->record([ad, od] {
      const double g = od->grad[0];
      for (std::size_t i = 0; i < ad->value.size(); ++i) ad->grad[i] += g;
    });
  }
  return out;
}

inline Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

// Mean squared error against a constant target.
inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  check_same_shape(pred, target, "mse_loss");
  CADRE_OP_PROLOGUE(&pred, &target)
  Tensor out = make_traced(tape, {1}, rg);
  const std::size_t n = pred.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pred.value()[i] - target.value()[i];
    acc += d * d;
  }
  out.value()[0] = acc / static_cast<double>(n);
  if (rg) {
    auto pd = pred.data(), td = target.data(), od = out.data();
    tape->record([pd, td, od, n] {
      const double g = od->grad[0] * 2.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double d = pd->value[i] - td->value[i];
        if (pd->requires_grad) pd->grad[i] += g * d;
        if (td->requires_grad) td->grad[i] -= g * d;
      }
    });
  }
  return out;
}

// -log softmax(logits)[label]; fused for stability.
inline Tensor cross_entropy_logits(const Tensor& logits, std::size_t label) {
  if (logits.shape().size() != 1)
    throw DimensionError("cross_entropy_logits: expected a vector");
  if (label >= logits.size())
    throw InputError("cross_entropy_logits: label " + std::to_string(label) +
                     " out of range " + std::to_string(logits.size()));
  CADRE_OP_PROLOGUE(&logits)
  Tensor out = make_traced(tape, {1}, rg);
  const double lse = detail::logsumexp(logits.value().data(), logits.size());
  out.value()[0] = lse - logits.value()[label];
  if (rg) {
    auto ld = logits.data(), od = out.data();
    tape->record([ld, od, label, lse] {
      const double g = od->grad[0];
      for (std::size_t i = 0; i < ld->value.size(); ++i) {
        double p = std::exp(ld->value[i] - lse);
        ld->grad[i] += g * (p - (i == label ? 1.0 : 0.0));
      }
    });
  }
  return out;
}

// Pixel-wise cross entropy over logits [C,H,W] with integer class targets,
// averaged over all H*W pixels.
inline Tensor cross_entropy_map(const Tensor& logits,
                                const std::vector<std::uint8_t>& target) {
  if (logits.shape().size() != 3)
    throw DimensionError("cross_entropy_map: expected logits [C,H,W]");
  const std::size_t c = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  const std::size_t npix = h * w;
  if (target.size() != npix)
    throw DimensionError("cross_entropy_map: target has " +
                         std::to_string(target.size()) + " pixels, expected " +
                         std::to_string(npix));
  for (std::size_t p = 0; p < npix; ++p)
    if (target[p] >= c)
      throw InputError("cross_entropy_map: class id " +
                       std::to_string(int(target[p])) + " out of range");
  CADRE_OP_PROLOGUE(&logits)
  Tensor out = make_traced(tape, {1}, rg);
  const double* lv = logits.value().data();
  std::vector<double> col(c);
  double acc = 0.0;
  for (std::size_t p = 0; p < npix; ++p) {
    for (std::size_t k = 0; k < c; ++k) col[k] = lv[k * npix + p];
    acc += detail::logsumexp(col.data(), c) - col[target[p]];
  }
  out.value()[0] = acc / static_cast<double>(npix);
  if (rg) {
    auto ld = logits.data(), od = out.data();
    auto tgt = target;
    tape->record([ld, od, tgt, c, npix] {
      const double g = od->grad[0] / static_cast<double>(npix);
      std::vector<double> col(c), sm(c);
      for (std::size_t p = 0; p < npix; ++p) {
        for (std::size_t k = 0; k < c; ++k) col[k] = ld->value[k * npix + p];
        detail::softmax_inplace(col.data(), sm.data(), c);
        for (std::size_t k = 0; k < c; ++k)
          ld->grad[k * npix + p] +=
              g * (sm[k] - (k == tgt[p] ? 1.0 : 0.0));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

// 2-D cross-correlation: x [C,H,W], w [F,C,kh,kw], b [F], zero padding.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
                     std::size_t stride, std::size_t pad) {
  if (x.shape().size() != 3 || w.shape().size() != 4 || b.shape().size() != 1)
    throw DimensionError("conv2d: x[C,H,W], w[F,C,kh,kw], b[F] expected");
  const std::size_t c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t f = w.dim(0), kc = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (kc != c)
    throw DimensionError("conv2d: input channels " + std::to_string(c) +
                         " vs kernel channels " + std::to_string(kc));
  if (b.size() != f) throw DimensionError("conv2d: bias size mismatch");
  if (h + 2 * pad < kh || wd + 2 * pad < kw)
    throw DimensionError("conv2d: kernel larger than padded input");
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (wd + 2 * pad - kw) / stride + 1;
  CADRE_OP_PROLOGUE(&x, &w, &b)
  Tensor out = make_traced(tape, {f, oh, ow}, rg);
  const double* xv = x.value().data();
  const double* wv = w.value().data();
  double* ov = out.value().data();
  for (std::size_t fo = 0; fo < f; ++fo) {
    const double bias = b.value()[fo];
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = bias;
        for (std::size_t ci = 0; ci < c; ++ci)
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * stride + ky) -
                static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            const double* xrow = xv + (ci * h + iy) * wd;
            const double* wrow = wv + ((fo * c + ci) * kh + ky) * kw;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * stride + kx) -
                  static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
              acc += xrow[ix] * wrow[kx];
            }
          }
        ov[(fo * oh + oy) * ow + ox] = acc;
      }
  }
  if (rg) {
    auto xd = x.data(), wwd = w.data(), bd = b.data(), od = out.data();
    tape->record([xd, wwd, bd, od, c, h, wd, f, kh, kw, oh, ow, stride, pad] {
      const double* g = od->grad.data();
      for (std::size_t fo = 0; fo < f; ++fo)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const double go = g[(fo * oh + oy) * ow + ox];
            if (go == 0.0) continue;
            if (bd->requires_grad) bd->grad[fo] += go;
            for (std::size_t ci = 0; ci < c; ++ci)
              for (std::size_t ky = 0; ky < kh; ++ky) {
                const std::ptrdiff_t iy =
                    static_cast<std::ptrdiff_t>(oy * stride + ky) -
                    static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const std::ptrdiff_t ix =
                      static_cast<std::ptrdiff_t>(ox * stride + kx) -
                      static_cast<std::ptrdiff_t>(pad);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                  const std::size_t xi = (ci * h + iy) * wd + ix;
                  const std::size_t wi = ((fo * c + ci) * kh + ky) * kw + kx;
                  if (wwd->requires_grad)
                    wwd->grad[wi] += go * xd->value[xi];
                  if (xd->requires_grad) xd->grad[xi] += go * wwd->value[wi];
                }
              }
          }
    });
  }
  return out;
}

// Transposed convolution (stride-s upsampling): x [C,H,W], w [C,F,kh,kw].
// Output is [F, (H-1)*s + kh, (W-1)*s + kw].
inline Tensor conv_transpose2d(const Tensor& x, const Tensor& w,
                               const Tensor& b, std::size_t stride) {
  if (x.shape().size() != 3 || w.shape().size() != 4 || b.shape().size() != 1)
    throw DimensionError("conv_transpose2d: x[C,H,W], w[C,F,kh,kw], b[F]");
  const std::size_t c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t wc = w.dim(0), f = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (wc != c)
    throw DimensionError("conv_transpose2d: channel mismatch");
  if (b.size() != f) throw DimensionError("conv_transpose2d: bias mismatch");
  const std::size_t oh = (h - 1) * stride + kh;
  const std::size_t ow = (wd - 1) * stride + kw;
  CADRE_OP_PROLOGUE(&x, &w, &b)
  Tensor out = make_traced(tape, {f, oh, ow}, rg);
  double* ov = out.value().data();
  for (std::size_t fo = 0; fo < f; ++fo)
    for (std::size_t i = 0; i < oh * ow; ++i)
      ov[fo * oh * ow + i] = b.value()[fo];
  const double* xv = x.value().data();
  const double* wv = w.value().data();
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t iy = 0; iy < h; ++iy)
      for (std::size_t ix = 0; ix < wd; ++ix) {
        const double xi = xv[(ci * h + iy) * wd + ix];
        if (xi == 0.0) continue;
        for (std::size_t fo = 0; fo < f; ++fo) {
          const double* wblk = wv + ((ci * f + fo) * kh) * kw;
          double* oblk = ov + fo * oh * ow;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            double* orow = oblk + (iy * stride + ky) * ow + ix * stride;
            const double* wrow = wblk + ky * kw;
            for (std::size_t kx = 0; kx < kw; ++kx)
              orow[kx] += xi * wrow[kx];
          }
        }
      }
  if (rg) {
    auto xd = x.data(), wwd = w.data(), bd = b.data(), od = out.data();
    tape->record([xd, wwd, bd, od, c, h, wd, f, kh, kw, oh, ow, stride] {
      const double* g = od->grad.data();
      if (bd->requires_grad)
        for (std::size_t fo = 0; fo < f; ++fo) {
          double acc = 0.0;
          for (std::size_t i = 0; i < oh * ow; ++i)
            acc += g[fo * oh * ow + i];
          bd->grad[fo] += acc;
        }
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t iy = 0; iy < h; ++iy)
          for (std::size_t ix = 0; ix < wd; ++ix) {
            const std::size_t xidx = (ci * h + iy) * wd + ix;
            double gx = 0.0;
            for (std::size_t fo = 0; fo < f; ++fo)
              for (std::size_t ky = 0; ky < kh; ++ky)
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const std::size_t oidx =
                      (fo * oh + iy * stride + ky) * ow + ix * stride + kx;
                  const double go = g[oidx];
                  if (go == 0.0) continue;
                  const std::size_t widx = ((ci * f + fo) * kh + ky) * kw + kx;
                  gx += go * wwd->value[widx];
                  if (wwd->requires_grad)
                    wwd->grad[widx] += go * xd->value[xidx];
                }
            if (xd->requires_grad) xd->grad[xidx] += gx;
          }
    });
  }
  return out;
}

// Global average pool: [C,H,W] -> [C].
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.shape().size() != 3)
    throw DimensionError("global_avg_pool: expected [C,H,W]");
  const std::size_t c = x.dim(0), n = x.dim(1) * x.dim(2);
  CADRE_OP_PROLOGUE(&x)
  Tensor out = make_traced(tape, {c}, rg);
  for (std::size_t ci = 0; ci < c; ++ci) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x.value()[ci * n + i];
    out.value()[ci] = acc / static_cast<double>(n);
  }
  if (rg) {
    auto xd = x.data(), od = out.data();
    tape->record([xd, od, c, n] {
      for (std::size_t ci = 0; ci < c; ++ci) {
        const double g = od->grad[ci] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) xd->grad[ci * n + i] += g;
      }
    });
  }
  return out;
}

#undef CADRE_OP_PROLOGUE

}  // namespace cadre::nn
