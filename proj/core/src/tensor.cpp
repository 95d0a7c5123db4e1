#include "gendf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace gendf {

std::string shape_str(const Shape& s) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out << 'x';
    out << s[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

namespace {

void check_positive_extents(const Shape& shape) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
}

void check_finite(std::span<const double> values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + " produced a non-finite value");
    }
  }
}

Tensor make_tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  Tensor t;
  t.node()->shape = std::move(shape);
  t.node()->values = std::move(values);
  t.node()->requires_grad = requires_grad;
  return t;
}

// Zero-initialized gradient buffer, allocated on first touch.
double* grad_buf(const std::shared_ptr<TensorData>& t) {
  if (t->grad.empty()) t->grad.assign(t->values.size(), 0.0);
  return t->grad.data();
}

const double* out_grad(const std::shared_ptr<TensorData>& t, const char* op) {
  check_finite(t->grad, op);
  return t->grad.data();
}

// c[m x n] = (or +=) a[m x k] . b[k x n]
void mm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = arow[l];
      const double* brow = b + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<double> transpose2d(const double* a, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Splits a shape into (outer, len, inner) around `axis`.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gauss_cdf(double x) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)); }
double gauss_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_positive_extents(shape);
  std::size_t n = shape_numel(shape);
  return make_tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  check_positive_extents(shape);
  std::size_t n = shape_numel(shape);
  return make_tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
  check_positive_extents(shape);
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("from_values: shape " + shape_str(shape) + " expects " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  check_finite(values, "from_values");
  return make_tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double mean, double stddev, bool requires_grad) {
  check_positive_extents(shape);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal(mean, stddev);
  return make_tensor(std::move(shape), std::move(v), requires_grad);
}

std::span<const double> Tensor::grad() const {
  if (data_->grad.empty()) throw Error("tensor has no gradient; run backward first");
  return data_->grad;
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() expects a scalar, got shape " + shape_str(shape()));
  return data_->values[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) {
    throw ShapeError("at(): index rank " + std::to_string(index.size()) + " vs tensor rank " +
                     std::to_string(rank()));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= data_->shape[axis]) throw ShapeError("at(): index out of bounds");
    off = off * data_->shape[axis] + i;
    ++axis;
  }
  return data_->values[off];
}

void Tape::record(std::function<void()> backward_fn, const TensorData* output) {
  records_.push_back(std::move(backward_fn));
  outputs_.insert(output);
}

void backward(const Tensor& loss, Tape& tape) {
  if (tape.done_) {
    throw Error("backward already ran on this tape; build a fresh tape and clear grads first");
  }
  if (loss.size() != 1) {
    throw ShapeError("backward expects a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!tape.produced(loss.node().get())) {
    throw Error("loss tensor was not produced on this tape");
  }
  tape.done_ = true;
  loss.node()->grad.assign(1, 1.0);
  for (auto it = tape.records_.rbegin(); it != tape.records_.rend(); ++it) (*it)();
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b, Tape& tape) {
  require_same_shape(a, b, "add");
  std::vector<double> v(a.size());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] + bv[i];
  check_finite(v, "add");
  Tensor out = make_tensor(a.shape(), std::move(v), a.requires_grad() || b.requires_grad());
  if (out.requires_grad()) {
    auto ad = a.node(), bd = b.node(), od = out.node();
    tape.record(
        [ad, bd, od] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "add");
          const std::size_t n = od->values.size();
          if (ad->requires_grad) {
            double* ga = grad_buf(ad);
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
          }
          if (bd->requires_grad) {
            double* gb = grad_buf(bd);
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
          }
        },
        out.node().get());
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b, Tape& tape) {
  require_same_shape(a, b, "sub");
  std::vector<double> v(a.size());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] - bv[i];
  check_finite(v, "sub");
  Tensor out = make_tensor(a.shape(), std::move(v), a.requires_grad() || b.requires_grad());
  if (out.requires_grad()) {
    auto ad = a.node(), bd = b.node(), od = out.node();
    tape.record(
        [ad, bd, od] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "sub");
          const std::size_t n = od->values.size();
          if (ad->requires_grad) {
            double* ga = grad_buf(ad);
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
          }
          if (bd->requires_grad) {
            double* gb = grad_buf(bd);
            for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
          }
        },
        out.node().get());
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape& tape) {
  require_same_shape(a, b, "mul");
  std::vector<double> v(a.size());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] * bv[i];
  check_finite(v, "mul");
  Tensor out = make_tensor(a.shape(), std::move(v), a.requires_grad() || b.requires_grad());
  if (out.requires_grad()) {
    auto ad = a.node(), bd = b.node(), od = out.node();
    tape.record(
        [ad, bd, od] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "mul");
          const std::size_t n = od->values.size();
          if (ad->requires_grad) {
            double* ga = grad_buf(ad);
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bd->values[i];
          }
          if (bd->requires_grad) {
            double* gb = grad_buf(bd);
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * ad->values[i];
          }
        },
        out.node().get());
  }
  return out;
}

Tensor scale(const Tensor& x, double c, Tape& tape) {
  std::vector<double> v(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = xv[i] * c;
  check_finite(v, "scale");
  Tensor out = make_tensor(x.shape(), std::move(v), x.requires_grad());
  if (out.requires_grad()) {
    auto xd = x.node(), od = out.node();
    tape.record(
        [xd, od, c] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "scale");
          double* gx = grad_buf(xd);
          for (std::size_t i = 0; i < od->values.size(); ++i) gx[i] += g[i] * c;
        },
        out.node().get());
  }
  return out;
}

Tensor gelu(const Tensor& x, Tape& tape) {
  std::vector<double> v(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = xv[i] * gauss_cdf(xv[i]);
  check_finite(v, "gelu");
  Tensor out = make_tensor(x.shape(), std::move(v), x.requires_grad());
  if (out.requires_grad()) {
    auto xd = x.node(), od = out.node();
    tape.record(
        [xd, od] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "gelu");
          double* gx = grad_buf(xd);
          for (std::size_t i = 0; i < od->values.size(); ++i) {
            const double xi = xd->values[i];
            gx[i] += g[i] * (gauss_cdf(xi) + xi * gauss_pdf(xi));
          }
        },
        out.node().get());
  }
  return out;
}

Tensor softplus(const Tensor& x, Tape& tape) {
  std::vector<double> v(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double xi = xv[i];
    v[i] = std::max(xi, 0.0) + std::log1p(std::exp(-std::abs(xi)));
  }
  check_finite(v, "softplus");
  Tensor out = make_tensor(x.shape(), std::move(v), x.requires_grad());
  if (out.requires_grad()) {
    auto xd = x.node(), od = out.node();
    tape.record(
        [xd, od] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "softplus");
          double* gx = grad_buf(xd);
          for (std::size_t i = 0; i < od->values.size(); ++i) {
            const double xi = xd->values[i];
            const double s = xi >= 0.0 ? 1.0 / (1.0 + std::exp(-xi))
                                       : std::exp(xi) / (1.0 + std::exp(xi));
            gx[i] += g[i] * s;
          }
        },
        out.node().get());
  }
  return out;
}

Tensor log_elem(const Tensor& x, Tape& tape) {
  std::vector<double> v(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::log(xv[i]);
  check_finite(v, "log");
  Tensor out = make_tensor(x.shape(), std::move(v), x.requires_grad());
  if (out.requires_grad()) {
    auto xd = x.node(), od = out.node();
    tape.record(
        [xd, od] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "log");
          double* gx = grad_buf(xd);
          for (std::size_t i = 0; i < od->values.size(); ++i) gx[i] += g[i] / xd->values[i];
        },
        out.node().get());
  }
  return out;
}

Tensor sqrt_elem(const Tensor& x, Tape& tape) {
  std::vector<double> v(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sqrt(xv[i]);
  check_finite(v, "sqrt");
  Tensor out = make_tensor(x.shape(), std::move(v), x.requires_grad());
  if (out.requires_grad()) {
    auto xd = x.node(), od = out.node();
    tape.record(
        [xd, od] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "sqrt");
          double* gx = grad_buf(xd);
          for (std::size_t i = 0; i < od->values.size(); ++i) {
            gx[i] += g[i] * 0.5 / od->values[i];
          }
        },
        out.node().get());
  }
  return out;
}

Tensor clamp(const Tensor& x, double lo, double hi, Tape& tape) {
  if (!(lo <= hi)) throw ConfigError("clamp: lo must not exceed hi");
  std::vector<double> v(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::min(std::max(xv[i], lo), hi);
  check_finite(v, "clamp");
  Tensor out = make_tensor(x.shape(), std::move(v), x.requires_grad());
  if (out.requires_grad()) {
    auto xd = x.node(), od = out.node();
    tape.record(
        [xd, od, lo, hi] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "clamp");
          double* gx = grad_buf(xd);
          for (std::size_t i = 0; i < od->values.size(); ++i) {
            const double xi = xd->values[i];
            if (xi >= lo && xi <= hi) gx[i] += g[i];
          }
        },
        out.node().get());
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, Tape& tape) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> v(m * n);
  mm_nn(a.values().data(), b.values().data(), v.data(), m, k, n, false);
  check_finite(v, "matmul");
  Tensor out = make_tensor({m, n}, std::move(v), a.requires_grad() || b.requires_grad());
  if (out.requires_grad()) {
    auto ad = a.node(), bd = b.node(), od = out.node();
    tape.record(
        [ad, bd, od, m, k, n] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "matmul");
          if (ad->requires_grad) {  // d(a) = g . b^T
            auto bt = transpose2d(bd->values.data(), k, n);
            mm_nn(g, bt.data(), grad_buf(ad), m, n, k, true);
          }
          if (bd->requires_grad) {  // d(b) = a^T . g
            auto at = transpose2d(ad->values.data(), m, k);
            mm_nn(at.data(), g, grad_buf(bd), k, m, n, true);
          }
        },
        out.node().get());
  }
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b, Tape& tape) {
  if (a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] ||
      a.shape()[2] != b.shape()[1]) {
    throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t batch = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
  std::vector<double> v(batch * m * n);
  for (std::size_t s = 0; s < batch; ++s) {
    mm_nn(a.values().data() + s * m * k, b.values().data() + s * k * n, v.data() + s * m * n, m,
          k, n, false);
  }
  check_finite(v, "bmm");
  Tensor out = make_tensor({batch, m, n}, std::move(v), a.requires_grad() || b.requires_grad());
  if (out.requires_grad()) {
    auto ad = a.node(), bd = b.node(), od = out.node();
    tape.record(
        [ad, bd, od, batch, m, k, n] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "bmm");
          for (std::size_t s = 0; s < batch; ++s) {
            const double* gs = g + s * m * n;
            if (ad->requires_grad) {
              auto bt = transpose2d(bd->values.data() + s * k * n, k, n);
              mm_nn(gs, bt.data(), grad_buf(ad) + s * m * k, m, n, k, true);
            }
            if (bd->requires_grad) {
              auto at = transpose2d(ad->values.data() + s * m * k, m, k);
              mm_nn(at.data(), gs, grad_buf(bd) + s * k * n, k, m, n, true);
            }
          }
        },
        out.node().get());
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, Tape& tape) {
  if (x.rank() < 1 || w.rank() != 2 || x.shape().back() != w.shape()[1]) {
    throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + " and weight " +
                     shape_str(w.shape()));
  }
  const std::size_t d_in = w.shape()[1], d_out = w.shape()[0];
  const std::size_t rows = x.size() / d_in;
  auto wt = transpose2d(w.values().data(), d_out, d_in);
  std::vector<double> v(rows * d_out);
  mm_nn(x.values().data(), wt.data(), v.data(), rows, d_in, d_out, false);
  check_finite(v, "linear");
  Shape oshape = x.shape();
  oshape.back() = d_out;
  Tensor out = make_tensor(std::move(oshape), std::move(v), x.requires_grad() || w.requires_grad());
  if (out.requires_grad()) {
    auto xd = x.node(), wd = w.node(), od = out.node();
    tape.record(
        [xd, wd, od, rows, d_in, d_out] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "linear");
          if (xd->requires_grad) {  // dx = g . w
            mm_nn(g, wd->values.data(), grad_buf(xd), rows, d_out, d_in, true);
          }
          if (wd->requires_grad) {  // dw = g^T . x
            auto gt = transpose2d(g, rows, d_out);
            mm_nn(gt.data(), xd->values.data(), grad_buf(wd), d_out, rows, d_in, true);
          }
        },
        out.node().get());
  }
  return out;
}

Tensor dot(const Tensor& a, const Tensor& b, Tape& tape) {
  if (a.rank() != 1 || b.rank() != 1 || a.size() != b.size()) {
    throw ShapeError("dot: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  double acc = 0.0;
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) acc += av[i] * bv[i];
  if (!std::isfinite(acc)) throw NumericError("dot produced a non-finite value");
  Tensor out = make_tensor({1}, {acc}, a.requires_grad() || b.requires_grad());
  if (out.requires_grad()) {
    auto ad = a.node(), bd = b.node(), od = out.node();
    tape.record(
        [ad, bd, od] {
          if (od->grad.empty()) return;
          const double g = out_grad(od, "dot")[0];
          const std::size_t n = ad->values.size();
          if (ad->requires_grad) {
            double* ga = grad_buf(ad);
            for (std::size_t i = 0; i < n; ++i) ga[i] += g * bd->values[i];
          }
          if (bd->requires_grad) {
            double* gb = grad_buf(bd);
            for (std::size_t i = 0; i < n; ++i) gb[i] += g * ad->values[i];
          }
        },
        out.node().get());
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape, Tape& tape) {
  check_positive_extents(shape);
  if (shape_numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> v(x.values().begin(), x.values().end());
  Tensor out = make_tensor(std::move(shape), std::move(v), x.requires_grad());
  if (out.requires_grad()) {
    auto xd = x.node(), od = out.node();
    tape.record(
        [xd, od] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "reshape");
          double* gx = grad_buf(xd);
          for (std::size_t i = 0; i < od->values.size(); ++i) gx[i] += g[i];
        },
        out.node().get());
  }
  return out;
}

namespace {

// Walks the output of a permutation in order, yielding the matching input
// offset through an odometer over mapped strides.
template <typename Fn>
void permute_walk(const Shape& oshape, const std::vector<std::size_t>& map_stride, Fn&& fn) {
  const std::size_t r = oshape.size();
  const std::size_t n = shape_numel(oshape);
  std::vector<std::size_t> idx(r, 0);
  std::size_t in_off = 0;
  for (std::size_t o = 0; o < n; ++o) {
    fn(o, in_off);
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      in_off += map_stride[ax];
      if (idx[ax] < oshape[ax]) break;
      in_off -= map_stride[ax] * oshape[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm, Tape& tape) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw ShapeError("permute: perm rank mismatch");
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  const Shape& ishape = x.shape();
  std::vector<std::size_t> istride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) istride[i] = istride[i + 1] * ishape[i + 1];
  Shape oshape(r);
  std::vector<std::size_t> map_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    oshape[i] = ishape[perm[i]];
    map_stride[i] = istride[perm[i]];
  }
  std::vector<double> v(x.size());
  const auto xv = x.values();
  permute_walk(oshape, map_stride, [&](std::size_t o, std::size_t in) { v[o] = xv[in]; });
  Tensor out = make_tensor(oshape, std::move(v), x.requires_grad());
  if (out.requires_grad()) {
    auto xd = x.node(), od = out.node();
    tape.record(
        [xd, od, oshape, map_stride] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "permute");
          double* gx = grad_buf(xd);
          permute_walk(oshape, map_stride,
                       [&](std::size_t o, std::size_t in) { gx[in] += g[o]; });
        },
        out.node().get());
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions / normalization
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& x, Tape& tape) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  if (!std::isfinite(acc)) throw NumericError("sum produced a non-finite value");
  Tensor out = make_tensor({1}, {acc}, x.requires_grad());
  if (out.requires_grad()) {
    auto xd = x.node(), od = out.node();
    tape.record(
        [xd, od] {
          if (od->grad.empty()) return;
          const double g = out_grad(od, "sum")[0];
          double* gx = grad_buf(xd);
          for (std::size_t i = 0; i < xd->values.size(); ++i) gx[i] += g;
        },
        out.node().get());
  }
  return out;
}

Tensor mean_all(const Tensor& x, Tape& tape) {
  return scale(sum_all(x, tape), 1.0 / static_cast<double>(x.size()), tape);
}

Tensor mean_axis(const Tensor& x, std::size_t axis, Tape& tape) {
  const AxisSplit s = split_axis(x.shape(), axis, "mean_axis");
  Shape oshape;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (i != axis) oshape.push_back(x.shape()[i]);
  }
  if (oshape.empty()) oshape = {1};
  std::vector<double> v(s.outer * s.inner, 0.0);
  const auto xv = x.values();
  const double inv = 1.0 / static_cast<double>(s.len);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t t = 0; t < s.len; ++t) {
      const double* src = xv.data() + (o * s.len + t) * s.inner;
      double* dst = v.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  for (double& e : v) e *= inv;
  check_finite(v, "mean_axis");
  Tensor out = make_tensor(std::move(oshape), std::move(v), x.requires_grad());
  if (out.requires_grad()) {
    auto xd = x.node(), od = out.node();
    tape.record(
        [xd, od, s, inv] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "mean_axis");
          double* gx = grad_buf(xd);
          for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t t = 0; t < s.len; ++t) {
              double* dst = gx + (o * s.len + t) * s.inner;
              const double* src = g + o * s.inner;
              for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i] * inv;
            }
          }
        },
        out.node().get());
  }
  return out;
}

Tensor softmax(const Tensor& x, std::size_t axis, Tape& tape) {
  const AxisSplit s = split_axis(x.shape(), axis, "softmax");
  std::vector<double> v(x.size());
  const auto xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = xv[base];
      for (std::size_t t = 1; t < s.len; ++t) mx = std::max(mx, xv[base + t * s.inner]);
      double total = 0.0;
      for (std::size_t t = 0; t < s.len; ++t) {
        const double e = std::exp(xv[base + t * s.inner] - mx);
        v[base + t * s.inner] = e;
        total += e;
      }
      for (std::size_t t = 0; t < s.len; ++t) v[base + t * s.inner] /= total;
    }
  }
  check_finite(v, "softmax");
  Tensor out = make_tensor(x.shape(), std::move(v), x.requires_grad());
  if (out.requires_grad()) {
    auto xd = x.node(), od = out.node();
    tape.record(
        [xd, od, s] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "softmax");
          const double* y = od->values.data();
          double* gx = grad_buf(xd);
          for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t i = 0; i < s.inner; ++i) {
              const std::size_t base = o * s.len * s.inner + i;
              double gy = 0.0;
              for (std::size_t t = 0; t < s.len; ++t) {
                const std::size_t k = base + t * s.inner;
                gy += g[k] * y[k];
              }
              for (std::size_t t = 0; t < s.len; ++t) {
                const std::size_t k = base + t * s.inner;
                gx[k] += y[k] * (g[k] - gy);
              }
            }
          }
        },
        out.node().get());
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps,
                  Tape& tape) {
  if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t d = x.shape().back();
  if (gain.rank() != 1 || bias.rank() != 1 || gain.size() != d || bias.size() != d) {
    throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " do not match last axis of " +
                     shape_str(x.shape()));
  }
  const std::size_t rows = x.size() / d;
  std::vector<double> v(x.size());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_sigma = std::make_shared<std::vector<double>>(rows);
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double c = xr[i] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[r] = inv;
    for (std::size_t i = 0; i < d; ++i) {
      const double xh = (xr[i] - mean) * inv;
      (*xhat)[r * d + i] = xh;
      v[r * d + i] = gv[i] * xh + bv[i];
    }
  }
  check_finite(v, "layer_norm");
  Tensor out = make_tensor(x.shape(), std::move(v),
                           x.requires_grad() || gain.requires_grad() || bias.requires_grad());
  if (out.requires_grad()) {
    auto xd = x.node(), gd = gain.node(), bd = bias.node(), od = out.node();
    tape.record(
        [xd, gd, bd, od, xhat, inv_sigma, rows, d] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "layer_norm");
          const double* xh = xhat->data();
          double* gx = xd->requires_grad ? grad_buf(xd) : nullptr;
          double* gg = gd->requires_grad ? grad_buf(gd) : nullptr;
          double* gb = bd->requires_grad ? grad_buf(bd) : nullptr;
          for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g + r * d;
            const double* xhr = xh + r * d;
            if (gg || gb) {
              for (std::size_t i = 0; i < d; ++i) {
                if (gg) gg[i] += gr[i] * xhr[i];
                if (gb) gb[i] += gr[i];
              }
            }
            if (gx) {
              // dyh = dy * gain; dx = inv * (dyh - mean(dyh) - xh * mean(dyh*xh))
              double m1 = 0.0, m2 = 0.0;
              for (std::size_t i = 0; i < d; ++i) {
                const double dyh = gr[i] * gd->values[i];
                m1 += dyh;
                m2 += dyh * xhr[i];
              }
              m1 /= static_cast<double>(d);
              m2 /= static_cast<double>(d);
              const double inv = (*inv_sigma)[r];
              for (std::size_t i = 0; i < d; ++i) {
                const double dyh = gr[i] * gd->values[i];
                gx[r * d + i] += inv * (dyh - m1 - xhr[i] * m2);
              }
            }
          }
        },
        out.node().get());
  }
  return out;
}

// ---------------------------------------------------------------------------
// broadcasts over trailing axes
// ---------------------------------------------------------------------------

namespace {

void require_last_axis(const Tensor& x, const Tensor& v, const char* op) {
  if (v.rank() != 1 || x.shape().back() != v.size()) {
    throw ShapeError(std::string(op) + ": vector " + shape_str(v.shape()) +
                     " does not match last axis of " + shape_str(x.shape()));
  }
}

}  // namespace

Tensor add_bias(const Tensor& x, const Tensor& bias, Tape& tape) {
  require_last_axis(x, bias, "add_bias");
  const std::size_t d = bias.size();
  const std::size_t rows = x.size() / d;
  std::vector<double> v(x.size());
  const auto xv = x.values();
  const auto bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < d; ++i) v[r * d + i] = xv[r * d + i] + bv[i];
  check_finite(v, "add_bias");
  Tensor out = make_tensor(x.shape(), std::move(v), x.requires_grad() || bias.requires_grad());
  if (out.requires_grad()) {
    auto xd = x.node(), bd = bias.node(), od = out.node();
    tape.record(
        [xd, bd, od, rows, d] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "add_bias");
          if (xd->requires_grad) {
            double* gx = grad_buf(xd);
            for (std::size_t i = 0; i < rows * d; ++i) gx[i] += g[i];
          }
          if (bd->requires_grad) {
            double* gb = grad_buf(bd);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t i = 0; i < d; ++i) gb[i] += g[r * d + i];
          }
        },
        out.node().get());
  }
  return out;
}

Tensor mul_gain(const Tensor& x, const Tensor& gain, Tape& tape) {
  require_last_axis(x, gain, "mul_gain");
  const std::size_t d = gain.size();
  const std::size_t rows = x.size() / d;
  std::vector<double> v(x.size());
  const auto xv = x.values();
  const auto gv = gain.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < d; ++i) v[r * d + i] = xv[r * d + i] * gv[i];
  check_finite(v, "mul_gain");
  Tensor out = make_tensor(x.shape(), std::move(v), x.requires_grad() || gain.requires_grad());
  if (out.requires_grad()) {
    auto xd = x.node(), gd = gain.node(), od = out.node();
    tape.record(
        [xd, gd, od, rows, d] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "mul_gain");
          if (xd->requires_grad) {
            double* gx = grad_buf(xd);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += g[r * d + i] * gd->values[i];
          }
          if (gd->requires_grad) {
            double* gg = grad_buf(gd);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t i = 0; i < d; ++i) gg[i] += g[r * d + i] * xd->values[r * d + i];
          }
        },
        out.node().get());
  }
  return out;
}

Tensor add_tokenwise(const Tensor& x, const Tensor& p, Tape& tape) {
  if (x.rank() != 3 || p.rank() != 2 || x.shape()[1] != p.shape()[0] ||
      x.shape()[2] != p.shape()[1]) {
    throw ShapeError("add_tokenwise: incompatible shapes " + shape_str(x.shape()) + " and " +
                     shape_str(p.shape()));
  }
  const std::size_t n = x.shape()[0], td = p.size();
  std::vector<double> v(x.size());
  const auto xv = x.values();
  const auto pv = p.values();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t i = 0; i < td; ++i) v[s * td + i] = xv[s * td + i] + pv[i];
  check_finite(v, "add_tokenwise");
  Tensor out = make_tensor(x.shape(), std::move(v), x.requires_grad() || p.requires_grad());
  if (out.requires_grad()) {
    auto xd = x.node(), pd = p.node(), od = out.node();
    tape.record(
        [xd, pd, od, n, td] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "add_tokenwise");
          if (xd->requires_grad) {
            double* gx = grad_buf(xd);
            for (std::size_t i = 0; i < n * td; ++i) gx[i] += g[i];
          }
          if (pd->requires_grad) {
            double* gp = grad_buf(pd);
            for (std::size_t s = 0; s < n; ++s)
              for (std::size_t i = 0; i < td; ++i) gp[i] += g[s * td + i];
          }
        },
        out.node().get());
  }
  return out;
}

Tensor add_samplewise(const Tensor& x, const Tensor& s, Tape& tape) {
  if (x.rank() != 3 || s.rank() != 2 || x.shape()[0] != s.shape()[0] ||
      x.shape()[2] != s.shape()[1]) {
    throw ShapeError("add_samplewise: incompatible shapes " + shape_str(x.shape()) + " and " +
                     shape_str(s.shape()));
  }
  const std::size_t n = x.shape()[0], t = x.shape()[1], d = x.shape()[2];
  std::vector<double> v(x.size());
  const auto xv = x.values();
  const auto sv = s.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t tok = 0; tok < t; ++tok)
      for (std::size_t j = 0; j < d; ++j)
        v[(i * t + tok) * d + j] = xv[(i * t + tok) * d + j] + sv[i * d + j];
  check_finite(v, "add_samplewise");
  Tensor out = make_tensor(x.shape(), std::move(v), x.requires_grad() || s.requires_grad());
  if (out.requires_grad()) {
    auto xd = x.node(), sd = s.node(), od = out.node();
    tape.record(
        [xd, sd, od, n, t, d] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "add_samplewise");
          if (xd->requires_grad) {
            double* gx = grad_buf(xd);
            for (std::size_t i = 0; i < n * t * d; ++i) gx[i] += g[i];
          }
          if (sd->requires_grad) {
            double* gs = grad_buf(sd);
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t tok = 0; tok < t; ++tok)
                for (std::size_t j = 0; j < d; ++j) gs[i * d + j] += g[(i * t + tok) * d + j];
          }
        },
        out.node().get());
  }
  return out;
}

// ---------------------------------------------------------------------------
// rows / stacking
// ---------------------------------------------------------------------------

Tensor prepend_token(const Tensor& token, const Tensor& x, Tape& tape) {
  if (x.rank() != 3 || token.rank() != 1 || token.size() != x.shape()[2]) {
    throw ShapeError("prepend_token: incompatible shapes " + shape_str(token.shape()) + " and " +
                     shape_str(x.shape()));
  }
  const std::size_t n = x.shape()[0], t = x.shape()[1], d = x.shape()[2];
  std::vector<double> v(n * (t + 1) * d);
  const auto tv = token.values();
  const auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(tv.begin(), tv.end(), v.begin() + static_cast<std::ptrdiff_t>(i * (t + 1) * d));
    std::copy(xv.begin() + static_cast<std::ptrdiff_t>(i * t * d),
              xv.begin() + static_cast<std::ptrdiff_t>((i + 1) * t * d),
              v.begin() + static_cast<std::ptrdiff_t>((i * (t + 1) + 1) * d));
  }
  check_finite(v, "prepend_token");
  Tensor out =
      make_tensor({n, t + 1, d}, std::move(v), token.requires_grad() || x.requires_grad());
  if (out.requires_grad()) {
    auto td = token.node(), xd = x.node(), od = out.node();
    tape.record(
        [td, xd, od, n, t, d] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "prepend_token");
          if (td->requires_grad) {
            double* gt = grad_buf(td);
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t j = 0; j < d; ++j) gt[j] += g[i * (t + 1) * d + j];
          }
          if (xd->requires_grad) {
            double* gx = grad_buf(xd);
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t k = 0; k < t * d; ++k)
                gx[i * t * d + k] += g[(i * (t + 1) + 1) * d + k];
          }
        },
        out.node().get());
  }
  return out;
}

Tensor select_rows(const Tensor& x, const std::vector<std::size_t>& rows, Tape& tape) {
  if (x.rank() < 1) throw ShapeError("select_rows: rank-0 input");
  if (rows.empty()) throw ShapeError("select_rows: empty row selection");
  const std::size_t n = x.shape()[0];
  const std::size_t rest = x.size() / n;
  for (std::size_t r : rows) {
    if (r >= n) throw ShapeError("select_rows: row index out of range");
  }
  Shape oshape = x.shape();
  oshape[0] = rows.size();
  std::vector<double> v(rows.size() * rest);
  const auto xv = x.values();
  for (std::size_t j = 0; j < rows.size(); ++j) {
    std::copy(xv.begin() + static_cast<std::ptrdiff_t>(rows[j] * rest),
              xv.begin() + static_cast<std::ptrdiff_t>((rows[j] + 1) * rest),
              v.begin() + static_cast<std::ptrdiff_t>(j * rest));
  }
  Tensor out = make_tensor(std::move(oshape), std::move(v), x.requires_grad());
  if (out.requires_grad()) {
    auto xd = x.node(), od = out.node();
    tape.record(
        [xd, od, rows, rest] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "select_rows");
          double* gx = grad_buf(xd);
          for (std::size_t j = 0; j < rows.size(); ++j)
            for (std::size_t i = 0; i < rest; ++i) gx[rows[j] * rest + i] += g[j * rest + i];
        },
        out.node().get());
  }
  return out;
}

Tensor row(const Tensor& x, std::size_t index, Tape& tape) {
  if (x.rank() < 1 || index >= x.shape()[0]) {
    throw ShapeError("row: index " + std::to_string(index) + " out of range for " +
                     shape_str(x.shape()));
  }
  Shape oshape(x.shape().begin() + 1, x.shape().end());
  if (oshape.empty()) oshape = {1};
  const std::size_t rest = x.size() / x.shape()[0];
  std::vector<double> v(x.values().begin() + static_cast<std::ptrdiff_t>(index * rest),
                        x.values().begin() + static_cast<std::ptrdiff_t>((index + 1) * rest));
  Tensor out = make_tensor(std::move(oshape), std::move(v), x.requires_grad());
  if (out.requires_grad()) {
    auto xd = x.node(), od = out.node();
    tape.record(
        [xd, od, index, rest] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "row");
          double* gx = grad_buf(xd);
          for (std::size_t i = 0; i < rest; ++i) gx[index * rest + i] += g[i];
        },
        out.node().get());
  }
  return out;
}

Tensor stack_rows(const std::vector<Tensor>& rows, Tape& tape) {
  if (rows.empty()) throw ShapeError("stack_rows: nothing to stack");
  const Shape& rshape = rows.front().shape();
  bool rg = false;
  for (const Tensor& r : rows) {
    if (r.shape() != rshape) throw ShapeError("stack_rows: mixed shapes");
    rg = rg || r.requires_grad();
  }
  const std::size_t rest = rows.front().size();
  Shape oshape;
  oshape.push_back(rows.size());
  oshape.insert(oshape.end(), rshape.begin(), rshape.end());
  std::vector<double> v(rows.size() * rest);
  for (std::size_t j = 0; j < rows.size(); ++j) {
    const auto rv = rows[j].values();
    std::copy(rv.begin(), rv.end(), v.begin() + static_cast<std::ptrdiff_t>(j * rest));
  }
  Tensor out = make_tensor(std::move(oshape), std::move(v), rg);
  if (out.requires_grad()) {
    std::vector<std::shared_ptr<TensorData>> parts;
    parts.reserve(rows.size());
    for (const Tensor& r : rows) parts.push_back(r.node());
    auto od = out.node();
    tape.record(
        [parts, od, rest] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "stack_rows");
          for (std::size_t j = 0; j < parts.size(); ++j) {
            if (!parts[j]->requires_grad) continue;
            double* gp = grad_buf(parts[j]);
            for (std::size_t i = 0; i < rest; ++i) gp[i] += g[j * rest + i];
          }
        },
        out.node().get());
  }
  return out;
}

Tensor stack_scalars(const std::vector<Tensor>& scalars, Tape& tape) {
  if (scalars.empty()) throw ShapeError("stack_scalars: nothing to stack");
  for (const Tensor& s : scalars) {
    if (s.size() != 1) throw ShapeError("stack_scalars: inputs must be scalars");
  }
  Tensor stacked = stack_rows(scalars, tape);  // [k, 1]
  return reshape(stacked, {scalars.size()}, tape);
}

Tensor gather_labels(const Tensor& probs, const std::vector<int>& labels, Tape& tape) {
  if (probs.rank() != 2) throw ShapeError("gather_labels: expected [n x c] probabilities");
  const std::size_t n = probs.shape()[0], c = probs.shape()[1];
  if (labels.size() != n) {
    throw ShapeError("gather_labels: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  std::vector<double> v(n);
  const auto pv = probs.values();
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw ConfigError("gather_labels: label out of range");
    }
    v[i] = pv[i * c + static_cast<std::size_t>(labels[i])];
  }
  Tensor out = make_tensor({n}, std::move(v), probs.requires_grad());
  if (out.requires_grad()) {
    auto pd = probs.node(), od = out.node();
    tape.record(
        [pd, od, labels, c] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "gather_labels");
          double* gp = grad_buf(pd);
          for (std::size_t i = 0; i < od->values.size(); ++i)
            gp[i * c + static_cast<std::size_t>(labels[i])] += g[i];
        },
        out.node().get());
  }
  return out;
}

// ---------------------------------------------------------------------------
// scalar-tensor broadcasts
// ---------------------------------------------------------------------------

Tensor mul_scalar(const Tensor& x, const Tensor& s, Tape& tape) {
  if (s.size() != 1) throw ShapeError("mul_scalar: scale must be a scalar tensor");
  const double sv = s.values()[0];
  std::vector<double> v(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = xv[i] * sv;
  check_finite(v, "mul_scalar");
  Tensor out = make_tensor(x.shape(), std::move(v), x.requires_grad() || s.requires_grad());
  if (out.requires_grad()) {
    auto xd = x.node(), sd = s.node(), od = out.node();
    tape.record(
        [xd, sd, od] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "mul_scalar");
          const double sval = sd->values[0];
          if (xd->requires_grad) {
            double* gx = grad_buf(xd);
            for (std::size_t i = 0; i < od->values.size(); ++i) gx[i] += g[i] * sval;
          }
          if (sd->requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < od->values.size(); ++i) acc += g[i] * xd->values[i];
            grad_buf(sd)[0] += acc;
          }
        },
        out.node().get());
  }
  return out;
}

Tensor div_scalar(const Tensor& x, const Tensor& s, Tape& tape) {
  if (s.size() != 1) throw ShapeError("div_scalar: divisor must be a scalar tensor");
  const double sv = s.values()[0];
  std::vector<double> v(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = xv[i] / sv;
  check_finite(v, "div_scalar");
  Tensor out = make_tensor(x.shape(), std::move(v), x.requires_grad() || s.requires_grad());
  if (out.requires_grad()) {
    auto xd = x.node(), sd = s.node(), od = out.node();
    tape.record(
        [xd, sd, od] {
          if (od->grad.empty()) return;
          const double* g = out_grad(od, "div_scalar");
          const double sval = sd->values[0];
          if (xd->requires_grad) {
            double* gx = grad_buf(xd);
            for (std::size_t i = 0; i < od->values.size(); ++i) gx[i] += g[i] / sval;
          }
          if (sd->requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < od->values.size(); ++i) acc += g[i] * xd->values[i];
            grad_buf(sd)[0] -= acc / (sval * sval);
          }
        },
        out.node().get());
  }
  return out;
}

// ---------------------------------------------------------------------------
// compositions
// ---------------------------------------------------------------------------

Tensor l2_norm(const Tensor& x, Tape& tape) {
  return sqrt_elem(sum_all(mul(x, x, tape), tape), tape);
}

Tensor euclidean(const Tensor& a, const Tensor& b, Tape& tape) {
  return l2_norm(sub(a, b, tape), tape);
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

double finite_difference_check(const std::function<Tensor(Tape&)>& f,
                               const std::vector<Tensor>& params, double h) {
  if (h <= 0.0) throw ConfigError("finite_difference_check: h must be positive");
  for (const Tensor& p : params) {
    Tensor copy = p;
    copy.clear_grad();
  }
  Tape base_tape;
  Tensor loss = f(base_tape);
  if (!std::isfinite(loss.item())) {
    throw NumericError("finite_difference_check: loss is non-finite at the base point");
  }
  backward(loss, base_tape);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.size(), 0.0);
    }
  }

  double max_rel = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor param = params[pi];
    if (!param.requires_grad()) continue;  // frozen: excluded from the sweep
    auto vals = param.values_mut();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + h;
      Tape tp;
      const double lp = f(tp).item();
      vals[i] = saved - h;
      Tape tm;
      const double lm = f(tm).item();
      vals[i] = saved;
      if (!std::isfinite(lp) || !std::isfinite(lm)) {
        throw NumericError("finite_difference_check: loss is non-finite at a probe point");
      }
      const double numeric = (lp - lm) / (2.0 * h);
      const double a = analytic[pi][i];
      const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace gendf
