#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "gendf/common.hpp"
#include "gendf/rng.hpp"

namespace gendf {

struct TensorData {
  Shape shape;
  std::vector<double> values;  // row-major
  bool requires_grad = false;
  std::vector<double> grad;  // empty until backward reaches this tensor
};

// Dense 64-bit tensor handle. Copying a Tensor copies the handle, not the
// storage; operations never mutate their inputs and always allocate fresh
// outputs. Mutable access (values_mut) exists for optimizers and the
// finite-difference sweep only.
class Tensor {
 public:
  Tensor() : data_(std::make_shared<TensorData>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  // i.i.d. N(mean, stddev^2) entries.
  static Tensor randn(Shape shape, Rng& rng, double mean, double stddev, bool requires_grad = false);

  const Shape& shape() const { return data_->shape; }
  std::size_t rank() const { return data_->shape.size(); }
  std::size_t size() const { return data_->values.size(); }

  std::span<const double> values() const { return data_->values; }
  std::span<double> values_mut() { return data_->values; }

  bool requires_grad() const { return data_->requires_grad; }
  void set_requires_grad(bool flag) { data_->requires_grad = flag; }

  bool has_grad() const { return !data_->grad.empty(); }
  std::span<const double> grad() const;
  void clear_grad() { data_->grad.clear(); }

  // Scalar extraction; throws unless size() == 1.
  double item() const;
  // Row-major element access for tests and readers.
  double at(std::initializer_list<std::size_t> index) const;

  std::shared_ptr<TensorData>& node() { return data_; }
  const std::shared_ptr<TensorData>& node() const { return data_; }

 private:
  std::shared_ptr<TensorData> data_;
};

// Ordered record of executed operations. Ops append a backward closure as
// they run; backward() replays them once in exact reverse order. A tape and
// the tensors it references stay on one thread; independent tapes on
// independent threads do not interact.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_fn, const TensorData* output);
  bool produced(const TensorData* t) const { return outputs_.count(t) != 0; }
  std::size_t num_records() const { return records_.size(); }
  bool backward_done() const { return done_; }

 private:
  std::vector<std::function<void()>> records_;
  std::unordered_set<const TensorData*> outputs_;
  bool done_ = false;

  friend void backward(const Tensor& loss, Tape& tape);
};

// Populates grad for every requires_grad ancestor of `loss`. Frozen tensors
// receive no grad. Running backward twice on one tape is an error; rebuild
// the graph (and clear parameter grads) instead.
void backward(const Tensor& loss, Tape& tape);

// --- elementwise / arithmetic ---
Tensor add(const Tensor& a, const Tensor& b, Tape& tape);
Tensor sub(const Tensor& a, const Tensor& b, Tape& tape);
Tensor mul(const Tensor& a, const Tensor& b, Tape& tape);
Tensor scale(const Tensor& x, double c, Tape& tape);
Tensor gelu(const Tensor& x, Tape& tape);       // exact Gaussian-CDF form
Tensor softplus(const Tensor& x, Tape& tape);   // ln(1 + e^x), overflow-safe
Tensor log_elem(const Tensor& x, Tape& tape);
Tensor sqrt_elem(const Tensor& x, Tape& tape);
// Pass-through gradient inside [lo, hi], zero outside.
Tensor clamp(const Tensor& x, double lo, double hi, Tape& tape);

// --- linear algebra ---
// [m x k] . [k x n]; gradient rule d(a) = g . b^T, d(b) = a^T . g.
Tensor matmul(const Tensor& a, const Tensor& b, Tape& tape);
// Batched: [B x m x k] . [B x k x n].
Tensor bmm(const Tensor& a, const Tensor& b, Tape& tape);
// x[..., d_in] . w[d_out, d_in]^T -> [..., d_out]; the projection workhorse.
Tensor linear(const Tensor& x, const Tensor& w, Tape& tape);
Tensor dot(const Tensor& a, const Tensor& b, Tape& tape);  // [k].[k] -> [1]

// --- shape ---
Tensor reshape(const Tensor& x, Shape shape, Tape& tape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm, Tape& tape);

// --- reductions / normalization ---
Tensor sum_all(const Tensor& x, Tape& tape);   // -> [1]
Tensor mean_all(const Tensor& x, Tape& tape);  // -> [1]
Tensor mean_axis(const Tensor& x, std::size_t axis, Tape& tape);
// Slices along `axis` become nonnegative and sum to 1; max-subtraction keeps
// large inputs finite.
Tensor softmax(const Tensor& x, std::size_t axis, Tape& tape);
// Normalizes the last axis to zero mean / unit variance, then applies the
// affine (gain, bias).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps, Tape& tape);

// --- broadcasts over the last axis ---
Tensor add_bias(const Tensor& x, const Tensor& bias, Tape& tape);   // x[..., d] + bias[d]
Tensor mul_gain(const Tensor& x, const Tensor& gain, Tape& tape);   // x[..., d] * gain[d]
Tensor add_tokenwise(const Tensor& x, const Tensor& p, Tape& tape); // x[n,t,d] + p[t,d]
Tensor add_samplewise(const Tensor& x, const Tensor& s, Tape& tape);// x[n,t,d] + s[n,d]

// --- rows / stacking ---
Tensor prepend_token(const Tensor& token, const Tensor& x, Tape& tape);  // [d], [n,t,d] -> [n,t+1,d]
Tensor select_rows(const Tensor& x, const std::vector<std::size_t>& rows, Tape& tape);
Tensor row(const Tensor& x, std::size_t index, Tape& tape);
Tensor stack_rows(const std::vector<Tensor>& rows, Tape& tape);      // k x [rest] -> [k, rest]
Tensor stack_scalars(const std::vector<Tensor>& scalars, Tape& tape);// k x [1] -> [k]
// probs[n, c] indexed per row by labels -> [n].
Tensor gather_labels(const Tensor& probs, const std::vector<int>& labels, Tape& tape);

// --- scalar-tensor broadcasts ---
Tensor mul_scalar(const Tensor& x, const Tensor& s, Tape& tape);  // s is [1]
Tensor div_scalar(const Tensor& x, const Tensor& s, Tape& tape);

// --- compositions ---
Tensor l2_norm(const Tensor& x, Tape& tape);                        // -> [1]
Tensor euclidean(const Tensor& a, const Tensor& b, Tape& tape);     // -> [1]

// Central-difference gradient oracle. Evaluates f once with backward to get
// analytic grads, then sweeps every entry of every requires_grad parameter
// (frozen parameters are skipped) and returns
//   max |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
// f must be deterministic and must read the parameters through the handles
// passed here.
double finite_difference_check(const std::function<Tensor(Tape&)>& f,
                               const std::vector<Tensor>& params, double h);

}  // namespace gendf
