#include "gendf/features.hpp"

#include <cmath>

namespace gendf {

ModulationParams ModulationParams::init(std::size_t dim, double sigma_theta, double sigma_eps,
                                        std::uint64_t seed) {
  if (dim == 0) throw ConfigError("modulation params: dim must be positive");
  if (sigma_theta < 0.0 || sigma_eps < 0.0) {
    throw ConfigError("modulation params: sigmas must be nonnegative");
  }
  Rng rng(seed);
  ModulationParams p;
  p.theta = Tensor::randn({dim}, rng, 1.0, sigma_theta, /*requires_grad=*/true);
  p.eps = Tensor::randn({dim}, rng, 0.0, sigma_eps, /*requires_grad=*/true);
  return p;
}

ModulationParams ModulationParams::identity(std::size_t dim) {
  ModulationParams p;
  p.theta = Tensor::full({dim}, 1.0, /*requires_grad=*/true);
  p.eps = Tensor::zeros({dim}, /*requires_grad=*/true);
  return p;
}

Tensor fsr_apply(const ModulationParams& params, const Tensor& x, Tape& tape) {
  return add_bias(mul_gain(x, params.theta, tape), params.eps, tape);
}

LinearModulation LinearModulation::init(std::size_t dim, std::uint64_t seed) {
  if (dim == 0) throw ConfigError("linear modulation: dim must be positive");
  Rng rng(seed);
  LinearModulation p;
  p.w = Tensor::randn({dim, dim}, rng, 0.0, 0.02, /*requires_grad=*/true);
  p.b = Tensor::zeros({dim}, /*requires_grad=*/true);
  return p;
}

Tensor linear_modulation_apply(const LinearModulation& params, const Tensor& x, Tape& tape) {
  return add_bias(linear(x, params.w, tape), params.b, tape);
}

void AugmentationConfig::validate() const {
  if (sigma_aug < 0.0) throw ConfigError("augmentation: sigma must be nonnegative");
  if (activation_probability < 0.0 || activation_probability > 1.0) {
    throw ConfigError("augmentation: activation probability must lie in [0, 1]");
  }
}

LabeledFeatures LabeledFeatures::make(const Tensor& features, std::vector<int> labels,
                                      Tape& tape) {
  if (features.rank() != 3) {
    throw ShapeError("labeled features: expected [n x t x d], got " +
                     shape_str(features.shape()));
  }
  if (labels.size() != features.shape()[0]) {
    throw ShapeError("labeled features: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(features.shape()[0]) + " samples");
  }
  for (int l : labels) {
    if (l != 0 && l != 1) throw ConfigError("labeled features: labels must be 0 or 1");
  }
  LabeledFeatures out;
  out.features = features;
  out.pooled = mean_axis(features, 1, tape);
  out.labels = std::move(labels);
  return out;
}

void LabeledFeatures::validate(double tol) const {
  const std::size_t n = features.shape()[0], t = features.shape()[1], d = features.shape()[2];
  if (pooled.rank() != 2 || pooled.shape()[0] != n || pooled.shape()[1] != d) {
    throw ShapeError("labeled features: pooled shape " + shape_str(pooled.shape()) +
                     " does not match features " + shape_str(features.shape()));
  }
  const auto fv = features.values();
  const auto pv = pooled.values();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double mean = 0.0;
      for (std::size_t tok = 0; tok < t; ++tok) mean += fv[(i * t + tok) * d + j];
      mean /= static_cast<double>(t);
      if (std::abs(mean - pv[i * d + j]) > tol) {
        throw NumericError("labeled features: pooled is not the token mean of features");
      }
    }
  }
}

std::vector<std::size_t> LabeledFeatures::real_rows() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 0) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> LabeledFeatures::fake_rows() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) out.push_back(i);
  }
  return out;
}

Tensor class_direction(const Tensor& pooled, const std::vector<int>& labels, Tape& tape) {
  if (pooled.rank() != 2 || pooled.shape()[0] != labels.size()) {
    throw ShapeError("class_direction: pooled " + shape_str(pooled.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  std::vector<std::size_t> real, fake;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    (labels[i] == 0 ? real : fake).push_back(i);
  }
  if (real.empty() || fake.empty()) {
    throw ConfigError("class_direction: batch must contain both classes");
  }
  Tensor centroid_real = mean_axis(select_rows(pooled, real, tape), 0, tape);
  Tensor centroid_fake = mean_axis(select_rows(pooled, fake, tape), 0, tape);
  Tensor diff = sub(centroid_real, centroid_fake, tape);
  Tensor norm = l2_norm(diff, tape);
  if (norm.item() < 1e-12) {
    throw NumericError("class_direction: centroids coincide, direction is degenerate");
  }
  return div_scalar(diff, norm, tape);
}

Tensor orthogonal_direction(const Tensor& d_cls, std::uint64_t seed, Tape& tape) {
  if (d_cls.rank() != 1) {
    throw ShapeError("orthogonal_direction: expected a vector, got " + shape_str(d_cls.shape()));
  }
  const std::size_t d = d_cls.size();
  if (d < 2) {
    throw ConfigError("orthogonal_direction: no orthogonal complement in dimension " +
                      std::to_string(d));
  }
  for (std::uint64_t attempt = 0; attempt < 8; ++attempt) {
    Rng rng(seed + attempt);
    Tensor d_rand = Tensor::randn({d}, rng, 0.0, 1.0);
    Tensor proj = dot(d_rand, d_cls, tape);
    Tensor residual = sub(d_rand, mul_scalar(d_cls, proj, tape), tape);
    Tensor norm = l2_norm(residual, tape);
    if (norm.item() >= 1e-8) return div_scalar(residual, norm, tape);
  }
  throw NumericError("orthogonal_direction: residual degenerate after 8 seeded attempts");
}

CifaugResult cifaug_apply(const LabeledFeatures& batch, const AugmentationConfig& cfg, Rng& rng,
                          Tape& tape) {
  cfg.validate();
  if (!rng.bernoulli(cfg.activation_probability)) {
    return {batch.features, false};
  }
  const auto real = batch.real_rows();
  const auto fake = batch.fake_rows();
  if (real.empty() || fake.empty()) {
    return {batch.features, false};  // skipped, not fatal
  }

  Tensor d_cls = class_direction(batch.pooled, batch.labels, tape);
  Tensor d_per = orthogonal_direction(d_cls, rng.next_u64(), tape);
  const double beta = rng.uniform(-cfg.sigma_aug, cfg.sigma_aug);

  // One beta and one d_per per batch; per-sample variation enters only
  // through the pooled-feature norm.
  const std::size_t n = batch.features.shape()[0];
  std::vector<Tensor> shifts;
  shifts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor norm_i = l2_norm(row(batch.pooled, i, tape), tape);
    shifts.push_back(scale(mul_scalar(d_per, norm_i, tape), beta, tape));
  }
  Tensor shift_matrix = stack_rows(shifts, tape);  // [n x d]
  Tensor augmented = add_samplewise(batch.features, shift_matrix, tape);
  return {augmented, true};
}

}  // namespace gendf
