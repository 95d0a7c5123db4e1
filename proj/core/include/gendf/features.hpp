#pragma once

#include <cstdint>
#include <vector>

#include "gendf/rng.hpp"
#include "gendf/tensor.hpp"

namespace gendf {

// Trainable elementwise affine applied once to the encoder output:
// out = theta (.) x + eps per token.
struct ModulationParams {
  Tensor theta;  // [d], init ~ N(1, sigma^2)
  Tensor eps;    // [d], init ~ N(0, sigma^2)

  static ModulationParams init(std::size_t dim, double sigma_theta, double sigma_eps,
                               std::uint64_t seed);
  // theta = 1, eps = 0: exact identity transform.
  static ModulationParams identity(std::size_t dim);
  std::vector<Tensor> trainable() const { return {theta, eps}; }
};

Tensor fsr_apply(const ModulationParams& params, const Tensor& x, Tape& tape);

// Ablation stand-in for the modulation transform: a trainable dense layer
// out = W x + b applied per token.
struct LinearModulation {
  Tensor w;  // [d x d]
  Tensor b;  // [d]

  static LinearModulation init(std::size_t dim, std::uint64_t seed);
  std::vector<Tensor> trainable() const { return {w, b}; }
};

Tensor linear_modulation_apply(const LinearModulation& params, const Tensor& x, Tape& tape);

struct AugmentationConfig {
  double sigma_aug = 0.02;             // perturbation scale; beta ~ U(-sigma, sigma)
  double activation_probability = 0.5;  // training-time coin flip

  void validate() const;
};

// A batch of token features with binary labels (0 = real, 1 = fake). `pooled`
// is always the token mean of `features`, recorded on the same tape.
struct LabeledFeatures {
  Tensor features;  // [n x t x d]
  Tensor pooled;    // [n x d]
  std::vector<int> labels;

  static LabeledFeatures make(const Tensor& features, std::vector<int> labels, Tape& tape);
  // For externally assembled instances: checks pooled == token mean within tol.
  void validate(double tol = 1e-12) const;

  std::vector<std::size_t> real_rows() const;
  std::vector<std::size_t> fake_rows() const;
};

// Unit vector from the fake centroid toward the real centroid. Errors on a
// single-class batch or a zero centroid difference.
Tensor class_direction(const Tensor& pooled, const std::vector<int>& labels, Tape& tape);

// Gram-Schmidt complement of d_cls against a seeded random draw. Redraws with
// an incremented seed (up to 8 attempts) when the residual is degenerate.
Tensor orthogonal_direction(const Tensor& d_cls, std::uint64_t seed, Tape& tape);

struct CifaugResult {
  Tensor features;  // [n x t x d]; input features when not applied
  bool applied = false;
};

// With probability cfg.activation_probability, shifts every token of sample i
// by beta * ||pooled_i|| * d_per, with one beta and one d_per per batch.
// Training-time only; a single-class batch skips augmentation.
CifaugResult cifaug_apply(const LabeledFeatures& batch, const AugmentationConfig& cfg, Rng& rng,
                          Tape& tape);

}  // namespace gendf
