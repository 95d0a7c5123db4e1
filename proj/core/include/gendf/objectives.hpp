#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "gendf/tensor.hpp"

namespace gendf {

// Binary classification head over pooled features: softmax(W f + b).
struct HeadWeights {
  Tensor w;  // [2 x d]
  Tensor b;  // [2]

  static HeadWeights init(std::size_t dim, std::uint64_t seed);
  std::vector<Tensor> trainable() const { return {w, b}; }
};

struct LossWeights {
  double gamma_tri = 0.2;  // triplet term
  double gamma_aug = 0.2;  // augmentation term

  void validate() const;
};

// Per-row class probabilities, rows sum to 1.
Tensor classify(const HeadWeights& head, const Tensor& pooled, Tape& tape);

// Mean of -log p(true class); probabilities clamped to [1e-12, 1] first.
Tensor cross_entropy(const Tensor& probs, const std::vector<int>& labels, Tape& tape);

struct TripletLoss {
  Tensor loss;          // [1]
  bool skipped = false;  // no valid anchor/positive/negative triple
};

// Margin-free triplet objective. Real samples anchor; the other reals are
// positives and the fakes negatives. Pair weights are softmax(+d) over
// positives and softmax(-d) over negatives, distances Euclidean on the raw
// pooled features. Per-anchor loss softplus(sum w_p d_p - sum w_n d_n),
// averaged over anchors.
TripletLoss weighted_triplet(const Tensor& pooled, const std::vector<int>& labels, Tape& tape);

// Cross-entropy of the same head over pooled augmented features.
Tensor augmentation_loss(const HeadWeights& head, const Tensor& pooled_aug,
                         const std::vector<int>& labels, Tape& tape);

// ce + gamma_tri * tri + gamma_aug * aug; a missing aug term contributes 0.
Tensor total_loss(const Tensor& ce, const Tensor& tri, const std::optional<Tensor>& aug,
                  const LossWeights& weights, Tape& tape);

}  // namespace gendf
