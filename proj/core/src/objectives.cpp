#include "gendf/objectives.hpp"

#include "gendf/rng.hpp"

namespace gendf {

HeadWeights HeadWeights::init(std::size_t dim, std::uint64_t seed) {
  if (dim == 0) throw ConfigError("head: dim must be positive");
  Rng rng(seed);
  HeadWeights h;
  h.w = Tensor::randn({2, dim}, rng, 0.0, 0.02, /*requires_grad=*/true);
  h.b = Tensor::zeros({2}, /*requires_grad=*/true);
  return h;
}

void LossWeights::validate() const {
  if (gamma_tri < 0.0 || gamma_aug < 0.0) {
    throw ConfigError("loss weights must be nonnegative");
  }
}

Tensor classify(const HeadWeights& head, const Tensor& pooled, Tape& tape) {
  if (pooled.rank() != 2 || pooled.shape()[1] != head.w.shape()[1]) {
    throw ShapeError("classify: pooled " + shape_str(pooled.shape()) + " vs head " +
                     shape_str(head.w.shape()));
  }
  Tensor logits = add_bias(linear(pooled, head.w, tape), head.b, tape);
  return softmax(logits, 1, tape);
}

Tensor cross_entropy(const Tensor& probs, const std::vector<int>& labels, Tape& tape) {
  Tensor p_true = gather_labels(probs, labels, tape);
  Tensor logp = log_elem(clamp(p_true, 1e-12, 1.0, tape), tape);
  return scale(mean_all(logp, tape), -1.0, tape);
}

TripletLoss weighted_triplet(const Tensor& pooled, const std::vector<int>& labels, Tape& tape) {
  if (pooled.rank() != 2 || pooled.shape()[0] != labels.size()) {
    throw ShapeError("weighted_triplet: pooled " + shape_str(pooled.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  std::vector<std::size_t> reals, fakes;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    (labels[i] == 0 ? reals : fakes).push_back(i);
  }
  // Every anchor needs at least one positive (another real) and one negative.
  if (reals.size() < 2 || fakes.empty()) {
    return {Tensor::scalar(0.0), /*skipped=*/true};
  }

  std::vector<Tensor> rows_cache(labels.size());
  for (std::size_t i : reals) rows_cache[i] = row(pooled, i, tape);
  for (std::size_t i : fakes) rows_cache[i] = row(pooled, i, tape);

  std::vector<Tensor> anchor_losses;
  anchor_losses.reserve(reals.size());
  for (std::size_t a : reals) {
    std::vector<Tensor> pos, neg;
    for (std::size_t p : reals) {
      if (p != a) pos.push_back(euclidean(rows_cache[a], rows_cache[p], tape));
    }
    for (std::size_t nidx : fakes) {
      neg.push_back(euclidean(rows_cache[a], rows_cache[nidx], tape));
    }
    Tensor d_pos = stack_scalars(pos, tape);
    Tensor d_neg = stack_scalars(neg, tape);
    Tensor w_pos = softmax(d_pos, 0, tape);
    Tensor w_neg = softmax(scale(d_neg, -1.0, tape), 0, tape);
    Tensor margin = sub(dot(w_pos, d_pos, tape), dot(w_neg, d_neg, tape), tape);
    anchor_losses.push_back(softplus(margin, tape));
  }
  return {mean_all(stack_scalars(anchor_losses, tape), tape), false};
}

Tensor augmentation_loss(const HeadWeights& head, const Tensor& pooled_aug,
                         const std::vector<int>& labels, Tape& tape) {
  return cross_entropy(classify(head, pooled_aug, tape), labels, tape);
}

Tensor total_loss(const Tensor& ce, const Tensor& tri, const std::optional<Tensor>& aug,
                  const LossWeights& weights, Tape& tape) {
  weights.validate();
  Tensor total = add(ce, scale(tri, weights.gamma_tri, tape), tape);
  if (aug) total = add(total, scale(*aug, weights.gamma_aug, tape), tape);
  return total;
}

}  // namespace gendf
