#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "gendf/backbone.hpp"
#include "gendf/tensor.hpp"

namespace gendf {

enum class AttentionTarget { Q = 0, K = 1, V = 2 };

const char* target_name(AttentionTarget t);

// Trainable low-rank factors for one projection: delta(x) = scale * (x A^T) B^T.
// B starts at zero so the delta is exactly zero at initialization.
struct LoraPair {
  Tensor b;  // [d x r]
  Tensor a;  // [r x d]
  std::size_t rank = 0;
  double scale = 1.0;
};

LoraPair lora_init(std::size_t dim, std::size_t rank, double scale, double sigma,
                   std::uint64_t seed);
Tensor lora_delta(const LoraPair& pair, const Tensor& x, Tape& tape);

// Optional per-projection deltas consulted by self_attention.
struct AttentionLora {
  const LoraPair* q = nullptr;
  const LoraPair* k = nullptr;
  const LoraPair* v = nullptr;
};

// Bottleneck adapter: x + W_up^T gelu(W_down^T x + b_down) + b_up.
struct AdapterWeights {
  Tensor w_down;  // [d' x d]
  Tensor b_down;  // [d']
  Tensor w_up;    // [d x d']
  Tensor b_up;    // [d]
};

AdapterWeights adapter_init(std::size_t dim, std::size_t bottleneck, std::uint64_t seed);
Tensor adapter_forward(const AdapterWeights& w, const Tensor& x, Tape& tape);

// Which projections receive low-rank deltas, and at what rank/scale. The
// default scheme adapts Q and V only.
struct PeftSettings {
  std::vector<AttentionTarget> targets = {AttentionTarget::Q, AttentionTarget::V};
  std::size_t rank = 8;
  double scale = 4.0;
  double init_sigma = 0.01;
};

struct PeftPlan {
  PeftSettings settings;
  // pairs[block][target]; one pair per (block, target), never shared.
  std::vector<std::array<std::optional<LoraPair>, 3>> pairs;

  static PeftPlan build(const BackboneConfig& cfg, const PeftSettings& settings,
                        std::uint64_t seed);

  const LoraPair* pair(std::size_t block, AttentionTarget t) const;
  AttentionLora lora_for_block(std::size_t block) const;
  std::vector<Tensor> trainable() const;
};

// Two adapters per block: one after attention, one after the MLP.
struct AdapterStack {
  std::size_t bottleneck = 64;
  std::vector<AdapterWeights> post_attn;
  std::vector<AdapterWeights> post_mlp;

  static AdapterStack build(const BackboneConfig& cfg, std::size_t bottleneck,
                            std::uint64_t seed);
  std::vector<Tensor> trainable() const;
};

struct PeftState {
  const PeftPlan* lora = nullptr;
  const AdapterStack* adapter = nullptr;
};

// |targets| * blocks * 2 * d * r (+ head: 2d + 2, + fsr: 2d).
std::size_t count_trainable_params(const PeftSettings& settings, const BackboneConfig& cfg,
                                   bool include_head, bool include_fsr);
// 2 * blocks * (d*d' + d' + d'*d + d) (+ head, + fsr as above).
std::size_t count_trainable_params_adapter(std::size_t bottleneck, const BackboneConfig& cfg,
                                           bool include_head, bool include_fsr);

}  // namespace gendf
