#include "gendf/peft.hpp"

#include <algorithm>

#include "gendf/rng.hpp"

namespace gendf {

const char* target_name(AttentionTarget t) {
  switch (t) {
    case AttentionTarget::Q:
      return "Q";
    case AttentionTarget::K:
      return "K";
    case AttentionTarget::V:
      return "V";
  }
  return "?";
}

LoraPair lora_init(std::size_t dim, std::size_t rank, double scale, double sigma,
                   std::uint64_t seed) {
  if (rank == 0 || rank >= dim) {
    throw ConfigError("lora_init: rank " + std::to_string(rank) + " must be in (0, " +
                      std::to_string(dim) + ")");
  }
  if (sigma <= 0.0) throw ConfigError("lora_init: sigma must be positive");
  Rng rng(seed);
  LoraPair pair;
  pair.b = Tensor::zeros({dim, rank}, /*requires_grad=*/true);
  pair.a = Tensor::randn({rank, dim}, rng, 0.0, sigma, /*requires_grad=*/true);
  pair.rank = rank;
  pair.scale = scale;
  return pair;
}

Tensor lora_delta(const LoraPair& pair, const Tensor& x, Tape& tape) {
  if (x.shape().back() != pair.a.shape()[1]) {
    throw ShapeError("lora_delta: input " + shape_str(x.shape()) + " does not match A " +
                     shape_str(pair.a.shape()));
  }
  Tensor down = linear(x, pair.a, tape);   // [..., r]
  Tensor up = linear(down, pair.b, tape);  // [..., d]
  return scale(up, pair.scale, tape);
}

AdapterWeights adapter_init(std::size_t dim, std::size_t bottleneck, std::uint64_t seed) {
  if (bottleneck == 0 || bottleneck >= dim) {
    throw ConfigError("adapter_init: bottleneck " + std::to_string(bottleneck) +
                      " must be in (0, " + std::to_string(dim) + ")");
  }
  Rng rng(seed);
  AdapterWeights w;
  w.w_down = Tensor::randn({bottleneck, dim}, rng, 0.0, 0.02, /*requires_grad=*/true);
  w.b_down = Tensor::zeros({bottleneck}, /*requires_grad=*/true);
  w.w_up = Tensor::randn({dim, bottleneck}, rng, 0.0, 0.02, /*requires_grad=*/true);
  w.b_up = Tensor::zeros({dim}, /*requires_grad=*/true);
  return w;
}

Tensor adapter_forward(const AdapterWeights& w, const Tensor& x, Tape& tape) {
  if (x.shape().back() != w.w_down.shape()[1]) {
    throw ShapeError("adapter_forward: input " + shape_str(x.shape()) +
                     " does not match down-projection " + shape_str(w.w_down.shape()));
  }
  Tensor h = add_bias(linear(x, w.w_down, tape), w.b_down, tape);
  h = gelu(h, tape);
  h = add_bias(linear(h, w.w_up, tape), w.b_up, tape);
  return add(x, h, tape);  // residual
}

PeftPlan PeftPlan::build(const BackboneConfig& cfg, const PeftSettings& settings,
                         std::uint64_t seed) {
  cfg.validate();
  if (settings.targets.empty()) throw ConfigError("peft plan: no attention targets selected");
  std::vector<AttentionTarget> seen;
  for (AttentionTarget t : settings.targets) {
    if (std::find(seen.begin(), seen.end(), t) != seen.end()) {
      throw ConfigError("peft plan: duplicate attention target");
    }
    seen.push_back(t);
  }
  PeftPlan plan;
  plan.settings = settings;
  plan.pairs.resize(cfg.num_blocks);
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    for (AttentionTarget t : settings.targets) {
      const std::size_t slot = static_cast<std::size_t>(t);
      plan.pairs[b][slot] = lora_init(cfg.embed_dim, settings.rank, settings.scale,
                                      settings.init_sigma, derive_seed(seed, b * 3 + slot + 1));
    }
  }
  return plan;
}

const LoraPair* PeftPlan::pair(std::size_t block, AttentionTarget t) const {
  const auto& slot = pairs.at(block)[static_cast<std::size_t>(t)];
  return slot ? &*slot : nullptr;
}

AttentionLora PeftPlan::lora_for_block(std::size_t block) const {
  AttentionLora al;
  al.q = pair(block, AttentionTarget::Q);
  al.k = pair(block, AttentionTarget::K);
  al.v = pair(block, AttentionTarget::V);
  return al;
}

std::vector<Tensor> PeftPlan::trainable() const {
  std::vector<Tensor> out;
  for (const auto& block : pairs) {
    for (const auto& slot : block) {
      if (slot) {
        out.push_back(slot->b);
        out.push_back(slot->a);
      }
    }
  }
  return out;
}

AdapterStack AdapterStack::build(const BackboneConfig& cfg, std::size_t bottleneck,
                                 std::uint64_t seed) {
  cfg.validate();
  AdapterStack stack;
  stack.bottleneck = bottleneck;
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    stack.post_attn.push_back(adapter_init(cfg.embed_dim, bottleneck, derive_seed(seed, 2 * b)));
    stack.post_mlp.push_back(
        adapter_init(cfg.embed_dim, bottleneck, derive_seed(seed, 2 * b + 1)));
  }
  return stack;
}

std::vector<Tensor> AdapterStack::trainable() const {
  std::vector<Tensor> out;
  for (const auto* side : {&post_attn, &post_mlp}) {
    for (const AdapterWeights& w : *side) {
      out.push_back(w.w_down);
      out.push_back(w.b_down);
      out.push_back(w.w_up);
      out.push_back(w.b_up);
    }
  }
  return out;
}

namespace {

std::size_t extras(const BackboneConfig& cfg, bool include_head, bool include_fsr) {
  std::size_t n = 0;
  if (include_head) n += cfg.embed_dim * 2 + 2;
  if (include_fsr) n += 2 * cfg.embed_dim;
  return n;
}

}  // namespace

std::size_t count_trainable_params(const PeftSettings& settings, const BackboneConfig& cfg,
                                   bool include_head, bool include_fsr) {
  const std::size_t lora =
      settings.targets.size() * cfg.num_blocks * 2 * cfg.embed_dim * settings.rank;
  return lora + extras(cfg, include_head, include_fsr);
}

std::size_t count_trainable_params_adapter(std::size_t bottleneck, const BackboneConfig& cfg,
                                           bool include_head, bool include_fsr) {
  const std::size_t one = cfg.embed_dim * bottleneck + bottleneck +
                          bottleneck * cfg.embed_dim + cfg.embed_dim;
  return 2 * cfg.num_blocks * one + extras(cfg, include_head, include_fsr);
}

}  // namespace gendf
