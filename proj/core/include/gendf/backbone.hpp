#pragma once

#include <cstdint>
#include <vector>

#include "gendf/tensor.hpp"

namespace gendf {

struct AttentionLora;
struct PeftState;

struct BackboneConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t embed_dim = 64;
  std::size_t num_heads = 4;
  std::size_t num_blocks = 2;
  double mlp_ratio = 4.0;

  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
  std::size_t tokens() const { return num_patches() + 1; }  // + class token
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t mlp_hidden() const {
    return static_cast<std::size_t>(mlp_ratio * static_cast<double>(embed_dim));
  }

  void validate() const;

  // Small config used throughout the test and training harness.
  static BackboneConfig desk();
  // ViT-B/16 shape; constructed only for parameter accounting.
  static BackboneConfig vit_b16();
};

struct BlockWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor w_q, w_k, w_v, w_o;  // square [d x d], no biases
  Tensor ln2_gain, ln2_bias;
  Tensor mlp_fc1, mlp_b1;  // [hidden x d], [hidden]
  Tensor mlp_fc2, mlp_b2;  // [d x hidden], [d]
};

// The frozen encoder. Every tensor here has requires_grad = false and must be
// bit-identical before and after any training run.
struct BackboneWeights {
  BackboneConfig cfg;
  Tensor patch_proj;   // [d x patch_dim]
  Tensor patch_bias;   // [d]
  Tensor class_token;  // [d]
  Tensor pos_embed;    // [tokens x d]
  std::vector<BlockWeights> blocks;
  // Final encoder norm, frozen at identity affine. Without it the random-init
  // encoder emits near-constant pooled features and nothing downstream can
  // train at the reference learning rate.
  Tensor final_gain, final_bias;

  // Seeded Gaussian init (std 0.02) standing in for pretrained weights;
  // layer-norm gains start at 1 and biases at 0.
  static BackboneWeights random_init(const BackboneConfig& cfg, std::uint64_t seed);

  std::vector<Tensor> all_tensors() const;  // declaration order
  std::uint64_t digest() const;             // byte-level, over values only
};

struct TokenSequence {
  Tensor features;  // [n x tokens x d]
};

// [n x c x h x w] -> [n x (tokens-1) x patch_dim]; patches in row-major patch
// order, each flattened channel-major. Images carry no gradient.
Tensor patchify(const Tensor& images, const BackboneConfig& cfg);

// Multi-head scaled dot-product attention with optional additive low-rank
// deltas on the Q/K/V projections (applied before head-splitting).
Tensor self_attention(const Tensor& x, const BlockWeights& w, const BackboneConfig& cfg,
                      const AttentionLora& lora, Tape& tape);

TokenSequence forward_backbone(const Tensor& images, const BackboneWeights& w,
                               const PeftState* peft, Tape& tape);

// Mean over all tokens, class token included.
Tensor pool_features(const TokenSequence& tokens, Tape& tape);

}  // namespace gendf
