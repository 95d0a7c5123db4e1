#include "gendf/backbone.hpp"

#include <cmath>

#include "gendf/peft.hpp"
#include "gendf/rng.hpp"

namespace gendf {

namespace {
constexpr double kLayerNormEps = 1e-6;
constexpr double kInitStd = 0.02;
}  // namespace

void BackboneConfig::validate() const {
  if (image_size == 0 || patch_size == 0 || channels == 0 || embed_dim == 0 || num_heads == 0 ||
      num_blocks == 0) {
    throw ConfigError("backbone config: all extents must be positive");
  }
  if (image_size % patch_size != 0) {
    throw ConfigError("backbone config: image size " + std::to_string(image_size) +
                      " not divisible by patch size " + std::to_string(patch_size));
  }
  if (embed_dim % num_heads != 0) {
    throw ConfigError("backbone config: embed dim " + std::to_string(embed_dim) +
                      " not divisible by " + std::to_string(num_heads) + " heads");
  }
  if (mlp_ratio <= 0.0) throw ConfigError("backbone config: mlp_ratio must be positive");
}

BackboneConfig BackboneConfig::desk() { return BackboneConfig{}; }

BackboneConfig BackboneConfig::vit_b16() {
  BackboneConfig c;
  c.image_size = 224;
  c.patch_size = 16;
  c.channels = 3;
  c.embed_dim = 768;
  c.num_heads = 12;
  c.num_blocks = 12;
  c.mlp_ratio = 4.0;
  return c;
}

BackboneWeights BackboneWeights::random_init(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t d = cfg.embed_dim;
  const std::size_t hidden = cfg.mlp_hidden();
  BackboneWeights w;
  w.cfg = cfg;
  const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
  w.patch_proj = Tensor::randn({d, cfg.patch_dim()}, rng, 0.0, w_std);
  // Project each embedding row against the per-channel constant directions.
  // A plain Gaussian projection lets the patch mean dominate token geometry
  // and the per-token norm (which layer norm discards); removing the DC
  // component makes tokens respond to within-patch structure, as learned
  // patch filters do.
  {
    auto rows = w.patch_proj.values_mut();
    const std::size_t pp = cfg.patch_size * cfg.patch_size;
    for (std::size_t r = 0; r < d; ++r) {
      double* row = rows.data() + r * cfg.patch_dim();
      for (std::size_t c = 0; c < cfg.channels; ++c) {
        double mean = 0.0;
        for (std::size_t i = 0; i < pp; ++i) mean += row[c * pp + i];
        mean /= static_cast<double>(pp);
        for (std::size_t i = 0; i < pp; ++i) row[c * pp + i] -= mean;
      }
    }
  }
  w.patch_bias = Tensor::zeros({d});
  w.class_token = Tensor::randn({d}, rng, 0.0, kInitStd);
  w.pos_embed = Tensor::randn({cfg.tokens(), d}, rng, 0.0, kInitStd);
  w.blocks.reserve(cfg.num_blocks);
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    BlockWeights blk;
    blk.ln1_gain = Tensor::full({d}, 1.0);
    blk.ln1_bias = Tensor::zeros({d});
    blk.w_q = Tensor::randn({d, d}, rng, 0.0, w_std);
    blk.w_k = Tensor::randn({d, d}, rng, 0.0, w_std);
    blk.w_v = Tensor::randn({d, d}, rng, 0.0, w_std);
    blk.w_o = Tensor::randn({d, d}, rng, 0.0, w_std);
    blk.ln2_gain = Tensor::full({d}, 1.0);
    blk.ln2_bias = Tensor::zeros({d});
    blk.mlp_fc1 = Tensor::randn({hidden, d}, rng, 0.0, w_std);
    blk.mlp_b1 = Tensor::zeros({hidden});
    blk.mlp_fc2 = Tensor::randn({d, hidden}, rng, 0.0, 1.0 / std::sqrt(static_cast<double>(hidden)));
    blk.mlp_b2 = Tensor::zeros({d});
    w.blocks.push_back(std::move(blk));
  }
  w.final_gain = Tensor::full({d}, 1.0);
  w.final_bias = Tensor::zeros({d});
  // Frozen by construction; nothing here ever enters the trainable set.
  for (Tensor& t : w.all_tensors()) t.set_requires_grad(false);
  return w;
}

std::vector<Tensor> BackboneWeights::all_tensors() const {
  std::vector<Tensor> out = {patch_proj, patch_bias, class_token, pos_embed};
  for (const BlockWeights& b : blocks) {
    out.push_back(b.ln1_gain);
    out.push_back(b.ln1_bias);
    out.push_back(b.w_q);
    out.push_back(b.w_k);
    out.push_back(b.w_v);
    out.push_back(b.w_o);
    out.push_back(b.ln2_gain);
    out.push_back(b.ln2_bias);
    out.push_back(b.mlp_fc1);
    out.push_back(b.mlp_b1);
    out.push_back(b.mlp_fc2);
    out.push_back(b.mlp_b2);
  }
  out.push_back(final_gain);
  out.push_back(final_bias);
  return out;
}

std::uint64_t BackboneWeights::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const Tensor& t : all_tensors()) {
    h = fnv1a64(t.values().data(), t.size() * sizeof(double), h);
  }
  return h;
}

Tensor patchify(const Tensor& images, const BackboneConfig& cfg) {
  cfg.validate();
  if (images.rank() != 4 || images.shape()[1] != cfg.channels ||
      images.shape()[2] != cfg.image_size || images.shape()[3] != cfg.image_size) {
    throw ShapeError("patchify: expected [n x " + std::to_string(cfg.channels) + " x " +
                     std::to_string(cfg.image_size) + " x " + std::to_string(cfg.image_size) +
                     "], got " + shape_str(images.shape()));
  }
  const std::size_t n = images.shape()[0];
  const std::size_t ps = cfg.patch_size;
  const std::size_t grid = cfg.patches_per_side();
  const std::size_t hw = cfg.image_size;
  const std::size_t pd = cfg.patch_dim();
  std::vector<double> out(n * grid * grid * pd);
  const auto img = images.values();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t py = 0; py < grid; ++py) {
      for (std::size_t px = 0; px < grid; ++px) {
        double* dst = out.data() + ((s * grid + py) * grid + px) * pd;
        for (std::size_t c = 0; c < cfg.channels; ++c) {
          for (std::size_t dy = 0; dy < ps; ++dy) {
            const double* src =
                img.data() + ((s * cfg.channels + c) * hw + py * ps + dy) * hw + px * ps;
            double* drow = dst + (c * ps + dy) * ps;
            for (std::size_t dx = 0; dx < ps; ++dx) drow[dx] = src[dx];
          }
        }
      }
    }
  }
  return Tensor::from_values({n, grid * grid, pd}, std::move(out));
}

Tensor self_attention(const Tensor& x, const BlockWeights& w, const BackboneConfig& cfg,
                      const AttentionLora& lora, Tape& tape) {
  if (x.rank() != 3 || x.shape()[2] != cfg.embed_dim) {
    throw ShapeError("self_attention: expected [n x t x " + std::to_string(cfg.embed_dim) +
                     "], got " + shape_str(x.shape()));
  }
  const std::size_t n = x.shape()[0], t = x.shape()[1], d = cfg.embed_dim;
  const std::size_t heads = cfg.num_heads, hd = cfg.head_dim();
  for (const LoraPair* p : {lora.q, lora.k, lora.v}) {
    if (p && p->rank >= d) {
      throw ConfigError("self_attention: lora rank " + std::to_string(p->rank) +
                        " must be below embed dim " + std::to_string(d));
    }
  }

  Tensor q = linear(x, w.w_q, tape);
  if (lora.q) q = add(q, lora_delta(*lora.q, x, tape), tape);
  Tensor k = linear(x, w.w_k, tape);
  if (lora.k) k = add(k, lora_delta(*lora.k, x, tape), tape);
  Tensor v = linear(x, w.w_v, tape);
  if (lora.v) v = add(v, lora_delta(*lora.v, x, tape), tape);

  auto split_heads = [&](const Tensor& m) {
    Tensor r = reshape(m, {n, t, heads, hd}, tape);
    r = permute(r, {0, 2, 1, 3}, tape);  // [n, heads, t, hd]
    return reshape(r, {n * heads, t, hd}, tape);
  };
  Tensor qh = split_heads(q);
  Tensor kh = split_heads(k);
  Tensor vh = split_heads(v);

  Tensor scores = scale(bmm(qh, permute(kh, {0, 2, 1}, tape), tape),
                        1.0 / std::sqrt(static_cast<double>(hd)), tape);
  Tensor attn = softmax(scores, 2, tape);
  Tensor ctx = bmm(attn, vh, tape);  // [n*heads, t, hd]

  Tensor merged = reshape(ctx, {n, heads, t, hd}, tape);
  merged = permute(merged, {0, 2, 1, 3}, tape);
  merged = reshape(merged, {n, t, d}, tape);
  return linear(merged, w.w_o, tape);
}

TokenSequence forward_backbone(const Tensor& images, const BackboneWeights& w,
                               const PeftState* peft, Tape& tape) {
  const BackboneConfig& cfg = w.cfg;
  Tensor patches = patchify(images, cfg);
  Tensor x = add_bias(linear(patches, w.patch_proj, tape), w.patch_bias, tape);
  x = prepend_token(w.class_token, x, tape);
  x = add_tokenwise(x, w.pos_embed, tape);

  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    const BlockWeights& blk = w.blocks[b];
    AttentionLora al;
    if (peft && peft->lora) al = peft->lora->lora_for_block(b);

    Tensor h = self_attention(layer_norm(x, blk.ln1_gain, blk.ln1_bias, kLayerNormEps, tape),
                              blk, cfg, al, tape);
    if (peft && peft->adapter) h = adapter_forward(peft->adapter->post_attn[b], h, tape);
    x = add(x, h, tape);

    Tensor m = layer_norm(x, blk.ln2_gain, blk.ln2_bias, kLayerNormEps, tape);
    m = add_bias(linear(m, blk.mlp_fc1, tape), blk.mlp_b1, tape);
    m = gelu(m, tape);
    m = add_bias(linear(m, blk.mlp_fc2, tape), blk.mlp_b2, tape);
    if (peft && peft->adapter) m = adapter_forward(peft->adapter->post_mlp[b], m, tape);
    x = add(x, m, tape);
  }
  x = layer_norm(x, w.final_gain, w.final_bias, kLayerNormEps, tape);
  return TokenSequence{x};
}

Tensor pool_features(const TokenSequence& tokens, Tape& tape) {
  if (tokens.features.rank() != 3) {
    throw ShapeError("pool_features: expected [n x t x d], got " +
                     shape_str(tokens.features.shape()));
  }
  return mean_axis(tokens.features, 1, tape);
}

}  // namespace gendf
