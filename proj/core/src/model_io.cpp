#include <algorithm>

#include "gendf/harness.hpp"
#include "io_util.hpp"

namespace gendf {

namespace {

constexpr char kMagic[] = "GENDF1";  // 6 bytes, no terminator written
constexpr char kTagPeft[] = "PEFT";
constexpr char kTagFsr[] = "FSR ";
constexpr char kTagHead[] = "HEAD";

void write_tensor(std::string& out, const Tensor& t) {
  io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) {
    io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(e));
  }
  for (double v : t.values()) io::write_pod<double>(out, v);
}

Tensor read_tensor(const std::string& data, std::size_t& off, bool requires_grad) {
  const auto rank = io::read_pod<std::uint32_t>(data, off);
  if (rank == 0 || rank > 8) throw IoError("model file: implausible tensor rank");
  Shape shape(rank);
  for (auto& e : shape) e = io::read_pod<std::uint32_t>(data, off);
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = io::read_pod<double>(data, off);
  return Tensor::from_values(std::move(shape), std::move(values), requires_grad);
}

void write_tag(std::string& out, const char* tag) { out.append(tag, 4); }

bool peek_tag(const std::string& data, std::size_t off, const char* tag) {
  return off + 4 <= data.size() && data.compare(off, 4, tag, 4) == 0;
}

void copy_into(Tensor& dst, const Tensor& src, const char* what) {
  if (dst.shape() != src.shape()) {
    throw IoError(std::string("model file: ") + what + " shape " + shape_str(src.shape()) +
                  " does not match expected " + shape_str(dst.shape()));
  }
  std::copy(src.values().begin(), src.values().end(), dst.values_mut().begin());
}

}  // namespace

void save_model(const Model& model, const std::string& path) {
  std::string out;
  out.append(kMagic, 6);
  const BackboneConfig& bc = model.cfg.backbone;
  for (std::size_t v : {bc.image_size, bc.patch_size, bc.channels, bc.embed_dim, bc.num_heads,
                        bc.num_blocks, bc.mlp_hidden()}) {
    io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  }
  for (const Tensor& t : model.backbone.all_tensors()) write_tensor(out, t);

  if (model.lora) {
    write_tag(out, kTagPeft);
    io::write_pod<std::uint8_t>(out, 0);
    const PeftSettings& s = model.lora->settings;
    io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.targets.size()));
    for (AttentionTarget t : s.targets) {
      io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t));
    }
    io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.rank));
    io::write_pod<double>(out, s.scale);
    io::write_pod<double>(out, s.init_sigma);
    for (std::size_t b = 0; b < model.lora->pairs.size(); ++b) {
      for (AttentionTarget t : s.targets) {
        const LoraPair* pair = model.lora->pair(b, t);
        write_tensor(out, pair->b);
        write_tensor(out, pair->a);
      }
    }
  } else if (model.adapter) {
    write_tag(out, kTagPeft);
    io::write_pod<std::uint8_t>(out, 1);
    io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(model.adapter->bottleneck));
    for (std::size_t b = 0; b < bc.num_blocks; ++b) {
      for (const AdapterWeights* w :
           {&model.adapter->post_attn[b], &model.adapter->post_mlp[b]}) {
        write_tensor(out, w->w_down);
        write_tensor(out, w->b_down);
        write_tensor(out, w->w_up);
        write_tensor(out, w->b_up);
      }
    }
  }

  if (model.modulation) {
    write_tag(out, kTagFsr);
    io::write_pod<std::uint8_t>(out, 0);
    write_tensor(out, model.modulation->theta);
    write_tensor(out, model.modulation->eps);
  } else if (model.linear_modulation) {
    write_tag(out, kTagFsr);
    io::write_pod<std::uint8_t>(out, 1);
    write_tensor(out, model.linear_modulation->w);
    write_tensor(out, model.linear_modulation->b);
  }

  write_tag(out, kTagHead);
  write_tensor(out, model.head.w);
  write_tensor(out, model.head.b);

  io::write_file(path, out);
}

Model load_model(const std::string& path) {
  const std::string data = io::read_file(path);
  std::size_t off = 0;
  if (data.size() < 6 || data.compare(0, 6, kMagic, 6) != 0) {
    throw IoError("model file " + path + ": bad magic");
  }
  off = 6;

  RunConfig cfg;
  cfg.backbone.image_size = io::read_pod<std::uint32_t>(data, off);
  cfg.backbone.patch_size = io::read_pod<std::uint32_t>(data, off);
  cfg.backbone.channels = io::read_pod<std::uint32_t>(data, off);
  cfg.backbone.embed_dim = io::read_pod<std::uint32_t>(data, off);
  cfg.backbone.num_heads = io::read_pod<std::uint32_t>(data, off);
  cfg.backbone.num_blocks = io::read_pod<std::uint32_t>(data, off);
  const auto mlp_hidden = io::read_pod<std::uint32_t>(data, off);
  cfg.backbone.mlp_ratio =
      static_cast<double>(mlp_hidden) / static_cast<double>(cfg.backbone.embed_dim);
  cfg.backbone.validate();
  cfg.peft_mode = PeftMode::None;
  cfg.fsr = false;
  cfg.cifaug = false;

  Model model;
  model.backbone = BackboneWeights::random_init(cfg.backbone, 0);
  for (Tensor t : model.backbone.all_tensors()) {
    Tensor loaded = read_tensor(data, off, false);
    copy_into(t, loaded, "backbone tensor");
  }

  if (peek_tag(data, off, kTagPeft)) {
    off += 4;
    const auto mode = io::read_pod<std::uint8_t>(data, off);
    if (mode == 0) {
      PeftSettings s;
      s.targets.clear();
      const auto n_targets = io::read_pod<std::uint32_t>(data, off);
      for (std::uint32_t i = 0; i < n_targets; ++i) {
        const auto code = io::read_pod<std::uint32_t>(data, off);
        if (code > 2) throw IoError("model file: bad attention target code");
        s.targets.push_back(static_cast<AttentionTarget>(code));
      }
      s.rank = io::read_pod<std::uint32_t>(data, off);
      s.scale = io::read_pod<double>(data, off);
      s.init_sigma = io::read_pod<double>(data, off);
      PeftPlan plan = PeftPlan::build(cfg.backbone, s, 0);
      for (std::size_t b = 0; b < plan.pairs.size(); ++b) {
        for (AttentionTarget t : s.targets) {
          auto& slot = plan.pairs[b][static_cast<std::size_t>(t)];
          Tensor bt = read_tensor(data, off, true);
          Tensor at = read_tensor(data, off, true);
          copy_into(slot->b, bt, "lora B");
          copy_into(slot->a, at, "lora A");
        }
      }
      model.lora = std::move(plan);
      cfg.peft_mode = PeftMode::Dsrl;
      cfg.peft = s;
    } else if (mode == 1) {
      const auto bottleneck = io::read_pod<std::uint32_t>(data, off);
      AdapterStack stack = AdapterStack::build(cfg.backbone, bottleneck, 0);
      for (std::size_t b = 0; b < cfg.backbone.num_blocks; ++b) {
        for (AdapterWeights* w : {&stack.post_attn[b], &stack.post_mlp[b]}) {
          copy_into(w->w_down, read_tensor(data, off, true), "adapter w_down");
          copy_into(w->b_down, read_tensor(data, off, true), "adapter b_down");
          copy_into(w->w_up, read_tensor(data, off, true), "adapter w_up");
          copy_into(w->b_up, read_tensor(data, off, true), "adapter b_up");
        }
      }
      model.adapter = std::move(stack);
      cfg.peft_mode = PeftMode::Adapter;
      cfg.adapter_dim = bottleneck;
    } else {
      throw IoError("model file: unknown PEFT mode");
    }
  }

  if (peek_tag(data, off, kTagFsr)) {
    off += 4;
    const auto mode = io::read_pod<std::uint8_t>(data, off);
    if (mode == 0) {
      ModulationParams p = ModulationParams::identity(cfg.backbone.embed_dim);
      copy_into(p.theta, read_tensor(data, off, true), "fsr theta");
      copy_into(p.eps, read_tensor(data, off, true), "fsr eps");
      model.modulation = std::move(p);
      cfg.fsr = true;
    } else if (mode == 1) {
      LinearModulation p = LinearModulation::init(cfg.backbone.embed_dim, 0);
      copy_into(p.w, read_tensor(data, off, true), "fsr linear w");
      copy_into(p.b, read_tensor(data, off, true), "fsr linear b");
      model.linear_modulation = std::move(p);
      cfg.fsr = true;
      cfg.fsr_linear = true;
    } else {
      throw IoError("model file: unknown FSR mode");
    }
  }

  if (!peek_tag(data, off, kTagHead)) throw IoError("model file: missing HEAD section");
  off += 4;
  model.head = HeadWeights::init(cfg.backbone.embed_dim, 0);
  copy_into(model.head.w, read_tensor(data, off, true), "head w");
  copy_into(model.head.b, read_tensor(data, off, true), "head b");

  if (off != data.size()) throw IoError("model file " + path + ": trailing bytes");
  model.cfg = cfg;
  return model;
}

}  // namespace gendf
