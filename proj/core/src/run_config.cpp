#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "gendf/harness.hpp"

namespace gendf {

const char* peft_mode_name(PeftMode m) {
  switch (m) {
    case PeftMode::Dsrl:
      return "dsrl";
    case PeftMode::Adapter:
      return "adapter";
    case PeftMode::None:
      return "none";
  }
  return "?";
}

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

bool parse_bool(const std::string& key, const std::string& value) {
  const std::string v = lower(value);
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + value + "'");
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const std::uint64_t v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + value + "'");
  }
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  return static_cast<std::size_t>(parse_u64(key, value));
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + value + "'");
  }
}

PeftMode parse_mode(const std::string& key, const std::string& value) {
  const std::string v = lower(value);
  if (v == "dsrl" || v == "lora") return PeftMode::Dsrl;
  if (v == "adapter") return PeftMode::Adapter;
  if (v == "none") return PeftMode::None;
  throw ConfigError("config key '" + key + "': expected dsrl|adapter|none, got '" + value + "'");
}

std::vector<AttentionTarget> parse_targets(const std::string& key, const std::string& value) {
  std::vector<AttentionTarget> out;
  for (char c : value) {
    switch (std::tolower(static_cast<unsigned char>(c))) {
      case 'q':
        out.push_back(AttentionTarget::Q);
        break;
      case 'k':
        out.push_back(AttentionTarget::K);
        break;
      case 'v':
        out.push_back(AttentionTarget::V);
        break;
      case ',':
      case ' ':
        break;
      default:
        throw ConfigError("config key '" + key + "': expected letters from {q,k,v}, got '" +
                          value + "'");
    }
  }
  if (out.empty()) {
    throw ConfigError("config key '" + key + "': at least one target required");
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string fmt_targets(const std::vector<AttentionTarget>& targets) {
  std::string out;
  for (AttentionTarget t : targets) out += lower(target_name(t));
  return out;
}

}  // namespace

std::uint64_t RunConfig::model_seed() const {
  return model_seed_override ? *model_seed_override : derive_seed(master_seed, 1);
}

std::uint64_t RunConfig::data_seed() const {
  return data_seed_override ? *data_seed_override : derive_seed(master_seed, 2);
}

std::uint64_t RunConfig::aug_seed() const {
  return aug_seed_override ? *aug_seed_override : derive_seed(master_seed, 3);
}

void RunConfig::validate() const {
  backbone.validate();
  aug.validate();
  loss.validate();
  if (peft_mode == PeftMode::Dsrl) {
    if (peft.targets.empty()) throw ConfigError("config: no attention targets selected");
    if (peft.rank == 0 || peft.rank >= backbone.embed_dim) {
      throw ConfigError("config: lora rank must be in (0, embed_dim)");
    }
  }
  if (peft_mode == PeftMode::Adapter &&
      (adapter_dim == 0 || adapter_dim >= backbone.embed_dim)) {
    throw ConfigError("config: adapter dim must be in (0, embed_dim)");
  }
  if (fsr_sigma_theta < 0.0 || fsr_sigma_eps < 0.0) {
    throw ConfigError("config: modulation sigmas must be nonnegative");
  }
  if (lr <= 0.0) throw ConfigError("config: learning rate must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw ConfigError("config: adam betas must lie in [0, 1)");
  }
  if (weight_decay < 0.0) throw ConfigError("config: weight decay must be nonnegative");
  if (adam_eps <= 0.0) throw ConfigError("config: adam eps must be positive");
  if (batch < 1) throw ConfigError("config: batch size must be positive");
  if (train_size < 2 || eval_size < 2) {
    throw ConfigError("config: datasets need at least two samples");
  }
  if (log_every == 0 || eval_every == 0) {
    throw ConfigError("config: log/eval cadence must be positive");
  }
}

void RunConfig::set(const std::string& raw_key, const std::string& raw_value) {
  const std::string key = trim(raw_key);
  const std::string value = trim(raw_value);
  if (key == "backbone.image_size") backbone.image_size = parse_size(key, value);
  else if (key == "backbone.patch_size") backbone.patch_size = parse_size(key, value);
  else if (key == "backbone.channels") backbone.channels = parse_size(key, value);
  else if (key == "backbone.embed_dim") backbone.embed_dim = parse_size(key, value);
  else if (key == "backbone.num_heads") backbone.num_heads = parse_size(key, value);
  else if (key == "backbone.num_blocks") backbone.num_blocks = parse_size(key, value);
  else if (key == "backbone.mlp_ratio") backbone.mlp_ratio = parse_double(key, value);
  else if (key == "peft.mode") peft_mode = parse_mode(key, value);
  else if (key == "peft.targets") peft.targets = parse_targets(key, value);
  else if (key == "peft.rank") peft.rank = parse_size(key, value);
  else if (key == "peft.scale") peft.scale = parse_double(key, value);
  else if (key == "peft.sigma") peft.init_sigma = parse_double(key, value);
  else if (key == "peft.adapter_dim") adapter_dim = parse_size(key, value);
  else if (key == "fsr.enabled") fsr = parse_bool(key, value);
  else if (key == "fsr.linear") fsr_linear = parse_bool(key, value);
  else if (key == "fsr.sigma_theta") fsr_sigma_theta = parse_double(key, value);
  else if (key == "fsr.sigma_eps") fsr_sigma_eps = parse_double(key, value);
  else if (key == "cifaug.enabled") cifaug = parse_bool(key, value);
  else if (key == "cifaug.sigma") aug.sigma_aug = parse_double(key, value);
  else if (key == "cifaug.probability") aug.activation_probability = parse_double(key, value);
  else if (key == "loss.gamma_tri") loss.gamma_tri = parse_double(key, value);
  else if (key == "loss.gamma_aug") loss.gamma_aug = parse_double(key, value);
  else if (key == "opt.lr") lr = parse_double(key, value);
  else if (key == "opt.beta1") beta1 = parse_double(key, value);
  else if (key == "opt.beta2") beta2 = parse_double(key, value);
  else if (key == "opt.weight_decay") weight_decay = parse_double(key, value);
  else if (key == "opt.eps") adam_eps = parse_double(key, value);
  else if (key == "train.batch") batch = parse_size(key, value);
  else if (key == "train.steps") steps = parse_size(key, value);
  else if (key == "train.log_every") log_every = parse_size(key, value);
  else if (key == "train.eval_every") eval_every = parse_size(key, value);
  else if (key == "data.train_size") train_size = parse_size(key, value);
  else if (key == "data.eval_size") eval_size = parse_size(key, value);
  else if (key == "seed.master") master_seed = parse_u64(key, value);
  else if (key == "seed.model") model_seed_override = parse_u64(key, value);
  else if (key == "seed.data") data_seed_override = parse_u64(key, value);
  else if (key == "seed.aug") aug_seed_override = parse_u64(key, value);
  else throw ConfigError("unknown config key '" + key + "'");
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file " + path);
  RunConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const std::string stripped = trim(line.substr(0, line.find('#')));
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    cfg.set(stripped.substr(0, eq), stripped.substr(eq + 1));
  }
  return cfg;
}

std::string RunConfig::canonical_text() const {
  std::ostringstream out;
  out << "backbone.image_size = " << backbone.image_size << "\n";
  out << "backbone.patch_size = " << backbone.patch_size << "\n";
  out << "backbone.channels = " << backbone.channels << "\n";
  out << "backbone.embed_dim = " << backbone.embed_dim << "\n";
  out << "backbone.num_heads = " << backbone.num_heads << "\n";
  out << "backbone.num_blocks = " << backbone.num_blocks << "\n";
  out << "backbone.mlp_ratio = " << fmt(backbone.mlp_ratio) << "\n";
  out << "peft.mode = " << peft_mode_name(peft_mode) << "\n";
  out << "peft.targets = " << fmt_targets(peft.targets) << "\n";
  out << "peft.rank = " << peft.rank << "\n";
  out << "peft.scale = " << fmt(peft.scale) << "\n";
  out << "peft.sigma = " << fmt(peft.init_sigma) << "\n";
  out << "peft.adapter_dim = " << adapter_dim << "\n";
  out << "fsr.enabled = " << (fsr ? "true" : "false") << "\n";
  out << "fsr.linear = " << (fsr_linear ? "true" : "false") << "\n";
  out << "fsr.sigma_theta = " << fmt(fsr_sigma_theta) << "\n";
  out << "fsr.sigma_eps = " << fmt(fsr_sigma_eps) << "\n";
  out << "cifaug.enabled = " << (cifaug ? "true" : "false") << "\n";
  out << "cifaug.sigma = " << fmt(aug.sigma_aug) << "\n";
  out << "cifaug.probability = " << fmt(aug.activation_probability) << "\n";
  out << "loss.gamma_tri = " << fmt(loss.gamma_tri) << "\n";
  out << "loss.gamma_aug = " << fmt(loss.gamma_aug) << "\n";
  out << "opt.lr = " << fmt(lr) << "\n";
  out << "opt.beta1 = " << fmt(beta1) << "\n";
  out << "opt.beta2 = " << fmt(beta2) << "\n";
  out << "opt.weight_decay = " << fmt(weight_decay) << "\n";
  out << "opt.eps = " << fmt(adam_eps) << "\n";
  out << "train.batch = " << batch << "\n";
  out << "train.steps = " << steps << "\n";
  out << "train.log_every = " << log_every << "\n";
  out << "train.eval_every = " << eval_every << "\n";
  out << "data.train_size = " << train_size << "\n";
  out << "data.eval_size = " << eval_size << "\n";
  out << "seed.master = " << master_seed << "\n";
  out << "seed.model = " << model_seed() << "\n";
  out << "seed.data = " << data_seed() << "\n";
  out << "seed.aug = " << aug_seed() << "\n";
  return out.str();
}

std::string RunConfig::digest() const {
  const std::string text = canonical_text();
  return hex64(fnv1a64(text.data(), text.size()));
}

namespace {

void append_json_string(std::string& out, const std::string& key, const std::string& value,
                        bool& first) {
  if (!first) out += ',';
  first = false;
  out += '"';
  out += key;
  out += "\":\"";
  for (char c : value) {
    if (c == '"' || c == '\\') {
      out += '\\';
      out += c;
    } else if (static_cast<unsigned char>(c) < 0x20) {
      char buf[8];
      std::snprintf(buf, sizeof(buf), "\\u%04x", c);
      out += buf;
    } else {
      out += c;
    }
  }
  out += '"';
}

void append_json_number(std::string& out, const std::string& key, double value, bool& first) {
  if (!first) out += ',';
  first = false;
  out += '"';
  out += key;
  out += "\":";
  out += fmt(value);
}

void append_json_integer(std::string& out, const std::string& key, std::uint64_t value,
                         bool& first) {
  if (!first) out += ',';
  first = false;
  out += '"';
  out += key;
  out += "\":";
  out += std::to_string(value);
}

}  // namespace

std::string MetricsRecord::to_json_line() const {
  std::string out = "{";
  bool first = true;
  append_json_integer(out, "step", step, first);
  append_json_string(out, "split", split, first);
  if (!variant.empty()) append_json_string(out, "variant", variant, first);
  if (seed) append_json_integer(out, "seed", *seed, first);
  if (!perturbation.empty()) append_json_string(out, "perturbation", perturbation, first);
  if (acc) append_json_number(out, "acc", *acc, first);
  if (auc_value) append_json_number(out, "auc", *auc_value, first);
  if (eer_value) append_json_number(out, "eer", *eer_value, first);
  if (loss_total) append_json_number(out, "loss_total", *loss_total, first);
  if (loss_ce) append_json_number(out, "loss_ce", *loss_ce, first);
  if (loss_tri) append_json_number(out, "loss_tri", *loss_tri, first);
  if (loss_aug) append_json_number(out, "loss_aug", *loss_aug, first);
  if (aug_applied_rate) append_json_number(out, "aug_applied_rate", *aug_applied_rate, first);
  if (!config_digest.empty()) append_json_string(out, "config", config_digest, first);
  out += "}";
  return out;
}

}  // namespace gendf
