#include <algorithm>
#include <cmath>
#include <numeric>

#include "gendf/harness.hpp"
#include "io_util.hpp"

namespace gendf {

namespace {

constexpr std::uint64_t kEvalSeedOffset = 5000000;  // clear of train and donor seed ranges

std::vector<int> collect_labels(const Dataset& data, const std::vector<std::size_t>& idx) {
  std::vector<int> labels;
  labels.reserve(idx.size());
  for (std::size_t i : idx) labels.push_back(data.samples[i].label);
  return labels;
}

Tensor batch_images(const Dataset& data, const std::vector<std::size_t>& idx,
                    const std::optional<PerturbationSpec>& pert) {
  const std::size_t pixels = 3 * data.height * data.width;
  std::vector<double> values;
  values.reserve(idx.size() * pixels);
  for (std::size_t i : idx) {
    Tensor img = data.samples[i].image;
    if (pert) img = perturb(img, *pert);
    values.insert(values.end(), img.values().begin(), img.values().end());
  }
  return Tensor::from_values({idx.size(), 3, data.height, data.width}, std::move(values));
}

}  // namespace

Model Model::build(const RunConfig& cfg) {
  cfg.validate();
  const std::uint64_t seed = cfg.model_seed();
  Model m;
  m.cfg = cfg;
  m.backbone = BackboneWeights::random_init(cfg.backbone, derive_seed(seed, 1));
  if (cfg.peft_mode == PeftMode::Dsrl) {
    m.lora = PeftPlan::build(cfg.backbone, cfg.peft, derive_seed(seed, 2));
  } else if (cfg.peft_mode == PeftMode::Adapter) {
    m.adapter = AdapterStack::build(cfg.backbone, cfg.adapter_dim, derive_seed(seed, 3));
  }
  if (cfg.fsr) {
    if (cfg.fsr_linear) {
      m.linear_modulation = LinearModulation::init(cfg.backbone.embed_dim, derive_seed(seed, 6));
    } else {
      m.modulation = ModulationParams::init(cfg.backbone.embed_dim, cfg.fsr_sigma_theta,
                                            cfg.fsr_sigma_eps, derive_seed(seed, 4));
    }
  }
  m.head = HeadWeights::init(cfg.backbone.embed_dim, derive_seed(seed, 5));
  return m;
}

PeftState Model::peft_state() const {
  PeftState ps;
  if (lora) ps.lora = &*lora;
  if (adapter) ps.adapter = &*adapter;
  return ps;
}

std::vector<Tensor> Model::trainable() const {
  std::vector<Tensor> out;
  if (lora) {
    auto t = lora->trainable();
    out.insert(out.end(), t.begin(), t.end());
  }
  if (adapter) {
    auto t = adapter->trainable();
    out.insert(out.end(), t.begin(), t.end());
  }
  if (modulation) {
    auto t = modulation->trainable();
    out.insert(out.end(), t.begin(), t.end());
  }
  if (linear_modulation) {
    auto t = linear_modulation->trainable();
    out.insert(out.end(), t.begin(), t.end());
  }
  auto h = head.trainable();
  out.insert(out.end(), h.begin(), h.end());
  return out;
}

Tensor Model::features(const Tensor& images, Tape& tape) const {
  const PeftState ps = peft_state();
  TokenSequence tokens = forward_backbone(images, backbone, &ps, tape);
  if (modulation) return fsr_apply(*modulation, tokens.features, tape);
  if (linear_modulation) return linear_modulation_apply(*linear_modulation, tokens.features, tape);
  return tokens.features;
}

Tensor Model::probabilities(const Tensor& images, Tape& tape) const {
  Tensor pooled = pool_features(TokenSequence{features(images, tape)}, tape);
  return classify(head, pooled, tape);
}

AdamW::AdamW(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps,
             double weight_decay)
    : params_(std::move(params)),
      lr_(lr),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      weight_decay_(weight_decay) {
  slots_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    slots_[i].m.assign(params_[i].size(), 0.0);
    slots_[i].v.assign(params_[i].size(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor& param = params_[p];
    Slot& slot = slots_[p];
    auto values = param.values_mut();
    const bool has_grad = param.has_grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = has_grad ? param.node()->grad[i] : 0.0;
      slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * g;
      slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * g * g;
      const double mhat = slot.m[i] / bc1;
      const double vhat = slot.v[i] / bc2;
      values[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * values[i]);
    }
  }
}

void AdamW::clear_grads() {
  for (Tensor& p : params_) p.clear_grad();
}

Dataset make_train_data(const RunConfig& cfg) {
  return make_dataset(cfg.data_seed(), cfg.train_size, cfg.backbone.image_size,
                      cfg.backbone.image_size);
}

Dataset make_eval_data(const RunConfig& cfg) {
  return make_dataset(cfg.data_seed() + kEvalSeedOffset, cfg.eval_size, cfg.backbone.image_size,
                      cfg.backbone.image_size);
}

namespace {

struct StepOutput {
  double total = 0.0, ce = 0.0, tri = 0.0;
  std::optional<double> aug;
  bool aug_applied = false;
  Tensor total_tensor;
};

// One forward pass with all loss terms; the augmentation coin and direction
// draws come from aug_rng.
StepOutput forward_losses(const Model& model, const Tensor& images,
                          const std::vector<int>& labels, const AugmentationConfig& aug_cfg,
                          bool cifaug_enabled, Rng& aug_rng, Tape& tape) {
  StepOutput out;
  Tensor feats = model.features(images, tape);
  LabeledFeatures lf = LabeledFeatures::make(feats, labels, tape);
  Tensor probs = classify(model.head, lf.pooled, tape);
  Tensor ce = cross_entropy(probs, labels, tape);
  TripletLoss tri = weighted_triplet(lf.pooled, labels, tape);
  std::optional<Tensor> aug_term;
  if (cifaug_enabled) {
    CifaugResult aug = cifaug_apply(lf, aug_cfg, aug_rng, tape);
    out.aug_applied = aug.applied;
    if (aug.applied) {
      Tensor pooled_aug = mean_axis(aug.features, 1, tape);
      aug_term = augmentation_loss(model.head, pooled_aug, labels, tape);
    }
  }
  out.total_tensor = total_loss(ce, tri.loss, aug_term, model.cfg.loss, tape);
  out.total = out.total_tensor.item();
  out.ce = ce.item();
  out.tri = tri.loss.item();
  if (aug_term) out.aug = aug_term->item();
  return out;
}

void check_term(double value, const char* term, std::size_t step) {
  if (!std::isfinite(value)) {
    throw Error("training aborted at step " + std::to_string(step) + ": " + term +
                " loss is non-finite");
  }
}

}  // namespace

TrainResult train(const RunConfig& cfg, const Dataset& train_data, const Dataset& eval_data,
                  const MetricsSink& sink) {
  cfg.validate();
  bool has_real = false, has_fake = false;
  for (const SyntheticSample& s : train_data.samples) {
    (s.label == 0 ? has_real : has_fake) = true;
  }
  if (!has_real || !has_fake) {
    throw ConfigError("train: dataset must contain both classes");
  }

  TrainResult result;
  result.model = Model::build(cfg);
  Model& model = result.model;
  const std::uint64_t digest_before = model.backbone.digest();
  const std::string cfg_digest = cfg.digest();

  AdamW opt(model.trainable(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  Rng order_rng(derive_seed(cfg.data_seed(), 0xba7c));
  Rng aug_rng(cfg.aug_seed());

  auto emit = [&](MetricsRecord rec) {
    rec.config_digest = cfg_digest;
    if (sink) sink(rec);
    result.records.push_back(std::move(rec));
  };

  std::vector<std::size_t> order(train_data.samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();  // force a shuffle on first use
  std::size_t applied_count = 0;

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::vector<std::size_t> batch_idx;
    batch_idx.reserve(cfg.batch);
    while (batch_idx.size() < cfg.batch) {
      if (cursor >= order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) {
          std::swap(order[i - 1], order[order_rng.uniform_index(i)]);
        }
        cursor = 0;
      }
      batch_idx.push_back(order[cursor++]);
    }

    Tensor images = batch_images(train_data, batch_idx, {});
    const std::vector<int> labels = collect_labels(train_data, batch_idx);

    Tape tape;
    StepOutput losses;
    try {
      losses = forward_losses(model, images, labels, cfg.aug, cfg.cifaug, aug_rng, tape);
    } catch (const NumericError& e) {
      throw Error("training aborted at step " + std::to_string(step) + ": " + e.what());
    }
    check_term(losses.ce, "cross-entropy", step);
    check_term(losses.tri, "triplet", step);
    if (losses.aug) check_term(*losses.aug, "augmentation", step);
    check_term(losses.total, "total", step);
    if (losses.aug_applied) ++applied_count;

    backward(losses.total_tensor, tape);
    opt.step();
    opt.clear_grads();

    if (step % cfg.log_every == 0 || step == cfg.steps) {
      MetricsRecord rec;
      rec.step = step;
      rec.split = "train";
      rec.loss_total = losses.total;
      rec.loss_ce = losses.ce;
      rec.loss_tri = losses.tri;
      if (losses.aug) rec.loss_aug = *losses.aug;
      emit(std::move(rec));
    }
    if (step % cfg.eval_every == 0 && step != cfg.steps) {
      MetricsRecord rec = evaluate(model, eval_data, {}, cfg.batch);
      rec.step = step;
      emit(std::move(rec));
    }
  }

  if (model.backbone.digest() != digest_before) {
    throw Error("frozen backbone weights changed during training");
  }

  MetricsRecord final_rec = evaluate(model, eval_data, {}, cfg.batch);
  final_rec.step = cfg.steps;
  result.aug_applied_rate =
      cfg.steps == 0 ? 0.0
                     : static_cast<double>(applied_count) / static_cast<double>(cfg.steps);
  if (cfg.cifaug && cfg.steps > 0) final_rec.aug_applied_rate = result.aug_applied_rate;
  result.final_auc = final_rec.auc_value.value_or(0.0);
  emit(std::move(final_rec));
  return result;
}

MetricsRecord evaluate(const Model& model, const Dataset& data,
                       const std::optional<PerturbationSpec>& perturbation, std::size_t chunk) {
  if (data.samples.empty()) throw ConfigError("evaluate: empty dataset");
  if (chunk == 0) chunk = 64;
  ScoreSet scores;
  scores.scores.reserve(data.samples.size());
  scores.labels.reserve(data.samples.size());
  std::vector<std::size_t> idx;
  for (std::size_t base = 0; base < data.samples.size(); base += chunk) {
    idx.clear();
    for (std::size_t i = base; i < std::min(base + chunk, data.samples.size()); ++i) {
      idx.push_back(i);
    }
    Tensor images = batch_images(data, idx, perturbation);
    Tape tape;  // discarded; evaluation never runs backward
    Tensor probs = model.probabilities(images, tape);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      scores.scores.push_back(probs.at({r, 1}));
      scores.labels.push_back(data.samples[idx[r]].label);
    }
  }
  const bool both = std::find(scores.labels.begin(), scores.labels.end(), 0) !=
                        scores.labels.end() &&
                    std::find(scores.labels.begin(), scores.labels.end(), 1) !=
                        scores.labels.end();
  MetricsRecord rec;
  rec.split = "eval";
  if (perturbation) rec.perturbation = perturbation->str();
  rec.acc = accuracy(scores);
  if (both) {
    rec.auc_value = auc(scores);
    rec.eer_value = eer(scores);
  }
  rec.config_digest = model.cfg.digest();
  return rec;
}

namespace {

struct Variant {
  std::string name;
  RunConfig cfg;
};

std::vector<Variant> grid_variants(const RunConfig& base, const std::string& grid,
                                   std::string* warning) {
  std::vector<Variant> out;
  if (grid == "components") {
    auto with = [&](const char* name, PeftMode mode, bool fsr_on, bool cifaug_on) {
      RunConfig c = base;
      c.peft_mode = mode;
      c.fsr = fsr_on;
      c.cifaug = cifaug_on;
      out.push_back({name, c});
    };
    with("head-only", PeftMode::None, false, false);
    with("fsr+cifaug", PeftMode::None, true, true);
    with("dsrl+cifaug", PeftMode::Dsrl, false, true);
    with("dsrl+fsr", PeftMode::Dsrl, true, false);
    with("full", PeftMode::Dsrl, true, true);
  } else if (grid == "qkv-targets") {
    using T = AttentionTarget;
    const std::vector<std::pair<std::string, std::vector<T>>> schemes = {
        {"q", {T::Q}},        {"k", {T::K}},        {"v", {T::V}},
        {"qk", {T::Q, T::K}}, {"kv", {T::K, T::V}}, {"qkv", {T::Q, T::K, T::V}},
        {"qv", {T::Q, T::V}},
    };
    for (const auto& [name, targets] : schemes) {
      RunConfig c = base;
      c.peft_mode = PeftMode::Dsrl;
      c.peft.targets = targets;
      out.push_back({name, c});
    }
  } else if (grid == "rank") {
    for (std::size_t r : {4, 8, 16, 64}) {
      if (r >= base.backbone.embed_dim) {
        if (warning) {
          *warning += "rank " + std::to_string(r) + " skipped (embed_dim " +
                      std::to_string(base.backbone.embed_dim) + " too small); ";
        }
        continue;
      }
      RunConfig c = base;
      c.peft_mode = PeftMode::Dsrl;
      c.peft.rank = r;
      out.push_back({"r" + std::to_string(r), c});
    }
  } else if (grid == "fsr-vs-linear") {
    RunConfig affine = base;
    affine.fsr = true;
    affine.fsr_linear = false;
    out.push_back({"fsr", affine});
    RunConfig lin = base;
    lin.fsr = true;
    lin.fsr_linear = true;
    out.push_back({"linear", lin});
  } else {
    throw ConfigError("unknown ablation grid '" + grid + "'");
  }
  return out;
}

}  // namespace

std::vector<MetricsRecord> ablate(const RunConfig& base, const std::string& grid,
                                  std::size_t repetitions, const Dataset& train_data,
                                  const Dataset& eval_data, const MetricsSink& sink) {
  if (repetitions == 0) repetitions = 1;
  std::string warning;
  const std::vector<Variant> variants = grid_variants(base, grid, &warning);
  std::vector<MetricsRecord> rows;
  for (const Variant& v : variants) {
    for (std::size_t rep = 0; rep < repetitions; ++rep) {
      RunConfig cfg = v.cfg;
      cfg.master_seed = base.master_seed + rep;
      cfg.model_seed_override.reset();
      cfg.data_seed_override.reset();
      cfg.aug_seed_override.reset();
      TrainResult res = train(cfg, train_data, eval_data);
      MetricsRecord rec = res.records.back();
      rec.variant = v.name;
      rec.seed = cfg.master_seed;
      rows.push_back(rec);
      if (sink) sink(rows.back());
    }
  }
  if (!warning.empty() && sink) {
    MetricsRecord note;
    note.split = "note";
    note.variant = warning;
    sink(note);
  }
  return rows;
}

GradCheckReport gradcheck(const RunConfig& cfg, double h) {
  RunConfig check_cfg = cfg;
  check_cfg.validate();
  Model model = Model::build(check_cfg);

  // Fixed 4-sample batch, two per class.
  Dataset batch_data = make_dataset(check_cfg.data_seed(), 4, check_cfg.backbone.image_size,
                                    check_cfg.backbone.image_size);
  std::vector<std::size_t> idx = {0, 1, 2, 3};
  Tensor images = batch_images(batch_data, idx, {});
  std::vector<int> labels = collect_labels(batch_data, idx);

  struct Group {
    std::string name;
    std::vector<Tensor> params;
  };
  std::vector<Group> groups;
  if (model.lora) {
    Group b{"lora_b", {}}, a{"lora_a", {}};
    for (const auto& block : model.lora->pairs) {
      for (const auto& slot : block) {
        if (slot) {
          b.params.push_back(slot->b);
          a.params.push_back(slot->a);
        }
      }
    }
    groups.push_back(std::move(b));
    groups.push_back(std::move(a));
  }
  if (model.adapter) {
    groups.push_back({"adapter", model.adapter->trainable()});
  }
  if (model.modulation) {
    groups.push_back({"fsr_theta", {model.modulation->theta}});
    groups.push_back({"fsr_eps", {model.modulation->eps}});
  }
  if (model.linear_modulation) {
    groups.push_back({"fsr_linear", model.linear_modulation->trainable()});
  }
  groups.push_back({"head", model.head.trainable()});

  const std::uint64_t aug_seed = check_cfg.aug_seed();
  auto loss_fn = [&](bool force_aug) {
    return [&, force_aug](Tape& tape) {
      AugmentationConfig aug_cfg = check_cfg.aug;
      aug_cfg.activation_probability = force_aug ? 1.0 : 0.0;
      Rng rng(aug_seed);  // identical draws on every invocation
      StepOutput out = forward_losses(model, images, labels, aug_cfg, force_aug, rng, tape);
      return out.total_tensor;
    };
  };

  GradCheckReport report;
  for (Group& g : groups) {
    GradCheckGroup row;
    row.name = g.name;
    for (const Tensor& p : g.params) row.param_count += p.size();
    row.max_rel_err = finite_difference_check(loss_fn(false), g.params, h);
    if (check_cfg.cifaug) {
      row.max_rel_err =
          std::max(row.max_rel_err, finite_difference_check(loss_fn(true), g.params, h));
    }
    report.worst = std::max(report.worst, row.max_rel_err);
    report.groups.push_back(std::move(row));
  }
  return report;
}

void export_features(const Model& model, const Dataset& data, const std::string& path) {
  const std::size_t dim = model.cfg.backbone.embed_dim;
  std::string out;
  io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(data.samples.size()));
  io::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(dim));
  std::vector<std::size_t> idx;
  std::string labels;
  for (std::size_t base = 0; base < data.samples.size(); base += 64) {
    idx.clear();
    for (std::size_t i = base; i < std::min(base + 64, data.samples.size()); ++i) {
      idx.push_back(i);
    }
    Tensor images = batch_images(data, idx, {});
    Tape tape;
    Tensor pooled = pool_features(TokenSequence{model.features(images, tape)}, tape);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t j = 0; j < dim; ++j) io::write_pod<double>(out, pooled.at({r, j}));
      labels.push_back(static_cast<char>(data.samples[idx[r]].label));
    }
  }
  out += labels;
  try {
    io::write_file(path, out);
  } catch (const IoError& e) {
    throw IoError("export_features: " + std::string(e.what()));
  }
}

FeatureDump read_feature_dump(const std::string& path) {
  const std::string data = io::read_file(path);
  std::size_t off = 0;
  const auto n = io::read_pod<std::uint32_t>(data, off);
  const auto d = io::read_pod<std::uint32_t>(data, off);
  FeatureDump dump;
  dump.dim = d;
  dump.features.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    dump.features[i].resize(d);
    for (std::uint32_t j = 0; j < d; ++j) dump.features[i][j] = io::read_pod<double>(data, off);
  }
  for (std::uint32_t i = 0; i < n; ++i) {
    dump.labels.push_back(io::read_pod<std::uint8_t>(data, off));
  }
  if (off != data.size()) throw IoError("trailing bytes in feature dump " + path);
  return dump;
}

}  // namespace gendf
