#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gendf/backbone.hpp"
#include "gendf/features.hpp"
#include "gendf/objectives.hpp"
#include "gendf/peft.hpp"
#include "gendf/synthbench.hpp"

namespace gendf {

enum class PeftMode { Dsrl, Adapter, None };

const char* peft_mode_name(PeftMode m);

// One experiment definition. Defaults reproduce the reference recipe at desk
// scale: rank 8, delta scale 4, lr 3e-4, gamma 0.2/0.2, sigma 0.02,
// activation probability 0.5.
struct RunConfig {
  BackboneConfig backbone = BackboneConfig::desk();

  PeftMode peft_mode = PeftMode::Dsrl;
  PeftSettings peft;
  std::size_t adapter_dim = 64;

  bool fsr = true;
  bool fsr_linear = false;  // replace the affine modulation by a dense layer
  double fsr_sigma_theta = 0.02;
  double fsr_sigma_eps = 0.02;

  bool cifaug = true;
  AugmentationConfig aug;

  LossWeights loss;

  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double adam_eps = 1e-8;

  std::size_t batch = 32;
  std::size_t steps = 300;
  std::size_t log_every = 10;
  std::size_t eval_every = 100;

  std::size_t train_size = 512;
  std::size_t eval_size = 256;

  std::uint64_t master_seed = 7;
  std::optional<std::uint64_t> model_seed_override;
  std::optional<std::uint64_t> data_seed_override;
  std::optional<std::uint64_t> aug_seed_override;

  std::uint64_t model_seed() const;
  std::uint64_t data_seed() const;
  std::uint64_t aug_seed() const;

  void validate() const;
  // Sets one flat "key = value" entry; throws ConfigError on unknown keys.
  void set(const std::string& key, const std::string& value);
  static RunConfig from_file(const std::string& path);
  // Canonical flat key=value rendering; the config digest hashes this.
  std::string canonical_text() const;
  std::string digest() const;
};

struct MetricsRecord {
  std::size_t step = 0;
  std::string split;    // "train" or "eval"
  std::string variant;  // ablation variant, when applicable
  std::optional<std::uint64_t> seed;
  std::string perturbation;
  std::optional<double> acc;
  std::optional<double> auc_value;
  std::optional<double> eer_value;
  std::optional<double> loss_total, loss_ce, loss_tri, loss_aug;
  std::optional<double> aug_applied_rate;
  std::string config_digest;

  // Deterministic serialization: fixed key order, shortest round-trip floats,
  // absent fields omitted.
  std::string to_json_line() const;
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

// The assembled detector: frozen encoder, optional low-rank/adapter state,
// optional feature modulation, classification head.
struct Model {
  RunConfig cfg;
  BackboneWeights backbone;
  std::optional<PeftPlan> lora;
  std::optional<AdapterStack> adapter;
  std::optional<ModulationParams> modulation;
  std::optional<LinearModulation> linear_modulation;
  HeadWeights head;

  static Model build(const RunConfig& cfg);

  PeftState peft_state() const;
  // Exactly the parameters the component switches declare trainable.
  std::vector<Tensor> trainable() const;
  // images -> modulated token features [n x t x d].
  Tensor features(const Tensor& images, Tape& tape) const;
  // Evaluation path: no augmentation anywhere.
  Tensor probabilities(const Tensor& images, Tape& tape) const;
};

class AdamW {
 public:
  AdamW(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps,
        double weight_decay);
  // Decoupled update; a parameter with no grad this step is treated as
  // zero-gradient.
  void step();
  void clear_grads();
  std::size_t steps_taken() const { return t_; }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  std::vector<Tensor> params_;
  std::vector<Slot> slots_;
  double lr_, beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
};

Dataset make_train_data(const RunConfig& cfg);
Dataset make_eval_data(const RunConfig& cfg);

struct TrainResult {
  Model model;
  std::vector<MetricsRecord> records;
  double final_auc = 0.0;
  double aug_applied_rate = 0.0;
};

// Full training loop: forward -> losses -> backward -> AdamW on exactly the
// trainable set. Deterministic given the config seeds; verifies the frozen
// backbone digest at the end. A non-finite loss aborts with the step and term
// named.
TrainResult train(const RunConfig& cfg, const Dataset& train_data, const Dataset& eval_data,
                  const MetricsSink& sink = {});

MetricsRecord evaluate(const Model& model, const Dataset& data,
                       const std::optional<PerturbationSpec>& perturbation = {},
                       std::size_t chunk = 64);

// Named ablation grids: "components", "qkv-targets", "rank", "fsr-vs-linear".
// Every variant re-trains from the base seeds; repetition k shifts the master
// seed by k. One eval record per (variant, repetition).
std::vector<MetricsRecord> ablate(const RunConfig& base, const std::string& grid,
                                  std::size_t repetitions, const Dataset& train_data,
                                  const Dataset& eval_data, const MetricsSink& sink = {});

struct GradCheckGroup {
  std::string name;
  std::size_t param_count = 0;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double worst = 0.0;
};

// Finite-difference sweep of the assembled model's total loss over every
// trainable group, on a fixed 4-sample batch. Runs once without augmentation
// and once with the augmentation path forced on; reports the worse of the
// two per group.
GradCheckReport gradcheck(const RunConfig& cfg, double h = 1e-5);

// Pooled post-modulation features + labels, in the documented binary layout.
void export_features(const Model& model, const Dataset& data, const std::string& path);

struct FeatureDump {
  std::size_t dim = 0;
  std::vector<std::vector<double>> features;
  std::vector<int> labels;
};

FeatureDump read_feature_dump(const std::string& path);

// Model persistence: backbone header + tensors, then PEFT/FSR/HEAD sections.
void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

}  // namespace gendf
