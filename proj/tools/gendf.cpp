// Command-line front end: dataset generation, training, evaluation, ablation
// grids, gradient checking, and feature export over the gendf core library.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gendf/harness.hpp"

namespace {

using gendf::Dataset;
using gendf::MetricsRecord;
using gendf::Model;
using gendf::PerturbationSpec;
using gendf::RunConfig;

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::string metrics_out;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "Flat key = value config file");
  cmd->add_option("--set", opts.sets, "Override one config entry, e.g. --set train.steps=50");
  cmd->add_option("--metrics-out", opts.metrics_out, "Append metric JSON lines to this file");
}

RunConfig build_config(const CommonOpts& opts) {
  RunConfig cfg;
  if (!opts.config_path.empty()) cfg = RunConfig::from_file(opts.config_path);
  for (const std::string& kv : opts.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw gendf::ConfigError("--set expects key=value, got '" + kv + "'");
    }
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  // The environment override wins over file and flag values.
  if (const char* env = std::getenv("GENDF_SEED")) {
    cfg.set("seed.master", env);
    cfg.model_seed_override.reset();
    cfg.data_seed_override.reset();
    cfg.aug_seed_override.reset();
  }
  cfg.validate();
  return cfg;
}

// Streams records to stdout as JSON lines and mirrors them to a file.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path) {
    if (!path.empty()) {
      file_.open(path, std::ios::trunc);
      if (!file_) throw gendf::IoError("cannot open metrics file " + path);
    }
  }

  void operator()(const MetricsRecord& rec) {
    const std::string line = rec.to_json_line();
    std::cout << line << "\n";
    if (file_.is_open()) file_ << line << "\n";
  }

 private:
  std::ofstream file_;
};

std::string fmt_opt(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", *v);
  return buf;
}

void print_eval_table(const std::vector<MetricsRecord>& rows) {
  std::printf("%-14s %-20s %8s %8s %8s\n", "variant", "perturbation", "acc", "auc", "eer");
  for (const MetricsRecord& r : rows) {
    std::printf("%-14s %-20s %8s %8s %8s\n", r.variant.empty() ? "-" : r.variant.c_str(),
                r.perturbation.empty() ? "clean" : r.perturbation.c_str(),
                fmt_opt(r.acc).c_str(), fmt_opt(r.auc_value).c_str(),
                fmt_opt(r.eer_value).c_str());
  }
}

Dataset dataset_or_generate(const std::string& path, const Dataset& generated) {
  if (path.empty()) return generated;
  return gendf::load_dataset(path);
}

int cmd_gen_data(const std::string& out, std::size_t count, std::size_t size,
                 std::uint64_t seed, const std::string& manifest) {
  Dataset ds = gendf::make_dataset(seed, count, size, size);
  gendf::save_dataset(ds, out);
  const std::string manifest_path = manifest.empty() ? out + ".manifest.json" : manifest;
  gendf::write_manifest(ds, manifest_path);
  std::printf("wrote %zu samples (%zux%zu) to %s\n", ds.samples.size(), ds.height, ds.width,
              out.c_str());
  std::printf("manifest: %s\n", manifest_path.c_str());
  return 0;
}

int cmd_train(const CommonOpts& common, const std::string& train_path,
              const std::string& eval_path, const std::string& model_out) {
  RunConfig cfg = build_config(common);
  MetricsWriter sink(common.metrics_out);
  Dataset train_data = dataset_or_generate(train_path, gendf::make_train_data(cfg));
  Dataset eval_data = dataset_or_generate(eval_path, gendf::make_eval_data(cfg));
  gendf::TrainResult result =
      gendf::train(cfg, train_data, eval_data, [&](const MetricsRecord& r) { sink(r); });
  if (!model_out.empty()) {
    gendf::save_model(result.model, model_out);
    std::printf("model saved to %s\n", model_out.c_str());
  }
  std::printf("config digest %s\n", cfg.digest().c_str());
  print_eval_table({result.records.back()});
  return 0;
}

int cmd_eval(const CommonOpts& common, const std::string& model_path,
             const std::string& eval_path, std::vector<std::string> perturb_args,
             bool robustness, double contrast, double saturation, double pixelate, double blur) {
  Model model = gendf::load_model(model_path);
  RunConfig data_cfg = build_config(common);
  data_cfg.backbone = model.cfg.backbone;  // datasets must match the model input size
  Dataset eval_data = dataset_or_generate(eval_path, gendf::make_eval_data(data_cfg));
  MetricsWriter sink(common.metrics_out);

  std::vector<std::optional<PerturbationSpec>> specs = {std::nullopt};
  if (robustness) {
    specs.push_back(PerturbationSpec{gendf::PerturbationKind::Contrast, contrast});
    specs.push_back(PerturbationSpec{gendf::PerturbationKind::Saturation, saturation});
    specs.push_back(PerturbationSpec{gendf::PerturbationKind::Pixelate, pixelate});
    specs.push_back(PerturbationSpec{gendf::PerturbationKind::Blur, blur});
  }
  for (const std::string& text : perturb_args) {
    specs.push_back(PerturbationSpec::parse(text));
  }

  std::vector<MetricsRecord> rows;
  for (const auto& spec : specs) {
    MetricsRecord rec = gendf::evaluate(model, eval_data, spec);
    sink(rec);
    rows.push_back(std::move(rec));
  }
  print_eval_table(rows);
  return 0;
}

int cmd_ablate(const CommonOpts& common, const std::string& grid, std::size_t repetitions) {
  RunConfig cfg = build_config(common);
  MetricsWriter sink(common.metrics_out);
  Dataset train_data = gendf::make_train_data(cfg);
  Dataset eval_data = gendf::make_eval_data(cfg);
  std::vector<MetricsRecord> rows = gendf::ablate(
      cfg, grid, repetitions, train_data, eval_data, [&](const MetricsRecord& r) { sink(r); });
  std::printf("grid '%s', %zu rows\n", grid.c_str(), rows.size());
  std::printf("%-14s %6s %8s %8s %8s\n", "variant", "seed", "acc", "auc", "eer");
  for (const MetricsRecord& r : rows) {
    std::printf("%-14s %6llu %8s %8s %8s\n", r.variant.c_str(),
                static_cast<unsigned long long>(r.seed.value_or(0)), fmt_opt(r.acc).c_str(),
                fmt_opt(r.auc_value).c_str(), fmt_opt(r.eer_value).c_str());
  }
  return 0;
}

int cmd_gradcheck(const CommonOpts& common, double h) {
  RunConfig cfg = build_config(common);
  gendf::GradCheckReport report = gendf::gradcheck(cfg, h);
  std::printf("%-12s %8s %14s\n", "group", "params", "max_rel_err");
  for (const gendf::GradCheckGroup& g : report.groups) {
    std::printf("%-12s %8zu %14.3e\n", g.name.c_str(), g.param_count, g.max_rel_err);
  }
  std::printf("worst %.3e\n", report.worst);
  return report.worst < 1e-4 ? 0 : 1;
}

int cmd_export(const CommonOpts& common, const std::string& model_path,
               const std::string& data_path, const std::string& out) {
  Model model = gendf::load_model(model_path);
  RunConfig data_cfg = build_config(common);
  data_cfg.backbone = model.cfg.backbone;
  Dataset data = dataset_or_generate(data_path, gendf::make_eval_data(data_cfg));
  gendf::export_features(model, data, out);
  std::printf("wrote %zu feature rows to %s\n", data.samples.size(), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GenDF: low-rank fine-tuning pipeline on a synthetic forgery benchmark"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset file");
  std::string gen_out, gen_manifest;
  std::size_t gen_count = 512, gen_size = 32;
  std::uint64_t gen_seed = 1;
  gen->add_option("--out", gen_out, "Output dataset path")->required();
  gen->add_option("--count", gen_count, "Number of samples (alternating real/fake)");
  gen->add_option("--size", gen_size, "Image side length");
  gen->add_option("--seed", gen_seed, "Base seed for sample generation");
  gen->add_option("--manifest", gen_manifest, "Manifest path (default: <out>.manifest.json)");

  // train
  auto* tr = app.add_subcommand("train", "Train a detector");
  CommonOpts tr_common;
  add_common(tr, tr_common);
  std::string tr_train_data, tr_eval_data, tr_model_out;
  tr->add_option("--train-data", tr_train_data, "Dataset file (default: generate from config)");
  tr->add_option("--eval-data", tr_eval_data, "Dataset file (default: generate from config)");
  tr->add_option("--model-out", tr_model_out, "Save the trained model here");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a saved model");
  CommonOpts ev_common;
  add_common(ev, ev_common);
  std::string ev_model, ev_data;
  std::vector<std::string> ev_perturb;
  bool ev_robustness = false;
  double ev_contrast = 1.5, ev_saturation = 2.0, ev_pixelate = 2.0, ev_blur = 1.0;
  ev->add_option("--model", ev_model, "Model file")->required();
  ev->add_option("--eval-data", ev_data, "Dataset file (default: generate from config)");
  ev->add_option("--perturb", ev_perturb, "Extra perturbation, e.g. blur:0.5 (repeatable)");
  ev->add_flag("--robustness", ev_robustness,
               "Run the contrast/saturation/pixelate/blur quartet");
  ev->add_option("--contrast", ev_contrast, "Contrast severity for --robustness");
  ev->add_option("--saturation", ev_saturation, "Saturation severity for --robustness");
  ev->add_option("--pixelate", ev_pixelate, "Pixelate severity for --robustness");
  ev->add_option("--blur", ev_blur, "Blur severity for --robustness");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Run a named ablation grid");
  CommonOpts ab_common;
  add_common(ab, ab_common);
  std::string ab_grid;
  std::size_t ab_reps = 1;
  ab->add_option("--grid", ab_grid, "components | qkv-targets | rank | fsr-vs-linear")
      ->required();
  ab->add_option("--repetitions", ab_reps, "Re-train each variant this many times");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of all trainable groups");
  CommonOpts gc_common;
  add_common(gc, gc_common);
  double gc_h = 1e-5;
  gc->add_option("--h", gc_h, "Central-difference step");

  // export-features
  auto* ex = app.add_subcommand("export-features", "Dump pooled features for analysis");
  CommonOpts ex_common;
  add_common(ex, ex_common);
  std::string ex_model, ex_data, ex_out;
  ex->add_option("--model", ex_model, "Model file")->required();
  ex->add_option("--data", ex_data, "Dataset file (default: generate from config)");
  ex->add_option("--out", ex_out, "Output feature dump")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gen_out, gen_count, gen_size, gen_seed, gen_manifest);
    if (tr->parsed()) return cmd_train(tr_common, tr_train_data, tr_eval_data, tr_model_out);
    if (ev->parsed()) {
      return cmd_eval(ev_common, ev_model, ev_data, ev_perturb, ev_robustness, ev_contrast,
                      ev_saturation, ev_pixelate, ev_blur);
    }
    if (ab->parsed()) return cmd_ablate(ab_common, ab_grid, ab_reps);
    if (gc->parsed()) return cmd_gradcheck(gc_common, gc_h);
    if (ex->parsed()) return cmd_export(ex_common, ex_model, ex_data, ex_out);
  } catch (const std::exception& e) {
    std::string msg;
    for (char c : std::string(e.what())) {
      if (c == '"' || c == '\\') msg += '\\';
      msg += c;
    }
    std::cerr << "{\"error\":\"" << msg << "\"}\n";
    return 1;
  }
  return 0;
}
