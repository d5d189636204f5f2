#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "geohand/dataset.hpp"
#include "geohand/harness.hpp"
#include "geohand/model.hpp"

using namespace geohand;

namespace {

void apply_ablation(Config& cfg, const std::string& mode) {
  if (mode == "gate_off") {
    cfg.model.gate_bypass = true;
  } else if (mode == "no_adapter") {
    cfg.model.use_adapter = false;
  } else if (mode.rfind("kqir_steps=", 0) == 0) {
    cfg.model.kqir_steps = std::stoi(mode.substr(11));
  } else if (mode.rfind("drop_loss=", 0) == 0) {
    const std::string term = mode.substr(10);
    double* slot = term == "l2d"          ? &cfg.loss.l2d
                   : term == "l3d"        ? &cfg.loss.l3d
                   : term == "bone"       ? &cfg.loss.bone
                   : term == "vert"       ? &cfg.loss.vert
                   : term == "global_rot" ? &cfg.loss.global_rot
                   : term == "pose"       ? &cfg.loss.pose
                   : term == "betas"      ? &cfg.loss.betas
                   : term == "shape"      ? &cfg.loss.shape
                                          : nullptr;
    if (!slot) throw std::runtime_error("ablate: unknown loss term '" + term + "'");
    *slot = 0.0;  // weight zero, term still evaluated and logged
  } else {
    throw std::runtime_error("ablate: unknown mode '" + mode + "'");
  }
  cfg.validate();
}

void train_into(const Config& cfg, const Dataset& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  GeoHandModel model(cfg);
  std::ofstream log(dir + "/train_log.csv");
  if (!log) throw std::runtime_error("train: cannot write '" + dir + "/train_log.csv'");
  AdamW opt;
  TrainResult res = train_model(model, ds, log, &opt);
  save_checkpoint(dir + "/model.ghck", model, res.steps, &opt);
  std::printf("trained %llu steps, total %.6g -> %.6g, wrote %s/model.ghck\n",
              static_cast<unsigned long long>(res.steps), res.initial_total, res.final_total,
              dir.c_str());
}

void eval_into(const GeoHandModel& model, const Dataset& ds, int stage, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const EvalResult r = evaluate_model(model, ds, stage);
  const std::string csv = r.to_csv();
  std::ofstream f(dir + "/metrics.csv");
  if (!f) throw std::runtime_error("eval: cannot write '" + dir + "/metrics.csv'");
  f << csv;
  std::cout << csv;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic monocular hand reconstruction toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_path, ckpt_path, mode;
  uint64_t seed = 0;
  int stage = -1, index = 0;
  bool inject_fault = false;

  auto* cfg_opt = app.add_option("--config", config_path, "configuration file");
  auto* seed_opt = app.add_option("--seed", seed, "override the configured seed");
  auto* out_opt = app.add_option("--out", out_dir, "override the output directory");

  auto* c_synth = app.add_subcommand("synth", "generate a synthetic dataset");
  auto* c_train = app.add_subcommand("train", "train on a dataset file");
  c_train->add_option("--data", data_path, "dataset file")->required();
  auto* c_eval = app.add_subcommand("eval", "score a checkpoint against a dataset");
  c_eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  c_eval->add_option("--data", data_path, "dataset file")->required();
  c_eval->add_option("--stage", stage, "prediction stage, -1 for the final one");
  auto* c_grad = app.add_subcommand("gradcheck", "verify gradients of every registered subgraph");
  c_grad->add_flag("--inject-fault", inject_fault)->group("");  // hidden self-test hook
  auto* c_export = app.add_subcommand("export", "write mesh and skeleton files for one sample");
  c_export->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  c_export->add_option("--data", data_path, "dataset file")->required();
  c_export->add_option("--index", index, "sample index");
  auto* c_ablate = app.add_subcommand("ablate", "train and score one modified configuration");
  c_ablate->add_option("--mode", mode,
                       "gate_off | no_adapter | kqir_steps=K | drop_loss=<term>")
      ->required();
  c_ablate->add_option("--data", data_path, "dataset file")->required();

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    Config cfg = cfg_opt->count() ? Config::load(config_path) : Config{};
    if (seed_opt->count()) cfg.seed = seed;
    if (out_opt->count()) cfg.out = out_dir;
    cfg.validate();

    if (c_synth->parsed()) {
      std::filesystem::create_directories(cfg.out);
      Dataset ds = synth_generate(cfg, cfg.seed);
      const std::string path = cfg.out + "/data.ghds";
      ds.save(path);
      std::printf("wrote %d samples to %s\n", ds.size(), path.c_str());
    } else if (c_train->parsed()) {
      train_into(cfg, Dataset::load(data_path), cfg.out);
    } else if (c_eval->parsed()) {
      const CheckpointData ck = load_checkpoint(ckpt_path);
      GeoHandModel model = model_from_checkpoint(ck);
      eval_into(model, Dataset::load(data_path), stage, cfg.out);
    } else if (c_grad->parsed()) {
      bool all_ok = true;
      for (const auto& r : run_gradcheck_suite(cfg.seed, inject_fault)) {
        std::printf("%s %-20s max rel err %.3e at %s, threshold %g\n",
                    r.ok ? "[PASS]" : "[FAIL]", r.name.c_str(), r.result.max_rel_err,
                    r.result.worst_input.empty() ? "-" : r.result.worst_input.c_str(),
                    r.threshold);
        all_ok = all_ok && r.ok;
      }
      if (!all_ok) return 1;
    } else if (c_export->parsed()) {
      const CheckpointData ck = load_checkpoint(ckpt_path);
      GeoHandModel model = model_from_checkpoint(ck);
      Dataset ds = Dataset::load(data_path);
      std::filesystem::create_directories(cfg.out);
      export_sample(model, ds, index, cfg.out);
      std::printf("wrote %s/mesh_%d.obj and %s/skeleton_%d.svg\n", cfg.out.c_str(), index,
                  cfg.out.c_str(), index);
    } else if (c_ablate->parsed()) {
      apply_ablation(cfg, mode);
      std::string tag = mode;
      for (auto& ch : tag)
        if (ch == '=') ch = '-';
      const std::string dir = cfg.out + "/" + tag;
      Dataset ds = Dataset::load(data_path);
      train_into(cfg, ds, dir);
      const CheckpointData ck = load_checkpoint(dir + "/model.ghck");
      GeoHandModel model = model_from_checkpoint(ck);
      eval_into(model, ds, -1, dir);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
