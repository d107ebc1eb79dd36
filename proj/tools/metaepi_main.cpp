// metaepi command line: pool generation, meta-training, evaluation and the
// experiment recipes, all through the shared-library C API.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "metaepi/metaepi.h"

namespace {

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CLI::ValidationError("--config", "cannot open " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

int fail(metaepi_status status) {
  std::cerr << "metaepi: " << metaepi_status_name(status) << ": " << metaepi_last_error() << "\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"episodic meta-learning harness"};
  app.require_subcommand(1);

  std::string config_path, pool_path, model_path, out_path, curve_path, experiment_id;
  int episodes = 500;
  int ways = 5, shots = 1, val_per_class = 15;
  uint64_t seed = 0;

  auto* gen = app.add_subcommand("gen-pool", "generate a class pool from a config");
  gen->add_option("--config", config_path, "config JSON file")->required();
  gen->add_option("--out", out_path, "output pool file")->required();

  auto* train = app.add_subcommand("train", "meta-train a model on a pool");
  train->add_option("--config", config_path, "config JSON file")->required();
  train->add_option("--pool", pool_path, "pool file")->required();
  train->add_option("--out", out_path, "output model file")->required();
  train->add_option("--curve", curve_path, "optional training curve CSV");

  auto* eval = app.add_subcommand("eval", "evaluate a model on a pool");
  eval->add_option("--model", model_path, "model file")->required();
  eval->add_option("--pool", pool_path, "pool file")->required();
  eval->add_option("--episodes", episodes, "number of test episodes");
  eval->add_option("--seed", seed, "episode sampling seed");
  eval->add_option("--ways", ways, "episode ways");
  eval->add_option("--shots", shots, "support instances per class");
  eval->add_option("--val-per-class", val_per_class, "validation instances per class");

  auto* exp = app.add_subcommand("experiment", "run an experiment recipe");
  exp->add_option("id", experiment_id,
                  "one of: gen-curve techniques bagging augment metaknn domainshift single-run")
      ->required();
  exp->add_option("--config", config_path, "config JSON file")->required();
  exp->add_option("--out", out_path, "output results CSV")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      std::string cfg = read_file(config_path);
      metaepi_pool* pool = nullptr;
      if (metaepi_status s = metaepi_pool_generate(cfg.c_str(), &pool)) return fail(s);
      metaepi_status s = metaepi_pool_save(pool, out_path.c_str());
      metaepi_pool_free(pool);
      if (s) return fail(s);
      std::cout << "wrote " << out_path << "\n";
      return 0;
    }
    if (train->parsed()) {
      std::string cfg = read_file(config_path);
      metaepi_pool* pool = nullptr;
      if (metaepi_status s = metaepi_pool_load(pool_path.c_str(), &pool)) return fail(s);
      metaepi_model* model = nullptr;
      metaepi_status s = metaepi_train(cfg.c_str(), pool,
                                       curve_path.empty() ? nullptr : curve_path.c_str(), &model);
      metaepi_pool_free(pool);
      if (s) return fail(s);
      s = metaepi_model_save(model, out_path.c_str());
      metaepi_model_free(model);
      if (s) return fail(s);
      std::cout << "wrote " << out_path << "\n";
      return 0;
    }
    if (eval->parsed()) {
      metaepi_model* model = nullptr;
      if (metaepi_status s = metaepi_model_load(model_path.c_str(), &model)) return fail(s);
      metaepi_pool* pool = nullptr;
      if (metaepi_status s = metaepi_pool_load(pool_path.c_str(), &pool)) {
        metaepi_model_free(model);
        return fail(s);
      }
      metaepi_eval_report report;
      metaepi_status s =
          metaepi_evaluate(model, pool, ways, shots, val_per_class, episodes, seed, &report);
      metaepi_model_free(model);
      metaepi_pool_free(pool);
      if (s) return fail(s);
      std::printf("episodes=%d mean_accuracy=%.6f std_error=%.6f ci95_halfwidth=%.6f\n",
                  report.episodes, report.mean_accuracy, report.std_error, report.ci95_halfwidth);
      return 0;
    }
    // experiment
    if (metaepi_status s =
            metaepi_run_experiment(experiment_id.c_str(), config_path.c_str(), out_path.c_str()))
      return fail(s);
    std::cout << "wrote " << out_path << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "metaepi: " << e.what() << "\n";
    return 1;
  }
}
