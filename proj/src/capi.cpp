#include "metaepi/metaepi.h"

#include <cstring>
#include <stdexcept>
#include <string>

#include "metaepi/harness.hpp"
#include "metaepi/models.hpp"
#include "metaepi/taskgen.hpp"
#include "metaepi/train.hpp"

struct metaepi_pool {
  metaepi::taskgen::ClassPool impl;
};

struct metaepi_model {
  metaepi::models::MetaModel impl;
};

namespace {

thread_local std::string g_last_error;

metaepi_status classify_error(const std::exception& e, metaepi_status fallback) {
  std::string msg = e.what();
  if (msg.find("non-finite") != std::string::npos || msg.find("diverged") != std::string::npos)
    return METAEPI_ERR_NUMERIC;
  if (msg.find("cannot open") != std::string::npos || msg.find("write failed") != std::string::npos)
    return METAEPI_ERR_IO;
  return fallback;
}

template <typename Fn>
metaepi_status guarded(Fn&& fn, metaepi_status runtime_fallback = METAEPI_ERR_INTERNAL) {
  try {
    fn();
    g_last_error.clear();
    return METAEPI_OK;
  } catch (const std::invalid_argument& e) {
    g_last_error = e.what();
    return METAEPI_ERR_INVALID_ARGUMENT;
  } catch (const std::runtime_error& e) {
    g_last_error = e.what();
    return classify_error(e, runtime_fallback);
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return METAEPI_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return METAEPI_ERR_INTERNAL;
  }
}

metaepi_status require(bool ok, const char* what) {
  if (ok) return METAEPI_OK;
  g_last_error = std::string("invalid argument: ") + what;
  return METAEPI_ERR_INVALID_ARGUMENT;
}

}  // namespace

extern "C" {

const char* metaepi_status_name(metaepi_status status) {
  switch (status) {
    case METAEPI_OK: return "ok";
    case METAEPI_ERR_INVALID_ARGUMENT: return "invalid-argument";
    case METAEPI_ERR_IO: return "io-error";
    case METAEPI_ERR_PARSE: return "parse-error";
    case METAEPI_ERR_NUMERIC: return "numeric-error";
    case METAEPI_ERR_INTERNAL: return "internal-error";
  }
  return "unknown";
}

const char* metaepi_last_error(void) { return g_last_error.c_str(); }

metaepi_status metaepi_pool_generate(const char* config_json, metaepi_pool** out) {
  if (metaepi_status s = require(config_json && out, "null pointer")) return s;
  return guarded(
      [&] {
        auto cfg = metaepi::harness::parse_config(config_json);
        *out = new metaepi_pool{metaepi::harness::build_pool_from_config(cfg)};
      },
      METAEPI_ERR_PARSE);
}

metaepi_status metaepi_pool_load(const char* path, metaepi_pool** out) {
  if (metaepi_status s = require(path && out, "null pointer")) return s;
  return guarded([&] { *out = new metaepi_pool{metaepi::taskgen::load_pool(path)}; },
                 METAEPI_ERR_PARSE);
}

metaepi_status metaepi_pool_save(const metaepi_pool* pool, const char* path) {
  if (metaepi_status s = require(pool && path, "null pointer")) return s;
  return guarded([&] { metaepi::taskgen::save_pool(pool->impl, path); }, METAEPI_ERR_IO);
}

int metaepi_pool_num_classes(const metaepi_pool* pool) {
  return pool ? pool->impl.num_classes() : -1;
}

int metaepi_pool_dim(const metaepi_pool* pool) { return pool ? pool->impl.dim : -1; }

int metaepi_pool_num_domains(const metaepi_pool* pool) {
  return pool ? pool->impl.num_domains : -1;
}

void metaepi_pool_free(metaepi_pool* pool) { delete pool; }

metaepi_status metaepi_train(const char* config_json, const metaepi_pool* pool,
                             const char* curve_csv_path, metaepi_model** out) {
  if (metaepi_status s = require(config_json && pool && out, "null pointer")) return s;
  return guarded(
      [&] {
        auto cfg = metaepi::harness::parse_config(config_json);
        auto result = metaepi::harness::train_from_config(cfg, pool->impl);
        if (curve_csv_path) metaepi::train::write_curve_csv(result.curve, curve_csv_path);
        *out = new metaepi_model{std::move(result.model)};
      },
      METAEPI_ERR_PARSE);
}

metaepi_status metaepi_model_load(const char* path, metaepi_model** out) {
  if (metaepi_status s = require(path && out, "null pointer")) return s;
  return guarded([&] { *out = new metaepi_model{metaepi::models::load_model(path)}; },
                 METAEPI_ERR_PARSE);
}

metaepi_status metaepi_model_save(const metaepi_model* model, const char* path) {
  if (metaepi_status s = require(model && path, "null pointer")) return s;
  return guarded([&] { metaepi::models::save_model(model->impl, path); }, METAEPI_ERR_IO);
}

void metaepi_model_free(metaepi_model* model) { delete model; }

metaepi_status metaepi_evaluate(const metaepi_model* model, const metaepi_pool* pool, int ways,
                                int shots, int val_per_class, int episodes, uint64_t seed,
                                metaepi_eval_report* out) {
  if (metaepi_status s = require(model && pool && out, "null pointer")) return s;
  return guarded([&] {
    metaepi::taskgen::EpisodeSpec spec;
    spec.ways = ways;
    spec.shots = shots;
    spec.val_per_class = val_per_class;
    auto report = metaepi::train::evaluate_meta_model(model->impl, pool->impl, spec, episodes, seed);
    out->mean_accuracy = report.mean_accuracy;
    out->std_error = report.std_error;
    out->ci95_halfwidth = report.ci95_halfwidth;
    out->episodes = report.episodes;
  });
}

metaepi_status metaepi_run_experiment(const char* experiment_id, const char* config_path,
                                      const char* out_csv_path) {
  if (metaepi_status s = require(experiment_id && config_path && out_csv_path, "null pointer"))
    return s;
  return guarded(
      [&] {
        auto cfg = metaepi::harness::load_config_file(config_path);
        cfg.experiment = experiment_id;
        metaepi::harness::run_experiment_to_csv(cfg, out_csv_path);
      },
      METAEPI_ERR_PARSE);
}

}  // extern "C"
