#pragma once

// Experiment recipes and their CSV result emission, plus the JSON config
// document driving them. Every recipe is a pure function of (config, seeds):
// reruns produce byte-identical CSVs regardless of worker thread count.

#include <cstdint>
#include <string>
#include <vector>

#include "metaepi/models.hpp"
#include "metaepi/taskgen.hpp"
#include "metaepi/train.hpp"

namespace metaepi::harness {

struct ResultRecord {
  std::string experiment;
  uint64_t seed = 0;
  std::string setting;  // "key=value;key=value", no commas
  std::string metric;   // member of metric_vocabulary()
  double value = 0.0;

  bool operator==(const ResultRecord&) const = default;
};

const std::vector<std::string>& metric_vocabulary();

// Header `experiment,seed,setting,metric,value`; rows sorted by
// (experiment, setting, seed, metric); floats as shortest round-trip
// decimals.
std::string emit_csv(std::vector<ResultRecord> records);
void write_csv(std::vector<ResultRecord> records, const std::string& path);
std::vector<ResultRecord> parse_csv(const std::string& text);

// Parsed config document. The JSON payload is kept verbatim; recipes read
// their sections with desk-scale defaults. The top-level "schema" string is
// mandatory and must be "metaepi-config v1".
struct ExperimentConfig {
  std::string experiment;
  std::string json_text;

  std::vector<uint64_t> seeds() const;
  int eval_episodes() const;
};

ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config_file(const std::string& path);

extern const std::vector<std::string> kExperimentIds;

std::vector<ResultRecord> run_experiment(const ExperimentConfig& config);
void run_experiment_to_csv(const ExperimentConfig& config, const std::string& out_path);

// Building blocks shared with the CLI subcommands.
taskgen::ClassPool build_pool_from_config(const ExperimentConfig& config);
taskgen::EpisodeSpec episode_from_config(const ExperimentConfig& config);
models::ModelSpec model_from_config(const ExperimentConfig& config);
train::TrainConfig train_config_from_config(const ExperimentConfig& config);

struct TrainOutput {
  models::MetaModel model;
  train::TrainResult curve;
};
TrainOutput train_from_config(const ExperimentConfig& config, const taskgen::ClassPool& pool);

// The four domain-shift cases: which source/target domains the meta-train
// and meta-test episodes use.
struct DomainCase {
  taskgen::EpisodeSpec train_spec;
  taskgen::EpisodeSpec test_spec;
};
DomainCase domainshift_case(const std::string& case_id, const taskgen::EpisodeSpec& base);

}  // namespace metaepi::harness
