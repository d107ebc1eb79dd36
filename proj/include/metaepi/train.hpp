#pragma once

// Episodic meta-training (stochastic meta-ERM over sampled tasks),
// meta-validation model selection, and meta-test evaluation with confidence
// intervals. Episode streams are indexed: episode i is a pure function of
// (seed path, i), so results never depend on thread count.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "metaepi/autodiff.hpp"
#include "metaepi/models.hpp"
#include "metaepi/taskgen.hpp"

namespace metaepi::train {

using models::MetaModel;
using taskgen::ClassPool;
using taskgen::EpisodeSpec;
using taskgen::MetaExample;

// A deterministic task distribution: calling sample with the same RngStream
// value returns the same episode.
struct EpisodeSource {
  std::function<MetaExample(RngStream)> sample;
};

EpisodeSource pool_source(const ClassPool& pool, const EpisodeSpec& spec);
// Picks one sub-distribution uniformly per episode, then samples the episode
// within it (the fine-grained per-dataset task protocol).
EpisodeSource per_sub_source(const ClassPool& pool, const EpisodeSpec& spec);

struct TrainConfig {
  int epochs = 10;
  int episodes_per_epoch = 40;
  int episodes_per_meta_batch = 4;
  ad::OptMode opt_mode = ad::OptMode::Adam;
  double lr = 2e-3;  // 0 runs the schedule without updating parameters
  EpisodeSpec episode;
  uint64_t seed = 0;

  void validate() const;
};

struct EpochStats {
  double meta_train_loss = 0.0;
  double meta_train_acc = 0.0;
  std::optional<double> meta_val_acc;
};

struct TrainResult {
  std::vector<EpochStats> curve;
};

// Meta-ERM: per meta-batch, averages the episode losses, backpropagates to
// the meta parameters and applies one optimizer step. Mutates the model in
// place and returns the per-epoch curve. If val_source is given, each epoch
// ends with a fixed-episode validation accuracy estimate.
TrainResult meta_train(MetaModel& model, const EpisodeSource& source, const TrainConfig& config,
                       const EpisodeSource* val_source = nullptr, int val_episodes = 50);
TrainResult meta_train(MetaModel& model, const ClassPool& pool, const TrainConfig& config);

struct EvalReport {
  double mean_accuracy = 0.0;
  double std_error = 0.0;
  double ci95_halfwidth = 0.0;  // 1.96 * population std / sqrt(T)
  int episodes = 0;
  std::vector<double> per_episode;
};

// T freshly sampled episodes, accuracy per episode, population-std CI.
// Fans episodes out to worker threads (METAEPI_THREADS caps the count);
// per-episode RNG is indexed by episode number, so the report is identical
// for any worker count. A single episode (or identical accuracies) reports a
// CI half-width of exactly 0.
EvalReport evaluate_meta_model(const MetaModel& model, const EpisodeSource& source, int episodes,
                               uint64_t seed);
EvalReport evaluate_meta_model(const MetaModel& model, const ClassPool& pool,
                               const EpisodeSpec& spec, int episodes, uint64_t seed);

struct SelectionResult {
  int best_index = 0;
  std::vector<double> scores;
};

// Evaluates every candidate on the same T_val episodes (one shared stream,
// paired across candidates); returns the argmax, ties to the lowest index.
SelectionResult meta_validate_select(std::span<MetaModel* const> candidates,
                                     const EpisodeSource& val_source, int val_episodes,
                                     uint64_t seed);

// Training curve as CSV: epoch,meta_train_loss,meta_train_acc,meta_val_acc
std::string curve_csv(const TrainResult& result);
void write_curve_csv(const TrainResult& result, const std::string& path);

// Worker-thread cap: METAEPI_THREADS env var when set, else hardware
// concurrency, always at least 1.
int worker_thread_cap();

}  // namespace metaepi::train
