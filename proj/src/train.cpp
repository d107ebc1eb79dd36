#include "metaepi/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "metaepi/textio.hpp"

namespace metaepi::train {

namespace {

std::vector<int> distinct_subs(const ClassPool& pool) {
  std::vector<int> subs;
  for (int c = 0; c < pool.num_classes(); ++c) subs.push_back(pool.sub_of(c));
  std::sort(subs.begin(), subs.end());
  subs.erase(std::unique(subs.begin(), subs.end()), subs.end());
  return subs;
}

// Maps fn over 0..n-1 with up to worker_thread_cap() threads; fn writes only
// to its own index, so the merge is order-independent by construction.
void parallel_for_indexed(int n, const std::function<void(int)>& fn) {
  int workers = std::min(worker_thread_cap(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    threads.emplace_back([&, w]() {
      for (int i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : threads) t.join();
}

}  // namespace

int worker_thread_cap() {
  if (const char* env = std::getenv("METAEPI_THREADS")) {
    long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<int>(v);
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw >= 1 ? static_cast<int>(hw) : 1;
}

EpisodeSource pool_source(const ClassPool& pool, const EpisodeSpec& spec) {
  spec.validate();
  return EpisodeSource{[&pool, spec](RngStream rng) {
    return taskgen::sample_episode(pool, spec, rng);
  }};
}

EpisodeSource per_sub_source(const ClassPool& pool, const EpisodeSpec& spec) {
  spec.validate();
  std::vector<int> subs = distinct_subs(pool);
  if (subs.empty()) throw std::invalid_argument("per_sub_source: pool has no classes");
  return EpisodeSource{[&pool, spec, subs](RngStream rng) {
    int sub = subs[static_cast<size_t>(rng.child("sub-choice").next_below(subs.size()))];
    return taskgen::sample_episode(pool, spec, rng, sub);
  }};
}

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("train config: epochs must be >= 0");
  if (episodes_per_epoch < 1) throw std::invalid_argument("train config: episodes_per_epoch must be >= 1");
  if (episodes_per_meta_batch < 1)
    throw std::invalid_argument("train config: episodes_per_meta_batch must be >= 1");
  if (lr < 0.0) throw std::invalid_argument("train config: learning rate must be >= 0");
  episode.validate();
}

TrainResult meta_train(MetaModel& model, const EpisodeSource& source, const TrainConfig& config,
                       const EpisodeSource* val_source, int val_episodes) {
  config.validate();
  TrainResult result;
  RngStream rng(config.seed);
  RngStream episode_rng = rng.child("episode");
  RngStream val_rng = rng.child("val-episode");
  ad::OptimizerState opt = config.opt_mode == ad::OptMode::Sgd ? ad::make_sgd(config.lr)
                                                               : ad::make_adam(config.lr);
  auto params = model.parameters();
  uint64_t episode_index = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    double epoch_acc = 0.0;
    int epoch_episodes = 0;
    int remaining = config.episodes_per_epoch;
    while (remaining > 0) {
      int batch = std::min(remaining, config.episodes_per_meta_batch);
      remaining -= batch;
      ad::Tape tape;
      std::vector<ad::NodeId> losses;
      for (int b = 0; b < batch; ++b, ++episode_index) {
        MetaExample ep = source.sample(episode_rng.child(episode_index));
        models::EpisodeGraph g;
        try {
          g = models::build_episode_loss(tape, model, ep, true);
        } catch (const std::runtime_error& e) {
          throw std::runtime_error(strcat_msg("meta_train diverged at epoch ", epoch, ": ", e.what()));
        }
        losses.push_back(g.loss);
        epoch_loss += tape.value(g.loss).at(0);
        // Accuracy of this episode from the recorded scores.
        const ad::Tensor& s = tape.value(g.scores);
        int nq = s.rows(), ways = s.cols();
        int correct = 0;
        for (int q = 0; q < nq; ++q) {
          int best = 0;
          for (int c = 1; c < ways; ++c)
            if (s.at(q, c) > s.at(q, best)) best = c;
          if (best == ep.val_labels[static_cast<size_t>(q)]) ++correct;
        }
        epoch_acc += static_cast<double>(correct) / nq;
        ++epoch_episodes;
      }
      ad::NodeId total = losses[0];
      for (size_t i = 1; i < losses.size(); ++i) total = tape.add(total, losses[i]);
      ad::NodeId batch_loss = tape.scalar_mul(total, 1.0 / static_cast<double>(batch));
      if (config.lr > 0.0) {
        tape.backward(batch_loss);
        ad::optimizer_step(params, opt);
      }
    }
    EpochStats stats;
    stats.meta_train_loss = epoch_loss / epoch_episodes;
    stats.meta_train_acc = epoch_acc / epoch_episodes;
    if (val_source) {
      double acc = 0.0;
      for (int i = 0; i < val_episodes; ++i)
        acc += models::episode_accuracy(model, val_source->sample(val_rng.child(static_cast<uint64_t>(i))));
      stats.meta_val_acc = acc / val_episodes;
    }
    result.curve.push_back(stats);
  }
  return result;
}

TrainResult meta_train(MetaModel& model, const ClassPool& pool, const TrainConfig& config) {
  return meta_train(model, pool_source(pool, config.episode), config);
}

EvalReport evaluate_meta_model(const MetaModel& model, const EpisodeSource& source, int episodes,
                               uint64_t seed) {
  if (episodes < 1) throw std::invalid_argument("evaluate: episode count must be >= 1");
  EvalReport report;
  report.episodes = episodes;
  report.per_episode.assign(static_cast<size_t>(episodes), 0.0);
  RngStream base = RngStream(seed).child("eval-episode");
  std::exception_ptr first_error;
  std::mutex error_mutex;
  parallel_for_indexed(episodes, [&](int i) {
    try {
      MetaExample ep = source.sample(base.child(static_cast<uint64_t>(i)));
      report.per_episode[static_cast<size_t>(i)] = models::episode_accuracy(model, ep);
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mutex);
      if (!first_error) first_error = std::current_exception();
    }
  });
  if (first_error) std::rethrow_exception(first_error);

  bool all_equal = true;
  for (double v : report.per_episode)
    if (v != report.per_episode[0]) {
      all_equal = false;
      break;
    }
  if (all_equal) {
    report.mean_accuracy = report.per_episode[0];
    report.std_error = 0.0;
    report.ci95_halfwidth = 0.0;
    return report;
  }
  double sum = 0.0;
  for (double v : report.per_episode) sum += v;
  report.mean_accuracy = sum / episodes;
  double var = 0.0;
  for (double v : report.per_episode) {
    double d = v - report.mean_accuracy;
    var += d * d;
  }
  var /= episodes;  // population convention
  double std_dev = std::sqrt(var);
  report.std_error = std_dev / std::sqrt(static_cast<double>(episodes));
  report.ci95_halfwidth = 1.96 * report.std_error;
  return report;
}

EvalReport evaluate_meta_model(const MetaModel& model, const ClassPool& pool,
                               const EpisodeSpec& spec, int episodes, uint64_t seed) {
  return evaluate_meta_model(model, pool_source(pool, spec), episodes, seed);
}

SelectionResult meta_validate_select(std::span<MetaModel* const> candidates,
                                     const EpisodeSource& val_source, int val_episodes,
                                     uint64_t seed) {
  if (candidates.empty()) throw std::invalid_argument("meta_validate_select: no candidates");
  if (val_episodes < 1) throw std::invalid_argument("meta_validate_select: need >= 1 episode");
  // One shared episode stream: every candidate sees the same tasks.
  std::vector<MetaExample> episodes;
  RngStream base = RngStream(seed).child("metaval-episode");
  episodes.reserve(static_cast<size_t>(val_episodes));
  for (int i = 0; i < val_episodes; ++i)
    episodes.push_back(val_source.sample(base.child(static_cast<uint64_t>(i))));

  SelectionResult result;
  result.scores.assign(candidates.size(), 0.0);
  for (size_t c = 0; c < candidates.size(); ++c) {
    double acc = 0.0;
    for (const MetaExample& ep : episodes) acc += models::episode_accuracy(*candidates[c], ep);
    result.scores[c] = acc / val_episodes;
  }
  result.best_index = 0;
  for (size_t c = 1; c < candidates.size(); ++c)
    if (result.scores[c] > result.scores[static_cast<size_t>(result.best_index)])
      result.best_index = static_cast<int>(c);
  return result;
}

std::string curve_csv(const TrainResult& result) {
  std::string out = "epoch,meta_train_loss,meta_train_acc,meta_val_acc\n";
  for (size_t e = 0; e < result.curve.size(); ++e) {
    const EpochStats& s = result.curve[e];
    out += std::to_string(e + 1);
    out += ',';
    out += format_double(s.meta_train_loss);
    out += ',';
    out += format_double(s.meta_train_acc);
    out += ',';
    out += s.meta_val_acc ? format_double(*s.meta_val_acc) : "nan";
    out += '\n';
  }
  return out;
}

void write_curve_csv(const TrainResult& result, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << curve_csv(result);
  if (!f) throw std::runtime_error("write failed: " + path);
}

}  // namespace metaepi::train
