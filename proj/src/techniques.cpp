#include "metaepi/techniques.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "metaepi/textio.hpp"

namespace metaepi::tech {

namespace {

using ad::NodeId;
using ad::Tape;
using ad::Tensor;

struct FlatPool {
  std::vector<double> rows;  // all instances, class-major stored order
  std::vector<int> labels;   // class ids
  int dim = 0;
  int count = 0;
};

FlatPool flatten_pool(const ClassPool& pool) {
  FlatPool f;
  f.dim = pool.dim;
  for (const auto& cls : pool.classes) {
    for (const taskgen::Instance& inst : cls) {
      f.rows.insert(f.rows.end(), inst.features.begin(), inst.features.end());
      f.labels.push_back(inst.class_id);
      ++f.count;
    }
  }
  return f;
}

Tensor rows_tensor(const FlatPool& f, std::span<const int> indices) {
  std::vector<double> data;
  data.reserve(indices.size() * static_cast<size_t>(f.dim));
  for (int i : indices)
    data.insert(data.end(), f.rows.begin() + static_cast<int64_t>(i) * f.dim,
                f.rows.begin() + static_cast<int64_t>(i + 1) * f.dim);
  return Tensor({static_cast<int>(indices.size()), f.dim}, std::move(data));
}

NodeId linear_head_node(Tape& tape, NodeId emb, NodeId w, NodeId b, int batch_rows) {
  return tape.add(tape.matmul(emb, w),
                  tape.matmul(tape.constant(Tensor::full({batch_rows, 1}, 1.0)), b));
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace

Backbone pretrain_backbone(const ClassPool& pool, std::vector<int> widths,
                           const PretrainConfig& config) {
  if (pool.num_classes() < 2)
    throw std::invalid_argument("pretrain: cross-entropy needs at least 2 classes");
  if (config.epochs < 0) throw std::invalid_argument("pretrain: epochs must be >= 0");
  if (config.batch_size < 1) throw std::invalid_argument("pretrain: batch size must be >= 1");
  if (widths.empty() || widths.front() != pool.dim)
    throw std::invalid_argument("pretrain: widths must start at the pool feature dim");

  RngStream rng(config.seed);
  Backbone bb = models::make_backbone(std::move(widths), rng.child("backbone"));
  RngStream head_rng = rng.child("head");
  Tensor head_w = Tensor::randn({bb.embedding_dim(), pool.num_classes()},
                                std::sqrt(2.0 / bb.embedding_dim()), head_rng, true);
  Tensor head_b = Tensor::zeros({1, pool.num_classes()}, true);

  FlatPool flat = flatten_pool(pool);
  std::vector<Tensor*> params = bb.parameters();
  params.push_back(&head_w);
  params.push_back(&head_b);
  ad::OptimizerState opt = config.opt_mode == ad::OptMode::Sgd ? ad::make_sgd(config.lr)
                                                               : ad::make_adam(config.lr);
  RngStream shuffle_rng = rng.child("shuffle");
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<int> order(static_cast<size_t>(flat.count));
    for (int i = 0; i < flat.count; ++i) order[static_cast<size_t>(i)] = i;
    shuffle_rng.child(static_cast<uint64_t>(epoch)).shuffle(order);
    for (int start = 0; start < flat.count; start += config.batch_size) {
      int end = std::min(flat.count, start + config.batch_size);
      std::span<const int> batch(order.data() + start, static_cast<size_t>(end - start));
      std::vector<int> labels;
      labels.reserve(batch.size());
      for (int i : batch) labels.push_back(flat.labels[static_cast<size_t>(i)]);
      Tape tape;
      auto bb_nodes = bb.bind(tape, true);
      NodeId emb = bb.forward(tape, bb_nodes, tape.constant(rows_tensor(flat, batch)));
      NodeId logits = linear_head_node(tape, emb, tape.leaf(head_w), tape.leaf(head_b),
                                       static_cast<int>(batch.size()));
      NodeId loss = tape.softmax_cross_entropy(logits, std::move(labels));
      tape.backward(loss);
      ad::optimizer_step(params, opt);
    }
  }
  return bb;
}

AuxHead make_aux_head(int embedding_dim, int pool_classes, RngStream rng) {
  if (pool_classes < 2) throw std::invalid_argument("aux head: need at least 2 classes");
  AuxHead head;
  head.w = Tensor::randn({embedding_dim, pool_classes}, std::sqrt(2.0 / embedding_dim), rng, true);
  head.b = Tensor::zeros({1, pool_classes}, true);
  return head;
}

NodeId multiobjective_loss_node(Tape& tape, MetaModel& model, AuxHead& aux,
                                const MetaExample& episode, const Tensor& pool_batch_x,
                                const std::vector<int>& pool_batch_y, double lambda,
                                bool trainable) {
  if (lambda < 0.0) throw std::invalid_argument("multiobjective: lambda must be >= 0");
  models::EpisodeGraph g = models::build_episode_loss(tape, model, episode, trainable);
  // The aux branch binds the backbone again; gradients from both terms
  // accumulate into the shared tensors.
  auto bb_nodes = model.backbone.bind(tape, trainable);
  NodeId emb = model.backbone.forward(tape, bb_nodes, tape.constant(pool_batch_x));
  NodeId aux_logits = linear_head_node(tape, emb,
                                       trainable ? tape.leaf(aux.w) : tape.constant(aux.w),
                                       trainable ? tape.leaf(aux.b) : tape.constant(aux.b),
                                       pool_batch_x.rows());
  NodeId aux_loss = tape.softmax_cross_entropy(aux_logits, pool_batch_y);
  return tape.add(g.loss, tape.scalar_mul(aux_loss, lambda));
}

train::TrainResult meta_train_multiobjective(MetaModel& model, const ClassPool& pool,
                                             const train::TrainConfig& config, double lambda,
                                             int aux_batch_size) {
  config.validate();
  if (aux_batch_size < 1) throw std::invalid_argument("multiobjective: aux batch size must be >= 1");
  FlatPool flat = flatten_pool(pool);
  if (aux_batch_size > flat.count)
    throw std::invalid_argument("multiobjective: aux batch larger than the pool");

  train::EpisodeSource source = train::pool_source(pool, config.episode);
  RngStream rng(config.seed);
  RngStream episode_rng = rng.child("episode");
  RngStream aux_rng = rng.child("aux-batch");
  AuxHead aux = make_aux_head(model.backbone.embedding_dim(), pool.num_classes(), rng.child("aux-head"));
  ad::OptimizerState opt = config.opt_mode == ad::OptMode::Sgd ? ad::make_sgd(config.lr)
                                                               : ad::make_adam(config.lr);
  std::vector<Tensor*> params = model.parameters();
  for (Tensor* t : aux.parameters()) params.push_back(t);

  train::TrainResult result;
  uint64_t episode_index = 0;
  uint64_t step_index = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    double epoch_acc = 0.0;
    int epoch_episodes = 0;
    int remaining = config.episodes_per_epoch;
    while (remaining > 0) {
      int batch = std::min(remaining, config.episodes_per_meta_batch);
      remaining -= batch;
      Tape tape;
      std::vector<NodeId> losses;
      RngStream step_rng = aux_rng.child(step_index++);
      std::vector<int> aux_idx = step_rng.sample_without_replacement(flat.count, aux_batch_size);
      std::vector<int> aux_labels;
      for (int i : aux_idx) aux_labels.push_back(flat.labels[static_cast<size_t>(i)]);
      Tensor aux_x = rows_tensor(flat, aux_idx);
      for (int b = 0; b < batch; ++b, ++episode_index) {
        MetaExample ep = source.sample(episode_rng.child(episode_index));
        models::EpisodeGraph g = models::build_episode_loss(tape, model, ep, true);
        losses.push_back(g.loss);
        epoch_loss += tape.value(g.loss).at(0);
        const Tensor& s = tape.value(g.scores);
        int correct = 0;
        for (int q = 0; q < s.rows(); ++q) {
          int best = 0;
          for (int c = 1; c < s.cols(); ++c)
            if (s.at(q, c) > s.at(q, best)) best = c;
          if (best == ep.val_labels[static_cast<size_t>(q)]) ++correct;
        }
        epoch_acc += static_cast<double>(correct) / s.rows();
        ++epoch_episodes;
      }
      NodeId total = losses[0];
      for (size_t i = 1; i < losses.size(); ++i) total = tape.add(total, losses[i]);
      NodeId episode_loss = tape.scalar_mul(total, 1.0 / static_cast<double>(batch));
      // One aux term per meta-batch, weight lambda.
      auto bb_nodes = model.backbone.bind(tape, true);
      NodeId emb = model.backbone.forward(tape, bb_nodes, tape.constant(aux_x));
      NodeId aux_logits = linear_head_node(tape, emb, tape.leaf(aux.w), tape.leaf(aux.b),
                                           aux_x.rows());
      NodeId combined = tape.add(episode_loss,
                                 tape.scalar_mul(tape.softmax_cross_entropy(aux_logits, aux_labels),
                                                 lambda));
      if (config.lr > 0.0) {
        tape.backward(combined);
        ad::optimizer_step(params, opt);
      }
    }
    train::EpochStats stats;
    stats.meta_train_loss = epoch_loss / epoch_episodes;
    stats.meta_train_acc = epoch_acc / epoch_episodes;
    result.curve.push_back(stats);
  }
  return result;
}

BagEnsemble train_bag(const ClassPool& pool, const models::ModelSpec& spec,
                      const train::TrainConfig& base_config, const BagConfig& bag_config) {
  if (bag_config.bags < 1) throw std::invalid_argument("bagging: need at least 1 bag");
  if (bag_config.classes_per_bag < 1 || bag_config.classes_per_bag > pool.num_classes())
    throw std::invalid_argument(strcat_msg("bagging: classes_per_bag ", bag_config.classes_per_bag,
                                           " out of range for ", pool.num_classes(), " classes"));
  BagEnsemble ensemble;
  RngStream rng(bag_config.seed);
  RngStream pool_rng = rng.child("bag-pool");
  RngStream init_rng = rng.child("bag-init");
  RngStream train_rng = rng.child("bag-train");
  for (int b = 0; b < bag_config.bags; ++b) {
    ClassPool sub = taskgen::subsample_pool(pool, bag_config.classes_per_bag, std::nullopt,
                                            pool_rng.child(static_cast<uint64_t>(b)));
    MetaModel model = models::make_model(spec, pool.dim, base_config.episode.ways,
                                         init_rng.child(static_cast<uint64_t>(b)));
    if (bag_config.shared_pretrained) model.backbone = *bag_config.shared_pretrained;
    train::TrainConfig cfg = base_config;
    cfg.seed = train_rng.child(static_cast<uint64_t>(b)).next_u64();
    train::meta_train(model, sub, cfg);
    ensemble.members.push_back(std::move(model));
    ensemble.bag_class_ids.push_back(sub.source_class_ids);
  }
  return ensemble;
}

EnsemblePrediction ensemble_predict(const BagEnsemble& ensemble, const MetaExample& episode,
                                    Aggregation mode) {
  if (ensemble.members.empty()) throw std::invalid_argument("ensemble: no members");
  Variant v = ensemble.members[0].variant;
  for (const MetaModel& m : ensemble.members)
    if (m.variant != v) throw std::invalid_argument("ensemble: mixed member variants");

  size_t nq = episode.validation.size();
  EnsemblePrediction pred;
  pred.scores.assign(nq, std::vector<double>(static_cast<size_t>(episode.ways), 0.0));
  double inv = 1.0 / static_cast<double>(ensemble.members.size());
  for (const MetaModel& m : ensemble.members) {
    auto scores = models::episode_scores(m, episode);
    for (size_t q = 0; q < nq; ++q) {
      if (mode == Aggregation::Bag1Logits) {
        for (int c = 0; c < episode.ways; ++c)
          pred.scores[q][static_cast<size_t>(c)] += inv * scores[q][static_cast<size_t>(c)];
      } else {
        // softmax over the member's class scores
        double mx = scores[q][0];
        for (int c = 1; c < episode.ways; ++c) mx = std::max(mx, scores[q][static_cast<size_t>(c)]);
        double z = 0.0;
        for (int c = 0; c < episode.ways; ++c) z += std::exp(scores[q][static_cast<size_t>(c)] - mx);
        for (int c = 0; c < episode.ways; ++c)
          pred.scores[q][static_cast<size_t>(c)] +=
              inv * std::exp(scores[q][static_cast<size_t>(c)] - mx) / z;
      }
    }
  }
  pred.labels = models::predict_labels(pred.scores);
  return pred;
}

EnsemblePrediction ensemble_predict(const BagEnsemble& ensemble, const MetaExample& episode) {
  return ensemble_predict(ensemble, episode, ensemble.aggregation);
}

double ensemble_accuracy(const BagEnsemble& ensemble, const MetaExample& episode,
                         Aggregation mode) {
  EnsemblePrediction pred = ensemble_predict(ensemble, episode, mode);
  int correct = 0;
  for (size_t q = 0; q < pred.labels.size(); ++q)
    if (pred.labels[q] == episode.val_labels[q]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(pred.labels.size());
}

std::vector<int> lloyd_cluster(const std::vector<std::vector<double>>& points, int k,
                               RngStream rng) {
  int n = static_cast<int>(points.size());
  if (k < 1) throw std::invalid_argument("kmeans: k must be >= 1");
  if (n < k) throw std::invalid_argument(strcat_msg("kmeans: ", n, " points for k=", k));
  std::vector<int> assign(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) assign[static_cast<size_t>(i)] = static_cast<int>(rng.next_below(static_cast<uint64_t>(k)));
  if (k == 1) return assign;
  size_t dim = points[0].size();

  auto centroids_of = [&](const std::vector<int>& a) {
    std::vector<std::vector<double>> cent(static_cast<size_t>(k), std::vector<double>(dim, 0.0));
    std::vector<int> count(static_cast<size_t>(k), 0);
    for (int i = 0; i < n; ++i) {
      int c = a[static_cast<size_t>(i)];
      ++count[static_cast<size_t>(c)];
      for (size_t d = 0; d < dim; ++d) cent[static_cast<size_t>(c)][d] += points[static_cast<size_t>(i)][d];
    }
    for (int c = 0; c < k; ++c)
      if (count[static_cast<size_t>(c)] > 0)
        for (size_t d = 0; d < dim; ++d) cent[static_cast<size_t>(c)][d] /= count[static_cast<size_t>(c)];
    return std::pair(cent, count);
  };

  // Moves the point farthest from its own centroid (among clusters that can
  // spare one) into each empty cluster.
  auto repair = [&](std::vector<int>& a) {
    while (true) {
      auto [cent, count] = centroids_of(a);
      int empty = -1;
      for (int c = 0; c < k; ++c)
        if (count[static_cast<size_t>(c)] == 0) {
          empty = c;
          break;
        }
      if (empty < 0) return;
      int worst = -1;
      double worst_d = -1.0;
      for (int i = 0; i < n; ++i) {
        int c = a[static_cast<size_t>(i)];
        if (count[static_cast<size_t>(c)] < 2) continue;
        double d = sq_dist(points[static_cast<size_t>(i)], cent[static_cast<size_t>(c)]);
        if (d > worst_d) {
          worst_d = d;
          worst = i;
        }
      }
      if (worst < 0) return;  // cannot repair (n < k guarded above)
      a[static_cast<size_t>(worst)] = empty;
    }
  };

  for (int iter = 0; iter < 100; ++iter) {
    repair(assign);
    auto [cent, count] = centroids_of(assign);
    std::vector<int> next(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double best_d = sq_dist(points[static_cast<size_t>(i)], cent[0]);
      for (int c = 1; c < k; ++c) {
        double d = sq_dist(points[static_cast<size_t>(i)], cent[static_cast<size_t>(c)]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      next[static_cast<size_t>(i)] = best;
    }
    if (next == assign) break;
    assign = std::move(next);
  }
  repair(assign);
  return assign;
}

AugmentedPool kmeans_augment_pool(const ClassPool& pool, int k, const Backbone* feature_map,
                                  int trials, RngStream rng) {
  if (k < 1) throw std::invalid_argument("augment: k must be >= 1");
  if (trials < 1) throw std::invalid_argument("augment: need at least 1 trial");
  for (int c = 0; c < pool.num_classes(); ++c)
    if (static_cast<int>(pool.classes[static_cast<size_t>(c)].size()) < k)
      throw std::invalid_argument(strcat_msg("augment: class ", c, " has ",
                                             pool.classes[static_cast<size_t>(c)].size(),
                                             " instances, cannot split into ", k));
  if (feature_map && feature_map->input_dim() != pool.dim)
    throw std::invalid_argument("augment: feature map input dim does not match the pool");

  // Cluster-space coordinates per class, computed once.
  std::vector<std::vector<std::vector<double>>> coords(static_cast<size_t>(pool.num_classes()));
  for (int c = 0; c < pool.num_classes(); ++c) {
    const auto& cls = pool.classes[static_cast<size_t>(c)];
    if (feature_map) {
      std::vector<double> emb = feature_map->embed(cls);
      int e = feature_map->embedding_dim();
      for (size_t i = 0; i < cls.size(); ++i)
        coords[static_cast<size_t>(c)].emplace_back(emb.begin() + static_cast<int64_t>(i) * e,
                                                    emb.begin() + static_cast<int64_t>(i + 1) * e);
    } else {
      for (const taskgen::Instance& inst : cls) coords[static_cast<size_t>(c)].push_back(inst.features);
    }
  }

  AugmentedPool out;
  out.k = k;
  RngStream trial_rng = rng.child("trial");
  for (int t = 0; t < trials; ++t) {
    ClassPool aug;
    aug.dim = pool.dim;
    aug.num_domains = pool.num_domains;
    aug.generator = pool.generator + "+kmeans";
    aug.seed = pool.seed;
    RngStream tr = trial_rng.child(static_cast<uint64_t>(t));
    for (int c = 0; c < pool.num_classes(); ++c) {
      std::vector<int> assign =
          lloyd_cluster(coords[static_cast<size_t>(c)], k, tr.child(static_cast<uint64_t>(c)));
      const auto& cls = pool.classes[static_cast<size_t>(c)];
      for (int sub = 0; sub < k; ++sub) {
        std::vector<taskgen::Instance> members;
        for (size_t i = 0; i < cls.size(); ++i)
          if (assign[i] == sub) members.push_back(cls[i]);
        int new_id = c * k + sub;
        for (taskgen::Instance& inst : members) inst.class_id = new_id;
        aug.classes.push_back(std::move(members));
        if (!pool.sub_ids.empty()) aug.sub_ids.push_back(pool.sub_ids[static_cast<size_t>(c)]);
      }
    }
    out.trials.push_back(std::move(aug));
  }
  return out;
}

train::EpisodeSource augmented_source(const AugmentedPool& pool, const EpisodeSpec& spec) {
  spec.validate();
  if (pool.trials.empty()) throw std::invalid_argument("augmented source: no trials");
  return train::EpisodeSource{[&pool, spec](RngStream rng) {
    uint64_t t = rng.child("trial-choice").next_below(pool.trials.size());
    return taskgen::sample_episode(pool.trials[static_cast<size_t>(t)], spec, rng);
  }};
}

std::vector<double> task_embedding(const Backbone& psi, const MetaExample& episode) {
  std::vector<double> emb = psi.embed(episode.support);
  int e = psi.embedding_dim();
  int n = static_cast<int>(episode.support.size());
  std::vector<double> mean(static_cast<size_t>(e), 0.0);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < e; ++k) mean[static_cast<size_t>(k)] += emb[static_cast<size_t>(i) * e + k];
  for (double& v : mean) v /= n;
  return mean;
}

TaskIndex build_task_index(const train::EpisodeSource& source, int num_tasks, const Backbone& psi,
                           uint64_t seed) {
  if (num_tasks < 1) throw std::invalid_argument("task index: need at least 1 task");
  TaskIndex index;
  index.embedding_dim = psi.embedding_dim();
  RngStream base = RngStream(seed).child("index-task");
  for (int i = 0; i < num_tasks; ++i) {
    MetaExample ep = source.sample(base.child(static_cast<uint64_t>(i)));
    index.embeddings.push_back(task_embedding(psi, ep));
    index.tasks.push_back(std::move(ep));
  }
  return index;
}

std::vector<int> knn_indices(const TaskIndex& index, std::span<const double> query, int k) {
  int n = static_cast<int>(index.tasks.size());
  if (k < 1 || k > n)
    throw std::invalid_argument(strcat_msg("knn: k=", k, " out of range for index of ", n));
  if (static_cast<int>(query.size()) != index.embedding_dim)
    throw std::invalid_argument("knn: query dim does not match index");
  std::vector<std::pair<double, int>> dist;
  dist.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    dist.emplace_back(sq_dist(query, index.embeddings[static_cast<size_t>(i)]), i);
  std::sort(dist.begin(), dist.end());  // (distance, index): ties to the lowest index
  std::vector<int> out;
  out.reserve(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) out.push_back(dist[static_cast<size_t>(i)].second);
  return out;
}

MetaKnnResult meta_knn_adapt(const MetaModel& g_hat, const TaskIndex& index,
                             const MetaExample& test_episode, const MetaKnnConfig& config) {
  if (config.finetune_epochs < 0) throw std::invalid_argument("meta-knn: beta must be >= 0");
  if (config.finetune_lr <= 0.0) throw std::invalid_argument("meta-knn: fine-tune step size must be > 0");
  models::validate_episode(test_episode);

  MetaKnnResult result;
  std::vector<double> query = task_embedding(g_hat.backbone, test_episode);
  result.neighbor_ids = knn_indices(index, query, config.k);

  MetaModel tuned = g_hat;  // g_hat itself is never touched
  if (config.finetune_epochs > 0) {
    ad::OptimizerState opt = ad::make_sgd(config.finetune_lr);
    auto params = tuned.parameters();
    for (int epoch = 0; epoch < config.finetune_epochs; ++epoch) {
      Tape tape;
      std::vector<NodeId> losses;
      for (int id : result.neighbor_ids) {
        models::EpisodeGraph g =
            models::build_episode_loss(tape, tuned, index.tasks[static_cast<size_t>(id)], true);
        losses.push_back(g.loss);
      }
      NodeId total = losses[0];
      for (size_t i = 1; i < losses.size(); ++i) total = tape.add(total, losses[i]);
      tape.backward(tape.scalar_mul(total, 1.0 / static_cast<double>(losses.size())));
      ad::optimizer_step(params, opt);
    }
  }
  result.scores = models::episode_scores(tuned, test_episode);
  result.labels = models::predict_labels(result.scores);
  return result;
}

std::string serialize_task_index(const TaskIndex& index) {
  if (index.tasks.empty()) throw std::invalid_argument("task index: nothing to serialize");
  const MetaExample& first = index.tasks[0];
  int dim = static_cast<int>(first.support[0].features.size());
  std::string out = "metaepi-index v1 tasks=" + std::to_string(index.tasks.size()) +
                    " dim=" + std::to_string(dim) + " edim=" + std::to_string(index.embedding_dim) +
                    " ways=" + std::to_string(first.ways) + " shots=" + std::to_string(first.shots) +
                    " val=" + std::to_string(first.val_per_class) + "\n";
  auto write_instances = [&](const std::vector<taskgen::Instance>& insts,
                             const std::vector<int>& labels) {
    for (size_t i = 0; i < insts.size(); ++i) {
      out += std::to_string(labels[i]);
      out += ',';
      out += std::to_string(insts[i].domain_id);
      for (double f : insts[i].features) {
        out += ',';
        out += format_double(f);
      }
      out += '\n';
    }
  };
  for (size_t t = 0; t < index.tasks.size(); ++t) {
    const MetaExample& ep = index.tasks[t];
    out += "task " + std::to_string(t) + "\n";
    out += "embedding";
    for (double v : index.embeddings[t]) {
      out += ' ';
      out += format_double(v);
    }
    out += '\n';
    write_instances(ep.support, ep.support_labels);
    write_instances(ep.validation, ep.val_labels);
  }
  return out;
}

TaskIndex parse_task_index(const std::string& text) {
  std::vector<std::string_view> lines;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    lines.emplace_back(text.data() + pos, end - pos);
    pos = end + 1;
  }
  if (lines.empty()) throw std::runtime_error("index file: empty");
  auto header = split(lines[0], ' ');
  if (header.size() != 8 || header[0] != "metaepi-index")
    throw std::runtime_error("index file: malformed header");
  if (header[1] != "v1")
    throw std::runtime_error("index file: unsupported version '" + std::string(header[1]) + "'");
  auto header_num = [&](size_t i, std::string_view key) {
    if (header[i].substr(0, key.size()) != key)
      throw std::runtime_error("index file: malformed header field");
    return parse_long(header[i].substr(key.size()));
  };
  int tasks = static_cast<int>(header_num(2, "tasks="));
  int dim = static_cast<int>(header_num(3, "dim="));
  int edim = static_cast<int>(header_num(4, "edim="));
  int ways = static_cast<int>(header_num(5, "ways="));
  int shots = static_cast<int>(header_num(6, "shots="));
  int val = static_cast<int>(header_num(7, "val="));

  TaskIndex index;
  index.embedding_dim = edim;
  size_t li = 1;
  auto parse_instance = [&](std::string_view line, taskgen::Instance& inst, int& label) {
    auto cols = split(line, ',');
    if (static_cast<int>(cols.size()) != 2 + dim)
      throw std::runtime_error("index file: malformed instance line");
    label = static_cast<int>(parse_long(cols[0]));
    inst.class_id = label;
    inst.domain_id = static_cast<int>(parse_long(cols[1]));
    for (int k = 0; k < dim; ++k) inst.features.push_back(parse_double(cols[static_cast<size_t>(2 + k)]));
  };
  for (int t = 0; t < tasks; ++t) {
    if (li >= lines.size() || split(lines[li], ' ')[0] != "task")
      throw std::runtime_error("index file: expected task record");
    ++li;
    if (li >= lines.size()) throw std::runtime_error("index file: missing embedding");
    auto emb_fields = split(lines[li], ' ');
    if (emb_fields.empty() || emb_fields[0] != "embedding")
      throw std::runtime_error("index file: missing embedding");
    std::vector<double> emb;
    for (size_t i = 1; i < emb_fields.size(); ++i) emb.push_back(parse_double(emb_fields[i]));
    if (static_cast<int>(emb.size()) != edim)
      throw std::runtime_error("index file: embedding dim mismatch");
    ++li;
    MetaExample ep;
    ep.ways = ways;
    ep.shots = shots;
    ep.val_per_class = val;
    for (int i = 0; i < ways * shots; ++i, ++li) {
      if (li >= lines.size()) throw std::runtime_error("index file: truncated support");
      taskgen::Instance inst;
      int label;
      parse_instance(lines[li], inst, label);
      ep.support.push_back(std::move(inst));
      ep.support_labels.push_back(label);
    }
    for (int i = 0; i < ways * val; ++i, ++li) {
      if (li >= lines.size()) throw std::runtime_error("index file: truncated validation");
      taskgen::Instance inst;
      int label;
      parse_instance(lines[li], inst, label);
      ep.validation.push_back(std::move(inst));
      ep.val_labels.push_back(label);
    }
    for (int c = 0; c < ways; ++c) ep.episode_class_ids.push_back(c);
    models::validate_episode(ep);
    index.embeddings.push_back(std::move(emb));
    index.tasks.push_back(std::move(ep));
  }
  return index;
}

void save_task_index(const TaskIndex& index, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << serialize_task_index(index);
  if (!f) throw std::runtime_error("write failed: " + path);
}

TaskIndex load_task_index(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_task_index(text);
}

}  // namespace metaepi::tech
