#pragma once

// Task-level ports of classic supervised-learning techniques: backbone
// pre-training, a joint all-classes objective, bagging with logit or
// probability averaging, K-means class augmentation, and non-parametric
// nearest-neighbor task retrieval with brief fine-tuning.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "metaepi/models.hpp"
#include "metaepi/taskgen.hpp"
#include "metaepi/train.hpp"

namespace metaepi::tech {

using models::Backbone;
using models::MetaModel;
using models::Variant;
using taskgen::ClassPool;
using taskgen::EpisodeSpec;
using taskgen::MetaExample;

// ---- Pre-training -----------------------------------------------------

struct PretrainConfig {
  int epochs = 5;
  int batch_size = 32;
  double lr = 2e-3;
  ad::OptMode opt_mode = ad::OptMode::Adam;
  uint64_t seed = 0;
};

// Trains an all-classes classifier (backbone + linear head) on the full pool
// by cross-entropy; the head is discarded and the backbone returned as a
// meta-model initialization. Rejects single-class pools.
Backbone pretrain_backbone(const ClassPool& pool, std::vector<int> widths,
                           const PretrainConfig& config);

// ---- Multi-objective learning ------------------------------------------

// Aux head mapping backbone embeddings to all-pool-classes logits.
struct AuxHead {
  ad::Tensor w;  // [embedding_dim, pool_classes]
  ad::Tensor b;  // [1, pool_classes]
  std::vector<ad::Tensor*> parameters() { return {&w, &b}; }
};

AuxHead make_aux_head(int embedding_dim, int pool_classes, RngStream rng);

// episode_loss + lambda * cross-entropy of the aux head on pool_batch;
// gradients reach the shared backbone from both terms.
ad::NodeId multiobjective_loss_node(ad::Tape& tape, MetaModel& model, AuxHead& aux,
                                    const MetaExample& episode, const ad::Tensor& pool_batch_x,
                                    const std::vector<int>& pool_batch_y, double lambda,
                                    bool trainable);

// Meta-training with the joint objective; aux batches are drawn uniformly
// without replacement from the pool per meta-batch.
train::TrainResult meta_train_multiobjective(MetaModel& model, const ClassPool& pool,
                                             const train::TrainConfig& config, double lambda,
                                             int aux_batch_size);

// ---- Bagging -------------------------------------------------------------

enum class Aggregation { Bag1Logits, Bag2Probs };

struct BagEnsemble {
  std::vector<MetaModel> members;
  Aggregation aggregation = Aggregation::Bag2Probs;
  std::vector<std::vector<int>> bag_class_ids;  // pool classes each member saw
};

struct BagConfig {
  int bags = 10;
  int classes_per_bag = 48;
  const Backbone* shared_pretrained = nullptr;  // optional shared initialization
  uint64_t seed = 0;
};

// B sub-pools via subsample_pool on split rng children, B independent
// trainings; member b initializes from rng child b (or the shared backbone)
// and trains with seed derived from (config.seed, b).
BagEnsemble train_bag(const ClassPool& pool, const models::ModelSpec& spec,
                      const train::TrainConfig& base_config, const BagConfig& bag_config);

struct EnsemblePrediction {
  std::vector<std::vector<double>> scores;
  std::vector<int> labels;
};

// Bag1 averages the members' raw class scores (negative squared distances,
// per-class log-sum-exp cosine scores, head logits); Bag2 averages their
// softmax probabilities. Ties go to the lowest label.
EnsemblePrediction ensemble_predict(const BagEnsemble& ensemble, const MetaExample& episode,
                                    Aggregation mode);
EnsemblePrediction ensemble_predict(const BagEnsemble& ensemble, const MetaExample& episode);

double ensemble_accuracy(const BagEnsemble& ensemble, const MetaExample& episode,
                         Aggregation mode);

// ---- K-means task augmentation -------------------------------------------

struct AugmentedPool {
  std::vector<ClassPool> trials;  // one relabelled pool per K-means trial
  int k = 1;
};

// Per class and per trial, Lloyd K-means (random-partition init, empty
// clusters repaired by stealing the point farthest from its centroid,
// iteration cap 100) splits the class into K subcategories. Episodes pick a
// trial first, then sample classes from it. feature_map == nullptr clusters
// raw features, otherwise backbone embeddings.
AugmentedPool kmeans_augment_pool(const ClassPool& pool, int k, const Backbone* feature_map,
                                  int trials, RngStream rng);

train::EpisodeSource augmented_source(const AugmentedPool& pool, const EpisodeSpec& spec);

// Single-class Lloyd run used by the augmentation; exposed for testing.
std::vector<int> lloyd_cluster(const std::vector<std::vector<double>>& points, int k,
                               RngStream rng);

// ---- Meta-KNN -------------------------------------------------------------

struct TaskIndex {
  std::vector<MetaExample> tasks;
  std::vector<std::vector<double>> embeddings;
  int embedding_dim = 0;
  std::string method = "backbone-mean-support";
};

// Pre-samples tasks from the source; task embedding = mean backbone
// embedding of the support instances.
TaskIndex build_task_index(const train::EpisodeSource& source, int num_tasks,
                           const Backbone& psi, uint64_t seed);

std::vector<double> task_embedding(const Backbone& psi, const MetaExample& episode);

// K smallest squared Euclidean distances, ties toward the lowest stored
// index, returned in ascending (distance, index) order.
std::vector<int> knn_indices(const TaskIndex& index, std::span<const double> query, int k);

struct MetaKnnConfig {
  int k = 100;
  int finetune_epochs = 1;     // beta
  double finetune_lr = 2e-4;   // alpha for the plain-SGD fine-tune steps
};

struct MetaKnnResult {
  std::vector<std::vector<double>> scores;
  std::vector<int> labels;
  std::vector<int> neighbor_ids;
};

// Retrieves the K tasks nearest to the test episode's support embedding,
// copies the trained model and fine-tunes the copy for beta epochs of
// plain SGD on the mean episode loss over those tasks, then predicts on the
// test episode. The input model is never mutated; beta == 0 reproduces its
// predictions bit for bit.
MetaKnnResult meta_knn_adapt(const MetaModel& g_hat, const TaskIndex& index,
                             const MetaExample& test_episode, const MetaKnnConfig& config);

// Index file: `metaepi-index v1` header + per-task records (episode as
// pool-format instance lines keyed by episode label, embedding as floats).
std::string serialize_task_index(const TaskIndex& index);
TaskIndex parse_task_index(const std::string& text);
void save_task_index(const TaskIndex& index, const std::string& path);
TaskIndex load_task_index(const std::string& path);

}  // namespace metaepi::tech
