#pragma once

// The meta hypothesis set: ProtoNet, MatchNet and first-order MAML over a
// shared MLP backbone, the per-episode validation loss they are trained
// with, and the checkpoint format.

#include <cstdint>
#include <string>
#include <vector>

#include "metaepi/autodiff.hpp"
#include "metaepi/rng.hpp"
#include "metaepi/taskgen.hpp"

namespace metaepi::models {

using ad::NodeId;
using ad::Tape;
using ad::Tensor;
using taskgen::Instance;
using taskgen::MetaExample;

// MLP: widths[0] inputs -> hidden layers (relu) -> widths.back() embedding,
// final layer linear.
struct Backbone {
  std::vector<int> widths;
  std::vector<Tensor> weights;  // [widths[i], widths[i+1]]
  std::vector<Tensor> biases;   // [1, widths[i+1]]

  int input_dim() const { return widths.front(); }
  int embedding_dim() const { return widths.back(); }
  int num_layers() const { return static_cast<int>(weights.size()); }
  std::vector<Tensor*> parameters();
  int64_t num_params() const;

  // Binds every layer tensor on the tape: leaves when trainable, constants
  // otherwise. Node order is [w0, b0, w1, b1, ...].
  std::vector<NodeId> bind(Tape& tape, bool trainable);
  NodeId forward(Tape& tape, std::span<const NodeId> layer_nodes, NodeId x) const;

  // Plain forward without a tape; returns row-major [n, embedding_dim].
  std::vector<double> embed(std::span<const Instance> batch) const;
  std::vector<double> embed_rows(const std::vector<double>& rows, int n) const;
};

Backbone make_backbone(std::vector<int> widths, RngStream rng);

enum class Variant { ProtoNet, MatchNet, FoMaml };
const char* variant_name(Variant v);
Variant parse_variant(const std::string& name);

struct MetaModel {
  Variant variant = Variant::ProtoNet;
  Backbone backbone;
  double temperature = 1.0;  // MatchNet softmax temperature
  double inner_lr = 0.01;    // FoMaml inner step size
  int inner_steps = 1;       // FoMaml inner step count
  Tensor head_w;             // FoMaml linear head [embedding_dim, ways]
  Tensor head_b;             // [1, ways]

  std::vector<Tensor*> parameters();
  std::vector<double> flat_parameters() const;
  int head_ways() const { return head_w.numel() == 0 ? 0 : head_w.cols(); }
};

MetaModel make_protonet(std::vector<int> widths, RngStream rng);
MetaModel make_matchnet(std::vector<int> widths, double temperature, RngStream rng);
MetaModel make_fomaml(std::vector<int> widths, int ways, double inner_lr, int inner_steps,
                      RngStream rng);

// Variant-agnostic recipe for building a model; widths become
// [input_dim, hidden..., embedding_dim].
struct ModelSpec {
  Variant variant = Variant::ProtoNet;
  std::vector<int> hidden = {32};
  int embedding_dim = 16;
  double temperature = 1.0;
  double inner_lr = 0.05;
  int inner_steps = 1;
};

MetaModel make_model(const ModelSpec& spec, int input_dim, int ways, RngStream rng);

// Feature rows of a batch as an [n, dim] tensor.
Tensor features_tensor(std::span<const Instance> batch);

// Inner-loop adaptation: full-batch gradient descent on the support
// cross-entropy, starting from the model's parameters. alpha == 0 returns an
// exact copy. The input model is never mutated.
MetaModel fomaml_adapt(const MetaModel& model, const MetaExample& episode, double alpha,
                       int steps);

// Differentiable episode graph. `scores` holds per-validation-instance class
// scores: logits for ProtoNet/FoMaml, probabilities for MatchNet. For FoMaml
// the graph treats the adapted parameters as leaves whose gradients flow to
// the initialization (first-order rule).
struct EpisodeGraph {
  NodeId loss = -1;
  NodeId scores = -1;
  bool scores_are_probs = false;
};
EpisodeGraph build_episode_loss(Tape& tape, MetaModel& model, const MetaExample& episode,
                                bool trainable);

double episode_loss_value(const MetaModel& model, const MetaExample& episode);

// Numeric per-query class scores on the validation set (no tape): ProtoNet
// negative squared distances, MatchNet per-class log-sum-exp of scaled
// cosine scores (whose softmax equals the attention class distribution),
// FoMaml adapted head logits.
std::vector<std::vector<double>> episode_scores(const MetaModel& model,
                                                const MetaExample& episode);

// Score kernels on explicit embeddings, label-major support layout.
std::vector<std::vector<double>> protonet_scores_from_embeddings(
    const std::vector<double>& support_emb, const std::vector<double>& query_emb, int dim,
    int ways, int shots);
std::vector<std::vector<double>> matchnet_probs_from_embeddings(
    const std::vector<double>& support_emb, const std::vector<double>& query_emb, int dim,
    int ways, int shots, double temperature);

// Argmax with ties toward the lowest label.
int argmax_label(std::span<const double> scores);
std::vector<int> predict_labels(const std::vector<std::vector<double>>& scores);

double episode_accuracy(const MetaModel& model, const MetaExample& episode);

// Squared Euclidean distance between two flattened parameter vectors.
double model_space_loss(std::span<const double> a, std::span<const double> b);
double model_space_loss(const MetaModel& a, const MetaModel& b);

// Checkpoint format: `metaepi-model v1 variant=<tag>` then named blocks
//   param <name> <d0>x<d1>.. (or `scalar`)
//   <row-major values, space separated>
std::string serialize_model(const MetaModel& model);
MetaModel parse_model(const std::string& text);
void save_model(const MetaModel& model, const std::string& path);
MetaModel load_model(const std::string& path);

void validate_episode(const MetaExample& episode);

}  // namespace metaepi::models
