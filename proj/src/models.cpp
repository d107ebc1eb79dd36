#include "metaepi/models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include "metaepi/textio.hpp"

namespace metaepi::models {

namespace {

// He-scaled Gaussian weights, zero biases.
Tensor init_weight(int fan_in, int fan_out, RngStream rng) {
  return Tensor::randn({fan_in, fan_out}, std::sqrt(2.0 / fan_in), rng, true);
}

NodeId ones_node(Tape& tape, int rows, int cols) {
  return tape.constant(Tensor::full({rows, cols}, 1.0));
}

std::vector<double> batch_rows(std::span<const Instance> batch) {
  std::vector<double> rows;
  if (batch.empty()) return rows;
  rows.reserve(batch.size() * batch[0].features.size());
  for (const Instance& inst : batch)
    rows.insert(rows.end(), inst.features.begin(), inst.features.end());
  return rows;
}

void check_no_zero_norm(const std::vector<double>& emb, int n, int dim, const char* which) {
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int k = 0; k < dim; ++k) {
      double v = emb[static_cast<size_t>(i) * dim + k];
      s += v * v;
    }
    if (s == 0.0)
      throw std::runtime_error(strcat_msg("matchnet: zero-norm ", which, " embedding at row ", i,
                                          ", cosine similarity undefined"));
  }
}

// [ways, ways*shots] selector summing each class block of support rows; the
// caller scales by 1/shots afterwards.
Tensor class_sum_matrix(int ways, int shots) {
  Tensor m = Tensor::zeros({ways, ways * shots});
  for (int c = 0; c < ways; ++c)
    for (int i = 0; i < shots; ++i) m.at(static_cast<int64_t>(c) * ways * shots + c * shots + i) = 1.0;
  return m;
}

Tensor onehot_matrix(std::span<const int> labels, int num_classes) {
  int n = static_cast<int>(labels.size());
  Tensor m = Tensor::zeros({n, num_classes});
  for (int i = 0; i < n; ++i) m.at(static_cast<int64_t>(i) * num_classes + labels[i]) = 1.0;
  return m;
}

}  // namespace

void validate_episode(const MetaExample& ep) {
  if (ep.ways < 2 || ep.shots < 1 || ep.val_per_class < 1)
    throw std::invalid_argument("episode: degenerate ways/shots/val_per_class");
  if (static_cast<int>(ep.support.size()) != ep.ways * ep.shots ||
      static_cast<int>(ep.support_labels.size()) != ep.ways * ep.shots)
    throw std::invalid_argument("episode: support size does not match ways*shots");
  if (static_cast<int>(ep.validation.size()) != ep.ways * ep.val_per_class ||
      static_cast<int>(ep.val_labels.size()) != ep.ways * ep.val_per_class)
    throw std::invalid_argument("episode: validation size does not match ways*val_per_class");
  for (int c = 0; c < ep.ways; ++c)
    for (int i = 0; i < ep.shots; ++i)
      if (ep.support_labels[static_cast<size_t>(c) * ep.shots + i] != c)
        throw std::invalid_argument("episode: support must be label-major");
  for (int y : ep.val_labels)
    if (y < 0 || y >= ep.ways) throw std::invalid_argument("episode: validation label out of range");
}

std::vector<Tensor*> Backbone::parameters() {
  std::vector<Tensor*> out;
  for (size_t i = 0; i < weights.size(); ++i) {
    out.push_back(&weights[i]);
    out.push_back(&biases[i]);
  }
  return out;
}

int64_t Backbone::num_params() const {
  int64_t n = 0;
  for (const Tensor& t : weights) n += t.numel();
  for (const Tensor& t : biases) n += t.numel();
  return n;
}

std::vector<NodeId> Backbone::bind(Tape& tape, bool trainable) {
  std::vector<NodeId> nodes;
  for (size_t i = 0; i < weights.size(); ++i) {
    nodes.push_back(trainable ? tape.leaf(weights[i]) : tape.constant(weights[i]));
    nodes.push_back(trainable ? tape.leaf(biases[i]) : tape.constant(biases[i]));
  }
  return nodes;
}

NodeId Backbone::forward(Tape& tape, std::span<const NodeId> layer_nodes, NodeId x) const {
  if (layer_nodes.size() != weights.size() * 2)
    throw std::invalid_argument("backbone forward: wrong number of bound layer nodes");
  int rows = tape.value(x).rows();
  if (tape.value(x).cols() != input_dim())
    throw std::invalid_argument(strcat_msg("backbone forward: input dim ", tape.value(x).cols(),
                                           ", expected ", input_dim()));
  NodeId h = x;
  for (size_t i = 0; i < weights.size(); ++i) {
    h = tape.matmul(h, layer_nodes[2 * i]);
    NodeId bias_rows = tape.matmul(ones_node(tape, rows, 1), layer_nodes[2 * i + 1]);
    h = tape.add(h, bias_rows);
    if (i + 1 < weights.size()) h = tape.relu(h);
  }
  return h;
}

std::vector<double> Backbone::embed_rows(const std::vector<double>& rows, int n) const {
  std::vector<double> cur = rows;
  int cur_cols = input_dim();
  if (static_cast<int>(cur.size()) != n * cur_cols)
    throw std::invalid_argument("backbone embed: input size mismatch");
  for (size_t layer = 0; layer < weights.size(); ++layer) {
    const Tensor& w = weights[layer];
    const Tensor& b = biases[layer];
    int out_cols = w.cols();
    std::vector<double> next(static_cast<size_t>(n) * out_cols, 0.0);
    for (int i = 0; i < n; ++i) {
      for (int k = 0; k < cur_cols; ++k) {
        double av = cur[static_cast<size_t>(i) * cur_cols + k];
        if (av == 0.0) continue;
        for (int j = 0; j < out_cols; ++j)
          next[static_cast<size_t>(i) * out_cols + j] += av * w.at(k, j);
      }
      for (int j = 0; j < out_cols; ++j) {
        double v = next[static_cast<size_t>(i) * out_cols + j] + b.at(0, j);
        if (layer + 1 < weights.size() && v < 0.0) v = 0.0;
        next[static_cast<size_t>(i) * out_cols + j] = v;
      }
    }
    cur = std::move(next);
    cur_cols = out_cols;
  }
  return cur;
}

std::vector<double> Backbone::embed(std::span<const Instance> batch) const {
  return embed_rows(batch_rows(batch), static_cast<int>(batch.size()));
}

Backbone make_backbone(std::vector<int> widths, RngStream rng) {
  if (widths.size() < 2) throw std::invalid_argument("backbone: need at least input and embedding widths");
  for (int w : widths)
    if (w < 1) throw std::invalid_argument("backbone: widths must be >= 1");
  Backbone bb;
  bb.widths = std::move(widths);
  RngStream layer_rng = rng.child("layer");
  for (size_t i = 0; i + 1 < bb.widths.size(); ++i) {
    bb.weights.push_back(init_weight(bb.widths[i], bb.widths[i + 1],
                                     layer_rng.child(static_cast<uint64_t>(i))));
    bb.biases.push_back(Tensor::zeros({1, bb.widths[i + 1]}, true));
  }
  return bb;
}

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::ProtoNet: return "protonet";
    case Variant::MatchNet: return "matchnet";
    case Variant::FoMaml: return "fomaml";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  if (name == "protonet") return Variant::ProtoNet;
  if (name == "matchnet") return Variant::MatchNet;
  if (name == "fomaml") return Variant::FoMaml;
  throw std::invalid_argument("unknown meta model variant '" + name + "'");
}

std::vector<Tensor*> MetaModel::parameters() {
  std::vector<Tensor*> out = backbone.parameters();
  if (variant == Variant::FoMaml) {
    out.push_back(&head_w);
    out.push_back(&head_b);
  }
  return out;
}

std::vector<double> MetaModel::flat_parameters() const {
  std::vector<double> out;
  auto append = [&](const Tensor& t) { out.insert(out.end(), t.data().begin(), t.data().end()); };
  for (size_t i = 0; i < backbone.weights.size(); ++i) {
    append(backbone.weights[i]);
    append(backbone.biases[i]);
  }
  if (variant == Variant::FoMaml) {
    append(head_w);
    append(head_b);
  }
  return out;
}

MetaModel make_protonet(std::vector<int> widths, RngStream rng) {
  MetaModel m;
  m.variant = Variant::ProtoNet;
  m.backbone = make_backbone(std::move(widths), rng);
  return m;
}

MetaModel make_matchnet(std::vector<int> widths, double temperature, RngStream rng) {
  if (temperature <= 0.0) throw std::invalid_argument("matchnet: temperature must be > 0");
  MetaModel m;
  m.variant = Variant::MatchNet;
  m.backbone = make_backbone(std::move(widths), rng);
  m.temperature = temperature;
  return m;
}

MetaModel make_fomaml(std::vector<int> widths, int ways, double inner_lr, int inner_steps,
                      RngStream rng) {
  if (ways < 2) throw std::invalid_argument("fomaml: ways must be >= 2");
  if (inner_lr < 0.0) throw std::invalid_argument("fomaml: inner step size must be >= 0");
  if (inner_steps < 1) throw std::invalid_argument("fomaml: inner step count must be >= 1");
  MetaModel m;
  m.variant = Variant::FoMaml;
  m.backbone = make_backbone(std::move(widths), rng);
  m.inner_lr = inner_lr;
  m.inner_steps = inner_steps;
  m.head_w = init_weight(m.backbone.embedding_dim(), ways, rng.child("head"));
  m.head_b = Tensor::zeros({1, ways}, true);
  return m;
}

MetaModel make_model(const ModelSpec& spec, int input_dim, int ways, RngStream rng) {
  std::vector<int> widths;
  widths.push_back(input_dim);
  widths.insert(widths.end(), spec.hidden.begin(), spec.hidden.end());
  widths.push_back(spec.embedding_dim);
  switch (spec.variant) {
    case Variant::ProtoNet: return make_protonet(std::move(widths), rng);
    case Variant::MatchNet: return make_matchnet(std::move(widths), spec.temperature, rng);
    case Variant::FoMaml:
      return make_fomaml(std::move(widths), ways, spec.inner_lr, spec.inner_steps, rng);
  }
  throw std::logic_error("unreachable");
}

Tensor features_tensor(std::span<const Instance> batch) {
  if (batch.empty()) throw std::invalid_argument("features_tensor: empty batch");
  int dim = static_cast<int>(batch[0].features.size());
  return Tensor({static_cast<int>(batch.size()), dim}, batch_rows(batch));
}

MetaModel fomaml_adapt(const MetaModel& model, const MetaExample& episode, double alpha,
                       int steps) {
  if (model.variant != Variant::FoMaml)
    throw std::invalid_argument("fomaml_adapt: model is not a FoMaml variant");
  if (alpha < 0.0) throw std::invalid_argument("fomaml_adapt: step size must be >= 0");
  if (steps < 1) throw std::invalid_argument("fomaml_adapt: step count must be >= 1");
  validate_episode(episode);
  if (episode.ways != model.head_ways())
    throw std::invalid_argument(strcat_msg("fomaml_adapt: model head is ", model.head_ways(),
                                           "-way, episode is ", episode.ways, "-way"));
  MetaModel adapted = model;
  if (alpha == 0.0) return adapted;

  for (int s = 0; s < steps; ++s) {
    Tape tape;
    auto bb_nodes = adapted.backbone.bind(tape, true);
    NodeId x = tape.constant(features_tensor(episode.support));
    NodeId emb = adapted.backbone.forward(tape, bb_nodes, x);
    NodeId logits = tape.add(tape.matmul(emb, tape.leaf(adapted.head_w)),
                             tape.matmul(ones_node(tape, static_cast<int>(episode.support.size()), 1),
                                         tape.leaf(adapted.head_b)));
    NodeId loss = tape.softmax_cross_entropy(logits, episode.support_labels);
    tape.backward(loss);
    for (Tensor* p : adapted.parameters()) {
      auto g = p->grad();
      auto d = p->data();
      for (size_t i = 0; i < d.size(); ++i) d[i] -= alpha * g[i];
      p->zero_grad();
    }
  }
  return adapted;
}

namespace {

struct BoundModel {
  std::vector<NodeId> bb_nodes;
  NodeId head_w = -1;
  NodeId head_b = -1;
};

// ProtoNet/MatchNet bind their own parameters; FoMaml binds the adapted
// values with gradients routed to the initialization.
BoundModel bind_model(Tape& tape, MetaModel& model, const MetaExample& episode, bool trainable) {
  BoundModel bound;
  if (model.variant == Variant::FoMaml) {
    MetaModel adapted = fomaml_adapt(model, episode, model.inner_lr, model.inner_steps);
    auto orig = model.parameters();
    auto adap = adapted.parameters();
    std::vector<NodeId> nodes;
    for (size_t i = 0; i < orig.size(); ++i)
      nodes.push_back(trainable ? tape.leaf_detached(*adap[i], *orig[i])
                                : tape.constant(*adap[i]));
    bound.head_b = nodes.back();
    nodes.pop_back();
    bound.head_w = nodes.back();
    nodes.pop_back();
    bound.bb_nodes = std::move(nodes);
  } else {
    bound.bb_nodes = model.backbone.bind(tape, trainable);
  }
  return bound;
}

NodeId protonet_logits_node(Tape& tape, const Backbone& bb, std::span<const NodeId> bb_nodes,
                            const MetaExample& ep) {
  NodeId es = bb.forward(tape, bb_nodes, tape.constant(features_tensor(ep.support)));
  NodeId eq = bb.forward(tape, bb_nodes, tape.constant(features_tensor(ep.validation)));
  NodeId protos = tape.scalar_mul(tape.matmul(tape.constant(class_sum_matrix(ep.ways, ep.shots)), es),
                                  1.0 / ep.shots);
  return tape.scalar_mul(tape.sq_euclid_pairwise(eq, protos), -1.0);
}

NodeId matchnet_probs_node(Tape& tape, const Backbone& bb, std::span<const NodeId> bb_nodes,
                           double temperature, const MetaExample& ep) {
  int ns = static_cast<int>(ep.support.size());
  int nq = static_cast<int>(ep.validation.size());
  int e = bb.embedding_dim();
  NodeId es = bb.forward(tape, bb_nodes, tape.constant(features_tensor(ep.support)));
  NodeId eq = bb.forward(tape, bb_nodes, tape.constant(features_tensor(ep.validation)));
  check_no_zero_norm(std::vector<double>(tape.value(es).data().begin(), tape.value(es).data().end()),
                     ns, e, "support");
  check_no_zero_norm(std::vector<double>(tape.value(eq).data().begin(), tape.value(eq).data().end()),
                     nq, e, "query");

  NodeId zero_row = tape.constant(Tensor::zeros({1, e}));
  NodeId qn = tape.sq_euclid_pairwise(eq, zero_row);  // [nq, 1] squared norms
  NodeId sn = tape.sq_euclid_pairwise(zero_row, es);  // [1, ns]
  NodeId dist = tape.sq_euclid_pairwise(eq, es);      // [nq, ns]
  NodeId qn_m = tape.matmul(qn, ones_node(tape, 1, ns));
  NodeId sn_m = tape.matmul(ones_node(tape, nq, 1), sn);
  NodeId dots = tape.scalar_mul(tape.sub(tape.add(qn_m, sn_m), dist), 0.5);
  NodeId norm_prod = tape.matmul(tape.sqrt(qn), tape.sqrt(sn));
  NodeId cos = tape.div(dots, norm_prod);
  NodeId scaled = tape.scalar_mul(cos, 1.0 / temperature);
  NodeId expd = tape.exp(scaled);
  NodeId row_sum = tape.matmul(expd, ones_node(tape, ns, 1));
  NodeId denom = tape.matmul(row_sum, ones_node(tape, 1, ns));
  NodeId attn = tape.div(expd, denom);
  return tape.matmul(attn, tape.constant(onehot_matrix(ep.support_labels, ep.ways)));
}

}  // namespace

EpisodeGraph build_episode_loss(Tape& tape, MetaModel& model, const MetaExample& episode,
                                bool trainable) {
  validate_episode(episode);
  EpisodeGraph g;
  BoundModel bound = bind_model(tape, model, episode, trainable);
  switch (model.variant) {
    case Variant::ProtoNet: {
      g.scores = protonet_logits_node(tape, model.backbone, bound.bb_nodes, episode);
      g.loss = tape.softmax_cross_entropy(g.scores, episode.val_labels);
      break;
    }
    case Variant::MatchNet: {
      g.scores = matchnet_probs_node(tape, model.backbone, bound.bb_nodes, model.temperature, episode);
      g.scores_are_probs = true;
      NodeId mask = tape.constant(onehot_matrix(episode.val_labels, episode.ways));
      NodeId p_true = tape.matmul(tape.mul(g.scores, mask), ones_node(tape, episode.ways, 1));
      g.loss = tape.scalar_mul(tape.mean(tape.log(p_true)), -1.0);
      break;
    }
    case Variant::FoMaml: {
      NodeId emb = model.backbone.forward(tape, bound.bb_nodes,
                                          tape.constant(features_tensor(episode.validation)));
      g.scores = tape.add(tape.matmul(emb, bound.head_w),
                          tape.matmul(ones_node(tape, static_cast<int>(episode.validation.size()), 1),
                                      bound.head_b));
      g.loss = tape.softmax_cross_entropy(g.scores, episode.val_labels);
      break;
    }
  }
  return g;
}

double episode_loss_value(const MetaModel& model, const MetaExample& episode) {
  MetaModel copy = model;
  Tape tape;
  EpisodeGraph g = build_episode_loss(tape, copy, episode, false);
  return tape.value(g.loss).at(0);
}

std::vector<std::vector<double>> protonet_scores_from_embeddings(
    const std::vector<double>& support_emb, const std::vector<double>& query_emb, int dim,
    int ways, int shots) {
  int nq = static_cast<int>(query_emb.size()) / dim;
  // Class sums scaled by 1/shots afterwards, mirroring the graph computation.
  std::vector<double> protos(static_cast<size_t>(ways) * dim, 0.0);
  for (int c = 0; c < ways; ++c)
    for (int i = 0; i < shots; ++i)
      for (int k = 0; k < dim; ++k)
        protos[static_cast<size_t>(c) * dim + k] +=
            support_emb[(static_cast<size_t>(c) * shots + i) * dim + k];
  for (double& v : protos) v *= 1.0 / shots;
  std::vector<std::vector<double>> scores(static_cast<size_t>(nq),
                                          std::vector<double>(static_cast<size_t>(ways), 0.0));
  for (int q = 0; q < nq; ++q) {
    for (int c = 0; c < ways; ++c) {
      double s = 0.0;
      for (int k = 0; k < dim; ++k) {
        double d = query_emb[static_cast<size_t>(q) * dim + k] - protos[static_cast<size_t>(c) * dim + k];
        s += d * d;
      }
      scores[static_cast<size_t>(q)][static_cast<size_t>(c)] = -s;
    }
  }
  return scores;
}

std::vector<std::vector<double>> matchnet_probs_from_embeddings(
    const std::vector<double>& support_emb, const std::vector<double>& query_emb, int dim,
    int ways, int shots, double temperature) {
  int ns = ways * shots;
  int nq = static_cast<int>(query_emb.size()) / dim;
  check_no_zero_norm(support_emb, ns, dim, "support");
  check_no_zero_norm(query_emb, nq, dim, "query");
  std::vector<std::vector<double>> probs(static_cast<size_t>(nq),
                                         std::vector<double>(static_cast<size_t>(ways), 0.0));
  for (int q = 0; q < nq; ++q) {
    std::vector<double> att(static_cast<size_t>(ns));
    double denom = 0.0;
    double qn = 0.0;
    for (int k = 0; k < dim; ++k) {
      double v = query_emb[static_cast<size_t>(q) * dim + k];
      qn += v * v;
    }
    for (int j = 0; j < ns; ++j) {
      double dot = 0.0, sn = 0.0;
      for (int k = 0; k < dim; ++k) {
        double sv = support_emb[static_cast<size_t>(j) * dim + k];
        dot += query_emb[static_cast<size_t>(q) * dim + k] * sv;
        sn += sv * sv;
      }
      att[static_cast<size_t>(j)] = std::exp(dot / (std::sqrt(qn) * std::sqrt(sn)) / temperature);
      denom += att[static_cast<size_t>(j)];
    }
    for (int j = 0; j < ns; ++j)
      probs[static_cast<size_t>(q)][static_cast<size_t>(j / shots)] += att[static_cast<size_t>(j)] / denom;
  }
  return probs;
}

int argmax_label(std::span<const double> scores) {
  int best = 0;
  for (int c = 1; c < static_cast<int>(scores.size()); ++c)
    if (scores[static_cast<size_t>(c)] > scores[static_cast<size_t>(best)]) best = c;
  return best;
}

std::vector<int> predict_labels(const std::vector<std::vector<double>>& scores) {
  std::vector<int> out;
  out.reserve(scores.size());
  for (const auto& row : scores) out.push_back(argmax_label(row));
  return out;
}

std::vector<std::vector<double>> episode_scores(const MetaModel& model,
                                                const MetaExample& episode) {
  validate_episode(episode);
  switch (model.variant) {
    case Variant::ProtoNet: {
      auto es = model.backbone.embed(episode.support);
      auto eq = model.backbone.embed(episode.validation);
      return protonet_scores_from_embeddings(es, eq, model.backbone.embedding_dim(), episode.ways,
                                             episode.shots);
    }
    case Variant::MatchNet: {
      auto es = model.backbone.embed(episode.support);
      auto eq = model.backbone.embed(episode.validation);
      // Class score = log-sum-exp of scaled cosines over the class's support
      // items; softmax of these equals the attention class distribution.
      check_no_zero_norm(es, static_cast<int>(episode.support.size()),
                         model.backbone.embedding_dim(), "support");
      check_no_zero_norm(eq, static_cast<int>(episode.validation.size()),
                         model.backbone.embedding_dim(), "query");
      int dim = model.backbone.embedding_dim();
      int ns = static_cast<int>(episode.support.size());
      int nq = static_cast<int>(episode.validation.size());
      std::vector<std::vector<double>> scores(static_cast<size_t>(nq));
      for (int q = 0; q < nq; ++q) {
        std::vector<double> per_class(static_cast<size_t>(episode.ways),
                                      -std::numeric_limits<double>::infinity());
        for (int j = 0; j < ns; ++j) {
          double dot = 0.0, sn = 0.0, qn = 0.0;
          for (int k = 0; k < dim; ++k) {
            double sv = es[static_cast<size_t>(j) * dim + k];
            double qv = eq[static_cast<size_t>(q) * dim + k];
            dot += qv * sv;
            sn += sv * sv;
            qn += qv * qv;
          }
          double s = dot / (std::sqrt(qn) * std::sqrt(sn)) / model.temperature;
          int c = j / episode.shots;
          double& cur = per_class[static_cast<size_t>(c)];
          cur = cur == -std::numeric_limits<double>::infinity()
                    ? s
                    : std::max(cur, s) + std::log1p(std::exp(-std::fabs(cur - s)));
        }
        scores[static_cast<size_t>(q)] = std::move(per_class);
      }
      return scores;
    }
    case Variant::FoMaml: {
      MetaModel adapted = fomaml_adapt(model, episode, model.inner_lr, model.inner_steps);
      auto emb = adapted.backbone.embed(episode.validation);
      int e = adapted.backbone.embedding_dim();
      int nq = static_cast<int>(episode.validation.size());
      int ways = adapted.head_ways();
      std::vector<std::vector<double>> scores(static_cast<size_t>(nq),
                                              std::vector<double>(static_cast<size_t>(ways), 0.0));
      for (int q = 0; q < nq; ++q)
        for (int c = 0; c < ways; ++c) {
          double s = adapted.head_b.at(0, c);
          for (int k = 0; k < e; ++k) s += emb[static_cast<size_t>(q) * e + k] * adapted.head_w.at(k, c);
          scores[static_cast<size_t>(q)][static_cast<size_t>(c)] = s;
        }
      return scores;
    }
  }
  throw std::logic_error("unreachable");
}

double episode_accuracy(const MetaModel& model, const MetaExample& episode) {
  auto labels = predict_labels(episode_scores(model, episode));
  int correct = 0;
  for (size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == episode.val_labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double model_space_loss(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw std::invalid_argument(strcat_msg("model_space_loss: parameter vectors of length ",
                                           a.size(), " vs ", b.size()));
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

double model_space_loss(const MetaModel& a, const MetaModel& b) {
  auto fa = a.flat_parameters();
  auto fb = b.flat_parameters();
  return model_space_loss(std::span<const double>(fa), std::span<const double>(fb));
}

namespace {

void write_block(std::string& out, const std::string& name, const Tensor& t) {
  out += "param " + name + " ";
  if (t.shape().empty()) {
    out += "scalar";
  } else {
    for (size_t i = 0; i < t.shape().size(); ++i) {
      if (i) out += 'x';
      out += std::to_string(t.shape()[i]);
    }
  }
  out += '\n';
  bool first = true;
  for (double v : t.data()) {
    if (!first) out += ' ';
    out += format_double(v);
    first = false;
  }
  out += '\n';
}

}  // namespace

std::string serialize_model(const MetaModel& model) {
  std::string out = std::string("metaepi-model v1 variant=") + variant_name(model.variant) + "\n";
  for (size_t i = 0; i < model.backbone.weights.size(); ++i) {
    write_block(out, "backbone.w" + std::to_string(i), model.backbone.weights[i]);
    write_block(out, "backbone.b" + std::to_string(i), model.backbone.biases[i]);
  }
  if (model.variant == Variant::MatchNet)
    write_block(out, "hyper.temperature", Tensor::scalar(model.temperature));
  if (model.variant == Variant::FoMaml) {
    write_block(out, "head.w", model.head_w);
    write_block(out, "head.b", model.head_b);
    write_block(out, "hyper.inner_lr", Tensor::scalar(model.inner_lr));
    write_block(out, "hyper.inner_steps", Tensor::scalar(static_cast<double>(model.inner_steps)));
  }
  return out;
}

MetaModel parse_model(const std::string& text) {
  std::vector<std::string_view> lines;
  {
    size_t pos = 0;
    while (pos <= text.size()) {
      size_t end = text.find('\n', pos);
      if (end == std::string::npos) end = text.size();
      lines.emplace_back(text.data() + pos, end - pos);
      pos = end + 1;
      if (end == text.size()) break;
    }
  }
  if (lines.empty()) throw std::runtime_error("model file: empty");
  auto header = split(lines[0], ' ');
  if (header.size() != 3 || header[0] != "metaepi-model")
    throw std::runtime_error("model file: malformed header");
  if (header[1] != "v1")
    throw std::runtime_error("model file: unsupported version '" + std::string(header[1]) + "'");
  if (header[2].substr(0, 8) != "variant=")
    throw std::runtime_error("model file: missing variant");
  Variant variant = parse_variant(std::string(header[2].substr(8)));

  std::map<std::string, Tensor> blocks;
  size_t li = 1;
  while (li < lines.size()) {
    if (lines[li].empty()) {
      ++li;
      continue;
    }
    auto head = split(lines[li], ' ');
    if (head.size() != 3 || head[0] != "param")
      throw std::runtime_error("model file: expected 'param <name> <shape>' line");
    std::vector<int> shape;
    if (head[2] != "scalar")
      for (auto d : split(head[2], 'x')) shape.push_back(static_cast<int>(parse_long(d)));
    if (li + 1 >= lines.size()) throw std::runtime_error("model file: missing values line");
    std::vector<double> values;
    if (!lines[li + 1].empty())
      for (auto v : split(lines[li + 1], ' ')) values.push_back(parse_double(v));
    blocks.emplace(std::string(head[1]), Tensor(shape, std::move(values)));
    li += 2;
  }

  auto take = [&](const std::string& name) {
    auto it = blocks.find(name);
    if (it == blocks.end()) throw std::runtime_error("model file: missing block '" + name + "'");
    Tensor t = std::move(it->second);
    blocks.erase(it);
    return t;
  };

  MetaModel m;
  m.variant = variant;
  for (int i = 0;; ++i) {
    std::string wname = "backbone.w" + std::to_string(i);
    if (blocks.find(wname) == blocks.end()) break;
    Tensor w = take(wname);
    Tensor b = take("backbone.b" + std::to_string(i));
    if (i == 0) m.backbone.widths.push_back(w.rows());
    if (w.rows() != m.backbone.widths.back() || b.cols() != w.cols())
      throw std::runtime_error("model file: inconsistent layer shapes");
    m.backbone.widths.push_back(w.cols());
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    m.backbone.weights.push_back(std::move(w));
    m.backbone.biases.push_back(std::move(b));
  }
  if (m.backbone.weights.empty()) throw std::runtime_error("model file: no backbone layers");
  if (variant == Variant::MatchNet) m.temperature = take("hyper.temperature").at(0);
  if (variant == Variant::FoMaml) {
    m.head_w = take("head.w");
    m.head_b = take("head.b");
    m.head_w.set_requires_grad(true);
    m.head_b.set_requires_grad(true);
    m.inner_lr = take("hyper.inner_lr").at(0);
    m.inner_steps = static_cast<int>(take("hyper.inner_steps").at(0));
  }
  if (!blocks.empty())
    throw std::runtime_error("model file: unexpected block '" + blocks.begin()->first + "'");
  return m;
}

void save_model(const MetaModel& model, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << serialize_model(model);
  if (!f) throw std::runtime_error("write failed: " + path);
}

MetaModel load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_model(text);
}

}  // namespace metaepi::models
