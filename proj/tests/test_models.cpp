#include "metaepi/models.hpp"

#include <stdexcept>
#include <cmath>

#include <doctest.h>

using namespace metaepi;
using ad::NodeId;
using ad::Tape;
using ad::Tensor;
using models::MetaModel;
using taskgen::Instance;
using taskgen::MetaExample;

namespace {

Instance inst(std::vector<double> f, int cls = 0, int dom = 0) {
  Instance i;
  i.features = std::move(f);
  i.class_id = cls;
  i.domain_id = dom;
  return i;
}

// Hand-built label-major episode from explicit feature rows.
MetaExample make_episode(int ways, int shots, int val_per_class,
                         const std::vector<std::vector<double>>& support,
                         const std::vector<std::vector<double>>& validation,
                         std::vector<int> val_labels) {
  MetaExample ep;
  ep.ways = ways;
  ep.shots = shots;
  ep.val_per_class = val_per_class;
  for (int c = 0; c < ways; ++c)
    for (int k = 0; k < shots; ++k) {
      ep.support.push_back(inst(support[static_cast<size_t>(c * shots + k)], c));
      ep.support_labels.push_back(c);
    }
  for (size_t q = 0; q < validation.size(); ++q) {
    ep.validation.push_back(inst(validation[q], val_labels[q]));
    ep.val_labels.push_back(val_labels[q]);
  }
  for (int c = 0; c < ways; ++c) ep.episode_class_ids.push_back(c);
  return ep;
}

// label-major validation labels: val_per_class copies of each label
std::vector<int> block_labels(int ways, int per_class) {
  std::vector<int> out;
  for (int c = 0; c < ways; ++c)
    for (int i = 0; i < per_class; ++i) out.push_back(c);
  return out;
}

models::Backbone identity_backbone(int dim) {
  models::Backbone bb;
  bb.widths = {dim, dim};
  Tensor w = Tensor::zeros({dim, dim}, true);
  for (int i = 0; i < dim; ++i) w.at(i, i) = 1.0;
  bb.weights.push_back(std::move(w));
  bb.biases.push_back(Tensor::zeros({1, dim}, true));
  return bb;
}

MetaExample separated_episode(int ways, int val_per_class, double spread) {
  // 1-D-per-class corners of a scaled simplex in `ways` dims.
  std::vector<std::vector<double>> support, validation;
  std::vector<int> labels;
  for (int c = 0; c < ways; ++c) {
    std::vector<double> v(static_cast<size_t>(ways), 0.0);
    v[static_cast<size_t>(c)] = spread;
    support.push_back(v);
    for (int i = 0; i < val_per_class; ++i) {
      std::vector<double> q = v;
      q[static_cast<size_t>((c + 1) % ways)] += 0.125 * (i + 1);
      validation.push_back(q);
      labels.push_back(c);
    }
  }
  return make_episode(ways, 1, val_per_class, support, validation, labels);
}

}  // namespace

TEST_CASE("zero backbone maps everything to zero embeddings") {
  models::Backbone bb;
  bb.widths = {3, 2};
  bb.weights.push_back(Tensor::zeros({3, 2}, true));
  bb.biases.push_back(Tensor::zeros({1, 2}, true));
  std::vector<Instance> batch = {inst({1.0, 2.0, 3.0}), inst({-1.0, 0.5, 0.0})};
  auto emb = bb.embed(batch);
  for (double v : emb) CHECK(v == 0.0);
}

TEST_CASE("identity layer reproduces its inputs, on and off the tape") {
  models::Backbone bb = identity_backbone(3);
  std::vector<Instance> batch = {inst({1.5, -2.0, 0.25})};
  auto emb = bb.embed(batch);
  CHECK(emb == std::vector<double>{1.5, -2.0, 0.25});
  Tape tape;
  auto nodes = bb.bind(tape, false);
  NodeId out = bb.forward(tape, nodes, tape.constant(models::features_tensor(batch)));
  CHECK(tape.value(out).at(0) == 1.5);
  CHECK(tape.value(out).at(1) == -2.0);
  CHECK(tape.value(out).at(2) == 0.25);
}

TEST_CASE("tape and plain backbone forward agree bitwise") {
  RngStream rng(3);
  models::Backbone bb = models::make_backbone({4, 8, 3}, rng);
  std::vector<Instance> batch;
  RngStream xr = rng.child("x");
  for (int i = 0; i < 5; ++i) {
    std::vector<double> f;
    for (int k = 0; k < 4; ++k) f.push_back(xr.next_gaussian());
    batch.push_back(inst(std::move(f)));
  }
  auto plain = bb.embed(batch);
  Tape tape;
  auto nodes = bb.bind(tape, false);
  NodeId out = bb.forward(tape, nodes, tape.constant(models::features_tensor(batch)));
  for (int64_t i = 0; i < tape.value(out).numel(); ++i)
    CHECK(tape.value(out).at(i) == plain[static_cast<size_t>(i)]);
}

TEST_CASE("backbone gradients match finite differences") {
  RngStream rng(9);
  models::Backbone bb = models::make_backbone({3, 6, 2}, rng);
  std::vector<Instance> batch;
  RngStream xr = rng.child("x");
  for (int i = 0; i < 4; ++i) {
    std::vector<double> f;
    for (int k = 0; k < 3; ++k) f.push_back(xr.next_gaussian());
    batch.push_back(inst(std::move(f)));
  }
  auto eval = [&]() {
    Tape tape;
    auto nodes = bb.bind(tape, false);
    NodeId out = bb.forward(tape, nodes, tape.constant(models::features_tensor(batch)));
    return tape.value(tape.mean(out)).at(0);
  };
  {
    Tape tape;
    auto nodes = bb.bind(tape, true);
    NodeId out = bb.forward(tape, nodes, tape.constant(models::features_tensor(batch)));
    tape.backward(tape.mean(out));
  }
  const double h = 1e-5;
  for (Tensor* p : bb.parameters()) {
    std::vector<double> grads(p->grad().begin(), p->grad().end());
    for (int64_t j = 0; j < p->numel(); ++j) {
      double saved = p->at(j);
      p->at(j) = saved + h;
      double up = eval();
      p->at(j) = saved - h;
      double down = eval();
      p->at(j) = saved;
      double fd = (up - down) / (2 * h);
      double g = grads[static_cast<size_t>(j)];
      CHECK(std::fabs(g - fd) / std::max({std::fabs(g), std::fabs(fd), 1e-4}) < 1e-4);
    }
    p->zero_grad();
  }
}

TEST_CASE("protonet predicts the class whose prototype matches the query") {
  MetaExample ep = make_episode(
      3, 1, 1, {{0.0, 0.0}, {4.0, 0.0}, {0.0, 4.0}},
      {{0.0, 0.0}, {4.0, 0.0}, {0.0, 4.0}}, {0, 1, 2});
  MetaModel m;
  m.variant = models::Variant::ProtoNet;
  m.backbone = identity_backbone(2);
  auto scores = models::episode_scores(m, ep);
  CHECK(scores[2][2] == 0.0);  // zero distance to its own prototype
  CHECK(scores[2][0] < 0.0);
  CHECK(models::predict_labels(scores) == std::vector<int>{0, 1, 2});
  CHECK(models::episode_accuracy(m, ep) == 1.0);
}

TEST_CASE("protonet hand arithmetic in one dimension") {
  MetaExample ep = make_episode(2, 1, 1, {{0.0}, {2.0}}, {{0.5}, {1.5}}, {0, 1});
  MetaModel m;
  m.variant = models::Variant::ProtoNet;
  m.backbone = identity_backbone(1);
  auto scores = models::episode_scores(m, ep);
  CHECK(scores[0][0] == doctest::Approx(-0.25).epsilon(1e-15));
  CHECK(scores[0][1] == doctest::Approx(-2.25).epsilon(1e-15));
  CHECK(models::predict_labels(scores)[0] == 0);
}

TEST_CASE("three-shot prototypes equal the direct average of support embeddings") {
  RngStream rng(21);
  std::vector<std::vector<double>> support;
  for (int i = 0; i < 6; ++i) {
    std::vector<double> v;
    for (int k = 0; k < 3; ++k) v.push_back(rng.next_gaussian());
    support.push_back(v);
  }
  std::vector<std::vector<double>> queries = {{0.1, 0.2, 0.3}};
  MetaExample ep = make_episode(2, 3, 1, support, {queries[0], queries[0]}, {0, 1});
  MetaModel m;
  m.variant = models::Variant::ProtoNet;
  m.backbone = identity_backbone(3);
  auto scores = models::episode_scores(m, ep);
  for (int c = 0; c < 2; ++c) {
    std::vector<double> proto(3, 0.0);
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 3; ++k) proto[static_cast<size_t>(k)] += support[static_cast<size_t>(c * 3 + i)][static_cast<size_t>(k)];
    double d = 0.0;
    for (int k = 0; k < 3; ++k) {
      double diff = queries[0][static_cast<size_t>(k)] - proto[static_cast<size_t>(k)] / 3.0;
      d += diff * diff;
    }
    CHECK(scores[0][static_cast<size_t>(c)] == doctest::Approx(-d).epsilon(1e-12));
  }
}

TEST_CASE("protonet logits are invariant to translating every embedding") {
  // dyadic embeddings: the translation is exact in double precision
  std::vector<double> sup = {0.25, 1.5, -0.75, 2.0, 0.5, -1.25};
  std::vector<double> qry = {0.125, -0.5, 1.75, 0.25};
  auto base = models::protonet_scores_from_embeddings(sup, qry, 2, 3, 1);
  std::vector<double> sup_t = sup, qry_t = qry;
  for (size_t i = 0; i < sup_t.size(); i += 2) {
    sup_t[i] += 2.5;
    sup_t[i + 1] += -4.25;
  }
  for (size_t i = 0; i < qry_t.size(); i += 2) {
    qry_t[i] += 2.5;
    qry_t[i + 1] += -4.25;
  }
  auto shifted = models::protonet_scores_from_embeddings(sup_t, qry_t, 2, 3, 1);
  CHECK(base == shifted);
}

TEST_CASE("matchnet with identical support embeddings is uniform over items") {
  std::vector<double> sup = {1.0, 1.0, 1.0, 1.0, 1.0, 1.0};  // 3 identical items
  std::vector<double> qry = {0.5, 2.0};
  auto probs = models::matchnet_probs_from_embeddings(sup, qry, 2, 3, 1, 1.0);
  for (int c = 0; c < 3; ++c) CHECK(probs[0][static_cast<size_t>(c)] == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("matchnet hand-evaluated two-support attention") {
  // cosines 0.9 and 0.1 against the query
  double a1 = std::acos(0.9), a2 = std::acos(0.1);
  std::vector<double> sup = {std::cos(a1), std::sin(a1), std::cos(a2), std::sin(a2)};
  std::vector<double> qry = {1.0, 0.0};
  auto probs = models::matchnet_probs_from_embeddings(sup, qry, 2, 2, 1, 1.0);
  double e9 = std::exp(0.9), e1 = std::exp(0.1);
  CHECK(probs[0][0] == doctest::Approx(e9 / (e9 + e1)).epsilon(1e-9));
  CHECK(probs[0][1] == doctest::Approx(e1 / (e9 + e1)).epsilon(1e-9));
  CHECK(probs[0][0] == doctest::Approx(0.6900).epsilon(1e-3));
}

TEST_CASE("matchnet temperature to zero concentrates on the nearest item") {
  double a1 = std::acos(0.9), a2 = std::acos(0.1);
  std::vector<double> sup = {std::cos(a2), std::sin(a2), std::cos(a1), std::sin(a1)};
  std::vector<double> qry = {1.0, 0.0};
  auto probs = models::matchnet_probs_from_embeddings(sup, qry, 2, 2, 1, 0.01);
  CHECK(probs[0][1] > 0.999999);  // class 1 holds the most similar item
}

TEST_CASE("matchnet distribution sums to one and scales out of the cosines") {
  RngStream rng(13);
  for (int t = 0; t < 20; ++t) {
    RngStream r = rng.child(static_cast<uint64_t>(t));
    std::vector<double> sup, qry;
    for (int i = 0; i < 6; ++i) sup.push_back(r.next_gaussian() + 0.1);
    for (int i = 0; i < 4; ++i) qry.push_back(r.next_gaussian() + 0.1);
    auto probs = models::matchnet_probs_from_embeddings(sup, qry, 2, 3, 1, 0.7);
    for (const auto& row : probs) {
      double s = 0.0;
      for (double v : row) s += v;
      CHECK(std::fabs(s - 1.0) < 1e-12);
    }
    std::vector<double> sup_s = sup, qry_s = qry;
    for (double& v : sup_s) v *= 3.7;
    for (double& v : qry_s) v *= 0.21;
    auto scaled = models::matchnet_probs_from_embeddings(sup_s, qry_s, 2, 3, 1, 0.7);
    for (size_t q = 0; q < probs.size(); ++q)
      for (size_t c = 0; c < probs[q].size(); ++c)
        CHECK(std::fabs(probs[q][c] - scaled[q][c]) < 1e-12);
  }
}

TEST_CASE("matchnet rejects zero-norm embeddings") {
  std::vector<double> sup = {0.0, 0.0, 1.0, 0.0};
  std::vector<double> qry = {1.0, 1.0};
  CHECK_THROWS_AS(models::matchnet_probs_from_embeddings(sup, qry, 2, 2, 1, 1.0),
                  std::runtime_error);
}

TEST_CASE("one-shot protonet argmax equals the direct similarity rule") {
  RngStream rng(29);
  for (int t = 0; t < 30; ++t) {
    RngStream r = rng.child(static_cast<uint64_t>(t));
    std::vector<double> sup, qry;
    for (int i = 0; i < 10; ++i) sup.push_back(r.next_gaussian());
    for (int i = 0; i < 2; ++i) qry.push_back(r.next_gaussian());
    auto scores = models::protonet_scores_from_embeddings(sup, qry, 2, 5, 1);
    int from_scores = models::argmax_label(scores[0]);
    int direct = 0;
    double best = -1.0;
    for (int c = 0; c < 5; ++c) {
      double d = 0.0;
      for (int k = 0; k < 2; ++k) {
        double diff = qry[static_cast<size_t>(k)] - sup[static_cast<size_t>(c * 2 + k)];
        d += diff * diff;
      }
      double sim = std::exp(-d);
      if (sim > best) {
        best = sim;
        direct = c;
      }
    }
    CHECK(from_scores == direct);
  }
}

TEST_CASE("fomaml with zero step size is the identity") {
  RngStream rng(31);
  MetaModel m = models::make_fomaml({2, 4, 3}, 2, 0.0, 3, rng);
  MetaExample ep = make_episode(2, 1, 2, {{1.0, 0.0}, {0.0, 1.0}},
                                {{1.0, 0.1}, {0.9, 0.0}, {0.1, 1.0}, {0.0, 0.9}},
                                block_labels(2, 2));
  MetaModel adapted = models::fomaml_adapt(m, ep, 0.0, 3);
  CHECK(models::model_space_loss(m, adapted) == 0.0);
  // episode_loss equals the unadapted validation loss exactly
  MetaModel copy = m;
  double adapted_loss = models::episode_loss_value(m, ep);
  Tape tape;
  auto nodes = copy.backbone.bind(tape, false);
  NodeId emb = copy.backbone.forward(tape, nodes, tape.constant(models::features_tensor(ep.validation)));
  NodeId logits = tape.add(tape.matmul(emb, tape.constant(copy.head_w)),
                           tape.matmul(tape.constant(Tensor::full({4, 1}, 1.0)),
                                       tape.constant(copy.head_b)));
  double direct = tape.value(tape.softmax_cross_entropy(logits, ep.val_labels)).at(0);
  CHECK(adapted_loss == direct);
}

TEST_CASE("one gradient-descent step on a scalar squared loss by hand") {
  // h(x) = theta * x, squared loss at (x=1, y=1), theta=0, alpha=0.5:
  // gradient -2, one step lands exactly on theta=1.
  Tensor theta({1, 1}, {0.0}, true);
  Tape tape;
  NodeId pred = tape.matmul(tape.constant(Tensor({1, 1}, {1.0})), tape.leaf(theta));
  NodeId loss = tape.sum(tape.sq_euclid_pairwise(pred, tape.constant(Tensor({1, 1}, {1.0}))));
  tape.backward(loss);
  CHECK(theta.grad()[0] == -2.0);
  theta.at(0) -= 0.5 * theta.grad()[0];
  CHECK(theta.at(0) == 1.0);
}

TEST_CASE("multi-step adaptation composes single steps") {
  RngStream rng(37);
  MetaModel m = models::make_fomaml({2, 4, 3}, 2, 0.1, 1, rng);
  MetaExample ep = make_episode(2, 2, 1, {{1.0, 0.0}, {0.8, 0.1}, {0.0, 1.0}, {0.1, 0.9}},
                                {{0.9, 0.0}, {0.0, 0.8}}, {0, 1});
  MetaModel three = models::fomaml_adapt(m, ep, 0.1, 3);
  MetaModel composed = models::fomaml_adapt(
      models::fomaml_adapt(models::fomaml_adapt(m, ep, 0.1, 1), ep, 0.1, 1), ep, 0.1, 1);
  CHECK(models::model_space_loss(three, composed) == 0.0);
}

TEST_CASE("episode loss saturates under perfect separation and is ln C when uniform") {
  MetaModel m;
  m.variant = models::Variant::ProtoNet;
  m.backbone = identity_backbone(5);
  MetaExample sep = separated_episode(5, 2, 12.0);  // distances differ by >= 144
  CHECK(models::episode_loss_value(m, sep) < 1e-12);

  std::vector<std::vector<double>> same(5, std::vector<double>(5, 0.3));
  std::vector<std::vector<double>> queries(5, std::vector<double>(5, 0.3));
  MetaExample uniform = make_episode(5, 1, 1, same, queries, block_labels(5, 1));
  CHECK(models::episode_loss_value(m, uniform) == std::log(5.0));
  CHECK(models::episode_loss_value(m, uniform) >= 0.0);
}

TEST_CASE("episode loss gradients match finite differences for every variant") {
  RngStream rng(43);
  std::vector<std::vector<double>> support, validation;
  RngStream xr = rng.child("x");
  for (int i = 0; i < 3; ++i) {
    support.push_back({xr.next_gaussian(), xr.next_gaussian()});
  }
  std::vector<int> labels;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 2; ++i) {
      validation.push_back({xr.next_gaussian(), xr.next_gaussian()});
      labels.push_back(c);
    }
  MetaExample ep = make_episode(3, 1, 2, support, validation, labels);

  // The first-order rule differentiates the validation loss with respect to
  // the adapted parameters (inner Jacobian treated as identity), so the
  // FoMaml oracle perturbs post-adaptation: probe holds the adapted values
  // with a zero inner step, and finite differences run on the probe.
  auto check_model = [&](MetaModel model) {
    MetaModel probe = model;
    if (model.variant == models::Variant::FoMaml) {
      probe = models::fomaml_adapt(model, ep, model.inner_lr, model.inner_steps);
      probe.inner_lr = 0.0;
    }
    std::vector<Tensor*> params = model.parameters();
    std::vector<Tensor*> probe_params = probe.parameters();
    {
      Tape tape;
      models::EpisodeGraph g = models::build_episode_loss(tape, model, ep, true);
      tape.backward(g.loss);
    }
    const double h = 1e-5;
    for (size_t i = 0; i < params.size(); ++i) {
      std::vector<double> grads(params[i]->grad().begin(), params[i]->grad().end());
      Tensor* fp = probe_params[i];
      for (int64_t j = 0; j < fp->numel(); ++j) {
        double saved = fp->at(j);
        fp->at(j) = saved + h;
        double up = models::episode_loss_value(probe, ep);
        fp->at(j) = saved - h;
        double down = models::episode_loss_value(probe, ep);
        fp->at(j) = saved;
        double fd = (up - down) / (2 * h);
        double g = grads[static_cast<size_t>(j)];
        CHECK(std::fabs(g - fd) / std::max({std::fabs(g), std::fabs(fd), 1e-4}) < 1e-4);
      }
      params[i]->zero_grad();
    }
  };

  check_model(models::make_protonet({2, 5, 3}, rng.child(1)));
  check_model(models::make_matchnet({2, 5, 3}, 0.8, rng.child(2)));
  check_model(models::make_fomaml({2, 5, 3}, 3, 0.05, 1, rng.child(3)));
}

TEST_CASE("graph and numeric scorers agree for protonet and matchnet") {
  RngStream rng(83);
  std::vector<std::vector<double>> support, validation;
  std::vector<int> labels;
  RngStream xr = rng.child("x");
  for (int i = 0; i < 6; ++i) support.push_back({xr.next_gaussian(), xr.next_gaussian()});
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 2; ++i) {
      validation.push_back({xr.next_gaussian(), xr.next_gaussian()});
      labels.push_back(c);
    }
  MetaExample ep = make_episode(3, 2, 2, support, validation, labels);

  {
    MetaModel m = models::make_protonet({2, 6, 3}, rng.child(1));
    auto numeric = models::episode_scores(m, ep);
    Tape tape;
    models::EpisodeGraph g = models::build_episode_loss(tape, m, ep, false);
    const Tensor& graph_scores = tape.value(g.scores);
    for (int q = 0; q < graph_scores.rows(); ++q)
      for (int c = 0; c < graph_scores.cols(); ++c)
        CHECK(graph_scores.at(q, c) == numeric[static_cast<size_t>(q)][static_cast<size_t>(c)]);
  }
  {
    // matchnet: softmax of the numeric per-class log-sum-exp scores equals
    // the graph's attention class distribution
    MetaModel m = models::make_matchnet({2, 6, 3}, 0.9, rng.child(2));
    auto lse_scores = models::episode_scores(m, ep);
    Tape tape;
    models::EpisodeGraph g = models::build_episode_loss(tape, m, ep, false);
    const Tensor& graph_probs = tape.value(g.scores);
    REQUIRE(g.scores_are_probs);
    for (int q = 0; q < graph_probs.rows(); ++q) {
      double mx = lse_scores[static_cast<size_t>(q)][0];
      for (int c = 1; c < 3; ++c) mx = std::max(mx, lse_scores[static_cast<size_t>(q)][static_cast<size_t>(c)]);
      double z = 0.0;
      for (int c = 0; c < 3; ++c) z += std::exp(lse_scores[static_cast<size_t>(q)][static_cast<size_t>(c)] - mx);
      for (int c = 0; c < 3; ++c) {
        double p = std::exp(lse_scores[static_cast<size_t>(q)][static_cast<size_t>(c)] - mx) / z;
        CHECK(std::fabs(graph_probs.at(q, c) - p) < 1e-12);
      }
    }
  }
}

TEST_CASE("gradients accumulate across tapes like a summed objective") {
  RngStream rng(89);
  Tensor w({2, 2}, {0.4, -0.3, 0.8, 0.1}, true);
  Tensor x1({1, 2}, {1.0, 2.0});
  Tensor x2({1, 2}, {-0.5, 0.7});
  auto loss_grads = [&](const Tensor& x) {
    Tensor wc = w;
    Tape tape;
    tape.backward(tape.softmax_cross_entropy(tape.matmul(tape.constant(x), tape.leaf(wc)), {0}));
    return std::vector<double>(wc.grad().begin(), wc.grad().end());
  };
  auto g1 = loss_grads(x1);
  auto g2 = loss_grads(x2);
  // two backward passes into one tensor, separate tapes
  Tensor wc = w;
  {
    Tape tape;
    tape.backward(tape.softmax_cross_entropy(tape.matmul(tape.constant(x1), tape.leaf(wc)), {0}));
  }
  {
    Tape tape;
    tape.backward(tape.softmax_cross_entropy(tape.matmul(tape.constant(x2), tape.leaf(wc)), {0}));
  }
  for (size_t i = 0; i < g1.size(); ++i)
    CHECK(wc.grad()[i] == doctest::Approx(g1[i] + g2[i]).epsilon(1e-15));
}

TEST_CASE("model space loss basics and elementwise oracle") {
  std::vector<double> a = {1.0, 0.0};
  std::vector<double> b = {0.0, 1.0};
  CHECK(models::model_space_loss(std::span<const double>(a), std::span<const double>(a)) == 0.0);
  CHECK(models::model_space_loss(std::span<const double>(a), std::span<const double>(b)) == 2.0);
  RngStream rng(51);
  std::vector<double> x, y;
  for (int i = 0; i < 17; ++i) {
    x.push_back(rng.next_gaussian());
    y.push_back(rng.next_gaussian());
  }
  double expected = 0.0;
  for (int i = 0; i < 17; ++i) expected += (x[static_cast<size_t>(i)] - y[static_cast<size_t>(i)]) * (x[static_cast<size_t>(i)] - y[static_cast<size_t>(i)]);
  CHECK(models::model_space_loss(std::span<const double>(x), std::span<const double>(y)) ==
        doctest::Approx(expected).epsilon(1e-15));
  std::vector<double> shorter = {1.0};
  CHECK_THROWS_AS(models::model_space_loss(std::span<const double>(x), std::span<const double>(shorter)),
                  std::invalid_argument);
}

TEST_CASE("accuracy of a constant predictor on a balanced episode is chance") {
  MetaModel m;
  m.variant = models::Variant::ProtoNet;
  m.backbone.widths = {2, 2};
  m.backbone.weights.push_back(Tensor::zeros({2, 2}, true));
  m.backbone.biases.push_back(Tensor::zeros({1, 2}, true));
  std::vector<std::vector<double>> support(5, {0.0, 0.0});
  for (int c = 0; c < 5; ++c) support[static_cast<size_t>(c)] = {double(c), 1.0};
  std::vector<std::vector<double>> validation;
  for (int i = 0; i < 15; ++i) validation.push_back({double(i), 2.0});
  MetaExample ep = make_episode(5, 1, 3, support, validation, block_labels(5, 3));
  // zero backbone: every score ties, argmax falls to label 0
  CHECK(models::episode_accuracy(m, ep) == 0.2);
}

TEST_CASE("accuracy counts correct argmax predictions") {
  MetaModel m;
  m.variant = models::Variant::ProtoNet;
  m.backbone = identity_backbone(1);
  MetaExample ep = make_episode(2, 1, 2, {{0.0}, {10.0}},
                                {{0.1}, {0.2}, {9.9}, {0.3}}, {0, 0, 1, 1});
  CHECK(models::episode_accuracy(m, ep) == 0.75);
  MetaExample all = make_episode(2, 1, 2, {{0.0}, {10.0}},
                                 {{0.1}, {0.2}, {9.9}, {9.8}}, {0, 0, 1, 1});
  CHECK(models::episode_accuracy(m, all) == 1.0);
}

TEST_CASE("checkpoints round-trip for every variant") {
  RngStream rng(61);
  for (int v = 0; v < 3; ++v) {
    MetaModel m;
    if (v == 0) m = models::make_protonet({3, 4, 2}, rng.child(static_cast<uint64_t>(v)));
    if (v == 1) m = models::make_matchnet({3, 4, 2}, 0.37, rng.child(static_cast<uint64_t>(v)));
    if (v == 2) m = models::make_fomaml({3, 4, 2}, 4, 0.025, 2, rng.child(static_cast<uint64_t>(v)));
    std::string text = models::serialize_model(m);
    MetaModel parsed = models::parse_model(text);
    CHECK(models::serialize_model(parsed) == text);
    CHECK(parsed.variant == m.variant);
    CHECK(models::model_space_loss(parsed, m) == 0.0);
    if (v == 1) CHECK(parsed.temperature == 0.37);
    if (v == 2) {
      CHECK(parsed.inner_lr == 0.025);
      CHECK(parsed.inner_steps == 2);
    }
  }
}

TEST_CASE("checkpoint reader rejects unknown versions and missing blocks") {
  RngStream rng(62);
  MetaModel m = models::make_protonet({2, 2}, rng);
  std::string text = models::serialize_model(m);
  std::string v2 = text;
  v2.replace(v2.find("v1"), 2, "v9");
  CHECK_THROWS_AS(models::parse_model(v2), std::runtime_error);
  std::string truncated = text.substr(0, text.find("backbone.b0"));
  CHECK_THROWS_AS(models::parse_model(truncated), std::runtime_error);
  CHECK_THROWS_AS(models::parse_model("metaepi-model v1 variant=unknown\n"), std::invalid_argument);
}

TEST_CASE("episode validation rejects malformed episodes") {
  MetaExample ep = make_episode(2, 1, 1, {{0.0}, {1.0}}, {{0.5}, {0.6}}, {0, 1});
  ep.support_labels = {1, 0};  // not label-major
  CHECK_THROWS_AS(models::validate_episode(ep), std::invalid_argument);
  MetaExample ep2 = make_episode(2, 1, 1, {{0.0}, {1.0}}, {{0.5}, {0.6}}, {0, 1});
  ep2.validation.pop_back();
  ep2.val_labels.pop_back();
  CHECK_THROWS_AS(models::validate_episode(ep2), std::invalid_argument);
}

TEST_CASE("make_model wires its recipe through to the variant") {
  models::ModelSpec spec;
  spec.variant = models::Variant::MatchNet;
  spec.hidden = {6};
  spec.embedding_dim = 4;
  spec.temperature = 0.5;
  MetaModel m = models::make_model(spec, 3, 5, RngStream(70));
  CHECK(m.variant == models::Variant::MatchNet);
  CHECK(m.backbone.widths == std::vector<int>{3, 6, 4});
  CHECK(m.temperature == 0.5);
  models::ModelSpec fspec;
  fspec.variant = models::Variant::FoMaml;
  MetaModel f = models::make_model(fspec, 3, 5, RngStream(70));
  CHECK(f.head_ways() == 5);
}
