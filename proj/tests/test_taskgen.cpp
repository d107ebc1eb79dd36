#include "metaepi/taskgen.hpp"

#include <stdexcept>
#include <algorithm>
#include <cmath>
#include <set>

#include <doctest.h>

using namespace metaepi;
using taskgen::ClassPool;
using taskgen::EpisodeSpec;
using taskgen::MetaExample;

namespace {

taskgen::GaussianPoolParams easy_params() {
  taskgen::GaussianPoolParams p;
  p.num_classes = 5;
  p.dim = 2;
  p.instances_per_class = 10;
  p.class_spread = 1.0;
  p.within_spread = 0.25;
  return p;
}

std::vector<double> class_mean(const ClassPool& pool, int c) {
  std::vector<double> m(static_cast<size_t>(pool.dim), 0.0);
  const auto& cls = pool.classes[static_cast<size_t>(c)];
  int n = 0;
  for (const auto& inst : cls) {
    if (inst.domain_id != 0) continue;
    ++n;
    for (int k = 0; k < pool.dim; ++k) m[static_cast<size_t>(k)] += inst.features[static_cast<size_t>(k)];
  }
  for (double& v : m) v /= n;
  return m;
}

int nearest_mean(const std::vector<std::vector<double>>& means, const std::vector<double>& x) {
  int best = 0;
  double best_d = -1.0;
  for (size_t c = 0; c < means.size(); ++c) {
    double d = 0.0;
    for (size_t k = 0; k < x.size(); ++k) {
      double t = x[k] - means[c][k];
      d += t * t;
    }
    if (best_d < 0.0 || d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

}  // namespace

TEST_CASE("gaussian pool honors its size contract") {
  ClassPool pool = taskgen::make_gaussian_pool(easy_params(), RngStream(7));
  CHECK(pool.num_classes() == 5);
  CHECK(pool.dim == 2);
  int total = 0;
  for (const auto& cls : pool.classes) total += static_cast<int>(cls.size());
  CHECK(total == 50);
  for (int c = 0; c < 5; ++c)
    for (const auto& inst : pool.classes[static_cast<size_t>(c)]) CHECK(inst.class_id == c);
}

TEST_CASE("zero within-spread collapses every class onto its mean") {
  taskgen::GaussianPoolParams p = easy_params();
  p.within_spread = 0.0;
  ClassPool pool = taskgen::make_gaussian_pool(p, RngStream(3));
  for (const auto& cls : pool.classes)
    for (const auto& inst : cls) CHECK(inst.features == cls[0].features);
}

TEST_CASE("well-separated pool is nearly solvable by nearest class mean") {
  // Monte-Carlo oracle: held-out draws classified by the empirical class
  // means of a spread ratio 20 pool.
  taskgen::GaussianPoolParams p;
  p.num_classes = 8;
  p.dim = 6;
  p.instances_per_class = 40;
  p.class_spread = 5.0;
  p.within_spread = 0.25;
  ClassPool fit = taskgen::make_gaussian_pool(p, RngStream(17));
  p.instances_per_class = 1250;  // 10k held-out draws in total
  ClassPool held_out = taskgen::make_gaussian_pool(p, RngStream(17));

  std::vector<std::vector<double>> means;
  for (int c = 0; c < fit.num_classes(); ++c) means.push_back(class_mean(fit, c));
  int correct = 0, total = 0;
  for (int c = 0; c < held_out.num_classes(); ++c)
    for (size_t i = 40; i < held_out.classes[static_cast<size_t>(c)].size(); ++i) {
      ++total;
      if (nearest_mean(means, held_out.classes[static_cast<size_t>(c)][i].features) == c) ++correct;
    }
  CHECK(static_cast<double>(correct) / total > 0.99);
}

TEST_CASE("pool generation is reproducible and serialization round-trips") {
  ClassPool a = taskgen::make_gaussian_pool(easy_params(), RngStream(21));
  ClassPool b = taskgen::make_gaussian_pool(easy_params(), RngStream(21));
  CHECK(taskgen::serialize_pool(a) == taskgen::serialize_pool(b));

  ClassPool parsed = taskgen::parse_pool(taskgen::serialize_pool(a));
  CHECK(taskgen::serialize_pool(parsed) == taskgen::serialize_pool(a));
}

TEST_CASE("pool reader rejects unknown versions and malformed lines") {
  ClassPool pool = taskgen::make_gaussian_pool(easy_params(), RngStream(2));
  std::string text = taskgen::serialize_pool(pool);
  std::string v2 = text;
  v2.replace(v2.find("v1"), 2, "v2");
  CHECK_THROWS_AS(taskgen::parse_pool(v2), std::runtime_error);
  CHECK_THROWS_AS(taskgen::parse_pool("garbage\n"), std::runtime_error);
  CHECK_THROWS_AS(taskgen::parse_pool(text + "9,0,1.0,2.0\n"), std::runtime_error);
}

TEST_CASE("heterogeneous pool tags classes and degenerates to the gaussian pool") {
  taskgen::HeterogeneousPoolParams h;
  h.num_subdistributions = 5;
  h.classes_per_sub = 20;
  h.dim = 4;
  h.instances_per_class = 3;
  ClassPool pool = taskgen::make_heterogeneous_pool(h, RngStream(5));
  CHECK(pool.num_classes() == 100);
  for (int c = 0; c < 100; ++c) CHECK(pool.sub_of(c) == c / 20);

  taskgen::HeterogeneousPoolParams one = h;
  one.num_subdistributions = 1;
  one.sub_offset_scale = 0.0;
  one.sub_scale_spread = 0.0;
  taskgen::GaussianPoolParams g;
  g.num_classes = 20;
  g.dim = 4;
  g.instances_per_class = 3;
  g.class_spread = h.class_spread;
  g.within_spread = h.within_spread;
  ClassPool hp = taskgen::make_heterogeneous_pool(one, RngStream(9));
  ClassPool gp = taskgen::make_gaussian_pool(g, RngStream(9));
  CHECK(taskgen::serialize_pool(hp) == taskgen::serialize_pool(gp));
}

TEST_CASE("sub-distribution structure is retrievable from task embeddings") {
  // Brute-force silhouette of mean-feature task embeddings, grouped by sub.
  taskgen::HeterogeneousPoolParams h;
  h.num_subdistributions = 4;
  h.classes_per_sub = 10;
  h.dim = 8;
  h.instances_per_class = 10;
  h.sub_offset_scale = 6.0;
  ClassPool pool = taskgen::make_heterogeneous_pool(h, RngStream(31));

  EpisodeSpec spec;
  spec.ways = 3;
  spec.shots = 1;
  spec.val_per_class = 2;
  RngStream rng(77);
  std::vector<std::vector<double>> embeddings;
  std::vector<int> sub_of_task;
  for (int t = 0; t < 200; ++t) {
    int sub = static_cast<int>(t % h.num_subdistributions);
    MetaExample ep = taskgen::sample_episode(pool, spec, rng.child(static_cast<uint64_t>(t)), sub);
    std::vector<double> emb(static_cast<size_t>(h.dim), 0.0);
    for (const auto& inst : ep.support)
      for (int k = 0; k < h.dim; ++k) emb[static_cast<size_t>(k)] += inst.features[static_cast<size_t>(k)];
    for (double& v : emb) v /= static_cast<double>(ep.support.size());
    embeddings.push_back(std::move(emb));
    sub_of_task.push_back(sub);
  }
  auto dist = [&](size_t i, size_t j) {
    double s = 0.0;
    for (size_t k = 0; k < embeddings[i].size(); ++k) {
      double d = embeddings[i][k] - embeddings[j][k];
      s += d * d;
    }
    return std::sqrt(s);
  };
  double silhouette = 0.0;
  for (size_t i = 0; i < embeddings.size(); ++i) {
    double a = 0.0;
    int a_n = 0;
    std::vector<double> b_by_sub(static_cast<size_t>(h.num_subdistributions), 0.0);
    std::vector<int> b_n(static_cast<size_t>(h.num_subdistributions), 0);
    for (size_t j = 0; j < embeddings.size(); ++j) {
      if (i == j) continue;
      if (sub_of_task[j] == sub_of_task[i]) {
        a += dist(i, j);
        ++a_n;
      } else {
        b_by_sub[static_cast<size_t>(sub_of_task[j])] += dist(i, j);
        ++b_n[static_cast<size_t>(sub_of_task[j])];
      }
    }
    a /= a_n;
    double b = -1.0;
    for (int s = 0; s < h.num_subdistributions; ++s) {
      if (s == sub_of_task[i]) continue;
      double avg = b_by_sub[static_cast<size_t>(s)] / b_n[static_cast<size_t>(s)];
      if (b < 0.0 || avg < b) b = avg;
    }
    silhouette += (b - a) / std::max(a, b);
  }
  silhouette /= static_cast<double>(embeddings.size());
  CHECK(silhouette > 0.5);
}

TEST_CASE("identity domain transform copies instances bit for bit") {
  taskgen::GaussianPoolParams p = easy_params();
  taskgen::DomainTransform t;
  t.linear.assign(4, 0.0);
  t.linear[0] = t.linear[3] = 1.0;
  t.offset = {0.0, 0.0};
  t.noise_sigma = 0.0;
  ClassPool pool = taskgen::make_two_domain_pool(p, t, RngStream(13));
  CHECK(pool.num_domains == 2);
  for (const auto& cls : pool.classes) {
    size_t half = cls.size() / 2;
    CHECK(cls.size() == 2 * half);
    for (size_t i = 0; i < half; ++i) {
      CHECK(cls[i].domain_id == 0);
      CHECK(cls[half + i].domain_id == 1);
      CHECK(cls[half + i].features == cls[i].features);
    }
  }
}

TEST_CASE("per-class instance counts match across domains for any transform") {
  taskgen::GaussianPoolParams p = easy_params();
  taskgen::DomainTransform t;
  t.linear = {0.5, 0.1, -0.2, 0.8};
  t.offset = {3.0, -1.0};
  t.noise_sigma = 0.2;
  ClassPool pool = taskgen::make_two_domain_pool(p, t, RngStream(13));
  for (int c = 0; c < pool.num_classes(); ++c)
    CHECK(pool.count_in_domain(c, 0) == pool.count_in_domain(c, 1));
  // same seed path reproduces the pool bytes, noise included
  ClassPool again = taskgen::make_two_domain_pool(p, t, RngStream(13));
  CHECK(taskgen::serialize_pool(again) == taskgen::serialize_pool(pool));
}

TEST_CASE("singular or ill-shaped domain maps are rejected") {
  taskgen::GaussianPoolParams p = easy_params();
  taskgen::DomainTransform t;
  t.linear = {1.0, 2.0, 2.0, 4.0};  // rank 1
  t.offset = {0.0, 0.0};
  CHECK_THROWS_AS(taskgen::make_two_domain_pool(p, t, RngStream(1)), std::invalid_argument);
  t.linear = {1.0, 0.0, 0.0};
  CHECK_THROWS_AS(taskgen::make_two_domain_pool(p, t, RngStream(1)), std::invalid_argument);
}

TEST_CASE("shifted domain hurts cross-domain nearest neighbors") {
  // 1-NN oracle over sampled episodes: same-domain support vs cross-domain.
  taskgen::GaussianPoolParams p;
  p.num_classes = 10;
  p.dim = 4;
  p.instances_per_class = 20;
  p.class_spread = 1.5;
  p.within_spread = 0.4;
  taskgen::DomainTransform t;
  t.linear.assign(16, 0.0);
  for (int i = 0; i < 4; ++i) t.linear[static_cast<size_t>(i) * 4 + i] = 0.5;
  t.offset = {4.0, 4.0, 4.0, 4.0};
  t.noise_sigma = 0.1;
  ClassPool pool = taskgen::make_two_domain_pool(p, t, RngStream(19));

  auto one_nn_accuracy = [&](const EpisodeSpec& spec) {
    RngStream rng(101);
    double acc = 0.0;
    const int episodes = 500;
    for (int e = 0; e < episodes; ++e) {
      MetaExample ep = taskgen::sample_episode(pool, spec, rng.child(static_cast<uint64_t>(e)));
      int correct = 0;
      for (size_t q = 0; q < ep.validation.size(); ++q) {
        int best = -1;
        double best_d = 0.0;
        for (size_t s = 0; s < ep.support.size(); ++s) {
          double d = 0.0;
          for (int k = 0; k < pool.dim; ++k) {
            double diff = ep.validation[q].features[static_cast<size_t>(k)] -
                          ep.support[s].features[static_cast<size_t>(k)];
            d += diff * diff;
          }
          if (best < 0 || d < best_d) {
            best_d = d;
            best = static_cast<int>(s);
          }
        }
        if (ep.support_labels[static_cast<size_t>(best)] == ep.val_labels[q]) ++correct;
      }
      acc += static_cast<double>(correct) / ep.validation.size();
    }
    return acc / episodes;
  };

  EpisodeSpec same;
  same.ways = 5;
  same.shots = 1;
  same.val_per_class = 5;
  EpisodeSpec cross = same;
  cross.source_domain = 1;
  cross.target_domain = 0;
  CHECK(one_nn_accuracy(same) > one_nn_accuracy(cross));
}

TEST_CASE("subsampling keeps requested sizes and records the remap") {
  taskgen::GaussianPoolParams p;
  p.num_classes = 64;
  p.dim = 3;
  p.instances_per_class = 6;
  ClassPool pool = taskgen::make_gaussian_pool(p, RngStream(23));

  RngStream rng(40);
  std::set<std::vector<int>> seen;
  for (int bag = 0; bag < 10; ++bag) {
    ClassPool sub = taskgen::subsample_pool(pool, 48, std::nullopt, rng.child(static_cast<uint64_t>(bag)));
    CHECK(sub.num_classes() == 48);
    CHECK(std::is_sorted(sub.source_class_ids.begin(), sub.source_class_ids.end()));
    for (int c = 0; c < 48; ++c)
      CHECK(sub.classes[static_cast<size_t>(c)].size() == 6);
    seen.insert(sub.source_class_ids);
  }
  CHECK(seen.size() > 1);  // distinct bags across rng children
}

TEST_CASE("keep-all subsample preserves the pool bytes") {
  ClassPool pool = taskgen::make_gaussian_pool(easy_params(), RngStream(2));
  ClassPool all = taskgen::subsample_pool(pool, pool.num_classes(), std::nullopt, RngStream(50));
  CHECK(taskgen::serialize_pool(all) == taskgen::serialize_pool(pool));
  for (int c = 0; c < pool.num_classes(); ++c) CHECK(all.source_class_ids[static_cast<size_t>(c)] == c);
}

TEST_CASE("subsampling composes: keep-all then subsample equals direct subsample") {
  ClassPool pool = taskgen::make_gaussian_pool(easy_params(), RngStream(2));
  ClassPool identity =
      taskgen::subsample_pool(pool, pool.num_classes(), std::nullopt, RngStream(60).child(0));
  ClassPool composed = taskgen::subsample_pool(identity, 3, 4, RngStream(60).child(1));
  ClassPool direct = taskgen::subsample_pool(pool, 3, 4, RngStream(60).child(1));
  CHECK(taskgen::serialize_pool(composed) == taskgen::serialize_pool(direct));

  // Composition of two proper subsamples keeps the intersection sizes and
  // only instances that survived the first pass.
  ClassPool first = taskgen::subsample_pool(pool, 4, 8, RngStream(61).child(0));
  ClassPool second = taskgen::subsample_pool(first, 3, 4, RngStream(61).child(1));
  CHECK(second.num_classes() == 3);
  for (const auto& cls : second.classes) CHECK(cls.size() == 4);
}

TEST_CASE("subsampling boundary cases") {
  ClassPool pool = taskgen::make_gaussian_pool(easy_params(), RngStream(2));
  ClassPool singletons = taskgen::subsample_pool(pool, 5, 1, RngStream(5));
  for (const auto& cls : singletons.classes) CHECK(cls.size() == 1);
  CHECK_THROWS_AS(taskgen::subsample_pool(pool, 6, std::nullopt, RngStream(5)), std::invalid_argument);
  CHECK_THROWS_AS(taskgen::subsample_pool(pool, 5, 11, RngStream(5)), std::invalid_argument);
}

TEST_CASE("select_pool_classes keeps exactly the requested classes") {
  ClassPool pool = taskgen::make_gaussian_pool(easy_params(), RngStream(2));
  ClassPool sel = taskgen::select_pool_classes(pool, {1, 3});
  CHECK(sel.num_classes() == 2);
  CHECK(sel.source_class_ids == std::vector<int>{1, 3});
  CHECK(sel.classes[0][0].features == pool.classes[1][0].features);
  CHECK_THROWS_AS(taskgen::select_pool_classes(pool, {3, 1}), std::invalid_argument);
  CHECK_THROWS_AS(taskgen::select_pool_classes(pool, {0, 9}), std::invalid_argument);
}

TEST_CASE("episodes have the contracted sizes and no support/validation overlap") {
  taskgen::GaussianPoolParams p = easy_params();
  p.num_classes = 12;
  p.instances_per_class = 20;
  ClassPool pool = taskgen::make_gaussian_pool(p, RngStream(4));
  EpisodeSpec spec;
  spec.ways = 5;
  spec.shots = 1;
  spec.val_per_class = 15;
  RngStream rng(8);
  for (int t = 0; t < 50; ++t) {
    MetaExample ep = taskgen::sample_episode(pool, spec, rng.child(static_cast<uint64_t>(t)));
    CHECK(ep.support.size() == 5);
    CHECK(ep.validation.size() == 75);
    // label blocks: exactly shots/val_per_class per episode label
    for (int l = 0; l < spec.ways; ++l) {
      CHECK(std::count(ep.support_labels.begin(), ep.support_labels.end(), l) == spec.shots);
      CHECK(std::count(ep.val_labels.begin(), ep.val_labels.end(), l) == spec.val_per_class);
    }
    // episode labels biject onto sorted pool classes
    CHECK(std::is_sorted(ep.episode_class_ids.begin(), ep.episode_class_ids.end()));
    CHECK(std::set<int>(ep.episode_class_ids.begin(), ep.episode_class_ids.end()).size() == 5);
    // instance-level disjointness
    std::set<std::vector<double>> support_feats;
    for (const auto& inst : ep.support) support_feats.insert(inst.features);
    for (const auto& inst : ep.validation) CHECK(support_feats.count(inst.features) == 0);
  }
}

TEST_CASE("episode sampling exhausts classes of exactly shots+val size") {
  taskgen::GaussianPoolParams p = easy_params();
  p.instances_per_class = 4;
  ClassPool pool = taskgen::make_gaussian_pool(p, RngStream(4));
  EpisodeSpec spec;
  spec.ways = 5;
  spec.shots = 1;
  spec.val_per_class = 3;
  MetaExample ep = taskgen::sample_episode(pool, spec, RngStream(9));
  CHECK(ep.support.size() + ep.validation.size() == 20);
}

TEST_CASE("episode sampling is deterministic and errors name the deficit") {
  ClassPool pool = taskgen::make_gaussian_pool(easy_params(), RngStream(4));
  EpisodeSpec spec;
  spec.ways = 5;
  spec.shots = 1;
  spec.val_per_class = 5;
  MetaExample a = taskgen::sample_episode(pool, spec, RngStream(33));
  MetaExample b = taskgen::sample_episode(pool, spec, RngStream(33));
  CHECK(a.episode_class_ids == b.episode_class_ids);
  CHECK(a.support[0].features == b.support[0].features);
  CHECK(a.validation[13].features == b.validation[13].features);

  spec.ways = 6;  // pool only has 5 classes
  CHECK_THROWS_WITH_AS(taskgen::sample_episode(pool, spec, RngStream(33)),
                       doctest::Contains("need 6 classes"), std::invalid_argument);
  spec.ways = 5;
  spec.val_per_class = 50;  // 1 + 50 > 10 instances
  CHECK_THROWS_AS(taskgen::sample_episode(pool, spec, RngStream(33)), std::invalid_argument);
}

TEST_CASE("cross-domain episodes split support and validation by domain") {
  taskgen::GaussianPoolParams p = easy_params();
  p.instances_per_class = 8;
  taskgen::DomainTransform t;
  t.linear = {1.0, 0.0, 0.0, 1.0};
  t.offset = {10.0, 10.0};
  t.noise_sigma = 0.0;
  ClassPool pool = taskgen::make_two_domain_pool(p, t, RngStream(14));
  EpisodeSpec spec;
  spec.ways = 3;
  spec.shots = 2;
  spec.val_per_class = 4;
  spec.source_domain = 0;
  spec.target_domain = 1;
  MetaExample ep = taskgen::sample_episode(pool, spec, RngStream(71));
  for (const auto& inst : ep.support) CHECK(inst.domain_id == 0);
  for (const auto& inst : ep.validation) CHECK(inst.domain_id == 1);
}

TEST_CASE("equal-domain cross sampler matches the same-domain sampler byte for byte") {
  taskgen::GaussianPoolParams p = easy_params();
  p.instances_per_class = 10;
  taskgen::DomainTransform t;
  t.linear = {1.0, 0.0, 0.0, 1.0};
  t.offset = {2.0, 2.0};
  t.noise_sigma = 0.1;
  ClassPool pool = taskgen::make_two_domain_pool(p, t, RngStream(14));
  EpisodeSpec same;
  same.ways = 3;
  same.shots = 1;
  same.val_per_class = 4;
  same.source_domain = 1;
  same.target_domain = 1;
  MetaExample a = taskgen::sample_episode(pool, same, RngStream(99));
  MetaExample b = taskgen::sample_episode(pool, same, RngStream(99));
  CHECK(a.episode_class_ids == b.episode_class_ids);
  for (size_t i = 0; i < a.support.size(); ++i) CHECK(a.support[i].features == b.support[i].features);
  for (size_t i = 0; i < a.validation.size(); ++i)
    CHECK(a.validation[i].features == b.validation[i].features);
}

TEST_CASE("rng streams replay by (seed, split path)") {
  RngStream a(42);
  RngStream b(42);
  CHECK(a.child("x").next_u64() == b.child("x").next_u64());
  CHECK(a.child("x").child(3).next_gaussian() == b.child("x").child(3).next_gaussian());
  CHECK(a.child("x").next_u64() != a.child("y").next_u64());
  RngStream c = a.child(1);
  std::vector<int> s1 = c.sample_without_replacement(10, 4);
  std::vector<int> s2 = a.child(1).sample_without_replacement(10, 4);
  CHECK(s1 == s2);
  std::set<int> uniq(s1.begin(), s1.end());
  CHECK(uniq.size() == 4);
}
