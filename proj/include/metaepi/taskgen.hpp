#pragma once

// Synthetic class pools and the episodic sampler that turns a pool into
// (support, validation) tasks. Pools are immutable after construction;
// every sampling routine takes its RngStream by value so that a fixed
// (seed, split path) always reproduces the same pool or episode.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "metaepi/rng.hpp"

namespace metaepi::taskgen {

struct Instance {
  std::vector<double> features;
  int class_id = 0;
  int domain_id = 0;
};

struct ClassPool {
  int dim = 0;
  int num_domains = 1;
  std::vector<std::vector<Instance>> classes;  // index == dense class id
  std::vector<int> sub_ids;           // per-class sub-distribution tag; empty means all 0
  std::vector<int> source_class_ids;  // remap after subsampling; empty means identity
  std::string generator;
  uint64_t seed = 0;

  int num_classes() const { return static_cast<int>(classes.size()); }
  int sub_of(int class_id) const {
    return sub_ids.empty() ? 0 : sub_ids[static_cast<size_t>(class_id)];
  }
  int count_in_domain(int class_id, int domain) const;
};

struct EpisodeSpec {
  int ways = 5;
  int shots = 1;
  int val_per_class = 15;
  int source_domain = 0;
  int target_domain = 0;

  bool cross_domain() const { return source_domain != target_domain; }
  void validate() const;  // ways >= 2, shots >= 1, val_per_class >= 1
};

struct MetaExample {
  int ways = 0;
  int shots = 0;
  int val_per_class = 0;
  // Label-major layout: entries [l*shots, (l+1)*shots) belong to episode label l.
  std::vector<Instance> support;
  std::vector<int> support_labels;
  std::vector<Instance> validation;
  std::vector<int> val_labels;
  std::vector<int> episode_class_ids;  // episode label -> pool class id, ascending
};

struct GaussianPoolParams {
  int num_classes = 0;
  int dim = 0;
  int instances_per_class = 0;
  double class_spread = 1.0;
  double within_spread = 0.25;
};

struct HeterogeneousPoolParams {
  int num_subdistributions = 0;
  int classes_per_sub = 0;
  int dim = 0;
  int instances_per_class = 0;
  double class_spread = 1.0;
  double within_spread = 0.25;
  double sub_offset_scale = 4.0;  // distance scale between sub-distribution centers
  double sub_scale_spread = 0.3;  // log-normal spread of per-sub covariance scales
};

struct DomainTransform {
  std::vector<double> linear;  // dim x dim row-major; must be nonsingular
  std::vector<double> offset;  // dim
  double noise_sigma = 0.0;
};

// Class means ~ class_spread * N(0, I); instances ~ mean + within_spread * N(0, I).
ClassPool make_gaussian_pool(const GaussianPoolParams& p, RngStream rng);

// Union of sub-distributions, each with its own mean offset and covariance
// scale; classes carry their sub id. With one sub, zero offset scale and zero
// scale spread this reproduces make_gaussian_pool bit for bit.
ClassPool make_heterogeneous_pool(const HeterogeneousPoolParams& p, RngStream rng);

// Domain 0 drawn as a Gaussian pool; domain 1 holds A*x + b + sigma*noise
// copies of every domain-0 instance, so per-class counts match across domains.
ClassPool make_two_domain_pool(const GaussianPoolParams& base, const DomainTransform& t,
                               RngStream rng);

// Uniform subsample without replacement; keep_instances_per_class applies per
// (class, domain) group and keeps the pool's stored order. Class ids are
// re-densified, with the kept-class remap recorded in source_class_ids.
ClassPool subsample_pool(const ClassPool& pool, int keep_classes,
                         std::optional<int> keep_instances_per_class, RngStream rng);

// Keeps exactly the listed classes (ascending, distinct), re-densified with
// the remap recorded; used to split one generated pool into disjoint
// train/val/test pools that share generator signatures.
ClassPool select_pool_classes(const ClassPool& pool, const std::vector<int>& class_ids);

// Samples ways distinct classes (optionally restricted to one sub), then
// shots support + val_per_class validation instances per class without
// replacement. Cross-domain specs draw the support from source_domain and
// the validation from target_domain instances of the same classes.
MetaExample sample_episode(const ClassPool& pool, const EpisodeSpec& spec, RngStream rng,
                           std::optional<int> restrict_sub = std::nullopt);

// Line-oriented pool format:
//   metaepi-pool v1 dim=<d> classes=<C> domains=<D>
//   class_id,domain_id,f1,...,fd
std::string serialize_pool(const ClassPool& pool);
ClassPool parse_pool(const std::string& text);
void save_pool(const ClassPool& pool, const std::string& path);
ClassPool load_pool(const std::string& path);

}  // namespace metaepi::taskgen
