#include "metaepi/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "metaepi/textio.hpp"

namespace metaepi::taskgen {

namespace {

void check_pool_params(int num_classes, int dim, int instances_per_class, double class_spread,
                       double within_spread) {
  if (dim <= 0) throw std::invalid_argument("pool: feature dim must be >= 1");
  if (num_classes < 1) throw std::invalid_argument("pool: need at least 1 class");
  if (instances_per_class < 1) throw std::invalid_argument("pool: need at least 1 instance per class");
  if (class_spread <= 0.0) throw std::invalid_argument("pool: class_spread must be > 0");
  if (within_spread < 0.0) throw std::invalid_argument("pool: within_spread must be >= 0");
}

std::vector<double> gaussian_vec(RngStream& rng, int dim) {
  std::vector<double> v(static_cast<size_t>(dim));
  for (double& x : v) x = rng.next_gaussian();
  return v;
}

// Instances for one class around a fixed mean; rng paths keyed by the global
// class index so pools with identical parameters coincide draw for draw.
std::vector<Instance> draw_class_instances(const std::vector<double>& mean, int count,
                                           double within_spread, int class_id, RngStream rng) {
  std::vector<Instance> out;
  out.reserve(static_cast<size_t>(count));
  int dim = static_cast<int>(mean.size());
  for (int i = 0; i < count; ++i) {
    Instance inst;
    inst.class_id = class_id;
    inst.domain_id = 0;
    inst.features.resize(static_cast<size_t>(dim));
    for (int k = 0; k < dim; ++k)
      inst.features[static_cast<size_t>(k)] =
          mean[static_cast<size_t>(k)] + within_spread * rng.next_gaussian();
    out.push_back(std::move(inst));
  }
  return out;
}

// LU elimination with partial pivoting; rejects near-singular maps.
void check_nonsingular(const std::vector<double>& a, int dim) {
  std::vector<double> m = a;
  double maxabs = 0.0;
  for (double v : m) maxabs = std::max(maxabs, std::fabs(v));
  if (maxabs == 0.0) throw std::invalid_argument("domain transform: linear map is singular");
  for (int col = 0; col < dim; ++col) {
    int pivot = col;
    for (int r = col + 1; r < dim; ++r)
      if (std::fabs(m[static_cast<size_t>(r) * dim + col]) >
          std::fabs(m[static_cast<size_t>(pivot) * dim + col]))
        pivot = r;
    double pv = m[static_cast<size_t>(pivot) * dim + col];
    if (std::fabs(pv) < 1e-12 * maxabs)
      throw std::invalid_argument("domain transform: linear map is singular");
    if (pivot != col)
      for (int c = 0; c < dim; ++c)
        std::swap(m[static_cast<size_t>(pivot) * dim + c], m[static_cast<size_t>(col) * dim + c]);
    for (int r = col + 1; r < dim; ++r) {
      double f = m[static_cast<size_t>(r) * dim + col] / pv;
      for (int c = col; c < dim; ++c)
        m[static_cast<size_t>(r) * dim + c] -= f * m[static_cast<size_t>(col) * dim + c];
    }
  }
}

}  // namespace

int ClassPool::count_in_domain(int class_id, int domain) const {
  int n = 0;
  for (const Instance& inst : classes[static_cast<size_t>(class_id)])
    if (inst.domain_id == domain) ++n;
  return n;
}

void EpisodeSpec::validate() const {
  if (ways < 2) throw std::invalid_argument("episode spec: ways must be >= 2");
  if (shots < 1) throw std::invalid_argument("episode spec: shots must be >= 1");
  if (val_per_class < 1) throw std::invalid_argument("episode spec: val_per_class must be >= 1");
  if (source_domain < 0 || target_domain < 0)
    throw std::invalid_argument("episode spec: domain ids must be >= 0");
}

ClassPool make_gaussian_pool(const GaussianPoolParams& p, RngStream rng) {
  check_pool_params(p.num_classes, p.dim, p.instances_per_class, p.class_spread, p.within_spread);
  ClassPool pool;
  pool.dim = p.dim;
  pool.num_domains = 1;
  pool.generator = "gaussian";
  RngStream mean_rng = rng.child("mean");
  RngStream inst_rng = rng.child("inst");
  for (int c = 0; c < p.num_classes; ++c) {
    RngStream mr = mean_rng.child(static_cast<uint64_t>(c));
    std::vector<double> mean = gaussian_vec(mr, p.dim);
    for (double& v : mean) v *= p.class_spread;
    pool.classes.push_back(draw_class_instances(mean, p.instances_per_class, p.within_spread, c,
                                                inst_rng.child(static_cast<uint64_t>(c))));
  }
  return pool;
}

ClassPool make_heterogeneous_pool(const HeterogeneousPoolParams& p, RngStream rng) {
  if (p.num_subdistributions < 1)
    throw std::invalid_argument("heterogeneous pool: need at least 1 sub-distribution");
  check_pool_params(p.num_subdistributions * p.classes_per_sub, p.dim, p.instances_per_class,
                    p.class_spread, p.within_spread);
  if (p.classes_per_sub < 1)
    throw std::invalid_argument("heterogeneous pool: classes_per_sub must be >= 1");
  if (p.sub_offset_scale < 0.0 || p.sub_scale_spread < 0.0)
    throw std::invalid_argument("heterogeneous pool: sub spreads must be >= 0");

  // Per-sub signature: a mean offset and a covariance scale.
  RngStream sub_rng = rng.child("sub");
  std::vector<std::vector<double>> offsets;
  std::vector<double> scales;
  for (int s = 0; s < p.num_subdistributions; ++s) {
    RngStream sr = sub_rng.child(static_cast<uint64_t>(s));
    std::vector<double> off = gaussian_vec(sr, p.dim);
    for (double& v : off) v *= p.sub_offset_scale;
    offsets.push_back(std::move(off));
    scales.push_back(std::exp(p.sub_scale_spread * sr.next_gaussian()));
  }

  ClassPool pool;
  pool.dim = p.dim;
  pool.num_domains = 1;
  pool.generator = "heterogeneous";
  RngStream mean_rng = rng.child("mean");
  RngStream inst_rng = rng.child("inst");
  int c = 0;
  for (int s = 0; s < p.num_subdistributions; ++s) {
    for (int j = 0; j < p.classes_per_sub; ++j, ++c) {
      RngStream mr = mean_rng.child(static_cast<uint64_t>(c));
      std::vector<double> mean = gaussian_vec(mr, p.dim);
      for (int k = 0; k < p.dim; ++k)
        mean[static_cast<size_t>(k)] = offsets[static_cast<size_t>(s)][static_cast<size_t>(k)] +
                                       p.class_spread * scales[static_cast<size_t>(s)] *
                                           mean[static_cast<size_t>(k)];
      pool.classes.push_back(draw_class_instances(
          mean, p.instances_per_class, p.within_spread * scales[static_cast<size_t>(s)], c,
          inst_rng.child(static_cast<uint64_t>(c))));
      pool.sub_ids.push_back(s);
    }
  }
  return pool;
}

ClassPool make_two_domain_pool(const GaussianPoolParams& base, const DomainTransform& t,
                               RngStream rng) {
  ClassPool pool = make_gaussian_pool(base, rng);
  int dim = pool.dim;
  if (static_cast<int>(t.linear.size()) != dim * dim)
    throw std::invalid_argument(strcat_msg("domain transform: linear map must be ", dim, "x", dim));
  if (static_cast<int>(t.offset.size()) != dim)
    throw std::invalid_argument(strcat_msg("domain transform: offset must have dim ", dim));
  if (t.noise_sigma < 0.0) throw std::invalid_argument("domain transform: noise sigma must be >= 0");
  check_nonsingular(t.linear, dim);

  pool.num_domains = 2;
  pool.generator = "two-domain";
  RngStream noise_rng = rng.child("domain-noise");
  uint64_t idx = 0;
  for (auto& cls : pool.classes) {
    size_t base_count = cls.size();
    for (size_t i = 0; i < base_count; ++i, ++idx) {
      const Instance& src = cls[i];
      Instance dst;
      dst.class_id = src.class_id;
      dst.domain_id = 1;
      dst.features.assign(static_cast<size_t>(dim), 0.0);
      for (int r = 0; r < dim; ++r) {
        double acc = t.offset[static_cast<size_t>(r)];
        for (int c = 0; c < dim; ++c)
          acc += t.linear[static_cast<size_t>(r) * dim + c] * src.features[static_cast<size_t>(c)];
        dst.features[static_cast<size_t>(r)] = acc;
      }
      if (t.noise_sigma > 0.0) {
        RngStream nr = noise_rng.child(idx);
        for (int r = 0; r < dim; ++r)
          dst.features[static_cast<size_t>(r)] += t.noise_sigma * nr.next_gaussian();
      }
      cls.push_back(std::move(dst));
    }
  }
  return pool;
}

ClassPool subsample_pool(const ClassPool& pool, int keep_classes,
                         std::optional<int> keep_instances_per_class, RngStream rng) {
  if (keep_classes < 1 || keep_classes > pool.num_classes())
    throw std::invalid_argument(strcat_msg("subsample: requested ", keep_classes, " of ",
                                           pool.num_classes(), " classes"));
  std::vector<int> kept = rng.child("classes").sample_without_replacement(pool.num_classes(), keep_classes);
  std::sort(kept.begin(), kept.end());

  ClassPool out;
  out.dim = pool.dim;
  out.num_domains = pool.num_domains;
  out.generator = pool.generator + "+sub";
  out.seed = pool.seed;
  RngStream inst_rng = rng.child("instances");
  for (int new_id = 0; new_id < keep_classes; ++new_id) {
    int old_id = kept[static_cast<size_t>(new_id)];
    const auto& cls = pool.classes[static_cast<size_t>(old_id)];
    std::vector<Instance> kept_insts;
    if (!keep_instances_per_class) {
      kept_insts = cls;
    } else {
      int want = *keep_instances_per_class;
      if (want < 1) throw std::invalid_argument("subsample: keep_instances_per_class must be >= 1");
      RngStream cr = inst_rng.child(static_cast<uint64_t>(old_id));
      for (int d = 0; d < pool.num_domains; ++d) {
        std::vector<int> in_domain;
        for (int i = 0; i < static_cast<int>(cls.size()); ++i)
          if (cls[static_cast<size_t>(i)].domain_id == d) in_domain.push_back(i);
        if (static_cast<int>(in_domain.size()) < want)
          throw std::invalid_argument(strcat_msg("subsample: class ", old_id, " domain ", d, " has ",
                                                 in_domain.size(), " instances, requested ", want));
        std::vector<int> pick = cr.child(static_cast<uint64_t>(d))
                                    .sample_without_replacement(static_cast<int>(in_domain.size()), want);
        std::sort(pick.begin(), pick.end());
        for (int p : pick) kept_insts.push_back(cls[static_cast<size_t>(in_domain[static_cast<size_t>(p)])]);
      }
    }
    for (Instance& inst : kept_insts) inst.class_id = new_id;
    out.classes.push_back(std::move(kept_insts));
    out.source_class_ids.push_back(old_id);
    if (!pool.sub_ids.empty()) out.sub_ids.push_back(pool.sub_ids[static_cast<size_t>(old_id)]);
  }
  return out;
}

ClassPool select_pool_classes(const ClassPool& pool, const std::vector<int>& class_ids) {
  ClassPool out;
  out.dim = pool.dim;
  out.num_domains = pool.num_domains;
  out.generator = pool.generator + "+select";
  out.seed = pool.seed;
  int prev = -1;
  for (int old_id : class_ids) {
    if (old_id < 0 || old_id >= pool.num_classes())
      throw std::invalid_argument(strcat_msg("select: class ", old_id, " out of range"));
    if (old_id <= prev) throw std::invalid_argument("select: class ids must be ascending and distinct");
    prev = old_id;
    std::vector<Instance> insts = pool.classes[static_cast<size_t>(old_id)];
    int new_id = static_cast<int>(out.classes.size());
    for (Instance& inst : insts) inst.class_id = new_id;
    out.classes.push_back(std::move(insts));
    out.source_class_ids.push_back(old_id);
    if (!pool.sub_ids.empty()) out.sub_ids.push_back(pool.sub_ids[static_cast<size_t>(old_id)]);
  }
  if (out.classes.empty()) throw std::invalid_argument("select: no classes requested");
  return out;
}

MetaExample sample_episode(const ClassPool& pool, const EpisodeSpec& spec, RngStream rng,
                           std::optional<int> restrict_sub) {
  spec.validate();
  if (spec.source_domain >= pool.num_domains || spec.target_domain >= pool.num_domains)
    throw std::invalid_argument(strcat_msg("episode: pool has ", pool.num_domains,
                                           " domains, spec wants ", spec.source_domain, "->",
                                           spec.target_domain));

  std::vector<int> eligible;
  for (int c = 0; c < pool.num_classes(); ++c) {
    if (restrict_sub && pool.sub_of(c) != *restrict_sub) continue;
    bool ok;
    if (spec.cross_domain())
      ok = pool.count_in_domain(c, spec.source_domain) >= spec.shots &&
           pool.count_in_domain(c, spec.target_domain) >= spec.val_per_class;
    else
      ok = pool.count_in_domain(c, spec.source_domain) >= spec.shots + spec.val_per_class;
    if (ok) eligible.push_back(c);
  }
  if (static_cast<int>(eligible.size()) < spec.ways)
    throw std::invalid_argument(strcat_msg("episode: need ", spec.ways, " classes with ",
                                           spec.shots, "+", spec.val_per_class,
                                           " instances, pool offers ", eligible.size()));

  std::vector<int> picked =
      rng.sample_without_replacement(static_cast<int>(eligible.size()), spec.ways);
  std::vector<int> class_ids;
  class_ids.reserve(static_cast<size_t>(spec.ways));
  for (int p : picked) class_ids.push_back(eligible[static_cast<size_t>(p)]);
  std::sort(class_ids.begin(), class_ids.end());  // episode label = rank of pool class id

  MetaExample ep;
  ep.ways = spec.ways;
  ep.shots = spec.shots;
  ep.val_per_class = spec.val_per_class;
  ep.episode_class_ids = class_ids;
  for (int label = 0; label < spec.ways; ++label) {
    int c = class_ids[static_cast<size_t>(label)];
    const auto& cls = pool.classes[static_cast<size_t>(c)];
    RngStream cr = rng.child(static_cast<uint64_t>(label));
    auto collect = [&](int domain) {
      std::vector<int> idx;
      for (int i = 0; i < static_cast<int>(cls.size()); ++i)
        if (cls[static_cast<size_t>(i)].domain_id == domain) idx.push_back(i);
      return idx;
    };
    if (!spec.cross_domain()) {
      std::vector<int> idx = collect(spec.source_domain);
      std::vector<int> pick = cr.sample_without_replacement(static_cast<int>(idx.size()),
                                                            spec.shots + spec.val_per_class);
      for (int i = 0; i < spec.shots; ++i) {
        ep.support.push_back(cls[static_cast<size_t>(idx[static_cast<size_t>(pick[static_cast<size_t>(i)])])]);
        ep.support_labels.push_back(label);
      }
      for (int i = spec.shots; i < spec.shots + spec.val_per_class; ++i) {
        ep.validation.push_back(cls[static_cast<size_t>(idx[static_cast<size_t>(pick[static_cast<size_t>(i)])])]);
        ep.val_labels.push_back(label);
      }
    } else {
      std::vector<int> src_idx = collect(spec.source_domain);
      std::vector<int> tgt_idx = collect(spec.target_domain);
      std::vector<int> s_pick =
          cr.child("support").sample_without_replacement(static_cast<int>(src_idx.size()), spec.shots);
      std::vector<int> v_pick = cr.child("val").sample_without_replacement(
          static_cast<int>(tgt_idx.size()), spec.val_per_class);
      for (int p : s_pick) {
        ep.support.push_back(cls[static_cast<size_t>(src_idx[static_cast<size_t>(p)])]);
        ep.support_labels.push_back(label);
      }
      for (int p : v_pick) {
        ep.validation.push_back(cls[static_cast<size_t>(tgt_idx[static_cast<size_t>(p)])]);
        ep.val_labels.push_back(label);
      }
    }
  }
  return ep;
}

std::string serialize_pool(const ClassPool& pool) {
  std::string out = "metaepi-pool v1 dim=" + std::to_string(pool.dim) +
                    " classes=" + std::to_string(pool.num_classes()) +
                    " domains=" + std::to_string(pool.num_domains) + "\n";
  for (const auto& cls : pool.classes) {
    for (const Instance& inst : cls) {
      out += std::to_string(inst.class_id);
      out += ',';
      out += std::to_string(inst.domain_id);
      for (double f : inst.features) {
        out += ',';
        out += format_double(f);
      }
      out += '\n';
    }
  }
  return out;
}

ClassPool parse_pool(const std::string& text) {
  size_t eol = text.find('\n');
  if (eol == std::string::npos) throw std::runtime_error("pool file: missing header line");
  std::string_view header(text.data(), eol);
  auto fields = split(header, ' ');
  if (fields.size() != 5 || fields[0] != "metaepi-pool")
    throw std::runtime_error("pool file: malformed header");
  if (fields[1] != "v1")
    throw std::runtime_error("pool file: unsupported version '" + std::string(fields[1]) + "'");
  auto field_value = [&](std::string_view f, std::string_view key) {
    if (f.substr(0, key.size()) != key)
      throw std::runtime_error("pool file: malformed header field '" + std::string(f) + "'");
    return parse_long(f.substr(key.size()));
  };
  int dim = static_cast<int>(field_value(fields[2], "dim="));
  int num_classes = static_cast<int>(field_value(fields[3], "classes="));
  int num_domains = static_cast<int>(field_value(fields[4], "domains="));
  if (dim < 1 || num_classes < 1 || num_domains < 1)
    throw std::runtime_error("pool file: header counts must be >= 1");

  ClassPool pool;
  pool.dim = dim;
  pool.num_domains = num_domains;
  pool.generator = "file";
  pool.classes.resize(static_cast<size_t>(num_classes));

  size_t pos = eol + 1;
  size_t lineno = 1;
  while (pos < text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string_view line(text.data() + pos, end - pos);
    ++lineno;
    pos = end + 1;
    if (line.empty()) continue;
    auto cols = split(line, ',');
    if (static_cast<int>(cols.size()) != 2 + dim)
      throw std::runtime_error(strcat_msg("pool file line ", lineno, ": expected ", 2 + dim,
                                          " fields, got ", cols.size()));
    Instance inst;
    inst.class_id = static_cast<int>(parse_long(cols[0]));
    inst.domain_id = static_cast<int>(parse_long(cols[1]));
    if (inst.class_id < 0 || inst.class_id >= num_classes)
      throw std::runtime_error(strcat_msg("pool file line ", lineno, ": class id out of range"));
    if (inst.domain_id < 0 || inst.domain_id >= num_domains)
      throw std::runtime_error(strcat_msg("pool file line ", lineno, ": domain id out of range"));
    inst.features.reserve(static_cast<size_t>(dim));
    for (int k = 0; k < dim; ++k) inst.features.push_back(parse_double(cols[static_cast<size_t>(2 + k)]));
    pool.classes[static_cast<size_t>(inst.class_id)].push_back(std::move(inst));
  }
  for (int c = 0; c < num_classes; ++c)
    if (pool.classes[static_cast<size_t>(c)].empty())
      throw std::runtime_error(strcat_msg("pool file: class ", c, " has no instances"));
  return pool;
}

void save_pool(const ClassPool& pool, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << serialize_pool(pool);
  if (!f) throw std::runtime_error("write failed: " + path);
}

ClassPool load_pool(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_pool(text);
}

}  // namespace metaepi::taskgen
