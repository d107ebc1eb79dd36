#include "metaepi/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "metaepi/techniques.hpp"
#include "metaepi/textio.hpp"

namespace metaepi::harness {

using json = nlohmann::json;
using taskgen::ClassPool;
using taskgen::EpisodeSpec;
using train::EpisodeSource;

const std::vector<std::string> kExperimentIds = {
    "gen-curve", "techniques", "bagging", "augment", "metaknn", "domainshift", "single-run"};

const std::vector<std::string>& metric_vocabulary() {
  static const std::vector<std::string> vocab = {
      "meta_train_acc", "meta_train_loss", "meta_test_acc", "meta_val_acc", "ci_halfwidth"};
  return vocab;
}

// ---- CSV -------------------------------------------------------------

namespace {

void check_record(const ResultRecord& r) {
  const auto& vocab = metric_vocabulary();
  if (std::find(vocab.begin(), vocab.end(), r.metric) == vocab.end())
    throw std::invalid_argument("result record: metric '" + r.metric + "' not in the vocabulary");
  if (r.experiment.find(',') != std::string::npos || r.setting.find(',') != std::string::npos)
    throw std::invalid_argument("result record: fields must not contain commas");
}

}  // namespace

std::string emit_csv(std::vector<ResultRecord> records) {
  for (const ResultRecord& r : records) check_record(r);
  std::stable_sort(records.begin(), records.end(), [](const ResultRecord& a, const ResultRecord& b) {
    if (a.experiment != b.experiment) return a.experiment < b.experiment;
    if (a.setting != b.setting) return a.setting < b.setting;
    if (a.seed != b.seed) return a.seed < b.seed;
    return a.metric < b.metric;
  });
  std::string out = "experiment,seed,setting,metric,value\n";
  for (const ResultRecord& r : records) {
    out += r.experiment;
    out += ',';
    out += std::to_string(r.seed);
    out += ',';
    out += r.setting;
    out += ',';
    out += r.metric;
    out += ',';
    out += format_double(r.value);
    out += '\n';
  }
  return out;
}

void write_csv(std::vector<ResultRecord> records, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << emit_csv(std::move(records));
  if (!f) throw std::runtime_error("write failed: " + path);
}

std::vector<ResultRecord> parse_csv(const std::string& text) {
  std::vector<ResultRecord> out;
  size_t pos = 0;
  bool header = true;
  while (pos < text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string_view line(text.data() + pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    if (header) {
      if (line != "experiment,seed,setting,metric,value")
        throw std::runtime_error("csv: unexpected header");
      header = false;
      continue;
    }
    auto cols = split(line, ',');
    if (cols.size() != 5) throw std::runtime_error("csv: expected 5 columns");
    ResultRecord r;
    r.experiment = std::string(cols[0]);
    r.seed = static_cast<uint64_t>(parse_long(cols[1]));
    r.setting = std::string(cols[2]);
    r.metric = std::string(cols[3]);
    r.value = parse_double(cols[4]);
    out.push_back(std::move(r));
  }
  if (header) throw std::runtime_error("csv: missing header");
  return out;
}

// ---- Config ---------------------------------------------------------

namespace {

json parse_json(const std::string& text) {
  json doc = json::parse(text, nullptr, false);
  if (doc.is_discarded()) throw std::runtime_error("config: invalid JSON");
  if (!doc.is_object()) throw std::runtime_error("config: top level must be an object");
  if (!doc.contains("schema") || !doc["schema"].is_string())
    throw std::runtime_error("config: missing schema string");
  if (doc["schema"].get<std::string>() != "metaepi-config v1")
    throw std::runtime_error("config: unsupported schema '" + doc["schema"].get<std::string>() + "'");
  return doc;
}

const json* section(const json& doc, const char* name) {
  auto it = doc.find(name);
  if (it == doc.end()) return nullptr;
  if (!it->is_object()) throw std::runtime_error(std::string("config: '") + name + "' must be an object");
  return &*it;
}

double get_num(const json& doc, const char* sec, const char* key, double def) {
  const json* s = section(doc, sec);
  if (!s) return def;
  auto it = s->find(key);
  if (it == s->end()) return def;
  if (!it->is_number()) throw std::runtime_error(strcat_msg("config: ", sec, ".", key, " must be a number"));
  return it->get<double>();
}

int get_int(const json& doc, const char* sec, const char* key, int def) {
  return static_cast<int>(get_num(doc, sec, key, def));
}

uint64_t get_u64(const json& doc, const char* sec, const char* key, uint64_t def) {
  const json* s = section(doc, sec);
  if (!s) return def;
  auto it = s->find(key);
  if (it == s->end()) return def;
  return it->get<uint64_t>();
}

std::string get_str(const json& doc, const char* sec, const char* key, const std::string& def) {
  const json* s = section(doc, sec);
  if (!s) return def;
  auto it = s->find(key);
  if (it == s->end()) return def;
  if (!it->is_string()) throw std::runtime_error(strcat_msg("config: ", sec, ".", key, " must be a string"));
  return it->get<std::string>();
}

bool get_bool(const json& doc, const char* sec, const char* key, bool def) {
  const json* s = section(doc, sec);
  if (!s) return def;
  auto it = s->find(key);
  if (it == s->end()) return def;
  if (!it->is_boolean()) throw std::runtime_error(strcat_msg("config: ", sec, ".", key, " must be a bool"));
  return it->get<bool>();
}

std::vector<int> get_ints(const json& doc, const char* sec, const char* key,
                          std::vector<int> def) {
  const json* s = section(doc, sec);
  if (!s) return def;
  auto it = s->find(key);
  if (it == s->end()) return def;
  std::vector<int> out;
  for (const auto& v : *it) out.push_back(v.get<int>());
  return out;
}

}  // namespace

std::vector<uint64_t> ExperimentConfig::seeds() const {
  json doc = parse_json(json_text);
  std::vector<uint64_t> out;
  if (doc.contains("seeds")) {
    for (const auto& v : doc["seeds"]) out.push_back(v.get<uint64_t>());
  } else {
    out = {0, 1, 2, 3, 4};
  }
  if (out.empty()) throw std::runtime_error("config: seeds must be non-empty");
  return out;
}

int ExperimentConfig::eval_episodes() const {
  json doc = parse_json(json_text);
  int t = doc.contains("eval_episodes") ? doc["eval_episodes"].get<int>() : 500;
  if (t < 1) throw std::runtime_error("config: eval_episodes must be >= 1");
  return t;
}

ExperimentConfig parse_config(const std::string& json_text) {
  json doc = parse_json(json_text);
  ExperimentConfig cfg;
  cfg.json_text = json_text;
  if (doc.contains("experiment")) cfg.experiment = doc["experiment"].get<std::string>();
  return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_config(text);
}

// ---- Config-driven builders -------------------------------------------

namespace {

struct PoolRecipe {
  std::string generator = "gaussian";
  taskgen::GaussianPoolParams g;
  taskgen::HeterogeneousPoolParams h;
  double domain_scale = 0.6;
  double domain_angle = 0.8;
  double domain_offset = 2.0;
  double domain_noise = 0.15;
  // class-signal-free distractor coordinates appended to every instance
  int noise_dims = 0;
  double noise_sigma = 2.0;
  uint64_t seed = 1;
};

PoolRecipe pool_recipe(const json& doc) {
  PoolRecipe r;
  r.generator = get_str(doc, "pool", "generator", "gaussian");
  r.g.num_classes = get_int(doc, "pool", "classes", 24);
  r.g.dim = get_int(doc, "pool", "dim", 16);
  r.g.instances_per_class = get_int(doc, "pool", "instances_per_class", 30);
  r.g.class_spread = get_num(doc, "pool", "class_spread", 1.0);
  r.g.within_spread = get_num(doc, "pool", "within_spread", 0.55);
  r.h.num_subdistributions = get_int(doc, "pool", "subdistributions", 5);
  r.h.classes_per_sub = get_int(doc, "pool", "classes_per_sub", 8);
  r.h.dim = r.g.dim;
  r.h.instances_per_class = r.g.instances_per_class;
  r.h.class_spread = r.g.class_spread;
  r.h.within_spread = r.g.within_spread;
  r.h.sub_offset_scale = get_num(doc, "pool", "sub_offset_scale", 4.0);
  r.h.sub_scale_spread = get_num(doc, "pool", "sub_scale_spread", 0.3);
  r.domain_scale = get_num(doc, "pool", "domain_scale", 0.6);
  r.domain_angle = get_num(doc, "pool", "domain_angle", 0.8);
  r.domain_offset = get_num(doc, "pool", "domain_offset", 2.0);
  r.domain_noise = get_num(doc, "pool", "domain_noise", 0.15);
  r.noise_dims = get_int(doc, "pool", "noise_dims", 0);
  r.noise_sigma = get_num(doc, "pool", "noise_sigma", 2.0);
  r.seed = get_u64(doc, "pool", "seed", 1);
  return r;
}

// Appends class-signal-free Gaussian coordinates to every instance, so the
// discriminative structure lives in a subspace the models must identify.
void append_noise_dims(ClassPool& pool, int extra, double sigma, RngStream rng) {
  if (extra <= 0) return;
  uint64_t idx = 0;
  for (auto& cls : pool.classes)
    for (auto& inst : cls) {
      RngStream ir = rng.child(idx++);
      for (int k = 0; k < extra; ++k) inst.features.push_back(sigma * ir.next_gaussian());
    }
  pool.dim += extra;
}

// Block-diagonal rotation scaled uniformly, constant offset direction.
taskgen::DomainTransform make_transform(int dim, double scale, double angle, double offset,
                                        double noise) {
  taskgen::DomainTransform t;
  t.linear.assign(static_cast<size_t>(dim) * dim, 0.0);
  double c = std::cos(angle), s = std::sin(angle);
  for (int i = 0; i + 1 < dim; i += 2) {
    t.linear[static_cast<size_t>(i) * dim + i] = scale * c;
    t.linear[static_cast<size_t>(i) * dim + i + 1] = -scale * s;
    t.linear[static_cast<size_t>(i + 1) * dim + i] = scale * s;
    t.linear[static_cast<size_t>(i + 1) * dim + i + 1] = scale * c;
  }
  if (dim % 2 == 1) t.linear[static_cast<size_t>(dim - 1) * dim + dim - 1] = scale;
  t.offset.assign(static_cast<size_t>(dim), offset / std::sqrt(static_cast<double>(dim)));
  t.noise_sigma = noise;
  return t;
}

ClassPool instantiate_pool(const PoolRecipe& r, RngStream rng) {
  if (r.generator == "two-domain") {
    if (r.noise_dims > 0)
      throw std::runtime_error("config: noise_dims does not apply to two-domain pools");
    return taskgen::make_two_domain_pool(
        r.g, make_transform(r.g.dim, r.domain_scale, r.domain_angle, r.domain_offset, r.domain_noise),
        rng);
  }
  ClassPool pool;
  if (r.generator == "gaussian")
    pool = taskgen::make_gaussian_pool(r.g, rng);
  else if (r.generator == "heterogeneous")
    pool = taskgen::make_heterogeneous_pool(r.h, rng);
  else
    throw std::runtime_error("config: unknown pool generator '" + r.generator + "'");
  append_noise_dims(pool, r.noise_dims, r.noise_sigma, rng.child("noise-dims"));
  return pool;
}

EpisodeSpec episode_spec(const json& doc, int default_val_per_class = 15) {
  EpisodeSpec spec;
  spec.ways = get_int(doc, "episode", "ways", 5);
  spec.shots = get_int(doc, "episode", "shots", 1);
  spec.val_per_class = get_int(doc, "episode", "val_per_class", default_val_per_class);
  spec.source_domain = get_int(doc, "episode", "source_domain", 0);
  spec.target_domain = get_int(doc, "episode", "target_domain", 0);
  spec.validate();
  return spec;
}

models::ModelSpec model_spec(const json& doc) {
  models::ModelSpec spec;
  spec.variant = models::parse_variant(get_str(doc, "model", "variant", "protonet"));
  spec.hidden = get_ints(doc, "model", "hidden", {32});
  spec.embedding_dim = get_int(doc, "model", "embedding_dim", 16);
  spec.temperature = get_num(doc, "model", "temperature", 1.0);
  spec.inner_lr = get_num(doc, "model", "inner_lr", 0.05);
  spec.inner_steps = get_int(doc, "model", "inner_steps", 1);
  return spec;
}

train::TrainConfig train_config(const json& doc, int default_val_per_class = 15) {
  train::TrainConfig cfg;
  cfg.epochs = get_int(doc, "train", "epochs", 10);
  cfg.episodes_per_epoch = get_int(doc, "train", "episodes_per_epoch", 40);
  cfg.episodes_per_meta_batch = get_int(doc, "train", "meta_batch", 4);
  std::string opt = get_str(doc, "train", "optimizer", "adam");
  if (opt == "adam")
    cfg.opt_mode = ad::OptMode::Adam;
  else if (opt == "sgd")
    cfg.opt_mode = ad::OptMode::Sgd;
  else
    throw std::runtime_error("config: unknown optimizer '" + opt + "'");
  cfg.lr = get_num(doc, "train", "lr", 2e-3);
  cfg.episode = episode_spec(doc, default_val_per_class);
  cfg.seed = get_u64(doc, "train", "seed", 0);
  cfg.validate();
  return cfg;
}

void add(std::vector<ResultRecord>& records, std::string experiment, uint64_t seed,
         std::string setting, std::string metric, double value) {
  ResultRecord r;
  r.experiment = std::move(experiment);
  r.seed = seed;
  r.setting = std::move(setting);
  r.metric = std::move(metric);
  r.value = value;
  check_record(r);
  records.push_back(std::move(r));
}

int input_dim(const PoolRecipe& r) {
  return r.g.dim + (r.generator == "two-domain" ? 0 : std::max(0, r.noise_dims));
}

// Shared per-run plumbing: every recipe derives its pools from
// pool_seed -> "run" -> run_seed and its model from the run seed.
RngStream run_rng(uint64_t pool_seed, uint64_t run_seed) {
  return RngStream(pool_seed).child("run").child(run_seed);
}

models::MetaModel fresh_model(const models::ModelSpec& spec, int dim, int ways, uint64_t run_seed) {
  return models::make_model(spec, dim, ways, RngStream(run_seed).child("model-init"));
}

double eval_acc(const models::MetaModel& m, const ClassPool& pool, const EpisodeSpec& spec,
                int episodes, uint64_t seed) {
  return train::evaluate_meta_model(m, pool, spec, episodes, seed).mean_accuracy;
}

// ---- gen-curve ---------------------------------------------------------

void run_gen_curve(const json& doc, const std::vector<uint64_t>& seeds, int eval_T,
                   std::vector<ResultRecord>& records) {
  PoolRecipe pr = pool_recipe(doc);
  pr.g.num_classes = get_int(doc, "pool", "classes", 32);
  pr.g.instances_per_class = get_int(doc, "pool", "instances_per_class", 50);
  EpisodeSpec spec = episode_spec(doc, 5);
  models::ModelSpec mspec = model_spec(doc);
  train::TrainConfig base = train_config(doc, 5);
  std::vector<int> instance_grid = get_ints(doc, "gen_curve", "instances_grid", {10, 50, 200});
  std::vector<int> class_grid = get_ints(doc, "gen_curve", "classes_grid", {8, 16, 32});
  int test_classes = get_int(doc, "gen_curve", "test_classes", 16);
  int test_instances = get_int(doc, "gen_curve", "test_instances", 60);

  for (uint64_t seed : seeds) {
    RngStream run = run_rng(pr.seed, seed);
    PoolRecipe test_pr = pr;
    test_pr.g.num_classes = test_classes;
    test_pr.g.instances_per_class = test_instances;
    ClassPool test_pool = instantiate_pool(test_pr, run.child("test"));

    auto run_cell = [&](const std::string& setting, int classes, int instances) {
      PoolRecipe cell = pr;
      cell.g.num_classes = classes;
      cell.g.instances_per_class = instances;
      ClassPool train_pool = instantiate_pool(cell, run.child("train"));
      models::MetaModel model = fresh_model(mspec, input_dim(pr), spec.ways, seed);
      train::TrainConfig cfg = base;
      cfg.seed = seed;
      train::meta_train(model, train_pool, cfg);
      add(records, "gen-curve", seed, setting, "meta_train_acc",
          eval_acc(model, train_pool, spec, eval_T, seed));
      train::EvalReport rep = train::evaluate_meta_model(model, test_pool, spec, eval_T, seed);
      add(records, "gen-curve", seed, setting, "meta_test_acc", rep.mean_accuracy);
      add(records, "gen-curve", seed, setting, "ci_halfwidth", rep.ci95_halfwidth);
    };

    for (int n : instance_grid)
      run_cell("sweep=instances;instances_per_class=" + std::to_string(n), pr.g.num_classes, n);
    for (int c : class_grid)
      run_cell("sweep=classes;classes=" + std::to_string(c), c, pr.g.instances_per_class);
  }
}

// ---- techniques ---------------------------------------------------------

void run_techniques(const json& doc, const std::vector<uint64_t>& seeds, int eval_T,
                    std::vector<ResultRecord>& records) {
  // Designated pool: a low-instance regime where episodic training
  // measurably overfits, so the regularization-style techniques have room.
  PoolRecipe pr = pool_recipe(doc);
  pr.g.dim = get_int(doc, "pool", "dim", 8);
  pr.h.dim = pr.g.dim;
  pr.g.within_spread = get_num(doc, "pool", "within_spread", 0.8);
  pr.g.instances_per_class = get_int(doc, "pool", "instances_per_class", 17);
  EpisodeSpec spec = episode_spec(doc);
  models::ModelSpec mspec = model_spec(doc);
  train::TrainConfig base = train_config(doc);
  base.epochs = get_int(doc, "train", "epochs", 24);
  int test_classes = get_int(doc, "techniques", "test_classes", 16);
  int pretrain_epochs = get_int(doc, "techniques", "pretrain_epochs", 10);
  double lambda = get_num(doc, "techniques", "lambda", 1.5);
  int aux_batch = get_int(doc, "techniques", "aux_batch", 32);

  std::vector<int> widths;
  widths.push_back(input_dim(pr));
  widths.insert(widths.end(), mspec.hidden.begin(), mspec.hidden.end());
  widths.push_back(mspec.embedding_dim);

  for (uint64_t seed : seeds) {
    RngStream run = run_rng(pr.seed, seed);
    ClassPool train_pool = instantiate_pool(pr, run.child("train"));
    PoolRecipe test_pr = pr;
    test_pr.g.num_classes = test_classes;
    ClassPool test_pool = instantiate_pool(test_pr, run.child("test"));
    train::TrainConfig cfg = base;
    cfg.seed = seed;

    auto report = [&](const std::string& mode, models::MetaModel& model) {
      add(records, "techniques", seed, "mode=" + mode, "meta_train_acc",
          eval_acc(model, train_pool, spec, eval_T, seed));
      train::EvalReport rep = train::evaluate_meta_model(model, test_pool, spec, eval_T, seed);
      add(records, "techniques", seed, "mode=" + mode, "meta_test_acc", rep.mean_accuracy);
      add(records, "techniques", seed, "mode=" + mode, "ci_halfwidth", rep.ci95_halfwidth);
    };

    {
      models::MetaModel scratch = fresh_model(mspec, input_dim(pr), spec.ways, seed);
      train::meta_train(scratch, train_pool, cfg);
      report("scratch", scratch);
    }
    {
      tech::PretrainConfig pc;
      pc.epochs = pretrain_epochs;
      pc.seed = RngStream(seed).child("pretrain").next_u64();
      models::Backbone pre = tech::pretrain_backbone(train_pool, widths, pc);
      models::MetaModel model = fresh_model(mspec, input_dim(pr), spec.ways, seed);
      model.backbone = pre;
      train::meta_train(model, train_pool, cfg);
      report("pretrain", model);
    }
    {
      models::MetaModel model = fresh_model(mspec, input_dim(pr), spec.ways, seed);
      tech::meta_train_multiobjective(model, train_pool, cfg, lambda, aux_batch);
      report("multiobj", model);
    }
  }
}

// ---- bagging --------------------------------------------------------------

void run_bagging(const json& doc, const std::vector<uint64_t>& seeds, int eval_T,
                 std::vector<ResultRecord>& records) {
  PoolRecipe pr = pool_recipe(doc);
  pr.g.within_spread = get_num(doc, "pool", "within_spread", 0.8);
  EpisodeSpec spec = episode_spec(doc);
  models::ModelSpec mspec = model_spec(doc);
  train::TrainConfig base = train_config(doc);
  base.epochs = get_int(doc, "train", "epochs", 16);
  int test_classes = get_int(doc, "bagging", "test_classes", 16);
  int bags = get_int(doc, "bagging", "bags", 10);
  int classes_per_bag = get_int(doc, "bagging", "classes_per_bag", (pr.g.num_classes * 3) / 4);
  int pretrain_epochs = get_int(doc, "bagging", "pretrain_epochs", 10);

  std::vector<int> widths;
  widths.push_back(input_dim(pr));
  widths.insert(widths.end(), mspec.hidden.begin(), mspec.hidden.end());
  widths.push_back(mspec.embedding_dim);

  for (uint64_t seed : seeds) {
    RngStream run = run_rng(pr.seed, seed);
    ClassPool train_pool = instantiate_pool(pr, run.child("train"));
    PoolRecipe test_pr = pr;
    test_pr.g.num_classes = test_classes;
    ClassPool test_pool = instantiate_pool(test_pr, run.child("test"));
    EpisodeSource test_source = train::pool_source(test_pool, spec);
    train::TrainConfig cfg = base;
    cfg.seed = seed;

    // Paired test episodes for single, members and both aggregations.
    RngStream eval_base = RngStream(seed).child("eval-episode");
    std::vector<taskgen::MetaExample> test_episodes;
    test_episodes.reserve(static_cast<size_t>(eval_T));
    for (int i = 0; i < eval_T; ++i)
      test_episodes.push_back(test_source.sample(eval_base.child(static_cast<uint64_t>(i))));

    for (int pretrain = 0; pretrain < 2; ++pretrain) {
      std::string tag = ";pretrain=" + std::to_string(pretrain);
      models::Backbone pre_backbone;
      if (pretrain) {
        tech::PretrainConfig pc;
        pc.epochs = pretrain_epochs;
        pc.seed = RngStream(seed).child("pretrain").next_u64();
        pre_backbone = tech::pretrain_backbone(train_pool, widths, pc);
      }

      models::MetaModel single = fresh_model(mspec, input_dim(pr), spec.ways, seed);
      if (pretrain) single.backbone = pre_backbone;
      train::meta_train(single, train_pool, cfg);
      {
        double acc = 0.0;
        for (const auto& ep : test_episodes) acc += models::episode_accuracy(single, ep);
        add(records, "bagging", seed, "mode=single" + tag, "meta_test_acc", acc / eval_T);
      }

      tech::BagConfig bc;
      bc.bags = bags;
      bc.classes_per_bag = classes_per_bag;
      bc.shared_pretrained = pretrain ? &pre_backbone : nullptr;
      bc.seed = RngStream(seed).child("bag").next_u64();
      tech::BagEnsemble ensemble = tech::train_bag(train_pool, mspec, cfg, bc);

      double member_avg = 0.0;
      for (const models::MetaModel& m : ensemble.members) {
        double acc = 0.0;
        for (const auto& ep : test_episodes) acc += models::episode_accuracy(m, ep);
        member_avg += acc / eval_T;
      }
      member_avg /= ensemble.members.size();
      add(records, "bagging", seed, "mode=members-average" + tag, "meta_test_acc", member_avg);

      double bag1 = 0.0, bag2 = 0.0;
      for (const auto& ep : test_episodes) {
        bag1 += tech::ensemble_accuracy(ensemble, ep, tech::Aggregation::Bag1Logits);
        bag2 += tech::ensemble_accuracy(ensemble, ep, tech::Aggregation::Bag2Probs);
      }
      add(records, "bagging", seed, "mode=bag1" + tag, "meta_test_acc", bag1 / eval_T);
      add(records, "bagging", seed, "mode=bag2" + tag, "meta_test_acc", bag2 / eval_T);
    }
  }
}

// ---- augment ---------------------------------------------------------------

// Concatenates fixed groups of consecutive classes into one class each,
// giving every merged class an internal subcategory structure.
ClassPool merge_classes(const ClassPool& pool, int group) {
  if (group < 1 || pool.num_classes() % group != 0)
    throw std::invalid_argument("merge: class count must be divisible by the group size");
  ClassPool out;
  out.dim = pool.dim;
  out.num_domains = pool.num_domains;
  out.generator = pool.generator + "+merged";
  out.seed = pool.seed;
  for (int c = 0; c < pool.num_classes(); c += group) {
    std::vector<taskgen::Instance> merged;
    for (int j = 0; j < group; ++j)
      for (const taskgen::Instance& inst : pool.classes[static_cast<size_t>(c + j)])
        merged.push_back(inst);
    int new_id = static_cast<int>(out.classes.size());
    for (taskgen::Instance& inst : merged) inst.class_id = new_id;
    out.classes.push_back(std::move(merged));
  }
  return out;
}

void run_augment(const json& doc, const std::vector<uint64_t>& seeds, int eval_T,
                 std::vector<ResultRecord>& records) {
  PoolRecipe pr = pool_recipe(doc);
  // Challenging split: the pool has exactly as many classes as the episode
  // has ways, so every episode reuses the same classes. Classes are built as
  // mixtures of `subclusters` tight clusters.
  int ways = get_int(doc, "episode", "ways", 10);
  int subclusters = get_int(doc, "augment", "subclusters_per_class", 4);
  int per_subcluster = get_int(doc, "augment", "instances_per_subcluster", 15);
  std::vector<int> k_grid = get_ints(doc, "augment", "k_grid", {1, 2, 4, 8});
  int trials = get_int(doc, "augment", "trials", 30);
  bool pretrain_features = get_bool(doc, "augment", "pretrain_features", false);
  int pretrain_epochs = get_int(doc, "augment", "pretrain_epochs", 5);

  EpisodeSpec spec;
  spec.ways = ways;
  spec.shots = get_int(doc, "episode", "shots", 1);
  spec.val_per_class = get_int(doc, "episode", "val_per_class", 5);
  spec.validate();
  models::ModelSpec mspec = model_spec(doc);
  train::TrainConfig base = train_config(doc, 5);
  base.epochs = get_int(doc, "train", "epochs", 16);
  base.episode = spec;

  PoolRecipe cluster_pr = pr;
  cluster_pr.g.num_classes = ways * subclusters;
  cluster_pr.g.instances_per_class = per_subcluster;

  for (uint64_t seed : seeds) {
    RngStream run = run_rng(pr.seed, seed);
    ClassPool train_pool = merge_classes(instantiate_pool(cluster_pr, run.child("train")), subclusters);
    ClassPool test_pool = merge_classes(instantiate_pool(cluster_pr, run.child("test")), subclusters);

    const models::Backbone* feature_map = nullptr;
    models::Backbone pre;
    if (pretrain_features) {
      std::vector<int> widths;
      widths.push_back(input_dim(pr));
      widths.insert(widths.end(), mspec.hidden.begin(), mspec.hidden.end());
      widths.push_back(mspec.embedding_dim);
      tech::PretrainConfig pc;
      pc.epochs = pretrain_epochs;
      pc.seed = RngStream(seed).child("aug-pretrain").next_u64();
      pre = tech::pretrain_backbone(train_pool, widths, pc);
      feature_map = &pre;
    }

    for (int k : k_grid) {
      tech::AugmentedPool aug = tech::kmeans_augment_pool(
          train_pool, k, feature_map, trials, RngStream(seed).child("kmeans").child(static_cast<uint64_t>(k)));
      EpisodeSource source = tech::augmented_source(aug, spec);
      models::MetaModel model = fresh_model(mspec, input_dim(pr), spec.ways, seed);
      train::TrainConfig cfg = base;
      cfg.seed = seed;
      train::meta_train(model, source, cfg);
      train::EvalReport rep = train::evaluate_meta_model(model, test_pool, spec, eval_T, seed);
      std::string setting = "k=" + std::to_string(k);
      add(records, "augment", seed, setting, "meta_test_acc", rep.mean_accuracy);
      add(records, "augment", seed, setting, "ci_halfwidth", rep.ci95_halfwidth);
    }
  }
}

// ---- metaknn ---------------------------------------------------------------

void run_metaknn(const json& doc, const std::vector<uint64_t>& seeds, int eval_T,
                 std::vector<ResultRecord>& records) {
  PoolRecipe pr = pool_recipe(doc);
  pr.generator = "heterogeneous";
  pr.h.within_spread = get_num(doc, "pool", "within_spread", 0.7);
  int train_cps = get_int(doc, "metaknn", "train_classes_per_sub", 8);
  int test_cps = get_int(doc, "metaknn", "test_classes_per_sub", 6);
  pr.h.classes_per_sub = train_cps + test_cps;
  EpisodeSpec spec = episode_spec(doc);
  models::ModelSpec mspec = model_spec(doc);
  train::TrainConfig base = train_config(doc);
  base.epochs = get_int(doc, "train", "epochs", 8);
  tech::MetaKnnConfig knn;
  knn.k = get_int(doc, "metaknn", "k", 40);
  knn.finetune_epochs = get_int(doc, "metaknn", "finetune_epochs", 1);
  knn.finetune_lr = get_num(doc, "metaknn", "finetune_lr", 0.12);
  int index_tasks = get_int(doc, "metaknn", "index_tasks", 400);

  for (uint64_t seed : seeds) {
    RngStream run = run_rng(pr.seed, seed);
    ClassPool full = instantiate_pool(pr, run.child("all"));
    // Per sub-distribution, the first train_cps classes go to meta-train, the
    // rest to meta-test; the sub signatures are shared, the classes disjoint.
    std::vector<int> train_ids, test_ids;
    for (int s = 0; s < pr.h.num_subdistributions; ++s)
      for (int j = 0; j < pr.h.classes_per_sub; ++j)
        (j < train_cps ? train_ids : test_ids).push_back(s * pr.h.classes_per_sub + j);
    ClassPool train_pool = taskgen::select_pool_classes(full, train_ids);
    ClassPool test_pool = taskgen::select_pool_classes(full, test_ids);

    EpisodeSource train_source = train::per_sub_source(train_pool, spec);
    EpisodeSource test_source = train::per_sub_source(test_pool, spec);

    models::MetaModel model = fresh_model(mspec, input_dim(pr), spec.ways, seed);
    train::TrainConfig cfg = base;
    cfg.seed = seed;
    train::meta_train(model, train_source, cfg);

    tech::TaskIndex index = tech::build_task_index(train_source, index_tasks, model.backbone,
                                                   RngStream(seed).child("index").next_u64());

    RngStream eval_base = RngStream(seed).child("eval-episode");
    double base_acc = 0.0, knn_acc = 0.0;
    for (int i = 0; i < eval_T; ++i) {
      taskgen::MetaExample ep = test_source.sample(eval_base.child(static_cast<uint64_t>(i)));
      base_acc += models::episode_accuracy(model, ep);
      tech::MetaKnnResult res = tech::meta_knn_adapt(model, index, ep, knn);
      int correct = 0;
      for (size_t q = 0; q < res.labels.size(); ++q)
        if (res.labels[q] == ep.val_labels[q]) ++correct;
      knn_acc += static_cast<double>(correct) / res.labels.size();
    }
    add(records, "metaknn", seed, "mode=protonet", "meta_test_acc", base_acc / eval_T);
    add(records, "metaknn", seed, "mode=protonet-knn", "meta_test_acc", knn_acc / eval_T);
  }
}

// ---- domainshift -------------------------------------------------------------

void run_domainshift(const json& doc, const std::vector<uint64_t>& seeds, int eval_T,
                     std::vector<ResultRecord>& records) {
  PoolRecipe pr = pool_recipe(doc);
  pr.generator = "two-domain";
  int train_classes = get_int(doc, "domainshift", "train_classes", 20);
  int test_classes = get_int(doc, "domainshift", "test_classes", 12);
  pr.g.num_classes = train_classes + test_classes;
  pr.g.instances_per_class = get_int(doc, "pool", "instances_per_class", 40);
  EpisodeSpec base_spec = episode_spec(doc);
  models::ModelSpec mspec = model_spec(doc);
  train::TrainConfig base = train_config(doc);

  for (uint64_t seed : seeds) {
    RngStream run = run_rng(pr.seed, seed);
    ClassPool full = instantiate_pool(pr, run.child("all"));
    std::vector<int> train_ids, test_ids;
    for (int c = 0; c < train_classes; ++c) train_ids.push_back(c);
    for (int c = train_classes; c < train_classes + test_classes; ++c) test_ids.push_back(c);
    ClassPool train_pool = taskgen::select_pool_classes(full, train_ids);
    ClassPool test_pool = taskgen::select_pool_classes(full, test_ids);

    for (const char* case_id : {"I-1", "I-2", "I-3", "I-4"}) {
      DomainCase dc = domainshift_case(case_id, base_spec);
      models::MetaModel model = fresh_model(mspec, input_dim(pr), base_spec.ways, seed);
      train::TrainConfig cfg = base;
      cfg.episode = dc.train_spec;
      cfg.seed = seed;
      train::meta_train(model, train_pool, cfg);
      train::EvalReport rep =
          train::evaluate_meta_model(model, test_pool, dc.test_spec, eval_T, seed);
      add(records, "domainshift", seed, std::string("case=") + case_id, "meta_test_acc", rep.mean_accuracy);
    }
  }
}

// ---- single-run ----------------------------------------------------------------

void run_single(const json& doc, const std::vector<uint64_t>& seeds, int eval_T,
                std::vector<ResultRecord>& records) {
  PoolRecipe pr = pool_recipe(doc);
  EpisodeSpec spec = episode_spec(doc);
  models::ModelSpec mspec = model_spec(doc);
  train::TrainConfig base = train_config(doc);
  int test_classes = get_int(doc, "single_run", "test_classes", 16);

  for (uint64_t seed : seeds) {
    RngStream run = run_rng(pr.seed, seed);
    ClassPool train_pool = instantiate_pool(pr, run.child("train"));
    PoolRecipe test_pr = pr;
    test_pr.g.num_classes = test_classes;
    if (pr.generator == "heterogeneous") test_pr.h.classes_per_sub = std::max(1, test_classes / std::max(1, pr.h.num_subdistributions));
    ClassPool test_pool = instantiate_pool(test_pr, run.child("test"));

    models::MetaModel model = fresh_model(mspec, input_dim(pr), spec.ways, seed);
    train::TrainConfig cfg = base;
    cfg.seed = seed;
    train::TrainResult curve = train::meta_train(model, train_pool, cfg);
    std::string setting = std::string("variant=") + models::variant_name(mspec.variant);
    if (!curve.curve.empty()) {
      add(records, "single-run", seed, setting, "meta_train_loss",
          curve.curve.back().meta_train_loss);
      add(records, "single-run", seed, setting, "meta_train_acc", curve.curve.back().meta_train_acc);
    }
    train::EvalReport rep = train::evaluate_meta_model(model, test_pool, spec, eval_T, seed);
    add(records, "single-run", seed, setting, "meta_test_acc", rep.mean_accuracy);
    add(records, "single-run", seed, setting, "ci_halfwidth", rep.ci95_halfwidth);
  }
}

}  // namespace

DomainCase domainshift_case(const std::string& case_id, const EpisodeSpec& base) {
  auto spec_with = [&](int source, int target) {
    EpisodeSpec s = base;
    s.source_domain = source;
    s.target_domain = target;
    return s;
  };
  DomainCase dc;
  if (case_id == "I-1") {  // train and test both within domain 0
    dc.train_spec = spec_with(0, 0);
    dc.test_spec = spec_with(0, 0);
  } else if (case_id == "I-2") {  // cross-domain tasks in both phases
    dc.train_spec = spec_with(1, 0);
    dc.test_spec = spec_with(1, 0);
  } else if (case_id == "I-3") {  // train within domain 0, test cross-domain
    dc.train_spec = spec_with(0, 0);
    dc.test_spec = spec_with(1, 0);
  } else if (case_id == "I-4") {  // train within domain 1, test cross-domain
    dc.train_spec = spec_with(1, 1);
    dc.test_spec = spec_with(1, 0);
  } else {
    throw std::invalid_argument("unknown domain-shift case '" + case_id + "'");
  }
  return dc;
}

taskgen::ClassPool build_pool_from_config(const ExperimentConfig& config) {
  json doc = parse_json(config.json_text);
  PoolRecipe pr = pool_recipe(doc);
  ClassPool pool = instantiate_pool(pr, RngStream(pr.seed));
  pool.seed = pr.seed;
  return pool;
}

taskgen::EpisodeSpec episode_from_config(const ExperimentConfig& config) {
  return episode_spec(parse_json(config.json_text));
}

models::ModelSpec model_from_config(const ExperimentConfig& config) {
  return model_spec(parse_json(config.json_text));
}

train::TrainConfig train_config_from_config(const ExperimentConfig& config) {
  return train_config(parse_json(config.json_text));
}

TrainOutput train_from_config(const ExperimentConfig& config, const taskgen::ClassPool& pool) {
  json doc = parse_json(config.json_text);
  models::ModelSpec mspec = model_spec(doc);
  train::TrainConfig cfg = train_config(doc);
  TrainOutput out{models::make_model(mspec, pool.dim, cfg.episode.ways,
                                     RngStream(cfg.seed).child("model-init")),
                  {}};
  out.curve = train::meta_train(out.model, pool, cfg);
  return out;
}

std::vector<ResultRecord> run_experiment(const ExperimentConfig& config) {
  if (std::find(kExperimentIds.begin(), kExperimentIds.end(), config.experiment) ==
      kExperimentIds.end())
    throw std::invalid_argument("unknown experiment id '" + config.experiment + "'");
  json doc = parse_json(config.json_text);
  std::vector<uint64_t> seeds = config.seeds();
  int eval_T = config.eval_episodes();

  std::vector<ResultRecord> records;
  try {
    if (config.experiment == "gen-curve") run_gen_curve(doc, seeds, eval_T, records);
    else if (config.experiment == "techniques") run_techniques(doc, seeds, eval_T, records);
    else if (config.experiment == "bagging") run_bagging(doc, seeds, eval_T, records);
    else if (config.experiment == "augment") run_augment(doc, seeds, eval_T, records);
    else if (config.experiment == "metaknn") run_metaknn(doc, seeds, eval_T, records);
    else if (config.experiment == "domainshift") run_domainshift(doc, seeds, eval_T, records);
    else run_single(doc, seeds, eval_T, records);
  } catch (const std::exception& e) {
    throw std::runtime_error("experiment '" + config.experiment + "' failed: " + e.what());
  }
  return records;
}

void run_experiment_to_csv(const ExperimentConfig& config, const std::string& out_path) {
  write_csv(run_experiment(config), out_path);
}

}  // namespace metaepi::harness
