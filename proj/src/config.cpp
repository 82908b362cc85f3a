#include "comprepr/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <json.hpp>

namespace comprepr {

using nlohmann::json;

std::string to_string(CompVariant v) {
  switch (v) {
    case CompVariant::none: return "none";
    case CompVariant::hard: return "hard";
    case CompVariant::soft: return "soft";
  }
  throw ContractError("unknown variant");
}

std::string to_string(SoftImpl s) {
  return s == SoftImpl::raw_margin ? "raw_margin" : "one_vs_all_logistic";
}

std::string to_string(HeadKind h) { return h == HeadKind::linear ? "linear" : "cosine"; }

std::string to_string(LabelSpace l) { return l == LabelSpace::joint ? "joint" : "novel"; }

CompVariant variant_from_string(const std::string& s) {
  if (s == "none") return CompVariant::none;
  if (s == "hard") return CompVariant::hard;
  if (s == "soft") return CompVariant::soft;
  throw ConfigError("unknown variant '" + s + "' (expected none|hard|soft)");
}

SoftImpl soft_impl_from_string(const std::string& s) {
  if (s == "raw_margin") return SoftImpl::raw_margin;
  if (s == "one_vs_all_logistic") return SoftImpl::one_vs_all_logistic;
  throw ConfigError("unknown soft_impl '" + s + "' (expected raw_margin|one_vs_all_logistic)");
}

HeadKind head_from_string(const std::string& s) {
  if (s == "linear") return HeadKind::linear;
  if (s == "cosine") return HeadKind::cosine;
  throw ConfigError("unknown head '" + s + "' (expected linear|cosine)");
}

LabelSpace label_space_from_string(const std::string& s) {
  if (s == "novel") return LabelSpace::novel_only;
  if (s == "joint") return LabelSpace::joint;
  throw ConfigError("unknown label_space '" + s + "' (expected novel|joint)");
}

namespace {

/// Applies known keys of a section and rejects everything else.
class SectionReader {
 public:
  SectionReader(const json& j, std::string name) : section_(j), name_(std::move(name)) {
    if (!section_.is_object()) throw ConfigError("section '" + name_ + "' must be an object");
    for (auto it = section_.begin(); it != section_.end(); ++it) pending_.insert(it.key());
  }

  template <class T>
  void read(const char* key, T& out) {
    auto it = section_.find(key);
    if (it == section_.end()) return;
    pending_.erase(key);
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw ConfigError("bad value for " + name_ + "." + key);
    }
  }

  void read_string(const char* key, const std::function<void(const std::string&)>& apply) {
    auto it = section_.find(key);
    if (it == section_.end()) return;
    pending_.erase(key);
    if (!it->is_string()) throw ConfigError(name_ + "." + key + " must be a string");
    apply(it->get<std::string>());
  }

  void read_string_list(const char* key, const std::function<void(const std::vector<std::string>&)>& apply) {
    auto it = section_.find(key);
    if (it == section_.end()) return;
    pending_.erase(key);
    try {
      apply(it->get<std::vector<std::string>>());
    } catch (const json::exception&) {
      throw ConfigError(name_ + "." + key + " must be a list of strings");
    }
  }

  void finish() const {
    if (!pending_.empty()) throw ConfigError("unknown key '" + name_ + "." + *pending_.begin() + "'");
  }

 private:
  const json& section_;
  std::string name_;
  std::set<std::string> pending_;
};

}  // namespace

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config root must be an object");

  ExperimentConfig cfg;
  const std::set<std::string> known{"generator", "model", "loss", "train", "episodes", "tre"};
  for (auto it = root.begin(); it != root.end(); ++it) {
    if (!known.count(it.key())) throw ConfigError("unknown section '" + it.key() + "'");
  }

  if (root.contains("generator")) {
    SectionReader s(root["generator"], "generator");
    s.read("k", cfg.generator.k);
    s.read("a_per_cat", cfg.generator.a_per_cat);
    s.read("n_base", cfg.generator.n_base);
    s.read("n_novel", cfg.generator.n_novel);
    s.read("per_cat_base", cfg.generator.per_cat_base);
    s.read("per_cat_novel", cfg.generator.per_cat_novel);
    s.read("d_in", cfg.generator.d_in);
    s.read("r_nuisance", cfg.generator.r_nuisance);
    s.read("sigma_noise", cfg.generator.sigma_noise);
    s.finish();
  }
  if (root.contains("model")) {
    SectionReader s(root["model"], "model");
    s.read("hidden_dim", cfg.model.hidden_dim);
    s.read("embedding_dim", cfg.model.embedding_dim);
    s.read("hidden_layers", cfg.model.hidden_layers);
    s.read("cosine_scale", cfg.model.cosine_scale);
    s.finish();
  }
  if (root.contains("loss")) {
    SectionReader s(root["loss"], "loss");
    s.read_string("variant", [&](const std::string& v) { cfg.loss.variant = variant_from_string(v); });
    s.read("lambda", cfg.loss.lambda);
    s.read("beta", cfg.loss.beta);
    s.read_string("soft_impl", [&](const std::string& v) { cfg.loss.soft_impl = soft_impl_from_string(v); });
    s.read("neg_sample_ratio", cfg.loss.neg_sample_ratio);
    s.read("sample_negatives", cfg.loss.sample_negatives);
    s.read("deep_layers", cfg.loss.deep_layers);
    s.finish();
  }
  if (root.contains("train")) {
    SectionReader s(root["train"], "train");
    s.read("epochs_pretrain", cfg.train.epochs_pretrain);
    s.read("epochs_finetune", cfg.train.epochs_finetune);
    s.read("batch_size", cfg.train.batch_size);
    s.read("lr", cfg.train.lr);
    s.read("momentum", cfg.train.momentum);
    s.read("weight_decay", cfg.train.weight_decay);
    s.read("lr_milestones", cfg.train.lr_milestones);
    s.read_string("head", [&](const std::string& v) { cfg.train.head = head_from_string(v); });
    s.read("eta_warm_start", cfg.train.eta_warm_start);
    s.finish();
  }
  if (root.contains("episodes")) {
    SectionReader s(root["episodes"], "episodes");
    s.read("n_shots", cfg.episodes.n_shots);
    s.read("query_per_class", cfg.episodes.query_per_class);
    s.read("trials", cfg.episodes.trials);
    s.read_string_list("label_spaces", [&](const std::vector<std::string>& names) {
      cfg.episodes.label_spaces.clear();
      for (const auto& n : names) cfg.episodes.label_spaces.push_back(label_space_from_string(n));
    });
    s.read_string_list("heads", [&](const std::vector<std::string>& names) {
      cfg.episodes.heads.clear();
      for (const auto& n : names) cfg.episodes.heads.push_back(head_from_string(n));
    });
    s.read("augment", cfg.episodes.augment);
    s.read("prototypical", cfg.episodes.prototypical);
    s.read("base_support_per_class", cfg.episodes.base_support_per_class);
    s.read("head_iters_cosine", cfg.episodes.head_iters_cosine);
    s.read("head_iters_linear", cfg.episodes.head_iters_linear);
    s.read("head_lr", cfg.episodes.head_lr);
    s.finish();
  }
  if (root.contains("tre")) {
    SectionReader s(root["tre"], "tre");
    s.read("split_fraction", cfg.tre.split_fraction);
    s.read("iters", cfg.tre.iters);
    s.read("lr", cfg.tre.lr);
    s.finish();
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open config '" + path.string() + "'");
  std::ostringstream ss;
  ss << file.rdbuf();
  return parse(ss.str());
}

std::string ExperimentConfig::serialize() const {
  json root;
  root["generator"] = {{"k", generator.k},
                       {"a_per_cat", generator.a_per_cat},
                       {"n_base", generator.n_base},
                       {"n_novel", generator.n_novel},
                       {"per_cat_base", generator.per_cat_base},
                       {"per_cat_novel", generator.per_cat_novel},
                       {"d_in", generator.d_in},
                       {"r_nuisance", generator.r_nuisance},
                       {"sigma_noise", generator.sigma_noise}};
  root["model"] = {{"hidden_dim", model.hidden_dim},
                   {"embedding_dim", model.embedding_dim},
                   {"hidden_layers", model.hidden_layers},
                   {"cosine_scale", model.cosine_scale}};
  root["loss"] = {{"variant", to_string(loss.variant)},
                  {"lambda", loss.lambda},
                  {"beta", loss.beta},
                  {"soft_impl", to_string(loss.soft_impl)},
                  {"neg_sample_ratio", loss.neg_sample_ratio},
                  {"sample_negatives", loss.sample_negatives},
                  {"deep_layers", loss.deep_layers}};
  root["train"] = {{"epochs_pretrain", train.epochs_pretrain},
                   {"epochs_finetune", train.epochs_finetune},
                   {"batch_size", train.batch_size},
                   {"lr", train.lr},
                   {"momentum", train.momentum},
                   {"weight_decay", train.weight_decay},
                   {"lr_milestones", train.lr_milestones},
                   {"head", to_string(train.head)},
                   {"eta_warm_start", train.eta_warm_start}};
  json spaces = json::array();
  for (LabelSpace l : episodes.label_spaces) spaces.push_back(to_string(l));
  json heads = json::array();
  for (HeadKind h : episodes.heads) heads.push_back(to_string(h));
  root["episodes"] = {{"n_shots", episodes.n_shots},
                      {"query_per_class", episodes.query_per_class},
                      {"trials", episodes.trials},
                      {"label_spaces", spaces},
                      {"heads", heads},
                      {"augment", episodes.augment},
                      {"prototypical", episodes.prototypical},
                      {"base_support_per_class", episodes.base_support_per_class},
                      {"head_iters_cosine", episodes.head_iters_cosine},
                      {"head_iters_linear", episodes.head_iters_linear},
                      {"head_lr", episodes.head_lr}};
  root["tre"] = {{"split_fraction", tre.split_fraction}, {"iters", tre.iters}, {"lr", tre.lr}};
  return root.dump(2) + "\n";
}

std::string ExperimentConfig::hash() const {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(serialize())));
  return buf;
}

RunConfig ExperimentConfig::run_config(std::filesystem::path dataset, std::uint64_t seed,
                                       std::filesystem::path checkpoint) const {
  RunConfig rc;
  rc.dataset_path = std::move(dataset);
  rc.loss = loss;
  rc.epochs_pretrain = train.epochs_pretrain;
  rc.epochs_finetune = train.epochs_finetune;
  rc.batch_size = train.batch_size;
  rc.seed = seed;
  rc.head = train.head;
  rc.cosine_scale = model.cosine_scale;
  rc.lr = train.lr;
  rc.momentum = train.momentum;
  rc.weight_decay = train.weight_decay;
  rc.lr_milestones = train.lr_milestones;
  rc.hidden_dim = model.hidden_dim;
  rc.embedding_dim = model.embedding_dim;
  rc.hidden_layers = model.hidden_layers;
  rc.eta_warm_start = train.eta_warm_start;
  rc.checkpoint_path = std::move(checkpoint);
  return rc;
}

}  // namespace comprepr
