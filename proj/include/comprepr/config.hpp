#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "comprepr/data.hpp"
#include "comprepr/fewshot.hpp"
#include "comprepr/trainer.hpp"

namespace comprepr {

std::string to_string(CompVariant v);
std::string to_string(SoftImpl s);
std::string to_string(HeadKind h);
std::string to_string(LabelSpace l);
CompVariant variant_from_string(const std::string& s);
SoftImpl soft_impl_from_string(const std::string& s);
HeadKind head_from_string(const std::string& s);
LabelSpace label_space_from_string(const std::string& s);

struct ModelConfig {
  std::int64_t hidden_dim = 128;
  std::int64_t embedding_dim = 64;
  int hidden_layers = 2;
  double cosine_scale = 10.0;
};

struct TrainSection {
  int epochs_pretrain = 60;
  int epochs_finetune = 60;
  int batch_size = 32;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<std::pair<int, double>> lr_milestones;  // empty = default schedule
  HeadKind head = HeadKind::cosine;
  bool eta_warm_start = false;
};

struct EpisodeSection {
  std::vector<int> n_shots{1, 5};
  int query_per_class = 5;
  int trials = 20;
  std::vector<LabelSpace> label_spaces{LabelSpace::novel_only, LabelSpace::joint};
  std::vector<HeadKind> heads{HeadKind::cosine};
  bool augment = false;
  bool prototypical = false;
  int base_support_per_class = 20;
  int head_iters_cosine = 100;
  int head_iters_linear = 200;
  double head_lr = 0.1;
};

struct TreSection {
  double split_fraction = 0.7;
  int iters = 500;
  double lr = 0.1;
};

/// The whole experiment configuration: structured text (JSON) with one
/// section per pipeline stage. Every field has a default; unknown keys are
/// rejected; parse -> serialize -> parse is a fixed point.
struct ExperimentConfig {
  GeneratorSpec generator;
  ModelConfig model;
  LossConfig loss;
  TrainSection train;
  EpisodeSection episodes;
  TreSection tre;

  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
  std::string serialize() const;
  /// FNV-1a of the serialized effective config, as 16 hex digits.
  std::string hash() const;

  RunConfig run_config(std::filesystem::path dataset, std::uint64_t seed,
                       std::filesystem::path checkpoint) const;
};

}  // namespace comprepr
