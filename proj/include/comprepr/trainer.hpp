#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "comprepr/losses.hpp"

namespace comprepr {

struct LrSchedule {
  double base_lr = 0.1;
  std::vector<std::pair<int, double>> milestones;  // (epoch, multiplier), applied at epoch >= milestone

  bool operator==(const LrSchedule&) const = default;
};

/// Base lr times the product of the multipliers of all milestones <= epoch.
double lr_at(const LrSchedule& schedule, int epoch);

struct ParamRef {
  std::string name;
  Tensor tensor;
  bool decay = true;  // attribute embeddings opt out of weight decay
};

struct OptimizerState {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  LrSchedule schedule;
  std::vector<Eigen::VectorXd> velocity;  // aligned with the parameter list
};

OptimizerState make_optimizer(std::span<const ParamRef> params, double momentum, double weight_decay,
                              LrSchedule schedule);

/// v <- momentum*v + g + weight_decay*p;  p <- p - lr*v.
/// Gradients must be finite; a non-finite gradient raises NumericError
/// naming the parameter.
void sgd_step(std::span<const ParamRef> params, OptimizerState& state);

struct RunConfig {
  std::filesystem::path dataset_path;
  LossConfig loss;
  int epochs_pretrain = 60;
  int epochs_finetune = 60;
  int batch_size = 32;
  std::uint64_t seed = 0;
  HeadKind head = HeadKind::cosine;
  double cosine_scale = 10.0;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  /// Empty = default drop of x0.1 forty epochs into finetuning.
  std::vector<std::pair<int, double>> lr_milestones;
  std::int64_t hidden_dim = 128;
  std::int64_t embedding_dim = 64;
  int hidden_layers = 2;
  /// Hard variant only: refit the attribute embeddings to the decomposition
  /// of the pretrained activations (least squares plus a short cosine
  /// descent) when the regularized phase starts, instead of descending from
  /// the random init. The refit minimizes the hard objective itself, so it
  /// is meaningless for the soft variant and ignored there.
  bool eta_warm_start = false;
  std::filesystem::path checkpoint_path;  // empty = keep checkpoints in memory only

  LrSchedule schedule() const;
  void validate() const;
};

struct EpochStats {
  int epoch = 0;
  double loss_cls = 0.0;
  double loss_comp = 0.0;
  double loss_orth = 0.0;
  double base_val_top1 = 0.0;
  double lr = 0.0;
};

struct ResidualSummary {
  double mean_residual_norm = 0.0;
  double mean_embedding_norm = 0.0;
  double mean_target_norm = 0.0;   // mean |sum of attribute embeddings|
  double mean_cos_distance = 0.0;  // mean 1 - cos(f, attribute sum)
};

struct RunRecord {
  std::vector<EpochStats> epochs;
  ResidualSummary final_residual;
  double wall_seconds = 0.0;
  std::string config_hash;
};

struct TrainResult {
  EncoderParams encoder;
  EtaSet etas;
  ClassifierHead head;
  RunRecord record;
};

/// Two-phase base-category training: classification only for
/// epochs_pretrain, then the full regularized objective for epochs_finetune.
/// variant=none makes the second phase a plain continuation.
TrainResult train_base(const RunConfig& config, const SplitDataset& dataset);
TrainResult train_base(const RunConfig& config);  // loads the dataset from config.dataset_path

// ---- checkpoints: flat archive of named fp64 arrays ----

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedArray> arrays);
std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path);

std::vector<NamedArray> pack_model(const EncoderParams& encoder, const EtaSet& etas, const ClassifierHead& head);
void unpack_model(std::span<const NamedArray> arrays, EncoderParams& encoder, EtaSet& etas, ClassifierHead& head);

void save_run_record(const std::filesystem::path& path, const RunRecord& record);

/// Gathers every trainable tensor with its checkpoint name; eta matrices are
/// flagged decay=false.
std::vector<ParamRef> collect_parameters(const EncoderParams& encoder, const EtaSet& etas,
                                         const ClassifierHead& head);

}  // namespace comprepr
