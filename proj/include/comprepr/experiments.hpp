#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "comprepr/config.hpp"
#include "comprepr/fewshot.hpp"

namespace comprepr {

// ---- gradient verification suite ----

struct GradientCheckLine {
  std::string objective;
  double max_error = 0.0;
  bool pass = false;
};

struct GradientSuiteReport {
  std::vector<GradientCheckLine> lines;
  bool all_pass = false;
  double seconds = 0.0;
};

inline constexpr double kGradCheckTolerance = 1e-4;
inline constexpr double kGradCheckEps = 1e-5;

/// Checks analytic gradients of every objective combination (classification
/// only; hard / soft raw-margin / soft one-versus-all, each with and without
/// orthogonality, with and without deep layers) against central finite
/// differences on random tiny instances, `seeds` instances each.
/// `corrupt_target`, when non-empty, perturbs the analytic gradient of the
/// named objective so tests can verify the checker catches faults.
GradientSuiteReport run_gradient_suite(int seeds, const std::string& corrupt_target = "");

// ---- few-shot evaluation runner ----

struct EvalOptions {
  std::vector<int> n_shots{1, 5};
  std::vector<LabelSpace> label_spaces{LabelSpace::novel_only, LabelSpace::joint};
  std::vector<HeadKind> heads{HeadKind::cosine};
  bool augment = false;
  bool prototypical = false;
  int trials = 20;
  int query_per_class = 5;
  int base_support_per_class = 20;
  int head_iters_cosine = 100;
  int head_iters_linear = 200;
  double head_lr = 0.1;
  double cosine_scale = 10.0;
  std::uint64_t seed = 0;
  std::string variant_tag = "none";
};

EvalOptions eval_options_from(const ExperimentConfig& cfg, std::uint64_t seed);

/// Extracts frozen features once and runs every requested
/// (method, n_shot, label_space) combination over `trials` episodes.
std::vector<MetricsRecord> run_eval(const SplitDataset& dataset, const EncoderParams& encoder,
                                    const EvalOptions& options);

std::vector<MetricsRecord> run_eval(const FrozenFeatures& features, const SplitDataset& dataset,
                                    const EvalOptions& options);

/// Line-delimited metrics records with the effective config echoed in a
/// comment line. Written atomically (temp file + rename).
void write_metrics_file(const std::filesystem::path& path, const std::vector<MetricsRecord>& records,
                        const std::string& config_hash, const std::string& config_echo);

std::string format_metrics_record(const MetricsRecord& rec, const std::string& config_hash);

/// Atomic text-file write shared by all emitters.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

}  // namespace comprepr
