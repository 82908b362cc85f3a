#include "comprepr/experiments.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace comprepr {

// ---------------------------------------------------------------------------
// gradient suite
// ---------------------------------------------------------------------------

namespace {

struct TinyInstance {
  EncoderParams encoder;
  EtaSet etas;
  ClassifierHead head;
  Tensor batch;
  std::vector<std::int64_t> labels;
  BatchDerivations derivs;
  SoftSupervision supervision;  // frozen per instance so the objective is deterministic
};

TinyInstance make_tiny_instance(std::uint64_t seed, const LossConfig& cfg) {
  const std::int64_t d_in = 7, hidden = 6, m = 5, k = 6, batch = 4, classes = 3;

  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(derive_seed(seed, "gradcheck-instance-" + std::to_string(attempt)));

    TinyInstance inst;
    const std::int64_t dims[] = {d_in, hidden, hidden, m};
    inst.encoder = init_encoder(dims, rng);
    inst.encoder.tap_layers = cfg.deep_layers;
    // Small positive biases keep the tiny net away from relu kinks, where
    // finite differences are not a valid oracle.
    for (DenseLayer& layer : inst.encoder.layers) layer.bias.flat().setConstant(0.05);
    // Alternate head kinds so both classifier gradients stay covered. Scale 4
    // keeps the cosine softmax unsaturated; saturated probabilities push
    // gradient coordinates under the comparison's 1e-8 floor, where
    // finite-difference round-off dominates.
    inst.head = init_head(seed % 2 == 0 ? HeadKind::cosine : HeadKind::linear, classes, m, rng, 4.0);
    inst.etas = init_eta_set(k, inst.encoder, cfg, rng);

    inst.batch = Tensor::zeros({batch, d_in});
    auto bm = inst.batch.matrix();
    for (std::int64_t i = 0; i < bm.size(); ++i) bm.data()[i] = rng.normal();
    for (std::int64_t i = 0; i < batch; ++i) {
      inst.labels.push_back(static_cast<std::int64_t>(rng.below(classes)));
      auto attrs = rng.sample_without_replacement(static_cast<std::size_t>(k), 2);
      inst.derivs.push_back(
          Derivation::of({static_cast<std::int64_t>(attrs[0]), static_cast<std::int64_t>(attrs[1])}));
    }
    if (cfg.variant == CompVariant::soft && cfg.soft_impl == SoftImpl::one_vs_all_logistic) {
      LossConfig frozen = cfg;
      frozen.sample_negatives = false;  // deterministic objective for finite differences
      inst.supervision = build_soft_supervision(inst.derivs, k, frozen, nullptr);
    }

    // The hard objective normalizes activations; a dead relu row would sit
    // on the degenerate-vector guard. Redraw such instances.
    if (attempt < 64) {
      EncodeResult enc = encode_batch(inst.encoder, inst.batch);
      double least = enc.embedding.matrix().rowwise().norm().minCoeff();
      for (int layer : cfg.deep_layers) {
        least = std::min(least, enc.taps.at(layer).matrix().rowwise().norm().minCoeff());
      }
      if (least < 1e-3) continue;
    }
    return inst;
  }
}

std::vector<Tensor> instance_parameters(const TinyInstance& inst) {
  std::vector<Tensor> params;
  for (const DenseLayer& l : inst.encoder.layers) {
    params.push_back(l.weight);
    params.push_back(l.bias);
  }
  params.push_back(inst.head.weights);
  if (inst.head.kind == HeadKind::linear) params.push_back(inst.head.bias);
  for (const Tensor& t : inst.etas.parameters()) params.push_back(t);
  return params;
}

Tensor tiny_objective(const TinyInstance& inst, const LossConfig& cfg) {
  EncodeResult enc = encode_batch(inst.encoder, inst.batch);
  Tensor total = softmax_cross_entropy_rows(classify_batch(inst.head, enc.embedding), inst.labels);
  if (cfg.variant == CompVariant::none) return total;

  std::vector<std::pair<Tensor, const AttributeEmbedding*>> layers;
  for (int layer : cfg.deep_layers) layers.emplace_back(enc.taps.at(layer), &inst.etas.taps.at(layer));
  layers.emplace_back(enc.embedding, &inst.etas.final_eta);

  for (const auto& [activations, eta] : layers) {
    Tensor comp;
    if (cfg.variant == CompVariant::hard) {
      comp = hard_comp_from_embeddings(activations, *eta, inst.derivs);
    } else {
      Tensor scores = matmul(activations, transpose(eta->eta));
      comp = soft_comp_from_scores(scores, inst.derivs, cfg.soft_impl,
                                   cfg.soft_impl == SoftImpl::one_vs_all_logistic ? &inst.supervision : nullptr);
    }
    total = add(total, scale(comp, cfg.lambda));
    if (cfg.beta > 0.0) total = add(total, scale(orthogonality_penalty(*eta), cfg.beta));
  }
  return total;
}

}  // namespace

GradientSuiteReport run_gradient_suite(int seeds, const std::string& corrupt_target) {
  const auto start = std::chrono::steady_clock::now();

  struct Case {
    std::string name;
    CompVariant variant;
    SoftImpl impl;
    bool orth;
    bool deep;
  };
  std::vector<Case> cases{{"classification_only", CompVariant::none, SoftImpl::raw_margin, false, false}};
  const std::pair<CompVariant, SoftImpl> variants[] = {
      {CompVariant::hard, SoftImpl::raw_margin},
      {CompVariant::soft, SoftImpl::raw_margin},
      {CompVariant::soft, SoftImpl::one_vs_all_logistic},
  };
  for (const auto& [variant, impl] : variants) {
    std::string base = variant == CompVariant::hard ? "hard" : (impl == SoftImpl::raw_margin ? "soft_raw_margin"
                                                                                             : "soft_one_vs_all");
    for (bool orth : {false, true}) {
      for (bool deep : {false, true}) {
        std::string name = base;
        if (orth) name += "+orth";
        if (deep) name += "+deep";
        cases.push_back({name, variant, impl, orth, deep});
      }
    }
  }

  GradientSuiteReport report;
  report.all_pass = true;
  for (const Case& c : cases) {
    LossConfig cfg;
    cfg.variant = c.variant;
    cfg.soft_impl = c.impl;
    cfg.lambda = c.variant == CompVariant::none ? 0.0 : 1.5;
    cfg.beta = c.orth ? 0.25 : 0.0;
    cfg.sample_negatives = false;
    if (c.deep) cfg.deep_layers = {0, 1};

    double worst = 0.0;
    for (int s = 0; s < seeds; ++s) {
      TinyInstance inst = make_tiny_instance(static_cast<std::uint64_t>(s), cfg);
      auto params = instance_parameters(inst);
      std::function<void()> hook;
      if (!corrupt_target.empty() && corrupt_target == c.name) {
        Tensor first = params.front();
        hook = [first]() mutable { first.grad()[0] += 0.5; };
      }
      const double err =
          grad_check([&] { return tiny_objective(inst, cfg); }, params, kGradCheckEps, hook);
      worst = std::max(worst, err);
    }
    const bool pass = worst < kGradCheckTolerance;
    report.lines.push_back({c.name, worst, pass});
    report.all_pass = report.all_pass && pass;
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

// ---------------------------------------------------------------------------
// evaluation runner
// ---------------------------------------------------------------------------

EvalOptions eval_options_from(const ExperimentConfig& cfg, std::uint64_t seed) {
  EvalOptions opt;
  opt.n_shots = cfg.episodes.n_shots;
  opt.label_spaces = cfg.episodes.label_spaces;
  opt.heads = cfg.episodes.heads;
  opt.augment = cfg.episodes.augment;
  opt.prototypical = cfg.episodes.prototypical;
  opt.trials = cfg.episodes.trials;
  opt.query_per_class = cfg.episodes.query_per_class;
  opt.base_support_per_class = cfg.episodes.base_support_per_class;
  opt.head_iters_cosine = cfg.episodes.head_iters_cosine;
  opt.head_iters_linear = cfg.episodes.head_iters_linear;
  opt.head_lr = cfg.episodes.head_lr;
  opt.cosine_scale = cfg.model.cosine_scale;
  opt.seed = seed;
  opt.variant_tag = to_string(cfg.loss.variant);
  if (cfg.loss.variant != CompVariant::none && cfg.loss.beta > 0.0) opt.variant_tag += "+orth";
  return opt;
}

std::vector<MetricsRecord> run_eval(const SplitDataset& dataset, const EncoderParams& encoder,
                                    const EvalOptions& options) {
  return run_eval(extract_features(dataset, encoder), dataset, options);
}

std::vector<MetricsRecord> run_eval(const FrozenFeatures& features, const SplitDataset& dataset,
                                    const EvalOptions& options) {
  std::vector<MetricsRecord> records;
  for (LabelSpace space : options.label_spaces) {
    for (int n_shot : options.n_shots) {
      EpisodeSpec spec;
      spec.n_shot = n_shot;
      spec.query_per_class = options.query_per_class;
      spec.label_space = space;
      spec.seed = options.seed;
      spec.trials = options.trials;
      spec.base_support_per_class = options.base_support_per_class;

      std::vector<std::vector<EvalEntry>> per_head(options.heads.size());
      std::vector<EvalEntry> proto_entries;
      for (int trial = 0; trial < options.trials; ++trial) {
        Episode ep = sample_episode(dataset, features, spec, trial);
        for (std::size_t h = 0; h < options.heads.size(); ++h) {
          const HeadKind kind = options.heads[h];
          const int iters = kind == HeadKind::cosine ? options.head_iters_cosine : options.head_iters_linear;
          Rng head_rng(derive_seed(options.seed, "head-" + to_string(kind) + "-" + to_string(space) + "-" +
                                                     std::to_string(n_shot) + "-trial-" + std::to_string(trial)));
          ClassifierHead head = train_head(features, ep.support, kind, iters, options.head_lr, options.augment,
                                           head_rng, options.cosine_scale);
          per_head[h].push_back(evaluate(head, features, ep.query));
        }
        if (options.prototypical) proto_entries.push_back(prototypical_baseline(features, ep.support, ep.query));
      }

      for (std::size_t h = 0; h < options.heads.size(); ++h) {
        MetricsRecord rec = aggregate_trials(per_head[h]);
        rec.method = to_string(options.heads[h]);
        rec.variant = options.variant_tag;
        rec.n_shot = n_shot;
        rec.label_space = space;
        records.push_back(rec);
      }
      if (options.prototypical) {
        MetricsRecord rec = aggregate_trials(proto_entries);
        rec.method = "prototypical";
        rec.variant = options.variant_tag;
        rec.n_shot = n_shot;
        rec.label_space = space;
        records.push_back(rec);
      }
    }
  }
  return records;
}

// ---------------------------------------------------------------------------
// metrics files
// ---------------------------------------------------------------------------

std::string format_metrics_record(const MetricsRecord& rec, const std::string& config_hash) {
  char num[64];
  std::ostringstream out;
  out << "record method=" << rec.method << " variant=" << rec.variant << " n_shot=" << rec.n_shot
      << " label_space=" << to_string(rec.label_space);
  const std::pair<const char*, double> fields[] = {
      {"top1_mean", rec.top1_mean}, {"top1_std", rec.top1_std}, {"top5_mean", rec.top5_mean},
      {"top5_std", rec.top5_std}};
  for (const auto& [name, value] : fields) {
    std::snprintf(num, sizeof num, "%.10g", value);
    out << ' ' << name << '=' << num;
  }
  out << " seed_count=" << rec.seed_count << " config_hash=" << config_hash << " trials=" << rec.trials;
  if (rec.top5_degenerate) out << " top5_degenerate=1";
  return out.str();
}

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream file(tmp, std::ios::binary);
    if (!file) throw IoError("cannot open '" + tmp.string() + "' for writing");
    file << content;
    if (!file.flush()) throw IoError("failed writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

void write_metrics_file(const std::filesystem::path& path, const std::vector<MetricsRecord>& records,
                        const std::string& config_hash, const std::string& config_echo) {
  std::ostringstream out;
  out << "comprepr-metrics v1 config=" << config_hash << '\n';
  std::istringstream echo(config_echo);
  std::string line;
  while (std::getline(echo, line)) out << "# " << line << '\n';
  for (const MetricsRecord& rec : records) out << format_metrics_record(rec, config_hash) << '\n';
  write_file_atomic(path, out.str());
}

}  // namespace comprepr
