// Command-line front end: data generation, training, few-shot evaluation,
// compositionality measurement, attribute-count ablations, and the gradient
// self-check. All randomness flows from --seed (or COMPREPR_SEED).

#include <CLI11.hpp>

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <thread>

#include "comprepr/experiments.hpp"

namespace {

using namespace comprepr;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

std::uint64_t default_seed() {
  if (const char* env = std::getenv("COMPREPR_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("COMPREPR_SEED is not an integer: '") + env + "'");
    }
  }
  return 0;
}

struct CommonFlags {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

ExperimentConfig effective_config(const CommonFlags& flags) {
  ExperimentConfig cfg;
  if (!flags.config_path.empty()) cfg = ExperimentConfig::load(flags.config_path);
  return cfg;
}

std::uint64_t effective_seed(const CommonFlags& flags) { return flags.seed_given ? flags.seed : default_seed(); }

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "experiment config file (JSON)");
  cmd->add_option("--seed", flags.seed, "random seed (default: COMPREPR_SEED or 0)")
      ->each([&flags](const std::string&) { flags.seed_given = true; });
}

// ---- gen-data ----

struct GenDataArgs {
  CommonFlags common;
  std::string out;
  GeneratorSpec overrides;
  CLI::App* cmd = nullptr;
};

int run_gen_data(const GenDataArgs& args) {
  ExperimentConfig cfg = effective_config(args.common);
  GeneratorSpec spec = cfg.generator;
  auto take = [&](const char* flag, auto& target, const auto& value) {
    if (args.cmd->count(flag)) target = value;
  };
  take("--k", spec.k, args.overrides.k);
  take("--a-per-cat", spec.a_per_cat, args.overrides.a_per_cat);
  take("--n-base", spec.n_base, args.overrides.n_base);
  take("--n-novel", spec.n_novel, args.overrides.n_novel);
  take("--per-cat-base", spec.per_cat_base, args.overrides.per_cat_base);
  take("--per-cat-novel", spec.per_cat_novel, args.overrides.per_cat_novel);
  take("--d-in", spec.d_in, args.overrides.d_in);
  take("--r-nuisance", spec.r_nuisance, args.overrides.r_nuisance);
  take("--sigma-noise", spec.sigma_noise, args.overrides.sigma_noise);

  SplitDataset ds = generate_synthetic(spec, effective_seed(args.common));
  save_dataset(ds, args.out);
  std::cout << "wrote " << args.out << ": " << ds.examples.size() << " examples, " << ds.base_categories.size()
            << " base + " << ds.novel_categories.size() << " novel categories, k=" << ds.vocab.size()
            << ", d_in=" << ds.feature_dim() << "\n";
  return kExitOk;
}

// ---- train ----

struct TrainArgs {
  CommonFlags common;
  std::string dataset, checkpoint, record;
  std::string variant, soft_impl;
  double lambda = 0.0, beta = 0.0;
  std::vector<int> deep_layers;
  int epochs_pretrain = 0, epochs_finetune = 0, batch_size = 0;
  std::string head;
  CLI::App* cmd = nullptr;
};

int run_train(const TrainArgs& args) {
  ExperimentConfig cfg = effective_config(args.common);
  if (args.cmd->count("--variant")) cfg.loss.variant = variant_from_string(args.variant);
  if (args.cmd->count("--lambda")) cfg.loss.lambda = args.lambda;
  if (args.cmd->count("--orth-beta")) cfg.loss.beta = args.beta;
  if (args.cmd->count("--soft-impl")) cfg.loss.soft_impl = soft_impl_from_string(args.soft_impl);
  if (args.cmd->count("--deep-layers")) cfg.loss.deep_layers = args.deep_layers;
  if (args.cmd->count("--epochs-pretrain")) cfg.train.epochs_pretrain = args.epochs_pretrain;
  if (args.cmd->count("--epochs-finetune")) cfg.train.epochs_finetune = args.epochs_finetune;
  if (args.cmd->count("--batch-size")) cfg.train.batch_size = args.batch_size;
  if (args.cmd->count("--head")) cfg.train.head = head_from_string(args.head);

  RunConfig rc = cfg.run_config(args.dataset, effective_seed(args.common), args.checkpoint);
  TrainResult result = train_base(rc);
  result.record.config_hash = cfg.hash();

  std::string record_path = args.record.empty() ? args.checkpoint + ".record" : args.record;
  save_run_record(record_path, result.record);

  const auto& epochs = result.record.epochs;
  std::cout << "trained " << epochs.size() << " epochs";
  if (!epochs.empty()) {
    std::cout << "; final cls=" << epochs.back().loss_cls << " comp=" << epochs.back().loss_comp
              << " orth=" << epochs.back().loss_orth << " base_val_top1=" << epochs.back().base_val_top1;
  }
  std::cout << "\nwrote " << args.checkpoint << " and " << record_path << "\n";
  return kExitOk;
}

// ---- eval ----

struct EvalArgs {
  CommonFlags common;
  std::string dataset, checkpoint, out;
  std::vector<int> n_shots;
  std::vector<std::string> label_spaces, heads;
  bool augment = false;
  std::string baseline;
  int trials = 0;
  int query_per_class = 0;
  CLI::App* cmd = nullptr;
};

int run_eval_cmd(const EvalArgs& args) {
  ExperimentConfig cfg = effective_config(args.common);
  if (args.cmd->count("--n-shot")) cfg.episodes.n_shots = args.n_shots;
  if (args.cmd->count("--label-spaces")) {
    cfg.episodes.label_spaces.clear();
    for (const auto& s : args.label_spaces) cfg.episodes.label_spaces.push_back(label_space_from_string(s));
  }
  if (args.cmd->count("--heads")) {
    cfg.episodes.heads.clear();
    for (const auto& s : args.heads) cfg.episodes.heads.push_back(head_from_string(s));
  }
  if (args.cmd->count("--augment")) cfg.episodes.augment = true;
  if (args.cmd->count("--trials")) cfg.episodes.trials = args.trials;
  if (args.cmd->count("--query-per-class")) cfg.episodes.query_per_class = args.query_per_class;
  if (args.cmd->count("--baseline")) {
    if (args.baseline != "prototypical") throw ConfigError("unknown baseline '" + args.baseline + "'");
    cfg.episodes.prototypical = true;
  }

  SplitDataset ds = load_dataset(args.dataset);
  EncoderParams encoder;
  EtaSet etas;
  ClassifierHead head;
  unpack_model(load_checkpoint(args.checkpoint), encoder, etas, head);

  EvalOptions opt = eval_options_from(cfg, effective_seed(args.common));
  auto records = run_eval(ds, encoder, opt);
  write_metrics_file(args.out, records, cfg.hash(), cfg.serialize());
  std::cout << "wrote " << records.size() << " records to " << args.out << "\n";
  return kExitOk;
}

// ---- tre ----

struct TreArgs {
  CommonFlags common;
  std::string dataset, checkpoint;
  double split_fraction = 0.0;
  int iters = 0;
  double lr = 0.0;
  CLI::App* cmd = nullptr;
};

int run_tre(const TreArgs& args) {
  ExperimentConfig cfg = effective_config(args.common);
  if (args.cmd->count("--split-fraction")) cfg.tre.split_fraction = args.split_fraction;
  if (args.cmd->count("--iters")) cfg.tre.iters = args.iters;
  if (args.cmd->count("--lr")) cfg.tre.lr = args.lr;

  SplitDataset ds = load_dataset(args.dataset);
  EncoderParams encoder;
  EtaSet etas;
  ClassifierHead head;
  unpack_model(load_checkpoint(args.checkpoint), encoder, etas, head);

  FrozenFeatures features = extract_features(ds, encoder);
  CompositionalityResult result = measure_compositionality(features, ds.table, cfg.tre.split_fraction,
                                                           cfg.tre.iters, cfg.tre.lr, effective_seed(args.common));
  std::printf("fit_distance=%.10g heldout_distance=%.10g%s\n", result.fit_distance, result.heldout_distance,
              result.warning ? " warning=non_convergent" : "");
  return kExitOk;
}

// ---- ablate-attrs ----

struct AblateArgs {
  CommonFlags common;
  std::string dataset, out;
  std::vector<double> fractions{1.0, 0.75, 0.5, 0.25, 0.15, 0.05};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  int jobs = 1;
  CLI::App* cmd = nullptr;
};

int run_ablate(const AblateArgs& args) {
  ExperimentConfig cfg = effective_config(args.common);
  if (!args.cmd->count("--config")) {
    // Ablations default to the full soft+orthogonality model.
    cfg.loss.variant = CompVariant::soft;
    cfg.loss.beta = 0.1;
  }
  // Heavily subsampled vocabularies leave some categories labeled with every
  // surviving attribute, where sampled negatives do not exist; the sweep
  // supervises all attributes so every fraction optimizes the same objective.
  cfg.loss.sample_negatives = false;
  cfg.episodes.label_spaces = {LabelSpace::novel_only};
  cfg.episodes.n_shots = {1, 5};
  cfg.episodes.prototypical = false;

  const SplitDataset ds = load_dataset(args.dataset);

  struct Task {
    double fraction;
    std::uint64_t seed;
  };
  std::vector<Task> tasks;
  for (double f : args.fractions) {
    if (!(f > 0.0) || f > 1.0) throw ContractError("fraction must be in (0, 1], got " + std::to_string(f));
    for (std::uint64_t s : args.seeds) tasks.push_back({f, s});
  }
  std::vector<std::vector<MetricsRecord>> results(tasks.size());

  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr first_error;
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      try {
        const Task& task = tasks[i];
        SplitDataset run_ds = ds;
        auto sub = subsample_attributes(ds.table, ds.vocab, task.fraction, task.seed);
        run_ds.table = sub.table;
        run_ds.vocab = sub.vocab;

        RunConfig rc = cfg.run_config({}, task.seed, {});
        TrainResult trained = train_base(rc, run_ds);

        EvalOptions opt = eval_options_from(cfg, task.seed);
        results[i] = run_eval(run_ds, trained.encoder, opt);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  {
    const int n_threads = std::max(1, args.jobs);
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  // One aggregated record per (fraction, n_shot), seeds pooled.
  std::vector<MetricsRecord> records;
  for (double f : args.fractions) {
    for (int n_shot : cfg.episodes.n_shots) {
      std::vector<double> top1s, top5s;
      MetricsRecord agg;
      for (std::size_t i = 0; i < tasks.size(); ++i) {
        if (tasks[i].fraction != f) continue;
        for (const MetricsRecord& r : results[i]) {
          if (r.n_shot != n_shot) continue;
          top1s.push_back(r.top1_mean);
          top5s.push_back(r.top5_mean);
          agg.method = r.method;
          agg.variant = r.variant;
          agg.top5_degenerate = agg.top5_degenerate || r.top5_degenerate;
          agg.trials = r.trials;
        }
      }
      if (top1s.empty()) continue;
      const auto n = static_cast<double>(top1s.size());
      for (double v : top1s) agg.top1_mean += v / n;
      for (double v : top5s) agg.top5_mean += v / n;
      if (top1s.size() > 1) {
        double v1 = 0.0, v5 = 0.0;
        for (double v : top1s) v1 += (v - agg.top1_mean) * (v - agg.top1_mean);
        for (double v : top5s) v5 += (v - agg.top5_mean) * (v - agg.top5_mean);
        agg.top1_std = std::sqrt(v1 / (n - 1.0));
        agg.top5_std = std::sqrt(v5 / (n - 1.0));
      }
      agg.variant += "@" + std::to_string(f);
      agg.n_shot = n_shot;
      agg.label_space = LabelSpace::novel_only;
      agg.seed_count = static_cast<int>(args.seeds.size());
      records.push_back(agg);
    }
  }
  write_metrics_file(args.out, records, cfg.hash(), cfg.serialize());
  std::cout << "wrote " << records.size() << " records to " << args.out << "\n";
  return kExitOk;
}

// ---- gradcheck ----

int run_gradcheck(int seeds, const std::string& corrupt) {
  GradientSuiteReport report = run_gradient_suite(seeds, corrupt);
  for (const GradientCheckLine& line : report.lines) {
    std::printf("%-28s max_error=%.3e %s\n", line.objective.c_str(), line.max_error,
                line.pass ? "PASS" : "FAIL");
  }
  std::printf("gradient suite: %s (%d objectives, %d seeds, %.1fs)\n", report.all_pass ? "PASS" : "FAIL",
              static_cast<int>(report.lines.size()), seeds, report.seconds);
  return report.all_pass ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale lab for compositionality-regularized representation learning"};
  app.require_subcommand(1);

  GenDataArgs gen;
  gen.cmd = app.add_subcommand("gen-data", "generate a synthetic dataset with known compositional structure");
  add_common(gen.cmd, gen.common);
  gen.cmd->add_option("--out", gen.out, "output dataset file")->required();
  gen.cmd->add_option("--k", gen.overrides.k, "attribute vocabulary size");
  gen.cmd->add_option("--a-per-cat", gen.overrides.a_per_cat, "attributes per category");
  gen.cmd->add_option("--n-base", gen.overrides.n_base, "base category count");
  gen.cmd->add_option("--n-novel", gen.overrides.n_novel, "novel category count");
  gen.cmd->add_option("--per-cat-base", gen.overrides.per_cat_base, "examples per base category");
  gen.cmd->add_option("--per-cat-novel", gen.overrides.per_cat_novel, "examples per novel category");
  gen.cmd->add_option("--d-in", gen.overrides.d_in, "feature dimension");
  gen.cmd->add_option("--r-nuisance", gen.overrides.r_nuisance, "nuisance subspace rank");
  gen.cmd->add_option("--sigma-noise", gen.overrides.sigma_noise, "isotropic noise level");

  TrainArgs train;
  train.cmd = app.add_subcommand("train", "train a base-category representation");
  add_common(train.cmd, train.common);
  train.cmd->add_option("--dataset", train.dataset, "dataset file")->required();
  train.cmd->add_option("--checkpoint", train.checkpoint, "output checkpoint file")->required();
  train.cmd->add_option("--record", train.record, "output run record (default: <checkpoint>.record)");
  train.cmd->add_option("--variant", train.variant, "none|hard|soft");
  train.cmd->add_option("--lambda", train.lambda, "compositionality weight");
  train.cmd->add_option("--orth-beta", train.beta, "orthogonality weight");
  train.cmd->add_option("--soft-impl", train.soft_impl, "raw_margin|one_vs_all_logistic");
  train.cmd->add_option("--deep-layers", train.deep_layers, "hidden layers to regularize")->delimiter(',');
  train.cmd->add_option("--epochs-pretrain", train.epochs_pretrain, "classification-only epochs");
  train.cmd->add_option("--epochs-finetune", train.epochs_finetune, "regularized epochs");
  train.cmd->add_option("--batch-size", train.batch_size, "minibatch size");
  train.cmd->add_option("--head", train.head, "base-training head: linear|cosine");

  EvalArgs eval;
  eval.cmd = app.add_subcommand("eval", "few-shot evaluation of a trained checkpoint");
  add_common(eval.cmd, eval.common);
  eval.cmd->add_option("--dataset", eval.dataset, "dataset file")->required();
  eval.cmd->add_option("--checkpoint", eval.checkpoint, "trained checkpoint")->required();
  eval.cmd->add_option("--out", eval.out, "output metrics file")->required();
  eval.cmd->add_option("--n-shot", eval.n_shots, "shot counts, e.g. 1,2,5")->delimiter(',');
  eval.cmd->add_option("--label-spaces", eval.label_spaces, "novel and/or joint")->delimiter(',');
  eval.cmd->add_option("--heads", eval.heads, "classifier heads: cosine and/or linear")->delimiter(',');
  eval.cmd->add_flag("--augment", eval.augment, "feature-space augmentation during head training");
  eval.cmd->add_option("--baseline", eval.baseline, "extra baseline rows: prototypical");
  eval.cmd->add_option("--trials", eval.trials, "episodes per configuration");
  eval.cmd->add_option("--query-per-class", eval.query_per_class, "query examples per class per episode");

  TreArgs tre;
  tre.cmd = app.add_subcommand("tre", "measure representation compositionality by held-out reconstruction");
  add_common(tre.cmd, tre.common);
  tre.cmd->add_option("--dataset", tre.dataset, "dataset file")->required();
  tre.cmd->add_option("--checkpoint", tre.checkpoint, "trained checkpoint")->required();
  tre.cmd->add_option("--split-fraction", tre.split_fraction, "fraction of base examples used for fitting");
  tre.cmd->add_option("--iters", tre.iters, "descent iterations");
  tre.cmd->add_option("--lr", tre.lr, "descent learning rate");

  AblateArgs ablate;
  ablate.cmd = app.add_subcommand("ablate-attrs", "attribute-count sweep: subsample, train, evaluate");
  add_common(ablate.cmd, ablate.common);
  ablate.cmd->add_option("--dataset", ablate.dataset, "dataset file")->required();
  ablate.cmd->add_option("--out", ablate.out, "output metrics file")->required();
  ablate.cmd->add_option("--fractions", ablate.fractions, "attribute fractions to keep")->delimiter(',');
  ablate.cmd->add_option("--seeds", ablate.seeds, "training seeds to aggregate")->delimiter(',');
  ablate.cmd->add_option("--jobs", ablate.jobs, "parallel (seed, fraction) runs");

  int gradcheck_seeds = 20;
  std::string gradcheck_corrupt;
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "verify analytic gradients against finite differences");
  gradcheck->add_option("--seeds", gradcheck_seeds, "random instances per objective");
  gradcheck->add_option("--corrupt", gradcheck_corrupt, "fault-injection hook: corrupt the named objective")
      ->group("");  // hidden; exists for the test suite

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (gen.cmd->parsed()) return run_gen_data(gen);
    if (train.cmd->parsed()) return run_train(train);
    if (eval.cmd->parsed()) return run_eval_cmd(eval);
    if (tre.cmd->parsed()) return run_tre(tre);
    if (ablate.cmd->parsed()) return run_ablate(ablate);
    if (gradcheck->parsed()) return run_gradcheck(gradcheck_seeds, gradcheck_corrupt);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kExitIo;
  } catch (const VersionError& e) {
    std::cerr << "version error: " << e.what() << "\n";
    return kExitIo;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}
