#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "comprepr/config.hpp"
#include "comprepr/experiments.hpp"

using namespace comprepr;

TEST_CASE("defaults materialize and serialization is a parse fixed point") {
  ExperimentConfig defaults;
  const std::string text = defaults.serialize();
  ExperimentConfig parsed = ExperimentConfig::parse(text);
  CHECK(parsed.serialize() == text);
  CHECK(parsed.hash() == defaults.hash());

  // An empty document is the all-defaults config.
  ExperimentConfig empty = ExperimentConfig::parse("{}");
  CHECK(empty.serialize() == text);
}

TEST_CASE("partial configs override only their keys") {
  ExperimentConfig cfg = ExperimentConfig::parse(R"({
    "loss": {"variant": "soft", "beta": 0.1},
    "train": {"epochs_pretrain": 3},
    "generator": {"sigma_noise": 0.0}
  })");
  CHECK(cfg.loss.variant == CompVariant::soft);
  CHECK(cfg.loss.beta == 0.1);
  CHECK(cfg.loss.lambda == 1.0);  // untouched default
  CHECK(cfg.train.epochs_pretrain == 3);
  CHECK(cfg.train.epochs_finetune == 60);
  CHECK(cfg.generator.sigma_noise == 0.0);
  CHECK(cfg.generator.k == 30);

  // Round-trips with the overrides baked in.
  ExperimentConfig again = ExperimentConfig::parse(cfg.serialize());
  CHECK(again.serialize() == cfg.serialize());
}

TEST_CASE("unknown sections and keys are rejected") {
  CHECK_THROWS_AS(ExperimentConfig::parse(R"({"optimizer": {}})"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse(R"({"loss": {"lamda": 2.0}})"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse(R"({"train": {"epochs_pretrain": "ten"}})"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("not json"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("[1,2]"), ConfigError);
}

TEST_CASE("enum fields parse and reject bad names") {
  ExperimentConfig cfg = ExperimentConfig::parse(R"({
    "loss": {"variant": "hard", "soft_impl": "raw_margin"},
    "train": {"head": "linear"},
    "episodes": {"label_spaces": ["joint"], "heads": ["linear", "cosine"]}
  })");
  CHECK(cfg.loss.variant == CompVariant::hard);
  CHECK(cfg.loss.soft_impl == SoftImpl::raw_margin);
  CHECK(cfg.train.head == HeadKind::linear);
  REQUIRE(cfg.episodes.label_spaces.size() == 1);
  CHECK(cfg.episodes.label_spaces[0] == LabelSpace::joint);
  CHECK(cfg.episodes.heads.size() == 2);

  CHECK_THROWS_AS(ExperimentConfig::parse(R"({"loss": {"variant": "squishy"}})"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse(R"({"train": {"head": "mlp"}})"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse(R"({"episodes": {"label_spaces": ["both"]}})"), ConfigError);
}

TEST_CASE("run_config carries the training sections through") {
  ExperimentConfig cfg = ExperimentConfig::parse(R"({
    "loss": {"variant": "soft", "lambda": 2.5, "deep_layers": [0]},
    "train": {"batch_size": 64, "weight_decay": 0.0, "lr_milestones": [[5, 0.5]], "eta_warm_start": true},
    "model": {"hidden_dim": 32, "embedding_dim": 16}
  })");
  RunConfig rc = cfg.run_config("data.ds", 42, "model.ckpt");
  CHECK(rc.loss.variant == CompVariant::soft);
  CHECK(rc.loss.lambda == 2.5);
  CHECK(rc.loss.deep_layers == std::vector<int>{0});
  CHECK(rc.batch_size == 64);
  CHECK(rc.weight_decay == 0.0);
  CHECK(rc.seed == 42);
  CHECK(rc.hidden_dim == 32);
  CHECK(rc.embedding_dim == 16);
  CHECK(rc.eta_warm_start);
  CHECK(rc.schedule().milestones == std::vector<std::pair<int, double>>{{5, 0.5}});
  CHECK(rc.dataset_path == "data.ds");
  CHECK(rc.checkpoint_path == "model.ckpt");
}

TEST_CASE("config hash tracks content") {
  ExperimentConfig a;
  ExperimentConfig b;
  b.loss.lambda = 2.0;
  CHECK(a.hash() != b.hash());
  CHECK(a.hash().size() == 16);
}

TEST_CASE("metrics records format every spec field in order") {
  MetricsRecord rec;
  rec.method = "cosine";
  rec.variant = "soft+orth";
  rec.n_shot = 1;
  rec.label_space = LabelSpace::novel_only;
  rec.top1_mean = 0.4361;
  rec.top1_std = 0.021;
  rec.top5_mean = 0.825;
  rec.top5_std = 0.011;
  rec.trials = 20;
  rec.seed_count = 5;
  const std::string line = format_metrics_record(rec, "00ff00ff00ff00ff");
  CHECK(line.rfind("record method=cosine variant=soft+orth n_shot=1 label_space=novel "
                   "top1_mean=0.4361 top1_std=0.021 top5_mean=0.825 top5_std=0.011 "
                   "seed_count=5 config_hash=00ff00ff00ff00ff",
                   0) == 0);
}

TEST_CASE("gradient suite covers every objective and catches injected faults") {
  GradientSuiteReport report = run_gradient_suite(2);
  CHECK(report.all_pass);
  // one classification-only line plus {hard, soft raw, soft ova} x {orth} x {deep}
  CHECK(report.lines.size() == 13);
  for (const auto& line : report.lines) {
    CHECK_MESSAGE(line.max_error < kGradCheckTolerance, line.objective, " err ", line.max_error);
  }

  GradientSuiteReport corrupted = run_gradient_suite(1, "soft_one_vs_all+orth");
  CHECK(!corrupted.all_pass);
  int failures = 0;
  for (const auto& line : corrupted.lines) {
    if (!line.pass) {
      ++failures;
      CHECK(line.objective == "soft_one_vs_all+orth");
    }
  }
  CHECK(failures == 1);
}
