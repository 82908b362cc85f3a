// End-to-end checks of the command-line tool; the binary path arrives as argv[1].
#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace {

std::string g_binary;
std::filesystem::path g_dir;

struct RunResult {
  int exit_code = -1;
  std::string output;
};

RunResult run(const std::string& args, const std::string& env = "") {
  const auto out_path = g_dir / "cli_output.txt";
  std::string cmd = env + g_binary + " " + args + " > " + out_path.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult result;
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream f(out_path);
  std::ostringstream ss;
  ss << f.rdbuf();
  result.output = ss.str();
  return result;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

int count_lines_with(const std::string& text, const std::string& needle) {
  int n = 0;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.find(needle) != std::string::npos) ++n;
  }
  return n;
}

const char* kTinyGen = " --n-base 8 --n-novel 5 --per-cat-base 12 --per-cat-novel 8 --k 12 --a-per-cat 3 "
                       "--d-in 16 --r-nuisance 2 ";

}  // namespace

TEST_CASE("gen-data writes the default splits") {
  auto r = run("gen-data --out " + (g_dir / "default.ds").string() + " --seed 1");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("40 base + 20 novel") != std::string::npos);
}

TEST_CASE("gen-data is deterministic per seed") {
  const auto a = g_dir / "det_a.ds";
  const auto b = g_dir / "det_b.ds";
  CHECK(run("gen-data --out " + a.string() + " --seed 7" + kTinyGen).exit_code == 0);
  CHECK(run("gen-data --out " + b.string() + " --seed 7" + kTinyGen).exit_code == 0);
  CHECK(slurp(a) == slurp(b));
  CHECK(run("gen-data --out " + b.string() + " --seed 8" + kTinyGen).exit_code == 0);
  CHECK(slurp(a) != slurp(b));
}

TEST_CASE("gen-data rejects infeasible specs with exit code 2") {
  auto r = run("gen-data --out " + (g_dir / "bad.ds").string() + " --k 5 --a-per-cat 6");
  CHECK(r.exit_code == 2);
}

TEST_CASE("COMPREPR_SEED provides the default seed and --seed overrides it") {
  const auto a = g_dir / "env_a.ds";
  const auto b = g_dir / "env_b.ds";
  const auto c = g_dir / "env_c.ds";
  CHECK(run("gen-data --out " + a.string() + kTinyGen, "COMPREPR_SEED=9 ").exit_code == 0);
  CHECK(run("gen-data --out " + b.string() + " --seed 9" + kTinyGen).exit_code == 0);
  CHECK(slurp(a) == slurp(b));
  CHECK(run("gen-data --out " + c.string() + " --seed 10" + kTinyGen, "COMPREPR_SEED=9 ").exit_code == 0);
  CHECK(slurp(a) != slurp(c));
}

TEST_CASE("train pipeline: records, variants and exit codes") {
  const auto ds = g_dir / "train.ds";
  REQUIRE(run("gen-data --out " + ds.string() + " --seed 2" + kTinyGen).exit_code == 0);

  const auto ckpt_none = g_dir / "none.ckpt";
  auto r = run("train --dataset " + ds.string() + " --checkpoint " + ckpt_none.string() +
               " --variant none --epochs-pretrain 2 --epochs-finetune 2 --seed 3");
  CHECK(r.exit_code == 0);
  const std::string record_none = slurp(g_dir / "none.ckpt.record");
  CHECK(count_lines_with(record_none, "loss_comp=0 ") == 4);

  const auto ckpt_soft = g_dir / "soft.ckpt";
  r = run("train --dataset " + ds.string() + " --checkpoint " + ckpt_soft.string() +
          " --variant soft --orth-beta 0.1 --epochs-pretrain 1 --epochs-finetune 2 --seed 3");
  CHECK(r.exit_code == 0);
  const std::string record_soft = slurp(g_dir / "soft.ckpt.record");
  CHECK(count_lines_with(record_soft, "loss_orth=0 ") == 1);   // pretraining epoch only
  CHECK(count_lines_with(record_soft, "epoch=") == 3);

  // no-op run still writes an init checkpoint
  const auto ckpt_init = g_dir / "init.ckpt";
  r = run("train --dataset " + ds.string() + " --checkpoint " + ckpt_init.string() +
          " --epochs-pretrain 0 --epochs-finetune 0 --seed 3");
  CHECK(r.exit_code == 0);
  CHECK(std::filesystem::exists(ckpt_init));

  // missing dataset is an I/O failure
  r = run("train --dataset " + (g_dir / "missing.ds").string() + " --checkpoint " + ckpt_init.string());
  CHECK(r.exit_code == 4);
}

TEST_CASE("eval emits one record per (method, shot, label space) and respects baselines") {
  const auto ds = g_dir / "eval.ds";
  const auto ckpt = g_dir / "eval.ckpt";
  REQUIRE(run("gen-data --out " + ds.string() + " --seed 4" + kTinyGen).exit_code == 0);
  REQUIRE(run("train --dataset " + ds.string() + " --checkpoint " + ckpt.string() +
              " --variant soft --orth-beta 0.1 --epochs-pretrain 1 --epochs-finetune 1 --seed 5")
              .exit_code == 0);

  const auto metrics = g_dir / "eval.metrics";
  auto r = run("eval --dataset " + ds.string() + " --checkpoint " + ckpt.string() + " --out " +
               metrics.string() + " --n-shot 1,2,5 --trials 3 --query-per-class 2 --seed 6");
  CHECK(r.exit_code == 0);
  std::string content = slurp(metrics);
  CHECK(count_lines_with(content, "record method=cosine") == 6);  // 2 label spaces x 3 shots

  r = run("eval --dataset " + ds.string() + " --checkpoint " + ckpt.string() + " --out " + metrics.string() +
          " --n-shot 1 --trials 3 --query-per-class 2 --baseline prototypical --label-spaces novel --seed 6");
  CHECK(r.exit_code == 0);
  content = slurp(metrics);
  CHECK(count_lines_with(content, "record method=cosine") == 1);
  CHECK(count_lines_with(content, "record method=prototypical") == 1);

  r = run("eval --dataset " + ds.string() + " --checkpoint " + (g_dir / "missing.ckpt").string() + " --out " +
          metrics.string());
  CHECK(r.exit_code == 4);

  r = run("eval --dataset " + ds.string() + " --checkpoint " + ckpt.string() + " --out " + metrics.string() +
          " --baseline nearest");
  CHECK(r.exit_code == 2);
}

TEST_CASE("metrics files reproduce bitwise for identical seeds and satisfy top1 <= top5") {
  const auto ds = g_dir / "repro.ds";
  const auto ckpt = g_dir / "repro.ckpt";
  REQUIRE(run("gen-data --out " + ds.string() + " --seed 8" + kTinyGen).exit_code == 0);
  REQUIRE(run("train --dataset " + ds.string() + " --checkpoint " + ckpt.string() +
              " --variant none --epochs-pretrain 1 --epochs-finetune 1 --seed 8")
              .exit_code == 0);
  const auto m1 = g_dir / "repro1.metrics";
  const auto m2 = g_dir / "repro2.metrics";
  const std::string eval_args = "eval --dataset " + ds.string() + " --checkpoint " + ckpt.string() +
                                " --n-shot 1,5 --trials 4 --query-per-class 2 --seed 9 --out ";
  REQUIRE(run(eval_args + m1.string()).exit_code == 0);
  REQUIRE(run(eval_args + m2.string()).exit_code == 0);
  CHECK(slurp(m1) == slurp(m2));

  std::istringstream ss(slurp(m1));
  std::string line;
  int records = 0;
  while (std::getline(ss, line)) {
    const auto t1 = line.find("top1_mean=");
    if (t1 == std::string::npos) continue;
    ++records;
    const double top1 = std::stod(line.substr(t1 + 10));
    const auto t5 = line.find("top5_mean=");
    const double top5 = std::stod(line.substr(t5 + 10));
    CHECK(top1 <= top5 + 1e-12);
  }
  CHECK(records == 4);
}

TEST_CASE("tre reports identical values on repeated invocations") {
  const auto ds = g_dir / "tre.ds";
  const auto ckpt = g_dir / "tre.ckpt";
  REQUIRE(run("gen-data --out " + ds.string() + " --seed 10" + kTinyGen).exit_code == 0);
  REQUIRE(run("train --dataset " + ds.string() + " --checkpoint " + ckpt.string() +
              " --variant none --epochs-pretrain 1 --epochs-finetune 0 --seed 10")
              .exit_code == 0);
  const std::string args = "tre --dataset " + ds.string() + " --checkpoint " + ckpt.string() +
                           " --iters 50 --seed 11";
  auto a = run(args);
  auto b = run(args);
  CHECK(a.exit_code == 0);
  CHECK(a.output == b.output);
  CHECK(a.output.find("fit_distance=") != std::string::npos);
  CHECK(a.output.find("heldout_distance=") != std::string::npos);
}

TEST_CASE("tre separates hard-trained, baseline and random-init checkpoints") {
  const auto ds = g_dir / "tre_cmp.ds";
  REQUIRE(run("gen-data --out " + ds.string() + " --seed 20 --n-base 10 --n-novel 4 --per-cat-base 20 "
              "--per-cat-novel 6 --k 12 --a-per-cat 3 --d-in 16 --r-nuisance 8 --sigma-noise 0.3")
              .exit_code == 0);
  auto heldout = [&](const std::string& ckpt) {
    auto r = run("tre --dataset " + ds.string() + " --checkpoint " + ckpt + " --iters 300 --seed 21");
    REQUIRE(r.exit_code == 0);
    const auto pos = r.output.find("heldout_distance=");
    REQUIRE(pos != std::string::npos);
    return std::stod(r.output.substr(pos + 17));
  };

  const std::string train_tail = " --epochs-pretrain 3 --epochs-finetune 6 --seed 22";
  const auto hard = (g_dir / "tre_hard.ckpt").string();
  const auto none = (g_dir / "tre_none.ckpt").string();
  const auto init = (g_dir / "tre_init.ckpt").string();
  REQUIRE(run("train --dataset " + ds.string() + " --checkpoint " + hard + " --variant hard --lambda 1" +
              train_tail).exit_code == 0);
  REQUIRE(run("train --dataset " + ds.string() + " --checkpoint " + none + " --variant none" + train_tail)
              .exit_code == 0);
  REQUIRE(run("train --dataset " + ds.string() + " --checkpoint " + init +
              " --epochs-pretrain 0 --epochs-finetune 0 --seed 22").exit_code == 0);

  const double d_hard = heldout(hard);
  const double d_none = heldout(none);
  const double d_init = heldout(init);
  CHECK(d_hard < d_none);  // hard training improves the decomposition fit
  CHECK(d_init > d_hard);  // and beats an untrained encoder clearly
}

TEST_CASE("ablate-attrs aggregates one row per fraction and shot") {
  const auto ds = g_dir / "ablate.ds";
  REQUIRE(run("gen-data --out " + ds.string() + " --seed 12" + kTinyGen).exit_code == 0);
  const auto config = g_dir / "ablate.json";
  {
    std::ofstream f(config);
    f << R"({"train": {"epochs_pretrain": 1, "epochs_finetune": 1},
            "loss": {"variant": "soft", "beta": 0.1},
            "episodes": {"trials": 2, "query_per_class": 2}})";
  }
  const auto metrics = g_dir / "ablate.metrics";
  auto r = run("ablate-attrs --dataset " + ds.string() + " --out " + metrics.string() +
               " --fractions 1.0,0.5 --seeds 0,1 --jobs 2 --config " + config.string());
  CHECK(r.exit_code == 0);
  const std::string content = slurp(metrics);
  CHECK(count_lines_with(content, "record ") == 4);  // 2 fractions x {1,5}-shot
  CHECK(count_lines_with(content, "seed_count=2") == 4);
  CHECK(count_lines_with(content, "fraction=") == 0);  // fraction rides in the variant tag
  CHECK(count_lines_with(content, "variant=soft+orth@1.0") == 2);

  r = run("ablate-attrs --dataset " + ds.string() + " --out " + metrics.string() + " --fractions 0");
  CHECK(r.exit_code == 2);
}

TEST_CASE("gradcheck passes clean and fails with a named corrupted objective") {
  auto r = run("gradcheck --seeds 2");
  CHECK(r.exit_code == 0);
  CHECK(count_lines_with(r.output, "PASS") >= 13);

  r = run("gradcheck --seeds 1 --corrupt hard");
  CHECK(r.exit_code == 3);
  std::istringstream ss(r.output);
  std::string line;
  bool hard_failed = false;
  while (std::getline(ss, line)) {
    if (line.find("FAIL") != std::string::npos && line.rfind("hard ", 0) == 0) hard_failed = true;
  }
  CHECK(hard_failed);
}

TEST_CASE("config file values apply and flags override them") {
  const auto config = g_dir / "gen.json";
  {
    std::ofstream f(config);
    f << R"({"generator": {"n_base": 6, "n_novel": 3, "per_cat_base": 10, "per_cat_novel": 6,
             "k": 10, "a_per_cat": 2, "d_in": 12, "r_nuisance": 1}})";
  }
  auto r = run("gen-data --out " + (g_dir / "cfg.ds").string() + " --config " + config.string() + " --seed 1");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("6 base + 3 novel") != std::string::npos);

  r = run("gen-data --out " + (g_dir / "cfg.ds").string() + " --config " + config.string() +
          " --n-base 7 --seed 1");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("7 base + 3 novel") != std::string::npos);

  r = run("gen-data --out " + (g_dir / "cfg.ds").string() + " --config " + (g_dir / "nope.json").string());
  CHECK(r.exit_code == 4);  // missing config file is an I/O failure
}

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: test_cli <path-to-comprepr-binary>\n");
    return 1;
  }
  g_binary = argv[1];
  g_dir = std::filesystem::temp_directory_path() / "comprepr_cli_tests";
  std::filesystem::create_directories(g_dir);
  doctest::Context context;
  context.applyCommandLine(1, argv);
  return context.run();
}
