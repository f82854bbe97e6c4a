#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <unistd.h>

#include "mambamir/config.hpp"
#include "mambamir/dataset.hpp"
#include "mambamir/io.hpp"
#include "mambamir/ops.hpp"
#include "mambamir/pipeline.hpp"
#include "test_util.hpp"

namespace mambamir {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("mambamir_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

ExperimentConfig tiny_config(acq::Task task = acq::Task::mri) {
  ExperimentConfig c = ExperimentConfig::toy(task);
  c.data = {16, 4, 2, 2};
  c.train.crop = 16;
  c.train.batch = 1;
  c.train.steps = 4;
  c.train.val_every = 2;
  c.train.log_every = 1;
  c.model.embed_dim = 8;
  c.model.state_dim = 4;
  c.model.heads = 2;
  c.seed = 5;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

TEST(Config, RoundTripEveryPreset) {
  for (auto task : {acq::Task::mri, acq::Task::ct, acq::Task::pet}) {
    for (auto c : {ExperimentConfig::toy(task), ExperimentConfig::paper(task)}) {
      auto back = ExperimentConfig::parse(c.serialize());
      EXPECT_TRUE(back == c);
      EXPECT_EQ(back.serialize(), c.serialize());
    }
  }
  auto odd = tiny_config();
  odd.train.lr = 0.1 + 0.2;
  odd.loss.epsilon = 3e-17;
  EXPECT_TRUE(ExperimentConfig::parse(odd.serialize()) == odd);
}

TEST(Config, PublishedPresetValues) {
  auto p = ExperimentConfig::paper(acq::Task::mri);
  EXPECT_EQ(p.train.steps, 100000);
  EXPECT_EQ(p.train.batch, 8u);
  EXPECT_EQ(p.train.lr, 2e-4);
  EXPECT_EQ(p.train.decay_start, 50000);
  EXPECT_EQ(p.train.decay_every, 20000);
  EXPECT_EQ(p.train.decay_factor, 0.5);
  EXPECT_EQ(p.train.crop, 192u);
  EXPECT_EQ(p.model.embed_dim, 180u);
  EXPECT_EQ(p.model.multipliers, (std::vector<std::size_t>{1, 2, 2, 2}));
  EXPECT_EQ(p.model.state_dim, 128u);
  EXPECT_EQ(learning_rate(p.train, 70001), 1e-4);
}

TEST(Config, ParseErrors) {
  EXPECT_THROW(ExperimentConfig::parse("nonsense = 1\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse("train.steps = ten\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse("task = xray\n"), ConfigError);
  auto c = ExperimentConfig::parse("# comment\ntask = ct\ntrain.steps = 7\n");
  EXPECT_EQ(c.task, acq::Task::ct);
  EXPECT_EQ(c.model.in_channels, 1u);
  EXPECT_EQ(c.train.steps, 7);
}

TEST(Container, RoundTripAndTruncation) {
  TempDir dir;
  io::Container c;
  c.text = "hello";
  c.seed = 42;
  c.step = -3;
  Rng rng(1);
  c.tensors = {{"a", testing::random_tensor({2, 3}, rng)}, {"b", Tensor::scalar(1.5)}};
  io::write_container(dir.path() / "c.bin", c);
  auto back = io::read_container(dir.path() / "c.bin");
  EXPECT_EQ(back.text, "hello");
  EXPECT_EQ(back.seed, 42u);
  EXPECT_EQ(back.step, -3);
  EXPECT_EQ(testing::max_abs_diff(back.get("a"), c.get("a")), 0.0);
  EXPECT_THROW(back.get("zzz"), DataError);
  const auto bytes = slurp(dir.path() / "c.bin");
  std::ofstream(dir.path() / "t.bin", std::ios::binary).write(bytes.data(), bytes.size() - 5);
  EXPECT_THROW(io::read_container(dir.path() / "t.bin"), DataError);
}

TEST(Generate, CountsManifestAndDeterminism) {
  TempDir dir;
  auto c = ExperimentConfig::toy(acq::Task::mri);
  c.data = {16, 64, 8, 16};
  c.train.crop = 16;
  EXPECT_EQ(data::generate(c, dir.path() / "a", false), 88u);
  std::size_t files = 0;
  for (auto& e : fs::recursive_directory_iterator(dir.path() / "a")) files += e.is_regular_file();
  EXPECT_EQ(files, 89u);
  EXPECT_THROW(data::generate(c, dir.path() / "a", false), DataError);
  data::generate(c, dir.path() / "b", false);
  for (auto& e : fs::recursive_directory_iterator(dir.path() / "a")) {
    if (!e.is_regular_file()) continue;
    auto rel = fs::relative(e.path(), dir.path() / "a");
    EXPECT_EQ(slurp(e.path()), slurp(dir.path() / "b" / rel)) << rel;
  }
  auto ct = ExperimentConfig::toy(acq::Task::ct);
  ct.data = {16, 1, 1, 1};
  ct.train.crop = 16;
  data::generate(ct, dir.path() / "ct", false);
  auto m = data::read_manifest(dir.path() / "ct");
  EXPECT_EQ(m.task, acq::Task::ct);
  EXPECT_EQ(m.params.n_views, 60u);
  EXPECT_NE(slurp(dir.path() / "ct" / "manifest.txt").find("n_views = 60"), std::string::npos);
}

TEST(Train, ResumeReproducesUninterruptedRun) {
  TempDir dir;
  auto c = tiny_config();
  data::generate(c, dir.path() / "data", false);
  auto full = pipeline::cmd_train(c, dir.path() / "data", dir.path() / "full", false);

  auto half = c;
  half.train.steps = 2;
  pipeline::cmd_train(half, dir.path() / "data", dir.path() / "split", false);
  auto rest = pipeline::cmd_train(c, dir.path() / "data", dir.path() / "split", false,
                                  dir.path() / "split" / "last.ckpt");
  ASSERT_EQ(full.losses.size(), 4u);
  ASSERT_EQ(rest.losses.size(), 2u);
  EXPECT_EQ(rest.losses[0], full.losses[2]);
  EXPECT_EQ(rest.losses[1], full.losses[3]);
  auto a = pipeline::load_checkpoint(dir.path() / "full" / "last.ckpt");
  auto b = pipeline::load_checkpoint(dir.path() / "split" / "last.ckpt");
  auto pa = a.model.parameters(), pb = b.model.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(testing::max_abs_diff(pa[i].second, pb[i].second), 0.0);
  EXPECT_EQ(slurp(dir.path() / "full" / "train_log.csv"), slurp(dir.path() / "split" / "train_log.csv"));
  EXPECT_THROW(pipeline::cmd_train(c, dir.path() / "data", dir.path() / "full", false), DataError);
}

TEST(Train, RefusesMismatchedTask) {
  TempDir dir;
  auto c = tiny_config();
  auto ct = tiny_config(acq::Task::ct);
  data::generate(ct, dir.path() / "ct", false);
  EXPECT_THROW(pipeline::cmd_train(c, dir.path() / "ct", dir.path() / "run", false), DataError);
}

TEST(Train, NonFiniteLossAborts) {
  TempDir dir;
  auto c = tiny_config();
  data::generate(c, dir.path() / "data", false);
  auto train = data::load_split(dir.path() / "data", "train");
  auto model = pipeline::build_model(c);
  auto params = model.parameters();
  AdamState st = make_adam_state(params);
  pipeline::ForwardFn bad = [](const Tensor& x, scan::Mode, Rng*) { return ops::scale(x, std::nan("")); };
  try {
    pipeline::train_steps(bad, params, st, c, train, 1, 1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("lr="), std::string::npos);
  }
}

TEST(Eval, OracleModelOnGroundTruthInputs) {
  TempDir dir;
  auto c = tiny_config();
  data::generate(c, dir.path() / "data", false);
  // Replace the degraded inputs with the ground truth.
  for (std::size_t i = 0; i < c.data.n_test; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%05zu.bin", i);
    const auto path = dir.path() / "data" / "test" / name;
    auto box = io::read_container(path);
    for (auto& [n, t] : box.tensors)
      if (n == "x_u") t = box.get("x");
    io::write_container(path, box);
  }
  auto model = pipeline::build_model(c);
  model.set_identity_init();
  pipeline::save_checkpoint(dir.path() / "oracle.ckpt", model, nullptr, 0, c);
  auto rows = pipeline::cmd_eval(dir.path() / "oracle.ckpt", dir.path() / "data", dir.path() / "eval",
                                 pipeline::EvalMode::both, 8, false);
  ASSERT_EQ(rows.size(), 3 * c.data.n_test);
  for (const auto& r : rows) {
    if (r.method == "mc_mean") continue;  // identity init removes all stochastic paths
    EXPECT_NEAR(r.ssim, 1.0, 1e-12) << r.method;
  }
  auto csv = read_csv(dir.path() / "eval" / "metrics.csv");
  std::map<std::string, std::vector<double>> psnr;
  std::map<std::string, double> mean_row;
  for (std::size_t i = 1; i < csv.size(); ++i) {
    if (csv[i][0] == "mean") mean_row[csv[i][2]] = std::stod(csv[i][3]);
    else if (csv[i][0] != "std") psnr[csv[i][2]].push_back(std::stod(csv[i][3]));
  }
  ASSERT_EQ(psnr.size(), 3u);
  EXPECT_TRUE(psnr.count("deterministic") && psnr.count("mc_mean"));
  for (auto& [m, v] : psnr) {
    double s = 0;
    for (double x : v) s += x;
    EXPECT_NEAR(mean_row[m], s / v.size(), 1e-8 * std::abs(s));
  }
  EXPECT_TRUE(fs::exists(dir.path() / "eval" / "error_scales.csv"));
  EXPECT_TRUE(fs::exists(dir.path() / "eval" / "run_manifest.json"));
}

TEST(Eval, RefusesMismatchedTask) {
  TempDir dir;
  auto c = tiny_config();
  auto ct = tiny_config(acq::Task::ct);
  data::generate(ct, dir.path() / "ct", false);
  pipeline::save_checkpoint(dir.path() / "m.ckpt", pipeline::build_model(c), nullptr, 0, c);
  EXPECT_THROW(pipeline::cmd_eval(dir.path() / "m.ckpt", dir.path() / "ct", dir.path() / "e",
                                  pipeline::EvalMode::deterministic, 1, false),
               DataError);
}

TEST(Uncertainty, MapsArgumentsAndDeterminism) {
  TempDir dir;
  auto c = tiny_config();
  data::generate(c, dir.path() / "data", false);
  pipeline::save_checkpoint(dir.path() / "m.ckpt", pipeline::build_model(c), nullptr, 0, c);
  auto run = [&](const std::string& out) {
    return pipeline::cmd_uncertainty(dir.path() / "m.ckpt", dir.path() / "data", dir.path() / out, 2, "asm", 0.2,
                                     false);
  };
  auto r = run("u1");
  EXPECT_EQ(r.rows.size(), c.data.n_test);
  EXPECT_EQ(r.comparison.size(), 3u);
  EXPECT_TRUE(fs::exists(dir.path() / "u1" / "images" / "test_0_variance.pgm"));
  run("u2");
  EXPECT_EQ(slurp(dir.path() / "u1" / "uncertainty.csv"), slurp(dir.path() / "u2" / "uncertainty.csv"));
  EXPECT_EQ(slurp(dir.path() / "u1" / "tensors" / "test_1.bin"), slurp(dir.path() / "u2" / "tensors" / "test_1.bin"));
  EXPECT_THROW(pipeline::cmd_uncertainty(dir.path() / "m.ckpt", dir.path() / "data", dir.path() / "u3", 1, "asm",
                                         std::nullopt, false),
               ConfigError);
  EXPECT_THROW(pipeline::cmd_uncertainty(dir.path() / "m.ckpt", dir.path() / "data", dir.path() / "u3", 4,
                                         "dropout", std::nullopt, false),
               ConfigError);
}

TEST(RunManifest, ListsEveryFile) {
  TempDir dir;
  auto c = tiny_config();
  data::generate(c, dir.path() / "data", false);
  pipeline::cmd_train(c, dir.path() / "data", dir.path() / "run", false);
  const std::string manifest = slurp(dir.path() / "run" / "run_manifest.json");
  for (auto& e : fs::recursive_directory_iterator(dir.path() / "run")) {
    if (!e.is_regular_file() || e.path().filename() == "run_manifest.json") continue;
    EXPECT_NE(manifest.find(fs::relative(e.path(), dir.path() / "run").generic_string()), std::string::npos);
  }
}

}  // namespace
}  // namespace mambamir
