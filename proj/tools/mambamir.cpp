// mambamir: generate | train | eval | uncertainty | selftest
#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mambamir/config.hpp"
#include "mambamir/dataset.hpp"
#include "mambamir/pipeline.hpp"
#include "mambamir/selftest.hpp"

namespace {

using namespace mambamir;

enum Exit { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

struct Shared {
  std::string config;
  std::string task = "mri";
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
};

void add_shared(CLI::App* cmd, Shared& s) {
  cmd->add_option("--config", s.config, "Experiment config file (key = value)");
  cmd->add_option("--task", s.task, "mri | ct | pet (ignored with --config)");
  cmd->add_option("--seed", s.seed, "Master seed");
  cmd->add_option("--out", s.out, "Output directory")->required();
  cmd->add_flag("--force", s.force, "Overwrite an existing non-empty output directory");
}

ExperimentConfig resolve(const Shared& s) {
  ExperimentConfig cfg = s.config.empty() ? ExperimentConfig::toy(acq::parse_task(s.task))
                                          : ExperimentConfig::load(s.config);
  if (s.seed) cfg.seed = *s.seed;
  cfg.validate();
  return cfg;
}

void print_means(const std::vector<pipeline::MetricRow>& rows) {
  std::map<std::string, std::pair<double, int>> psnr, ssim;
  for (const auto& r : rows) {
    psnr[r.method].first += r.psnr;
    psnr[r.method].second++;
    ssim[r.method].first += r.ssim;
  }
  for (const auto& [method, acc] : psnr) {
    std::printf("%-14s PSNR %.3f dB  SSIM %.4f\n", method.c_str(), acc.first / acc.second,
                ssim[method].first / acc.second);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MambaMIR reconstruction and uncertainty toolkit"};
  app.require_subcommand(1);

  Shared gen_s, train_s, eval_s, unc_s;
  std::string data_dir, checkpoint, resume, mode = "both", mechanism = "asm", split = "test";
  std::size_t eval_n = 8, unc_n = 16;
  std::optional<double> p;

  auto* gen = app.add_subcommand("generate", "Write a phantom dataset");
  add_shared(gen, gen_s);

  auto* train = app.add_subcommand("train", "Train a model on a generated dataset");
  add_shared(train, train_s);
  train->add_option("--data", data_dir, "Dataset directory")->required();
  train->add_option("--resume", resume, "Continue from a checkpoint");

  auto* eval = app.add_subcommand("eval", "PSNR/SSIM metrics and error maps");
  add_shared(eval, eval_s);
  eval->add_option("--data", data_dir, "Dataset directory")->required();
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--mode", mode, "deterministic | mc | both");
  eval->add_option("-n,--samples", eval_n, "MC samples for the mc mean");
  eval->add_option("--split", split, "train | val | test");

  auto* unc = app.add_subcommand("uncertainty", "Monte-Carlo uncertainty maps");
  add_shared(unc, unc_s);
  unc->add_option("--data", data_dir, "Dataset directory")->required();
  unc->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  unc->add_option("-n,--samples", unc_n, "MC samples (>= 2)");
  unc->add_option("--mechanism", mechanism, "asm | dropout");
  unc->add_option("--p", p, "Dropout rate; required for --mechanism dropout");
  unc->add_option("--split", split, "train | val | test");

  auto* self = app.add_subcommand("selftest", "Run the invariant suites");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) {
      ExperimentConfig cfg = resolve(gen_s);
      const std::size_t n = data::generate(cfg, gen_s.out, gen_s.force);
      std::printf("wrote %zu samples to %s\n", n, gen_s.out.c_str());
    } else if (*train) {
      ExperimentConfig cfg = resolve(train_s);
      cfg.out_dir = train_s.out;
      std::optional<std::filesystem::path> from;
      if (!resume.empty()) from = resume;
      auto r = pipeline::cmd_train(cfg, data_dir, train_s.out, train_s.force, from);
      std::printf("trained to step %ld, best val PSNR %.3f dB at step %ld\n", cfg.train.steps,
                  r.best_val_psnr, r.best_step);
    } else if (*eval) {
      auto rows = pipeline::cmd_eval(checkpoint, data_dir, eval_s.out, pipeline::parse_eval_mode(mode), eval_n,
                                     eval_s.force, split);
      print_means(rows);
    } else if (*unc) {
      if (mechanism == "dropout" && !p) {
        std::fprintf(stderr, "error: --mechanism dropout requires --p\n");
        return kUsage;
      }
      auto report = pipeline::cmd_uncertainty(checkpoint, data_dir, unc_s.out, unc_n, mechanism, p,
                                              unc_s.force, split);
      for (const auto& c : report.comparison)
        std::printf("%-11s PSNR %.3f (%.3f)  SSIM %.4f (%.4f)\n", c.method.c_str(), c.psnr_mean, c.psnr_std,
                    c.ssim_mean, c.ssim_std);
    } else if (*self) {
      return run_selftest(std::cout) == 0 ? kOk : 1;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kUsage;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kNumeric;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const DimensionError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return kOk;
}
