#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mambamir/config.hpp"
#include "mambamir/dataset.hpp"
#include "mambamir/network.hpp"
#include "mambamir/objectives.hpp"
#include "mambamir/optim.hpp"
#include "mambamir/uncertainty.hpp"

// Experiment orchestration: train → evaluate → uncertainty, with artifacts.
namespace mambamir::pipeline {

namespace fs = std::filesystem;

// Independent random streams derived from the run seed.
enum Stream : std::uint64_t { kModelInit = 1, kTrainSteps = 2, kMonteCarlo = 3 };

/// The real image metrics are computed on: the modulus for complex MRI data,
/// the single channel otherwise. [C,H,W] -> [H,W].
Tensor display_image(const Tensor& t, acq::Task task);

struct Batch {
  Tensor x;    // [B,C,crop,crop]
  Tensor x_u;  // [B,C,crop,crop]
};

/// Random samples (with replacement) and aligned random crops.
Batch sample_batch(const std::vector<data::Sample>& set, std::size_t batch, std::size_t crop, Rng& rng);

using ForwardFn = std::function<Tensor(const Tensor& x, scan::Mode mode, Rng* rng)>;

struct StepHooks {
  std::function<void(long step, double loss, double lr)> on_step;
  /// Called after every cfg.train.val_every steps and after the last step.
  std::function<void(long step)> on_validate;
};

/// Adam steps first_step..last_step (1-based, inclusive). Step s draws its
/// batch, crops and masks from derive_seed(derive_seed(seed, kTrainSteps), s),
/// so a resumed run reproduces an uninterrupted one. Throws NumericError on a
/// non-finite loss. Returns the per-step losses.
std::vector<double> train_steps(const ForwardFn& forward, const ParamList& params, AdamState& adam,
                                const ExperimentConfig& cfg, const std::vector<data::Sample>& train,
                                long first_step, long last_step, const StepHooks& hooks = {});

/// Network for a config, initialized from derive_seed(seed, kModelInit), with
/// the training-time masking/dropout settings applied.
net::MambaMIR build_model(const ExperimentConfig& cfg);

void save_checkpoint(const fs::path& path, const net::MambaMIR& model, const AdamState* adam,
                     long step, const ExperimentConfig& cfg);

struct LoadedCheckpoint {
  ExperimentConfig config;
  net::MambaMIR model;
  std::optional<AdamState> adam;
  long step = 0;
};
LoadedCheckpoint load_checkpoint(const fs::path& path);

/// Runs the model on one [C,H,W] input, returning [C,H,W].
Tensor reconstruct(const net::MambaMIR& model, const Tensor& x_u, scan::Mode mode, Rng* rng = nullptr);

/// Mean deterministic-mode PSNR over a split.
double mean_psnr(const net::MambaMIR& model, const std::vector<data::Sample>& set, acq::Task task,
                 double range);

struct TrainResult {
  std::vector<double> losses;
  double best_val_psnr = 0.0;
  long best_step = 0;
  fs::path best_checkpoint;
  fs::path last_checkpoint;
};

/// Trains on <data_dir>/train, validates on <data_dir>/val and writes
/// config.txt, train_log.csv, val_log.csv, best.ckpt, last.ckpt and
/// run_manifest.json into out_dir. With `resume`, continues from that
/// checkpoint's step and state.
TrainResult cmd_train(const ExperimentConfig& cfg, const fs::path& data_dir, const fs::path& out_dir,
                      bool force, const std::optional<fs::path>& resume = std::nullopt);

enum class EvalMode { deterministic, mc, both };
EvalMode parse_eval_mode(const std::string& s);

struct MetricRow {
  std::string sample;
  std::string method;  // input | deterministic | mc_mean
  double psnr = 0.0;
  double ssim = 0.0;
};

/// Writes metrics.csv (per-sample rows, then mean and std rows per method),
/// error maps (PGM, per-image normalized, scale in error_scales.csv) and raw
/// reconstructions. Refuses a dataset whose task differs from the checkpoint's.
std::vector<MetricRow> cmd_eval(const fs::path& checkpoint, const fs::path& data_dir,
                                const fs::path& out_dir, EvalMode mode, std::size_t mc_samples,
                                bool force, const std::string& split = "test");

struct UncertaintyRow {
  std::string sample;
  double psnr = 0.0;
  double ssim = 0.0;
  double mean_variance = 0.0;
  unc::Correlation rho;
};

struct ComparisonRow {
  std::string method;  // control | mc_asm | mc_dropout
  double psnr_mean = 0.0, psnr_std = 0.0;
  double ssim_mean = 0.0, ssim_std = 0.0;
};

struct UncertaintyReport {
  std::vector<UncertaintyRow> rows;
  std::vector<ComparisonRow> comparison;
};

/// N-sample Monte-Carlo maps for every sample of a split (uncertainty.csv plus
/// mean/variance/error PGMs and raw tensors) and the control vs MC-ASM vs
/// MC-dropout table (comparison.csv). `dropout_p` adds the dropout column and
/// is required when `mechanism` is dropout.
UncertaintyReport cmd_uncertainty(const fs::path& checkpoint, const fs::path& data_dir,
                                  const fs::path& out_dir, std::size_t n, const std::string& mechanism,
                                  std::optional<double> dropout_p, bool force,
                                  const std::string& split = "test");

/// Lists every file under out_dir with its FNV-1a hash, plus the config hash,
/// seed, command and wall time, in run_manifest.json.
void write_run_manifest(const fs::path& out_dir, const ExperimentConfig& cfg, const std::string& command,
                        double wall_seconds);

}  // namespace mambamir::pipeline
