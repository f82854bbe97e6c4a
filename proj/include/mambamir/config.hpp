#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "mambamir/acquisition.hpp"
#include "mambamir/network.hpp"
#include "mambamir/objectives.hpp"

namespace mambamir {

struct DataConfig {
  std::size_t image_size = 32;
  std::size_t n_train = 64;
  std::size_t n_val = 8;
  std::size_t n_test = 16;

  bool operator==(const DataConfig&) const = default;
};

struct TrainConfig {
  long steps = 5000;
  std::size_t batch = 2;
  double lr = 2e-4;
  long decay_start = 50000;
  long decay_every = 20000;
  double decay_factor = 0.5;
  std::size_t crop = 32;
  long val_every = 500;
  long log_every = 50;
  bool asm_masking = true;  // scan masking during training
  double dropout_p = 0.0;   // dropout after each AMSS block during training

  bool operator==(const TrainConfig&) const = default;
};

struct McConfig {
  std::size_t samples = 16;
  std::string mechanism = "asm";  // asm | dropout
  double dropout_p = 0.0;         // required (in (0,1)) when mechanism = dropout

  bool operator==(const McConfig&) const = default;
};

/// Everything that determines a run. Serialized as flat `key = value` text;
/// parse(serialize(c)) == c.
struct ExperimentConfig {
  acq::Task task = acq::Task::mri;
  std::string preset = "toy";
  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";
  DataConfig data;
  acq::AcquisitionParams acquisition;
  net::ModelConfig model;
  TrainConfig train;
  obj::LossWeights loss;
  McConfig mc;

  static ExperimentConfig toy(acq::Task task);
  /// Published full-scale settings. Documentation and long runs only.
  static ExperimentConfig paper(acq::Task task);

  std::string serialize() const;
  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::string& path);
  void save(const std::string& path) const;
  void validate() const;

  bool operator==(const ExperimentConfig&) const = default;
};

/// Network input channels for a task: 2 for complex MRI, 1 otherwise.
std::size_t task_channels(acq::Task task);

/// Learning rate at a (1-based) training step under the config's decay schedule.
double learning_rate(const TrainConfig& t, long step);

}  // namespace mambamir
