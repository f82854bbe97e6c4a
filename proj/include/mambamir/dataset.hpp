#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mambamir/config.hpp"
#include "mambamir/tensor.hpp"

// On-disk phantom datasets: <dir>/manifest.txt plus one directory per split
// holding one tensor container (x, y, x_u) per sample.
namespace mambamir::data {

struct Sample {
  std::string id;
  Tensor x;    // ground truth, [C,H,W]
  Tensor x_u;  // degraded input, [C,H,W]
  std::uint64_t seed = 0;
};

struct Manifest {
  acq::Task task = acq::Task::mri;
  std::size_t image_size = 0;
  acq::AcquisitionParams params;
  std::uint64_t seed = 0;
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  std::size_t n_test = 0;
};

inline const char* kSplits[] = {"train", "val", "test"};

/// Seed of sample `index` in `split`; a pure function of the master seed.
std::uint64_t sample_seed(std::uint64_t master, const std::string& split, std::size_t index);

/// Writes the dataset described by `config`. Refuses a non-empty `dir`
/// unless `force` is set. Returns the number of sample files written.
std::size_t generate(const ExperimentConfig& config, const std::filesystem::path& dir, bool force);

Manifest read_manifest(const std::filesystem::path& dir);
std::vector<Sample> load_split(const std::filesystem::path& dir, const std::string& split);

/// Largest ground-truth value magnitude across samples (PSNR data range).
double data_range(const std::vector<Sample>& samples, acq::Task task);

}  // namespace mambamir::data
