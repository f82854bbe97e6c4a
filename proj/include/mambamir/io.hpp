#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mambamir/tensor.hpp"

namespace mambamir::io {

/// Versioned little-endian container of named tensors plus free-form text
/// (the run config) and the seed/step it was produced with.
///
///   "MMIRTNSR" | u32 version | u64 seed | i64 step | u64 len, text
///   | u64 count | count × (u32 len, name | u32 rank | u64 dims… | f64 data…)
struct Container {
  std::string text;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
};

inline constexpr std::uint32_t kContainerVersion = 1;

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

/// 8-bit binary PGM of a [H,W] map, linearly mapping [lo, hi] to [0, 255].
void write_pgm(const std::filesystem::path& path, const Tensor& map, double lo, double hi);

/// 64-bit FNV-1a over a file's bytes.
std::uint64_t fnv1a_file(const std::filesystem::path& path);
std::uint64_t fnv1a(const std::string& bytes);
std::string hex64(std::uint64_t v);

/// Fixed-precision decimal for CSV cells (round-trippable).
std::string fmt(double v);

/// True if `dir` exists and has at least one entry.
bool non_empty_dir(const std::filesystem::path& dir);

}  // namespace mambamir::io
