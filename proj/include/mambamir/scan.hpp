#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "mambamir/rng.hpp"
#include "mambamir/ssm.hpp"
#include "mambamir/tensor.hpp"

namespace mambamir::scan {

/// How stochastic layers behave during a forward pass.
///   train / mc: one scan is masked per block per pass.
///   deterministic: nothing is masked; masked-trained branches are rescaled.
enum class Mode { train, mc, deterministic };

inline constexpr std::size_t kDirections = 4;

/// Direction 0: row-major from the top-left corner.
/// Direction 1: column-major from the top-left corner.
/// Direction 2: reverse of direction 0 (row-major from the bottom-right).
/// Direction 3: reverse of direction 1 (column-major from the bottom-right).
/// Returns order[k] = flat (row-major) pixel index visited at step k.
std::vector<std::size_t> traversal(std::size_t height, std::size_t width, std::size_t direction);

/// The four directional unrollings of a [B,C,H,W] feature map.
struct ScanSet {
  Tensor scans;  // [B, 4, C, H*W]
  std::size_t height = 0;
  std::size_t width = 0;
  std::optional<std::size_t> masked_index;
};

ScanSet scan_expand(const Tensor& x);

/// s' ~ Uniform{0,1,2,3}.
std::size_t draw_mask_index(Rng& rng);

/// Zeroes scan `index` across the batch. Throws ContractError if a scan is
/// already masked.
ScanSet asm_mask(const ScanSet& s, std::size_t index);
ScanSet asm_mask(const ScanSet& s, Rng& rng);

/// Inverse-permutes each directional sequence back to [B,C,H,W] and sums.
Tensor scan_merge(const ScanSet& y);

/// Per-direction sequence model applied to [B, C, L] sequences. Must map an
/// all-zero sequence to zero (masked branches are not evaluated).
using SequenceMap = std::function<Tensor(const Tensor& seq, std::size_t direction)>;

/// Expand → (mask) → per-scan map → merge.
/// With `masking` on, train/mc modes mask one scan drawn from `rng`, and
/// deterministic mode scales the four-branch sum by 3/4 so it equals the
/// expectation of the masked sum. With `masking` off every mode sums all
/// four branches unscaled.
Tensor ams6_forward(const Tensor& x, const SequenceMap& s6, Mode mode, Rng* rng,
                    bool masking = true);

/// AMS6 with one selective SSM per scan direction.
Tensor ams6_forward(const Tensor& x, const std::array<ssm::SSMParams, kDirections>& params,
                    Mode mode, Rng* rng, bool masking = true);

}  // namespace mambamir::scan
