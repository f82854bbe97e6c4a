#include "mambamir/scan.hpp"

#include "mambamir/ops.hpp"

namespace mambamir::scan {

std::vector<std::size_t> traversal(std::size_t height, std::size_t width, std::size_t direction) {
  if (direction >= kDirections) throw ContractError("scan direction must be in {0,1,2,3}");
  const std::size_t length = height * width;
  std::vector<std::size_t> order(length);
  for (std::size_t k = 0; k < length; ++k) {
    const bool column_major = direction % 2 == 1;
    const std::size_t step = direction >= 2 ? length - 1 - k : k;
    order[k] = column_major ? (step % height) * width + step / height : step;
  }
  return order;
}

ScanSet scan_expand(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("scan_expand: expected [B,C,H,W], got " + to_string(x.shape()));
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t length = h * w;
  std::vector<std::size_t> index(b * kDirections * c * length);
  std::size_t o = 0;
  std::array<std::vector<std::size_t>, kDirections> orders;
  for (std::size_t s = 0; s < kDirections; ++s) orders[s] = traversal(h, w, s);
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t s = 0; s < kDirections; ++s)
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t k = 0; k < length; ++k) index[o++] = (bi * c + ci) * length + orders[s][k];
  return ScanSet{ops::gather(x, {b, kDirections, c, length}, std::move(index)), h, w, std::nullopt};
}

std::size_t draw_mask_index(Rng& rng) { return static_cast<std::size_t>(rng.below(kDirections)); }

ScanSet asm_mask(const ScanSet& s, std::size_t index) {
  if (s.masked_index) throw ContractError("asm_mask: a scan is already masked");
  if (index >= kDirections) throw ContractError("asm_mask: scan index out of range");
  const Shape& shape = s.scans.shape();
  const std::size_t per_scan = shape[2] * shape[3];
  Tensor mask(shape, 1.0);
  auto m = mask.mutable_data();
  for (std::size_t b = 0; b < shape[0]; ++b) {
    std::fill_n(m.begin() + static_cast<std::ptrdiff_t>((b * kDirections + index) * per_scan),
                per_scan, 0.0);
  }
  return ScanSet{ops::mul(s.scans, mask), s.height, s.width, index};
}

ScanSet asm_mask(const ScanSet& s, Rng& rng) { return asm_mask(s, draw_mask_index(rng)); }

Tensor scan_merge(const ScanSet& y) {
  const Shape& shape = y.scans.shape();
  if (shape.size() != 4 || shape[1] != kDirections || shape[3] != y.height * y.width) {
    throw ContractError("scan_merge: scans " + to_string(shape) + " do not match origin " +
                        std::to_string(y.height) + "x" + std::to_string(y.width));
  }
  const std::size_t b = shape[0], c = shape[2], length = shape[3];
  Tensor merged;
  for (std::size_t s = 0; s < kDirections; ++s) {
    const auto order = traversal(y.height, y.width, s);
    std::vector<std::size_t> inverse(length);
    for (std::size_t k = 0; k < length; ++k) inverse[order[k]] = k;
    std::vector<std::size_t> index(b * c * length);
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t p = 0; p < length; ++p) {
          index[(bi * c + ci) * length + p] = ((bi * kDirections + s) * c + ci) * length + inverse[p];
        }
    Tensor branch = ops::gather(y.scans, {b, c, y.height, y.width}, std::move(index));
    merged = merged.defined() ? ops::add(merged, branch) : branch;
  }
  return merged;
}

Tensor ams6_forward(const Tensor& x, const SequenceMap& s6, Mode mode, Rng* rng, bool masking) {
  ScanSet expanded = scan_expand(x);
  const bool stochastic = masking && mode != Mode::deterministic;
  if (stochastic) {
    if (rng == nullptr) throw ContractError("ams6_forward: train/mc mode needs an rng");
    expanded = asm_mask(expanded, *rng);
  }
  const std::size_t b = x.dim(0), c = x.dim(1), length = expanded.height * expanded.width;
  std::vector<Tensor> outputs;
  outputs.reserve(kDirections);
  for (std::size_t s = 0; s < kDirections; ++s) {
    if (expanded.masked_index == s) {
      outputs.push_back(Tensor::zeros({b, 1, c, length}));
      continue;
    }
    Tensor seq = ops::reshape(ops::slice(expanded.scans, 1, s, 1), {b, c, length});
    Tensor out = s6(seq, s);
    if (out.shape() != seq.shape()) {
      throw DimensionError("ams6_forward: sequence map changed shape " + to_string(seq.shape()) +
                           " -> " + to_string(out.shape()));
    }
    outputs.push_back(ops::reshape(out, {b, 1, c, length}));
  }
  ScanSet ys{ops::concat(outputs, 1), expanded.height, expanded.width, std::nullopt};
  Tensor merged = scan_merge(ys);
  if (masking && mode == Mode::deterministic) merged = ops::scale(merged, 0.75);
  return merged;
}

Tensor ams6_forward(const Tensor& x, const std::array<ssm::SSMParams, kDirections>& params,
                    Mode mode, Rng* rng, bool masking) {
  auto s6 = [&params](const Tensor& seq, std::size_t direction) {
    Tensor tokens = ops::permute(seq, {0, 2, 1});  // [B, L, C]
    Tensor y = ssm::selective_scan_seq(tokens, params[direction]);
    return ops::permute(y, {0, 2, 1});
  };
  return ams6_forward(x, s6, mode, rng, masking);
}

}  // namespace mambamir::scan
