#include "mambamir/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace mambamir::io {

static_assert(std::endian::native == std::endian::little,
              "the container format is written with native little-endian stores");

namespace {

constexpr char kMagic[8] = {'M', 'M', 'I', 'R', 'T', 'N', 'S', 'R'};

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T take(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw DataError("truncated container " + path.string());
  }
  return v;
}

std::string take_string(std::ifstream& in, std::uint64_t len, const std::filesystem::path& path) {
  if (len > (1ULL << 32)) throw DataError("corrupt string length in " + path.string());
  std::string s(len, '\0');
  if (len && !in.read(s.data(), static_cast<std::streamsize>(len))) {
    throw DataError("truncated container " + path.string());
  }
  return s;
}

}  // namespace

const Tensor& Container::get(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw DataError("container has no tensor named '" + name + "'");
}

bool Container::has(const std::string& name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const auto& e) { return e.first == name; });
}

void write_container(const std::filesystem::path& path, const Container& c) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint64_t>(out, c.seed);
  put<std::int64_t>(out, c.step);
  put<std::uint64_t>(out, c.text.size());
  out.write(c.text.data(), static_cast<std::streamsize>(c.text.size()));
  put<std::uint64_t>(out, c.tensors.size());
  for (const auto& [name, t] : c.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw DataError("write failed for " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw DataError(path.string() + " is not a tensor container");
  }
  const auto version = take<std::uint32_t>(in, path);
  if (version != kContainerVersion) {
    throw DataError(path.string() + ": unsupported container version " + std::to_string(version));
  }
  Container c;
  c.seed = take<std::uint64_t>(in, path);
  c.step = take<std::int64_t>(in, path);
  c.text = take_string(in, take<std::uint64_t>(in, path), path);
  const auto count = take<std::uint64_t>(in, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = take_string(in, take<std::uint32_t>(in, path), path);
    const auto rank = take<std::uint32_t>(in, path);
    if (rank > 8) throw DataError(path.string() + ": corrupt rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = take<std::uint64_t>(in, path);
    Buffer data(numel(shape));
    if (!data.empty() &&
        !in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)))) {
      throw DataError("truncated tensor '" + name + "' in " + path.string());
    }
    c.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return c;
}

void write_pgm(const std::filesystem::path& path, const Tensor& map, double lo, double hi) {
  if (map.rank() != 2) throw DimensionError("write_pgm: expected [H,W], got " + to_string(map.shape()));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << map.dim(1) << " " << map.dim(0) << "\n255\n";
  const double span = hi > lo ? hi - lo : 1.0;
  for (double v : map.data()) {
    const double t = std::clamp((v - lo) / span, 0.0, 1.0);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0))));
  }
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a(bytes);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

bool non_empty_dir(const std::filesystem::path& dir) {
  return std::filesystem::is_directory(dir) && !std::filesystem::is_empty(dir);
}

}  // namespace mambamir::io
