#include "mambamir/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "mambamir/io.hpp"

namespace mambamir::data {

namespace fs = std::filesystem;

std::uint64_t sample_seed(std::uint64_t master, const std::string& split, std::size_t index) {
  std::uint64_t offset = 0;
  if (split == "val") offset = 1ULL << 32;
  if (split == "test") offset = 2ULL << 32;
  return derive_seed(master, offset + index);
}

namespace {

std::string sample_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%05zu.bin", i);
  return buf;
}

std::string manifest_text(const ExperimentConfig& c) {
  const auto& a = c.acquisition;
  std::ostringstream out;
  out.precision(17);
  out << "format = " << io::kContainerVersion << "\n"
      << "task = " << acq::task_name(c.task) << "\n"
      << "image_size = " << c.data.image_size << "\n"
      << "seed = " << c.seed << "\n"
      << "n_train = " << c.data.n_train << "\n"
      << "n_val = " << c.data.n_val << "\n"
      << "n_test = " << c.data.n_test << "\n"
      << "acceleration = " << a.acceleration << "\n"
      << "center_fraction = " << a.center_fraction << "\n"
      << "mri_noise_sigma = " << a.mri_noise_sigma << "\n"
      << "n_views = " << a.n_views << "\n"
      << "n_detectors = " << a.n_detectors << "\n"
      << "drf = " << a.drf << "\n"
      << "pet_scale = " << a.pet_scale << "\n";
  return out.str();
}

template <typename T>
T field(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw DataError("manifest is missing '" + key + "'");
  T v{};
  const auto& s = it->second;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw DataError("manifest field '" + key + "' is malformed: " + s);
  }
  return v;
}

}  // namespace

std::size_t generate(const ExperimentConfig& config, const fs::path& dir, bool force) {
  config.validate();
  if (io::non_empty_dir(dir)) {
    if (!force) throw DataError(dir.string() + " is not empty (use --force to overwrite)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  const std::size_t counts[] = {config.data.n_train, config.data.n_val, config.data.n_test};
  std::size_t written = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    const std::string split = kSplits[s];
    fs::create_directories(dir / split);
    for (std::size_t i = 0; i < counts[s]; ++i) {
      const std::uint64_t seed = sample_seed(config.seed, split, i);
      Rng rng(derive_seed(seed, 0));
      Tensor image = acq::random_ellipse_phantom(config.data.image_size, rng);
      acq::PhantomPair pair = acq::make_pair(image, config.acquisition, seed);
      io::Container c;
      c.text = acq::task_name(pair.task);
      c.seed = seed;
      c.tensors = {{"x", pair.x}, {"y", pair.y}, {"x_u", pair.x_u}};
      io::write_container(dir / split / sample_name(i), c);
      ++written;
    }
  }
  std::ofstream(dir / "manifest.txt") << manifest_text(config);
  return written;
}

Manifest read_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.txt");
  if (!in) throw DataError("no manifest.txt in " + dir.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
      return s;
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  if (field<std::uint32_t>(kv, "format") != io::kContainerVersion) {
    throw DataError("unsupported dataset format in " + dir.string());
  }
  Manifest m;
  try {
    m.task = acq::parse_task(kv["task"]);
  } catch (const ConfigError& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  m.image_size = field<std::size_t>(kv, "image_size");
  m.seed = field<std::uint64_t>(kv, "seed");
  m.n_train = field<std::size_t>(kv, "n_train");
  m.n_val = field<std::size_t>(kv, "n_val");
  m.n_test = field<std::size_t>(kv, "n_test");
  m.params.task = m.task;
  m.params.acceleration = field<double>(kv, "acceleration");
  m.params.center_fraction = field<double>(kv, "center_fraction");
  m.params.mri_noise_sigma = field<double>(kv, "mri_noise_sigma");
  m.params.n_views = field<std::size_t>(kv, "n_views");
  m.params.n_detectors = field<std::size_t>(kv, "n_detectors");
  m.params.drf = field<double>(kv, "drf");
  m.params.pet_scale = field<double>(kv, "pet_scale");
  return m;
}

std::vector<Sample> load_split(const fs::path& dir, const std::string& split) {
  const Manifest m = read_manifest(dir);
  std::size_t count = 0;
  if (split == "train")
    count = m.n_train;
  else if (split == "val")
    count = m.n_val;
  else if (split == "test")
    count = m.n_test;
  else
    throw DataError("unknown split '" + split + "'");
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    io::Container c = io::read_container(dir / split / sample_name(i));
    if (c.text != acq::task_name(m.task)) {
      throw DataError("sample " + std::to_string(i) + " in " + split + " has task '" + c.text + "'");
    }
    out.push_back({split + "/" + std::to_string(i), c.get("x"), c.get("x_u"), c.seed});
  }
  return out;
}

double data_range(const std::vector<Sample>& samples, acq::Task task) {
  double peak = 0.0;
  for (const auto& s : samples) {
    Tensor img = task == acq::Task::mri ? acq::magnitude(s.x) : s.x;
    for (double v : img.data()) peak = std::max(peak, std::abs(v));
  }
  return peak > 0 ? peak : 1.0;
}

}  // namespace mambamir::data
