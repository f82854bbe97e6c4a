#include "mambamir/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <vector>

#include "mambamir/optim.hpp"

namespace mambamir {

std::size_t task_channels(acq::Task task) { return task == acq::Task::mri ? 2 : 1; }

double learning_rate(const TrainConfig& t, long step) {
  return step_decay_lr(t.lr, step, t.decay_start, t.decay_every, t.decay_factor);
}

ExperimentConfig ExperimentConfig::toy(acq::Task task) {
  ExperimentConfig c;
  c.task = task;
  c.acquisition.task = task;
  c.model = net::ModelConfig::toy(task_channels(task));
  return c;
}

ExperimentConfig ExperimentConfig::paper(acq::Task task) {
  ExperimentConfig c = toy(task);
  c.preset = "paper";
  c.model = net::ModelConfig::paper(task_channels(task));
  c.data.image_size = 256;
  c.train.steps = 100000;
  c.train.batch = 8;
  c.train.lr = 2e-4;
  c.train.decay_start = 50000;
  c.train.decay_every = 20000;
  c.train.decay_factor = 0.5;
  c.train.crop = 192;
  c.train.val_every = 5000;
  return c;
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
T parse_number(const std::string& key, const std::string& s) {
  T v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + s + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + s + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Field {
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

// Ordered table of every serialized key.
const std::vector<std::pair<std::string, Field>>& fields() {
  using C = ExperimentConfig;
  auto sz = [](auto getter) {
    return Field{[getter](const C& c) { return std::to_string(*getter(const_cast<C&>(c))); },
                 [getter](C& c, const std::string& v) {
                   *getter(c) = parse_number<std::size_t>("", v);
                 }};
  };
  auto lg = [](auto getter) {
    return Field{[getter](const C& c) { return std::to_string(*getter(const_cast<C&>(c))); },
                 [getter](C& c, const std::string& v) { *getter(c) = parse_number<long>("", v); }};
  };
  auto dbl = [](auto getter) {
    return Field{[getter](const C& c) { return fmt_double(*getter(const_cast<C&>(c))); },
                 [getter](C& c, const std::string& v) { *getter(c) = parse_number<double>("", v); }};
  };
  auto bln = [](auto getter) {
    return Field{[getter](const C& c) { return std::string(*getter(const_cast<C&>(c)) ? "true" : "false"); },
                 [getter](C& c, const std::string& v) { *getter(c) = parse_bool("", v); }};
  };
  auto str = [](auto getter) {
    return Field{[getter](const C& c) { return *getter(const_cast<C&>(c)); },
                 [getter](C& c, const std::string& v) { *getter(c) = v; }};
  };

  static const std::vector<std::pair<std::string, Field>> table = {
      {"task", {[](const C& c) { return acq::task_name(c.task); },
                [](C& c, const std::string& v) {
                  c.task = acq::parse_task(v);
                  c.acquisition.task = c.task;
                  c.model.in_channels = task_channels(c.task);
                }}},
      {"preset", str([](C& c) { return &c.preset; })},
      {"seed", {[](const C& c) { return std::to_string(c.seed); },
                [](C& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); }}},
      {"out_dir", str([](C& c) { return &c.out_dir; })},
      {"data.image_size", sz([](C& c) { return &c.data.image_size; })},
      {"data.n_train", sz([](C& c) { return &c.data.n_train; })},
      {"data.n_val", sz([](C& c) { return &c.data.n_val; })},
      {"data.n_test", sz([](C& c) { return &c.data.n_test; })},
      {"acq.acceleration", dbl([](C& c) { return &c.acquisition.acceleration; })},
      {"acq.center_fraction", dbl([](C& c) { return &c.acquisition.center_fraction; })},
      {"acq.mri_noise_sigma", dbl([](C& c) { return &c.acquisition.mri_noise_sigma; })},
      {"acq.n_views", sz([](C& c) { return &c.acquisition.n_views; })},
      {"acq.n_detectors", sz([](C& c) { return &c.acquisition.n_detectors; })},
      {"acq.drf", dbl([](C& c) { return &c.acquisition.drf; })},
      {"acq.pet_scale", dbl([](C& c) { return &c.acquisition.pet_scale; })},
      {"model.embed_dim", sz([](C& c) { return &c.model.embed_dim; })},
      {"model.depth", sz([](C& c) { return &c.model.depth; })},
      {"model.multipliers",
       {[](const C& c) {
          std::string s;
          for (std::size_t i = 0; i < c.model.multipliers.size(); ++i)
            s += (i ? "," : "") + std::to_string(c.model.multipliers[i]);
          return s;
        },
        [](C& c, const std::string& v) {
          c.model.multipliers.clear();
          std::stringstream ss(v);
          std::string item;
          while (std::getline(ss, item, ','))
            c.model.multipliers.push_back(parse_number<std::size_t>("model.multipliers", trim(item)));
        }}},
      {"model.state_dim", sz([](C& c) { return &c.model.state_dim; })},
      {"model.patch_size", sz([](C& c) { return &c.model.patch_size; })},
      {"model.mlp_ratio", dbl([](C& c) { return &c.model.mlp_ratio; })},
      {"model.use_mlp", bln([](C& c) { return &c.model.use_mlp; })},
      {"model.use_attn", bln([](C& c) { return &c.model.use_attn; })},
      {"model.heads", sz([](C& c) { return &c.model.heads; })},
      {"train.steps", lg([](C& c) { return &c.train.steps; })},
      {"train.batch", sz([](C& c) { return &c.train.batch; })},
      {"train.lr", dbl([](C& c) { return &c.train.lr; })},
      {"train.decay_start", lg([](C& c) { return &c.train.decay_start; })},
      {"train.decay_every", lg([](C& c) { return &c.train.decay_every; })},
      {"train.decay_factor", dbl([](C& c) { return &c.train.decay_factor; })},
      {"train.crop", sz([](C& c) { return &c.train.crop; })},
      {"train.val_every", lg([](C& c) { return &c.train.val_every; })},
      {"train.log_every", lg([](C& c) { return &c.train.log_every; })},
      {"train.asm_masking", bln([](C& c) { return &c.train.asm_masking; })},
      {"train.dropout_p", dbl([](C& c) { return &c.train.dropout_p; })},
      {"loss.alpha", dbl([](C& c) { return &c.loss.alpha; })},
      {"loss.beta", dbl([](C& c) { return &c.loss.beta; })},
      {"loss.gamma", dbl([](C& c) { return &c.loss.gamma; })},
      {"loss.eta", dbl([](C& c) { return &c.loss.eta; })},
      {"loss.epsilon", dbl([](C& c) { return &c.loss.epsilon; })},
      {"mc.samples", sz([](C& c) { return &c.mc.samples; })},
      {"mc.mechanism", str([](C& c) { return &c.mc.mechanism; })},
      {"mc.dropout_p", dbl([](C& c) { return &c.mc.dropout_p; })},
  };
  return table;
}

}  // namespace

std::string ExperimentConfig::serialize() const {
  std::string out;
  for (const auto& [key, field] : fields()) out += key + " = " + field.get(*this) + "\n";
  return out;
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  std::map<std::string, const Field*> index;
  for (const auto& [key, field] : fields()) index[key] = &field;

  // The task line fixes channel counts, so it is applied before anything else.
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    entries.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }

  ExperimentConfig c = toy(acq::Task::mri);
  for (const auto& [k, v] : entries)
    if (k == "task") c = toy(acq::parse_task(v));
  for (const auto& [k, v] : entries) {
    auto it = index.find(k);
    if (it == index.end()) throw ConfigError("unknown config key '" + k + "'");
    try {
      it->second->set(c, v);
    } catch (const ConfigError& e) {
      throw ConfigError("config key '" + k + "': " + e.what());
    }
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void ExperimentConfig::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write config file " + path);
  out << serialize();
}

void ExperimentConfig::validate() const {
  model.validate();
  loss.validate();
  if (model.in_channels != task_channels(task)) {
    throw ConfigError("model input channels do not match task " + acq::task_name(task));
  }
  if (data.image_size < 16) throw ConfigError("data.image_size must be >= 16");
  if (data.n_train == 0) throw ConfigError("data.n_train must be positive");
  if (train.batch == 0) throw ConfigError("train.batch must be positive");
  if (train.steps < 0) throw ConfigError("train.steps must be >= 0");
  if (!(train.lr > 0)) throw ConfigError("train.lr must be positive");
  if (train.crop == 0 || train.crop > data.image_size) {
    throw ConfigError("train.crop must lie in [1, data.image_size]");
  }
  if (train.crop % model.alignment() != 0) {
    throw ConfigError("train.crop must be a multiple of " + std::to_string(model.alignment()));
  }
  if (train.dropout_p < 0 || train.dropout_p >= 1) throw ConfigError("train.dropout_p must lie in [0, 1)");
  if (mc.mechanism != "asm" && mc.mechanism != "dropout") {
    throw ConfigError("mc.mechanism must be asm or dropout");
  }
  if (mc.mechanism == "dropout" && !(mc.dropout_p > 0 && mc.dropout_p < 1)) {
    throw ConfigError("mc.mechanism = dropout requires mc.dropout_p in (0, 1)");
  }
  if (acquisition.task != task) throw ConfigError("acquisition task does not match task");
  if (task == acq::Task::mri && acquisition.acceleration < 1) throw ConfigError("acq.acceleration must be >= 1");
  if (task == acq::Task::ct && acquisition.n_views == 0) throw ConfigError("acq.n_views must be >= 1");
  if (task == acq::Task::pet && acquisition.drf < 1) throw ConfigError("acq.drf must be >= 1");
}

}  // namespace mambamir
