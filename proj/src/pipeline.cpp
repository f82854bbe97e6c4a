#include "mambamir/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>

#include <json.hpp>

#include "mambamir/io.hpp"
#include "mambamir/ops.hpp"

namespace mambamir::pipeline {

Tensor display_image(const Tensor& t, acq::Task task) {
  if (t.rank() != 3) throw DimensionError("display_image: expected [C,H,W], got " + to_string(t.shape()));
  const std::size_t h = t.dim(1), w = t.dim(2);
  Tensor img = task == acq::Task::mri ? acq::magnitude(t.detach()) : t.detach();
  return Tensor({h, w}, Buffer(img.data().begin(), img.data().end()));
}

Batch sample_batch(const std::vector<data::Sample>& set, std::size_t batch, std::size_t crop, Rng& rng) {
  if (set.empty()) throw DataError("training split is empty");
  const Shape& s = set[0].x.shape();
  const std::size_t c = s[0], h = s[1], w = s[2];
  if (crop > h || crop > w) throw ConfigError("crop exceeds the image size");
  Buffer xs(batch * c * crop * crop), us(xs.size());
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& smp = set[rng.below(set.size())];
    const std::size_t r0 = rng.below(h - crop + 1), c0 = rng.below(w - crop + 1);
    auto x = smp.x.data(), u = smp.x_u.data();
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t r = 0; r < crop; ++r)
        for (std::size_t q = 0; q < crop; ++q) {
          const std::size_t src = (ch * h + r0 + r) * w + c0 + q;
          const std::size_t dst = ((b * c + ch) * crop + r) * crop + q;
          xs[dst] = x[src];
          us[dst] = u[src];
        }
  }
  return {Tensor({batch, c, crop, crop}, std::move(xs)), Tensor({batch, c, crop, crop}, std::move(us))};
}

std::vector<double> train_steps(const ForwardFn& forward, const ParamList& params, AdamState& adam,
                                const ExperimentConfig& cfg, const std::vector<data::Sample>& train,
                                long first_step, long last_step, const StepHooks& hooks) {
  const obj::FeatureExtractor fx(cfg.model.in_channels);
  const std::uint64_t stream = derive_seed(cfg.seed, kTrainSteps);
  std::vector<double> losses;
  for (long step = first_step; step <= last_step; ++step) {
    Rng rng(derive_seed(stream, static_cast<std::uint64_t>(step)));
    Batch batch = sample_batch(train, cfg.train.batch, cfg.train.crop, rng);
    const double lr = learning_rate(cfg.train, step);
    double loss = 0.0;
    {
      Tape tape;
      TapeScope scope(tape);
      zero_grads(params);
      Tensor pred = forward(batch.x_u, scan::Mode::train, &rng);
      obj::LossTerms terms = obj::total_loss(pred, batch.x, cfg.loss, &fx);
      loss = terms.total.item();
      if (!std::isfinite(loss)) {
        throw NumericError("non-finite loss at step " + std::to_string(step) +
                           " (lr=" + io::fmt(lr) + ", adam step " + std::to_string(adam.step) + ")");
      }
      backward(terms.total);
    }
    AdamConfig ac;
    ac.lr = lr;
    adam_step(params, adam, ac);
    losses.push_back(loss);
    if (hooks.on_step) hooks.on_step(step, loss, lr);
    if (hooks.on_validate && cfg.train.val_every > 0 &&
        (step % cfg.train.val_every == 0 || step == last_step)) {
      hooks.on_validate(step);
    }
  }
  return losses;
}

net::MambaMIR build_model(const ExperimentConfig& cfg) {
  net::MambaMIR m(cfg.model, derive_seed(cfg.seed, kModelInit));
  m.asm_enabled = cfg.train.asm_masking;
  m.dropout_p = cfg.train.dropout_p;
  return m;
}

void save_checkpoint(const fs::path& path, const net::MambaMIR& model, const AdamState* adam, long step,
                     const ExperimentConfig& cfg) {
  io::Container c;
  c.text = cfg.serialize();
  c.seed = cfg.seed;
  c.step = step;
  const ParamList params = model.parameters();
  for (const auto& [name, t] : params) c.tensors.emplace_back("param/" + name, t);
  if (adam) {
    c.tensors.emplace_back("adam/step", Tensor::scalar(static_cast<double>(adam->step)));
    for (std::size_t i = 0; i < params.size(); ++i) {
      c.tensors.emplace_back("adam/m/" + params[i].first, Tensor({adam->m[i].size()}, adam->m[i]));
      c.tensors.emplace_back("adam/v/" + params[i].first, Tensor({adam->v[i].size()}, adam->v[i]));
    }
  }
  const fs::path tmp = path.string() + ".tmp";
  io::write_container(tmp, c);
  fs::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  io::Container c = io::read_container(path);
  ExperimentConfig cfg = ExperimentConfig::parse(c.text);
  net::MambaMIR model = build_model(cfg);
  const ParamList params = model.parameters();
  for (const auto& [name, t] : params) {
    const Tensor& src = c.get("param/" + name);
    if (src.shape() != t.shape()) {
      throw DataError("checkpoint tensor " + name + " has shape " + to_string(src.shape()) +
                      ", model expects " + to_string(t.shape()));
    }
    Tensor dst = t;
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }
  LoadedCheckpoint out{cfg, model, std::nullopt, c.step};
  if (c.has("adam/step")) {
    AdamState st = make_adam_state(params);
    st.step = static_cast<long>(c.get("adam/step").item());
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto m = c.get("adam/m/" + params[i].first).data();
      auto v = c.get("adam/v/" + params[i].first).data();
      st.m[i].assign(m.begin(), m.end());
      st.v[i].assign(v.begin(), v.end());
    }
    out.adam = std::move(st);
  }
  return out;
}

Tensor reconstruct(const net::MambaMIR& model, const Tensor& x_u, scan::Mode mode, Rng* rng) {
  NoGradScope no_grad;
  Shape batched = x_u.shape();
  batched.insert(batched.begin(), 1);
  Tensor y = model.forward(ops::reshape(x_u, batched), mode, rng);
  return ops::reshape(y, x_u.shape());
}

double mean_psnr(const net::MambaMIR& model, const std::vector<data::Sample>& set, acq::Task task,
                 double range) {
  if (set.empty()) return 0.0;
  double total = 0.0;
  for (const auto& s : set) {
    Tensor pred = reconstruct(model, s.x_u, scan::Mode::deterministic);
    total += obj::psnr(display_image(pred, task), display_image(s.x, task), range);
  }
  return total / static_cast<double>(set.size());
}

namespace {

void prepare_out_dir(const fs::path& dir, bool force) {
  if (io::non_empty_dir(dir)) {
    if (!force) throw DataError(dir.string() + " already holds artifacts (use --force to overwrite)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

void require_task(const data::Manifest& m, const ExperimentConfig& cfg, const fs::path& data_dir) {
  if (m.task != cfg.task) {
    throw DataError("dataset " + data_dir.string() + " is for task " + acq::task_name(m.task) +
                    ", run is configured for " + acq::task_name(cfg.task));
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

std::string stem(const std::string& sample) {
  std::string s = sample;
  std::replace(s.begin(), s.end(), '/', '_');
  return s;
}

}  // namespace

TrainResult cmd_train(const ExperimentConfig& cfg, const fs::path& data_dir, const fs::path& out_dir,
                      bool force, const std::optional<fs::path>& resume) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const data::Manifest manifest = data::read_manifest(data_dir);
  require_task(manifest, cfg, data_dir);
  const auto train = data::load_split(data_dir, "train");
  const auto val = data::load_split(data_dir, "val");
  const double range = data::data_range(val.empty() ? train : val, cfg.task);

  net::MambaMIR model = build_model(cfg);
  AdamState adam = make_adam_state(model.parameters());
  long start = 0;
  if (resume) {
    LoadedCheckpoint ck = load_checkpoint(*resume);
    if (!(ck.config.model == cfg.model) || ck.config.seed != cfg.seed) {
      throw ConfigError("checkpoint " + resume->string() + " was produced by a different model/seed");
    }
    if (!ck.adam) throw DataError("checkpoint " + resume->string() + " carries no optimizer state");
    model = ck.model;
    model.asm_enabled = cfg.train.asm_masking;
    model.dropout_p = cfg.train.dropout_p;
    adam = *ck.adam;
    start = ck.step;
    fs::create_directories(out_dir);
  } else {
    prepare_out_dir(out_dir, force);
  }
  cfg.save((out_dir / "config.txt").string());

  TrainResult result;
  result.best_val_psnr = -std::numeric_limits<double>::infinity();
  result.best_checkpoint = out_dir / "best.ckpt";
  result.last_checkpoint = out_dir / "last.ckpt";
  const auto mode = resume ? std::ios::app : std::ios::trunc;
  std::ofstream log(out_dir / "train_log.csv", mode);
  std::ofstream vlog(out_dir / "val_log.csv", mode);
  if (!resume) {
    log << "step,loss,lr\n";
    vlog << "step,val_psnr\n";
  }

  const ParamList params = model.parameters();
  StepHooks hooks;
  hooks.on_step = [&](long step, double loss, double lr) {
    if (cfg.train.log_every > 0 && (step % cfg.train.log_every == 0 || step == cfg.train.steps))
      log << step << "," << io::fmt(loss) << "," << io::fmt(lr) << "\n";
  };
  hooks.on_validate = [&](long step) {
    const double v = mean_psnr(model, val, cfg.task, range);
    vlog << step << "," << io::fmt(v) << "\n";
    vlog.flush();
    if (v > result.best_val_psnr) {
      result.best_val_psnr = v;
      result.best_step = step;
      save_checkpoint(result.best_checkpoint, model, &adam, step, cfg);
    }
    save_checkpoint(result.last_checkpoint, model, &adam, step, cfg);
  };
  ForwardFn forward = [&model](const Tensor& x, scan::Mode m, Rng* rng) { return model.forward(x, m, rng); };
  result.losses = train_steps(forward, params, adam, cfg, train, start + 1, cfg.train.steps, hooks);
  if (cfg.train.val_every <= 0 || start >= cfg.train.steps) {
    save_checkpoint(result.last_checkpoint, model, &adam, std::max(start, cfg.train.steps), cfg);
  }
  log.close();
  vlog.close();
  write_run_manifest(out_dir, cfg, "train", seconds_since(t0));
  return result;
}

EvalMode parse_eval_mode(const std::string& s) {
  if (s == "deterministic") return EvalMode::deterministic;
  if (s == "mc") return EvalMode::mc;
  if (s == "both") return EvalMode::both;
  throw ConfigError("eval mode must be deterministic, mc or both");
}

std::vector<MetricRow> cmd_eval(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& out_dir,
                                EvalMode mode, std::size_t mc_samples, bool force, const std::string& split) {
  const auto t0 = std::chrono::steady_clock::now();
  LoadedCheckpoint ck = load_checkpoint(checkpoint);
  const ExperimentConfig& cfg = ck.config;
  require_task(data::read_manifest(data_dir), cfg, data_dir);
  if (mode != EvalMode::deterministic && mc_samples == 0) throw ConfigError("MC evaluation needs N >= 1");
  const auto set = data::load_split(data_dir, split);
  const double range = data::data_range(set, cfg.task);
  prepare_out_dir(out_dir, force);
  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "tensors");

  std::vector<std::string> methods = {"input"};
  if (mode != EvalMode::mc) methods.push_back("deterministic");
  if (mode != EvalMode::deterministic) methods.push_back("mc_mean");

  net::MambaMIR model = ck.model;
  model.asm_enabled = true;
  model.dropout_p = 0.0;
  const std::uint64_t mc_stream = derive_seed(cfg.seed, kMonteCarlo);

  std::vector<MetricRow> rows;
  std::ofstream scales(out_dir / "error_scales.csv");
  scales << "sample,method,max_abs_error\n";
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& s = set[i];
    const Tensor gt = display_image(s.x, cfg.task);
    for (const auto& method : methods) {
      Tensor pred;
      if (method == "input") {
        pred = s.x_u;
      } else if (method == "deterministic") {
        pred = reconstruct(model, s.x_u, scan::Mode::deterministic);
      } else {
        Shape batched = s.x_u.shape();
        batched.insert(batched.begin(), 1);
        auto r = unc::mc_estimate(model, ops::reshape(s.x_u, batched), mc_samples, derive_seed(mc_stream, i),
                                  unc::AsmMechanism{});
        pred = ops::reshape(r.mean, s.x_u.shape());
      }
      const Tensor img = display_image(pred, cfg.task);
      rows.push_back({s.id, method, obj::psnr(img, gt, range), obj::ssim(img, gt, range)});

      Tensor err({gt.dim(0), gt.dim(1)});
      auto e = err.mutable_data();
      double peak = 0.0;
      for (std::size_t k = 0; k < e.size(); ++k) {
        e[k] = std::abs(img.data()[k] - gt.data()[k]);
        peak = std::max(peak, e[k]);
      }
      const std::string base = stem(s.id) + "_" + method;
      io::write_pgm(out_dir / "images" / (base + "_error.pgm"), err, 0.0, peak);
      io::write_pgm(out_dir / "images" / (base + "_recon.pgm"), img, 0.0, range);
      scales << s.id << "," << method << "," << io::fmt(peak) << "\n";
      io::Container c;
      c.text = method;
      c.tensors = {{"recon", pred.detach()}, {"error", err}};
      io::write_container(out_dir / "tensors" / (base + ".bin"), c);
    }
  }
  scales.close();

  std::ofstream csv(out_dir / "metrics.csv");
  csv << "sample,task,method,psnr,ssim\n";
  for (const auto& r : rows)
    csv << r.sample << "," << acq::task_name(cfg.task) << "," << r.method << "," << io::fmt(r.psnr) << ","
        << io::fmt(r.ssim) << "\n";
  for (const auto& method : methods) {
    std::vector<double> p, q;
    for (const auto& r : rows)
      if (r.method == method) {
        p.push_back(r.psnr);
        q.push_back(r.ssim);
      }
    const auto [pm, ps] = mean_std(p);
    const auto [qm, qs] = mean_std(q);
    csv << "mean," << acq::task_name(cfg.task) << "," << method << "," << io::fmt(pm) << "," << io::fmt(qm) << "\n";
    csv << "std," << acq::task_name(cfg.task) << "," << method << "," << io::fmt(ps) << "," << io::fmt(qs) << "\n";
  }
  csv.close();
  write_run_manifest(out_dir, cfg, "eval", seconds_since(t0));
  return rows;
}

UncertaintyReport cmd_uncertainty(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& out_dir,
                                  std::size_t n, const std::string& mechanism, std::optional<double> dropout_p,
                                  bool force, const std::string& split) {
  const auto t0 = std::chrono::steady_clock::now();
  if (n < 2) throw ConfigError("uncertainty estimation needs N >= 2");
  if (mechanism != "asm" && mechanism != "dropout") throw ConfigError("mechanism must be asm or dropout");
  if (mechanism == "dropout" && !dropout_p) throw ConfigError("mechanism dropout requires a dropout rate");
  if (dropout_p && !(*dropout_p > 0 && *dropout_p < 1)) throw ConfigError("dropout rate must lie in (0, 1)");

  LoadedCheckpoint ck = load_checkpoint(checkpoint);
  const ExperimentConfig& cfg = ck.config;
  require_task(data::read_manifest(data_dir), cfg, data_dir);
  const auto set = data::load_split(data_dir, split);
  const double range = data::data_range(set, cfg.task);
  prepare_out_dir(out_dir, force);
  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "tensors");

  net::MambaMIR model = ck.model;
  model.asm_enabled = true;
  model.dropout_p = 0.0;
  const unc::Mechanism primary =
      mechanism == "asm" ? unc::Mechanism{unc::AsmMechanism{}} : unc::Mechanism{unc::DropoutMechanism{*dropout_p}};
  const std::uint64_t mc_stream = derive_seed(cfg.seed, kMonteCarlo);
  unc::McOptions opts;
  opts.magnitude = cfg.task == acq::Task::mri;

  UncertaintyReport report;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> table;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& s = set[i];
    const Tensor gt = display_image(s.x, cfg.task);
    const std::size_t h = gt.dim(0), w = gt.dim(1);
    Shape batched = s.x_u.shape();
    batched.insert(batched.begin(), 1);
    const Tensor input = ops::reshape(s.x_u, batched);
    auto as_map = [&](const Tensor& t) { return Tensor({h, w}, Buffer(t.data().begin(), t.data().end())); };
    auto record = [&](const std::string& method, const Tensor& img) {
      table[method].first.push_back(obj::psnr(img, gt, range));
      table[method].second.push_back(obj::ssim(img, gt, range));
    };

    record("control", display_image(reconstruct(model, s.x_u, scan::Mode::deterministic), cfg.task));
    const std::uint64_t seed = derive_seed(mc_stream, i);
    unc::UncertaintyResult r = unc::mc_estimate(model, input, n, seed, primary, opts);
    // For 1-channel tasks the mean is already the image.
    const Tensor mean = as_map(r.mean), var = as_map(r.variance);
    record(mechanism == "asm" ? "mc_asm" : "mc_dropout", mean);
    if (mechanism == "asm" && dropout_p) {
      auto rd = unc::mc_estimate(model, input, n, seed, unc::DropoutMechanism{*dropout_p}, opts);
      record("mc_dropout", as_map(rd.mean));
    } else if (mechanism == "dropout") {
      auto ra = unc::mc_estimate(model, input, n, seed, unc::AsmMechanism{}, opts);
      record("mc_asm", as_map(ra.mean));
    }

    Tensor err({h, w});
    auto e = err.mutable_data();
    for (std::size_t k = 0; k < e.size(); ++k) {
      const double d = mean.data()[k] - gt.data()[k];
      e[k] = d * d;
    }
    UncertaintyRow row;
    row.sample = s.id;
    row.psnr = obj::psnr(mean, gt, range);
    row.ssim = obj::ssim(mean, gt, range);
    double vs = 0.0;
    for (double v : var.data()) vs += v;
    row.mean_variance = vs / static_cast<double>(var.size());
    row.rho = unc::error_uncertainty_corr(var, err);
    report.rows.push_back(row);

    const std::string base = stem(s.id);
    const double vmax = *std::max_element(var.data().begin(), var.data().end());
    const double emax = *std::max_element(err.data().begin(), err.data().end());
    io::write_pgm(out_dir / "images" / (base + "_mean.pgm"), mean, 0.0, range);
    io::write_pgm(out_dir / "images" / (base + "_variance.pgm"), var, 0.0, vmax);
    io::write_pgm(out_dir / "images" / (base + "_sq_error.pgm"), err, 0.0, emax);
    io::Container c;
    c.text = mechanism;
    c.seed = seed;
    c.tensors = {{"mean", mean}, {"variance", var}, {"sq_error", err}};
    io::write_container(out_dir / "tensors" / (base + ".bin"), c);
  }

  std::ofstream csv(out_dir / "uncertainty.csv");
  csv << "sample,psnr,ssim,mean_variance,spearman_rho,note\n";
  for (const auto& r : report.rows)
    csv << r.sample << "," << io::fmt(r.psnr) << "," << io::fmt(r.ssim) << "," << io::fmt(r.mean_variance) << ","
        << (r.rho.defined() ? io::fmt(r.rho.rho) : "nan") << "," << r.rho.reason << "\n";
  csv.close();

  std::ofstream cmp(out_dir / "comparison.csv");
  cmp << "method,psnr_mean,psnr_std,ssim_mean,ssim_std\n";
  for (const char* method : {"control", "mc_asm", "mc_dropout"}) {
    auto it = table.find(method);
    if (it == table.end()) continue;
    const auto [pm, ps] = mean_std(it->second.first);
    const auto [qm, qs] = mean_std(it->second.second);
    report.comparison.push_back({method, pm, ps, qm, qs});
    cmp << method << "," << io::fmt(pm) << "," << io::fmt(ps) << "," << io::fmt(qm) << "," << io::fmt(qs) << "\n";
  }
  cmp.close();
  write_run_manifest(out_dir, cfg, "uncertainty", seconds_since(t0));
  return report;
}

void write_run_manifest(const fs::path& out_dir, const ExperimentConfig& cfg, const std::string& command,
                        double wall_seconds) {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["config_hash"] = io::hex64(io::fnv1a(cfg.serialize()));
  j["seed"] = cfg.seed;
  j["wall_seconds"] = wall_seconds;
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(out_dir))
    if (e.is_regular_file() && e.path().filename() != "run_manifest.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  auto& list = j["files"] = nlohmann::ordered_json::array();
  for (const auto& f : files) {
    const std::string rel = fs::relative(f, out_dir).generic_string();
    const std::string h = io::hex64(io::fnv1a_file(f));
    list.push_back({{"path", rel}, {"fnv1a", h}});
    all += rel + ":" + h + "\n";
  }
  j["content_hash"] = io::hex64(io::fnv1a(all));
  std::ofstream(out_dir / "run_manifest.json") << j.dump(2) << "\n";
}

}  // namespace mambamir::pipeline
