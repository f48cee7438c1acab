#include "tstcnn/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "tstcnn/fp.hpp"
#include "tstcnn/ops.hpp"
#include "tstcnn/rng.hpp"
#include "tstcnn/serialize.hpp"

namespace tstcnn::harness {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// shortest text that parses back to the same double
std::string fmt_exact(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty())
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return out;
}

double to_f64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
    return d;
  } catch (const std::logic_error&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + v + "'");
}

std::vector<std::string> split_commas(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(trim(part));
  return out;
}

template <typename Parse>
auto parse_enum(const std::string& key, const std::string& v, Parse parse) {
  try {
    return parse(v);
  } catch (const ConfigError& e) {
    throw ConfigError("key '" + key + "': " + e.what());
  }
}

struct KeyDef {
  const char* name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
  bool path = false;
};

#define TSTCNN_SIZE_KEY(field)                                                          \
  KeyDef {                                                                              \
    #field, [](RunConfig& c, const std::string& v) { c.field = to_u64(#field, v); },    \
        [](const RunConfig& c) { return std::to_string(c.field); }                       \
  }
#define TSTCNN_REAL_KEY(field)                                                   \
  KeyDef {                                                                       \
    #field, [](RunConfig& c, const std::string& v) { c.field = to_f64(#field, v); }, \
        [](const RunConfig& c) { return fmt_exact(c.field); }                     \
  }

const std::vector<KeyDef>& key_defs() {
  static const std::vector<KeyDef> defs = {
      {"model", [](RunConfig& c, const std::string& v) { c.model = parse_enum("model", v, parse_model_kind); },
       [](const RunConfig& c) { return to_string(c.model); }},
      {"blocks", [](RunConfig& c, const std::string& v) { c.blocks = parse_enum("blocks", v, parse_block_mode); },
       [](const RunConfig& c) { return to_string(c.blocks); }},
      TSTCNN_SIZE_KEY(n_blocks),
      {"filters",
       [](RunConfig& c, const std::string& v) {
         auto parts = split_commas(v);
         if (parts.size() != 3) throw ConfigError("key 'filters': expected three comma-separated counts");
         for (int i = 0; i < 3; ++i) c.filters[i] = to_u64("filters", parts[i]);
       },
       [](const RunConfig& c) {
         return std::to_string(c.filters[0]) + "," + std::to_string(c.filters[1]) + "," +
                std::to_string(c.filters[2]);
       }},
      TSTCNN_SIZE_KEY(fc_width),
      TSTCNN_SIZE_KEY(classes),
      TSTCNN_SIZE_KEY(clips_per_class),
      TSTCNN_SIZE_KEY(frames),
      TSTCNN_SIZE_KEY(height),
      TSTCNN_SIZE_KEY(width),
      TSTCNN_SIZE_KEY(jitter),
      {"ratios",
       [](RunConfig& c, const std::string& v) {
         auto parts = split_commas(v);
         if (parts.size() != 3) throw ConfigError("key 'ratios': expected train,val,test");
         for (int i = 0; i < 3; ++i) c.ratios[i] = to_f64("ratios", parts[i]);
       },
       [](const RunConfig& c) {
         return fmt_exact(c.ratios[0]) + "," + fmt_exact(c.ratios[1]) + "," + fmt_exact(c.ratios[2]);
       }},
      TSTCNN_SIZE_KEY(data_seed),
      {"dataset_dir", [](RunConfig& c, const std::string& v) { c.dataset_dir = v; },
       [](const RunConfig& c) { return c.dataset_dir; }, true},
      {"augment", [](RunConfig& c, const std::string& v) { c.augment = to_bool("augment", v); },
       [](const RunConfig& c) { return std::string(c.augment ? "true" : "false"); }},
      TSTCNN_REAL_KEY(max_rotation),
      TSTCNN_REAL_KEY(min_scale),
      TSTCNN_REAL_KEY(max_scale),
      TSTCNN_REAL_KEY(max_translation),
      TSTCNN_SIZE_KEY(epochs),
      TSTCNN_SIZE_KEY(batch_size),
      TSTCNN_SIZE_KEY(seed),
      TSTCNN_REAL_KEY(lr),
      TSTCNN_REAL_KEY(momentum),
      TSTCNN_REAL_KEY(lr_floor),
      TSTCNN_SIZE_KEY(patience),
      TSTCNN_SIZE_KEY(recent_window),
      TSTCNN_SIZE_KEY(previous_window),
      TSTCNN_REAL_KEY(emergency_ratio),
      TSTCNN_REAL_KEY(target_val_acc),
      {"out_dir", [](RunConfig& c, const std::string& v) { c.out_dir = v; },
       [](const RunConfig& c) { return c.out_dir; }, true},
      {"checkpoint", [](RunConfig& c, const std::string& v) { c.checkpoint = v; },
       [](const RunConfig& c) { return c.checkpoint; }, true},
      {"split", [](RunConfig& c, const std::string& v) { c.split = parse_enum("split", v, synth::parse_split); },
       [](const RunConfig& c) { return synth::to_string(c.split); }},
      TSTCNN_SIZE_KEY(clip),
      TSTCNN_SIZE_KEY(mask_channel),
      TSTCNN_REAL_KEY(threshold),
      TSTCNN_SIZE_KEY(n_seeds),
      {"compare_a",
       [](RunConfig& c, const std::string& v) { c.compare_a = parse_enum("compare_a", v, parse_block_mode); },
       [](const RunConfig& c) { return to_string(c.compare_a); }},
      {"compare_b",
       [](RunConfig& c, const std::string& v) { c.compare_b = parse_enum("compare_b", v, parse_block_mode); },
       [](const RunConfig& c) { return to_string(c.compare_b); }},
      {"verbose", [](RunConfig& c, const std::string& v) { c.verbose = to_bool("verbose", v); },
       [](const RunConfig& c) { return std::string(c.verbose ? "true" : "false"); }},
  };
  return defs;
}

#undef TSTCNN_SIZE_KEY
#undef TSTCNN_REAL_KEY

}  // namespace

// ---------------------------------------------------------------- config

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& d : key_defs()) out.emplace_back(d.name);
  return out;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& d : key_defs())
    if (key == d.name) return d.set(*this, value);
  throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig c;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    try {
      c.set_assignment(line);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  try {
    return parse(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string RunConfig::to_text(bool include_paths) const {
  std::string out;
  for (const auto& d : key_defs()) {
    if (d.path && !include_paths) continue;
    out += std::string(d.name) + "=" + d.get(*this) + "\n";
  }
  return out;
}

ModelConfig RunConfig::model_config() const {
  ModelConfig m;
  m.kind = model;
  m.frames = frames;
  m.height = height;
  m.width = width;
  m.filters = filters;
  m.fc_width = fc_width;
  m.n_classes = classes;
  m.block_mode = blocks;
  m.n_blocks = n_blocks;
  return m;
}

synth::DatasetSpec RunConfig::dataset_spec() const {
  synth::DatasetSpec s;
  s.n_classes = classes;
  s.per_class = clips_per_class;
  s.ratios = ratios;
  s.geometry = {frames, height, width};
  s.margin = jitter;
  s.seed = data_seed;
  return s;
}

SchedulerConfig RunConfig::scheduler_config() const {
  SchedulerConfig s;
  s.base_lr = lr;
  s.floor = lr_floor;
  s.patience = patience;
  s.recent_window = recent_window;
  s.previous_window = previous_window;
  s.emergency_ratio = emergency_ratio;
  return s;
}

synth::SpatialAugmentParams RunConfig::augment_params() const {
  return {max_rotation, min_scale, max_scale, max_translation};
}

void RunConfig::validate() const {
  model_config().validate();
  dataset_spec().validate();
  scheduler_config().validate();
  if (augment) augment_params().validate();
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (target_val_acc < 0.0 || target_val_acc > 1.0) throw ConfigError("target_val_acc must be in [0, 1]");
  if (threshold < 0.0 || threshold > 1.0) throw ConfigError("threshold must be in [0, 1]");
  if (n_seeds == 0) throw ConfigError("n_seeds must be >= 1");
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

// ---------------------------------------------------------------- metrics

std::string format_metrics_row(const EpochMetrics& m) {
  return std::to_string(m.epoch) + "," + fmt(m.train_loss) + "," + fmt(m.train_acc) + "," + fmt(m.val_acc) +
         "," + fmt(m.lr) + "," + to_string(m.action);
}

std::vector<EpochMetrics> read_metrics(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read metrics file '" + path + "'");
  std::string line;
  if (!std::getline(f, line) || line != kMetricsHeader) throw FormatError(path + ": bad metrics header");
  std::vector<EpochMetrics> out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto parts = split_commas(line);
    if (parts.size() != 6) throw FormatError(path + ": bad metrics row '" + line + "'");
    EpochMetrics m;
    m.epoch = to_u64("epoch", parts[0]);
    m.train_loss = std::stod(parts[1]);
    m.train_acc = std::stod(parts[2]);
    m.val_acc = std::stod(parts[3]);
    m.lr = std::stod(parts[4]);
    m.action = parse_schedule_action(parts[5]);
    out.push_back(m);
  }
  return out;
}

// ---------------------------------------------------------------- data

const std::vector<synth::Clip>& DatasetClips::of(synth::Split s) const {
  switch (s) {
    case synth::Split::train: return train;
    case synth::Split::val: return val;
    case synth::Split::test: return test;
  }
  return train;
}

DatasetClips load_dataset(const RunConfig& config, bool include_test) {
  DatasetClips d;
  d.spec = config.dataset_spec();
  d.spec.validate();
  synth::DatasetIndex index;
  if (!config.dataset_dir.empty()) {
    auto loaded = synth::read_manifest((fs::path(config.dataset_dir) / "manifest.csv").string());
    const auto& s = loaded.spec;
    if (s.n_classes != d.spec.n_classes || !(s.geometry == d.spec.geometry) || s.margin != d.spec.margin)
      throw ConfigError("dataset in '" + config.dataset_dir + "' does not match the configured classes, " +
                        "geometry or jitter");
    d.spec = s;
    index = loaded.index;
  } else {
    index = synth::build_dataset(d.spec.n_classes, d.spec.per_class, d.spec.ratios, d.spec.seed);
  }
  for (const auto& r : index.records) {
    if (r.split == synth::Split::test && !include_test) continue;
    synth::Clip clip;
    if (!config.dataset_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "clip_%06zu.bin", r.clip_id);
      clip = synth::read_clip((fs::path(config.dataset_dir) / name).string());
    } else {
      clip = synth::generate_record(d.spec, r);
    }
    switch (r.split) {
      case synth::Split::train: d.train.push_back(std::move(clip)); break;
      case synth::Split::val: d.val.push_back(std::move(clip)); break;
      case synth::Split::test: d.test.push_back(std::move(clip)); break;
    }
  }
  return d;
}

ModelInput<float> make_batch(const std::vector<const synth::Clip*>& clips, ModelKind kind) {
  if (clips.empty()) throw ContractError("empty batch");
  const std::size_t B = clips.size();
  const auto& first = *clips.front();
  const std::size_t T = first.rgb.dim(1), H = first.rgb.dim(2), W = first.rgb.dim(3);
  auto stack = [&](bool rgb, std::size_t channels) {
    Tensor<float> out(Shape{B, channels, T, H, W});
    auto dst = out.mutable_data();
    const std::size_t per = channels * T * H * W;
    for (std::size_t b = 0; b < B; ++b) {
      auto src = rgb ? clips[b]->rgb.data() : clips[b]->flow.data();
      if (src.size() != per) throw DimensionError("batch clips differ in geometry");
      std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(b * per));
    }
    return out;
  };
  ModelInput<float> in;
  if (kind != ModelKind::flow) in.rgb = stack(true, 3);
  if (kind != ModelKind::rgb) in.flow = stack(false, 2);
  return in;
}

namespace {

std::size_t argmax_row(std::span<const float> logits, std::size_t row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < n; ++k)
    if (logits[row * n + k] > logits[row * n + best]) best = k;
  return best;
}

synth::Clip centered(const synth::Clip& source, std::size_t frames) {
  const std::size_t S = source.rgb.dim(1);
  if (S == frames) return source;
  return synth::extract_window(source, (S - frames) / 2, frames);
}

}  // namespace

EvalReport evaluate(Network<float>& net, const std::vector<synth::Clip>& clips, std::size_t frames,
                    std::size_t batch_size) {
  FlushDenormals ftz;
  const std::size_t n_classes = net.config().n_classes;
  EvalReport r;
  r.confusion.assign(n_classes, std::vector<std::size_t>(n_classes, 0));
  for (std::size_t start = 0; start < clips.size(); start += batch_size) {
    const std::size_t end = std::min(clips.size(), start + batch_size);
    std::vector<synth::Clip> windows;
    for (std::size_t i = start; i < end; ++i) windows.push_back(centered(clips[i], frames));
    std::vector<const synth::Clip*> ptrs;
    for (const auto& w : windows) ptrs.push_back(&w);
    Tape<float> tape(false);
    auto out = net.forward(tape, make_batch(ptrs, net.config().kind), nn::Mode::eval);
    auto logits = out.logits.data();
    for (std::size_t b = 0; b < ptrs.size(); ++b) {
      const auto pred = argmax_row(logits, b, n_classes);
      const auto truth = static_cast<std::size_t>(ptrs[b]->label);
      if (truth >= n_classes) throw ConfigError("clip label outside the model's classes");
      r.confusion[truth][pred] += 1;
      r.correct += pred == truth;
      r.total += 1;
    }
  }
  r.accuracy = r.total ? static_cast<double>(r.correct) / static_cast<double>(r.total) : 0.0;
  return r;
}

// ---------------------------------------------------------------- train

std::optional<std::size_t> TrainResult::epochs_to(double threshold) const {
  for (const auto& m : metrics)
    if (m.val_acc >= threshold) return m.epoch;
  return std::nullopt;
}

TrainResult train(const RunConfig& config) {
  config.validate();
  return train(config, load_dataset(config, false));
}

TrainResult train(const RunConfig& config, const DatasetClips& data) {
  config.validate();
  FlushDenormals ftz;
  if (data.train.empty() || data.val.empty()) throw ConfigError("training needs non-empty train and val splits");

  const fs::path out(config.out_dir);
  fs::create_directories(out);
  const std::string config_text = config.to_text(false);
  write_file_atomic((out / "config.txt").string(), config.to_text(true));

  Network<float> net(config.model_config());
  net.initialize(config.seed);
  const auto params = net.parameters();
  const std::string manifest = net.manifest();
  auto sgd = SgdState<float>::make(params, config.lr, config.momentum);
  Scheduler scheduler(config.scheduler_config());

  std::ofstream metrics(out / "metrics.csv", std::ios::trunc);
  std::ofstream events(out / "checkpoints.log", std::ios::trunc);
  if (!metrics || !events) throw std::runtime_error("cannot write into '" + config.out_dir + "'");
  metrics << kMetricsHeader << "\n" << std::flush;

  Checkpoint best = capture(manifest, net.tensors(), sgd, scheduler, 0, config_text);
  best.save((out / "best.ckpt").string());
  best.save((out / "last.ckpt").string());
  events << "epoch 0 save initial\n" << std::flush;

  TrainResult result;
  const auto aug = config.augment_params();
  const std::size_t n_classes = config.classes;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order(data.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 shuffle_rng(derive_seed(config.seed, {epoch, 1}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    const double epoch_lr = sgd.lr;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<synth::Clip> batch;
      std::vector<int> labels;
      for (std::size_t i = start; i < end; ++i) {
        const auto& src = data.train[order[i]];
        const std::uint64_t key = derive_seed(config.seed, {epoch, src.seed});
        synth::Clip c = config.augment
                            ? synth::augment_spatial(synth::augment_temporal(src, config.frames, config.jitter,
                                                                             derive_seed(key, {2})),
                                                     aug, derive_seed(key, {3}))
                            : centered(src, config.frames);
        labels.push_back(c.label);
        batch.push_back(std::move(c));
      }
      std::vector<const synth::Clip*> ptrs;
      for (const auto& c : batch) ptrs.push_back(&c);

      Tape<float> tape;
      auto output = net.forward(tape, make_batch(ptrs, config.model), nn::Mode::train);
      auto loss = nn::softmax_cross_entropy(tape, output.logits, std::span<const int>(labels));
      zero_grad(params);
      tape.backward(loss);
      nesterov_step(params, sgd);

      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(ptrs.size());
      auto logits = output.logits.data();
      for (std::size_t b = 0; b < ptrs.size(); ++b)
        correct += argmax_row(logits, b, n_classes) == static_cast<std::size_t>(labels[b]);
    }
    zero_grad(params);

    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(order.size());
    m.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
    m.val_acc = evaluate(net, data.val, config.frames, config.batch_size).accuracy;
    m.lr = epoch_lr;

    const auto decision = scheduler.update(m.train_loss, m.val_acc);
    m.action = decision.action;
    if (decision.new_best) {
      best = capture(manifest, net.tensors(), sgd, scheduler, epoch, config_text);
      best.save((out / "best.ckpt").string());
      result.best_epoch = epoch;
      result.best_val_acc = m.val_acc;
      events << "epoch " << epoch << " save best val_acc=" << fmt(m.val_acc) << "\n";
    }
    if (decision.action != ScheduleAction::continue_training) {
      restore(best, manifest, net.tensors(), &sgd);
      events << "epoch " << epoch << " " << to_string(decision.action) << " restore epoch " << best.epoch
             << " lr " << fmt(sgd.lr) << " -> " << fmt(decision.lr) << "\n";
    }
    sgd.lr = decision.lr;
    events << std::flush;

    capture(manifest, net.tensors(), sgd, scheduler, epoch, config_text).save((out / "last.ckpt").string());
    metrics << format_metrics_row(m) << "\n" << std::flush;
    result.metrics.push_back(m);
    if (config.verbose) {
      std::printf("epoch %zu loss %.4f train_acc %.3f val_acc %.3f lr %g %s\n", epoch, m.train_loss, m.train_acc,
                  m.val_acc, m.lr, to_string(m.action).c_str());
      std::fflush(stdout);
    }
    if (config.target_val_acc > 0.0 && m.val_acc >= config.target_val_acc) break;
  }
  return result;
}

// ---------------------------------------------------------------- eval / masks

LoadedModel load_model(const std::string& checkpoint_path) {
  auto ckpt = Checkpoint::load(checkpoint_path);
  RunConfig cfg;
  try {
    cfg = RunConfig::parse(ckpt.config_text);
  } catch (const ConfigError& e) {
    throw CheckpointError("checkpoint '" + checkpoint_path + "' carries an unreadable config: " + e.what());
  }
  Network<float> net(cfg.model_config());
  restore(ckpt, net.manifest(), net.tensors(), nullptr);
  return {std::move(cfg), std::move(ckpt), std::move(net)};
}

namespace {

/// Data settings come from the checkpoint, locations from the invocation.
RunConfig data_config(const RunConfig& invocation, const RunConfig& trained) {
  RunConfig c = trained;
  c.dataset_dir = invocation.dataset_dir;
  c.out_dir = invocation.out_dir;
  c.split = invocation.split;
  c.clip = invocation.clip;
  c.mask_channel = invocation.mask_channel;
  return c;
}

}  // namespace

EvalReport cmd_eval(const RunConfig& config) {
  if (config.checkpoint.empty()) throw ConfigError("eval needs checkpoint=<path>");
  auto model = load_model(config.checkpoint);
  const auto cfg = data_config(config, model.config);
  const auto data = load_dataset(cfg, config.split == synth::Split::test);
  const auto report = evaluate(model.net, data.of(config.split), cfg.frames, cfg.batch_size);

  std::ostringstream os;
  os << "split " << synth::to_string(config.split) << "\n"
     << "checkpoint_epoch " << model.checkpoint.epoch << "\n"
     << "accuracy " << fmt(report.accuracy) << " (" << report.correct << "/" << report.total << ")\n"
     << "confusion (rows = true class, columns = predicted)\n";
  for (const auto& row : report.confusion) {
    for (std::size_t k = 0; k < row.size(); ++k) os << (k ? " " : "") << row[k];
    os << "\n";
  }
  fs::create_directories(config.out_dir);
  write_file_atomic((fs::path(config.out_dir) / "eval.txt").string(), os.str());
  if (config.verbose) std::cout << os.str();
  return report;
}

std::vector<std::uint8_t> normalize_to_bytes(std::span<const float> plane) {
  std::vector<std::uint8_t> out(plane.size(), 0);
  if (plane.empty()) return out;
  const auto [lo, hi] = std::minmax_element(plane.begin(), plane.end());
  const double mn = *lo, mx = *hi;
  if (!(mx > mn)) return out;
  for (std::size_t i = 0; i < plane.size(); ++i)
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (plane[i] - mn) / (mx - mn)));
  return out;
}

void write_pgm(const std::string& path, std::size_t height, std::size_t width,
               std::span<const std::uint8_t> pixels) {
  if (pixels.size() != height * width) throw DimensionError("pgm pixel count does not match extents");
  std::string bytes = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  bytes.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
  write_file_atomic(path, bytes);
}

MaskExport cmd_export_masks(const RunConfig& config) {
  if (config.checkpoint.empty()) throw ConfigError("export-masks needs checkpoint=<path>");
  auto model = load_model(config.checkpoint);
  if (model.config.blocks != BlockMode::attention || model.config.n_blocks == 0)
    throw ConfigError("the model in '" + config.checkpoint + "' has no attention blocks");
  const auto cfg = data_config(config, model.config);
  const auto data = load_dataset(cfg, true);

  const synth::Clip* chosen = nullptr;
  const auto index = synth::build_dataset(cfg.classes, cfg.clips_per_class, cfg.ratios, cfg.data_seed);
  for (const auto& r : index.records)
    if (r.clip_id == config.clip) {
      const auto& pool = data.of(r.split);
      for (const auto& c : pool)
        if (c.seed == r.seed) chosen = &c;
    }
  if (!chosen) throw ConfigError("clip " + std::to_string(config.clip) + " is not in the dataset");

  const auto window = centered(*chosen, cfg.frames);
  FlushDenormals ftz;
  Tape<float> tape(false);
  auto out = model.net.forward(tape, make_batch({&window}, cfg.model), nn::Mode::eval);

  fs::create_directories(config.out_dir);
  MaskExport ex;
  ex.min = std::numeric_limits<double>::infinity();
  ex.max = -std::numeric_limits<double>::infinity();
  for (const auto& dump : out.masks) {
    const auto& mask = dump.mask;  // (1, N, T, H, W)
    const std::size_t N = mask.dim(1), T = mask.dim(2), H = mask.dim(3), W = mask.dim(4);
    if (config.mask_channel >= N)
      throw ConfigError("mask_channel " + std::to_string(config.mask_channel) + " >= block width " +
                        std::to_string(N));
    const std::string stem = "mask_" + dump.branch + "_block" + std::to_string(dump.block_index);
    Tensor<float> raw(Shape{N, T, H, W}, std::vector<float>(mask.data().begin(), mask.data().end()));
    const auto raw_path = (fs::path(config.out_dir) / (stem + ".tensor")).string();
    save_tensor(raw_path, raw);
    ex.files.push_back(raw_path);
    for (float v : mask.data()) {
      ex.min = std::min(ex.min, static_cast<double>(v));
      ex.max = std::max(ex.max, static_cast<double>(v));
    }
    for (std::size_t t = 0; t < T; ++t) {
      auto plane = mask.data().subspan((config.mask_channel * T + t) * H * W, H * W);
      char name[96];
      std::snprintf(name, sizeof name, "%s_c%zu_t%02zu.pgm", stem.c_str(), config.mask_channel, t);
      const auto path = (fs::path(config.out_dir) / name).string();
      write_pgm(path, H, W, normalize_to_bytes(plane));
      ex.files.push_back(path);
    }
  }
  std::ostringstream os;
  os << "blocks " << out.masks.size() << "\nmask_min " << fmt(ex.min) << "\nmask_max " << fmt(ex.max) << "\n";
  write_file_atomic((fs::path(config.out_dir) / "masks.txt").string(), os.str());
  if (config.verbose) std::cout << os.str();
  return ex;
}

// ---------------------------------------------------------------- compare

double median(std::vector<double> values) {
  if (values.empty()) throw ContractError("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

CompareReport cmd_compare(const RunConfig& config) {
  config.validate();
  const auto data = load_dataset(config, false);
  CompareReport report;
  std::vector<double> a, b;
  const std::size_t blocks = config.n_blocks ? config.n_blocks : 1;
  for (std::size_t s = 0; s < config.n_seeds; ++s) {
    for (int which = 0; which < 2; ++which) {
      RunConfig run = config;
      run.blocks = which == 0 ? config.compare_a : config.compare_b;
      run.n_blocks = run.blocks == BlockMode::none ? 0 : blocks;
      run.seed = config.seed + s;
      run.target_val_acc = config.threshold;
      run.out_dir = (fs::path(config.out_dir) / ("seed" + std::to_string(run.seed) + "_" +
                                                 (which == 0 ? "a_" : "b_") + to_string(run.blocks)))
                        .string();
      const auto result = train(run, data);
      CompareRow row{run.seed, run.blocks, result.epochs_to(config.threshold), result.best_val_acc};
      const double e = row.epochs ? static_cast<double>(*row.epochs) : std::numeric_limits<double>::infinity();
      (which == 0 ? a : b).push_back(e);
      report.rows.push_back(row);
    }
  }
  report.median_a = median(a);
  report.median_b = median(b);

  std::ostringstream csv, txt;
  csv << "seed,side,blocks,epochs_to_threshold,best_val_acc\n";
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const auto& r = report.rows[i];
    csv << r.seed << "," << (i % 2 ? "b" : "a") << "," << to_string(r.mode) << ","
        << (r.epochs ? std::to_string(*r.epochs) : std::string("inf")) << "," << fmt(r.best_val_acc) << "\n";
  }
  const double diff = report.median_a - report.median_b;
  txt << "threshold " << fmt(config.threshold) << " budget " << config.epochs << " epochs, " << config.n_seeds
      << " seeds\n"
      << "median a (" << to_string(config.compare_a) << ") " << fmt(report.median_a) << "\n"
      << "median b (" << to_string(config.compare_b) << ") " << fmt(report.median_b) << "\n"
      << "difference a - b " << (std::isnan(diff) ? std::string("undefined") : fmt(diff)) << "\n"
      << "a " << (report.median_a < report.median_b ? "faster" : report.median_a == report.median_b ? "equal" : "slower")
      << "\n";
  report.text = txt.str();
  fs::create_directories(config.out_dir);
  write_file_atomic((fs::path(config.out_dir) / "compare.csv").string(), csv.str());
  write_file_atomic((fs::path(config.out_dir) / "compare.txt").string(), report.text);
  if (config.verbose) std::cout << csv.str() << report.text;
  return report;
}

void cmd_gen_data(const RunConfig& config) {
  const auto spec = config.dataset_spec();
  const std::string dir = config.dataset_dir.empty() ? config.out_dir : config.dataset_dir;
  synth::write_dataset(dir, spec);
  if (config.verbose)
    std::cout << "wrote " << spec.n_classes * spec.per_class << " clips and manifest.csv to " << dir << "\n";
}

}  // namespace tstcnn::harness
