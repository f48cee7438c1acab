#include "tstcnn/optim.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "tstcnn/serialize.hpp"

namespace tstcnn {

template <typename T>
SgdState<T> SgdState<T>::make(const TensorList<T>& params, double lr, double momentum) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
  SgdState s;
  s.lr = lr;
  s.momentum = momentum;
  for (const auto& p : params)
    if (p.learnable) s.velocity.push_back({p.path, Tensor<T>(p.tensor.shape()), true, p.fully_connected});
  return s;
}

template <typename T>
void nesterov_step(const TensorList<T>& params, SgdState<T>& state) {
  std::vector<const NamedTensor<T>*> learnable;
  for (const auto& p : params)
    if (p.learnable) learnable.push_back(&p);
  if (learnable.size() != state.velocity.size())
    throw ContractError("optimizer holds " + std::to_string(state.velocity.size()) +
                        " velocities for " + std::to_string(learnable.size()) + " parameters");
  for (std::size_t i = 0; i < learnable.size(); ++i) {
    if (!learnable[i]->tensor.has_grad())
      throw ContractError("parameter '" + learnable[i]->path + "' has no gradient");
    if (learnable[i]->tensor.shape() != state.velocity[i].tensor.shape())
      throw ContractError("velocity shape mismatch for '" + learnable[i]->path + "'");
  }
  const T mu = static_cast<T>(state.momentum);
  const T lr = static_cast<T>(state.lr);
  for (std::size_t i = 0; i < learnable.size(); ++i) {
    Tensor<T> p = learnable[i]->tensor;
    auto theta = p.mutable_data();
    auto g = p.grad();
    auto v = state.velocity[i].tensor.mutable_data();
    for (std::size_t k = 0; k < theta.size(); ++k) {
      v[k] = mu * v[k] - lr * g[k];
      theta[k] += mu * v[k] - lr * g[k];
    }
  }
}

template <typename T>
void zero_grad(const TensorList<T>& params) {
  for (const auto& p : params) p.tensor.clear_grad();
}

template struct SgdState<float>;
template struct SgdState<double>;
template void nesterov_step(const TensorList<float>&, SgdState<float>&);
template void nesterov_step(const TensorList<double>&, SgdState<double>&);
template void zero_grad(const TensorList<float>&);
template void zero_grad(const TensorList<double>&);

// ---------------------------------------------------------------- scheduler

std::string to_string(ScheduleAction a) {
  switch (a) {
    case ScheduleAction::continue_training: return "continue";
    case ScheduleAction::reload_decay: return "reload_decay";
    case ScheduleAction::reload_reset: return "reload_reset";
    case ScheduleAction::emergency_reload: return "emergency_reload";
  }
  return "?";
}

ScheduleAction parse_schedule_action(const std::string& s) {
  for (auto a : {ScheduleAction::continue_training, ScheduleAction::reload_decay,
                 ScheduleAction::reload_reset, ScheduleAction::emergency_reload})
    if (to_string(a) == s) return a;
  throw FormatError("unknown scheduler action '" + s + "'");
}

void SchedulerConfig::validate() const {
  if (!(base_lr > 0.0)) throw ConfigError("base learning rate must be > 0");
  if (!(floor > 0.0) || floor > base_lr) throw ConfigError("lr floor must be in (0, base_lr]");
  if (!(decay > 1.0)) throw ConfigError("lr decay factor must be > 1");
  if (recent_window == 0 || previous_window == 0) throw ConfigError("plateau windows must be >= 1");
  if (emergency_ratio < 0.0 || emergency_ratio > 1.0)
    throw ConfigError("emergency ratio must be in [0, 1]");
}

std::size_t SchedulerConfig::max_level() const {
  std::size_t level = 0;
  while (base_lr / std::pow(decay, static_cast<double>(level + 1)) >= floor * (1.0 - 1e-9)) ++level;
  return level;
}

Scheduler::Scheduler(SchedulerConfig config) : config_(config) { config_.validate(); }

double Scheduler::lr_at(std::size_t level) const {
  return config_.base_lr / std::pow(config_.decay, static_cast<double>(level));
}

bool Scheduler::plateau_detected() const {
  const std::size_t r = config_.recent_window, p = config_.previous_window;
  const auto& w = state_.loss_window;
  if (w.size() < r + p)
    throw ContractError("plateau test needs " + std::to_string(r + p) + " epochs of loss history, have " +
                        std::to_string(w.size()));
  const auto end = w.end();
  const double recent = std::accumulate(end - r, end, 0.0) / static_cast<double>(r);
  const double previous = std::accumulate(end - r - p, end - r, 0.0) / static_cast<double>(p);
  return recent > previous;
}

void Scheduler::after_reload(std::size_t new_level) {
  state_.level = new_level;
  state_.loss_window.clear();
  state_.epochs_since_lr_change = 0;
}

ScheduleDecision Scheduler::update(double epoch_loss, double epoch_val_acc) {
  ++state_.epoch;
  state_.loss_window.push_back(epoch_loss);
  state_.val_history.push_back(epoch_val_acc);
  ++state_.epochs_since_lr_change;

  ScheduleDecision d;
  const std::size_t top = config_.max_level();
  const std::size_t stepped = state_.level < top ? state_.level + 1 : 0;

  if (state_.best_acc && epoch_val_acc < config_.emergency_ratio * *state_.best_acc) {
    d.action = ScheduleAction::emergency_reload;
    after_reload(stepped);
    d.lr = lr();
    return d;
  }
  if (!state_.best_acc || epoch_val_acc > *state_.best_acc) {
    state_.best_acc = epoch_val_acc;
    state_.best_epoch = state_.epoch;
    d.new_best = true;
  }
  if (state_.loss_window.size() >= config_.recent_window + config_.previous_window &&
      state_.epochs_since_lr_change >= config_.patience && plateau_detected()) {
    d.action = state_.level < top ? ScheduleAction::reload_decay : ScheduleAction::reload_reset;
    after_reload(stepped);
  }
  d.lr = lr();
  return d;
}

namespace {

void write_doubles(std::ostream& os, const std::vector<double>& v) {
  write_u64(os, v.size());
  for (double x : v) write_f64(os, x);
}

std::vector<double> read_doubles(std::istream& is) {
  const auto n = read_u64(is);
  if (n > (1u << 26)) throw FormatError("implausible history length");
  std::vector<double> v(n);
  for (auto& x : v) x = read_f64(is);
  return v;
}

}  // namespace

void Scheduler::write(std::ostream& os) const {
  write_f64(os, config_.base_lr);
  write_f64(os, config_.floor);
  write_f64(os, config_.decay);
  write_u64(os, config_.patience);
  write_u64(os, config_.recent_window);
  write_u64(os, config_.previous_window);
  write_f64(os, config_.emergency_ratio);
  write_u64(os, state_.level);
  write_doubles(os, state_.loss_window);
  write_doubles(os, state_.val_history);
  write_u64(os, state_.epochs_since_lr_change);
  write_u32(os, state_.best_acc ? 1 : 0);
  write_f64(os, state_.best_acc.value_or(0.0));
  write_u64(os, state_.best_epoch);
  write_u64(os, state_.epoch);
}

Scheduler Scheduler::read(std::istream& is) {
  SchedulerConfig c;
  c.base_lr = read_f64(is);
  c.floor = read_f64(is);
  c.decay = read_f64(is);
  c.patience = read_u64(is);
  c.recent_window = read_u64(is);
  c.previous_window = read_u64(is);
  c.emergency_ratio = read_f64(is);
  Scheduler s(c);
  s.state_.level = read_u64(is);
  s.state_.loss_window = read_doubles(is);
  s.state_.val_history = read_doubles(is);
  s.state_.epochs_since_lr_change = read_u64(is);
  const bool has_best = read_u32(is) != 0;
  const double best = read_f64(is);
  if (has_best) s.state_.best_acc = best;
  s.state_.best_epoch = read_u64(is);
  s.state_.epoch = read_u64(is);
  if (s.state_.level > c.max_level()) throw FormatError("scheduler level out of range");
  return s;
}

// ---------------------------------------------------------------- checkpoint

namespace {

void write_list(std::ostream& os, const TensorList<float>& list) {
  write_u64(os, list.size());
  for (const auto& e : list) {
    write_string(os, e.path);
    write_tensor(os, e.tensor);
  }
}

TensorList<float> read_list(std::istream& is) {
  const auto n = read_u64(is);
  if (n > (1u << 20)) throw FormatError("implausible tensor count");
  TensorList<float> out;
  out.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    auto path = read_string(is);
    out.push_back({std::move(path), read_tensor<float>(is)});
  }
  return out;
}

TensorList<float> deep_copy(const TensorList<float>& list) {
  TensorList<float> out;
  for (const auto& e : list) {
    auto t = e.tensor.clone();
    t.set_requires_grad(false);
    out.push_back({e.path, t, e.learnable, e.fully_connected});
  }
  return out;
}

void copy_into(const TensorList<float>& src, const TensorList<float>& dst, const char* what) {
  std::map<std::string, const Tensor<float>*> by_path;
  for (const auto& e : src) by_path[e.path] = &e.tensor;
  for (const auto& e : dst) {
    auto it = by_path.find(e.path);
    if (it == by_path.end())
      throw CheckpointError(std::string("checkpoint has no ") + what + " '" + e.path + "'");
    if (it->second->shape() != e.tensor.shape())
      throw CheckpointError(std::string("checkpoint ") + what + " '" + e.path + "' has shape " +
                            to_string(it->second->shape()) + ", expected " + to_string(e.tensor.shape()));
  }
  for (const auto& e : dst) {
    auto from = by_path.at(e.path)->data();
    auto to = Tensor<float>(e.tensor).mutable_data();
    std::copy(from.begin(), from.end(), to.begin());
  }
}

}  // namespace

std::string Checkpoint::to_bytes() const {
  std::ostringstream os(std::ios::binary);
  os.write(kMagic, sizeof kMagic);
  write_u32(os, kVersion);
  write_string(os, manifest);
  write_string(os, config_text);
  write_u64(os, epoch);
  write_list(os, tensors);
  write_f64(os, momentum);
  write_list(os, velocity);
  scheduler.write(os);
  return os.str();
}

Checkpoint Checkpoint::from_bytes(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  char magic[sizeof kMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw CheckpointError("not a checkpoint (bad magic)");
  try {
    const auto version = read_u32(is);
    if (version != kVersion)
      throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint c;
    c.manifest = read_string(is);
    c.config_text = read_string(is);
    c.epoch = read_u64(is);
    c.tensors = read_list(is);
    c.momentum = read_f64(is);
    c.velocity = read_list(is);
    c.scheduler = Scheduler::read(is);
    if (is.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes in checkpoint");
    return c;
  } catch (const FormatError& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  }
}

void Checkpoint::save(const std::string& path) const { write_file_atomic(path, to_bytes()); }

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return from_bytes(ss.str());
}

Checkpoint capture(const std::string& manifest, const TensorList<float>& tensors,
                   const SgdState<float>& sgd, const Scheduler& scheduler, std::uint64_t epoch,
                   std::string config_text) {
  Checkpoint c;
  c.manifest = manifest;
  c.config_text = std::move(config_text);
  c.epoch = epoch;
  c.tensors = deep_copy(tensors);
  c.velocity = deep_copy(sgd.velocity);
  c.momentum = sgd.momentum;
  c.scheduler = scheduler;
  return c;
}

void restore(const Checkpoint& ckpt, const std::string& manifest, const TensorList<float>& tensors,
             SgdState<float>* sgd) {
  if (ckpt.manifest != manifest)
    throw CheckpointError("checkpoint architecture does not match the network");
  copy_into(ckpt.tensors, tensors, "tensor");
  if (sgd) copy_into(ckpt.velocity, sgd->velocity, "velocity");
}

}  // namespace tstcnn
