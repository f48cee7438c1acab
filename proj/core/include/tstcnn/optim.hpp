#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "tstcnn/blocks.hpp"

namespace tstcnn {

/// Nesterov-momentum SGD state. velocity[i] mirrors params[i].
template <typename T>
struct SgdState {
  TensorList<T> velocity;  // paths equal the parameter paths
  double momentum = 0.9;
  double lr = 0.01;

  static SgdState make(const TensorList<T>& params, double lr, double momentum);
};

/**
 * One update over every learnable entry of `params`:
 *
 *   v <- mu * v - lr * g
 *   theta <- theta + mu * v - lr * g
 *
 * Throws ContractError naming the first parameter with no gradient, before
 * anything is modified.
 */
template <typename T>
void nesterov_step(const TensorList<T>& params, SgdState<T>& state);

/// Clears the gradient slot of every entry.
template <typename T>
void zero_grad(const TensorList<T>& params);

enum class ScheduleAction { continue_training, reload_decay, reload_reset, emergency_reload };

std::string to_string(ScheduleAction a);
ScheduleAction parse_schedule_action(const std::string& s);

struct SchedulerConfig {
  double base_lr = 0.01;
  double floor = 1e-5;
  double decay = 10.0;
  std::size_t patience = 50;
  std::size_t recent_window = 25;
  std::size_t previous_window = 35;
  double emergency_ratio = 0.7;

  void validate() const;
  /// Number of decays from base_lr before the floor is reached (3 for the
  /// defaults).
  std::size_t max_level() const;
};

struct ScheduleDecision {
  ScheduleAction action = ScheduleAction::continue_training;
  bool new_best = false;
  double lr = 0.0;  // learning rate to use from the next epoch on
};

/**
 * Plateau rescheduler with best-state reload.
 *
 * Each update() appends the epoch's mean training loss and validation
 * accuracy, then decides in this order:
 *
 *  1. emergency_reload if val_acc < emergency_ratio * best (bypasses
 *     patience); the learning rate takes one step down, or resets to
 *     base_lr when already at the floor.
 *  2. best is raised when val_acc exceeds it.
 *  3. with >= recent+previous losses recorded since the last reload and
 *     >= patience epochs since the last lr change, a plateau is
 *     mean(last recent) > mean(previous before that); it yields
 *     reload_decay, or reload_reset at the floor.
 *
 * Any reload clears the loss window and the patience counter. The learning
 * rate is always base_lr / decay^level, so its values are exact.
 */
class Scheduler {
 public:
  struct State {
    std::size_t level = 0;
    std::vector<double> loss_window;  // since the last reload
    std::vector<double> val_history;  // whole run
    std::size_t epochs_since_lr_change = 0;
    std::optional<double> best_acc;
    std::size_t best_epoch = 0;  // 1-based; 0 = before any epoch
    std::size_t epoch = 0;       // updates so far
    bool operator==(const State&) const = default;
  };

  explicit Scheduler(SchedulerConfig config = {});

  ScheduleDecision update(double epoch_loss, double epoch_val_acc);

  /// Plateau test on the current window; ContractError if it is shorter
  /// than recent + previous.
  bool plateau_detected() const;

  double lr() const { return lr_at(state_.level); }
  double lr_at(std::size_t level) const;
  const SchedulerConfig& config() const { return config_; }
  const State& state() const { return state_; }
  void set_state(State s) { state_ = std::move(s); }

  void write(std::ostream& os) const;
  static Scheduler read(std::istream& is);

 private:
  void after_reload(std::size_t new_level);

  SchedulerConfig config_;
  State state_;
};

/// Incompatible or unreadable checkpoint.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/**
 * Snapshot of a training run: every network tensor (parameters and BN
 * running statistics), the optimizer velocities and the scheduler.
 *
 * File layout: magic "TSTCKPT" + NUL, u32 version, manifest, config text,
 * u64 epoch, u64 tensor count then (name, tensor) pairs, u64 velocity
 * count then (name, tensor) pairs, then the scheduler record.
 */
struct Checkpoint {
  static constexpr char kMagic[8] = {'T', 'S', 'T', 'C', 'K', 'P', 'T', '\0'};
  static constexpr std::uint32_t kVersion = 1;

  std::string manifest;
  std::string config_text;
  std::uint64_t epoch = 0;
  TensorList<float> tensors;
  TensorList<float> velocity;
  double momentum = 0.9;
  Scheduler scheduler;

  std::string to_bytes() const;
  static Checkpoint from_bytes(const std::string& bytes);
  void save(const std::string& path) const;  // atomic
  static Checkpoint load(const std::string& path);
};

/// Deep copies of the network tensors, velocities and scheduler.
Checkpoint capture(const std::string& manifest, const TensorList<float>& tensors,
                   const SgdState<float>& sgd, const Scheduler& scheduler, std::uint64_t epoch,
                   std::string config_text = {});

/// Copies tensor values (and velocities when `sgd` is given) back in place.
/// Throws CheckpointError when the manifest differs or an entry is missing.
void restore(const Checkpoint& ckpt, const std::string& manifest, const TensorList<float>& tensors,
             SgdState<float>* sgd);

extern template struct SgdState<float>;
extern template struct SgdState<double>;

}  // namespace tstcnn
