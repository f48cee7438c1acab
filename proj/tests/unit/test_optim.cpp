#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>
#include <set>
#include <sstream>

#include "tstcnn/model.hpp"
#include "tstcnn/optim.hpp"

using namespace tstcnn;
using Action = ScheduleAction;

namespace {

NamedTensor<double> param(const std::string& path, std::vector<double> values) {
  const std::size_t n = values.size();
  return {path, TensorD(Shape{n}, std::move(values), true)};
}

struct Step {
  double loss;
  double val;
};

std::vector<ScheduleDecision> run(Scheduler& s, const std::vector<Step>& trace) {
  std::vector<ScheduleDecision> out;
  for (const auto& st : trace) out.push_back(s.update(st.loss, st.val));
  return out;
}

// Written directly from the rules: exact lr ladder, emergency before best,
// disjoint 25/35 windows measured since the last reload, patience since the
// last lr change.
struct ReferenceScheduler {
  std::vector<double> ladder{0.01, 0.001, 1e-4, 1e-5};
  std::size_t rung = 0;
  std::vector<double> losses;
  std::size_t since_change = 0;
  double best = -1;

  Action update(double loss, double val) {
    losses.push_back(loss);
    ++since_change;
    auto reload = [&] {
      rung = rung + 1 < ladder.size() ? rung + 1 : 0;
      losses.clear();
      since_change = 0;
    };
    if (best >= 0 && val < 0.7 * best) {
      reload();
      return Action::emergency_reload;
    }
    if (val > best) best = val;
    if (losses.size() >= 60 && since_change >= 50) {
      double recent = 0, previous = 0;
      for (std::size_t i = losses.size() - 25; i < losses.size(); ++i) recent += losses[i];
      for (std::size_t i = losses.size() - 60; i < losses.size() - 25; ++i) previous += losses[i];
      if (recent / 25 > previous / 35) {
        const bool at_floor = rung + 1 == ladder.size();
        reload();
        return at_floor ? Action::reload_reset : Action::reload_decay;
      }
    }
    return Action::continue_training;
  }
  double lr() const { return ladder[rung]; }
};

}  // namespace

TEST(Nesterov, HandComputedSteps) {
  TensorList<double> params{param("w", {0.0})};
  auto sgd = SgdState<double>::make(params, 0.1, 0.9);
  params[0].tensor.accumulate_grad(std::vector<double>{1.0});
  nesterov_step(params, sgd);
  EXPECT_NEAR(params[0].tensor.data()[0], -0.19, 1e-15);
  EXPECT_NEAR(sgd.velocity[0].tensor.data()[0], -0.1, 1e-15);
  nesterov_step(params, sgd);  // same gradient still in the slot
  EXPECT_NEAR(params[0].tensor.data()[0], -0.461, 1e-15);
}

TEST(Nesterov, MatchesLookAheadFormulation) {
  // Classical form: v' = mu v - lr grad(phi), phi' = phi + v', evaluated at
  // phi = theta + mu v. On a quadratic f = 0.5 a x^2 both must agree.
  const double a = 3.0, lr = 0.05, mu = 0.9;
  TensorList<double> params{param("x", {2.0})};
  auto sgd = SgdState<double>::make(params, lr, mu);
  double phi = 2.0, v = 0.0;
  for (int k = 0; k < 30; ++k) {
    params[0].tensor.clear_grad();
    const double theta = params[0].tensor.data()[0];
    params[0].tensor.accumulate_grad(std::vector<double>{a * theta});
    nesterov_step(params, sgd);
    const double look = phi + mu * v;
    v = mu * v - lr * a * look;
    phi += v;
    // theta tracks the look-ahead point phi + mu v
    EXPECT_NEAR(params[0].tensor.data()[0], phi + mu * v, 1e-12) << k;
  }
}

TEST(Nesterov, MissingGradientLeavesEverythingUntouched) {
  TensorList<double> params{param("a", {1.0, 2.0}), param("b", {3.0})};
  auto sgd = SgdState<double>::make(params, 0.1, 0.9);
  params[0].tensor.accumulate_grad(std::vector<double>{1.0, 1.0});
  try {
    nesterov_step(params, sgd);
    FAIL() << "expected ContractError";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("b"), std::string::npos);
  }
  EXPECT_EQ(params[0].tensor.data()[0], 1.0);
  EXPECT_EQ(sgd.velocity[0].tensor.data()[0], 0.0);
  zero_grad(params);
  EXPECT_FALSE(params[0].tensor.has_grad());
}

TEST(SchedulerConfig, LadderAndValidation) {
  SchedulerConfig c;
  EXPECT_EQ(c.max_level(), 3u);
  Scheduler s(c);
  EXPECT_EQ(s.lr_at(0), 0.01);
  EXPECT_EQ(s.lr_at(1), 0.001);
  EXPECT_EQ(s.lr_at(2), 1e-4);
  EXPECT_EQ(s.lr_at(3), 1e-5);
  c.emergency_ratio = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(parse_schedule_action(to_string(Action::reload_reset)), Action::reload_reset);
}

// Trace 1
TEST(SchedulerTrace, MonotoneLossNeverReschedules) {
  Scheduler s;
  std::vector<Step> trace;
  for (int e = 1; e <= 200; ++e) trace.push_back({1.0 / e, 0.5});
  for (const auto& d : run(s, trace)) {
    EXPECT_EQ(d.action, Action::continue_training);
    EXPECT_EQ(d.lr, 0.01);
  }
}

// Trace 2
TEST(SchedulerTrace, PlateauAtEpoch120DecaysOnce) {
  Scheduler s;
  std::vector<Step> trace;
  for (int e = 1; e <= 119; ++e) trace.push_back({1.0 / e, 0.5});
  trace.push_back({100.0, 0.5});
  auto d = run(s, trace);
  for (int e = 0; e < 119; ++e) ASSERT_EQ(d[e].action, Action::continue_training) << e + 1;
  EXPECT_EQ(d[119].action, Action::reload_decay);
  EXPECT_EQ(d[119].lr, 0.001);
  EXPECT_TRUE(s.state().loss_window.empty());
  EXPECT_EQ(s.state().epochs_since_lr_change, 0u);
  EXPECT_EQ(s.state().val_history.size(), 120u);
}

// Trace 3
TEST(SchedulerTrace, RepeatedPlateausWalkTheLadderThenReset) {
  Scheduler s;
  std::vector<Step> trace;
  for (int e = 1; e <= 250; ++e) trace.push_back({double(e), 0.5});
  auto d = run(s, trace);
  std::vector<std::pair<int, Action>> events;
  for (int e = 0; e < 250; ++e)
    if (d[e].action != Action::continue_training) events.push_back({e + 1, d[e].action});
  const std::vector<std::pair<int, Action>> expected{{60, Action::reload_decay},
                                                     {120, Action::reload_decay},
                                                     {180, Action::reload_decay},
                                                     {240, Action::reload_reset}};
  EXPECT_EQ(events, expected);
  EXPECT_EQ(d[59].lr, 0.001);
  EXPECT_EQ(d[119].lr, 1e-4);
  EXPECT_EQ(d[179].lr, 1e-5);
  EXPECT_EQ(d[239].lr, 0.01);
}

// Trace 4
TEST(SchedulerTrace, EmergencyReloadBelowSeventyPercentOfBest) {
  Scheduler s;
  auto d = run(s, {{1.0, 0.8}, {0.9, 0.57}, {0.8, 0.56}, {0.7, 0.5}});
  EXPECT_TRUE(d[0].new_best);
  EXPECT_EQ(d[1].action, Action::continue_training);  // 0.57 >= 0.56
  EXPECT_EQ(d[2].action, Action::continue_training);  // boundary is not a drop
  EXPECT_EQ(d[3].action, Action::emergency_reload);
  EXPECT_EQ(d[3].lr, 0.001);
  EXPECT_EQ(s.state().best_acc, 0.8);
  EXPECT_EQ(s.state().best_epoch, 1u);
}

// Trace 5
TEST(SchedulerTrace, PatienceGatesTheComparison) {
  SchedulerConfig c;
  c.patience = 80;
  Scheduler s(c);
  std::vector<Step> trace;
  for (int e = 1; e <= 100; ++e) trace.push_back({double(e), 0.5});
  auto d = run(s, trace);
  for (int e = 0; e < 100; ++e)
    EXPECT_EQ(d[e].action, e + 1 == 80 ? Action::reload_decay : Action::continue_training) << e + 1;

  SchedulerConfig shortw;
  shortw.recent_window = 5;
  shortw.previous_window = 5;
  Scheduler s2(shortw);
  auto d2 = run(s2, trace);
  for (int e = 0; e < 100; ++e)
    EXPECT_EQ(d2[e].action, e + 1 == 50 || e + 1 == 100 ? Action::reload_decay
                                                          : Action::continue_training)
        << e + 1;
}

// Trace 6
TEST(SchedulerTrace, EmergencyResetsWindowsAndWrapsAtFloor) {
  Scheduler s;
  std::vector<Step> trace;
  // three emergencies walk the ladder to the floor, a fourth resets
  trace.push_back({1.0, 0.9});
  for (int k = 0; k < 4; ++k) trace.push_back({1.0, 0.1});
  auto d = run(s, trace);
  EXPECT_EQ(d[1].lr, 0.001);
  EXPECT_EQ(d[2].lr, 1e-4);
  EXPECT_EQ(d[3].lr, 1e-5);
  EXPECT_EQ(d[4].lr, 0.01);
  for (int k = 1; k <= 4; ++k) EXPECT_EQ(d[k].action, Action::emergency_reload);
  // after the last reload the 60-epoch window starts over
  Scheduler s2;
  std::vector<Step> t2{{1.0, 0.9}};
  for (int e = 0; e < 30; ++e) t2.push_back({double(e), 0.9});
  t2.push_back({1.0, 0.1});  // emergency at epoch 32
  for (int e = 0; e < 70; ++e) t2.push_back({double(e), 0.9});
  auto d2 = run(s2, t2);
  EXPECT_EQ(d2[31].action, Action::emergency_reload);
  for (int e = 32; e < 91; ++e) EXPECT_EQ(d2[e].action, Action::continue_training) << e + 1;
  EXPECT_EQ(d2[91].action, Action::reload_decay);  // 60th epoch since the reload
}

// Trace 7
TEST(SchedulerTrace, FlatLossIsNotAPlateau) {
  Scheduler s;
  std::vector<Step> trace(150, {0.5, 0.5});
  for (const auto& d : run(s, trace)) EXPECT_EQ(d.action, Action::continue_training);
}

TEST(Scheduler, PlateauTestNeedsFullWindow) {
  Scheduler s;
  s.update(1.0, 0.5);
  EXPECT_THROW(s.plateau_detected(), ContractError);
}

TEST(Scheduler, AgreesWithReferenceOnRandomTraces) {
  std::set<double> ladder{0.01, 0.001, 1e-4, 1e-5};
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0, 0.05);
    std::uniform_real_distribution<double> u(0, 1);
    Scheduler s;
    ReferenceScheduler ref;
    double loss = 2.0, acc = 0.3;
    double prev_lr = s.lr();
    for (int e = 0; e < 400; ++e) {
      loss = std::max(0.0, loss + noise(rng) - 0.002);
      acc = std::clamp(acc + noise(rng), 0.0, 1.0);
      if (u(rng) < 0.01) acc *= 0.5;
      auto d = s.update(loss, acc);
      ASSERT_EQ(d.action, ref.update(loss, acc)) << "seed " << seed << " epoch " << e + 1;
      ASSERT_EQ(d.lr, ref.lr());
      ASSERT_TRUE(ladder.contains(d.lr));
      if (d.action == Action::continue_training) ASSERT_EQ(d.lr, prev_lr);
      prev_lr = d.lr;
    }
  }
}

TEST(Scheduler, IsAPureFunctionOfItsState) {
  Scheduler a;
  for (int e = 0; e < 70; ++e) a.update(1.0 + e % 7, 0.4 + 0.001 * e);
  Scheduler b;
  b.set_state(a.state());
  for (int e = 0; e < 100; ++e) {
    const double l = std::sin(e), v = 0.5 + 0.3 * std::cos(e);
    auto da = a.update(l, v);
    auto db = b.update(l, v);
    ASSERT_EQ(da.action, db.action);
    ASSERT_EQ(da.lr, db.lr);
  }
  EXPECT_EQ(a.state(), b.state());
}

TEST(Scheduler, SerializationRoundTrip) {
  SchedulerConfig c;
  c.patience = 7;
  Scheduler s(c);
  for (int e = 0; e < 40; ++e) s.update(1.0 / (e + 1), 0.1 * (e % 9));
  std::stringstream ss;
  s.write(ss);
  auto r = Scheduler::read(ss);
  EXPECT_EQ(r.state(), s.state());
  EXPECT_EQ(r.config().patience, 7u);
  EXPECT_EQ(r.lr(), s.lr());
}

namespace {

ModelConfig tiny_config() {
  auto c = ModelConfig::desk_scale(ModelKind::twin, BlockMode::residual, 1);
  c.frames = 8;
  c.height = 8;
  c.width = 8;
  c.filters = {4, 4, 4};
  c.fc_width = 8;
  return c;
}

ModelInput<float> tiny_input(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0, 1);
  ModelInput<float> in{TensorF(Shape{4, 3, 8, 8, 8}), TensorF(Shape{4, 2, 8, 8, 8})};
  for (auto& v : in.rgb.mutable_data()) v = d(rng);
  for (auto& v : in.flow.mutable_data()) v = d(rng);
  return in;
}

std::vector<float> eval_logits(Network<float>& net, const ModelInput<float>& in) {
  Tape<float> tape(false);
  auto out = net.forward(tape, in, nn::Mode::eval);
  return {out.logits.data().begin(), out.logits.data().end()};
}

void train_step(Network<float>& net, SgdState<float>& sgd, const ModelInput<float>& in) {
  const int labels[] = {0, 1, 2, 3};
  auto params = net.parameters();
  zero_grad(params);
  Tape<float> tape;
  auto out = net.forward(tape, in, nn::Mode::train);
  tape.backward(nn::softmax_cross_entropy(tape, out.logits, labels));
  nesterov_step(params, sgd);
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  Network<float> net(tiny_config());
  net.initialize(1);
  auto sgd = SgdState<float>::make(net.parameters(), 0.01, 0.9);
  train_step(net, sgd, tiny_input(1));
  Scheduler sched;
  for (int e = 0; e < 5; ++e) sched.update(1.0 - 0.1 * e, 0.2 * e);
  auto ckpt = capture(net.manifest(), net.tensors(), sgd, sched, 5, "seed=1\n");
  const auto bytes = ckpt.to_bytes();
  ASSERT_EQ(std::memcmp(bytes.data(), Checkpoint::kMagic, 8), 0);
  auto back = Checkpoint::from_bytes(bytes);
  EXPECT_EQ(back.to_bytes(), bytes);
  EXPECT_EQ(back.epoch, 5u);
  EXPECT_EQ(back.config_text, "seed=1\n");
  EXPECT_EQ(back.scheduler.state(), sched.state());

  const auto path = (std::filesystem::temp_directory_path() / "tstcnn_ckpt_roundtrip.ckpt").string();
  ckpt.save(path);
  EXPECT_EQ(Checkpoint::load(path).to_bytes(), bytes);
  std::filesystem::remove(path);

  // restoring into a modified network brings every tensor back
  auto saved = eval_logits(net, tiny_input(2));
  train_step(net, sgd, tiny_input(3));
  ASSERT_NE(eval_logits(net, tiny_input(2)), saved);
  restore(back, net.manifest(), net.tensors(), &sgd);
  EXPECT_EQ(eval_logits(net, tiny_input(2)), saved);
  for (std::size_t i = 0; i < sgd.velocity.size(); ++i) {
    const auto a = sgd.velocity[i].tensor.data();
    const auto b = ckpt.velocity[i].tensor.data();
    ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST(Checkpoint, CaptureIsADeepCopy) {
  Network<float> net(tiny_config());
  net.initialize(1);
  auto sgd = SgdState<float>::make(net.parameters(), 0.01, 0.9);
  auto ckpt = capture(net.manifest(), net.tensors(), sgd, Scheduler{}, 0);
  const auto before = ckpt.to_bytes();
  train_step(net, sgd, tiny_input(1));
  EXPECT_EQ(ckpt.to_bytes(), before);
}

TEST(Checkpoint, IncompatibleAndCorruptFilesRejected) {
  Network<float> net(tiny_config());
  auto sgd = SgdState<float>::make(net.parameters(), 0.01, 0.9);
  auto ckpt = capture(net.manifest(), net.tensors(), sgd, Scheduler{}, 0);

  auto other_cfg = tiny_config();
  other_cfg.fc_width = 9;
  Network<float> other(other_cfg);
  EXPECT_THROW(restore(ckpt, other.manifest(), other.tensors(), nullptr), CheckpointError);

  auto missing = ckpt;
  missing.tensors.pop_back();
  EXPECT_THROW(restore(missing, net.manifest(), net.tensors(), nullptr), CheckpointError);

  auto bytes = ckpt.to_bytes();
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(Checkpoint::from_bytes(bad_magic), CheckpointError);
  EXPECT_THROW(Checkpoint::from_bytes(bytes.substr(0, bytes.size() / 2)), CheckpointError);
  auto bad_version = bytes;
  bad_version[8] = 9;
  EXPECT_THROW(Checkpoint::from_bytes(bad_version), CheckpointError);
  EXPECT_THROW(Checkpoint::from_bytes(bytes + "x"), CheckpointError);
  EXPECT_THROW(Checkpoint::load("/nonexistent/dir/x.ckpt"), CheckpointError);
}

TEST(Checkpoint, ReloadReplaysTheSavedState) {
  // train 10 steps saving at step 6, reload at 10: the next forward and the
  // next update equal those taken from the step-6 state directly
  Network<float> net(tiny_config());
  net.initialize(7);
  auto sgd = SgdState<float>::make(net.parameters(), 0.01, 0.9);
  Checkpoint at6;
  std::vector<float> logits6;
  for (int step = 1; step <= 10; ++step) {
    train_step(net, sgd, tiny_input(step));
    if (step == 6) {
      at6 = capture(net.manifest(), net.tensors(), sgd, Scheduler{}, 6);
      logits6 = eval_logits(net, tiny_input(100));
    }
  }
  restore(at6, net.manifest(), net.tensors(), &sgd);
  EXPECT_EQ(eval_logits(net, tiny_input(100)), logits6);

  Network<float> direct(tiny_config());
  auto sgd2 = SgdState<float>::make(direct.parameters(), 0.01, 0.9);
  restore(at6, direct.manifest(), direct.tensors(), &sgd2);
  train_step(net, sgd, tiny_input(11));
  train_step(direct, sgd2, tiny_input(11));
  EXPECT_EQ(eval_logits(net, tiny_input(100)), eval_logits(direct, tiny_input(100)));
}
